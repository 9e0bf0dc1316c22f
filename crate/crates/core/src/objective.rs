//! The joint objective `L + lambda * Q` restricted to one batch of triplets,
//! with codes held fixed, and its gradients with respect to the encoder
//! parameters and the codebooks.

use crate::encoder::{loss_grad_embeddings, triplet_loss, EncoderParams, LayerGrad, QuantTargets};
use crate::error::{arg_err, Result};
use crate::linalg::Matrix;
use crate::mining::Triplet;
use crate::quantizer::{codebook_gradient, orthogonality_penalty, CodeMatrix, CodebookSet, PenaltyPairs};

/// Everything but the encoder and codebooks that the objective depends on.
#[derive(Debug, Clone, Copy)]
pub struct BatchObjective<'a> {
    /// Raw features; triplet indices address its rows.
    pub features: &'a Matrix,
    pub triplets: &'a [Triplet],
    /// One code row per feature row.
    pub codes: &'a CodeMatrix,
    pub delta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub pairs: PenaltyPairs,
}

/// Summed terms of the objective over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    /// `sum_i L_i`
    pub triplet: f64,
    /// `sum_i q_i`, the squared residuals of all three members.
    pub residual: f64,
    /// `gamma * penalty(C)`
    pub penalty: f64,
    /// Triplets whose hinge is inactive at these embeddings.
    pub inactive: usize,
}

impl BatchLoss {
    /// `L + lambda * Q`.
    pub fn total(&self, lambda: f64) -> f64 {
        self.triplet + lambda * (self.residual + self.penalty)
    }
}

impl<'a> BatchObjective<'a> {
    /// Features of the batch stacked as `(anchor, positive, negative)` triples.
    pub fn stacked_inputs(&self) -> Matrix {
        let rows: Vec<usize> = self
            .triplets
            .iter()
            .flat_map(|t| [t.anchor, t.positive, t.negative])
            .collect();
        self.features.select_rows(&rows)
    }

    fn stacked_codes(&self) -> CodeMatrix {
        let rows: Vec<usize> = self
            .triplets
            .iter()
            .flat_map(|t| [t.anchor, t.positive, t.negative])
            .collect();
        self.codes.select_rows(&rows)
    }

    fn check(&self, codebooks: &CodebookSet) -> Result<()> {
        if self.codes.len() != self.features.rows() {
            return Err(arg_err!("need one code row per feature row"));
        }
        if self.codes.num_codebooks() != codebooks.num_codebooks() {
            return Err(arg_err!("codes and codebooks disagree on M"));
        }
        Ok(())
    }

    fn terms(&self, z: &Matrix, codebooks: &CodebookSet) -> BatchLoss {
        let d = codebooks.dim();
        let codes = self.stacked_codes();
        let mut out = BatchLoss::default();
        let mut recon = vec![0.0; d];
        for (t, _) in self.triplets.iter().enumerate() {
            let (za, zp, zn) = (z.row(3 * t), z.row(3 * t + 1), z.row(3 * t + 2));
            let l = triplet_loss(za, zp, zn, self.delta);
            if l == 0.0 {
                out.inactive += 1;
            }
            out.triplet += l;
            for r in 0..3 {
                codebooks.reconstruct_into(codes.row(3 * t + r), &mut recon);
                out.residual += crate::linalg::sq_dist(z.row(3 * t + r), &recon);
            }
        }
        if self.gamma != 0.0 {
            out.penalty = self.gamma * orthogonality_penalty(codebooks, self.pairs);
        }
        out
    }

    pub fn evaluate(&self, encoder: &EncoderParams, codebooks: &CodebookSet) -> Result<BatchLoss> {
        self.check(codebooks)?;
        let z = encoder.forward(&self.stacked_inputs())?;
        Ok(self.terms(&z, codebooks))
    }

    /// Loss terms (at the pre-update parameters) and `scale * d(L + lambda Q)/dTheta`.
    pub fn encoder_gradient(
        &self,
        encoder: &EncoderParams,
        codebooks: &CodebookSet,
        scale: f64,
    ) -> Result<(BatchLoss, Vec<LayerGrad>)> {
        self.check(codebooks)?;
        let cache = encoder.forward_cached(&self.stacked_inputs())?;
        let z = cache.output();
        let loss = self.terms(z, codebooks);
        let codes = self.stacked_codes();
        let d = codebooks.dim();
        let mut upstream = Matrix::zeros(z.rows(), d);
        let mut recon = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        for t in 0..self.triplets.len() {
            for (r, buf) in recon.iter_mut().enumerate() {
                codebooks.reconstruct_into(codes.row(3 * t + r), buf);
            }
            let targets = QuantTargets {
                anchor: &recon[0],
                positive: &recon[1],
                negative: &recon[2],
            };
            let g = loss_grad_embeddings(
                z.row(3 * t),
                z.row(3 * t + 1),
                z.row(3 * t + 2),
                self.delta,
                self.lambda,
                Some(targets),
            );
            for (r, gv) in [g.anchor, g.positive, g.negative].into_iter().enumerate() {
                for (dst, v) in upstream.row_mut(3 * t + r).iter_mut().zip(gv) {
                    *dst = scale * v;
                }
            }
        }
        let grads = encoder.param_gradients(&cache, &upstream)?;
        Ok((loss, grads))
    }

    /// `d(L + lambda Q)/dC = lambda dQ/dC` in codeword layout.
    pub fn codebook_gradient(&self, encoder: &EncoderParams, codebooks: &CodebookSet) -> Result<Vec<f64>> {
        self.check(codebooks)?;
        let z = encoder.forward(&self.stacked_inputs())?;
        let mut g = codebook_gradient(codebooks, &z, &self.stacked_codes(), self.gamma, self.pairs);
        g.iter_mut().for_each(|v| *v *= self.lambda);
        Ok(g)
    }
}
