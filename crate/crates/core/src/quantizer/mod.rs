//! Shared additive codebooks, compact codes and the weak-orthogonality
//! quantization objective.
//!
//! An embedding `z` is approximated by the sum of one codeword from each of the
//! `M` codebooks. Codebook `m` holds `K` codewords of dimension `D`; a code row
//! stores the `M` selected sub-indices. The training objective over a set of
//! embeddings is
//!
//! ```text
//! Q = sum_i |z_i - sum_m C_m b_mi|^2 + gamma * sum_(m, m') |C_m^T C_m' - I|_F^2
//! ```
//!
//! where the pair sum runs over every ordered pair, diagonal included, unless
//! [`PenaltyPairs::OffDiagonal`] is selected.

mod kmeans;
mod pq;

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::encoder::ByteReader;
use crate::error::{arg_err, Error, Result};
use crate::linalg::{axpy, dot, sq_dist, Matrix};

pub use kmeans::{assign_nearest, kmeans_pp_init, lloyd, KMeansResult};
pub use pq::{init_product_quantization, subspace_blocks, update_product_codebooks};

pub const CODEBOOK_MAGIC: [u8; 4] = *b"TQCB";
pub const CODES_MAGIC: [u8; 4] = *b"TQCD";

/// `M` codebooks of `K` codewords each, all of dimension `D`.
///
/// Codewords are stored contiguously, codebook-major: codeword `k` of codebook
/// `m` lives at `(m * K + k) * D`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    m: usize,
    k: usize,
    d: usize,
    words: Vec<f64>,
}

impl CodebookSet {
    pub fn zeros(m: usize, k: usize, d: usize) -> Result<Self> {
        if m == 0 || k == 0 || d == 0 {
            return Err(arg_err!("codebook geometry must be positive, got M={m} K={k} D={d}"));
        }
        if k > u16::MAX as usize + 1 {
            return Err(arg_err!("K={k} does not fit a 16-bit sub-index"));
        }
        Ok(Self {
            m,
            k,
            d,
            words: vec![0.0; m * k * d],
        })
    }

    pub fn from_words(m: usize, k: usize, d: usize, words: Vec<f64>) -> Result<Self> {
        let mut c = Self::zeros(m, k, d)?;
        if words.len() != m * k * d {
            return Err(arg_err!("expected {} codeword values, got {}", m * k * d, words.len()));
        }
        if words.iter().any(|v| !v.is_finite()) {
            return Err(arg_err!("codewords must be finite"));
        }
        c.words = words;
        Ok(c)
    }

    #[inline]
    pub fn num_codebooks(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn codebook_size(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Code length in bits, `M * log2 K`.
    pub fn code_bits(&self) -> f64 {
        self.m as f64 * (self.k as f64).log2()
    }

    #[inline]
    pub fn codeword(&self, m: usize, k: usize) -> &[f64] {
        let start = (m * self.k + k) * self.d;
        &self.words[start..start + self.d]
    }

    #[inline]
    pub fn codeword_mut(&mut self, m: usize, k: usize) -> &mut [f64] {
        let start = (m * self.k + k) * self.d;
        &mut self.words[start..start + self.d]
    }

    /// All `M * K` codewords in concatenated column order.
    pub fn words(&self) -> &[f64] {
        &self.words
    }

    pub fn words_mut(&mut self) -> &mut [f64] {
        &mut self.words
    }

    /// The `D x MK` concatenated matrix `[C_1, ..., C_M]`.
    pub fn concatenated(&self) -> Matrix {
        let mk = self.m * self.k;
        let mut c = Matrix::zeros(self.d, mk);
        for j in 0..mk {
            for (r, v) in self.words[j * self.d..(j + 1) * self.d].iter().enumerate() {
                c[(r, j)] = *v;
            }
        }
        c
    }

    pub fn all_finite(&self) -> bool {
        self.words.iter().all(|v| v.is_finite())
    }

    fn check_code(&self, code: &[u16]) -> Result<()> {
        if code.len() != self.m {
            return Err(arg_err!("code has {} entries, expected M={}", code.len(), self.m));
        }
        if let Some(&c) = code.iter().find(|&&c| c as usize >= self.k) {
            return Err(arg_err!("sub-index {c} out of range for K={}", self.k));
        }
        Ok(())
    }

    /// Writes `sum_m codeword(m, code[m])` into `out`. Panics on bad codes.
    #[inline]
    pub fn reconstruct_into(&self, code: &[u16], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (m, &c) in code.iter().enumerate() {
            axpy(1.0, self.codeword(m, c as usize), out);
        }
    }

    /// Layout: magic, then `M`, `K`, `D` as `u32`, then every codeword as
    /// little-endian `f64`, codebook-major and one codeword (column) at a time.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CODEBOOK_MAGIC.to_vec();
        for v in [self.m, self.k, self.d] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.words {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CODEBOOK_MAGIC {
            return Err(Error::Format("bad codebook file magic".into()));
        }
        let (m, k, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let expected = m * k * d * 8;
        if bytes.len() - r.pos != expected {
            return Err(Error::Format(format!(
                "codebook payload is {} bytes, header declares {expected}",
                bytes.len() - r.pos
            )));
        }
        let words = (0..m * k * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Self::from_words(m, k, d, words).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// `sum_m codeword(m, code[m])`.
pub fn reconstruct(codebooks: &CodebookSet, code: &[u16]) -> Result<Vec<f64>> {
    codebooks.check_code(code)?;
    let mut out = vec![0.0; codebooks.dim()];
    codebooks.reconstruct_into(code, &mut out);
    Ok(out)
}

/// `N x M` sub-indices, each in `[0, K)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    m: usize,
    k: usize,
    codes: Vec<u16>,
}

impl CodeMatrix {
    pub fn new(m: usize, k: usize, codes: Vec<u16>) -> Result<Self> {
        if m == 0 || k == 0 || k > u16::MAX as usize + 1 {
            return Err(arg_err!("invalid code geometry M={m} K={k}"));
        }
        if !codes.len().is_multiple_of(m) {
            return Err(arg_err!("{} sub-indices do not divide into rows of {m}", codes.len()));
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= k) {
            return Err(arg_err!("sub-index {c} out of range for K={k}"));
        }
        Ok(Self { m, k, codes })
    }

    pub fn empty(m: usize, k: usize) -> Self {
        Self {
            m,
            k,
            codes: Vec::new(),
        }
    }

    pub fn from_rows(m: usize, k: usize, rows: impl IntoIterator<Item = Vec<u16>>) -> Result<Self> {
        let codes = rows.into_iter().flatten().collect();
        Self::new(m, k, codes)
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn num_codebooks(&self) -> usize {
        self.m
    }

    pub fn codebook_size(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u16] {
        &self.codes[i * self.m..(i + 1) * self.m]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[u16]> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.codes
    }

    pub fn select_rows(&self, indices: &[usize]) -> CodeMatrix {
        let mut codes = Vec::with_capacity(indices.len() * self.m);
        for &i in indices {
            codes.extend_from_slice(self.row(i));
        }
        CodeMatrix {
            m: self.m,
            k: self.k,
            codes,
        }
    }

    /// Layout: magic, then `N`, `M`, `K` as `u32`, then one byte per sub-index
    /// when `K <= 256`, otherwise two bytes little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CODES_MAGIC.to_vec();
        for v in [self.len(), self.m, self.k] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        if self.k <= 256 {
            out.extend(self.codes.iter().map(|&c| c as u8));
        } else {
            for c in &self.codes {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CODES_MAGIC {
            return Err(Error::Format("bad code file magic".into()));
        }
        let (n, m, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let width = if k <= 256 { 1 } else { 2 };
        let payload = &bytes[r.pos..];
        if payload.len() != n * m * width {
            return Err(Error::Format(format!(
                "code payload is {} bytes, header declares {}",
                payload.len(),
                n * m * width
            )));
        }
        let codes = if width == 1 {
            payload.iter().map(|&b| b as u16).collect()
        } else {
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        };
        Self::new(m, k, codes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Which `(m, m')` codebook pairs enter the orthogonality penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PenaltyPairs {
    /// Every ordered pair including `m = m'`.
    #[default]
    All,
    /// Only `m != m'`.
    OffDiagonal,
}

impl PenaltyPairs {
    #[inline]
    fn includes(self, m: usize, m2: usize) -> bool {
        match self {
            PenaltyPairs::All => true,
            PenaltyPairs::OffDiagonal => m != m2,
        }
    }
}

/// Codebook and code optimization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    /// Orthogonality weight.
    pub gamma: f64,
    /// Weight of the quantization loss in the encoder objective.
    pub lambda: f64,
    pub icm_max_iters: usize,
    pub codebook_lr: f64,
    pub codebook_gd_steps: usize,
    pub penalty_pairs: PenaltyPairs,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            lambda: 0.1,
            icm_max_iters: 3,
            codebook_lr: 1e-3,
            codebook_gd_steps: 20,
            penalty_pairs: PenaltyPairs::All,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda), ("codebook_lr", self.codebook_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(arg_err!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.icm_max_iters == 0 {
            return Err(arg_err!("icm_max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Squared residual of every row under its code, summed.
pub fn residual_sum(codebooks: &CodebookSet, z: &Matrix, codes: &CodeMatrix) -> f64 {
    assert_eq!(z.rows(), codes.len(), "one code per embedding row");
    let mut recon = vec![0.0; codebooks.dim()];
    z.iter_rows()
        .zip(codes.iter_rows())
        .map(|(zr, c)| {
            codebooks.reconstruct_into(c, &mut recon);
            sq_dist(zr, &recon)
        })
        .sum()
}

/// `M K x M K` Gram matrix `C^T C` of all codewords.
pub fn gram(codebooks: &CodebookSet) -> Matrix {
    let n = codebooks.num_codebooks() * codebooks.codebook_size();
    let d = codebooks.dim();
    let w = codebooks.words();
    let mut g = Matrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = dot(&w[a * d..(a + 1) * d], &w[b * d..(b + 1) * d]);
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    g
}

/// `sum_(m, m') |C_m^T C_m' - I_K|_F^2` over the selected pairs.
pub fn orthogonality_penalty(codebooks: &CodebookSet, pairs: PenaltyPairs) -> f64 {
    let (m, k) = (codebooks.num_codebooks(), codebooks.codebook_size());
    let g = gram(codebooks);
    let mut total = 0.0;
    for m1 in 0..m {
        for m2 in 0..m {
            if !pairs.includes(m1, m2) {
                continue;
            }
            for k1 in 0..k {
                for k2 in 0..k {
                    let target = if k1 == k2 { 1.0 } else { 0.0 };
                    let diff = g[(m1 * k + k1, m2 * k + k2)] - target;
                    total += diff * diff;
                }
            }
        }
    }
    total
}

/// Residual term plus `gamma` times the orthogonality penalty. `z` stacks the
/// embeddings of every triplet role, one code row each.
pub fn quantization_loss(
    codebooks: &CodebookSet,
    z: &Matrix,
    codes: &CodeMatrix,
    gamma: f64,
    pairs: PenaltyPairs,
) -> f64 {
    let residual = residual_sum(codebooks, z, codes);
    if gamma == 0.0 {
        residual
    } else {
        residual + gamma * orthogonality_penalty(codebooks, pairs)
    }
}

/// Result of encoding one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IcmOutcome {
    pub code: Vec<u16>,
    pub residual: f64,
    /// Residual before the first sweep followed by the residual after each sweep.
    pub trace: Vec<f64>,
}

/// Independent per-codebook nearest codeword, treating the other codebooks as zero.
pub fn independent_nearest(codebooks: &CodebookSet, z: &[f64]) -> Vec<u16> {
    (0..codebooks.num_codebooks())
        .map(|m| nearest_in_codebook(codebooks, m, z, None).0 as u16)
        .collect()
}

/// Codeword of codebook `m` closest to `target`. Ties keep `incumbent` (when
/// given) and otherwise the lowest index.
fn nearest_in_codebook(
    codebooks: &CodebookSet,
    m: usize,
    target: &[f64],
    incumbent: Option<usize>,
) -> (usize, f64) {
    let mut best = incumbent.unwrap_or(0);
    let mut best_val = sq_dist(target, codebooks.codeword(m, best));
    for k in 0..codebooks.codebook_size() {
        let v = sq_dist(target, codebooks.codeword(m, k));
        if v < best_val {
            best = k;
            best_val = v;
        }
    }
    (best, best_val)
}

/// Iterated conditional modes: sweep `m = 0..M`, re-picking each sub-index
/// exhaustively with the others fixed, until a sweep changes nothing or
/// `max_iters` sweeps have run. Never increases the residual of the start code.
///
/// Without `init`, starts from [`independent_nearest`].
pub fn icm_encode(
    codebooks: &CodebookSet,
    z: &[f64],
    init: Option<&[u16]>,
    max_iters: usize,
) -> Result<IcmOutcome> {
    if z.len() != codebooks.dim() {
        return Err(arg_err!("embedding has {} values, codebooks expect {}", z.len(), codebooks.dim()));
    }
    if max_iters == 0 {
        return Err(arg_err!("max_iters must be at least 1"));
    }
    let mut code = match init {
        Some(c) => {
            codebooks.check_code(c)?;
            c.to_vec()
        }
        None => independent_nearest(codebooks, z),
    };
    Ok(icm_from(codebooks, z, &mut code, max_iters))
}

fn icm_from(codebooks: &CodebookSet, z: &[f64], code: &mut [u16], max_iters: usize) -> IcmOutcome {
    let d = codebooks.dim();
    let mut recon = vec![0.0; d];
    codebooks.reconstruct_into(code, &mut recon);
    // residual vector r = z - recon
    let mut r: Vec<f64> = z.iter().zip(&recon).map(|(a, b)| a - b).collect();
    let mut trace = vec![r.iter().map(|v| v * v).sum::<f64>()];
    let mut target = vec![0.0; d];
    for _ in 0..max_iters {
        let mut changed = false;
        for m in 0..codebooks.num_codebooks() {
            let current = code[m] as usize;
            target.copy_from_slice(&r);
            axpy(1.0, codebooks.codeword(m, current), &mut target);
            let (best, _) = nearest_in_codebook(codebooks, m, &target, Some(current));
            if best != current {
                changed = true;
                code[m] = best as u16;
            }
            r.copy_from_slice(&target);
            axpy(-1.0, codebooks.codeword(m, best), &mut r);
        }
        trace.push(r.iter().map(|v| v * v).sum());
        if !changed {
            break;
        }
    }
    IcmOutcome {
        code: code.to_vec(),
        residual: *trace.last().unwrap(),
        trace,
    }
}

/// Encodes every row of `z` in parallel. `warm` supplies per-row start codes.
pub fn encode_all(
    codebooks: &CodebookSet,
    z: &Matrix,
    warm: Option<&CodeMatrix>,
    max_iters: usize,
) -> Result<CodeMatrix> {
    if z.rows() > 0 && z.cols() != codebooks.dim() {
        return Err(arg_err!("embeddings have {} columns, codebooks expect {}", z.cols(), codebooks.dim()));
    }
    if let Some(w) = warm {
        if w.len() != z.rows() || w.num_codebooks() != codebooks.num_codebooks() {
            return Err(arg_err!("warm-start codes do not match the embeddings"));
        }
    }
    if max_iters == 0 {
        return Err(arg_err!("max_iters must be at least 1"));
    }
    let rows: Vec<Vec<u16>> = (0..z.rows())
        .into_par_iter()
        .map(|i| {
            let zr = z.row(i);
            let mut code = match warm {
                Some(w) => w.row(i).to_vec(),
                None => independent_nearest(codebooks, zr),
            };
            icm_from(codebooks, zr, &mut code, max_iters).code
        })
        .collect();
    CodeMatrix::from_rows(codebooks.num_codebooks(), codebooks.codebook_size(), rows)
}

/// `dQ/dC` in codeword layout (same shape as [`CodebookSet::words`]).
///
/// The residual part `2 C B B^T - 2 Z B^T` is accumulated per row as `2 (recon -
/// z)` onto each selected codeword. The penalty part is
/// `4 gamma sum_(m' paired with m) C_m' (C_m'^T C_m - I)` for codebook `m`.
pub fn codebook_gradient(
    codebooks: &CodebookSet,
    z: &Matrix,
    codes: &CodeMatrix,
    gamma: f64,
    pairs: PenaltyPairs,
) -> Vec<f64> {
    let d = codebooks.dim();
    let (m, k) = (codebooks.num_codebooks(), codebooks.codebook_size());
    let mut grad = vec![0.0; codebooks.words().len()];
    let mut recon = vec![0.0; d];
    for (zr, c) in z.iter_rows().zip(codes.iter_rows()) {
        codebooks.reconstruct_into(c, &mut recon);
        for (mi, &ci) in c.iter().enumerate() {
            let start = (mi * k + ci as usize) * d;
            let g = &mut grad[start..start + d];
            for ((gv, rv), zv) in g.iter_mut().zip(&recon).zip(zr) {
                *gv += 2.0 * (rv - zv);
            }
        }
    }
    if gamma != 0.0 {
        let gm = gram(codebooks);
        let w = codebooks.words();
        for m1 in 0..m {
            for k1 in 0..k {
                let col = m1 * k + k1;
                let start = col * d;
                for m2 in 0..m {
                    if !pairs.includes(m2, m1) {
                        continue;
                    }
                    for k2 in 0..k {
                        let other = m2 * k + k2;
                        let target = if k1 == k2 { 1.0 } else { 0.0 };
                        let coef = 4.0 * gamma * (gm[(other, col)] - target);
                        if coef != 0.0 {
                            axpy(coef, &w[other * d..(other + 1) * d], &mut grad[start..start + d]);
                        }
                    }
                }
            }
        }
    }
    grad
}

/// Outcome of [`update_codebooks`].
#[derive(Debug, Clone)]
pub struct CodebookUpdate {
    pub codebooks: CodebookSet,
    /// `Q` at the incoming codebooks.
    pub initial_loss: f64,
    /// `Q` at the closed-form warm start.
    pub analytic_loss: f64,
    /// `Q` after gradient descent.
    pub final_loss: f64,
}

/// Two-stage codebook update with codes fixed.
///
/// First the `gamma = 0` normal equations are solved in closed form,
/// regularized toward the incoming codebooks:
/// `C = (Z B^T + eps C_prev)(B B^T + eps I)^-1` with `eps = 1e-6 trace(B B^T) / MK`.
/// The pull toward `C_prev` keeps never-assigned codewords in place. Then
/// `codebook_gd_steps` steps of gradient descent on the full objective run from
/// that start, halving the step whenever a step would increase `Q`.
pub fn update_codebooks(
    codebooks: &CodebookSet,
    z: &Matrix,
    codes: &CodeMatrix,
    config: &QuantConfig,
) -> Result<CodebookUpdate> {
    config.validate()?;
    if z.rows() == 0 {
        return Err(arg_err!("codebook update needs at least one coded embedding"));
    }
    if z.rows() != codes.len() || z.cols() != codebooks.dim() {
        return Err(arg_err!("embeddings and codes do not match the codebooks"));
    }
    let pairs = config.penalty_pairs;
    let loss = |c: &CodebookSet| quantization_loss(c, z, codes, config.gamma, pairs);
    let initial_loss = loss(codebooks);

    let mut current = solve_normal_equations(codebooks, z, codes)?;
    let analytic_loss = loss(&current);
    let mut current_loss = analytic_loss;

    let mut lr = config.codebook_lr;
    for _ in 0..config.codebook_gd_steps {
        let grad = codebook_gradient(&current, z, codes, config.gamma, pairs);
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = current.clone();
            for (w, g) in trial.words_mut().iter_mut().zip(&grad) {
                *w -= lr * g;
            }
            let trial_loss = loss(&trial);
            if trial.all_finite() && trial_loss <= current_loss {
                current = trial;
                current_loss = trial_loss;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !current.all_finite() {
        return Err(Error::Training("codebook update produced non-finite codewords".into()));
    }
    Ok(CodebookUpdate {
        codebooks: current,
        initial_loss,
        analytic_loss,
        final_loss: current_loss,
    })
}

fn solve_normal_equations(codebooks: &CodebookSet, z: &Matrix, codes: &CodeMatrix) -> Result<CodebookSet> {
    let (m, k, d) = (codebooks.num_codebooks(), codebooks.codebook_size(), codebooks.dim());
    let mk = m * k;
    let mut bbt = nalgebra::DMatrix::<f64>::zeros(mk, mk);
    // Z B^T is D x MK; stored transposed (MK x D) to match the solve.
    let mut rhs = nalgebra::DMatrix::<f64>::zeros(mk, d);
    for (zr, c) in z.iter_rows().zip(codes.iter_rows()) {
        for (m1, &c1) in c.iter().enumerate() {
            let a = m1 * k + c1 as usize;
            for (m2, &c2) in c.iter().enumerate() {
                bbt[(a, m2 * k + c2 as usize)] += 1.0;
            }
            for (j, v) in zr.iter().enumerate() {
                rhs[(a, j)] += v;
            }
        }
    }
    let eps = 1e-6 * bbt.trace() / mk as f64;
    for a in 0..mk {
        bbt[(a, a)] += eps;
        for (j, v) in codebooks.words()[a * d..(a + 1) * d].iter().enumerate() {
            rhs[(a, j)] += eps * v;
        }
    }
    let chol = nalgebra::linalg::Cholesky::new(bbt)
        .ok_or_else(|| Error::Training("codebook normal matrix is not positive definite".into()))?;
    let solved = chol.solve(&rhs);
    let mut words = Vec::with_capacity(mk * d);
    for a in 0..mk {
        for j in 0..d {
            words.push(solved[(a, j)]);
        }
    }
    CodebookSet::from_words(m, k, d, words)
        .map_err(|_| Error::Training("closed-form codebook solve produced non-finite codewords".into()))
}
