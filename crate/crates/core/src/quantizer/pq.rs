//! Product-quantization initialization and the block-structured codebook
//! update used when codebooks are restricted to disjoint subspaces.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kmeans::{kmeans_pp_init, lloyd};
use super::{CodeMatrix, CodebookSet};
use crate::error::{arg_err, Result};
use crate::linalg::Matrix;

/// Contiguous subspace of each codebook. Blocks have width `ceil(D / M)`; when
/// `M` does not divide `D` the tail blocks are shorter (the embedding is
/// implicitly zero-padded), and may be empty.
pub fn subspace_blocks(d: usize, m: usize) -> Vec<Range<usize>> {
    let width = d.div_ceil(m);
    (0..m)
        .map(|i| (i * width).min(d)..((i + 1) * width).min(d))
        .collect()
}

pub(crate) fn subspace_rng(seed: u64, m: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    rng
}

fn block_columns(z: &Matrix, block: &Range<usize>) -> Matrix {
    let mut sub = Matrix::zeros(z.rows(), block.len());
    for (i, r) in z.iter_rows().enumerate() {
        sub.row_mut(i).copy_from_slice(&r[block.clone()]);
    }
    sub
}

/// Per-subspace k-means (k-means++ seeding, then Lloyd), with every subspace's
/// centroids embedded into a full-width codebook that is zero outside its block.
///
/// Fewer rows than `k` is allowed and yields duplicate centroids.
pub fn init_product_quantization(
    z: &Matrix,
    m: usize,
    k: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<(CodebookSet, CodeMatrix)> {
    if z.rows() == 0 {
        return Err(arg_err!("product quantization needs at least one embedding"));
    }
    let d = z.cols();
    if m > d {
        return Err(arg_err!("M={m} codebooks exceed the embedding dimension {d}"));
    }
    if z.rows() < k {
        log::warn!("{} embeddings for K={k} codewords; centroids will repeat", z.rows());
    }
    let mut codebooks = CodebookSet::zeros(m, k, d)?;
    let mut per_block = Vec::with_capacity(m);
    for (mi, block) in subspace_blocks(d, m).iter().enumerate() {
        if block.is_empty() {
            per_block.push(vec![0usize; z.rows()]);
            continue;
        }
        let sub = block_columns(z, block);
        let mut rng = subspace_rng(seed, mi);
        let init = kmeans_pp_init(&sub, k, &mut rng);
        let res = lloyd(&sub, init, kmeans_iters);
        for kk in 0..k {
            codebooks.codeword_mut(mi, kk)[block.clone()].copy_from_slice(res.centroids.row(kk));
        }
        per_block.push(res.assignments);
    }
    let codes = (0..z.rows())
        .flat_map(|i| per_block.iter().map(move |a| a[i] as u16))
        .collect();
    Ok((codebooks, CodeMatrix::new(m, k, codes)?))
}

/// Block-restricted least squares: each codeword becomes the mean of its
/// block's sub-vectors over the rows assigned to it; unused codewords stay put.
pub fn update_product_codebooks(codebooks: &CodebookSet, z: &Matrix, codes: &CodeMatrix) -> Result<CodebookSet> {
    let (m, k, d) = (codebooks.num_codebooks(), codebooks.codebook_size(), codebooks.dim());
    if z.rows() != codes.len() || z.cols() != d {
        return Err(arg_err!("embeddings and codes do not match the codebooks"));
    }
    let mut out = codebooks.clone();
    for (mi, block) in subspace_blocks(d, m).into_iter().enumerate() {
        let mut sums = vec![vec![0.0; block.len()]; k];
        let mut counts = vec![0usize; k];
        for (zr, c) in z.iter_rows().zip(codes.iter_rows()) {
            let kk = c[mi] as usize;
            counts[kk] += 1;
            for (s, v) in sums[kk].iter_mut().zip(&zr[block.clone()]) {
                *s += v;
            }
        }
        for kk in 0..k {
            let word = out.codeword_mut(mi, kk);
            word.iter_mut().for_each(|v| *v = 0.0);
            if counts[kk] > 0 {
                for (dst, s) in word[block.clone()].iter_mut().zip(&sums[kk]) {
                    *dst = s / counts[kk] as f64;
                }
            } else {
                word[block.clone()].copy_from_slice(&codebooks.codeword(mi, kk)[block.clone()]);
            }
        }
    }
    Ok(out)
}
