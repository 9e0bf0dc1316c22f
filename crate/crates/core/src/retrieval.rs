//! Asymmetric search: the query stays a real vector, database items are codes,
//! and scores are inner products against codeword-sum reconstructions computed
//! through a per-query `M x K` lookup table.

use rayon::prelude::*;

use crate::error::{arg_err, Result};
use crate::linalg::{dot, Matrix};
use crate::quantizer::{CodeMatrix, CodebookSet};

/// `values[m * K + k] = <query, codeword(m, k)>`.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    m: usize,
    k: usize,
    values: Vec<f64>,
}

impl LookupTable {
    pub fn from_values(m: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != m * k {
            return Err(arg_err!("table needs {} values, got {}", m * k, values.len()));
        }
        Ok(Self { m, k, values })
    }

    #[inline]
    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.values[m * self.k + k]
    }

    pub fn num_codebooks(&self) -> usize {
        self.m
    }

    pub fn codebook_size(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sum of `M` table lookups. Panics on an out-of-range code.
    #[inline]
    pub fn score(&self, code: &[u16]) -> f64 {
        code.iter()
            .enumerate()
            .map(|(m, &c)| self.values[m * self.k + c as usize])
            .sum()
    }
}

pub fn build_table(query: &[f64], codebooks: &CodebookSet) -> Result<LookupTable> {
    if query.len() != codebooks.dim() {
        return Err(arg_err!("query has {} values, codebooks expect {}", query.len(), codebooks.dim()));
    }
    let (m, k) = (codebooks.num_codebooks(), codebooks.codebook_size());
    let values = (0..m * k)
        .map(|j| dot(query, codebooks.codeword(j / k, j % k)))
        .collect();
    Ok(LookupTable { m, k, values })
}

/// Checked AQD score of one code.
pub fn aqd_score(table: &LookupTable, code: &[u16]) -> Result<f64> {
    if code.len() != table.m {
        return Err(arg_err!("code has {} entries, table has {} codebooks", code.len(), table.m));
    }
    if let Some(&c) = code.iter().find(|&&c| c as usize >= table.k) {
        return Err(arg_err!("sub-index {c} out of range for K={}", table.k));
    }
    Ok(table.score(code))
}

/// Database positions with their scores, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub entries: Vec<(usize, f64)>,
}

impl RankedResult {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Descending score, ties by ascending index.
#[inline]
pub(crate) fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Sorts `(index, score)` pairs and keeps the best `top_r`.
pub fn top_by_score(mut scored: Vec<(usize, f64)>, top_r: usize) -> RankedResult {
    if top_r < scored.len() && top_r > 0 {
        scored.select_nth_unstable_by(top_r - 1, rank_order);
    }
    scored.truncate(top_r);
    scored.sort_unstable_by(rank_order);
    RankedResult { entries: scored }
}

/// Exact top-`top_r` database codes by AQD against `query`.
pub fn search(query: &[f64], codebooks: &CodebookSet, codes: &CodeMatrix, top_r: usize) -> Result<RankedResult> {
    if top_r > codes.len() {
        return Err(arg_err!("top_r={top_r} exceeds the database size {}", codes.len()));
    }
    if codes.num_codebooks() != codebooks.num_codebooks() || codes.codebook_size() != codebooks.codebook_size() {
        return Err(arg_err!("code matrix geometry does not match the codebooks"));
    }
    let table = build_table(query, codebooks)?;
    let scored = codes.iter_rows().map(|c| table.score(c)).enumerate().collect();
    Ok(top_by_score(scored, top_r))
}

/// [`search`] for every query row, in parallel.
pub fn search_batch(
    queries: &Matrix,
    codebooks: &CodebookSet,
    codes: &CodeMatrix,
    top_r: usize,
) -> Result<Vec<RankedResult>> {
    (0..queries.rows())
        .into_par_iter()
        .map(|q| search(queries.row(q), codebooks, codes, top_r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_table() {
        let c = CodebookSet::from_words(1, 2, 2, vec![1., 0., 0., 1.]).unwrap();
        let t = build_table(&[2.0, 3.0], &c).unwrap();
        assert_eq!(t.values(), &[2.0, 3.0]);
        assert_eq!(aqd_score(&t, &[1]).unwrap(), 3.0);
        let zero = build_table(&[0.0, 0.0], &c).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        assert!(aqd_score(&t, &[2]).is_err());
    }

    #[test]
    fn two_lookups() {
        let t = LookupTable::from_values(2, 2, vec![2., 3., 5., 7.]).unwrap();
        assert_eq!(aqd_score(&t, &[0, 1]).unwrap(), 9.0);
    }

    #[test]
    fn ties_by_ascending_index() {
        // scores 1, 5, 5 via a single 1-d codebook
        let c = CodebookSet::from_words(1, 2, 1, vec![1.0, 5.0]).unwrap();
        let codes = CodeMatrix::new(1, 2, vec![0, 1, 1]).unwrap();
        let r = search(&[1.0], &c, &codes, 2).unwrap();
        assert_eq!(r.indices(), vec![1, 2]);
        let full = search(&[1.0], &c, &codes, 3).unwrap();
        assert_eq!(full.indices(), vec![1, 2, 0]);
        assert!(search(&[1.0], &c, &codes, 4).is_err());
    }
}
