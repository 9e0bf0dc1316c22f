//! Retrieval quality: MAP@R, precision-recall curves and precision@N.

use serde::{Deserialize, Serialize};

use crate::data::Similarity;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quantizer::{CodeMatrix, CodebookSet};
use crate::retrieval::search_batch;

/// Relevance of one query's ranked list against the whole database.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRelevance {
    /// `hits[k]` is true when the item at rank `k` is relevant.
    pub hits: Vec<bool>,
    /// Relevant items in the whole database, ranked or not.
    pub total_relevant: usize,
}

impl QueryRelevance {
    /// Labels a ranking of database positions for the query item `query`.
    /// `database[pos]` maps a database position to its dataset item.
    pub fn from_ranking(query: usize, ranking: &[usize], database: &[usize], sim: &Similarity<'_>) -> Self {
        let hits = ranking.iter().map(|&pos| sim.similar(query, database[pos])).collect();
        let total_relevant = database.iter().filter(|&&j| sim.similar(query, j)).count();
        Self { hits, total_relevant }
    }
}

/// `sum_(k <= R, hit) P@k / min(R, total_relevant)`, or `None` without any
/// relevant item.
pub fn average_precision(q: &QueryRelevance, r: usize) -> Option<f64> {
    if q.total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &h) in q.hits.iter().take(r).enumerate() {
        if h {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / r.min(q.total_relevant) as f64)
}

/// Mean of AP@R over queries that have at least one relevant item.
pub fn mean_average_precision(queries: &[QueryRelevance], r: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::Argument("R must be at least 1".into()));
    }
    let aps: Vec<f64> = queries.iter().filter_map(|q| average_precision(q, r)).collect();
    if aps.is_empty() {
        return Err(Error::Evaluation("no query has a relevant database item".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `(recall, precision)` after each rank position.
pub fn precision_recall_curve(q: &QueryRelevance) -> Result<Vec<(f64, f64)>> {
    if q.total_relevant == 0 {
        return Err(Error::Evaluation("query has no relevant database item".into()));
    }
    let mut hits = 0usize;
    Ok(q.hits
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            hits += usize::from(h);
            (hits as f64 / q.total_relevant as f64, hits as f64 / (k + 1) as f64)
        })
        .collect())
}

/// `(n, relevant-in-top-n / n)` for each requested `n`.
pub fn precision_at_n(q: &QueryRelevance, n_list: &[usize]) -> Result<Vec<(usize, f64)>> {
    let mut prefix = Vec::with_capacity(q.hits.len() + 1);
    prefix.push(0usize);
    for &h in &q.hits {
        prefix.push(prefix.last().unwrap() + usize::from(h));
    }
    n_list
        .iter()
        .map(|&n| {
            if n == 0 || n > q.hits.len() {
                Err(Error::Argument(format!("n={n} outside the ranking of length {}", q.hits.len())))
            } else {
                Ok((n, prefix[n] as f64 / n as f64))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r: usize,
    pub map_at_r: f64,
    pub n_queries: usize,
    /// Query-averaged `(recall, precision)` at sampled rank positions.
    pub pr_curve: Vec<(f64, f64)>,
    /// Query-averaged `(n, precision)`.
    pub p_at_n: Vec<(usize, f64)>,
}

/// Averages every per-query curve pointwise by rank position; queries without
/// relevant items are skipped. Keeps at most `max_points` evenly spaced rank
/// positions (always including the last).
pub fn mean_pr_curve(queries: &[QueryRelevance], max_points: usize) -> Result<Vec<(f64, f64)>> {
    let curves: Vec<Vec<(f64, f64)>> = queries
        .iter()
        .filter(|q| q.total_relevant > 0)
        .map(precision_recall_curve)
        .collect::<Result<_>>()?;
    if curves.is_empty() {
        return Err(Error::Evaluation("no query has a relevant database item".into()));
    }
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let positions = sample_positions(len, max_points);
    let n = curves.len() as f64;
    Ok(positions
        .into_iter()
        .map(|k| {
            let (r, p) = curves.iter().fold((0.0, 0.0), |(r, p), c| (r + c[k].0, p + c[k].1));
            (r / n, p / n)
        })
        .collect())
}

pub fn mean_precision_at_n(queries: &[QueryRelevance], n_list: &[usize]) -> Result<Vec<(usize, f64)>> {
    if queries.is_empty() {
        return Err(Error::Evaluation("no queries".into()));
    }
    let mut acc = vec![0.0; n_list.len()];
    for q in queries {
        for (a, (_, p)) in acc.iter_mut().zip(precision_at_n(q, n_list)?) {
            *a += p;
        }
    }
    Ok(n_list
        .iter()
        .zip(acc)
        .map(|(&n, a)| (n, a / queries.len() as f64))
        .collect())
}

/// Ranks the whole database for every query by AQD and scores the rankings.
///
/// `query_z` holds one embedding per entry of `query_items`; `codes` holds one
/// code per entry of `database_items`. Item indices address `sim`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_retrieval(
    query_z: &Matrix,
    query_items: &[usize],
    database_items: &[usize],
    codebooks: &CodebookSet,
    codes: &CodeMatrix,
    sim: &Similarity<'_>,
    r: usize,
    n_list: &[usize],
    max_points: usize,
) -> Result<EvalReport> {
    if query_z.rows() != query_items.len() || codes.len() != database_items.len() {
        return Err(Error::Argument("query or database rows do not match their index lists".into()));
    }
    let rankings = search_batch(query_z, codebooks, codes, codes.len())?;
    let queries: Vec<QueryRelevance> = rankings
        .iter()
        .zip(query_items)
        .map(|(rk, &q)| QueryRelevance::from_ranking(q, &rk.indices(), database_items, sim))
        .collect();
    let n_list: Vec<usize> = n_list.iter().copied().filter(|&n| n >= 1 && n <= codes.len()).collect();
    Ok(EvalReport {
        r,
        map_at_r: mean_average_precision(&queries, r)?,
        n_queries: queries.iter().filter(|q| q.total_relevant > 0).count(),
        pr_curve: mean_pr_curve(&queries, max_points)?,
        p_at_n: mean_precision_at_n(&queries, &n_list)?,
    })
}

fn sample_positions(len: usize, max_points: usize) -> Vec<usize> {
    if len == 0 || max_points == 0 {
        return Vec::new();
    }
    if len <= max_points {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (1..=max_points)
        .map(|i| (i * len).div_ceil(max_points) - 1)
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(hits: &[u8], total: usize) -> QueryRelevance {
        QueryRelevance {
            hits: hits.iter().map(|&h| h == 1).collect(),
            total_relevant: total,
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&q(&[1, 1, 0], 2), 3), Some(1.0));
        assert_eq!(average_precision(&q(&[0, 1], 1), 2), Some(0.5));
        assert_eq!(average_precision(&q(&[0, 0], 0), 2), None);
    }

    #[test]
    fn map_requires_relevant_query() {
        assert!(matches!(
            mean_average_precision(&[q(&[0], 0)], 1),
            Err(Error::Evaluation(_))
        ));
        let m = mean_average_precision(&[q(&[1, 1, 0], 2), q(&[0, 1], 1), q(&[0], 0)], 3).unwrap();
        assert!((m - 0.75).abs() < 1e-15);
    }

    #[test]
    fn pr_examples() {
        assert_eq!(precision_recall_curve(&q(&[1, 1], 2)).unwrap(), vec![(0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(precision_recall_curve(&q(&[0, 1], 1)).unwrap(), vec![(0.0, 0.0), (1.0, 0.5)]);
        assert!(precision_recall_curve(&q(&[0], 0)).is_err());
    }

    #[test]
    fn p_at_n_examples() {
        assert_eq!(precision_at_n(&q(&[1, 1, 0, 1], 3), &[4, 1]).unwrap(), vec![(4, 0.75), (1, 1.0)]);
        assert!(precision_at_n(&q(&[1], 1), &[2]).is_err());
    }

    #[test]
    fn sampled_positions_keep_last() {
        assert_eq!(sample_positions(10, 4), vec![2, 4, 7, 9]);
        assert_eq!(sample_positions(3, 10), vec![0, 1, 2]);
    }
}
