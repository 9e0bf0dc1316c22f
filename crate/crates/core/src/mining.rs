//! Offline Group Hard triplet selection, the in-batch online baseline and the
//! group-count decay schedule.
//!
//! Item indices here are row indices into the embedding matrix handed to each
//! function, and the same indices address the [`Similarity`] predicate.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Similarity;
use crate::encoder::hinge_argument;
use crate::error::{arg_err, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }

    /// Hinge argument at the given embeddings; positive means hard.
    #[inline]
    pub fn hinge(&self, z: &Matrix, delta: f64) -> f64 {
        hinge_argument(z.row(self.anchor), z.row(self.positive), z.row(self.negative), delta)
    }
}

/// Disjoint, balanced groups covering the training items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

/// Counters reported by one mining pass. `outdated_at_use` is filled in by the
/// trainer once the triplets have been consumed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MiningStats {
    /// Ordered anchor-positive pairs examined.
    pub candidate_pairs: usize,
    /// Hard (anchor, positive, negative) combinations seen across all pairs.
    pub hard_triplets_found: usize,
    pub selected: usize,
    /// Selected triplets no longer hard when their batch was trained.
    pub outdated_at_use: usize,
}

impl std::ops::AddAssign for MiningStats {
    fn add_assign(&mut self, o: Self) {
        self.candidate_pairs += o.candidate_pairs;
        self.hard_triplets_found += o.hard_triplets_found;
        self.selected += o.selected;
        self.outdated_at_use += o.outdated_at_use;
    }
}

/// Uniformly random partition of `items` into `group_count` groups whose sizes
/// differ by at most one (larger groups first).
pub fn partition_groups(items: &[usize], group_count: usize, seed: u64) -> Result<GroupPartition> {
    if group_count == 0 || group_count > items.len() {
        return Err(arg_err!(
            "group count {group_count} must lie in [1, {}]",
            items.len()
        ));
    }
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = items.len() / group_count;
    let extra = items.len() % group_count;
    let mut groups = Vec::with_capacity(group_count);
    let mut start = 0;
    for g in 0..group_count {
        let size = base + usize::from(g < extra);
        groups.push(shuffled[start..start + size].to_vec());
        start += size;
    }
    Ok(GroupPartition { groups })
}

/// Hard negatives of `(a, p)` among `members`, in member order.
fn hard_negatives(
    a: usize,
    p: usize,
    members: &[usize],
    z: &Matrix,
    sim: &Similarity<'_>,
    delta: f64,
) -> Vec<usize> {
    members
        .iter()
        .copied()
        .filter(|&n| !sim.similar(a, n) && hinge_argument(z.row(a), z.row(p), z.row(n), delta) > 0.0)
        .collect()
}

/// Ordered similar pairs `(a, p)`, `a != p`, within `members`.
fn positive_pairs<'a>(members: &'a [usize], sim: &'a Similarity<'_>) -> impl Iterator<Item = (usize, usize)> + 'a {
    members.iter().flat_map(move |&a| {
        members
            .iter()
            .filter(move |&&p| p != a && sim.similar(a, p))
            .map(move |&p| (a, p))
    })
}

/// Every hard triplet whose members all lie in `members`.
pub fn hard_triplets_in(members: &[usize], z: &Matrix, sim: &Similarity<'_>, delta: f64) -> Vec<Triplet> {
    positive_pairs(members, sim)
        .flat_map(|(a, p)| {
            hard_negatives(a, p, members, z, sim, delta)
                .into_iter()
                .map(move |n| Triplet::new(a, p, n))
        })
        .collect()
}

/// Group Hard: within each group, one uniformly random hard negative for every
/// ordered anchor-positive pair that has any.
///
/// Groups are mined in parallel, each with its own stream of the seeded
/// generator, and concatenated in group order.
pub fn mine_group_hard(
    partition: &GroupPartition,
    z: &Matrix,
    sim: &Similarity<'_>,
    delta: f64,
    seed: u64,
) -> (Vec<Triplet>, MiningStats) {
    let per_group: Vec<(Vec<Triplet>, MiningStats)> = partition
        .groups
        .par_iter()
        .enumerate()
        .map(|(g, members)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(g as u64);
            let mut stats = MiningStats::default();
            let mut out = Vec::new();
            for (a, p) in positive_pairs(members, sim) {
                stats.candidate_pairs += 1;
                let negs = hard_negatives(a, p, members, z, sim, delta);
                stats.hard_triplets_found += negs.len();
                if !negs.is_empty() {
                    let n = negs[rng.random_range(0..negs.len())];
                    out.push(Triplet::new(a, p, n));
                }
            }
            stats.selected = out.len();
            (out, stats)
        })
        .collect();
    let mut triplets = Vec::new();
    let mut stats = MiningStats::default();
    for (t, s) in per_group {
        triplets.extend(t);
        stats += s;
    }
    (triplets, stats)
}

/// Online baseline: every hard triplet inside one batch, no subsampling.
pub fn mine_online_batch(batch: &[usize], z: &Matrix, sim: &Similarity<'_>, delta: f64) -> Vec<Triplet> {
    hard_triplets_in(batch, z, sim, delta)
}

/// Halves the group count when mining starved (`n_selected < min_triplets`)
/// and more than one group remains.
pub fn decay_groups(group_count: usize, n_selected: usize, min_triplets: usize) -> usize {
    if n_selected < min_triplets && group_count > 1 {
        (group_count / 2).max(1)
    } else {
        group_count.max(1)
    }
}

/// Debug dump, one `a p n` line per triplet.
pub fn write_triplets<W: Write>(w: &mut W, triplets: &[Triplet]) -> std::io::Result<()> {
    for t in triplets {
        writeln!(w, "{} {} {}", t.anchor, t.positive, t.negative)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embed(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 2).unwrap()
    }

    #[test]
    fn partition_shapes() {
        let items: Vec<usize> = (0..10).collect();
        let one = partition_groups(&items, 1, 0).unwrap();
        assert_eq!(one.groups.len(), 1);
        assert_eq!(one.groups[0].len(), 10);
        let three = partition_groups(&items, 3, 0).unwrap();
        let sizes: Vec<usize> = three.groups.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        let mut all: Vec<usize> = three.groups.concat();
        all.sort_unstable();
        assert_eq!(all, items);
        assert!(partition_groups(&items, 11, 0).is_err());
        assert!(partition_groups(&items, 0, 0).is_err());
        assert_eq!(three, partition_groups(&items, 3, 0).unwrap());
    }

    #[test]
    fn satisfied_margin_yields_nothing() {
        let labels = vec![vec![0], vec![0], vec![1]];
        let sim = Similarity::new(&labels);
        let z = embed(&[[0., 0.], [0., 0.], [5., 0.]]);
        let part = GroupPartition {
            groups: vec![vec![0, 1, 2]],
        };
        let (t, stats) = mine_group_hard(&part, &z, &sim, 1.0, 0);
        assert!(t.is_empty());
        assert_eq!(stats.candidate_pairs, 2);
        assert_eq!(stats.selected, 0);
    }

    #[test]
    fn single_hard_candidate_both_orders() {
        let labels = vec![vec![0], vec![0], vec![1]];
        let sim = Similarity::new(&labels);
        let z = embed(&[[0., 0.], [0., 0.], [0.5, 0.]]);
        let part = GroupPartition {
            groups: vec![vec![0, 1, 2]],
        };
        let (t, stats) = mine_group_hard(&part, &z, &sim, 1.0, 0);
        assert_eq!(t, vec![Triplet::new(0, 1, 2), Triplet::new(1, 0, 2)]);
        assert_eq!(stats.selected, 2);
        assert_eq!(stats.hard_triplets_found, 2);
    }

    #[test]
    fn online_counts() {
        let labels = vec![vec![0], vec![0], vec![1], vec![2], vec![3]];
        let sim = Similarity::new(&labels);
        let z = embed(&[[0., 0.], [0.1, 0.], [0.2, 0.], [0., 0.2], [-0.2, 0.]]);
        let batch: Vec<usize> = (0..5).collect();
        // pair (0,1) and (1,0), each with 3 hard negatives
        assert_eq!(mine_online_batch(&batch, &z, &sim, 1.0).len(), 6);
        assert_eq!(mine_online_batch(&[0, 1], &z, &sim, 1.0).len(), 0);
    }

    #[test]
    fn decay_rule() {
        assert_eq!(decay_groups(200, 50, 100), 100);
        assert_eq!(decay_groups(200, 500, 100), 200);
        assert_eq!(decay_groups(1, 0, 100), 1);
        assert_eq!(decay_groups(3, 0, 100), 1);
        let mut g = 200;
        for _ in 0..20 {
            g = decay_groups(g, 0, 1);
        }
        assert_eq!(g, 1);
        assert_eq!(decay_groups(g, 0, 1), 1);
    }

    #[test]
    fn dump_format() {
        let mut buf = Vec::new();
        write_triplets(&mut buf, &[Triplet::new(3, 1, 4)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "3 1 4\n");
    }
}
