//! Acceptance criteria, one test each. Every test writes a single
//! `[PASS]`/`[FAIL]` line straight to stdout so the summary survives output
//! capture.

use std::io::Write;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tquant::data::{make_synthetic, DatasetSplit, LabeledDataset, Similarity};
use tquant::encoder::{hinge_argument, Activation, EncoderParams};
use tquant::eval::{evaluate_retrieval, mean_average_precision, QueryRelevance};
use tquant::linalg::{dot, sq_dist, Matrix};
use tquant::mining::{decay_groups, mine_group_hard, partition_groups, Triplet};
use tquant::objective::BatchObjective;
use tquant::quantizer::{
    encode_all, icm_encode, init_product_quantization, orthogonality_penalty, reconstruct, residual_sum,
    update_codebooks, CodeMatrix, CodebookSet, PenaltyPairs, QuantConfig,
};
use tquant::retrieval::{build_table, search};
use tquant::train::{encode_database, train, HyperParams, QuantizerKind, TrainOutput};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "[{tag}] criterion {id}: {name} ({detail})");
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lim: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-lim..lim)).collect()).unwrap()
}

fn random_codebooks(rng: &mut ChaCha8Rng, m: usize, k: usize, d: usize) -> CodebookSet {
    CodebookSet::from_words(m, k, d, (0..m * k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_codes(rng: &mut ChaCha8Rng, n: usize, m: usize, k: usize) -> CodeMatrix {
    CodeMatrix::new(m, k, (0..n * m).map(|_| rng.random_range(0..k) as u16).collect()).unwrap()
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let h = 1e-5;
    let tol = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);

    while checked < 60 {
        let d_in = rng.random_range(2..6);
        let d = rng.random_range(2..5);
        let hidden = rng.random_range(0..2);
        let (dims, acts) = if hidden == 0 {
            let act = [Activation::Identity, Activation::Tanh, Activation::Relu][rng.random_range(0..3)];
            (vec![d_in, d], vec![act])
        } else {
            let act = [Activation::Tanh, Activation::Relu][rng.random_range(0..2)];
            (vec![d_in, rng.random_range(2..6), d], vec![act, Activation::Identity])
        };
        let mut enc = EncoderParams::init(&dims, &acts, rng.random()).unwrap();
        // non-zero biases so relu kinks are not tied to the origin
        let mut flat = enc.flat_params();
        flat.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        enc.set_flat_params(&flat).unwrap();

        let n_items = 6;
        let features = uniform_matrix(&mut rng, n_items, d_in, 2.0);
        let (m, k) = (rng.random_range(1..4), rng.random_range(1..4));
        let codebooks = random_codebooks(&mut rng, m, k, d);
        let codes = random_codes(&mut rng, n_items, m, k);
        let triplets: Vec<Triplet> = (0..rng.random_range(1..5))
            .map(|_| Triplet::new(rng.random_range(0..n_items), rng.random_range(0..n_items), rng.random_range(0..n_items)))
            .collect();
        let obj = BatchObjective {
            features: &features,
            triplets: &triplets,
            codes: &codes,
            delta: rng.random_range(0.1..3.0),
            lambda: rng.random_range(0.0..1.0),
            gamma: [0.0, 0.1, 1.0][rng.random_range(0..3)],
            pairs: PenaltyPairs::All,
        };

        // stay clear of the hinge and relu kinks
        let cache = enc.forward_cached(&obj.stacked_inputs()).unwrap();
        let z = cache.output();
        let hinge_margin = (0..triplets.len())
            .map(|t| hinge_argument(z.row(3 * t), z.row(3 * t + 1), z.row(3 * t + 2), obj.delta).abs())
            .fold(f64::INFINITY, f64::min);
        let relu_margin = cache.min_relu_margin(enc.layers()).unwrap_or(f64::INFINITY);
        if hinge_margin < 1e-3 || relu_margin < 1e-3 {
            skipped += 1;
            continue;
        }

        let total = |e: &EncoderParams, c: &CodebookSet| obj.evaluate(e, c).unwrap().total(obj.lambda);

        let (_, grads) = obj.encoder_gradient(&enc, &codebooks, 1.0).unwrap();
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|g| g.weight.as_slice().iter().chain(&g.bias).copied().collect::<Vec<_>>())
            .collect();
        let base = enc.flat_params();
        let numeric: Vec<f64> = (0..base.len())
            .map(|i| {
                let mut plus = enc.clone();
                let mut p = base.clone();
                p[i] += h;
                plus.set_flat_params(&p).unwrap();
                let mut minus = enc.clone();
                p[i] -= 2.0 * h;
                minus.set_flat_params(&p).unwrap();
                (total(&plus, &codebooks) - total(&minus, &codebooks)) / (2.0 * h)
            })
            .collect();
        let e_enc = rel_err(&analytic, &numeric);

        let analytic_c = obj.codebook_gradient(&enc, &codebooks).unwrap();
        let numeric_c: Vec<f64> = (0..codebooks.words().len())
            .map(|i| {
                let mut plus = codebooks.clone();
                plus.words_mut()[i] += h;
                let mut minus = codebooks.clone();
                minus.words_mut()[i] -= h;
                (total(&enc, &plus) - total(&enc, &minus)) / (2.0 * h)
            })
            .collect();
        let e_cb = rel_err(&analytic_c, &numeric_c);

        worst = worst.max(e_enc).max(e_cb);
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= tol && secs < 60.0;
    report(
        1,
        "analytic vs finite-difference gradients",
        pass,
        &format!("{checked} configs, {skipped} skipped near kinks, worst rel err {worst:.2e}, {secs:.1}s"),
    );
    assert!(pass);
}

fn brute_force_residual(c: &CodebookSet, z: &[f64]) -> f64 {
    let (m, k) = (c.num_codebooks(), c.codebook_size());
    (0..k.pow(m as u32))
        .map(|flat| {
            let code: Vec<u16> = (0..m).map(|i| ((flat / k.pow(i as u32)) % k) as u16).collect();
            let mut r = vec![0.0; c.dim()];
            for (mi, &ci) in code.iter().enumerate() {
                for (dst, v) in r.iter_mut().zip(c.codeword(mi, ci as usize)) {
                    *dst += v;
                }
            }
            sq_dist(z, &r)
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_2_icm_matches_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let trials = 200;
    let (mut optimal, mut undercut, mut non_monotone) = (0, 0, 0);
    for _ in 0..trials {
        let m = rng.random_range(1..=3);
        let k = rng.random_range(1..=4);
        let c = random_codebooks(&mut rng, m, k, 4);
        let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = icm_encode(&c, &z, None, 3).unwrap();
        let best = brute_force_residual(&c, &z);
        if (out.residual - best).abs() <= 1e-9 * (1.0 + best) {
            optimal += 1;
        }
        if out.residual < best - 1e-9 {
            undercut += 1;
        }
        if out.trace.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            non_monotone += 1;
        }
    }
    let rate = optimal as f64 / trials as f64;
    let secs = start.elapsed().as_secs_f64();
    let pass = rate >= 0.7 && undercut == 0 && non_monotone == 0 && secs < 60.0;
    report(
        2,
        "ICM vs exhaustive optimum",
        pass,
        &format!("{trials} instances, optimal {:.0}%, undercut {undercut}, non-monotone {non_monotone}", rate * 100.0),
    );
    assert!(pass);
}

#[test]
fn criterion_3_lookup_scores_are_exact() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (m, k, d) = (4, 16, 12);
    let c = random_codebooks(&mut rng, m, k, d);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let code: Vec<u16> = (0..m).map(|_| rng.random_range(0..k) as u16).collect();
        let table = build_table(&q, &c).unwrap();
        let direct = dot(&q, &reconstruct(&c, &code).unwrap());
        worst = worst.max((table.score(&code) - direct).abs());
    }
    let n = 500;
    let codes = random_codes(&mut rng, n, m, k);
    let mut rank_mismatch = 0;
    for _ in 0..20 {
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle: Vec<(usize, f64)> = codes
            .iter_rows()
            .map(|code| dot(&q, &reconstruct(&c, code).unwrap()))
            .enumerate()
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let oracle: Vec<usize> = oracle.into_iter().map(|e| e.0).collect();
        let got = search(&q, &c, &codes, n).unwrap().indices();
        if got != oracle {
            rank_mismatch += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && rank_mismatch == 0 && secs < 60.0;
    report(
        3,
        "lookup-table scores and ranking",
        pass,
        &format!("1000 pairs, max abs diff {worst:.1e}; 20 full rankings of N={n}, {rank_mismatch} mismatched"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_alternating_descent() {
    let cfg = QuantConfig {
        gamma: 0.0,
        ..QuantConfig::default()
    };
    let mut good = 0;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // a frozen random encoder applied once
        let enc = EncoderParams::init(&[10, 8], &[Activation::Identity], seed).unwrap();
        let z = enc.forward(&uniform_matrix(&mut rng, 200, 10, 1.0)).unwrap();
        let (mut c, mut codes) = init_product_quantization(&z, 2, 8, 20, seed).unwrap();
        let mut seq = vec![residual_sum(&c, &z, &codes)];
        for _ in 0..5 {
            c = update_codebooks(&c, &z, &codes, &cfg).unwrap().codebooks;
            codes = encode_all(&c, &z, Some(&codes), 3).unwrap();
            seq.push(residual_sum(&c, &z, &codes));
        }
        let monotone = seq.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
        let strict_first = seq[1] < seq[0];
        if monotone && strict_first {
            good += 1;
        } else {
            notes.push(format!("seed {seed}: {seq:?}"));
        }
    }
    let pass = good == 10;
    report(4, "alternating codebook/code descent", pass, &format!("{good}/10 seeds{}", notes.iter().map(|n| format!("; {n}")).collect::<String>()));
    assert!(pass);
}

/// Every ordered in-group `(a, p)` pair with its full set of hard negatives.
fn hard_sets(members: &[usize], z: &Matrix, sim: &Similarity<'_>, delta: f64) -> Vec<((usize, usize), Vec<usize>)> {
    let mut out = Vec::new();
    for &a in members {
        for &p in members {
            if a == p || !sim.similar(a, p) {
                continue;
            }
            let negs: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&n| !sim.similar(a, n) && hinge_argument(z.row(a), z.row(p), z.row(n), delta) > 0.0)
                .collect();
            out.push(((a, p), negs));
        }
    }
    out
}

#[test]
fn criterion_5_mining_matches_enumeration() {
    let mut good = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 20;
        let z = uniform_matrix(&mut rng, n, 2, 1.0);
        let labels: Vec<Vec<u32>> = (0..n)
            .map(|_| {
                let mut l = vec![rng.random_range(0..3u32)];
                if rng.random_bool(0.2) {
                    l.push(3);
                }
                l
            })
            .collect();
        let sim = Similarity::new(&labels);
        let items: Vec<usize> = (0..n).collect();
        let groups = rng.random_range(1..5);
        let partition = partition_groups(&items, groups, seed).unwrap();
        let delta = 0.5;
        let (triplets, stats) = mine_group_hard(&partition, &z, &sim, delta, seed);

        let mut ok = true;
        let mut expected = 0;
        let mut found = 0;
        for members in &partition.groups {
            for ((a, p), negs) in hard_sets(members, &z, &sim, delta) {
                found += negs.len();
                let chosen: Vec<&Triplet> = triplets.iter().filter(|t| t.anchor == a && t.positive == p).collect();
                if negs.is_empty() {
                    ok &= chosen.is_empty();
                } else {
                    expected += 1;
                    ok &= chosen.len() == 1 && negs.contains(&chosen[0].negative);
                }
            }
        }
        let group_of = |i: usize| partition.groups.iter().position(|g| g.contains(&i)).unwrap();
        ok &= triplets
            .iter()
            .all(|t| group_of(t.anchor) == group_of(t.positive) && group_of(t.anchor) == group_of(t.negative));
        ok &= triplets.len() == expected && stats.selected == expected && stats.hard_triplets_found == found;
        if ok {
            good += 1;
        }
    }

    let mut g = 16;
    let mut schedule = vec![g];
    for &t in &[5, 2000, 10, 0, 0, 0, 3] {
        g = decay_groups(g, t, 1000);
        schedule.push(g);
    }
    let decay_ok = schedule == vec![16, 8, 8, 4, 2, 1, 1, 1];
    let pass = good == 20 && decay_ok;
    report(
        5,
        "Group Hard mining vs enumeration",
        pass,
        &format!("{good}/20 seeds; decay schedule {schedule:?}"),
    );
    assert!(pass);
}

/// Shared configuration of the end-to-end synthetic experiment. Tuned on data
/// seeds 101-105, disjoint from the seeds scored below.
fn e2e_params(seed: u64) -> HyperParams {
    HyperParams {
        m: 4,
        k: 16,
        embedding_dim: 32,
        max_epochs: 30,
        delta: 1000.0,
        lambda: 0.3,
        gamma: 0.1,
        lr: 3e-4,
        n_query: 200,
        n_train: 500,
        seed,
        ..HyperParams::default()
    }
}

fn e2e_data(seed: u64) -> (LabeledDataset, DatasetSplit) {
    let ds = make_synthetic(10, 200, 32, 0.5, seed).unwrap();
    let p = e2e_params(seed);
    let split = DatasetSplit::sample(ds.len(), p.n_query, p.n_train, seed).unwrap();
    (ds, split)
}

fn map_of(ds: &LabeledDataset, split: &DatasetSplit, out: &TrainOutput, r: usize) -> f64 {
    let codes = encode_database(&out.encoder, &out.codebooks, &ds.features().select_rows(&split.database), 3).unwrap();
    let qz = out.encoder.forward(&ds.features().select_rows(&split.query)).unwrap();
    evaluate_retrieval(&qz, &split.query, &split.database, &out.codebooks, &codes, &ds.similarity(), r, &[], 1)
        .unwrap()
        .map_at_r
}

/// MAP@R of exact Euclidean ranking on raw features.
fn exact_feature_map(ds: &LabeledDataset, split: &DatasetSplit, r: usize) -> f64 {
    let sim = ds.similarity();
    let queries: Vec<QueryRelevance> = split
        .query
        .iter()
        .map(|&q| {
            let mut order: Vec<(usize, f64)> = split
                .database
                .iter()
                .enumerate()
                .map(|(pos, &j)| (pos, sq_dist(ds.features().row(q), ds.features().row(j))))
                .collect();
            order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let ranking: Vec<usize> = order.into_iter().map(|e| e.0).collect();
            QueryRelevance::from_ranking(q, &ranking, &split.database, &sim)
        })
        .collect();
    mean_average_precision(&queries, r).unwrap()
}

#[test]
fn criterion_6_end_to_end_synthetic_retrieval() {
    let start = Instant::now();
    let mut rows = Vec::new();
    let (mut pass_map, mut beat_two_step, mut beat_pq, mut oracle_ok) = (true, 0, 0, true);
    for seed in 1..=5u64 {
        let (ds, split) = e2e_data(seed);
        let oracle = exact_feature_map(&ds, &split, 100);
        oracle_ok &= oracle > 0.999;

        let p = e2e_params(seed);
        let joint = map_of(&ds, &split, &train(&ds, &split, &p).unwrap(), 100);
        let two = map_of(&ds, &split, &train(&ds, &split, &HyperParams { two_step: true, ..p.clone() }).unwrap(), 100);
        let pq = map_of(
            &ds,
            &split,
            &train(&ds, &split, &HyperParams { quantizer: QuantizerKind::Product, ..p.clone() }).unwrap(),
            100,
        );
        pass_map &= joint >= 0.95;
        beat_two_step += usize::from(joint > two);
        beat_pq += usize::from(joint > pq);
        rows.push(format!("s{seed}: oracle {oracle:.3} joint {joint:.4} two-step {two:.4} pq {pq:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = oracle_ok && pass_map && beat_two_step >= 4 && beat_pq >= 4 && secs < 600.0;
    report(
        6,
        "end-to-end synthetic MAP@100 and variant ordering",
        pass,
        &format!(
            "joint >= 0.95 on all: {pass_map}; beats two-step {beat_two_step}/5, beats pq-only {beat_pq}/5; {}; {secs:.0}s",
            rows.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_orthogonality_weight_reduces_penalty() {
    let mut good = 0;
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let (ds, split) = e2e_data(seed);
        let with = train(&ds, &split, &e2e_params(seed)).unwrap();
        let without = train(&ds, &split, &HyperParams { gamma: 0.0, ..e2e_params(seed) }).unwrap();
        let a = orthogonality_penalty(&with.codebooks, PenaltyPairs::OffDiagonal);
        let b = orthogonality_penalty(&without.codebooks, PenaltyPairs::OffDiagonal);
        good += usize::from(a < b);
        rows.push(format!("s{seed}: {a:.4e} vs {b:.4e}"));
    }
    let pass = good == 5;
    report(
        7,
        "off-diagonal Gram penalty, gamma 0.1 vs 0",
        pass,
        &format!("{good}/5 seeds; {}", rows.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_8_cli_training_is_deterministic() {
    let bin = env!("CARGO_BIN_EXE_tquant");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = |args: &[&str]| {
        let st = Command::new(bin).args(args).output().unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    };
    run(&["synth", "--clusters", "4", "--per-cluster", "30", "--dim", "8", "--sigma", "0.5", "--seed", "3", "--out", data.to_str().unwrap()]);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        run(&[
            "train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--m", "2", "--k", "8",
            "--embedding-dim", "8", "--epochs", "5", "--n-query", "20", "--n-train", "60", "--delta", "50",
            "--seed", "11",
        ]);
        outputs.push((std::fs::read(out.join("codebooks.bin")).unwrap(), std::fs::read(out.join("codes.bin")).unwrap()));
    }
    let pass = outputs[0] == outputs[1];
    report(8, "bit-identical training artifacts", pass, "codebooks.bin and codes.bin compared byte for byte");
    assert!(pass);
}
