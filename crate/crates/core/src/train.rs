//! The training loop: embedding refresh, product-quantization warm start,
//! offline mining, minibatch joint updates of the encoder, then codebook and
//! code updates and group-count decay, once per epoch.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSplit, LabeledDataset, Similarity};
use crate::encoder::{Activation, EncoderParams};
use crate::error::{arg_err, Error, Result};
use crate::linalg::Matrix;
use crate::mining::{decay_groups, mine_group_hard, mine_online_batch, partition_groups, MiningStats, Triplet};
use crate::objective::BatchObjective;
use crate::quantizer::{
    encode_all, init_product_quantization, quantization_loss, residual_sum, update_codebooks,
    update_product_codebooks, CodeMatrix, CodebookSet, PenaltyPairs, QuantConfig,
};

/// How training triplets are selected each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningMode {
    /// Random groups, one random hard negative per anchor-positive pair.
    GroupHard,
    /// As `GroupHard` but always a single group spanning the training set, no decay.
    SingleGroup,
    /// All hard triplets within each minibatch of items, mined on the fly.
    Online,
}

/// Structure imposed on the codebooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    /// Dense codebooks shared across the whole embedding.
    Additive,
    /// Each codebook confined to its own contiguous subspace.
    Product,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub delta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub m: usize,
    pub k: usize,
    pub group_count: usize,
    pub min_triplets: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,

    pub embedding_dim: usize,
    /// Widths of hidden layers between the input and the embedding.
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,

    pub icm_max_iters: usize,
    pub codebook_lr: f64,
    pub codebook_gd_steps: usize,
    pub kmeans_iters: usize,
    pub penalty_pairs: PenaltyPairs,

    pub mining: MiningMode,
    pub quantizer: QuantizerKind,
    /// Train the encoder with `lambda = 0`, then quantize the final embeddings.
    pub two_step: bool,
    /// Alternating codebook/code rounds used by `two_step` after training.
    pub final_quant_rounds: usize,
    /// Re-encode triplet members with ICM before every batch instead of using
    /// the epoch-start codes.
    pub per_batch_icm: bool,
    /// Items per minibatch in [`MiningMode::Online`].
    pub online_batch_size: usize,
    /// Stop once a single group yields no hard triplet.
    pub early_stop: bool,

    pub n_query: usize,
    pub n_train: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            delta: 1.0,
            lambda: 0.1,
            gamma: 0.1,
            m: 4,
            k: 256,
            group_count: 10,
            min_triplets: 1000,
            batch_size: 128,
            max_epochs: 30,
            lr: 1e-3,
            momentum: 0.9,
            seed: 0,
            embedding_dim: 32,
            hidden: Vec::new(),
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
            icm_max_iters: 3,
            codebook_lr: 1e-3,
            codebook_gd_steps: 20,
            kmeans_iters: 25,
            penalty_pairs: PenaltyPairs::All,
            mining: MiningMode::GroupHard,
            quantizer: QuantizerKind::Additive,
            two_step: false,
            final_quant_rounds: 5,
            per_batch_icm: false,
            online_batch_size: 192,
            early_stop: true,
            n_query: 200,
            n_train: 500,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| arg_err!("bad value {v:?} for {key}: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(arg_err!("bad boolean {v:?} for {key}")),
    }
}

impl HyperParams {
    /// Sets one field by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "delta" => self.delta = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "m" | "M" => self.m = parse(key, v)?,
            "k" | "K" => self.k = parse(key, v)?,
            "group_count" => self.group_count = parse(key, v)?,
            "min_triplets" => self.min_triplets = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "embedding_dim" => self.embedding_dim = parse(key, v)?,
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "hidden_activation" => self.hidden_activation = v.parse()?,
            "output_activation" => self.output_activation = v.parse()?,
            "icm_max_iters" => self.icm_max_iters = parse(key, v)?,
            "codebook_lr" => self.codebook_lr = parse(key, v)?,
            "codebook_gd_steps" => self.codebook_gd_steps = parse(key, v)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            "exclude_diagonal" => {
                self.penalty_pairs = if parse_bool(key, v)? {
                    PenaltyPairs::OffDiagonal
                } else {
                    PenaltyPairs::All
                }
            }
            "mining" => {
                self.mining = match v {
                    "group_hard" => MiningMode::GroupHard,
                    "single_group" => MiningMode::SingleGroup,
                    "online" => MiningMode::Online,
                    _ => return Err(arg_err!("unknown mining mode {v:?}")),
                }
            }
            "quantizer" => {
                self.quantizer = match v {
                    "additive" => QuantizerKind::Additive,
                    "product" => QuantizerKind::Product,
                    _ => return Err(arg_err!("unknown quantizer {v:?}")),
                }
            }
            "two_step" => self.two_step = parse_bool(key, v)?,
            "final_quant_rounds" => self.final_quant_rounds = parse(key, v)?,
            "per_batch_icm" => self.per_batch_icm = parse_bool(key, v)?,
            "online_batch_size" => self.online_batch_size = parse(key, v)?,
            "early_stop" => self.early_stop = parse_bool(key, v)?,
            "n_query" => self.n_query = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            other => return Err(arg_err!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Flat `key = value` lines; `#` starts a comment.
    pub fn parse_config(text: &str) -> Result<Self> {
        let mut p = Self::default();
        p.apply_config(text)?;
        Ok(p)
    }

    pub fn apply_config(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| arg_err!("config line {} is not `key = value`", no + 1))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_config(&self) -> String {
        let mut s = String::new();
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let act = |a: Activation| match a {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        let mining = match self.mining {
            MiningMode::GroupHard => "group_hard",
            MiningMode::SingleGroup => "single_group",
            MiningMode::Online => "online",
        };
        let quantizer = match self.quantizer {
            QuantizerKind::Additive => "additive",
            QuantizerKind::Product => "product",
        };
        let lines: Vec<(&str, String)> = vec![
            ("delta", self.delta.to_string()),
            ("lambda", self.lambda.to_string()),
            ("gamma", self.gamma.to_string()),
            ("m", self.m.to_string()),
            ("k", self.k.to_string()),
            ("group_count", self.group_count.to_string()),
            ("min_triplets", self.min_triplets.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("seed", self.seed.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("hidden", hidden.join(",")),
            ("hidden_activation", act(self.hidden_activation).into()),
            ("output_activation", act(self.output_activation).into()),
            ("icm_max_iters", self.icm_max_iters.to_string()),
            ("codebook_lr", self.codebook_lr.to_string()),
            ("codebook_gd_steps", self.codebook_gd_steps.to_string()),
            ("kmeans_iters", self.kmeans_iters.to_string()),
            ("exclude_diagonal", (self.penalty_pairs == PenaltyPairs::OffDiagonal).to_string()),
            ("mining", mining.into()),
            ("quantizer", quantizer.into()),
            ("two_step", self.two_step.to_string()),
            ("final_quant_rounds", self.final_quant_rounds.to_string()),
            ("per_batch_icm", self.per_batch_icm.to_string()),
            ("online_batch_size", self.online_batch_size.to_string()),
            ("early_stop", self.early_stop.to_string()),
            ("n_query", self.n_query.to_string()),
            ("n_train", self.n_train.to_string()),
        ];
        for (k, v) in &lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("lr", self.lr),
            ("codebook_lr", self.codebook_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(arg_err!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("m", self.m),
            ("k", self.k),
            ("group_count", self.group_count),
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
            ("icm_max_iters", self.icm_max_iters),
            ("online_batch_size", self.online_batch_size),
        ] {
            if v == 0 {
                return Err(arg_err!("{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(arg_err!("momentum must lie in [0, 1)"));
        }
        if self.k > 65536 {
            return Err(arg_err!("K={} exceeds 65536", self.k));
        }
        if self.m > self.embedding_dim {
            return Err(arg_err!("M={} exceeds embedding_dim={}", self.m, self.embedding_dim));
        }
        Ok(())
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            gamma: self.gamma,
            lambda: self.lambda,
            icm_max_iters: self.icm_max_iters,
            codebook_lr: self.codebook_lr,
            codebook_gd_steps: self.codebook_gd_steps,
            penalty_pairs: self.penalty_pairs,
        }
    }

    /// Lambda as seen by the encoder objective.
    fn encoder_lambda(&self) -> f64 {
        if self.two_step {
            0.0
        } else {
            self.lambda
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    /// Mean hinge of the selected triplets at mining time.
    pub mean_triplet_loss: f64,
    /// `Q` over the triplet members after the codebook and code updates.
    pub quantization_loss: f64,
    /// Selected hard triplets this epoch.
    pub n_hard_triplets: usize,
    /// Group count used for mining this epoch.
    pub group_count: usize,
    /// Seconds since training started.
    pub wall_time: f64,
    pub stats: MiningStats,
    /// Summed residual of the rows used for the codebook update, before it.
    pub residual_before_update: f64,
    /// Same rows after the codebook update and re-encoding.
    pub residual_after_update: f64,
}

pub const LOG_HEADER: &str = "epoch,mean_triplet_loss,quantization_loss,n_hard_triplets,group_count,wall_time,candidate_pairs,hard_triplets_found,selected,outdated_at_use,residual_before_update,residual_after_update";

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{},{},{},{},{},{}",
            self.epoch,
            self.mean_triplet_loss,
            self.quantization_loss,
            self.n_hard_triplets,
            self.group_count,
            self.wall_time,
            self.stats.candidate_pairs,
            self.stats.hard_triplets_found,
            self.stats.selected,
            self.stats.outdated_at_use,
            self.residual_before_update,
            self.residual_after_update,
        )
    }
}

pub fn log_to_csv(log: &[TrainLogRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub encoder: EncoderParams,
    pub codebooks: CodebookSet,
    /// Final codes of the training items, in `split.train` order.
    pub train_codes: CodeMatrix,
    pub log: Vec<TrainLogRecord>,
}

/// Derives independent generator seeds for each purpose and epoch.
fn derive_seed(seed: u64, epoch: usize, purpose: u64) -> u64 {
    let mut x = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const SEED_ENCODER: u64 = 1;
const SEED_PQ: u64 = 2;
const SEED_PARTITION: u64 = 3;
const SEED_MINING: u64 = 4;
const SEED_SHUFFLE: u64 = 5;

pub fn build_encoder(params: &HyperParams, input_dim: usize) -> Result<EncoderParams> {
    let mut dims = vec![input_dim];
    dims.extend(&params.hidden);
    dims.push(params.embedding_dim);
    let mut acts = vec![params.hidden_activation; params.hidden.len()];
    acts.push(params.output_activation);
    let mut enc = EncoderParams::init(&dims, &acts, derive_seed(params.seed, 0, SEED_ENCODER))?;
    enc.learning_rate = params.lr;
    enc.momentum = params.momentum;
    Ok(enc)
}

/// Stacks the members of every triplet as rows, with their codes.
fn triplet_rows(z: &Matrix, codes: &CodeMatrix, triplets: &[Triplet]) -> (Matrix, CodeMatrix) {
    let rows: Vec<usize> = triplets
        .iter()
        .flat_map(|t| [t.anchor, t.positive, t.negative])
        .collect();
    (z.select_rows(&rows), codes.select_rows(&rows))
}

struct Trainer<'a> {
    params: &'a HyperParams,
    features: Matrix,
    sim: Similarity<'a>,
    encoder: EncoderParams,
}

impl Trainer<'_> {
    fn check_finite(&self, what: &str, v: f64, epoch: usize) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::Training(format!("non-finite {what} ({v}) at epoch {epoch}")))
        }
    }

    /// One encoder step on `batch`; returns `(sum of hinge losses, inactive count)`.
    fn train_batch(
        &mut self,
        batch: &[Triplet],
        codes: &CodeMatrix,
        codebooks: &CodebookSet,
        epoch: usize,
    ) -> Result<(f64, usize)> {
        let p = self.params;
        let obj = BatchObjective {
            features: &self.features,
            triplets: batch,
            codes,
            delta: p.delta,
            lambda: p.encoder_lambda(),
            gamma: 0.0,
            pairs: p.penalty_pairs,
        };
        let (loss, grads) = obj.encoder_gradient(&self.encoder, codebooks, 1.0 / batch.len() as f64)?;
        self.check_finite("batch loss", loss.total(obj.lambda), epoch)?;
        self.encoder.step(&grads)?;
        Ok((loss.triplet, loss.inactive))
    }

    fn batch_codes(&self, batch: &[Triplet], codes: &CodeMatrix, codebooks: &CodebookSet) -> Result<CodeMatrix> {
        let mut members: Vec<usize> = batch.iter().flat_map(|t| [t.anchor, t.positive, t.negative]).collect();
        members.sort_unstable();
        members.dedup();
        let z = self.encoder.forward(&self.features.select_rows(&members))?;
        let fresh = encode_all(codebooks, &z, Some(&codes.select_rows(&members)), self.params.icm_max_iters)?;
        let mut all: Vec<Vec<u16>> = codes.iter_rows().map(<[u16]>::to_vec).collect();
        for (pos, &i) in members.iter().enumerate() {
            all[i] = fresh.row(pos).to_vec();
        }
        CodeMatrix::from_rows(codes.num_codebooks(), codes.codebook_size(), all)
    }
}

/// Runs the full training procedure on `split.train`.
///
/// With `max_epochs = 0` the freshly initialized encoder is returned together
/// with all-zero codebooks and codes.
pub fn train(dataset: &LabeledDataset, split: &DatasetSplit, params: &HyperParams) -> Result<TrainOutput> {
    params.validate()?;
    split.validate(dataset.len())?;
    if split.train.is_empty() {
        return Err(arg_err!("training set is empty"));
    }
    let features = dataset.features().select_rows(&split.train);
    let labels: Vec<Vec<u32>> = split.train.iter().map(|&i| dataset.labels()[i].clone()).collect();
    let sim = Similarity::new(&labels);
    let n = features.rows();
    let has_pos = (0..n).any(|a| (0..n).any(|p| p != a && sim.similar(a, p)));
    let has_neg = (0..n).any(|a| (0..n).any(|b| !sim.similar(a, b)));
    if !(has_pos && has_neg) {
        return Err(arg_err!("training set needs at least one similar and one dissimilar pair"));
    }

    let encoder = build_encoder(params, dataset.dim())?;
    let mut tr = Trainer {
        params,
        features,
        sim,
        encoder,
    };
    let qcfg = params.quant_config();
    let mut codebooks = CodebookSet::zeros(params.m, params.k, params.embedding_dim)?;
    let mut codes = CodeMatrix::new(params.m, params.k, vec![0; n * params.m])?;
    let mut group_count = match params.mining {
        MiningMode::SingleGroup => 1,
        _ => params.group_count.min(n),
    };
    let all_items: Vec<usize> = (0..n).collect();
    let start = Instant::now();
    let mut log = Vec::with_capacity(params.max_epochs);

    let mut z = tr.encoder.forward(&tr.features)?;
    for epoch in 0..params.max_epochs {
        if epoch == 0 && !params.two_step {
            let (c, b) = init_product_quantization(&z, params.m, params.k, params.kmeans_iters, derive_seed(params.seed, 0, SEED_PQ))?;
            codebooks = c;
            codes = b;
        }

        let epoch_groups = group_count;
        let mut stats = MiningStats::default();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, epoch, SEED_SHUFFLE));
        let mut used: Vec<Triplet> = Vec::new();
        let mut mined_loss = 0.0;

        match params.mining {
            MiningMode::GroupHard | MiningMode::SingleGroup => {
                let partition = partition_groups(&all_items, group_count, derive_seed(params.seed, epoch, SEED_PARTITION))?;
                let (mut triplets, s) = mine_group_hard(&partition, &z, &tr.sim, params.delta, derive_seed(params.seed, epoch, SEED_MINING));
                stats = s;
                mined_loss = triplets.iter().map(|t| t.hinge(&z, params.delta).max(0.0)).sum();
                triplets.shuffle(&mut shuffle_rng);
                for batch in triplets.chunks(params.batch_size) {
                    let batch_codes;
                    let c = if params.per_batch_icm && !params.two_step {
                        batch_codes = tr.batch_codes(batch, &codes, &codebooks)?;
                        &batch_codes
                    } else {
                        &codes
                    };
                    let (_, inactive) = tr.train_batch(batch, c, &codebooks, epoch)?;
                    stats.outdated_at_use += inactive;
                }
                used = triplets;
            }
            MiningMode::Online => {
                let mut order = all_items.clone();
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(params.online_batch_size) {
                    let zc = tr.encoder.forward(&tr.features.select_rows(chunk))?;
                    let local_labels: Vec<Vec<u32>> = chunk.iter().map(|&i| labels[i].clone()).collect();
                    let local_sim = Similarity::new(&local_labels);
                    let local: Vec<usize> = (0..chunk.len()).collect();
                    let found = mine_online_batch(&local, &zc, &local_sim, params.delta);
                    stats.candidate_pairs += local
                        .iter()
                        .map(|&a| local.iter().filter(|&&p| p != a && local_sim.similar(a, p)).count())
                        .sum::<usize>();
                    stats.hard_triplets_found += found.len();
                    stats.selected += found.len();
                    mined_loss += found.iter().map(|t| t.hinge(&zc, params.delta)).sum::<f64>();
                    if found.is_empty() {
                        continue;
                    }
                    let batch: Vec<Triplet> = found
                        .iter()
                        .map(|t| Triplet::new(chunk[t.anchor], chunk[t.positive], chunk[t.negative]))
                        .collect();
                    tr.train_batch(&batch, &codes, &codebooks, epoch)?;
                    used.extend(batch);
                }
            }
        }
        let n_selected = stats.selected;
        let mean_triplet_loss = if n_selected > 0 { mined_loss / n_selected as f64 } else { 0.0 };
        tr.check_finite("triplet loss", mean_triplet_loss, epoch)?;

        z = tr.encoder.forward(&tr.features)?;

        let (mut residual_before, mut residual_after, mut qloss) = (0.0, 0.0, 0.0);
        if !params.two_step {
            let (rows, row_codes) = if used.is_empty() {
                (z.clone(), codes.clone())
            } else {
                triplet_rows(&z, &codes, &used)
            };
            residual_before = residual_sum(&codebooks, &rows, &row_codes);
            codebooks = match params.quantizer {
                QuantizerKind::Additive => update_codebooks(&codebooks, &rows, &row_codes, &qcfg)?.codebooks,
                QuantizerKind::Product => update_product_codebooks(&codebooks, &rows, &row_codes)?,
            };
            codes = encode_all(&codebooks, &z, Some(&codes), params.icm_max_iters)?;
            let (rows, row_codes) = if used.is_empty() {
                (z.clone(), codes.clone())
            } else {
                triplet_rows(&z, &codes, &used)
            };
            residual_after = residual_sum(&codebooks, &rows, &row_codes);
            qloss = match params.quantizer {
                QuantizerKind::Additive => quantization_loss(&codebooks, &rows, &row_codes, params.gamma, params.penalty_pairs),
                QuantizerKind::Product => residual_after,
            };
            tr.check_finite("quantization loss", qloss, epoch)?;
        }

        log.push(TrainLogRecord {
            epoch,
            mean_triplet_loss,
            quantization_loss: qloss,
            n_hard_triplets: n_selected,
            group_count: epoch_groups,
            wall_time: start.elapsed().as_secs_f64(),
            stats,
            residual_before_update: residual_before,
            residual_after_update: residual_after,
        });
        log::info!(
            "epoch {epoch}: {n_selected} triplets, groups {epoch_groups}, mean hinge {mean_triplet_loss:.4}, Q {qloss:.4}"
        );

        if params.mining == MiningMode::GroupHard {
            group_count = decay_groups(group_count, n_selected, params.min_triplets);
        }
        if params.early_stop && n_selected == 0 && epoch_groups == 1 {
            log::warn!("no hard triplets left with a single group; stopping after epoch {epoch}");
            break;
        }
    }

    if params.two_step && params.max_epochs > 0 {
        let (c, b) = init_product_quantization(&z, params.m, params.k, params.kmeans_iters, derive_seed(params.seed, 0, SEED_PQ))?;
        codebooks = c;
        codes = b;
        for _ in 0..params.final_quant_rounds {
            codebooks = match params.quantizer {
                QuantizerKind::Additive => update_codebooks(&codebooks, &z, &codes, &qcfg)?.codebooks,
                QuantizerKind::Product => update_product_codebooks(&codebooks, &z, &codes)?,
            };
            codes = encode_all(&codebooks, &z, Some(&codes), params.icm_max_iters)?;
        }
    }

    Ok(TrainOutput {
        encoder: tr.encoder,
        codebooks,
        train_codes: codes,
        log,
    })
}

/// Embeds `features` and encodes every row with ICM from a cold start.
pub fn encode_database(
    encoder: &EncoderParams,
    codebooks: &CodebookSet,
    features: &Matrix,
    icm_max_iters: usize,
) -> Result<CodeMatrix> {
    if features.rows() == 0 {
        return Ok(CodeMatrix::empty(codebooks.num_codebooks(), codebooks.codebook_size()));
    }
    let z = encoder.forward(features)?;
    if z.cols() != codebooks.dim() {
        return Err(arg_err!("encoder emits {} dims, codebooks expect {}", z.cols(), codebooks.dim()));
    }
    encode_all(codebooks, &z, None, icm_max_iters)
}

/// File names used inside a model directory.
pub mod files {
    pub const ENCODER: &str = "encoder.ckpt";
    pub const CODEBOOKS: &str = "codebooks.bin";
    pub const CODES: &str = "codes.bin";
    pub const TRAIN_CODES: &str = "train_codes.bin";
    pub const SPLIT: &str = "split.json";
    pub const LOG: &str = "train_log.csv";
    pub const CONFIG: &str = "config.cfg";
}

/// A trained model directory: encoder, codebooks, database codes and split.
#[derive(Debug, Clone)]
pub struct ModelDir {
    pub encoder: EncoderParams,
    pub codebooks: CodebookSet,
    /// Codes of `split.database`, in that order.
    pub codes: CodeMatrix,
    pub split: DatasetSplit,
    pub params: HyperParams,
}

impl ModelDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let params = HyperParams::parse_config(&std::fs::read_to_string(dir.join(files::CONFIG))?)?;
        Ok(Self {
            encoder: EncoderParams::load(&dir.join(files::ENCODER))?,
            codebooks: CodebookSet::load(&dir.join(files::CODEBOOKS))?,
            codes: CodeMatrix::load(&dir.join(files::CODES))?,
            split: DatasetSplit::load(&dir.join(files::SPLIT))?,
            params,
        })
    }
}
