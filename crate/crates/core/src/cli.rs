//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::data::{make_synthetic, DatasetSplit, FeatureFormat, LabeledDataset, load_features};
use crate::eval::evaluate_retrieval;
use crate::quantizer::CodeMatrix;
use crate::retrieval::search_batch;
use crate::train::{encode_database, files, log_to_csv, train, HyperParams, MiningMode, ModelDir, QuantizerKind};

#[derive(Debug, Parser)]
#[command(name = "tquant", version, about = "Triplet-trained additive quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a Gaussian-cluster dataset.
    Synth(SynthArgs),
    /// Train an encoder and codebooks, then encode the database.
    Train(TrainArgs),
    /// Encode a feature file with a trained model.
    Encode(EncodeArgs),
    /// Rank the database for query items or a query feature file.
    Search(SearchArgs),
    /// Score retrieval of the split's queries against the database.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 100)]
    per_cluster: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write features.csv instead of features.bin.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reuse a saved split instead of sampling one.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    group_count: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    /// Mine over one group spanning the whole training set.
    #[arg(long)]
    no_group_hard: bool,
    /// Train with lambda = 0 and quantize once at the end.
    #[arg(long)]
    two_step: bool,
    /// Product (subspace) codebooks instead of shared additive codebooks.
    #[arg(long)]
    pq_only: bool,
    /// Mine all hard triplets inside each minibatch of items.
    #[arg(long)]
    online_mining: bool,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Feature file (`.bin` or `.csv`).
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dataset item used as a query; repeatable. Defaults to the split's queries.
    #[arg(long = "query")]
    query: Vec<usize>,
    /// Query feature file, used instead of `--query`.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    r: usize,
    /// Report path; defaults to `report.json` inside the model directory.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50,100,500")]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    max_points: usize,
    #[arg(long)]
    pr_csv: Option<PathBuf>,
    #[arg(long)]
    pn_csv: Option<PathBuf>,
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit status: 0 on success, 2 on a usage error, 1 otherwise.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Encode(a) => encode(a),
        Command::Search(a) => search_cmd(a),
        Command::Eval(a) => eval(a),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let ds = make_synthetic(a.clusters, a.per_cluster, a.dim, a.sigma, a.seed)?;
    let format = if a.csv { FeatureFormat::Csv } else { FeatureFormat::Binary };
    ds.save_dir(&a.out, format)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} items of dimension {} to {}", ds.len(), ds.dim(), a.out.display());
    Ok(())
}

fn resolve_params(a: &TrainArgs) -> anyhow::Result<HyperParams> {
    let mut p = match &a.config {
        Some(path) => HyperParams::parse_config(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => HyperParams::default(),
    };
    for kv in &a.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        p.set(k, v)?;
    }
    macro_rules! take {
        ($($field:ident <- $flag:ident),* $(,)?) => {
            $(if let Some(v) = a.$flag { p.$field = v; })*
        };
    }
    take!(
        seed <- seed,
        max_epochs <- epochs,
        m <- m,
        k <- k,
        delta <- delta,
        lambda <- lambda,
        gamma <- gamma,
        lr <- lr,
        group_count <- group_count,
        batch_size <- batch_size,
        embedding_dim <- embedding_dim,
        n_query <- n_query,
        n_train <- n_train,
    );
    if a.no_group_hard {
        p.mining = MiningMode::SingleGroup;
    }
    if a.online_mining {
        p.mining = MiningMode::Online;
    }
    if a.two_step {
        p.two_step = true;
    }
    if a.pq_only {
        p.quantizer = QuantizerKind::Product;
    }
    p.validate()?;
    Ok(p)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let params = resolve_params(&a)?;
    let ds = LabeledDataset::load_dir(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let split = match &a.split {
        Some(path) => DatasetSplit::load(path)?,
        None => DatasetSplit::sample(ds.len(), params.n_query, params.n_train, params.seed)?,
    };
    let out = train(&ds, &split, &params)?;
    let db_features = ds.features().select_rows(&split.database);
    let codes = encode_database(&out.encoder, &out.codebooks, &db_features, params.icm_max_iters)?;

    fs::create_dir_all(&a.out)?;
    let dir = a.out.as_path();
    out.encoder.save(&dir.join(files::ENCODER))?;
    out.codebooks.save(&dir.join(files::CODEBOOKS))?;
    codes.save(&dir.join(files::CODES))?;
    out.train_codes.save(&dir.join(files::TRAIN_CODES))?;
    split.save(&dir.join(files::SPLIT))?;
    fs::write(dir.join(files::LOG), log_to_csv(&out.log))?;
    fs::write(dir.join(files::CONFIG), params.to_config())?;
    println!(
        "trained {} epochs; {} database items encoded with {} bits; model in {}",
        out.log.len(),
        codes.len(),
        out.codebooks.code_bits(),
        dir.display()
    );
    Ok(())
}

fn encode(a: EncodeArgs) -> anyhow::Result<()> {
    let model = ModelDir::load(&a.model)?;
    let features = load_features(&a.features, FeatureFormat::from_path(&a.features))?;
    let codes = encode_database(&model.encoder, &model.codebooks, &features, model.params.icm_max_iters)?;
    codes.save(&a.out)?;
    println!("encoded {} items to {}", codes.len(), a.out.display());
    Ok(())
}

fn query_embeddings(model: &ModelDir, ds: &LabeledDataset, items: &[usize]) -> anyhow::Result<crate::linalg::Matrix> {
    Ok(model.encoder.forward(&ds.features().select_rows(items))?)
}

fn search_cmd(a: SearchArgs) -> anyhow::Result<()> {
    let model = ModelDir::load(&a.model)?;
    let ds = LabeledDataset::load_dir(&a.data)?;
    model.split.validate(ds.len())?;
    check_codes(&model.codes, model.split.database.len(), &a.model)?;
    let (labels, z): (Vec<String>, _) = if let Some(path) = &a.queries {
        let f = load_features(path, FeatureFormat::from_path(path))?;
        ((0..f.rows()).map(|i| format!("q{i}")).collect(), model.encoder.forward(&f)?)
    } else {
        let items = if a.query.is_empty() { model.split.query.clone() } else { a.query.clone() };
        if let Some(&bad) = items.iter().find(|&&i| i >= ds.len()) {
            bail!("query item {bad} out of range for {} items", ds.len());
        }
        (items.iter().map(|&i| ds.ids()[i].clone()).collect(), query_embeddings(&model, &ds, &items)?)
    };
    let top = a.top.min(model.codes.len());
    let ranked = search_batch(&z, &model.codebooks, &model.codes, top)?;
    println!("query\trank\titem\tscore");
    for (label, r) in labels.iter().zip(&ranked) {
        for (rank, &(pos, score)) in r.entries.iter().enumerate() {
            println!("{label}\t{}\t{}\t{score:.6}", rank + 1, ds.ids()[model.split.database[pos]]);
        }
    }
    Ok(())
}

fn check_codes(codes: &CodeMatrix, expected: usize, dir: &Path) -> anyhow::Result<()> {
    if codes.len() != expected {
        bail!(
            "{} holds {} codes but the split has {expected} database items",
            dir.join(files::CODES).display(),
            codes.len()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = ModelDir::load(&a.model)?;
    let ds = LabeledDataset::load_dir(&a.data)?;
    model.split.validate(ds.len())?;
    check_codes(&model.codes, model.split.database.len(), &a.model)?;
    let z = query_embeddings(&model, &ds, &model.split.query)?;
    let report = evaluate_retrieval(
        &z,
        &model.split.query,
        &model.split.database,
        &model.codebooks,
        &model.codes,
        &ds.similarity(),
        a.r,
        &a.n_list,
        a.max_points,
    )?;
    println!("MAP@{} = {:.6} over {} queries", report.r, report.map_at_r, report.n_queries);
    let path = a.report.unwrap_or_else(|| a.model.join("report.json"));
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    if let Some(p) = a.pr_csv {
        let mut s = String::from("recall,precision\n");
        for (r, pr) in &report.pr_curve {
            s.push_str(&format!("{r},{pr}\n"));
        }
        fs::write(p, s)?;
    }
    if let Some(p) = a.pn_csv {
        let mut s = String::from("n,precision\n");
        for (n, pr) in &report.p_at_n {
            s.push_str(&format!("{n},{pr}\n"));
        }
        fs::write(p, s)?;
    }
    Ok(())
}
