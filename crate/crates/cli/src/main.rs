//! `fastsfp` experiment driver.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 verification failure.

mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fastsfp_core::config::{self, KvConfig};
use fastsfp_core::data::{export_dataset, gen_dataset, MAX_LABELS};
use fastsfp_core::error::{Error, Result};
use fastsfp_core::gradcheck::{run_suites, Suite, DEFAULT_SEEDS};
use fastsfp_core::metrics::{evaluate, metrics_csv, EmbeddingRecord, Split};
use fastsfp_core::sfp::{
    dense_param_count, flops_estimate, param_count, within_efficiency_bound, SfpConfig, SfpLayer,
};
use fastsfp_core::tensor::Tensor;
use fastsfp_core::train::{
    ablation_summary_csv, contrastive_csv, contrastive_data, default_encoder, distill_csv, embedding_records,
    rank_sweep_csv, run_ablation, run_contrastive, run_distillation, run_rank_sweep, ContrastiveConfig, RunConfig,
    Strategy,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use output::Output;

#[derive(Parser, Debug)]
#[command(name = "fastsfp", version, about = "Attention distillation and factorized projection experiments")]
struct Cli {
    /// Directory all outputs are written to.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Mirror every CSV as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// key = value config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and FLOP counts per rank.
    Accounting(AccountingArgs),
    /// Time the factorized forward against a dense matrix-vector product.
    Bench(BenchArgs),
    /// Distill one student with a single strategy.
    Distill(DistillArgs),
    /// Run all five distillation strategies on shared data.
    Ablation(AblationArgs),
    /// Train the projection head and text map against a frozen encoder.
    Contrastive(ContrastiveArgs),
    /// Repeat the contrastive run across ranks.
    RankSweep(RankSweepArgs),
    /// Metrics over an embeddings file.
    Eval(EvalArgs),
    /// Export a synthetic volume dataset.
    GenData(GenDataArgs),
    /// Run every finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct AccountingArgs {
    /// Input width of the projection.
    #[arg(long)]
    in_dim: Option<usize>,
    /// Output width, also the block size.
    #[arg(long)]
    out_dim: Option<usize>,
    /// Comma-separated ranks.
    #[arg(long)]
    rank_list: Option<String>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Input width of the projection.
    #[arg(long)]
    in_dim: Option<usize>,
    /// Output width, also the block size.
    #[arg(long)]
    out_dim: Option<usize>,
    /// Core rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Timed repetitions per method.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    /// naive_kd, feature_kd, fast_no_asp, fast_no_daf or fast_full.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Synthetic volumes to generate.
    #[arg(long)]
    n_volumes: Option<usize>,
    /// Volumes per step.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct AblationArgs {
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Synthetic volumes to generate.
    #[arg(long)]
    n_volumes: Option<usize>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct ContrastiveArgs {
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Core rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Synthetic volumes to generate.
    #[arg(long)]
    n_volumes: Option<usize>,
}

#[derive(Args, Debug)]
struct RankSweepArgs {
    /// Comma-separated ranks.
    #[arg(long)]
    ranks: Option<String>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Synthetic volumes to generate.
    #[arg(long)]
    n_volumes: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSON array of embedding records, as written by `contrastive`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Split the Youden threshold is fitted on: validation or test.
    #[arg(long)]
    threshold_on: Option<Split>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Volume pairs to export.
    #[arg(long)]
    n: Option<usize>,
    /// Binary labels per volume.
    #[arg(long)]
    n_labels: Option<usize>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Random seeds per suite.
    #[arg(long)]
    seeds: Option<usize>,
    /// Comma-separated subset of suites; all when omitted.
    #[arg(long)]
    suites: Option<String>,
}

/// Collects `Some` flags into a config overlay.
struct Flags(KvConfig);

impl Flags {
    fn new() -> Self {
        Self(KvConfig::default())
    }

    fn put<T: ToString>(mut self, key: &str, v: &Option<T>) -> Result<Self> {
        if let Some(v) = v {
            self.0.set(key, v.to_string())?;
        }
        Ok(self)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<T> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad {what} entry '{x}'"))))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty {what}")));
    }
    Ok(items)
}

fn get_or<T: std::str::FromStr>(kv: &KvConfig, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    Ok(kv.get(key)?.unwrap_or(default))
}

enum Outcome {
    Done,
    VerificationFailed,
}

fn accounting(kv: &KvConfig, out: &Output) -> Result<Outcome> {
    kv.check_keys(&["in_dim", "out_dim", "rank_list"])?;
    let in_dim = get_or(kv, "in_dim", 2_097_152usize)?;
    let out_dim = get_or(kv, "out_dim", 512usize)?;
    let ranks_text = get_or(kv, "rank_list", "6,5,4,3".to_string())?;
    let ranks: Vec<usize> = parse_list(&ranks_text, "rank list")?;
    let mut resolved = KvConfig::default();
    resolved.set("in_dim", in_dim)?;
    resolved.set("out_dim", out_dim)?;
    resolved.set("rank_list", &ranks_text)?;
    out.echo_config(&resolved)?;

    let mut csv = String::from(
        "r,exact_params,nominal_params,two_stage_flops,nominal_flops,relative_to_dense,within_bound\n",
    );
    for r in ranks {
        let cfg = SfpConfig::new(in_dim, out_dim, r)?;
        let p = param_count(&cfg);
        let f = flops_estimate(&cfg);
        csv += &format!(
            "{r},{},{},{},{},{},{}\n",
            p.exact,
            p.nominal,
            f.two_stage,
            f.nominal,
            f.relative_to_dense,
            within_efficiency_bound(r, out_dim)
        );
    }
    out.write_csv("accounting", &csv)?;
    println!("dense params: {}", dense_param_count(in_dim, out_dim));
    print!("{csv}");
    Ok(Outcome::Done)
}

fn bench(kv: &KvConfig, out: &Output) -> Result<Outcome> {
    kv.check_keys(&["in_dim", "out_dim", "rank", "iters"])?;
    let in_dim = get_or(kv, "in_dim", 65_536usize)?;
    let out_dim = get_or(kv, "out_dim", 256usize)?;
    let rank = get_or(kv, "rank", 6usize)?;
    let iters = get_or(kv, "iters", 20usize)?.max(1);
    let mut resolved = KvConfig::default();
    resolved.set("in_dim", in_dim)?;
    resolved.set("out_dim", out_dim)?;
    resolved.set("rank", rank)?;
    resolved.set("iters", iters)?;
    out.echo_config(&resolved)?;

    let cfg = SfpConfig::new(in_dim, out_dim, rank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = SfpLayer::random(cfg, &mut rng)?;
    let dense = layer.contract_to_dense();
    let x = Tensor::random_normal(&[in_dim], 1.0, &mut rng);
    let xcol = x.clone().reshape(&[in_dim, 1])?;

    let t = Instant::now();
    let mut y_sfp = layer.forward(&x)?;
    for _ in 1..iters {
        y_sfp = layer.forward(&x)?;
    }
    let sfp_ms = t.elapsed().as_secs_f64() * 1e3 / iters as f64;
    let t = Instant::now();
    let mut y_dense = dense.matmul(&xcol)?;
    for _ in 1..iters {
        y_dense = dense.matmul(&xcol)?;
    }
    let dense_ms = t.elapsed().as_secs_f64() * 1e3 / iters as f64;
    let diff = y_sfp.max_abs_diff(&y_dense.reshape(&[out_dim])?)?;
    let csv = format!(
        "in_dim,out_dim,rank,iters,sfp_ms,dense_ms,speedup,max_output_diff\n{in_dim},{out_dim},{rank},{iters},{sfp_ms:.4},{dense_ms:.4},{:.3},{diff:e}\n",
        dense_ms / sfp_ms
    );
    out.write_csv("bench", &csv)?;
    print!("{csv}");
    Ok(Outcome::Done)
}

fn distill(kv: &KvConfig, out: &Output) -> Result<Outcome> {
    let cfg = config::run_config(kv, RunConfig::default())?;
    out.echo_config(&config::run_entries(&cfg)?)?;
    let res = run_distillation(&cfg)?;
    out.write_csv(&format!("distill_{}", cfg.strategy), &distill_csv(&res.history))?;
    out.write_bytes("student.enc", &res.student.encode())?;
    if let Some(last) = res.history.last() {
        println!("{}: epoch {} end_mse {}", cfg.strategy, last.epoch, last.end_mse);
    }
    Ok(Outcome::Done)
}

fn ablation(kv: &KvConfig, out: &Output) -> Result<Outcome> {
    if kv.get_raw("strategy").is_some() {
        return Err(Error::Config("ablation runs every strategy; 'strategy' is not accepted".into()));
    }
    let cfg = config::run_config(kv, RunConfig::ablation(Strategy::FastFull, 0))?;
    let mut echo = config::run_entries(&cfg)?;
    echo.remove("strategy");
    out.echo_config(&echo)?;
    let runs = run_ablation(&cfg)?;
    for r in &runs {
        out.write_csv(&format!("ablation_{}", r.strategy), &distill_csv(&r.history))?;
    }
    let summary = ablation_summary_csv(&runs);
    out.write_csv("ablation_summary", &summary)?;
    print!("{summary}");
    Ok(Outcome::Done)
}

fn contrastive(kv: &KvConfig, out: &Output) -> Result<Outcome> {
    let cfg = config::contrastive_config(kv, ContrastiveConfig::default())?;
    out.echo_config(&config::contrastive_entries(&cfg)?)?;
    let encoder = default_encoder(cfg.encoder, cfg.seed)?;
    let (train, eval) = contrastive_data(&cfg)?;
    let res = run_contrastive(&cfg, &encoder, &train)?;
    out.write_csv("contrastive", &contrastive_csv(&res.history))?;
    out.write_bytes("sfp.bin", &res.sfp.encode())?;
    let records = embedding_records(&res, &encoder, &eval)?;
    out.write_json("embeddings", &records)?;
    if let Some(last) = res.history.last() {
        println!(
            "epoch {}: loss {} matched {} mismatched {}",
            last.epoch, last.loss, last.matched, last.mismatched
        );
    }
    Ok(Outcome::Done)
}

fn rank_sweep(kv: &KvConfig, out: &Output) -> Result<Outcome> {
    let mut kv = kv.clone();
    let ranks_text = kv.remove("ranks").unwrap_or_else(|| "3,4,5,6".into());
    let ranks: Vec<usize> = parse_list(&ranks_text, "rank list")?;
    let cfg = config::contrastive_config(&kv, ContrastiveConfig::default())?;
    let mut echo = config::contrastive_entries(&cfg)?;
    echo.remove("rank");
    echo.set("ranks", &ranks_text)?;
    out.echo_config(&echo)?;
    let rows = run_rank_sweep(&cfg, &ranks)?;
    let csv = rank_sweep_csv(&rows);
    out.write_csv("rank_sweep", &csv)?;
    print!("{csv}");
    Ok(Outcome::Done)
}

fn eval(kv: &KvConfig, out: &Output) -> Result<Outcome> {
    kv.check_keys(&["embeddings", "threshold_on"])?;
    let path: PathBuf = kv
        .get("embeddings")?
        .ok_or_else(|| Error::Config("eval needs --embeddings or an 'embeddings' key".into()))?;
    let split = get_or(kv, "threshold_on", Split::Validation)?;
    let mut resolved = KvConfig::default();
    resolved.set("embeddings", path.display())?;
    resolved.set("threshold_on", split)?;
    out.echo_config(&resolved)?;
    let text = std::fs::read_to_string(&path)?;
    let records: Vec<EmbeddingRecord> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let csv = metrics_csv(&evaluate(&records, split)?)?;
    out.write_csv("metrics", &csv)?;
    print!("{csv}");
    Ok(Outcome::Done)
}

fn gen_data(kv: &KvConfig, out: &Output) -> Result<Outcome> {
    kv.check_keys(&["seed", "n", "n_labels", "volume"])?;
    let seed = get_or(kv, "seed", 0u64)?;
    let n = get_or(kv, "n", 10usize)?;
    let n_labels = get_or(kv, "n_labels", 4usize)?;
    if n_labels > MAX_LABELS {
        return Err(Error::Config(format!("n_labels must be ≤ {MAX_LABELS}")));
    }
    let volume = match kv.get_raw("volume") {
        Some(v) => config::parse_volume(v)?,
        None => [8, 8, 8],
    };
    let mut resolved = KvConfig::default();
    resolved.set("seed", seed)?;
    resolved.set("n", n)?;
    resolved.set("n_labels", n_labels)?;
    resolved.set("volume", format!("{}x{}x{}", volume[0], volume[1], volume[2]))?;
    out.echo_config(&resolved)?;
    let pairs = gen_dataset(seed, n, volume, n_labels)?;
    export_dataset(out.dir(), &pairs)?;
    println!("wrote {n} pairs to {}", out.dir().display());
    Ok(Outcome::Done)
}

fn grad_check(kv: &KvConfig, out: &Output) -> Result<Outcome> {
    kv.check_keys(&["seeds", "suites"])?;
    let seeds = get_or(kv, "seeds", DEFAULT_SEEDS)?;
    let suites: Vec<Suite> = match kv.get_raw("suites") {
        Some(s) => parse_list(s, "suite list")?,
        None => Suite::ALL.to_vec(),
    };
    let mut resolved = KvConfig::default();
    resolved.set("seeds", seeds)?;
    resolved.set("suites", suites.iter().map(|s| s.name()).collect::<Vec<_>>().join(","))?;
    out.echo_config(&resolved)?;
    let report = run_suites(&suites, seeds, 0)?;
    let csv = report.to_csv();
    out.write_csv("grad_check", &csv)?;
    print!("{csv}");
    Ok(if report.passed() {
        Outcome::Done
    } else {
        Outcome::VerificationFailed
    })
}

fn run(cli: &Cli) -> Result<Outcome> {
    let file = match &cli.config {
        Some(p) => KvConfig::from_file(p)?,
        None => KvConfig::default(),
    };
    let flags = match &cli.command {
        Command::Accounting(a) => Flags::new()
            .put("in_dim", &a.in_dim)?
            .put("out_dim", &a.out_dim)?
            .put("rank_list", &a.rank_list)?,
        Command::Bench(a) => Flags::new()
            .put("in_dim", &a.in_dim)?
            .put("out_dim", &a.out_dim)?
            .put("rank", &a.rank)?
            .put("iters", &a.iters)?,
        Command::Distill(a) => Flags::new()
            .put("strategy", &a.strategy)?
            .put("seed", &a.seed)?
            .put("epochs", &a.epochs)?
            .put("lr", &a.lr)?
            .put("n_volumes", &a.n_volumes)?
            .put("batch_size", &a.batch_size)?,
        Command::Ablation(a) => Flags::new()
            .put("epochs", &a.epochs)?
            .put("n_volumes", &a.n_volumes)?
            .put("seed", &a.seed)?
            .put("lr", &a.lr)?,
        Command::Contrastive(a) => Flags::new()
            .put("seed", &a.seed)?
            .put("epochs", &a.epochs)?
            .put("rank", &a.rank)?
            .put("lr", &a.lr)?
            .put("n_volumes", &a.n_volumes)?,
        Command::RankSweep(a) => Flags::new()
            .put("ranks", &a.ranks)?
            .put("seed", &a.seed)?
            .put("epochs", &a.epochs)?
            .put("lr", &a.lr)?
            .put("n_volumes", &a.n_volumes)?,
        Command::Eval(a) => Flags::new()
            .put("embeddings", &a.embeddings.as_ref().map(|p| p.display().to_string()))?
            .put("threshold_on", &a.threshold_on)?,
        Command::GenData(a) => Flags::new()
            .put("seed", &a.seed)?
            .put("n", &a.n)?
            .put("n_labels", &a.n_labels)?,
        Command::GradCheck(a) => Flags::new().put("seeds", &a.seeds)?.put("suites", &a.suites)?,
    };
    let kv = file.merged(&flags.0);
    let out = Output::create(&cli.out_dir, cli.json)?;
    match &cli.command {
        Command::Accounting(_) => accounting(&kv, &out),
        Command::Bench(_) => bench(&kv, &out),
        Command::Distill(_) => distill(&kv, &out),
        Command::Ablation(_) => ablation(&kv, &out),
        Command::Contrastive(_) => contrastive(&kv, &out),
        Command::RankSweep(_) => rank_sweep(&kv, &out),
        Command::Eval(_) => eval(&kv, &out),
        Command::GenData(_) => gen_data(&kv, &out),
        Command::GradCheck(_) => grad_check(&kv, &out),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SFP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("SFP_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => {
            eprintln!("verification failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
