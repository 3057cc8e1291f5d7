//! Command-line front end: attacks, bounds, the relaxation dual, dataset
//! generation, training, and the benchmark harness.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use advgnn_core::attacks::{
    cw_attack, mi_fgsm_plus, pgd_attack, AttackOutcome, AttackProperty, CwConfig, MiFgsmConfig,
    PerturbationBall, PgdConfig,
};
use advgnn_core::bench::{
    emit_report, run_benchmark, summarize, BenchConfig, BenchMethod, ReportFormat,
};
use advgnn_core::bounds::{ibp, merged_bounds, wk_bounds, LayerBounds};
use advgnn_core::datagen::{
    easy_variant, generate_dataset, read_dataset, read_images, write_dataset, BisectConfig,
};
use advgnn_core::gnn::{advgnn_attack, AdvGnnConfig, FeatureMode, GnnParams};
use advgnn_core::netcore::Network;
use advgnn_core::relaxation::{merged_dual, AscentConfig};
use advgnn_core::synth::random_network;
use advgnn_core::training::{train, write_loss_log, TrainConfig, TrainingSample};

#[derive(Parser)]
#[command(name = "advgnn", about = "Adversarial attacks on ReLU networks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single attack on one property and print a JSON record.
    Attack(AttackArgs),
    /// Compute per-layer pre-activation bounds for a property.
    Bounds(BoundsArgs),
    /// Solve the relaxation dual and print duals, value, and primal point.
    Relax(RelaxArgs),
    /// Train attack parameters on a property dataset.
    TrainGnn(TrainArgs),
    /// Generate a minimal-perturbation property dataset.
    GenDataset(GenDatasetArgs),
    /// Benchmark several methods over a dataset with timeouts and seeds.
    Bench(BenchArgs),
    /// Write a random ReLU network for experimentation.
    GenNet(GenNetArgs),
}

/// Property file: a JSON object with the input point, class pair, and ε.
#[derive(Serialize, Deserialize)]
struct PropFile {
    #[serde(alias = "image")]
    x: Vec<f64>,
    y: usize,
    y_tar: usize,
    epsilon: f64,
}

fn load_property(net: &Network, path: &PathBuf) -> Result<AttackProperty> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading property file {}", path.display()))?;
    let p: PropFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing property file {}", path.display()))?;
    let ball = PerturbationBall::around(net, p.x, p.epsilon)?;
    Ok(AttackProperty::new(ball, p.y, p.y_tar)?)
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodName {
    Pgd,
    Mifgsm,
    Cw,
    Advgnn,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    prop: PathBuf,
    #[arg(long, value_enum)]
    method: MethodName,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    timeout: f64,
    /// Step size (default depends on the method).
    #[arg(long)]
    alpha: Option<f64>,
    /// Iterations per restart.
    #[arg(long)]
    steps: Option<usize>,
    /// Momentum decay for mifgsm.
    #[arg(long)]
    mu: Option<f64>,
    /// Maximum restarts (default: until timeout).
    #[arg(long)]
    restarts: Option<usize>,
    /// Trained parameters for advgnn.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Feature mode for advgnn.
    #[arg(long, value_enum, default_value_t = FeatureModeArg::Dual)]
    feature_mode: FeatureModeArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FeatureModeArg {
    Dual,
    Wk,
}

impl From<FeatureModeArg> for FeatureMode {
    fn from(m: FeatureModeArg) -> Self {
        match m {
            FeatureModeArg::Dual => FeatureMode::Dual,
            FeatureModeArg::Wk => FeatureMode::Wk,
        }
    }
}

#[derive(Serialize)]
struct AttackRecord<'a> {
    method: &'a str,
    seed: u64,
    #[serde(flatten)]
    outcome: AttackOutcome,
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let net = Network::from_json_file(&args.net)?;
    let prop = load_property(&net, &args.prop)?;
    let budget = Some(Duration::from_secs_f64(args.timeout));
    let (name, outcome) = match args.method {
        MethodName::Pgd => {
            let mut cfg = PgdConfig {
                seed: args.seed,
                time_budget: budget,
                max_restarts: args.restarts,
                ..PgdConfig::default()
            };
            if let Some(a) = args.alpha {
                cfg.alpha = a;
            }
            if let Some(s) = args.steps {
                cfg.steps = s;
            }
            ("pgd", pgd_attack(&net, &prop, &cfg)?)
        }
        MethodName::Mifgsm => {
            let mut cfg = MiFgsmConfig {
                seed: args.seed,
                time_budget: budget,
                max_restarts: args.restarts,
                ..MiFgsmConfig::default()
            };
            if let Some(a) = args.alpha {
                cfg.alpha = a;
            }
            if let Some(s) = args.steps {
                cfg.steps = s;
            }
            if let Some(m) = args.mu {
                cfg.mu = m;
            }
            ("mifgsm", mi_fgsm_plus(&net, &prop, &cfg)?)
        }
        MethodName::Cw => {
            let mut cfg = CwConfig {
                time_budget: budget,
                ..CwConfig::default()
            };
            if let Some(a) = args.alpha {
                cfg.alpha = a;
            }
            if let Some(s) = args.steps {
                cfg.steps = s;
            }
            ("cw", cw_attack(&net, &prop, &cfg)?)
        }
        MethodName::Advgnn => {
            let params_path = args
                .params
                .as_ref()
                .context("--method advgnn requires --params")?;
            let params = GnnParams::from_json_file(params_path)?;
            let mut cfg = AdvGnnConfig {
                seed: args.seed,
                time_budget: budget,
                max_restarts: args.restarts,
                feature_mode: args.feature_mode.into(),
                ..AdvGnnConfig::default()
            };
            if let Some(a) = args.alpha {
                cfg.alpha = a;
            }
            if let Some(s) = args.steps {
                cfg.max_iters = s;
            }
            ("advgnn", advgnn_attack(&net, &prop, &params, &cfg)?)
        }
    };
    let record = AttackRecord {
        method: name,
        seed: args.seed,
        outcome,
    };
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BoundsMethod {
    Ibp,
    Wk,
    Both,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    prop: PathBuf,
    #[arg(long, value_enum, default_value_t = BoundsMethod::Both)]
    method: BoundsMethod,
}

fn cmd_bounds(args: BoundsArgs) -> Result<()> {
    let net = Network::from_json_file(&args.net)?;
    let prop = load_property(&net, &args.prop)?;
    let bounds: LayerBounds = match args.method {
        BoundsMethod::Ibp => ibp(&net, &prop.ball)?,
        BoundsMethod::Wk => wk_bounds(&net, &prop.ball)?,
        BoundsMethod::Both => merged_bounds(&net, &prop.ball)?,
    };
    println!("{}", serde_json::to_string(&bounds)?);
    Ok(())
}

#[derive(Args)]
struct RelaxArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    prop: PathBuf,
    /// Supergradient ascent steps.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
}

#[derive(Serialize)]
struct RelaxRecord {
    q: f64,
    rho: Vec<Vec<f64>>,
    x_lp: Vec<f64>,
}

fn cmd_relax(args: RelaxArgs) -> Result<()> {
    let net = Network::from_json_file(&args.net)?;
    let prop = load_property(&net, &args.prop)?;
    let cfg = AscentConfig {
        steps: args.steps,
        lr: args.lr,
        ..AscentConfig::default()
    };
    let dual = merged_dual(&net, &prop, &cfg)?;
    let record = RelaxRecord {
        q: dual.dual_value,
        rho: dual.rho,
        x_lp: dual.x_lp,
    };
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    net: PathBuf,
    /// Property dataset (JSON lines) used as training samples.
    #[arg(long)]
    dataset: PathBuf,
    /// Optional validation dataset; best-validation parameters are kept.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 40)]
    horizon: usize,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 5)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    t1: usize,
    #[arg(long, default_value_t = 1)]
    t2: usize,
    #[arg(long, default_value_t = 1e-2)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = FeatureModeArg::Dual)]
    feature_mode: FeatureModeArg,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss log CSV.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

fn records_to_samples(path: &PathBuf, net: &Network) -> Result<Vec<TrainingSample>> {
    let records = read_dataset(path)?;
    let samples: Vec<TrainingSample> = records
        .into_iter()
        .map(|r| TrainingSample {
            x: r.image,
            y: r.y,
            y_tar: r.y_tar,
            epsilon: r.epsilon,
            net_ref: None,
        })
        .collect();
    for s in &samples {
        s.validate(net)?;
    }
    Ok(samples)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let net = Network::from_json_file(&args.net)?;
    let samples = records_to_samples(&args.dataset, &net)?;
    let validation = match &args.validation {
        Some(path) => Some(records_to_samples(path, &net)?),
        None => None,
    };
    let cfg = TrainConfig {
        horizon: args.horizon,
        gamma: args.gamma,
        starts: args.starts,
        epochs: args.epochs,
        seed: args.seed,
        alpha: args.alpha,
        p: args.p,
        t1: args.t1,
        t2: args.t2,
        feature_mode: args.feature_mode.into(),
        ..TrainConfig::default()
    };
    let (params, log) = train(&net, &samples, validation.as_deref(), &cfg)?;
    params.to_json_file(&args.out)?;
    if let Some(path) = &args.loss_log {
        write_loss_log(path, &log)?;
    }
    eprintln!(
        "trained {} epochs; final loss {:.6}; parameters written to {}",
        log.len(),
        log.last().map_or(f64::NAN, |e| e.total_loss),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct GenDatasetArgs {
    #[arg(long)]
    net: PathBuf,
    /// JSON-lines image file: {"image": [...], "label": n} per line.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 1e-3)]
    eta: f64,
    #[arg(long, default_value_t = 20000)]
    restarts: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write an easy variant with this added to every ε.
    #[arg(long)]
    easy_delta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen_dataset(args: GenDatasetArgs) -> Result<()> {
    let net = Network::from_json_file(&args.net)?;
    let images = read_images(&args.images)?;
    let cfg = BisectConfig {
        eta: args.eta,
        restarts: args.restarts,
        steps: args.steps,
        lr: args.lr,
        ..BisectConfig::default()
    };
    let records = generate_dataset(&net, &images, args.count, &cfg, args.seed)?;
    write_dataset(&args.out, &records)?;
    eprintln!("wrote {} properties to {}", records.len(), args.out.display());
    if let Some(delta) = args.easy_delta {
        let easy = easy_variant(&records, delta);
        let easy_path = args.out.with_extension("easy.jsonl");
        write_dataset(&easy_path, &easy)?;
        eprintln!("wrote easy variant to {}", easy_path.display());
    }
    Ok(())
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated method names: pgd, mifgsm, cw, advgnn.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Trained parameters (required when methods include advgnn).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Timeout per run, seconds.
    #[arg(long, default_value_t = 100.0)]
    timeout: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Dispatch runs to a worker pool.
    #[arg(long, default_value_t = false)]
    parallel: bool,
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let net = Network::from_json_file(&args.net)?;
    let dataset = read_dataset(&args.dataset)?;
    if args.methods.is_empty() {
        bail!("--methods needs at least one method name");
    }
    let gnn_params = match &args.params {
        Some(path) => Some(GnnParams::from_json_file(path)?),
        None => None,
    };
    let methods: Vec<BenchMethod> = args
        .methods
        .iter()
        .map(|name| BenchMethod::by_name(name, gnn_params.as_ref()))
        .collect::<advgnn_core::Result<_>>()?;
    let cfg = BenchConfig {
        timeout: Duration::from_secs_f64(args.timeout),
        seeds: args.seeds.clone(),
        parallel: args.parallel,
    };
    let records = run_benchmark(&net, &dataset, &methods, &cfg)?;
    let summary = summarize(&records);
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("records.jsonl"),
        records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
            + "\n",
    )?;
    let mut written = emit_report(&summary, ReportFormat::Csv, &args.out)?;
    written.extend(emit_report(&summary, ReportFormat::Json, &args.out)?);
    for m in &summary.methods {
        eprintln!(
            "{}: mean time {:.3}s, timeout {:.1}%",
            m.method, m.mean_time, m.pct_timeout
        );
    }
    eprintln!("reports in {}", args.out.display());
    Ok(())
}

#[derive(Args)]
struct GenNetArgs {
    /// Layer widths, e.g. 2,8,8,3.
    #[arg(long, value_delimiter = ',')]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen_net(args: GenNetArgs) -> Result<()> {
    use rand::SeedableRng;
    if args.widths.len() < 2 {
        bail!("--widths needs at least input and output sizes");
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let net = random_network(&mut rng, &args.widths);
    net.to_json_file(&args.out)?;
    eprintln!("wrote network to {}", args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Attack(args) => cmd_attack(args),
        Command::Bounds(args) => cmd_bounds(args),
        Command::Relax(args) => cmd_relax(args),
        Command::TrainGnn(args) => cmd_train(args),
        Command::GenDataset(args) => cmd_gen_dataset(args),
        Command::Bench(args) => cmd_bench(args),
        Command::GenNet(args) => cmd_gen_net(args),
    }
}
