use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unimixer_core::checkpoint;
use unimixer_core::config::ExperimentConfig;
use unimixer_core::model::{UniMixerModel, Variant};
use unimixer_core::scaling::{
    count_flops, count_params, emit_report, fit_by_variant, read_points_csv, run_sweep_with, write_fits_csv,
    PowerLawFit, XKind,
};
use unimixer_core::train::{train, write_trace_csv};
use unimixer_core::verify::{run_selected, CHECK_NAMES};
use unimixer_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "unimixer", version, about = "UniMixer mixing blocks: verification, training and scaling sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the equivalence, property and gradient self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run only the named checks (repeatable).
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(CHECK_NAMES))]
        only: Vec<String>,
    },
    /// Train one model and write its checkpoint and loss trace.
    Train(RunArgs),
    /// Train every (variant, size, seed) of the sweep and write scaling.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Fit ΔAUC power laws per variant to a scaling.csv.
    Fit {
        #[arg(long)]
        points: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        /// Also write fits.csv here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render scaling.csv (and fits and scaling.svg when a baseline is given).
    Report {
        #[arg(long)]
        points: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print parameter and FLOP accounting for the configured model.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed and the sweep seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    tau_start: Option<f64>,
    #[arg(long)]
    tau_end: Option<f64>,
    #[arg(long)]
    anneal_steps: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    /// AUC the power-law gains are measured from; fitting is skipped without it.
    #[arg(long)]
    baseline_auc: Option<f64>,
    #[arg(long, default_value = "params", value_parser = parse_x_kind)]
    x_kind: XKind,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_x_kind(s: &str) -> Result<XKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse(_) => EXIT_CONFIG,
            Error::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Verify { seed, only } => verify(seed, &only),
        Command::Train(args) => train_one(&args),
        Command::Sweep { run, fit } => sweep(&run, &fit),
        Command::Fit { points, fit, out_dir } => fit_points(&points, &fit, out_dir.as_deref()),
        Command::Report { points, fit, out_dir } => report(&points, &fit, &out_dir),
        Command::Count { config, variant, batch_size } => count(config.as_deref(), variant, batch_size),
    }
}

fn verify(seed: u64, only: &[String]) -> Result<(), Failure> {
    let report = run_selected(seed, |n| only.is_empty() || only.iter().any(|o| o == n));
    for c in &report.checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        println!("{mark} {:<22} {:>9.3}s  {}", c.name, c.elapsed.as_secs_f64(), c.detail);
    }
    if report.all_passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(Failure { code: EXIT_VERIFY, message: format!("{failed} verification check(s) failed") })
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Loads the config and applies command-line overrides.
fn experiment(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
        cfg.sweep.seeds = vec![seed];
    }
    if let Some(v) = args.variant {
        cfg.blocks.variant = v;
        cfg.sweep.variants = vec![v];
    }
    let s = &mut cfg.training.schedule;
    if let Some(t) = args.tau_start {
        s.tau_start = t;
    }
    if let Some(t) = args.tau_end {
        s.tau_end = t;
    }
    if let Some(j) = args.anneal_steps {
        s.steps = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_base(args: &RunArgs) -> Option<&Path> {
    args.config.as_deref().and_then(Path::parent)
}

fn train_one(args: &RunArgs) -> Result<(), Failure> {
    let cfg = experiment(args)?;
    let data = cfg.data.dataset(config_base(args))?;
    let model_cfg = cfg.model_config(&data, cfg.blocks.variant, None);
    let model = UniMixerModel::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.training.seed))?;
    let params = count_params(&model);
    let flops = count_flops(&model, 1);
    println!(
        "{}: {} dense params ({} embedding), {} FLOPs per sample, {} samples",
        cfg.blocks.variant,
        params.dense(),
        params.embedding,
        flops.flops(),
        data.len()
    );
    let out = train(model, &data, &cfg.training)?;
    std::fs::create_dir_all(&args.out_dir)?;
    checkpoint::save(&out.model, &args.out_dir.join("model.ckpt"))?;
    write_trace_csv(&out.trace, File::create(args.out_dir.join("trace.csv"))?)?;
    println!("final train loss  {:.6}", out.final_train_loss);
    println!("held-out loss     {:.6}", out.eval.loss);
    println!("held-out AUC      {:.6}", out.eval.auc);
    match out.eval.uauc {
        Some(u) => println!(
            "held-out UAUC     {:.6} ({} groups, {} skipped)",
            u.value, u.valid_groups, u.skipped_groups
        ),
        None => println!("held-out UAUC     undefined"),
    }
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn fits_for(points: &[unimixer_core::scaling::ScalingPoint], fit: &FitArgs) -> Vec<PowerLawFit> {
    let Some(baseline) = fit.baseline_auc else {
        return Vec::new();
    };
    let mut fits = Vec::new();
    for (variant, r) in fit_by_variant(points, fit.x_kind, baseline) {
        match r {
            Ok(f) => {
                println!(
                    "{variant}: ΔAUC = {:.6e} · ({} in {})^{:.6}  (RMSE {:.4}, {} points, baseline {})",
                    f.a, f.x_kind, f.x_units, f.b, f.residual, f.points, f.baseline_auc
                );
                fits.push(f);
            }
            Err(e) => eprintln!("{variant}: no fit: {e}"),
        }
    }
    fits
}

fn sweep(args: &RunArgs, fit: &FitArgs) -> Result<(), Failure> {
    let cfg = experiment(args)?;
    let data = cfg.data.dataset(config_base(args))?;
    let points = run_sweep_with(&cfg, &data, |p| {
        eprintln!("{} {} seed {}: {} params, AUC {:.4} [{}]", p.variant, p.size, p.seed, p.params, p.auc, p.status)
    })?;
    let failed = points.iter().filter(|p| !p.status.is_ok()).count();
    let fits = fits_for(&points, fit);
    for path in emit_report(&points, &fits, &args.out_dir)? {
        println!("wrote {}", path.display());
    }
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", points.len());
    }
    Ok(())
}

fn fit_points(points: &Path, fit: &FitArgs, out_dir: Option<&Path>) -> Result<(), Failure> {
    if fit.baseline_auc.is_none() {
        return Err(Error::Config("fit needs --baseline-auc".into()).into());
    }
    let pts = read_points_csv(File::open(points)?)?;
    let fits = fits_for(&pts, fit);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("fits.csv");
        write_fits_csv(&fits, File::create(&path)?)?;
        println!("wrote {}", path.display());
    }
    if fits.is_empty() {
        return Err(Failure { code: EXIT_FAILURE, message: "no variant could be fitted".into() });
    }
    Ok(())
}

fn report(points: &Path, fit: &FitArgs, out_dir: &Path) -> Result<(), Failure> {
    let pts = read_points_csv(File::open(points)?)?;
    let fits = fits_for(&pts, fit);
    for path in emit_report(&pts, &fits, out_dir)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn count(config: Option<&Path>, variant: Option<Variant>, batch_size: usize) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let mut data_cfg = cfg.data.clone();
    // only the field layout matters here
    if data_cfg.path.is_none() {
        data_cfg.samples = 1;
    }
    let data = data_cfg.dataset(config.and_then(Path::parent))?;
    let variants = match variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    println!("variant,size,embedding,tokenizer,mixing,swiglu,head,dense,total,macs_per_sample,flops_per_batch");
    for v in variants {
        for (size, overrides) in cfg.sizes() {
            let mc = cfg.model_config(&data, v, overrides);
            let model = match UniMixerModel::new(mc, &mut ChaCha8Rng::seed_from_u64(0)) {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("{v} {size}: {e}");
                    continue;
                }
            };
            let p = count_params(&model);
            let f = count_flops(&model, batch_size);
            println!(
                "{v},{size},{},{},{},{},{},{},{},{},{}",
                p.embedding,
                p.tokenizer,
                p.mixing,
                p.swiglu,
                p.head,
                p.dense(),
                p.total(),
                f.per_sample.total(),
                f.flops()
            );
        }
    }
    Ok(())
}
