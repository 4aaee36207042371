use adjscc_core::checkpoint::Checkpoint;
use adjscc_core::data::{ingest_dataset, Dataset, Split};
use adjscc_core::eval::{
    emit_artifacts, eval_adaptive_vs_fixed, eval_per_class, eval_rate_vs_snr, Artifacts,
    EvalOptions, RatePsnrRecord,
};
use adjscc_core::model::{JsccModel, ModelKind};
use adjscc_core::nn::Module;
use adjscc_core::training::{train, EpochRecord, RunManifest, TrainOptions, FINAL_CHECKPOINT};
use adjscc_core::{DecisionMode, Error, ExperimentConfig, SnrDb};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "adjscc", version, about = "Adaptive-rate deep JSCC over AWGN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset configuration as JSON.
    InitConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an untrained checkpoint for a configuration.
    InitModel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed-rate model with this many selective groups instead of the policy.
        #[arg(long)]
        active_groups: Option<usize>,
    },
    /// Train an adaptive-rate model through every configured stage.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a fixed-rate model that always keeps `j` selective groups.
    TrainBaseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        active_groups: usize,
    },
    /// Evaluate checkpoints and write CSVs and figures.
    Eval {
        #[arg(value_enum)]
        study: Study,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Redraw a figure from an evaluation CSV.
    Plot {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show a checkpoint's configuration, parameter counts and provenance.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for checkpoints, the curve and the manifest.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// CIFAR-10 directory; overrides the config and the environment.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Stop after this many epochs in total; resume later with --resume.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    RateVsSnr,
    Compare,
    PerClass,
}

#[derive(Clone, Copy, ValueEnum)]
enum Decision {
    Argmax,
    Sample,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint(s) under evaluation; rate-vs-snr accepts several.
    #[arg(long, required = true, num_args = 1..)]
    ckpt: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    baseline_ckpts: Vec<PathBuf>,
    /// SNR grid in dB, comma separated; per-class takes exactly one value.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    snrs: Vec<f64>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    #[arg(long, value_enum)]
    decision: Option<Decision>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Evaluate on the first `n` test images only.
    #[arg(long)]
    limit: Option<usize>,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> (&'static str, u8) {
        match self {
            Failure::Usage(_) => ("usage", 1),
            Failure::Core(e) => match e {
                Error::Config(_) => ("config", 1),
                Error::Argument(_) => ("usage", 1),
                Error::Numerical(_) => ("numerical", 3),
                Error::Degenerate(_) => ("numerical", 3),
                Error::Shape(_) => ("shape", 2),
                Error::Framing(_) => ("framing", 2),
                Error::Data(_) => ("data", 2),
                Error::Checkpoint(_) => ("checkpoint", 2),
                Error::Io(_) => ("io", 2),
                Error::Json(_) => ("config", 1),
                Error::Csv(_) => ("data", 2),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            eprintln!("ERROR:usage: {}", text.trim_start_matches("error: ").trim_end());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, exit) = f.code();
            eprintln!("ERROR:{code}: {}", f.message());
            ExitCode::from(exit)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::InitConfig { preset, out } => {
            let json = ExperimentConfig::preset(&preset)?.to_json() + "\n";
            match out {
                Some(p) => std::fs::write(p, json).map_err(Error::from)?,
                None => print!("{json}"),
            }
            Ok(())
        }
        Command::InitModel {
            config,
            out,
            active_groups,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let kind = match active_groups {
                Some(j) => ModelKind::Fixed { active_groups: j },
                None => ModelKind::Adaptive,
            };
            let model = JsccModel::<f32>::new(&config, kind, config.seed)?;
            Checkpoint::from_model(&model, None, 0, 0, Vec::new()).save(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Train { run } => run_training(&run, ModelKind::Adaptive),
        Command::TrainBaseline { run, active_groups } => {
            run_training(&run, ModelKind::Fixed { active_groups })
        }
        Command::Eval { study, args } => run_eval(study, &args),
        Command::Plot { from, out } => {
            let path = adjscc_core::plot::plot_from_csv(&from, &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Inspect { ckpt } => inspect(&ckpt),
    }
}

fn load_split(config: &ExperimentConfig, split: Split, data_dir: Option<&Path>) -> Result<Dataset, Error> {
    let mut spec = config.dataset_spec(split);
    if let Some(d) = data_dir {
        spec.path = Some(d.to_path_buf());
    }
    ingest_dataset(&spec)
}

fn run_training(args: &RunArgs, kind: ModelKind) -> Outcome {
    let config = ExperimentConfig::load(&args.config)?;
    if let ModelKind::Fixed { active_groups } = kind {
        if active_groups > config.g_selective {
            return Err(Failure::Usage(format!(
                "--active-groups {active_groups} exceeds the {} selective groups",
                config.g_selective
            )));
        }
    }
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let train_data = load_split(&config, Split::Train, args.data_dir.as_deref())?;
    let eval_data = load_split(&config, Split::Test, args.data_dir.as_deref())?;
    let mut report = |r: &EpochRecord| {
        let mut line = format!(
            "epoch {:>4} stage {} lr {:.2e} tau {:.3} loss {:.6} mse {:.6} rate {:.3}",
            r.epoch, r.stage, r.lr, r.tau, r.train_loss, r.train_mse, r.train_rate
        );
        if let Some(e) = &r.eval {
            for (s, p, c) in e {
                line.push_str(&format!(" | {s}dB {p:.2}dB cpp {c:.4}"));
            }
        }
        println!("{line}");
    };
    let outcome = train(
        &config,
        kind,
        &train_data,
        &eval_data,
        TrainOptions {
            out_dir: Some(args.out.clone()),
            resume,
            stop_after: args.stop_after,
            on_epoch: Some(&mut report),
        },
    )?;
    println!(
        "wrote {} after {} epochs",
        args.out.join(FINAL_CHECKPOINT).display(),
        outcome.checkpoint.header.epoch
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<JsccModel<f32>, Error> {
    Checkpoint::load(path)?.model()
}

fn run_eval(study: Study, args: &EvalArgs) -> Outcome {
    let models = args
        .ckpt
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>, _>>()?;
    let baselines = args
        .baseline_ckpts
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>, _>>()?;
    let lead = &models[0];
    let mut config = lead.config.clone();
    if let Some(n) = args.limit {
        config.dataset.test_subset = Some(n);
        config.dataset.synthetic_test = Some(config.dataset.synthetic_test.unwrap_or(n).max(n));
    }
    let data = load_split(&config, Split::Test, args.data_dir.as_deref())?;
    for m in models.iter().chain(&baselines) {
        if m.image_hw != lead.image_hw || m.layout != lead.layout {
            return Err(Failure::Usage("all checkpoints must share image size and group layout".into()));
        }
    }
    let opts = EvalOptions {
        mode: match args.decision {
            Some(Decision::Sample) => DecisionMode::Sample,
            Some(Decision::Argmax) => DecisionMode::Argmax,
            None => config.eval_decision,
        },
        seed: args.seed.unwrap_or(config.seed),
        batch_size: config.batch_size,
    };
    let written = match study {
        Study::RateVsSnr => {
            if !baselines.is_empty() {
                return Err(Failure::Usage("rate-vs-snr takes no --baseline-ckpts".into()));
            }
            let mut rows: Vec<(f64, RatePsnrRecord)> = Vec::new();
            for m in &models {
                for r in eval_rate_vs_snr(m, &args.snrs, &data, &opts)? {
                    println!("alpha {} snr {} cpp {:.4} psnr {:.3}", m.config.alpha, r.snr_db, r.avg_cpp, r.avg_psnr_db);
                    rows.push((m.config.alpha, r));
                }
            }
            emit_artifacts(&Artifacts::RateVsSnr(&rows), &args.out)?
        }
        Study::Compare => {
            if models.len() != 1 || baselines.is_empty() {
                return Err(Failure::Usage(
                    "compare needs one --ckpt and at least one --baseline-ckpts entry".into(),
                ));
            }
            let fixed: Vec<&JsccModel<f32>> = baselines.iter().collect();
            let rows = eval_adaptive_vs_fixed(lead, &fixed, &args.snrs, &data, &opts)?;
            for r in &rows {
                let gap = r.psnr_gap.map_or("n/a".to_string(), |g| format!("{g:+.3} dB"));
                println!(
                    "snr {} adaptive cpp {:.4} psnr {:.3} gap vs fixed {gap}",
                    r.snr_db, r.adaptive.cpp, r.adaptive.psnr
                );
            }
            emit_artifacts(&Artifacts::Compare(&rows), &args.out)?
        }
        Study::PerClass => {
            let [snr] = args.snrs[..] else {
                return Err(Failure::Usage("per-class takes exactly one SNR".into()));
            };
            let snr = SnrDb::new(snr)?;
            let mut reports = Vec::new();
            for m in models.iter().chain(&baselines) {
                let r = eval_per_class(m, snr, &data, &opts)?;
                println!(
                    "{} cpp {:.4} class-psnr std {:.4}",
                    r.model_id, r.avg_cpp, r.psnr_std_across_classes
                );
                reports.push(r);
            }
            emit_artifacts(
                &Artifacts::PerClass {
                    alpha: lead.config.alpha,
                    reports: &reports,
                },
                &args.out,
            )?
        }
    };
    let manifest = RunManifest::new(
        match study {
            Study::RateVsSnr => "eval rate-vs-snr",
            Study::Compare => "eval compare",
            Study::PerClass => "eval per-class",
        },
        &config,
        Some(lead.kind()),
    );
    manifest.finish(&args.out)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn inspect(path: &Path) -> Outcome {
    use std::fmt::Write as _;
    use std::io::Write as _;
    let ck = Checkpoint::load(path)?;
    let mut text = String::new();
    macro_rules! out {
        ($($t:tt)*) => {
            writeln!(text, $($t)*).expect("writing to a String")
        };
    }
    let h = &ck.header;
    let c = &h.config;
    out!("format: {}", h.format_version);
    out!(
        "kind: {}",
        match h.kind {
            ModelKind::Adaptive => "adaptive".to_string(),
            ModelKind::Fixed { active_groups } => format!("fixed ({active_groups} selective groups)"),
        }
    );
    out!("G_s={} G_n={} L={}", c.g_selective, c.g_nonselective, c.group_length);
    out!("image: {}x{}", c.image_height, c.image_width);
    out!("alpha: {}", c.alpha);
    out!("epochs completed: {} (stage {})", h.epoch, h.stage);
    out!("optimizer steps: {}", h.optimizer_step);
    out!("config hash: {}", c.hash());
    out!("parameters:");
    let counts = ck.parameter_counts();
    for (name, n) in &counts {
        out!("  {name}: {n}");
    }
    out!("  total: {}", ck.model()?.num_params());
    out!("provenance:");
    if h.provenance.is_empty() {
        out!("  (untrained)");
    }
    for line in &h.provenance {
        out!("  {line}");
    }
    out!("config:\n{}", c.to_json());
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().write_all(text.as_bytes());
    Ok(())
}
