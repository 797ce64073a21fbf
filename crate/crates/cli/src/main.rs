use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use microseg::io;
use microseg::pipeline::{self, files, ModelFile, RunConfig, SegmentationConfig, SurrogateConfig};
use microseg::rnn::{extract_trajectories, gradient_check, random_check_problem, TrainConfig};
use microseg::segmentation::DEFAULT_TURN_THRESHOLD;
use microseg::surrogate::{circular_mean, DirectionMode, LinearSurrogate};
use microseg::synth::SynthConfig;
use microseg::{Error, ErrorKind};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECK: u8 = 4;

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_EPSILON: f64 = 1e-5;
const GRADCHECK_SEEDS: u64 = 10;

#[derive(Parser)]
#[command(name = "microseg", version, about = "Explainable customer micro-segmentation from LSTM trajectories")]
struct Cli {
    /// Master seed; module seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population into a data directory.
    Synth,
    /// Score transactions.csv against coefficients.csv into traits.csv.
    Score {
        #[arg(long)]
        data: PathBuf,
        /// Transaction buckets summed into one profile.
        #[arg(long, default_value_t = 1)]
        window_periods: usize,
    },
    /// Train the LSTM on a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write hidden-state trajectories.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Periods per trajectory; defaults to the full history.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Fit the linear surrogate and write angles, surrogate and fidelity.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = microseg::domain::DEFAULT_NONZERO_FACTOR)]
        nonzero_threshold: f64,
    },
    /// Build the trait-ordered hierarchy with purity scores.
    Cluster {
        #[arg(long)]
        angles: PathBuf,
        #[arg(long)]
        traits: PathBuf,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        /// Takes the azimuth rotation from a fitted surrogate instead of the angles' circular mean.
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        min_members: usize,
    },
    /// Compare cluster assignments under a coarse and a fine window.
    Stability {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        coarse: Option<usize>,
        #[arg(long, default_value_t = 1)]
        fine: usize,
        /// Only customers without a regime switch.
        #[arg(long)]
        steady_only: bool,
        #[arg(long, default_value_t = DEFAULT_TURN_THRESHOLD)]
        turn_threshold: f64,
    },
    /// Compare backpropagated and finite-difference gradients.
    Gradcheck,
    /// Run every stage and write all artifacts.
    Run {
        /// Exit with status 4 if an acceptance threshold is missed.
        #[arg(long)]
        check: bool,
    },
    /// Write figure tables from a completed run.
    PlotData {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Stage(pipeline::StageError),
    Numerical(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => EXIT_USAGE,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.error.kind()))
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}

fn load_config<C: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, Failure> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn out_or(cli: &Cli, default: impl AsRef<Path>) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| default.as_ref().to_path_buf())
}

fn read_model(path: &Path) -> Result<ModelFile, Failure> {
    let m: ModelFile = io::read_json(path)?;
    m.model.validate()?;
    Ok(m)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let verbose = cli.verbose;
    let say = |msg: &str| {
        if verbose {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Synth => {
            let mut config: SynthConfig = load_config(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let out = out_or(cli, "data");
            let dataset = pipeline::synthesize(&config)?;
            pipeline::write_dataset(&out, &dataset)?;
            println!("wrote {} customers to {}", dataset.customers.len(), out.display());
        }
        Command::Score { data, window_periods } => {
            let coeffs = io::read_coefficients_csv(data.join(files::COEFFICIENTS))?;
            let rows = io::read_transactions_csv(data.join(files::TRANSACTIONS))?;
            let traits = pipeline::score_transactions(&rows, &coeffs, *window_periods)?;
            let out = out_or(cli, data.join(files::TRAITS));
            io::write_traits_csv(&out, &traits)?;
            println!("scored {} customers into {}", traits.len(), out.display());
        }
        Command::Train { data } => {
            let mut config: TrainConfig = load_config(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                config.seed = RunConfig { seed: s, ..RunConfig::default() }.resolved().train.seed;
            }
            let dataset = pipeline::read_dataset(data)?;
            say("training");
            let (model, report) = microseg::rnn::train(&dataset, &config)?;
            let file = ModelFile {
                config,
                training: (&report).into(),
                model,
            };
            let out = out_or(cli, files::MODEL);
            io::write_json(&out, &file)?;
            println!(
                "validation MSE {:.6} (label variance {:.6}); wrote {}",
                report.final_validation_mse,
                report.validation_label_variance,
                out.display()
            );
        }
        Command::Extract { model, data, window } => {
            let m = read_model(model)?;
            let dataset = pipeline::read_dataset(data)?;
            let span = window.unwrap_or(dataset.n_periods());
            let trajectories = extract_trajectories(&m.model, &dataset, span)?;
            let out = out_or(cli, files::TRAJECTORIES);
            io::write_trajectories_csv(&out, &trajectories)?;
            println!("wrote {} trajectories to {}", trajectories.len(), out.display());
        }
        Command::Explain {
            model,
            data,
            out_dir,
            nonzero_threshold,
        } => {
            let m = read_model(model)?;
            let dataset = pipeline::read_dataset(data)?;
            let mut config: SurrogateConfig = load_config(cli.config.as_deref())?;
            config.nonzero_threshold = *nonzero_threshold;
            let dir = out_dir.clone().or_else(|| cli.out.clone()).unwrap_or_else(|| PathBuf::from("."));
            let e = pipeline::explain(&dataset, &m.model, &m.config, &config)?;
            io::write_angles_csv(dir.join(files::ANGLES), &e.angles)?;
            io::write_json(dir.join(files::SURROGATE), &e.surrogate)?;
            io::write_json(dir.join(files::FIDELITY), &e.fidelity)?;
            println!(
                "surrogate R² test {:.4} train {:.4}; polynomial test {:.4}",
                e.fidelity.r2_test, e.fidelity.r2_train, e.fidelity.r2_polynomial_test
            );
        }
        Command::Cluster {
            angles,
            traits,
            depth,
            surrogate,
            min_members,
        } => {
            let rows = io::read_angles_csv(angles)?;
            let orders = io::read_traits_csv(traits)?
                .into_iter()
                .map(|r| (r.customer_id, r.order))
                .collect();
            let offset = match surrogate {
                Some(p) => io::read_json::<LinearSurrogate<f64>>(p)?.azimuth_offset,
                None => circular_mean(rows.iter().map(|r| r.angles.theta)),
            };
            let config = SegmentationConfig {
                depth: *depth,
                min_subcluster_members: *min_members,
                ..load_config(cli.config.as_deref())?
            };
            let seed = RunConfig {
                seed: cli.seed.unwrap_or(RunConfig::default().seed),
                ..RunConfig::default()
            }
            .kmeans_seed();
            let s = pipeline::segment(&rows, &orders, offset, &config, seed)?;
            let out = out_or(cli, files::HIERARCHY);
            io::write_json(&out, &s.tree)?;
            for level in &s.summary.levels {
                println!(
                    "depth {}: {} node(s) scored, mean purity {}, smallest excess {}",
                    level.depth,
                    level.nodes_scored,
                    fmt_opt(level.mean_purity),
                    fmt_opt(level.min_excess)
                );
            }
        }
        Command::Stability {
            model,
            data,
            coarse,
            fine,
            steady_only,
            turn_threshold,
        } => {
            let m = read_model(model)?;
            let dataset = pipeline::read_dataset(data)?;
            let coarse = coarse.unwrap_or(dataset.n_periods());
            let (all, steady) = pipeline::stability(&dataset, &m.model, coarse, *fine, DirectionMode::NetDisplacement)?;
            let out = out_or(cli, files::STABILITY);
            io::write_stability_csv(&out, if *steady_only { &steady } else { &all })?;
            let trajectories = extract_trajectories(&m.model, &dataset, dataset.n_periods())?;
            let course = pipeline::course_changes(&dataset, &trajectories, *turn_threshold)?;
            println!(
                "agreement {:.4} over {} customers without a switch, {:.4} over all {}",
                steady.agreement_rate, steady.n_compared, all.agreement_rate, all.n_compared
            );
            println!(
                "course change within one period: {} of {} switched customers",
                course.n_within_one, course.n_switched
            );
        }
        Command::Gradcheck => {
            let seeds: Vec<u64> = match cli.seed {
                Some(s) => vec![s],
                None => (0..GRADCHECK_SEEDS).collect(),
            };
            let mut worst: f64 = 0.0;
            for s in seeds {
                let p = random_check_problem::<f64>(s, 8, 6, 4);
                let r = gradient_check(&p.model, &p.batch, GRADCHECK_EPSILON)?;
                println!(
                    "seed {s}: max relative error {:.3e} at {}[{}] over {} parameters",
                    r.max_relative_error, r.worst.0, r.worst.1, r.n_parameters
                );
                worst = worst.max(r.max_relative_error);
            }
            if !(worst < GRADCHECK_TOLERANCE) {
                return Err(Failure::Numerical(format!(
                    "gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
                )));
            }
        }
        Command::Run { check } => {
            let mut config: RunConfig = load_config(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let out = cli
                .out
                .clone()
                .or_else(|| config.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let mut log = |msg: &str| say(msg);
            let (report, timing) = pipeline::run_pipeline(&config, &out, &mut log).map_err(Failure::Stage)?;
            for c in &report.checks {
                println!(
                    "{} [{}] {}: {} {} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.criterion,
                    c.description,
                    fmt_opt(c.value),
                    c.relation,
                    c.threshold
                );
            }
            println!("finished in {:.1} s; artifacts in {}", timing.total_seconds, out.display());
            if *check && !report.all_passed() {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.criterion.as_str()).collect();
                return Err(Failure::Check(format!("acceptance thresholds missed: {}", failed.join(", "))));
            }
        }
        Command::PlotData { dir } => {
            let dir = dir.clone().or_else(|| cli.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
            pipeline::emit_plot_data(&dir)?;
            println!("wrote figure tables to {}", dir.display());
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}
