use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use edgecl::checks::{self, Level};
use edgecl::csi_sim::{generate_domain, PerturbationConfig, SceneSpec, UserProfile};
use edgecl::harness::{
    compute_metrics, export_results, load_results, run_benchmark_suite, run_sequential_with, ExperimentConfig,
    ResultBundle,
};
use edgecl::storage::write_domain;
use edgecl::train::{write_trace, Variant};
use edgecl::Error;

#[derive(Parser)]
#[command(name = "edgecl", version, about = "Continual learning for WiFi CSI sensing on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one user's domain dataset.
    Simulate {
        /// Scene spec, TOML or JSON. Defaults to the desk scene.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        user: u64,
        #[arg(long = "per-class")]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        domain: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one variant for one trial.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every configured variant and trial.
    Suite {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize an exported result directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run the built-in checks.
    Check {
        #[arg(long, default_value = "unit")]
        level: Level,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Error(Error),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => ExperimentConfig::from_path(p),
        None => Ok(ExperimentConfig::desk()),
    }
}

fn load_scene(path: Option<&Path>) -> Result<SceneSpec, Error> {
    let Some(p) = path else { return Ok(SceneSpec::desk()) };
    let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
        path: p.into(),
        source: e,
    })?;
    if p.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    }
}

fn output_dir(cfg: &ExperimentConfig, out: Option<PathBuf>, fallback: &str) -> PathBuf {
    out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from(fallback))
}

fn print_summary(bundle: &ResultBundle) {
    println!("{:<16} {:>4} {:>16} {:>16}", "variant", "runs", "avg accuracy", "forgetting");
    for r in bundle.summary() {
        println!(
            "{:<16} {:>4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            r.variant.tag(),
            r.n_runs,
            r.mean_average_accuracy,
            r.std_average_accuracy,
            r.mean_forgetting,
            r.std_forgetting
        );
    }
    for f in &bundle.failures {
        eprintln!("run {} trial {} failed: {}", f.variant, f.trial, f.error);
    }
}

fn bundle_has_nan(bundle: &ResultBundle) -> bool {
    bundle.failures.iter().any(|f| f.error.contains("non-finite"))
        || bundle
            .runs
            .iter()
            .any(|r| !r.metrics.average_accuracy.is_finite() || !r.metrics.forgetting.is_finite())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            scene,
            user,
            per_class,
            seed,
            classes,
            domain,
            out,
        } => {
            let scene = load_scene(scene.as_deref())?.build()?;
            let profile = UserProfile::new(user, classes, PerturbationConfig::default())?;
            let data = generate_domain(domain, &scene, &profile, per_class, seed)?;
            write_domain(&out, &data)?;
            println!("wrote {} sequences to {}", data.len(), out.display());
        }
        Command::Run {
            config,
            variant,
            trial,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dir = output_dir(&cfg, out, &format!("run_{}_{}", variant.tag(), trial));
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let out = run_sequential_with(&cfg, variant, trial, |k, trace| {
                write_trace(&dir.join(format!("trace_{}.csv", k + 1)), trace)
            })?;
            out.params.save(&dir.join("model"))?;
            let bundle = ResultBundle {
                config: cfg,
                runs: vec![out.record],
                failures: Vec::new(),
            };
            export_results(&bundle, &dir)?;
            print_summary(&bundle);
            if bundle_has_nan(&bundle) {
                return Err(Error::NonFinite("run metrics".into()).into());
            }
        }
        Command::Suite { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = output_dir(&cfg, out, "results");
            let bundle = run_benchmark_suite(&cfg)?;
            export_results(&bundle, &dir)?;
            print_summary(&bundle);
            if bundle_has_nan(&bundle) {
                return Err(Error::NonFinite("suite metrics".into()).into());
            }
        }
        Command::Report { input } => {
            let bundle = load_results(&input)?;
            print_summary(&bundle);
            for r in &bundle.runs {
                if compute_metrics(&r.matrix)? != r.metrics {
                    return Err(Failure::Acceptance(format!(
                        "stored metrics of {} trial {} differ from its matrix",
                        r.variant, r.trial
                    )));
                }
            }
        }
        Command::Check { level, config } => {
            let cfg = load_config(config.as_deref())?;
            let results = checks::run(level, &cfg)?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failure::Acceptance(format!("{failed} check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Acceptance(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(4)
        }
    }
}
