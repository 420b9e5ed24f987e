use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advlab::harness::{self, EvaluationReport, HarnessConfig};
use advlab::lid::LidDetector;
use advlab::Error;

#[derive(Parser)]
#[command(name = "advlab", version, about = "Attack and diagnose gradient-masking defenses on desk-scale models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of evaluation images.
    #[arg(long)]
    samples: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and save the classifier behind a defense.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defense whose classifier to train; defaults to the undefended model.
        #[arg(long)]
        defense: Option<String>,
        /// Checkpoint path, overriding the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run selected attacks against selected defenses.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Restrict to these defenses (repeatable).
        #[arg(long)]
        defense: Vec<String>,
        /// Restrict to attacks of these kinds (repeatable).
        #[arg(long)]
        attack: Vec<String>,
        /// Report directory, overriding the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run the full attack × defense matrix.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run the obfuscation checklist on each defense.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        defense: Vec<String>,
    },
    /// Train or apply a LID detector.
    Lid {
        #[command(subcommand)]
        action: LidAction,
    },
}

#[derive(Subcommand)]
enum LidAction {
    Train {
        #[command(flatten)]
        common: Common,
        /// Detector path, overriding `lid.checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detector: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<HarnessConfig, Failure> {
    let mut cfg = HarnessConfig::load(&common.config).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.samples {
        cfg.evaluation.samples = n;
    }
    if let Some(w) = common.workers {
        cfg.evaluation.workers = w;
    }
    Ok(cfg)
}

fn keep_defenses(cfg: &mut HarnessConfig, names: &[String]) -> Result<(), Failure> {
    if names.is_empty() {
        return Ok(());
    }
    for n in names {
        if !cfg.defenses.iter().any(|d| &d.name == n) {
            return Err(Failure::Config(format!("no defense named `{n}`")));
        }
    }
    cfg.defenses.retain(|d| names.contains(&d.name));
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn print_table(report: &EvaluationReport) {
    println!("{:<16} {:<24} {:>9} {:>9} {:>10}", "defense", "attack", "accuracy", "success", "mean rms");
    for d in &report.defenses {
        println!("{:<16} {:<24} {:>9.3} {:>9} {:>10}", d.name, "(clean)", d.clean_accuracy, "", "");
        for c in &d.cells {
            let rms = c.distortion.rms_mean.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!("{:<16} {:<24} {:>9.3} {:>9.3} {:>10}", d.name, c.attack, c.accuracy, c.success_rate, rms);
        }
        if let Some(b) = &d.best_per_image {
            println!(
                "{:<16} {:<24} {:>9.3}   (strongest single attack {}: {:.3})",
                d.name, "(best per image)", b.accuracy, b.strongest_attack, b.strongest_attack_accuracy
            );
        }
    }
    println!("{:.1}s on {} workers", report.runtime.seconds, report.runtime.workers);
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { common, defense, out } => {
            let cfg = load(&common)?;
            let spec = match &defense {
                None => harness::DefenseSpec::none(),
                Some(n) => cfg
                    .defenses
                    .iter()
                    .find(|d| &d.name == n)
                    .cloned()
                    .ok_or_else(|| Failure::Config(format!("no defense named `{n}`")))?,
            };
            let (_, acc) = harness::train_classifier(&cfg, &spec, out.as_deref())?;
            println!("{}: test accuracy {acc:.4}", spec.name);
        }
        Command::Attack {
            common,
            defense,
            attack,
            out,
            json: as_json,
        } => {
            let mut cfg = load(&common)?;
            keep_defenses(&mut cfg, &defense)?;
            if !attack.is_empty() {
                cfg.attacks.retain(|a| attack.iter().any(|k| k == a.kind.name()));
                if cfg.attacks.is_empty() {
                    return Err(Failure::Config(format!("no configured attack of kind {attack:?}")));
                }
            }
            if out.is_some() {
                cfg.output.dir = out;
            }
            let report = harness::evaluate(&cfg)?;
            if as_json {
                println!("{}", json(&report));
            } else {
                print_table(&report);
            }
        }
        Command::Evaluate {
            common,
            out,
            json: as_json,
        } => {
            let mut cfg = load(&common)?;
            if out.is_some() {
                cfg.output.dir = out;
            }
            let report = harness::evaluate(&cfg)?;
            if as_json {
                println!("{}", json(&report));
            } else {
                print_table(&report);
            }
        }
        Command::Diagnose { common, defense } => {
            let mut cfg = load(&common)?;
            keep_defenses(&mut cfg, &defense)?;
            for (name, report) in harness::diagnose_all(&cfg)? {
                let names: Vec<&str> = report.triggered().iter().map(|c| c.name()).collect();
                println!("{name}: {}", if names.is_empty() { "no check triggered".into() } else { names.join(", ") });
                for c in &report.checks {
                    println!("  {:<22} {:<5} {}", c.check.name(), c.triggered, c.narrative);
                }
            }
        }
        Command::Lid { action } => match action {
            LidAction::Train { common, out } => {
                let mut cfg = load(&common)?;
                if out.is_some() {
                    let mut spec = cfg.lid.clone().unwrap_or_default();
                    spec.checkpoint = out;
                    cfg.lid = Some(spec);
                }
                let (_, report) = harness::lid_train(&cfg)?;
                println!("{}", json(&report));
            }
            LidAction::Score { common, detector } => {
                let cfg = load(&common)?;
                let det = LidDetector::load(Path::new(&detector))?;
                println!("{}", json(&harness::lid_score(&cfg, &det)?));
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
