use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gauge_thermo::runner::{self, ExperimentConfig, Level};
use gauge_thermo::Error;

#[derive(Parser)]
#[command(name = "gauge-thermo", version, about = "Finite-volume thermodynamics of gauge-invariant spin chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the suites selected by a config and write tables and a manifest.
    Run {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print diagnostics for a config without running it.
    Validate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// List the built-in presets, or print one as TOML.
    Presets {
        /// Print this preset's config.
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Path of a TOML config.
    config: Option<PathBuf>,
    /// Use a built-in preset instead of a file.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_dim: Option<usize>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    jobs: Option<usize>,
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CAPACITY: u8 = 3;

fn load(source: &Source, o: &Overrides) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&source.config, &source.preset) {
        (Some(path), _) => ExperimentConfig::from_path(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
            other => other,
        })?,
        (None, Some(name)) => runner::preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name}")))?,
        (None, None) => unreachable!("clap requires a source"),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(p) = &o.out {
        cfg.out = p.clone();
    }
    if let Some(m) = o.max_dim {
        cfg.max_dim = m;
    }
    cfg.check()?;
    Ok(cfg)
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::GaugeViolation { .. } | Error::InvalidSymmetry(_) => EXIT_CONFIG,
        Error::Capacity { .. } => EXIT_CAPACITY,
        _ => EXIT_FAIL,
    }
}

fn run(source: Source, o: Overrides) -> Result<u8, Error> {
    let cfg = load(&source, &o)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(o.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("jobs: {e}")))?;
    let bundle = pool.install(|| runner::run(&cfg)).inspect_err(|e| {
        if let (Error::Capacity { .. }, Some(n)) = (e, runner::max_feasible_last_n(&cfg)) {
            eprintln!("hint: the largest feasible last n under max_dim {} is {n}", cfg.max_dim);
        }
    })?;
    for t in &bundle.manifest.tables {
        println!("wrote {} ({} rows)", bundle.out.join(&t.file).display(), t.rows);
    }
    for e in &bundle.manifest.ledger {
        let status = if e.failed == 0 { "PASS" } else { "FAIL" };
        println!(
            "{status} {} checked={} failed={} worst={:.3e} tol={:.1e}",
            e.identity, e.checked, e.failed, e.worst_defect, e.tolerance
        );
    }
    for r in bundle.failures() {
        eprintln!(
            "failure: {} {} n={} defect={:.6e}",
            r.identity,
            r.variant,
            r.n.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
            r.defect.unwrap_or(f64::NAN)
        );
    }
    println!("manifest {}", bundle.out.join("manifest.json").display());
    Ok(if bundle.passed() { 0 } else { EXIT_FAIL })
}

fn validate(source: Source, o: Overrides) -> Result<u8, Error> {
    let cfg = load(&source, &o)?;
    let diags = runner::validate(&cfg);
    let mut errors = false;
    for d in &diags {
        let tag = match d.level {
            Level::Info => "info",
            Level::Warning => "warning",
            Level::Error => {
                errors = true;
                "error"
            }
        };
        println!("{tag}: {}: {}", d.field, d.message);
    }
    Ok(if errors { EXIT_CONFIG } else { 0 })
}

fn presets(show: Option<String>) -> Result<u8, Error> {
    match show {
        Some(name) => {
            let cfg = runner::preset(&name).ok_or_else(|| Error::Config(format!("unknown preset {name}")))?;
            print!("{}", cfg.to_toml());
        }
        None => {
            for (name, about, _) in runner::presets() {
                println!("{name:<20} {about}");
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { source, overrides } => run(source, overrides),
        Command::Validate { source, overrides } => validate(source, overrides),
        Command::Presets { show } => presets(show),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
