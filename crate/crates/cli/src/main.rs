use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use luna_core::{
    read_container, render_bundle, run_pipeline, run_sweep, synth_generate, write_bundle,
    write_container, write_sweep, Error, ErrorKind, PipelineConfig, SweepGrid, SyntheticSourceSpec,
};

/// Abstract-model analysis of hidden-state traces.
#[derive(Parser)]
#[command(name = "luna", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labelled train/test containers from a synthetic source spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one configuration and write its report bundle.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's `train` path.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Defaults to the config's `test` path.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configuration of a grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretty-print a run bundle or sweep directory.
    Report {
        #[arg(long)]
        bundle: PathBuf,
    },
}

fn read_text(path: &Path, what: &str) -> Result<String, Error> {
    fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {what} {}: {e}", path.display())))
}

/// Resolves a path given on the command line, else one from a JSON document
/// (relative to that document's directory).
fn input_path(
    flag: Option<PathBuf>,
    from_doc: Option<&PathBuf>,
    doc: &Path,
    what: &str,
) -> Result<PathBuf, Error> {
    match (flag, from_doc) {
        (Some(p), _) => Ok(p),
        (None, Some(p)) if p.is_absolute() => Ok(p.clone()),
        (None, Some(p)) => Ok(doc.parent().unwrap_or(Path::new(".")).join(p)),
        (None, None) => Err(Error::InvalidConfig(format!(
            "no {what} container given (flag or document field)"
        ))),
    }
}

fn synth(spec: &Path, seed: u64, out: &Path) -> Result<(), Error> {
    let spec = SyntheticSourceSpec::from_json(&read_text(spec, "spec")?)?;
    let (train, test) = synth_generate(&spec, seed)?;
    fs::create_dir_all(out)?;
    write_container(&train, out.join("train.trc"))?;
    write_container(&test, out.join("test.trc"))?;
    println!(
        "wrote {} train and {} test traces to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn run(
    config_path: &Path,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    out: &Path,
) -> Result<(), Error> {
    let config = PipelineConfig::from_json(&read_text(config_path, "config")?)?;
    let train = input_path(train, config.train.as_ref(), config_path, "train")?;
    let test = input_path(test, config.test.as_ref(), config_path, "test")?;
    let report = run_pipeline(&config, &read_container(train)?, &read_container(test)?)?;
    write_bundle(&report, out)?;
    let stats = &report.stats;
    println!(
        "{}: auc {:.4}, U p-value {:.3e}; bundle in {}",
        stats.config_id,
        stats.auc,
        stats.normal_vs_abnormal.p_value,
        out.display()
    );
    Ok(())
}

fn sweep(
    grid_path: &Path,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    out: &Path,
) -> Result<(), Error> {
    let grid = SweepGrid::from_json(&read_text(grid_path, "grid")?)?;
    let train = input_path(train, grid.train.as_ref(), grid_path, "train")?;
    let test = input_path(test, grid.test.as_ref(), grid_path, "test")?;
    let result = run_sweep(&grid, &read_container(train)?, &read_container(test)?)?;
    write_sweep(&result, &grid, out)?;
    let failed = result
        .rows
        .iter()
        .filter(|r| r.status != luna_core::sweep::RowStatus::Ok)
        .count();
    println!(
        "{} configurations ({failed} failed); results in {}",
        result.rows.len(),
        out.display()
    );
    Ok(())
}

fn report(dir: &Path) -> Result<(), Error> {
    let summary = dir.join("summary.json");
    if summary.is_file() {
        let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&summary)?)?;
        println!("{}", serde_json::to_string_pretty(&value)?);
        println!("\nranking");
        for line in fs::read_to_string(dir.join("ranking.csv"))?.lines().skip(1) {
            println!("  {line}");
        }
    } else {
        print!("{}", render_bundle(dir)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, seed, out } => synth(&spec, seed, &out),
        Command::Run {
            config,
            train,
            test,
            out,
        } => run(&config, train, test, &out),
        Command::Sweep {
            grid,
            train,
            test,
            out,
        } => sweep(&grid, train, test, &out),
        Command::Report { bundle } => report(&bundle),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Internal => 4,
            })
        }
    }
}
