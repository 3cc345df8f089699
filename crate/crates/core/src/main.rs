use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use exposure_lab::design::{expected_exposure_ratio, solve_force_prob};
use exposure_lab::domain::build_catalog;
use exposure_lab::harness::{emit_outputs, gradient_suite, run_experiment, ExperimentConfig};
use exposure_lab::models::ModelKind;
use exposure_lab::rng::streams;
use exposure_lab::{Error, RngHandle};

const OUTPUT_ROOT_ENV: &str = "EXPOSURE_LAB_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "exposure-lab", version, about = "Exposure bias simulations for slate recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its tables.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir, then
        /// $EXPOSURE_LAB_OUTPUT_ROOT/seed-<seed>, then ./runs/seed-<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Compare analytic and numeric gradients on small random instances.
    CheckGradients {
        /// One of mnl, gev, bl, bpr, ips_bpr; all of them when omitted.
        #[arg(long)]
        kind: Option<ModelKind>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve for the force probability that gives a target exposure ratio.
    SolveRho {
        #[arg(long)]
        ratio: f64,
        /// Catalog settings are read from here; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if err.is_config() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

fn output_dir(config: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("seed-{}", config.seed))
    })
}

fn run(config: PathBuf, out: Option<PathBuf>, workers: usize, force: bool) -> ExitCode {
    let config = match ExperimentConfig::load(&config).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => return exit_for(&e),
    };
    let dir = output_dir(&config, out);
    let bundle = match run_experiment(&config, workers) {
        Ok(b) => b,
        Err(e) => return exit_for(&e),
    };
    if let Err(e) = emit_outputs(&bundle, &dir, force) {
        return exit_for(&e);
    }
    for f in &bundle.failures {
        eprintln!("repetition {} failed: {}", f.repetition, f.error);
    }
    println!("wrote {}", dir.display());
    if bundle.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    }
}

fn check_gradients(kind: Option<ModelKind>, runs: usize, seed: u64) -> ExitCode {
    let kinds = match kind {
        Some(k) if !k.is_parameterized() => return exit_for(&Error::Config(format!("{k} has no gradient"))),
        Some(k) => vec![k],
        None => ModelKind::TRAINABLE.to_vec(),
    };
    let mut ok = true;
    for k in kinds {
        match gradient_suite(k, runs, seed) {
            Ok(errs) => {
                let worst = errs.iter().cloned().fold(0.0, f64::max);
                let pass = worst < 1e-4;
                ok &= pass;
                println!("{k}: max relative error {worst:.3e} over {runs} runs {}", if pass { "ok" } else { "FAIL" });
            }
            Err(e) => return exit_for(&e),
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    }
}

fn solve_rho(ratio: f64, config: Option<PathBuf>) -> ExitCode {
    let config = match config.map(|p| ExperimentConfig::load(&p)).transpose() {
        Ok(c) => c.unwrap_or_else(|| ExperimentConfig::with_seed(0)),
        Err(e) => return exit_for(&e),
    };
    let solved = build_catalog(config.n_items, config.size_a, config.n_bias, RngHandle::new(config.seed, streams::CATALOG))
        .and_then(|c| solve_force_prob(ratio, &c, config.slate_size).map(|rho| (rho, expected_exposure_ratio(rho, &c, config.slate_size))));
    match solved {
        Ok((rho, achieved)) => {
            println!("rho = {rho:.12}");
            println!("expected ratio = {achieved:.12}");
            ExitCode::SUCCESS
        }
        Err(e) => exit_for(&e),
    }
}

fn validate(config: PathBuf) -> ExitCode {
    match ExperimentConfig::load(&config).and_then(|c| c.validate()) {
        Ok(()) => {
            println!("ok");
            ExitCode::SUCCESS
        }
        Err(e) => exit_for(&e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            workers,
            force,
        } => run(config, out, workers, force),
        Command::CheckGradients { kind, runs, seed } => check_gradients(kind, runs, seed),
        Command::SolveRho { ratio, config } => solve_rho(ratio, config),
        Command::Validate { config } => validate(config),
    }
}
