use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpdlab::harness::{run_gradcheck, ExperimentConfig, Phase, Pipeline, SEED_ENV};
use dpdlab::Error;

#[derive(Parser)]
#[command(name = "dpdlab", version, about = "Hypernetwork FD-DPD simulation and training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed (and the DPDLAB_SEED variable).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Channel and PA generation.
    Gen(Common),
    /// Fit the TD-DPD baseline.
    TrainTd(Common),
    /// Build training targets.
    Targets(Common),
    /// Train the HN FD-NN.
    TrainHn(Common),
    /// Train the single-state FD-NN baseline.
    TrainFdnn(Common),
    /// Evaluate all methods on all states.
    Eval(Common),
    /// Spectra at the showcase state.
    Psd(Common),
    /// Every phase in order.
    Run(Common),
    /// Finite-difference gradient check of the configured networks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Check a random subset of parameters per seed.
        #[arg(long)]
        max_params: Option<usize>,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Prerequisite { .. } | Error::ConfigMismatch(_) => 3,
        Error::Diverged { .. } => 4,
        _ => 1,
    }
}

fn load(c: &Common) -> dpdlab::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not an integer")))?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn with_pool<T>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> dpdlab::Result<T>
where
    T: Send,
{
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

fn phases(c: &Common, phases: &[Phase]) -> dpdlab::Result<()> {
    let pipe = Pipeline::new(load(c)?, c.out.clone())?.verbose(!c.quiet);
    with_pool(c.threads, || pipe.run(phases))?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Gen(c) => phases(c, &[Phase::Gen]),
        Cmd::TrainTd(c) => phases(c, &[Phase::TrainTd]),
        Cmd::Targets(c) => phases(c, &[Phase::Targets]),
        Cmd::TrainHn(c) => phases(c, &[Phase::TrainHn]),
        Cmd::TrainFdnn(c) => phases(c, &[Phase::TrainFdnn]),
        Cmd::Eval(c) => phases(c, &[Phase::Eval]),
        Cmd::Psd(c) => phases(c, &[Phase::Psd]),
        Cmd::Run(c) => phases(c, &Phase::ALL),
        Cmd::Gradcheck { common, seeds, max_params, tol } => (|| {
            let cfg = load(common)?;
            let out = with_pool(common.threads, || run_gradcheck(&cfg, *seeds, *max_params))??;
            let mut ok = true;
            for s in &out {
                let pass = s.max_rel_err < *tol;
                ok &= pass;
                println!(
                    "{} {} over {} seeds: max relative error {:.3e}",
                    if pass { "PASS" } else { "FAIL" },
                    s.topology,
                    s.seeds,
                    s.max_rel_err
                );
            }
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("gradient check above {tol:e}")))
            }
        })(),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dpdlab: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
