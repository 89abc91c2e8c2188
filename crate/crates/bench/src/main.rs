use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rebar_bench::checks::quick_suite;
use rebar_bench::config::{RunConfig, Task};
use rebar_bench::telemetry::{fmt_g10, TrialStatus};
use rebar_bench::{run_eval, run_training, run_variance_probe, RunOutput};

#[derive(Parser)]
#[command(name = "rebar-bench", version, about = "Train and compare gradient estimators for discrete latent variables")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Minimize E[(b - t)²] for a single Bernoulli unit.
    Toy(RunArgs),
    /// Train a sigmoid belief network.
    Train(RunArgs),
    /// Shared-trajectory variance comparison; the first estimator drives.
    Variance(RunArgs),
    /// Train, then report held-out bounds.
    Eval(RunArgs),
    /// Run the oracle and property checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory for telemetry.csv and summary.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Estimator, e.g. `rebar`, `rebar(0.1)`, `rebar(adaptive)`. Repeatable; replaces the config list.
    #[arg(long = "estimator", value_delimiter = ',')]
    estimators: Vec<String>,
    /// Starting temperature.
    #[arg(long)]
    lambda: Option<f64>,
    /// Starting control-variate scaling.
    #[arg(long)]
    eta: Option<f64>,
    /// Learn the temperature online.
    #[arg(long)]
    adapt_lambda: bool,
    #[arg(long)]
    lr: Option<f64>,
}

impl RunArgs {
    fn resolve(&self, default_task: Task) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => default_config(default_task),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.display().to_string());
        }
        if !self.estimators.is_empty() {
            cfg.estimators.clone_from(&self.estimators);
        }
        if let Some(l) = self.lambda {
            cfg.estimator.lambda = l;
        }
        if let Some(e) = self.eta {
            cfg.estimator.eta = e;
        }
        if self.adapt_lambda {
            cfg.estimator.adapt_lambda = true;
        }
        if let Some(lr) = self.lr {
            cfg.optim.lr = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_config(task: Task) -> RunConfig {
    match task {
        Task::Toy => {
            let mut c = RunConfig::new(
                Task::Toy,
                &["reinforce", "concrete(1)", "muprop", "simple_muprop", "rebar(0.1)", "rebar(adaptive:1)"],
            );
            c.optim.lr = 1e-2;
            c.steps = 10_000;
            c.trials = 1;
            c
        }
        _ => {
            let mut c = RunConfig::new(Task::Gen, &["rebar", "simple_muprop", "nvil", "reinforce"]);
            c.model.units = 20;
            c.steps = 5000;
            c.trials = 1;
            c
        }
    }
}

fn report(cfg: &RunConfig, out: &RunOutput) -> anyhow::Result<()> {
    println!("config {} ({} {})", &cfg.hash()[..12], cfg.task, cfg.estimators.join(" "));
    for s in &out.summaries {
        let status = match s.status {
            TrialStatus::Ok => "ok",
            TrialStatus::Failed => "FAILED",
        };
        let extra: Vec<String> = s.extra.iter().map(|(k, v)| format!("{k}={}", fmt_g10(*v))).collect();
        println!(
            "trial {} {:<24} {:<6} final {} best {} {}",
            s.trial,
            s.estimator,
            status,
            fmt_g10(s.final_objective),
            fmt_g10(s.best_objective),
            extra.join(" ")
        );
        if let Some(e) = &s.error {
            println!("    {e}");
        }
    }
    if let Some(dir) = &cfg.out {
        out.write(cfg, dir.as_ref())
            .with_context(|| format!("writing outputs to {dir}"))?;
        println!("wrote {dir}/telemetry.csv and {dir}/summary.jsonl");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let (cfg, out) = match cli.verb {
        Verb::Selftest { seed } => {
            let results = quick_suite(seed);
            for r in &results {
                println!("{r}");
            }
            return Ok(results.iter().all(|r| r.passed));
        }
        Verb::Toy(args) => {
            let cfg = args.resolve(Task::Toy)?;
            if cfg.task != Task::Toy {
                anyhow::bail!("`toy` needs task = \"toy\", config has {}", cfg.task);
            }
            let out = run_training(&cfg)?;
            (cfg, out)
        }
        Verb::Train(args) => {
            let cfg = args.resolve(Task::Gen)?;
            let out = run_training(&cfg)?;
            (cfg, out)
        }
        Verb::Variance(args) => {
            let cfg = args.resolve(Task::Gen)?;
            let out = run_variance_probe(&cfg)?;
            (cfg, out)
        }
        Verb::Eval(args) => {
            let cfg = args.resolve(Task::Gen)?;
            let out = run_eval(&cfg)?;
            (cfg, out)
        }
    };
    report(&cfg, &out)?;
    Ok(out.failed() == 0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
