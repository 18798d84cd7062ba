use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use allattn::{Error, Result};
use allattn_cli::config::RunConfig;
use allattn_cli::runner::{cmd_ablate, cmd_eval, cmd_param_count, cmd_train};
use allattn_cli::synth::text8_like;
use allattn_cli::verify::{run_all, VerifyOptions};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "allattn",
    version,
    about = "All-attention language models: train, evaluate, ablate, verify"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set preset=NAME`.
    #[arg(long)]
    preset: Option<String>,
    /// Shorthand for `--set variant=NAME`.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint file (written by train, read by eval).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSON-lines metrics output.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(format!("preset={p}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        if let Some(v) = &self.variant {
            overrides.push(format!("variant={v}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(c) = &self.checkpoint {
            overrides.push(format!("checkpoint_path={}", c.display()));
        }
        if let Some(m) = &self.metrics {
            overrides.push(format!("metrics_path={}", m.display()));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a model.
    Train(Common),
    /// Evaluate a checkpoint on one or more splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "dev")]
        split: Vec<String>,
    },
    /// Train one model per swept value and print a CSV table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2,..`, e.g. `n_persistent=0,64,512` or `variant=all`.
        #[arg(long)]
        sweep: String,
        /// Write the table here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suites; exits 4 on any failure.
    Verify {
        /// Corrupt the backward pass of an op (e.g. `attention`) to check the checker.
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Print parameter counts for the configured model.
    ParamCount(Common),
    /// Write a synthetic text8-style corpus (train.txt, dev.txt).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        train_bytes: usize,
        #[arg(long, default_value_t = 100_000)]
        dev_bytes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let out = cmd_train(&cfg)?;
            println!("trained {} steps, {} parameters", out.steps, out.params);
            for (split, r) in [("dev", &out.dev), ("test", &out.test)] {
                if let Some(r) = r {
                    println!(
                        "{split}: nll {:.6} {} {:.6}",
                        r.nll,
                        out.metric,
                        metric(out.metric, r)
                    );
                }
            }
        }
        Command::Eval { common, split } => {
            let cfg = common.resolve()?;
            let ckpt = cfg
                .checkpoint_path
                .clone()
                .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
            let name = match cfg.vocab_mode {
                allattn::model::VocabMode::CharFull => "bpc",
                allattn::model::VocabMode::WordAdaptive => "ppl",
            };
            for (split, r) in cmd_eval(&cfg, &ckpt, &split)? {
                println!(
                    "{split}: nll {:.6} {name} {:.6} tokens {}",
                    r.nll,
                    metric(name, &r),
                    r.tokens
                );
            }
        }
        Command::Ablate { common, sweep, out } => {
            let cfg = common.resolve()?;
            let (csv, _) = cmd_ablate(&cfg, &sweep)?;
            print!("{csv}");
            if let Some(p) = out {
                std::fs::write(p, csv)?;
            }
        }
        Command::Verify { inject_fault } => {
            let start = Instant::now();
            let checks = run_all(&VerifyOptions {
                fault: inject_fault,
            })?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            println!(
                "{} checks, {failed} failed, {:.1}s",
                checks.len(),
                start.elapsed().as_secs_f64()
            );
            if failed > 0 {
                return Err(Error::Verification(format!("{failed} check(s) failed")));
            }
        }
        Command::ParamCount(common) => print!("{}", cmd_param_count(&common.resolve()?)?),
        Command::Synth {
            out_dir,
            train_bytes,
            dev_bytes,
            seed,
        } => {
            let (train, dev) = text8_like(train_bytes, dev_bytes, seed);
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("train.txt"), train)?;
            std::fs::write(out_dir.join("dev.txt"), dev)?;
        }
    }
    Ok(())
}

fn metric(name: &str, r: &allattn::training::EvalResult) -> f64 {
    if name == "bpc" {
        r.bpc()
    } else {
        r.ppl()
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
