use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emrdm::error::Error;
use emrdm::pipeline::config::{RunConfig, SEED_ENV};
use emrdm::pipeline::dataset::{gen_data, DatasetSpec};
use emrdm::pipeline::report::write_report;
use emrdm::pipeline::run::{evaluate, sample_test, train};
use emrdm::pipeline::verify::{run_suite, Suite};

/// Mean-reverting diffusion restoration toolkit.
///
/// Every command accepts `--config FILE` plus any number of config
/// overrides written as `--section.key VALUE` (dashes or underscores;
/// a bare key works when only one section defines it). Overrides win over
/// the file and over the EMRDM_SEED environment variable.
#[derive(Parser)]
#[command(name = "emrdm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cloud-occlusion dataset into `paths.data-dir`.
    GenData(Common),
    /// Train (or resume) a model; writes checkpoints and a metrics log.
    Train(Common),
    /// Restore every test scene with the best checkpoint.
    Sample(Common),
    /// Score restored test images and the cloudy-input baseline.
    Evaluate(Common),
    /// Run the Monte-Carlo and closed-form self-checks.
    Verify {
        /// kernel, sde, precondition, sampler, churn, or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[command(flatten)]
        common: Common,
    },
    /// Render training curves and metric summaries as SVG/CSV.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides: `--section.key VALUE` or `--section.key=VALUE`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let overrides = parse_overrides(&self.overrides)?;
        match &self.config {
            Some(path) => RunConfig::load(path, &overrides),
            None => {
                let env = std::env::var(SEED_ENV).ok();
                RunConfig::from_toml_with("", &overrides, env.as_deref())
            }
        }
    }
}

/// Splits `--key value` / `--key=value` tokens into pairs. A flag followed
/// by another flag (or nothing) is a boolean switch set to `true`.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut it = tokens.iter().peekable();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            return Err(Error::Config {
                key: tok.clone(),
                message: "expected `--section.key VALUE`".into(),
            });
        };
        if let Some((k, v)) = flag.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else if it.peek().is_some_and(|next| !next.starts_with("--")) {
            out.push((flag.to_string(), it.next().cloned().unwrap_or_default()));
        } else {
            out.push((flag.to_string(), "true".to_string()));
        }
    }
    Ok(out)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Domain(_) | Error::Shape(_) | Error::Numeric { .. } => 3,
        Error::Io { .. } | Error::Format(_) | Error::Version { .. } => 4,
    }
}

/// Returns Ok(false) when a check failed without an error.
fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let manifest = gen_data(&DatasetSpec::from_config(&cfg), &cfg.paths.data_dir)?;
            let s = manifest.stats;
            println!(
                "wrote {} train / {} test scenes to {} (sigma_data {:.4}, sigma_mu {:.4}, sigma_cov {:.4})",
                manifest.spec.n_train,
                manifest.spec.n_test,
                cfg.paths.data_dir.display(),
                s.sigma_data,
                s.sigma_mu,
                s.sigma_cov
            );
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            for r in train(&cfg)? {
                println!("epoch {:>4}  train_loss {:.6}  val_psnr {:.3}", r.epoch, r.train_loss, r.val_psnr);
            }
        }
        Command::Sample(c) => {
            let cfg = c.load()?;
            let n = sample_test(&cfg, None)?;
            println!("restored {n} test scenes into {}", cfg.paths.run_dir.join("samples").display());
        }
        Command::Evaluate(c) => {
            let cfg = c.load()?;
            let (restored, baseline) = evaluate(&cfg)?;
            println!("restored: {}", restored.summary());
            println!("baseline: {}", baseline.summary());
        }
        Command::Verify { suite, common } => {
            let cfg = common.load()?;
            let mut ok = true;
            for s in Suite::parse(&suite)? {
                for check in run_suite(s, cfg.seed)? {
                    ok &= check.passed();
                    println!("{check}");
                }
            }
            return Ok(ok);
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            print!("{}", write_report(&cfg.paths.run_dir)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more checks exceeded their tolerance");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
