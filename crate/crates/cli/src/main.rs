use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ont_core::harness::{self, RunConfig, Sweep};
use ont_core::training::{self, DatasetManifest};
use ont_core::{Error, ModelConfig, SamplerMode, SubsampleConfig};

/// Self-supervised speech denoising from noisy clips only.
#[derive(Parser, Debug)]
#[command(name = "ont", version, about)]
struct Cli {
    /// Run configuration file (flat `section.key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed and data.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model preset (tiny or paper).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Double-precision deterministic mode (always on; recorded in the config echo).
    #[arg(long, global = true)]
    verify: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a clean/noisy corpus and its manifest into --out.
    Synth,
    /// Train on data.manifest; writes checkpoints, log and model.ontm into --out.
    Train {
        /// Continue from a checkpoint (checkpoints/epoch_NNN.ontm).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Denoise one WAV file.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate a model on the test split of a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to data.manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Strategy column written for the model rows.
        #[arg(long, default_value = "model")]
        label: String,
        /// Defaults to <out>/metrics.csv.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Ablation sweep: k, gamma, tstb or sampler-mode.
    Ablate {
        #[arg(long)]
        sweep: String,
    },
    /// Split one WAV into a sub-sampled pair plus an index-map dump.
    Subsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value = "random")]
        mode: String,
        /// Defaults to <out>/<input stem>.
        #[arg(long)]
        prefix: Option<PathBuf>,
    },
    /// Write a log-magnitude spectrogram as a plain PGM image.
    Spectrogram {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the dB values as CSV (frames by bins).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Also check every parameter of the configured model.
        #[arg(long)]
        model: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    if let Some(p) = &cli.preset {
        let prev = cfg.train.model.clone();
        cfg.train.model = ModelConfig {
            mask: prev.mask,
            tstm: prev.tstm,
            ..ModelConfig::preset(p).map_err(|e| Error::Config(e.to_string()))?
        };
    }
    if cli.verify {
        cfg.train.verify = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => {
            let m = harness::cmd_synth(&cfg, out)?;
            println!("wrote {} clips and {}", m.items.len(), out.join("manifest.csv").display());
        }
        Command::Train { resume } => {
            let result = match resume {
                Some(ck) => {
                    let path = cfg
                        .data
                        .manifest
                        .as_ref()
                        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
                    let manifest = DatasetManifest::load(path)?;
                    cfg.echo(out)?;
                    training::resume(&manifest, &cfg.train, out, ck)?
                }
                None => harness::cmd_train(&cfg, out)?,
            };
            if let Some(last) = result.log.last() {
                println!("epoch {} step {} total {:.6}", last.epoch, last.step, last.total);
            }
            println!("model: {}", result.model_path.display());
        }
        Command::Denoise { model, input, output } => {
            let y = harness::cmd_denoise(model, &cfg.train.stft, input, output)?;
            println!("wrote {} samples to {}", y.len(), output.display());
        }
        Command::Eval {
            model,
            manifest,
            label,
            csv,
        } => {
            let manifest = manifest
                .clone()
                .or_else(|| cfg.data.manifest.clone())
                .ok_or_else(|| Error::Config("no manifest: pass --manifest or set data.manifest".into()))?;
            let csv = csv.clone().unwrap_or_else(|| out.join("metrics.csv"));
            let report = harness::cmd_eval(model, &manifest, &cfg.train.stft, label, &csv)?;
            for a in report.aggregates() {
                println!(
                    "{:<8} snr {}  ssnr {}  stoi {}  ({} clips)",
                    a.strategy, a.snr_db, a.ssnr_db, a.stoi, a.clips
                );
            }
        }
        Command::Ablate { sweep } => {
            let sweep: Sweep = sweep.parse()?;
            let table = harness::cmd_ablate(&cfg, sweep, out)?;
            print!("{}", table.to_csv());
        }
        Command::Subsample {
            input,
            k,
            mode,
            prefix,
        } => {
            let mode: SamplerMode = mode.parse()?;
            let prefix = prefix.clone().unwrap_or_else(|| {
                out.join(input.file_stem().unwrap_or_else(|| "clip".as_ref()))
            });
            let sc = SubsampleConfig {
                k: *k,
                mode,
                seed: cfg.train.seed,
            };
            let (s1, _) = harness::cmd_subsample(input, &sc, &prefix)?;
            println!("wrote {}-sample pair with prefix {}", s1.len(), prefix.display());
        }
        Command::Spectrogram { input, output, csv } => {
            harness::cmd_spectrogram(input, &cfg.train.stft, output, csv.as_deref())?;
            println!("wrote {}", output.display());
        }
        Command::Gradcheck { model } => {
            let mut ok = true;
            for r in harness::cmd_gradcheck(cfg.train.seed)? {
                let pass = r.max_rel_err <= 1e-4;
                ok &= pass;
                println!(
                    "{:<24} {:>6} coords  max rel err {:.3e}  {}",
                    r.name,
                    r.coords,
                    r.max_rel_err,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if *model {
                let check = harness::check_model_gradients(&cfg.train.model, cfg.train.seed, |name, e| {
                    println!("{name:<32} max rel err {e:.3e}");
                })?;
                let pass = check.max_rel_err <= 1e-4;
                ok &= pass;
                println!(
                    "model: {} tensors, {} coords, max rel err {:.3e} ({}), {}",
                    check.params,
                    check.coords,
                    check.max_rel_err,
                    check.worst,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn validation_errors_map_to_two() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Manifest("x".into())), 2);
        let io = Error::Io {
            path: Path::new("/x").into(),
            source: std::io::Error::other("boom"),
        };
        assert_eq!(exit_code(&io), 3);
    }
}
