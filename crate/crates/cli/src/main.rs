use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coscale_cli::commands::{self, InitSpec, MemplanArgs};
use coscale_cli::{exit_code, CliError};
use coscale_core::model::ModelConfig;
use coscale_core::schedule::{ScaleSchedule, STANDARD_PATCH_NUMS};

/// Collaborative next-scale decoding engine.
#[derive(Parser)]
#[command(name = "coscale", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate images from a run config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Concurrent generation streams (results are independent of this).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Predict vanilla vs collaborative memory use across batch sizes.
    Memplan {
        /// Drafter spec: d30, d16 or DEPTHxWIDTH[xHEADS].
        #[arg(long, default_value = "d30")]
        drafter: String,
        /// Refiner spec, or "none" for a vanilla-only table.
        #[arg(long, default_value = "d16")]
        refiner: String,
        /// Drafting steps before the handoff.
        #[arg(long, default_value_t = 6)]
        n: usize,
        /// Comma-separated batch sizes.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        batches: Vec<usize>,
        /// KV accounting bytes per element (2 = half precision).
        #[arg(long, default_value_t = 2)]
        bpe: usize,
        /// Guidance batch factor (2 when classifier-free guidance is active).
        #[arg(long, default_value_t = 2)]
        cfg_factor: usize,
        #[arg(long)]
        json: bool,
    },
    /// Profile per-scale decode latency for a run config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long)]
        json: bool,
    },
    /// Radial power spectra of per-scale contributions, as CSV files.
    Spectrum {
        /// Token pyramid JSON (as written by generate).
        #[arg(long)]
        pyramid: PathBuf,
        #[arg(long)]
        vqvae: PathBuf,
        /// 1-based scale indices.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        scales: Vec<usize>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Regenerate only the masked region of a ground-truth pyramid.
    Inpaint {
        #[arg(long)]
        config: PathBuf,
        /// Mask image; bright pixels are regenerated, dark ones kept.
        #[arg(long)]
        mask: PathBuf,
        /// Ground-truth token pyramid JSON.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Class-conditional editing inside a bounding box.
    Edit {
        #[arg(long)]
        config: PathBuf,
        /// Pixel rectangle x0,y0,x1,y1 (end-exclusive).
        #[arg(long, value_delimiter = ',')]
        bbox: Vec<usize>,
        /// Class id to generate inside the box.
        #[arg(long)]
        class: usize,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Verify the loss kernels against shipped finite-difference fixtures.
    CheckLosses {
        /// Fixture JSON path.
        fixtures: PathBuf,
    },
    /// Write a reproducible randomly initialized checkpoint.
    InitCkpt(InitCkptArgs),
}

#[derive(Args)]
struct InitCkptArgs {
    /// Checkpoint kind: model or vqvae.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    /// Comma-separated per-scale side lengths.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout();
    match cli.command {
        Command::Generate { config, jobs } => {
            if jobs == 0 {
                return Err(CliError::Usage("--jobs must be at least 1".into()));
            }
            let files = commands::cmd_generate(&config, jobs)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Memplan {
            drafter,
            refiner,
            n,
            batches,
            bpe,
            cfg_factor,
            json,
        } => {
            let drafter = commands::parse_model_spec(&drafter)?;
            let refiner = if refiner == "none" {
                None
            } else {
                Some(commands::parse_model_spec(&refiner)?)
            };
            let schedule = ScaleSchedule::new(&drafter.patch_nums)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            if n > schedule.num_scales() {
                return Err(CliError::Usage(format!(
                    "--n {n} exceeds the {}-scale schedule",
                    schedule.num_scales()
                )));
            }
            if !(bpe == 2 || bpe == 4) {
                return Err(CliError::Usage("--bpe must be 2 or 4".into()));
            }
            let args = MemplanArgs {
                drafter,
                refiner,
                partition_n: n,
                batches,
                bytes_per_element: bpe,
                cfg_factor,
                schedule,
                json,
            };
            commands::cmd_memplan(&args, &mut stdout)
        }
        Command::Bench {
            config,
            warmup,
            reps,
            json,
        } => commands::cmd_bench(&config, warmup, reps, json, &mut stdout),
        Command::Spectrum {
            pyramid,
            vqvae,
            scales,
            out_dir,
        } => {
            let files = commands::cmd_spectrum(&pyramid, &vqvae, &scales, &out_dir)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Inpaint {
            config,
            mask,
            truth,
        } => {
            let files = commands::cmd_inpaint(&config, &mask, &truth)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Edit {
            config,
            bbox,
            class,
            truth,
        } => {
            if bbox.len() != 4 {
                return Err(CliError::Usage(format!(
                    "--bbox needs x0,y0,x1,y1 (got {} values)",
                    bbox.len()
                )));
            }
            let files = commands::cmd_edit(
                &config,
                (bbox[0], bbox[1], bbox[2], bbox[3]),
                class,
                &truth,
            )?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::CheckLosses { fixtures } => commands::cmd_check_losses(&fixtures, &mut stdout),
        Command::InitCkpt(args) => {
            let spec = match args.kind.as_str() {
                "model" => InitSpec::Model(Box::new(ModelConfig {
                    depth: args.depth,
                    width: args.width,
                    heads: args.heads,
                    vocab: args.vocab,
                    cond_classes: args.classes,
                    in_channels: args.channels,
                    patch_nums: args
                        .schedule
                        .unwrap_or_else(|| STANDARD_PATCH_NUMS.to_vec()),
                })),
                "vqvae" => InitSpec::Vqvae {
                    vocab: args.vocab,
                    channels: args.channels,
                },
                other => {
                    return Err(CliError::Usage(format!(
                        "--kind must be model or vqvae, got {other}"
                    )))
                }
            };
            commands::cmd_init_ckpt(&spec, args.seed, &args.out)?;
            println!("{}", args.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit_code::SUCCESS as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
