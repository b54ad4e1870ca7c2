//! `vfgrade` command line: synthetic data generation, training, evaluation,
//! per-vertebra inference and Grad-CAM export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vfgrade::config::RunConfig;
use vfgrade::dataset::{GenantGrade, SplitSet};
use vfgrade::error::Error;
use vfgrade::run;
use vfgrade::synthdata::{generate_dataset, SynthConfig};

#[derive(Parser)]
#[command(
    name = "vfgrade",
    about = "Vertebral fracture grading from CT: contrastive training, evaluation, inference and attention maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ready-to-train dataset directory.
    Synth {
        /// Output directory for volumes, masks and the manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        cases: usize,
        #[arg(long, default_value_t = 5)]
        per_case: usize,
        /// Case volume side length in voxels.
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train per the configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (checkpoints, logs, reports).
        #[arg(long, default_value = "run_out")]
        out: PathBuf,
        /// Resume from a checkpoint produced by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a manifest's test partition.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluate the train partition (refused without this flag).
        #[arg(long)]
        allow_train: bool,
        /// Partition to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Optional directory for the JSON/text report and ROC rendering.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grade every labeled vertebra of one volume/mask pair.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Optional JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a Grad-CAM attention map for one vertebra.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Anatomical vertebra label (1..=24).
        #[arg(long)]
        label: u8,
        /// Target grade 0..=3; the model's prediction when omitted.
        #[arg(long)]
        class: Option<u8>,
        /// Residual stage to attribute against (default: last).
        #[arg(long)]
        stage: Option<usize>,
        /// Slice axis for overlays.
        #[arg(long, default_value_t = 2)]
        axis: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> vfgrade::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            cases,
            per_case,
            side,
            seed,
        } => {
            let cfg = SynthConfig {
                cases,
                vertebrae_per_case: per_case,
                volume_side: side,
                seed,
                ..SynthConfig::default()
            };
            let (manifest, path) = generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} cases ({} vertebrae) under {}",
                manifest.cases.len(),
                manifest
                    .cases
                    .iter()
                    .map(|c| c.vertebrae.len())
                    .sum::<usize>(),
                path.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            out,
            resume,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.training.seed = seed;
            }
            let outcome = run::cmd_train(&cfg, &out, resume.as_deref())?;
            println!(
                "training done: test macro-F1 {:.4}, AUCROC {:.4} (checkpoint: {})",
                outcome.report.macro_f1,
                outcome.report.auc_roc,
                outcome.final_checkpoint.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            allow_train,
            split,
            out,
        } => {
            let split = match split.as_str() {
                "test" => SplitSet::Test,
                "train" => SplitSet::Train,
                other => {
                    return Err(Error::config(format!(
                        "unknown split '{other}' (expected 'test' or 'train')"
                    )))
                }
            };
            let report = run::cmd_eval(&checkpoint, &manifest, split, allow_train, out.as_deref())?;
            println!("{report}");
            Ok(())
        }
        Command::Infer {
            checkpoint,
            volume,
            mask,
            out,
        } => {
            let rows = run::cmd_infer(&checkpoint, &volume, &mask)?;
            println!("label  grade  p(G0)   p(G1)   p(G2)   p(G3)");
            for row in &rows {
                println!(
                    "{:>5}  G{}     {:.4}  {:.4}  {:.4}  {:.4}",
                    row.vertebra_label,
                    row.grade,
                    row.probabilities[0],
                    row.probabilities[1],
                    row.probabilities[2],
                    row.probabilities[3]
                );
            }
            if let Some(path) = out {
                std::fs::write(
                    &path,
                    serde_json::to_string_pretty(&rows).expect("rows serialize"),
                )
                .map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::Gradcam {
            checkpoint,
            volume,
            mask,
            label,
            class,
            stage,
            axis,
            out,
        } => {
            let target = class.map(GenantGrade::from_index).transpose()?;
            let outcome = run::cmd_gradcam(
                &checkpoint,
                &volume,
                &mask,
                label,
                target,
                stage,
                axis,
                &out,
            )?;
            println!(
                "attention for label {label} (target {}): {}",
                outcome.target,
                outcome.attention_volume_path.display()
            );
            for f in &outcome.overlays {
                println!("overlay: {}", f.display());
            }
            Ok(())
        }
    }
}
