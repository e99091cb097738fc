//! Command-line entry point for training, restoring, and evaluating
//! prompt-driven all-in-one restoration models.
//!
//! Exit codes: 0 success, 1 failed verification check, 2 bad usage or
//! malformed input, 3 numeric abort (non-finite loss).

use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "pip-cli", version, about = "Prompt-in-prompt image restoration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a restoration model from a JSON run configuration.
    Train {
        /// Path to the JSON configuration file.
        config: PathBuf,
        /// Override the configured RNG seed (beats the PIP_SEED env var).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore a single PPM image with a trained checkpoint.
    Restore {
        /// Restorer checkpoint.
        checkpoint: PathBuf,
        /// Degraded input image (binary PPM).
        input: PathBuf,
        /// Prompt weight: a task name, comma-separated floats, or "auto".
        #[arg(long, default_value = "auto")]
        omega: String,
        /// Output path (defaults to the input with an added suffix).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Clean reference image; prints quality metrics when given.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Classifier checkpoint, required for --omega auto.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on synthetic held-out images.
    Eval {
        /// Restorer checkpoint.
        checkpoint: PathBuf,
        /// Expected task list; must match the trained tasks.
        #[arg(long)]
        tasks: Option<String>,
        /// Weight policy: "oracle", "wrong", "auto", a task name, or floats.
        #[arg(long, default_value = "oracle")]
        omega: String,
        /// Expected ablation letter; must match the checkpoint.
        #[arg(long)]
        ablation: Option<char>,
        /// Also evaluate two-degradation composites (rain/haze + noise).
        #[arg(long)]
        composite: bool,
        /// Held-out images per task.
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Classifier checkpoint, required for --omega auto.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Where to write the machine-readable result table.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print pairwise prompt-angle matrices for a checkpoint.
    InspectPrompts {
        /// Restorer checkpoint.
        checkpoint: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Deliberately corrupt one gradient to prove detection works.
        #[arg(long, hide = true)]
        corrupt_dwconv: bool,
    },
    /// Predict the degradation type of a PPM image.
    Classify {
        /// Classifier checkpoint.
        classifier: PathBuf,
        /// Input image (binary PPM).
        image: PathBuf,
    },
    /// Train a degradation classifier on synthetic data.
    TrainClassifier {
        /// Comma-separated task names to distinguish.
        #[arg(long, default_value = "noise,rain,haze,blur,lowlight")]
        tasks: String,
        /// Optimisation steps (default: a desk-scale budget).
        #[arg(long)]
        steps: Option<usize>,
        /// RNG seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Training image side length.
        #[arg(long)]
        image_size: Option<usize>,
        /// Where to save the classifier checkpoint.
        #[arg(long, default_value = "classifier.ckpt")]
        out: PathBuf,
        /// Held-out images per task for the final accuracy table.
        #[arg(long, default_value_t = 20)]
        holdout: usize,
    },
}

fn run(cli: Cli) -> pip_restore::Result<()> {
    match &cli.cmd {
        Cmd::Train { config, seed } => commands::cmd_train(config, *seed),
        Cmd::Restore { checkpoint, input, omega, out, reference, classifier } => {
            commands::cmd_restore(&commands::RestoreArgs {
                checkpoint,
                input,
                omega,
                out: out.as_deref(),
                reference: reference.as_deref(),
                classifier: classifier.as_deref(),
            })
        }
        Cmd::Eval { checkpoint, tasks, omega, ablation, composite, n, classifier, log } => {
            commands::cmd_eval(&commands::EvalArgs {
                checkpoint,
                tasks: tasks.as_deref(),
                omega,
                ablation: *ablation,
                composite: *composite,
                n_per_task: *n,
                classifier: classifier.as_deref(),
                log: log.as_deref(),
            })
        }
        Cmd::InspectPrompts { checkpoint } => commands::cmd_inspect_prompts(checkpoint),
        Cmd::Gradcheck { corrupt_dwconv } => commands::cmd_gradcheck(*corrupt_dwconv),
        Cmd::Classify { classifier, image } => commands::cmd_classify(classifier, image),
        Cmd::TrainClassifier { tasks, steps, seed, image_size, out, holdout } => {
            commands::cmd_train_classifier(&commands::TrainClassifierArgs {
                tasks,
                steps: *steps,
                seed: *seed,
                image_size: *image_size,
                out,
                holdout_per_task: *holdout,
            })
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
