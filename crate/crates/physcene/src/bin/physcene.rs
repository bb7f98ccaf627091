//! Thin command-line front end: flag parsing and output printing only;
//! the work happens in `physcene::commands`. Failures print a one-line
//! error JSON to stderr and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use physcene::commands::{
    cmd_ablate, cmd_evaluate, cmd_generate_dataset, cmd_render, cmd_sample, cmd_train,
    configure_threads_from_env, EvaluateArgs, GuidanceSelection, SampleArgs,
};

#[derive(Parser)]
#[command(
    name = "physcene",
    version,
    about = "Desk-scale laboratory for physically-guided diffusion synthesis of indoor scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset with train/val/test splits.
    GenerateDataset {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the noise predictor on the config's train split.
    Train {
        /// Experiment config JSON (paths, schedule, architecture).
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw scenes from a trained model, optionally physics-guided.
    Sample {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory whose scene files provide the floors.
        #[arg(long)]
        floors: PathBuf,
        /// Number of scenes to draw.
        #[arg(long)]
        n: usize,
        /// Comma-separated potentials: coll,layout,reach (or all / none).
        #[arg(long, default_value = "none")]
        guidance: String,
        /// Sampling seed.
        #[arg(long)]
        seed: u64,
        /// Output directory (scene JSONs + SVGs + manifest).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute layout metrics over a directory of scenes.
    Evaluate {
        /// Directory of scene files to score.
        #[arg(long)]
        scenes: PathBuf,
        /// Directory supplying floors/reference scenes (category
        /// distribution for the divergence metric).
        #[arg(long)]
        floors: PathBuf,
        /// Agent body width in meters.
        #[arg(long)]
        agent_width: f64,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the five-row guidance on/off grid.
    Ablate {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (ablation.json + ablation.txt).
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one scene file to a top-down SVG.
    Render {
        /// Scene JSON to draw.
        #[arg(long)]
        scene: PathBuf,
        /// SVG output path.
        #[arg(long)]
        out: PathBuf,
        /// Underlay the walkable-space map.
        #[arg(long)]
        walkable: bool,
    },
}

fn run(command: Command) -> physcene::Result<()> {
    match command {
        Command::GenerateDataset { config, out } => {
            let summary = cmd_generate_dataset(&config, &out)?;
            println!(
                "wrote {} scenes (train {} / val {} / test {}) to {}",
                summary.train + summary.val + summary.test,
                summary.train,
                summary.val,
                summary.test,
                summary.out_dir.display()
            );
        }
        Command::Train { config } => {
            let summary = cmd_train(&config)?;
            println!(
                "trained {} steps: loss {:.4} -> {:.4}",
                summary.steps_run, summary.initial_loss, summary.final_loss
            );
            println!("checkpoint: {}", summary.checkpoint.display());
            println!("loss curve: {}", summary.loss_csv.display());
        }
        Command::Sample { checkpoint, floors, n, guidance, seed, out } => {
            let selection = GuidanceSelection::parse(&guidance)?;
            let summary = cmd_sample(&SampleArgs {
                checkpoint,
                floors_dir: floors,
                n,
                selection,
                seed,
                out_dir: out,
            })?;
            println!(
                "sampled {} scenes to {} (guidance {}, {} guided steps, {} skipped)",
                summary.count,
                summary.out_dir.display(),
                selection.label(),
                summary.guided_steps,
                summary.nonfinite_skips
            );
        }
        Command::Evaluate { scenes, floors, agent_width, out } => {
            let (_, table) = cmd_evaluate(&EvaluateArgs {
                scenes_dir: scenes,
                floors_dir: floors,
                agent_width: Some(agent_width),
                out_path: out.clone(),
            })?;
            print!("{table}");
            println!("report: {}", out.display());
        }
        Command::Ablate { checkpoint, out } => {
            let grid = cmd_ablate(&checkpoint, &out)?;
            print!("{}", grid.table());
            println!("grid: {}", out.display());
        }
        Command::Render { scene, out, walkable } => {
            cmd_render(&scene, &out, walkable)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    configure_threads_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string().trim() })
            );
            return ExitCode::from(2);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
