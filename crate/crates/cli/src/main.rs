mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "twinlite", version, about = "Drivable-area and lane segmentation on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic road-scene dataset (90% train, 10% val).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "64x64")]
        size: String,
    },
    /// Train a model on the train split and write a checkpoint plus history CSV.
    Train(settings::TrainArgs),
    /// Print drivable mIoU and lane IoU on a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Required unless --oracle is given.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Segment one image and write a colour overlay.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write `<out>_da.png` and `<out>_lane.png` as 0/255 masks.
        #[arg(long)]
        raw: bool,
    },
    /// Fold batch norms into their convolutions.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time single-image forward passes.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "640x360")]
        size: String,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { out, count, seed, size } => commands::gen_data(&out, count, seed, &size),
        Command::Train(args) => commands::train(settings::TrainSettings::resolve(args)?),
        Command::Eval {
            data,
            ckpt,
            split,
            oracle,
        } => commands::eval(&data, ckpt.as_deref(), &split, oracle),
        Command::Infer { image, ckpt, out, raw } => commands::infer(&image, &ckpt, &out, raw),
        Command::Fuse { ckpt, out } => commands::fuse(&ckpt, &out),
        Command::Bench {
            ckpt,
            size,
            iters,
            warmup,
        } => commands::bench(&ckpt, &size, iters, warmup),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
