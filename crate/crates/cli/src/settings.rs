//! Training settings merged from an optional TOML file and flags; flags win.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::Deserialize;
use twinlite::data::parse_size;
use twinlite::loss::LossConfig;
use twinlite::nn::{HeadMode, ModelConfig};
use twinlite::trainer::TrainConfig;

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub single_head: bool,
    /// Training size `WxH`; defaults to the size of the first training image.
    #[arg(long)]
    pub size: Option<String>,
    /// Lane label growth in pixels; defaults to 8 scaled by width/640.
    #[arg(long)]
    pub lane_dilation: Option<usize>,
    /// Also checkpoint every K epochs (0 = only at the end).
    #[arg(long)]
    pub save_every: Option<usize>,
    /// History CSV path; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// TOML file with any of the keys above (snake_case) plus loss settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    no_attention: Option<bool>,
    single_head: Option<bool>,
    size: Option<String>,
    lane_dilation: Option<usize>,
    save_every: Option<usize>,
    history: Option<PathBuf>,
    poly_power: Option<f64>,
    gamma: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    smooth: Option<f64>,
}

/// Fully validated training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub data: PathBuf,
    pub out: PathBuf,
    pub history: PathBuf,
    pub size: Option<(usize, usize)>,
    pub lane_dilation: Option<usize>,
    pub save_every: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn read_file(path: &Path) -> anyhow::Result<TrainFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl TrainSettings {
    pub fn resolve(args: TrainArgs) -> anyhow::Result<Self> {
        let file = match &args.config {
            Some(p) => read_file(p)?,
            None => TrainFile::default(),
        };
        let Some(data) = args.data.or(file.data) else {
            bail!("--data is required (flag or config key `data`)");
        };
        let Some(out) = args.out.or(file.out) else {
            bail!("--out is required (flag or config key `out`)");
        };
        let history = args.history.or(file.history).unwrap_or_else(|| out.with_extension("csv"));
        if history == out {
            bail!("history path {} would overwrite the checkpoint", history.display());
        }
        let size = args.size.or(file.size).map(|s| parse_size(&s)).transpose()?;

        let defaults = TrainConfig::default();
        let loss_defaults = LossConfig::default();
        let train = TrainConfig {
            epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
            batch_size: args.batch.or(file.batch).unwrap_or(defaults.batch_size),
            lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
            poly_power: file.poly_power.unwrap_or(defaults.poly_power),
            seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
            loss: LossConfig {
                gamma: file.gamma.unwrap_or(loss_defaults.gamma),
                alpha: file.alpha.unwrap_or(loss_defaults.alpha),
                beta: file.beta.unwrap_or(loss_defaults.beta),
                smooth: file.smooth.unwrap_or(loss_defaults.smooth),
            },
            ..defaults
        };
        train.validate()?;

        let single = args.single_head || file.single_head.unwrap_or(false);
        let model = ModelConfig {
            attention: !(args.no_attention || file.no_attention.unwrap_or(false)),
            head_mode: if single { HeadMode::SingleHead } else { HeadMode::TwoHeads },
            ..ModelConfig::default()
        };
        model.validate()?;

        Ok(Self {
            data,
            out,
            history,
            size,
            lane_dilation: args.lane_dilation.or(file.lane_dilation),
            save_every: args.save_every.or(file.save_every).unwrap_or(0),
            model,
            train,
        })
    }
}
