//! Command logic behind the `axwin` binary: run configuration, cost
//! reports, forward statistics, the training smoke run and the check suites.
//! The binary only parses arguments and maps errors to exit codes.

pub mod check;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, AttentionCost, CostReport};
use crate::attention::AttentionMode;
use crate::error::{config_err, Error, Result};
use crate::model::train::{self, StripeDataset, TrainConfig, TrainReport};
use crate::model::{AxWin, VariantConfig, IN_CHANNELS};
use crate::tensor::{io, DType, Element, Rng, Tensor};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
}

/// Exit code for an error: configuration and shape problems are `2`, file
/// problems `3`, numerical failures `1`.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Json(_) => exit::CONFIG,
        Error::Io(_) | Error::Format(_) => exit::IO,
        Error::NonFinite(_) | Error::UnsupportedOp(_) => exit::FAILURE,
    }
}

/// Input resolution; JSON accepts `224` or `[h, w]`, text accepts `224` or
/// `224x320`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ResolutionRepr", into = "[usize; 2]")]
pub struct Resolution {
    pub h: usize,
    pub w: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ResolutionRepr {
    Square(usize),
    Pair([usize; 2]),
}

impl From<ResolutionRepr> for Resolution {
    fn from(r: ResolutionRepr) -> Self {
        match r {
            ResolutionRepr::Square(s) => Resolution { h: s, w: s },
            ResolutionRepr::Pair([h, w]) => Resolution { h, w },
        }
    }
}

impl From<Resolution> for [usize; 2] {
    fn from(r: Resolution) -> Self {
        [r.h, r.w]
    }
}

impl FromStr for Resolution {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |t: &str| {
            t.trim().parse::<usize>().map_err(|_| format!("invalid resolution `{s}` (expected H or HxW)"))
        };
        match s.split_once(['x', 'X']) {
            Some((h, w)) => Ok(Resolution { h: parse(h)?, w: parse(w)? }),
            None => {
                let v = parse(s)?;
                Ok(Resolution { h: v, w: v })
            }
        }
    }
}

/// Parses `a,b,c,d`.
pub fn parse_split_sizes(s: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("invalid split sizes `{s}` (expected a,b,c,d)"))?;
    v.try_into().map_err(|_| format!("expected four split sizes, got `{s}`"))
}

fn default_variant() -> String {
    "tiny".into()
}

fn default_resolution() -> Resolution {
    Resolution { h: 224, w: 224 }
}

/// Everything a command needs. Unknown JSON keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_variant")]
    pub variant: String,
    /// Full architecture; replaces the preset named by `variant`.
    #[serde(default)]
    pub model: Option<VariantConfig>,
    #[serde(default = "default_resolution")]
    pub resolution: Resolution,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dtype: DType,
    #[serde(default)]
    pub attention_mode: AttentionMode,
    #[serde(default)]
    pub split_size: Option<[usize; 4]>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Tensor or checkpoint output.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// JSON report output.
    #[serde(default)]
    pub json: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl RunConfig {
    /// The architecture after applying every override, validated.
    pub fn variant_config(&self) -> Result<VariantConfig> {
        let mut v = match &self.model {
            Some(m) => m.clone(),
            None => VariantConfig::by_name(&self.variant)?,
        };
        v.attention = self.attention_mode;
        if let Some(s) = self.split_size {
            v = v.with_split_sizes(s);
        }
        if let Some(n) = self.num_classes {
            v.num_classes = n;
        }
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.h == 0 || self.resolution.w == 0 {
            return config_err("resolution must be positive");
        }
        self.variant_config().map(|_| ())
    }

    pub fn build(&self) -> Result<AxWin> {
        AxWin::new(self.variant_config()?)
    }
}

/// Reads a strict JSON run configuration and validates it.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Per-layer parameters and MACs at the configured resolution.
pub fn describe(cfg: &RunConfig) -> Result<CostReport> {
    cfg.validate()?;
    let model = cfg.build()?;
    analysis::count_flops(&model, cfg.resolution.h, cfg.resolution.w)
}

/// Summary statistics of a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardStats {
    pub variant: String,
    pub dtype: DType,
    pub input_shape: [usize; 4],
    pub logits_shape: [usize; 4],
    pub stage_shapes: Vec<[usize; 4]>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

fn stats<T: Element>(t: &Tensor<T>) -> (f64, f64, f64, f64) {
    let n = t.numel() as f64;
    let vals: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

/// Where the forward input comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ForwardInput {
    /// Standard-normal image drawn from the run seed.
    Synthetic,
    Zeros,
    File(PathBuf),
}

/// Runs the backbone in `T` precision and returns statistics and logits.
pub fn forward_typed<T: Element>(cfg: &RunConfig, input: &ForwardInput) -> Result<(ForwardStats, Tensor<T>)> {
    let model = cfg.build()?;
    let shape = [1, cfg.resolution.h, cfg.resolution.w, IN_CHANNELS];
    let x: Tensor<T> = match input {
        ForwardInput::Synthetic => Tensor::randn(shape, &mut Rng::fork(cfg.seed, "input")),
        ForwardInput::Zeros => Tensor::zeros(shape),
        ForwardInput::File(p) => io::load(p)?,
    };
    let params = model.init::<T>(cfg.seed);
    let out = model.forward(&params, &x)?;
    let (mean, std, min, max) = stats(&out.logits);
    let s = ForwardStats {
        variant: model.config.name.clone(),
        dtype: T::DTYPE,
        input_shape: x.shape().0,
        logits_shape: out.logits.shape().0,
        stage_shapes: out.stages.iter().map(|t| t.shape().0).collect(),
        mean,
        std,
        min,
        max,
    };
    Ok((s, out.logits))
}

/// [`forward_typed`] in the configured dtype; writes the logits to
/// `cfg.out` when set.
pub fn forward(cfg: &RunConfig, input: &ForwardInput) -> Result<ForwardStats> {
    match cfg.dtype {
        DType::F32 => {
            let (s, logits) = forward_typed::<f32>(cfg, input)?;
            if let Some(p) = &cfg.out {
                io::save(&logits, p)?;
            }
            Ok(s)
        }
        DType::F64 => {
            let (s, logits) = forward_typed::<f64>(cfg, input)?;
            if let Some(p) = &cfg.out {
                io::save(&logits, p)?;
            }
            Ok(s)
        }
    }
}

/// Settings of the stripe training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeConfig {
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    /// Stop early once the dataset loss is below this.
    pub target_loss: Option<f64>,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        SmokeConfig { steps: 500, seed: 0, lr: 0.01, target_loss: Some(0.1) }
    }
}

/// Trains the micro variant (two classes) on the stripe dataset.
pub fn train_smoke(cfg: &SmokeConfig, on_eval: impl FnMut(&train::EvalPoint)) -> Result<TrainReport> {
    let model = AxWin::new(VariantConfig::micro().with_num_classes(2))?;
    let mut params = model.init::<f32>(cfg.seed);
    let mut tc = TrainConfig {
        max_steps: cfg.steps,
        seed: cfg.seed,
        target_loss: cfg.target_loss,
        ..TrainConfig::default()
    };
    tc.sgd.lr = cfg.lr;
    let data = StripeDataset::<f32>::generate(tc.data, cfg.seed);
    train::train(&model, &mut params, &data, &tc, on_eval)
}

/// Attention cost table over several square resolutions.
pub fn compare(
    resolutions: &[Resolution],
    channels: usize,
    window: usize,
    axial: usize,
) -> Result<Vec<AttentionCost>> {
    resolutions.iter().map(|r| analysis::attention_flops_compare(r.h, r.w, channels, window, axial)).collect()
}
