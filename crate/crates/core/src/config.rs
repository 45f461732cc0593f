//! Flat `key = value` run configuration.
//!
//! The file is TOML restricted to top-level keys; unknown keys are
//! rejected. Command-line overrides `key=value` are applied on top, the
//! value parsed as a TOML value and falling back to a bare string.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SamplingPlan;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::maskgen::{MaskSpec, DEFAULT_LENGTH_FRACTION, DEFAULT_MAX_POINT_NUM};
use crate::models::ModelConfig;
use crate::patch::PatchShape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    // Data.
    pub frame_width: usize,
    pub frame_height: usize,
    /// Frames per training clip.
    pub window: usize,
    /// Length of each synthetic training video.
    pub source_frames: usize,
    /// Sprites per synthetic video.
    pub sprites: usize,
    /// Dataset directory to train on; empty means synthesize on the fly.
    pub data_dir: String,
    /// Generate training clips on a producer thread.
    pub threaded_data: bool,

    // Masks.
    pub max_point_num: usize,
    /// Zero selects `0.4 * min(H, W)`.
    pub max_length: f64,

    // Model.
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 3],
    pub layers: usize,
    /// Comma-separated patch shapes `rows x cols` in feature pixels.
    pub heads: String,
    pub visibility_threshold: f64,
    pub disc_channels: Vec<usize>,

    // Losses.
    pub lambda_hole: f64,
    pub lambda_valid: f64,
    pub lambda_adv: f64,

    // Optimization.
    pub steps: u64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    // Sampling for inference.
    pub radius: usize,
    pub rate: usize,
    pub neighbors_only: bool,

    // Output.
    pub out_dir: String,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Continue from `out_dir/checkpoint.bin` when present.
    pub resume: bool,
}

impl Default for Config {
    fn default() -> Self {
        let m = ModelConfig::desk();
        let w = LossWeights::default();
        Self {
            seed: 0,
            frame_width: m.frame_width,
            frame_height: m.frame_height,
            window: 5,
            source_frames: 20,
            sprites: 3,
            data_dir: String::new(),
            threaded_data: false,
            max_point_num: DEFAULT_MAX_POINT_NUM,
            max_length: 0.0,
            encoder_channels: m.encoder_channels,
            decoder_channels: m.decoder_channels,
            layers: m.layers,
            heads: format_heads(&m.heads),
            visibility_threshold: m.visibility_threshold,
            disc_channels: m.disc_channels,
            lambda_hole: w.hole,
            lambda_valid: w.valid,
            lambda_adv: w.adv,
            steps: 2000,
            lr: 1e-4,
            lr_decay: 0.1,
            lr_decay_step: 150_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            radius: 2,
            rate: 10,
            neighbors_only: false,
            out_dir: "runs/default".into(),
            log_every: 1,
            checkpoint_every: 500,
            resume: false,
        }
    }
}

pub fn format_heads(heads: &[PatchShape]) -> String {
    heads
        .iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_heads(s: &str) -> Result<Vec<PatchShape>> {
    s.split(',')
        .map(|part| {
            let part = part.trim();
            let (r, c) = part
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("head `{part}` is not `rows x cols`")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("head `{part}` is not `rows x cols`")))
            };
            Ok(PatchShape::new(num(r)?, num(c)?))
        })
        .collect()
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    table.insert(key.to_string(), value);
    Ok(())
}

impl Config {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!(
                "`{k}`: nested tables are not allowed"
            )));
        }
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            frame_height: self.frame_height,
            frame_width: self.frame_width,
            encoder_channels: self.encoder_channels,
            decoder_channels: self.decoder_channels,
            layers: self.layers,
            heads: parse_heads(&self.heads)?,
            visibility_threshold: self.visibility_threshold,
            disc_channels: self.disc_channels.clone(),
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            hole: self.lambda_hole,
            valid: self.lambda_valid,
            adv: self.lambda_adv,
        }
    }

    pub fn mask_spec(&self, seed: u64) -> MaskSpec {
        let mut spec = MaskSpec::new(self.frame_height, self.frame_width, seed);
        spec.max_point_num = self.max_point_num;
        spec.max_length = if self.max_length > 0.0 {
            self.max_length
        } else {
            DEFAULT_LENGTH_FRACTION * self.frame_height.min(self.frame_width) as f64
        };
        spec
    }

    pub fn plan(&self, target: usize) -> SamplingPlan {
        SamplingPlan {
            target,
            radius: self.radius,
            rate: self.rate,
            neighbors_only: self.neighbors_only,
        }
    }

    // `!(x > 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.model()?.validate()?;
        self.loss_weights().validate()?;
        self.mask_spec(0).validate()?;
        if self.window < 3 {
            return Err(Error::Config("window must be at least 3 frames".into()));
        }
        if self.source_frames < self.window {
            return Err(Error::Config("source_frames must be >= window".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_step == 0 {
            return Err(Error::Config(
                "lr, lr_decay and lr_decay_step must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config(
                "adam betas must be in [0, 1) and eps > 0".into(),
            ));
        }
        if self.rate == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "rate, log_every and checkpoint_every must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Resolved configuration as TOML, fields in declaration order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256, hex, of the canonical form with the keys that cannot change
    /// trained weights (run length, output location, logging cadence, resume
    /// and threading switches, inference sampling) reset to defaults. A
    /// checkpoint taken at step k therefore matches every run that would pass
    /// through step k.
    pub fn digest(&self) -> String {
        let d = Config::default();
        let view = Config {
            steps: d.steps,
            out_dir: d.out_dir,
            log_every: d.log_every,
            checkpoint_every: d.checkpoint_every,
            resume: d.resume,
            threaded_data: d.threaded_data,
            radius: d.radius,
            rate: d.rate,
            neighbors_only: d.neighbors_only,
            ..self.clone()
        };
        let hash = Sha256::digest(view.canonical().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
