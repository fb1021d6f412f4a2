//! Run configuration: schema, TOML loading, dotted-key overrides, validation.
//!
//! Every field is reachable from the CLI via `--set section.key=value`, and
//! every run writes back a resolved snapshot that round-trips through this
//! parser. The `schema_version` field is required and checked.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionerKind {
    Randsfq,
    EncoderBlock,
    Identity,
}

impl fmt::Display for TransitionerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TransitionerKind::Randsfq => "randsfq",
            TransitionerKind::EncoderBlock => "encoder_block",
            TransitionerKind::Identity => "identity",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeInjection {
    Sum,
    Append,
    None,
}

impl fmt::Display for TimeInjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TimeInjection::Sum => "sum",
            TimeInjection::Append => "append",
            TimeInjection::None => "none",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Patch,
    Conv,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInit {
    Learned,
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Square frame edge in pixels (h0 = w0).
    pub frame_size: usize,
    /// Frames per clip (T).
    pub clip_len: usize,
    /// Sprite count K is drawn uniformly from `sprites_min..=sprites_max`.
    pub sprites_min: usize,
    pub sprites_max: usize,
    /// Sprite half-extent as a fraction of frame height, in (0, 0.4].
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-frame displacement magnitude range (fraction of frame size).
    pub speed_min: f64,
    pub speed_max: f64,
    /// Background gray level in [0, 1).
    pub background: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Patch edge for the patch encoder; the conv encoder derives its
    /// stride stack from the same grid contract.
    pub patch_size: usize,
    /// Frozen encoders receive no gradient and never change after init.
    pub frozen: bool,
    /// If > 0 and the encoder starts trainable-by-schedule, it is frozen
    /// after this many optimization steps ("brief pretraining").
    pub pretrain_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Slot count s.
    pub n_slots: usize,
    /// Feature/slot channel width c.
    pub channels: usize,
    /// Slot-attention refinement iterations per frame.
    pub n_sa_iters: usize,
    /// Sampling window Δ; valid range is 1..=clip_len-1.
    pub window_size: usize,
    pub transitioner_kind: TransitionerKind,
    pub time_injection: TimeInjection,
    /// Condition the transitioner on the next frame's features.
    pub use_next_feature: bool,
    /// Sample random slot-feature pairs during training; when false the
    /// training pairing degenerates to the evaluation pairing (t, t+1).
    pub sample_pairs: bool,
    pub query_init: QueryInit,
    /// Hidden width of the slot-attention residual MLP.
    pub slot_hidden: usize,
    /// Hidden width of the transitioner feed-forward sublayer.
    pub ffn_hidden: usize,
    /// Hidden width of the broadcast decoder's shared pixel MLP.
    pub decoder_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Cosine decay floor as a fraction of `lr`.
    pub lr_min_factor: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Validation every this many steps (also at the final step).
    pub val_interval: u64,
    /// Number of manifest-tail clips held out for validation.
    pub val_clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig {
                frame_size: 64,
                clip_len: 20,
                sprites_min: 2,
                sprites_max: 4,
                scale_min: 0.10,
                scale_max: 0.22,
                speed_min: 0.03,
                speed_max: 0.09,
                background: 0.08,
            },
            encoder: EncoderConfig {
                kind: EncoderKind::Patch,
                patch_size: 8,
                frozen: true,
                pretrain_steps: 0,
            },
            model: ModelConfig {
                n_slots: 6,
                channels: 32,
                n_sa_iters: 3,
                window_size: 5,
                transitioner_kind: TransitionerKind::Randsfq,
                time_injection: TimeInjection::Sum,
                use_next_feature: true,
                sample_pairs: true,
                query_init: QueryInit::Learned,
                slot_hidden: 64,
                ffn_hidden: 64,
                decoder_hidden: 48,
            },
            train: TrainConfig {
                steps: 2000,
                batch_size: 2,
                lr: 4e-4,
                warmup_steps: 100,
                lr_min_factor: 0.1,
                grad_clip: 1.0,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                val_interval: 250,
                val_clips: 32,
            },
        }
    }
}

impl RunConfig {
    /// Loads, applies `key=value` overrides (overrides win), and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("config parse: {e}")))?;
        if !value.contains_key("schema_version") {
            return Err(Error::config("config missing required schema_version"));
        }
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e| Error::config(format!("config field: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short hex digest of the canonical serialized config; stored in
    /// checkpoints so evaluation can detect config drift.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let d = &self.data;
        let m = &self.model;
        if d.clip_len < 2 {
            return Err(Error::config("data.clip_len must be >= 2"));
        }
        if m.window_size < 1 || m.window_size > d.clip_len - 1 {
            return Err(Error::config(format!(
                "model.window_size must satisfy 1 <= {} <= clip_len-1 = {}",
                m.window_size,
                d.clip_len - 1
            )));
        }
        if m.n_slots < 2 {
            return Err(Error::config("model.n_slots must be >= 2"));
        }
        if m.channels == 0 || m.slot_hidden == 0 || m.ffn_hidden == 0 || m.decoder_hidden == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        if m.n_sa_iters < 1 {
            return Err(Error::config("model.n_sa_iters must be >= 1"));
        }
        if d.sprites_min > d.sprites_max {
            return Err(Error::config("data.sprites_min > data.sprites_max"));
        }
        if d.sprites_max >= m.n_slots {
            return Err(Error::config(format!(
                "data.sprites_max = {} must be < model.n_slots = {} (one slot reserved for background)",
                d.sprites_max, m.n_slots
            )));
        }
        if !(d.scale_min > 0.0 && d.scale_min <= d.scale_max && d.scale_max <= 0.4) {
            return Err(Error::config("sprite scales must satisfy 0 < min <= max <= 0.4"));
        }
        if !(d.speed_min >= 0.0 && d.speed_min <= d.speed_max) {
            return Err(Error::config("sprite speeds must satisfy 0 <= min <= max"));
        }
        if !(0.0..1.0).contains(&d.background) {
            return Err(Error::config("data.background must be in [0, 1)"));
        }
        if self.encoder.patch_size == 0 || d.frame_size % self.encoder.patch_size != 0 {
            return Err(Error::config(format!(
                "encoder.patch_size {} must divide data.frame_size {}",
                self.encoder.patch_size, d.frame_size
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if self.train.val_clips == 0 {
            return Err(Error::config("train.val_clips must be >= 1"));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive and finite"));
        }
        Ok(())
    }

    /// Feature-grid edge implied by the encoder config.
    pub fn grid_size(&self) -> usize {
        self.data.frame_size / self.encoder.patch_size
    }
}

/// Applies one `dotted.path=value` override to a parsed TOML tree.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' is not key=value")))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override '{spec}' has an empty key segment")));
    }
    let mut node = table;
    for seg in &segments[..segments.len() - 1] {
        node = node
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override '{spec}': '{seg}' is not a table")))?;
    }
    node.insert(segments.last().unwrap().to_string(), parse_toml_value(raw.trim()));
    Ok(())
}

/// Interprets an override value: bool, integer, float, else string.
fn parse_toml_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}
