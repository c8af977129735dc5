//! Flat textual run configuration: one `key=value` per line with dotted
//! keys, `#` comments, strict schema (unknown keys rejected), and a
//! canonical serialization that round-trips losslessly.

use hvqa_core::attention::{SelectionMode, StNormalizer};

use crate::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    Sum,
    Pairwise,
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderPreset {
    /// 64×64 images, conv channels [16, 32, 64, 128], LSTM 32/128,
    /// classifier hidden 256. Produces a 4×4×128 map.
    Desk,
    /// 128×128 images, conv channels [128, 128, 128, 128], LSTM 64/256,
    /// classifier hidden 1024. Produces an 8×8×128 map.
    Clevr,
}

impl EncoderPreset {
    pub fn image_size(self) -> usize {
        match self {
            EncoderPreset::Desk => 64,
            EncoderPreset::Clevr => 128,
        }
    }

    pub fn conv_channels(self) -> [usize; 4] {
        match self {
            EncoderPreset::Desk => [16, 32, 64, 128],
            EncoderPreset::Clevr => [128, 128, 128, 128],
        }
    }

    pub fn lstm_dims(self) -> (usize, usize) {
        match self {
            EncoderPreset::Desk => (32, 128),
            EncoderPreset::Clevr => (64, 256),
        }
    }

    pub fn classifier_hidden(self) -> usize {
        match self {
            EncoderPreset::Desk => 256,
            EncoderPreset::Clevr => 1024,
        }
    }

    /// Spatial cells of the final map (4 stride-2 layers).
    pub fn map_extent(self) -> usize {
        self.image_size() / 16
    }
}

/// Every architectural and optimization hyperparameter; all fields have
/// documented defaults and the whole struct round-trips through the textual
/// format.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub batch: usize,
    pub preset: EncoderPreset,
    pub d: usize,
    pub alignment_depth: usize,
    pub attention_mode: SelectionMode,
    pub fraction: f64,
    /// None = τ is 1/(w·h).
    pub tau: Option<f64>,
    pub hops: usize,
    pub st_mu: StNormalizer,
    pub aggregator: Aggregator,
    pub pairwise_heads: usize,
    /// None = d / heads.
    pub pairwise_head_dim: Option<usize>,
    pub pairwise_scale_scores: bool,
    pub rn_g_hidden: usize,
    pub rn_f_hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub plateau_windows: usize,
    pub plateau_min_delta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            batch: 64,
            preset: EncoderPreset::Desk,
            d: 128,
            alignment_depth: 2,
            attention_mode: SelectionMode::FixedK,
            fraction: 0.25,
            tau: None,
            hops: 2,
            st_mu: StNormalizer::Softmax,
            aggregator: Aggregator::Sum,
            pairwise_heads: 2,
            pairwise_head_dim: None,
            pairwise_scale_scores: false,
            rn_g_hidden: 128,
            rn_f_hidden: 128,
            lr: 1e-4,
            weight_decay: 1e-5,
            dropout: 0.0,
            max_steps: 2000,
            eval_every: 100,
            checkpoint_every: 1000,
            plateau_windows: 3,
            plateau_min_delta: 0.001,
        }
    }
}

const KEYS: [&str; 24] = [
    "seed",
    "data.batch",
    "model.preset",
    "model.d",
    "model.alignment_depth",
    "attention.mode",
    "attention.fraction",
    "attention.tau",
    "attention.hops",
    "attention.st_mu",
    "aggregator",
    "pairwise.heads",
    "pairwise.head_dim",
    "pairwise.scale_scores",
    "rn.g_hidden",
    "rn.f_hidden",
    "train.lr",
    "train.weight_decay",
    "train.dropout",
    "train.max_steps",
    "train.eval_every",
    "train.checkpoint_every",
    "train.plateau_windows",
    "train.plateau_min_delta",
];

impl RunConfig {
    pub fn mode_name(&self) -> &'static str {
        match self.attention_mode {
            SelectionMode::FixedK => "fixed_k",
            SelectionMode::Adaptive => "adahan",
            SelectionMode::Soft => "soft",
            SelectionMode::StraightThrough => "straight_through",
        }
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "data.batch" => self.batch.to_string(),
            "model.preset" => match self.preset {
                EncoderPreset::Desk => "desk".into(),
                EncoderPreset::Clevr => "clevr".into(),
            },
            "model.d" => self.d.to_string(),
            "model.alignment_depth" => self.alignment_depth.to_string(),
            "attention.mode" => self.mode_name().into(),
            "attention.fraction" => self.fraction.to_string(),
            "attention.tau" => match self.tau {
                None => "auto".into(),
                Some(t) => t.to_string(),
            },
            "attention.hops" => self.hops.to_string(),
            "attention.st_mu" => match self.st_mu {
                StNormalizer::Sigmoid => "sigmoid".into(),
                StNormalizer::Softmax => "softmax".into(),
            },
            "aggregator" => match self.aggregator {
                Aggregator::Sum => "sum".into(),
                Aggregator::Pairwise => "pairwise".into(),
                Aggregator::Relation => "rn".into(),
            },
            "pairwise.heads" => self.pairwise_heads.to_string(),
            "pairwise.head_dim" => match self.pairwise_head_dim {
                None => "auto".into(),
                Some(d) => d.to_string(),
            },
            "pairwise.scale_scores" => self.pairwise_scale_scores.to_string(),
            "rn.g_hidden" => self.rn_g_hidden.to_string(),
            "rn.f_hidden" => self.rn_f_hidden.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.weight_decay" => self.weight_decay.to_string(),
            "train.dropout" => self.dropout.to_string(),
            "train.max_steps" => self.max_steps.to_string(),
            "train.eval_every" => self.eval_every.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "train.plateau_windows" => self.plateau_windows.to_string(),
            "train.plateau_min_delta" => self.plateau_min_delta.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Canonical serialization: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.value_of(key));
            out.push('\n');
        }
        out
    }

    /// Applies one `key=value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |detail: String| TrainError::Config(detail);
        let int = |v: &str| -> Result<u64> {
            v.parse::<u64>()
                .map_err(|_| bad(format!("key {key}: expected an integer, got {value:?}")))
        };
        let float = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| bad(format!("key {key}: expected a number, got {value:?}")))
        };
        match key {
            "seed" => self.seed = int(value)?,
            "data.batch" => self.batch = int(value)? as usize,
            "model.preset" => {
                self.preset = match value {
                    "desk" => EncoderPreset::Desk,
                    "clevr" => EncoderPreset::Clevr,
                    _ => return Err(bad(format!("model.preset: unknown preset {value:?}"))),
                }
            }
            "model.d" => self.d = int(value)? as usize,
            "model.alignment_depth" => {
                let v = int(value)? as usize;
                if v != 0 && v != 2 {
                    return Err(bad(format!("model.alignment_depth must be 0 or 2, got {v}")));
                }
                self.alignment_depth = v;
            }
            "attention.mode" => {
                self.attention_mode = match value {
                    "fixed_k" => SelectionMode::FixedK,
                    "adahan" => SelectionMode::Adaptive,
                    "soft" => SelectionMode::Soft,
                    "straight_through" => SelectionMode::StraightThrough,
                    _ => return Err(bad(format!("attention.mode: unknown mode {value:?}"))),
                }
            }
            "attention.fraction" => {
                let v = float(value)?;
                if !(v > 0.0 && v <= 1.0) {
                    return Err(bad(format!("attention.fraction must be in (0, 1], got {v}")));
                }
                self.fraction = v;
            }
            "attention.tau" => {
                self.tau = if value == "auto" { None } else { Some(float(value)?) }
            }
            "attention.hops" => {
                let v = int(value)? as usize;
                if v == 0 {
                    return Err(bad("attention.hops must be at least 1".into()));
                }
                self.hops = v;
            }
            "attention.st_mu" => {
                self.st_mu = match value {
                    "sigmoid" => StNormalizer::Sigmoid,
                    "softmax" => StNormalizer::Softmax,
                    _ => return Err(bad(format!("attention.st_mu: unknown normalizer {value:?}"))),
                }
            }
            "aggregator" => {
                self.aggregator = match value {
                    "sum" => Aggregator::Sum,
                    "pairwise" => Aggregator::Pairwise,
                    "rn" => Aggregator::Relation,
                    _ => return Err(bad(format!("aggregator: unknown aggregator {value:?}"))),
                }
            }
            "pairwise.heads" => self.pairwise_heads = int(value)? as usize,
            "pairwise.head_dim" => {
                self.pairwise_head_dim =
                    if value == "auto" { None } else { Some(int(value)? as usize) }
            }
            "pairwise.scale_scores" => {
                self.pairwise_scale_scores = value
                    .parse::<bool>()
                    .map_err(|_| bad(format!("pairwise.scale_scores: expected bool, got {value:?}")))?
            }
            "rn.g_hidden" => self.rn_g_hidden = int(value)? as usize,
            "rn.f_hidden" => self.rn_f_hidden = int(value)? as usize,
            "train.lr" => self.lr = float(value)?,
            "train.weight_decay" => self.weight_decay = float(value)?,
            "train.dropout" => {
                let v = float(value)?;
                if !(0.0..1.0).contains(&v) {
                    return Err(bad(format!("train.dropout must be in [0, 1), got {v}")));
                }
                self.dropout = v;
            }
            "train.max_steps" => self.max_steps = int(value)?,
            "train.eval_every" => self.eval_every = int(value)?.max(1),
            "train.checkpoint_every" => self.checkpoint_every = int(value)?.max(1),
            "train.plateau_windows" => self.plateau_windows = int(value)? as usize,
            "train.plateau_min_delta" => self.plateau_min_delta = float(value)?,
            _ => return Err(bad(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses the flat text format, reporting the line and column of the
    /// first error.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line_idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let eq = line.find('=').ok_or(TrainError::ConfigParse {
                line: line_idx + 1,
                column: raw.len(),
                detail: "expected key=value".into(),
            })?;
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            cfg.set(key, value).map_err(|e| match e {
                TrainError::Config(detail) => TrainError::ConfigParse {
                    line: line_idx + 1,
                    column: raw.find('=').map(|c| c + 2).unwrap_or(1),
                    detail,
                },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(TrainError::Config(format!(
                "data.batch must be at least 2 (batch statistics), got {}",
                self.batch
            )));
        }
        if self.d == 0 {
            return Err(TrainError::Config("model.d must be positive".into()));
        }
        let heads = self.pairwise_heads;
        if self.aggregator == Aggregator::Pairwise {
            if heads == 0 {
                return Err(TrainError::Config("pairwise.heads must be positive".into()));
            }
            let dh = self.head_dim();
            if dh == 0 || dh * heads > self.d {
                return Err(TrainError::Config(format!(
                    "pairwise head_dim {dh} × heads {heads} exceeds d = {}",
                    self.d
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.pairwise_head_dim.unwrap_or(self.d / self.pairwise_heads.max(1))
    }

    /// FNV-1a over the canonical serialization.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn non_default_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("attention.mode", "adahan").unwrap();
        cfg.set("aggregator", "pairwise").unwrap();
        cfg.set("train.lr", "0.0003").unwrap();
        cfg.set("attention.tau", "0.01").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = RunConfig::from_text("attention.mod=hard\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("attention.mod"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn parse_error_carries_line() {
        let err = RunConfig::from_text("seed=1\nnot a line\n").unwrap_err();
        match err {
            TrainError::ConfigParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::from_text("# comment\n\nseed=9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "2").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn alignment_depth_restricted() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("model.alignment_depth", "1").is_err());
        assert!(cfg.set("model.alignment_depth", "0").is_ok());
        assert!(cfg.set("model.alignment_depth", "2").is_ok());
    }
}
