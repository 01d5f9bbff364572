//! Run configuration: a flat TOML file with a versioned schema.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so typos fail loudly.

use std::path::Path;

use candle_core::DType;
use riskseg_core::backbone::BackboneConfig;
use riskseg_core::losses::{LossWeights, SegLossKind};
use riskseg_core::model::{Flags, ModelConfig};
use riskseg_core::rus::UncLossConfig;
use riskseg_core::synthdata::SceneConfig;
use riskseg_core::udlr::RefineConfig;
use riskseg_core::ugf::UgfConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::optim::AdamWConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Folded into every config hash so checkpoints from a different build of
/// the model code are refused.
pub const CODE_VERSION: &str = concat!("riskseg-", env!("CARGO_PKG_VERSION"), "/model-1");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// `f32` or `f64`.
    pub dtype: String,

    pub use_ugf: bool,
    pub use_udlr: bool,
    pub use_unc_loss: bool,

    pub embed_width: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub convs_per_stage: usize,
    pub interaction_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub ugf_heads: usize,
    pub ugf_dropout: f64,

    pub tau: f64,
    pub temperature: f64,
    pub mask_blur: bool,
    pub refine_hidden: usize,

    pub delta: f64,
    pub lambda_s: f64,
    pub eps: f64,
    /// Optimizer steps before the uncertainty loss switches on.
    pub warmup_steps: usize,
    pub target_blur: bool,
    pub lambda_unc: f64,
    pub lambda_ref: f64,
    /// `bce+dice`, `bce` or `dice`.
    pub seg_loss: String,

    pub canvas_size: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub similar_prob: f64,
    pub relation_prob: f64,
    pub max_same_type: usize,
    pub texture_amplitude: f64,
    pub noise: f64,
    pub color_jitter: f64,
    pub min_area: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let ugf = UgfConfig::default();
        let rf = RefineConfig::default();
        let unc = UncLossConfig::default();
        let w = LossWeights::default();
        let sc = SceneConfig::default();
        let opt = AdamWConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data_seed: 2024,
            n_train: 600,
            n_val: 100,
            n_test: 200,
            epochs: 30,
            batch_size: 16,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            poly_power: 0.9,
            dtype: "f32".into(),
            use_ugf: true,
            use_udlr: true,
            use_unc_loss: true,
            embed_width: bb.embed_width,
            stem_channels: bb.stem_channels,
            stage_channels: bb.stage_channels,
            convs_per_stage: bb.convs_per_stage,
            interaction_layers: bb.interaction_layers,
            heads: bb.heads,
            ffn_mult: bb.ffn_mult,
            ugf_heads: ugf.heads,
            ugf_dropout: ugf.dropout,
            tau: rf.tau,
            temperature: rf.temperature,
            mask_blur: rf.mask_blur,
            refine_hidden: rf.hidden,
            delta: unc.delta,
            lambda_s: unc.lambda_s,
            eps: unc.eps,
            warmup_steps: unc.warmup_steps,
            target_blur: unc.target_blur,
            lambda_unc: w.lambda_unc,
            lambda_ref: w.lambda_ref,
            seg_loss: SegLossKind::default().to_string(),
            canvas_size: sc.size,
            min_distractors: sc.min_distractors,
            max_distractors: sc.max_distractors,
            similar_prob: sc.similar_prob,
            relation_prob: sc.relation_prob,
            max_same_type: sc.max_same_type,
            texture_amplitude: sc.texture_amplitude,
            noise: sc.noise,
            color_jitter: sc.color_jitter,
            min_area: sc.min_area,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    /// Applies `key=value` overrides using the same parser as the file.
    pub fn with_overrides(&self, pairs: &[String]) -> Result<Self> {
        if pairs.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml()).map_err(config_err)?;
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| config_err(format!("override {pair:?} is not key=value")))?;
            let k = k.trim();
            if !table.contains_key(k) {
                return Err(config_err(format!("unknown config key {k:?}")));
            }
            let v = v.trim();
            let value: toml::Value = match toml::from_str::<toml::Table>(&format!("x = {v}")) {
                Ok(mut t) => t.remove("x").unwrap(),
                Err(_) => toml::Value::String(v.to_string()),
            };
            table.insert(k.to_string(), value);
        }
        Self::from_toml(&toml::to_string(&table).map_err(config_err)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n_train == 0 {
            return Err(config_err("epochs, batch_size and n_train must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.poly_power >= 0.0) {
            return Err(config_err("lr must be > 0; weight_decay and poly_power >= 0"));
        }
        self.dtype()?;
        self.model_config()?.validate()?;
        self.scene_config().validate()?;
        Ok(())
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(config_err(format!("dtype must be f32 or f64, got {other:?}"))),
        }
    }

    pub fn flags(&self) -> Flags {
        Flags {
            use_ugf: self.use_ugf,
            use_udlr: self.use_udlr,
            use_unc_loss: self.use_unc_loss,
        }
    }

    pub fn with_flags(&self, flags: Flags) -> Self {
        Self {
            use_ugf: flags.use_ugf,
            use_udlr: flags.use_udlr,
            use_unc_loss: flags.use_unc_loss,
            ..self.clone()
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            backbone: BackboneConfig {
                embed_width: self.embed_width,
                stem_channels: self.stem_channels,
                stage_channels: self.stage_channels,
                convs_per_stage: self.convs_per_stage,
                interaction_layers: self.interaction_layers,
                heads: self.heads,
                ffn_mult: self.ffn_mult,
                ..Default::default()
            },
            ugf: UgfConfig {
                heads: self.ugf_heads,
                dropout: self.ugf_dropout,
            },
            refine: RefineConfig {
                tau: self.tau,
                temperature: self.temperature,
                mask_blur: self.mask_blur,
                hidden: self.refine_hidden,
            },
            unc: UncLossConfig {
                delta: self.delta,
                lambda_s: self.lambda_s,
                eps: self.eps,
                warmup_steps: self.warmup_steps,
                target_blur: self.target_blur,
            },
            weights: LossWeights {
                lambda_unc: self.lambda_unc,
                lambda_ref: self.lambda_ref,
            },
            seg_loss: self.seg_loss.parse().map_err(config_err)?,
            flags: self.flags(),
        })
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            size: self.canvas_size,
            min_distractors: self.min_distractors,
            max_distractors: self.max_distractors,
            similar_prob: self.similar_prob,
            relation_prob: self.relation_prob,
            max_same_type: self.max_same_type,
            texture_amplitude: self.texture_amplitude,
            noise: self.noise,
            color_jitter: self.color_jitter,
            min_area: self.min_area,
            ..Default::default()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.batch_size)
    }

    /// Hex SHA-256 of the canonical config text and [`CODE_VERSION`].
    pub fn hash(&self) -> String {
        config_hash(&self.to_toml())
    }
}

pub fn config_hash(config_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(CODE_VERSION.as_bytes());
    h.update([0u8]);
    h.update(config_text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn partial_files_and_overrides() {
        let cfg = RunConfig::from_toml("schema_version = 1\nepochs = 3\nuse_ugf = false\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(!cfg.use_ugf && cfg.use_udlr);
        let o = cfg
            .with_overrides(&["lr=0.01".into(), "seg_loss=bce".into(), "stage_channels=[8,8,8,8]".into()])
            .unwrap();
        assert_eq!(o.lr, 0.01);
        assert_eq!(o.seg_loss, "bce");
        assert_eq!(o.stage_channels, [8; 4]);
        assert_ne!(o.hash(), cfg.hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::from_toml("epoch = 3").is_err());
        assert!(RunConfig::from_toml("schema_version = 9").is_err());
        assert!(RunConfig::from_toml("dtype = \"f16\"").is_err());
        assert!(RunConfig::from_toml("canvas_size = 48").is_err());
        assert!(RunConfig::from_toml("seg_loss = \"focal\"").is_err());
        assert!(RunConfig::default().with_overrides(&["nope=1".into()]).is_err());
    }
}
