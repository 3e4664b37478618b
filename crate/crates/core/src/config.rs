//! Flat run configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMode, SyntheticTaskConfig};
use crate::encoder::{EncoderConfig, InitScheme, InputKind};
use crate::error::{Error, Result};
use crate::fusion::{CompKind, CompTuning, FusionConfig, FusionMode};
use crate::prompts::{PromptConfig, PromptKind, RoutingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay from `lr` to zero over the run.
    #[default]
    Linear,
}

impl LrSchedule {
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

/// Every knob of a run. Defaults are the desk-scale setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: data, encoders, prompts and shuffling derive from it.
    pub seed: u64,
    pub precision: u32,
    pub out_dir: String,

    pub num_groups: usize,
    pub num_classes: usize,
    pub comp_input_dim: usize,
    pub comp_noise: f64,
    pub tokens_per_class: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub label_mode: LabelMode,
    pub num_tags: usize,

    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub init_std: f64,
    pub init_scheme: InitScheme,

    pub comp_kind: CompKind,
    pub comp_layers: usize,
    pub comp_hidden_dim: usize,
    pub comp_heads: usize,
    pub comp_ffn_dim: usize,
    pub comp_feature_dim: usize,
    pub comp_tuning: CompTuning,
    pub comp_prompt_len: usize,

    pub mode: FusionMode,
    pub prompts: Vec<PromptKind>,
    pub prompt_len: usize,
    pub num_experts: usize,
    pub temperature: f64,
    pub noise_std: f64,
    pub routing: RoutingMode,
    /// Defaults to `hidden_dim`.
    pub mapper_hidden: Option<usize>,
    pub share_mapper: bool,
    pub prompt_init_std: f64,

    pub epochs: usize,
    /// Stop after this many steps when nonzero.
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_imp: f64,
    pub gamma: f64,

    pub gradcheck_params: usize,
    pub gradcheck_batch: usize,
    pub gradcheck_step: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: 32,
            out_dir: "runs/mope".into(),

            num_groups: 4,
            num_classes: 4,
            comp_input_dim: 16,
            comp_noise: 0.1,
            tokens_per_class: 8,
            seq_len: 8,
            train_size: 8000,
            val_size: 500,
            test_size: 1000,
            label_mode: LabelMode::Single,
            num_tags: 0,

            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            init_std: 0.02,
            init_scheme: InitScheme::FanIn,

            comp_kind: CompKind::Transformer,
            comp_layers: 2,
            comp_hidden_dim: 32,
            comp_heads: 4,
            comp_ffn_dim: 64,
            comp_feature_dim: 4,
            comp_tuning: CompTuning::Prompted,
            comp_prompt_len: 2,

            mode: FusionMode::Fused,
            prompts: PromptKind::ALL.to_vec(),
            prompt_len: 6,
            num_experts: 8,
            temperature: 0.1,
            noise_std: 0.1,
            routing: RoutingMode::Dense,
            mapper_hidden: None,
            share_mapper: false,
            prompt_init_std: 0.02,

            epochs: 4,
            max_steps: 0,
            batch_size: 32,
            eval_batch_size: 256,
            lr: 3e-3,
            lr_schedule: LrSchedule::Linear,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            lambda_imp: 1.0,
            gamma: 0.05,

            gradcheck_params: 240,
            gradcheck_batch: 4,
            gradcheck_step: 1e-5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults filled in, ready to echo.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.mapper_hidden.get_or_insert(cfg.hidden_dim);
        cfg
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.resolved()).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("comp_layers", self.comp_layers),
            ("comp_hidden_dim", self.comp_hidden_dim),
            ("comp_heads", self.comp_heads),
            ("comp_ffn_dim", self.comp_ffn_dim),
            ("comp_feature_dim", self.comp_feature_dim),
            ("prompt_len", self.prompt_len),
            ("num_experts", self.num_experts),
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("gradcheck_batch", self.gradcheck_batch),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::Config(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(Error::Config("epochs or max_steps must be positive".into()));
        }
        for (key, v) in [("lr", self.lr), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be a positive number")));
            }
        }
        for (key, v) in [
            ("lambda_imp", self.lambda_imp),
            ("gamma", self.gamma),
            ("noise_std", self.noise_std),
            ("weight_decay", self.weight_decay),
            ("comp_noise", self.comp_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be non-negative")));
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{key} must lie in [0, 1)")));
            }
        }
        if self.gradcheck_step.is_nan() || self.gradcheck_step <= 0.0 {
            return Err(Error::Config("gradcheck_step must be positive".into()));
        }
        if self.mapper_hidden == Some(0) {
            return Err(Error::Config("mapper_hidden must be positive".into()));
        }
        self.task()?.validate()?;
        self.fusion()?.validate()
    }

    pub fn task(&self) -> Result<SyntheticTaskConfig> {
        Ok(SyntheticTaskConfig {
            num_groups: self.num_groups,
            num_classes: self.num_classes,
            comp_dim: self.comp_input_dim,
            comp_noise: self.comp_noise,
            tokens_per_class: self.tokens_per_class,
            seq_len: self.seq_len,
            train_size: self.train_size,
            val_size: self.val_size,
            test_size: self.test_size,
            seed: self.seed,
            label_mode: self.label_mode,
            num_tags: self.num_tags,
        })
    }

    pub fn fusion(&self) -> Result<FusionConfig> {
        let task = self.task()?;
        let comp_rows = if self.comp_feature_dim == 0 {
            0
        } else {
            self.comp_input_dim.div_ceil(self.comp_feature_dim)
        };
        let main = EncoderConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            input: InputKind::Tokens {
                vocab_size: task.vocab_size(),
            },
            max_seq_len: self.seq_len,
            seed: self.seed.wrapping_add(1),
            init_std: self.init_std,
            init_scheme: self.init_scheme,
        };
        let comp = EncoderConfig {
            num_layers: self.comp_layers,
            hidden_dim: self.comp_hidden_dim,
            num_heads: self.comp_heads,
            ffn_dim: self.comp_ffn_dim,
            input: InputKind::Features {
                feature_dim: self.comp_feature_dim,
            },
            max_seq_len: comp_rows.max(1),
            seed: self.seed.wrapping_add(2),
            init_std: self.init_std,
            init_scheme: self.init_scheme,
        };
        let prompt = PromptConfig {
            prompt_len: self.prompt_len,
            num_experts: self.num_experts,
            temperature: self.temperature,
            noise_std: self.noise_std,
            routing: self.routing,
            enabled: self.prompts.clone(),
            comp_dim: self.comp_hidden_dim,
            mapper_hidden: self.mapper_hidden.unwrap_or(self.hidden_dim),
            share_mapper: self.share_mapper,
            init_std: self.prompt_init_std,
        };
        Ok(FusionConfig {
            main,
            comp,
            comp_kind: self.comp_kind,
            comp_tuning: self.comp_tuning,
            comp_prompt_len: self.comp_prompt_len,
            comp_input_dim: self.comp_input_dim,
            prompt,
            mode: self.mode,
            label_mode: self.label_mode,
            num_outputs: task.num_outputs(),
            seed: self.seed.wrapping_add(3),
        })
    }

    /// Seed for batch shuffling and routing noise.
    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    /// Optimizer steps for a training split of `train_len` instances.
    pub fn total_steps(&self, train_len: usize) -> usize {
        let by_epochs = self.epochs * train_len.div_ceil(self.batch_size);
        match (self.epochs, self.max_steps) {
            (0, m) => m,
            (_, 0) => by_epochs,
            (_, m) => m.min(by_epochs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg.resolved());
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_and_invalid_keys_are_named() {
        let err = RunConfig::from_toml("num_expert = 3").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("num_expert"), "{err}");
        let err = RunConfig::from_toml("num_experts = 0").unwrap_err();
        assert!(err.to_string().contains("num_experts"), "{err}");
        let err = RunConfig::from_toml("precision = 16").unwrap_err();
        assert!(err.to_string().contains("precision"), "{err}");
        let err = RunConfig::from_toml("routing = \"top3\"").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn linear_schedule_decays_to_zero() {
        assert_eq!(LrSchedule::Linear.at(1.0, 0, 10), 1.0);
        assert_eq!(LrSchedule::Linear.at(1.0, 5, 10), 0.5);
        assert_eq!(LrSchedule::Constant.at(1.0, 9, 10), 1.0);
    }

    #[test]
    fn total_steps_respects_cap() {
        let cfg = RunConfig {
            batch_size: 32,
            epochs: 3,
            ..RunConfig::default()
        };
        assert_eq!(cfg.total_steps(100), 12);
        assert_eq!(RunConfig { max_steps: 5, ..cfg.clone() }.total_steps(100), 5);
        assert_eq!(RunConfig { epochs: 0, max_steps: 50, ..cfg }.total_steps(100), 50);
    }
}
