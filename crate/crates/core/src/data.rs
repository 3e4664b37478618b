//! Seeded synthetic bimodal classification tasks.
//!
//! Every instance has a latent group `g` and a latent pattern `p`. The
//! complementary input is a noisy copy of the group's unit vector; the main
//! input is a token sequence drawn from pattern `p`'s slice of the
//! vocabulary. The single-label target is `(p + g) mod C`, so with `G` a
//! multiple of `C` neither modality alone beats chance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Single,
    Multilabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    pub num_groups: usize,
    pub num_classes: usize,
    pub comp_dim: usize,
    pub comp_noise: f64,
    /// Vocabulary slice owned by each pattern; the main vocabulary is
    /// `num_classes * tokens_per_class`.
    pub tokens_per_class: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub label_mode: LabelMode,
    /// Tag count in multilabel mode.
    pub num_tags: usize,
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_groups < 2 || self.num_classes < 2 {
            return Err(Error::Config("num_groups and num_classes must be at least 2".into()));
        }
        if self.comp_dim == 0 || self.tokens_per_class == 0 || self.seq_len == 0 {
            return Err(Error::Config("comp_dim, tokens_per_class and seq_len must be at least 1".into()));
        }
        if self.comp_noise.is_nan() || self.comp_noise < 0.0 {
            return Err(Error::Config("comp_noise must be non-negative".into()));
        }
        if self.label_mode == LabelMode::Multilabel && self.num_tags == 0 {
            return Err(Error::Config("multilabel mode needs num_tags >= 1".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.num_classes * self.tokens_per_class
    }

    /// Output width of a classifier for this task.
    pub fn num_outputs(&self) -> usize {
        match self.label_mode {
            LabelMode::Single => self.num_classes,
            LabelMode::Multilabel => self.num_tags,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Tags(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub group: usize,
    pub pattern: usize,
    pub main_tokens: Vec<usize>,
    pub comp: Vec<f64>,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SyntheticTaskConfig,
    /// Unit vector per group.
    pub group_means: Vec<Vec<f64>>,
    /// `tag_probs[g][m]`, multilabel mode only.
    pub tag_probs: Vec<Vec<f64>>,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Dataset {
    pub fn generate(config: &SyntheticTaskConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let group_means: Vec<Vec<f64>> = (0..config.num_groups)
            .map(|_| {
                let v: Vec<f64> = (0..config.comp_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let tag_probs: Vec<Vec<f64>> = match config.label_mode {
            LabelMode::Single => Vec::new(),
            LabelMode::Multilabel => (0..config.num_groups)
                .map(|_| {
                    (0..config.num_tags)
                        .map(|_| if rng.gen_bool(0.5) { 0.9 } else { 0.1 })
                        .collect()
                })
                .collect(),
        };
        let noise = Normal::new(0.0, config.comp_noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut next_id = 0;
        let mut draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Instance> {
            (0..n)
                .map(|_| {
                    let group = rng.gen_range(0..config.num_groups);
                    let pattern = rng.gen_range(0..config.num_classes);
                    let comp = group_means[group]
                        .iter()
                        .map(|&m| if config.comp_noise > 0.0 { m + noise.sample(rng) } else { m })
                        .collect();
                    let base = pattern * config.tokens_per_class;
                    let main_tokens = (0..config.seq_len)
                        .map(|_| base + rng.gen_range(0..config.tokens_per_class))
                        .collect();
                    let target = match config.label_mode {
                        LabelMode::Single => Target::Class((pattern + group) % config.num_classes),
                        LabelMode::Multilabel => {
                            Target::Tags(tag_probs[group].iter().map(|&q| rng.gen_bool(q)).collect())
                        }
                    };
                    let id = next_id;
                    next_id += 1;
                    Instance {
                        id,
                        group,
                        pattern,
                        main_tokens,
                        comp,
                        target,
                    }
                })
                .collect()
        };
        let train = draw(config.train_size, &mut rng);
        let val = draw(config.val_size, &mut rng);
        let test = draw(config.test_size, &mut rng);
        Ok(Dataset {
            config: config.clone(),
            group_means,
            tag_probs,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Keeps only the first `n` training instances (few-shot sweeps).
    pub fn truncate_train(&mut self, n: usize) {
        self.train.truncate(n);
    }

    /// Canonical byte encoding of every instance, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for inst in self.train.iter().chain(&self.val).chain(&self.test) {
            for v in [inst.id, inst.group, inst.pattern] {
                out.extend_from_slice(&(v as u64).to_le_bytes());
            }
            for &t in &inst.main_tokens {
                out.extend_from_slice(&(t as u64).to_le_bytes());
            }
            for &c in &inst.comp {
                out.extend_from_slice(&c.to_le_bytes());
            }
            match &inst.target {
                Target::Class(c) => out.extend_from_slice(&(*c as u64).to_le_bytes()),
                Target::Tags(tags) => out.extend(tags.iter().map(|&b| b as u8)),
            }
        }
        out
    }
}

/// Shuffled mini-batches over `instances`.
pub fn batches<'a>(instances: &'a [Instance], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<&'a Instance>> {
    let mut order: Vec<&Instance> = instances.iter().collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[&Instance]>::to_vec).collect()
}
