//! Static, dynamic and mapped prompts for one prompted layer, and the
//! mixture-of-prompt-experts router that builds the dynamic prompt.
//!
//! Per instance the block handed to a layer is, in order: the static prompt
//! (`l` rows, shared by every instance), the dynamic prompt (`l` rows, a
//! routing-weighted sum of `k` expert prompts) and the mapped prompt (one
//! row produced by a small MLP from the complementary feature). Disabled
//! kinds contribute no rows.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Static,
    Dynamic,
    Mapped,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::Static, PromptKind::Dynamic, PromptKind::Mapped];

    pub fn short(self) -> &'static str {
        match self {
            PromptKind::Static => "s",
            PromptKind::Dynamic => "d",
            PromptKind::Mapped => "m",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    Dense,
    SparseTop1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub prompt_len: usize,
    pub num_experts: usize,
    pub temperature: f64,
    pub noise_std: f64,
    pub routing: RoutingMode,
    pub enabled: Vec<PromptKind>,
    pub comp_dim: usize,
    pub mapper_hidden: usize,
    pub share_mapper: bool,
    pub init_std: f64,
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be at least 1".into()));
        }
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if self.enabled.is_empty() {
            return Err(Error::Config("at least one prompt kind must be enabled".into()));
        }
        if self.comp_dim == 0 || self.mapper_hidden == 0 {
            return Err(Error::Config("comp_dim and mapper_hidden must be at least 1".into()));
        }
        Ok(())
    }

    pub fn has(&self, kind: PromptKind) -> bool {
        self.enabled.contains(&kind)
    }

    /// Prompt rows each instance contributes to a layer.
    pub fn rows_per_instance(&self) -> usize {
        let l = self.prompt_len;
        l * usize::from(self.has(PromptKind::Static))
            + l * usize::from(self.has(PromptKind::Dynamic))
            + usize::from(self.has(PromptKind::Mapped))
    }
}

/// Two-layer GELU MLP from the complementary feature to one prompt row.
#[derive(Debug, Clone, Copy)]
pub struct Mapper {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mapper {
    pub fn register<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        comp_dim: usize,
        hidden: usize,
        out_dim: usize,
        std: f64,
    ) -> Self {
        Mapper {
            w1: store.register(format!("{prefix}.w1"), truncated_normal(rng, &[comp_dim, hidden], std), false),
            b1: store.register(format!("{prefix}.b1"), Tensor::zeros(&[hidden]), false),
            w2: store.register(format!("{prefix}.w2"), truncated_normal(rng, &[hidden, out_dim], std), false),
            b2: store.register(format!("{prefix}.b2"), Tensor::zeros(&[out_dim]), false),
        }
    }

    /// `W2 gelu(W1 psi + b1) + b2` for each row of `psi`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, psi: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let h = g.matmul(psi, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let out = g.matmul(h, w2)?;
        g.add_row(out, b2)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Router {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Trainable prompt parameters of one prompted layer.
#[derive(Debug, Clone)]
pub struct LayerPromptModule {
    pub layer: usize,
    pub static_prompt: Option<ParamId>,
    /// `[k, l, d]`
    pub experts: Option<ParamId>,
    pub router: Option<Router>,
    pub mapper: Option<Mapper>,
    config: PromptConfig,
    hidden_dim: usize,
}

/// Routing distribution for one instance at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub layer: usize,
    /// Softmax probabilities before gating.
    pub scores: Vec<f64>,
    /// Weights actually applied to the experts.
    pub gated: Vec<f64>,
    pub entropy_bits: f64,
    pub argmax_expert: usize,
}

/// Graph nodes produced by routing a batch.
#[derive(Debug, Clone, Copy)]
pub struct RoutingVars {
    /// `[batch, k]` probabilities from the (possibly noisy) logits.
    pub scores: Var,
    /// `[batch, k]` weights applied to the experts.
    pub gated: Var,
    /// `[batch, k]` probabilities from noiseless logits.
    pub clean_scores: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AssembledPrompts {
    /// `[batch * rows, d]`, one contiguous block per instance.
    pub block: Var,
    pub rows: usize,
    pub routing: Option<RoutingVars>,
}

impl LayerPromptModule {
    /// Registers the enabled components for `layer`. A shared mapper, when
    /// given, is reused instead of creating a per-layer one.
    pub fn new<T: Float, R: Rng>(
        config: &PromptConfig,
        hidden_dim: usize,
        layer: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
        shared_mapper: Option<Mapper>,
    ) -> Result<Self> {
        config.validate()?;
        let (l, d, k, std) = (config.prompt_len, hidden_dim, config.num_experts, config.init_std);
        let prefix = format!("prompt.layer{layer}");
        let static_prompt = config
            .has(PromptKind::Static)
            .then(|| store.register(format!("{prefix}.static"), truncated_normal(rng, &[l, d], std), false));
        let (experts, router) = if config.has(PromptKind::Dynamic) {
            let experts = store.register(format!("{prefix}.experts"), truncated_normal(rng, &[k, l, d], std), false);
            let router = Router {
                weight: store.register(
                    format!("{prefix}.router.weight"),
                    truncated_normal(rng, &[config.comp_dim, k], std),
                    false,
                ),
                bias: store.register(format!("{prefix}.router.bias"), Tensor::zeros(&[k]), false),
            };
            (Some(experts), Some(router))
        } else {
            (None, None)
        };
        let mapper = if config.has(PromptKind::Mapped) {
            Some(shared_mapper.unwrap_or_else(|| {
                Mapper::register(store, rng, &format!("{prefix}.mapper"), config.comp_dim, config.mapper_hidden, d, std)
            }))
        } else {
            None
        };
        Ok(LayerPromptModule {
            layer,
            static_prompt,
            experts,
            router,
            mapper,
            config: config.clone(),
            hidden_dim,
        })
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.static_prompt.into_iter().chain(self.experts).collect();
        if let Some(r) = self.router {
            ids.extend([r.weight, r.bias]);
        }
        if let Some(m) = self.mapper {
            ids.extend(m.param_ids());
        }
        ids
    }

    fn check_psi<T: Float>(&self, g: &Graph<T>, psi: Var) -> Result<usize> {
        let t = g.value(psi);
        let (batch, cols) = t.matrix_dims();
        if t.shape().len() != 2 || cols != self.config.comp_dim {
            return Err(Error::Shape {
                op: "complementary feature",
                lhs: t.shape().to_vec(),
                rhs: vec![batch, self.config.comp_dim],
            });
        }
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite complementary feature".into()));
        }
        Ok(batch)
    }

    /// Routing scores for a batch of complementary features `[batch, d_c]`.
    ///
    /// Logits are `(psi W_r + b) / tau`; during training Gaussian noise with
    /// `noise_std` is added to them before the softmax. Sparse mode keeps
    /// only the top-1 probability (not renormalized).
    pub fn route_batch<T: Float, R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        psi: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<RoutingVars> {
        let router = self
            .router
            .ok_or_else(|| Error::Config("routing requires the dynamic prompt".into()))?;
        let batch = self.check_psi(g, psi)?;
        let k = self.config.num_experts;
        let (w, b) = (g.param(store, router.weight), g.param(store, router.bias));
        let logits = g.matmul(psi, w)?;
        let logits = g.add_row(logits, b)?;
        let logits = g.scale(logits, T::one() / T::c(self.config.temperature));
        let clean_scores = g.softmax(logits, 1)?;
        let scores = if training && self.config.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.config.noise_std).expect("validated noise_std");
            let noise = Tensor::from_fn(&[batch, k], |_| T::c(normal.sample(rng)));
            let noise = g.constant(noise);
            let noisy = g.add(logits, noise)?;
            g.softmax(noisy, 1)?
        } else {
            clean_scores
        };
        let gated = match self.config.routing {
            RoutingMode::Dense => scores,
            RoutingMode::SparseTop1 => {
                let mut mask = Tensor::zeros(&[batch, k]);
                for (b, row) in g.value(scores).data().chunks(k).enumerate() {
                    mask.data_mut()[b * k + argmax(row)] = T::one();
                }
                let mask = g.constant(mask);
                g.mul(scores, mask)?
            }
        };
        Ok(RoutingVars {
            scores,
            gated,
            clean_scores,
        })
    }

    /// `sum_i gated_i E_i` per instance: `[batch, k] -> [batch * l, d]`.
    pub fn synthesize_dynamic<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, gated: Var) -> Result<Var> {
        let experts = self
            .experts
            .ok_or_else(|| Error::Config("dynamic prompt is disabled".into()))?;
        let (l, d, k) = (self.config.prompt_len, self.hidden_dim, self.config.num_experts);
        let batch = g.value(gated).matrix_dims().0;
        let e = g.param(store, experts);
        let e = g.reshape(e, &[k, l * d])?;
        let mixed = g.matmul(gated, e)?;
        g.reshape(mixed, &[batch * l, d])
    }

    /// Mapped prompt rows `[batch, d]`.
    pub fn map_prompt<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, psi: Var) -> Result<Var> {
        let mapper = self
            .mapper
            .ok_or_else(|| Error::Config("mapped prompt is disabled".into()))?;
        self.check_psi(g, psi)?;
        mapper.forward(g, store, psi)
    }

    /// Builds the per-instance prompt block `[P_s, P_d, P_m]` for a batch.
    pub fn assemble<T: Float, R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        psi: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<AssembledPrompts> {
        self.config.validate()?;
        let batch = self.check_psi(g, psi)?;
        let l = self.config.prompt_len;
        let mut parts = Vec::new();
        // (part index, rows per instance) in sequence order.
        let mut layout = Vec::new();
        if let Some(ps) = self.static_prompt {
            let ps = g.param(store, ps);
            let idx: Vec<usize> = (0..batch).flat_map(|_| 0..l).collect();
            parts.push(g.select_rows(ps, &idx)?);
            layout.push(l);
        }
        let mut routing = None;
        if self.experts.is_some() {
            let r = self.route_batch(g, store, psi, training, rng)?;
            parts.push(self.synthesize_dynamic(g, store, r.gated)?);
            layout.push(l);
            routing = Some(r);
        }
        if self.mapper.is_some() {
            parts.push(self.map_prompt(g, store, psi)?);
            layout.push(1);
        }
        let rows: usize = layout.iter().sum();
        let block = if parts.len() == 1 {
            parts[0]
        } else {
            let joined = g.concat_rows(&parts)?;
            let mut order = Vec::with_capacity(batch * rows);
            for b in 0..batch {
                let mut base = 0;
                for &n in &layout {
                    order.extend((0..n).map(|j| base + b * n + j));
                    base += batch * n;
                }
            }
            g.select_rows(joined, &order)?
        };
        Ok(AssembledPrompts { block, rows, routing })
    }

    /// Per-instance records read back from a routed batch.
    pub fn records<T: Float>(&self, g: &Graph<T>, routing: &RoutingVars) -> Vec<RoutingRecord> {
        let k = self.config.num_experts;
        let scores = g.value(routing.scores).to_f64_vec();
        let gated = g.value(routing.gated).to_f64_vec();
        scores
            .chunks(k)
            .zip(gated.chunks(k))
            .map(|(s, gt)| RoutingRecord {
                layer: self.layer,
                scores: s.to_vec(),
                gated: gt.to_vec(),
                entropy_bits: routing_entropy(s),
                argmax_expert: argmax(s),
            })
            .collect()
    }

    /// Routes a single complementary feature outside any training graph.
    pub fn route<T: Float, R: Rng>(
        &self,
        store: &ParamStore<T>,
        psi: &[T],
        training: bool,
        rng: &mut R,
    ) -> Result<RoutingRecord> {
        let mut g = Graph::new();
        let psi = g.constant(Tensor::new(vec![1, psi.len()], psi.to_vec())?);
        let vars = self.route_batch(&mut g, store, psi, training, rng)?;
        Ok(self.records(&g, &vars).remove(0))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn routing_entropy(scores: &[f64]) -> f64 {
    let h: f64 = scores.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    h.max(0.0)
}
