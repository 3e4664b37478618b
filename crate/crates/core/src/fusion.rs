//! Sequential fusion: encode the complementary modality, use its pooled
//! feature to condition the prompts of every main-encoder layer, classify
//! from the main [CLS] feature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{Instance, LabelMode, Target};
use crate::encoder::{EncodeTrace, Encoder, EncoderConfig, EncoderInput, InputKind};
use crate::error::{Error, Result};
use crate::metrics::{multilabel_report, single_label_report, MetricReport};
use crate::optim::AdamW;
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::prompts::{LayerPromptModule, Mapper, PromptConfig, PromptKind, RoutingRecord, RoutingVars};
use crate::tensor::{Float, Tensor};

/// How the complementary feature is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompKind {
    /// Final-layer [CLS] of a frozen transformer.
    #[default]
    Transformer,
    /// Mean of frozen linear embeddings of the input rows.
    BagOfEmbeddings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompTuning {
    /// Body frozen, nothing trained on the complementary side.
    Frozen,
    /// Body frozen, one static prompt block per layer trained.
    #[default]
    Prompted,
    /// Body trainable (baseline only).
    Finetune,
}

/// Which modalities reach the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Fused,
    /// Main encoder with static prompts only; the complementary input is ignored.
    MainOnly,
    /// Classifier on the complementary feature; the main input is ignored.
    CompOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub main: EncoderConfig,
    /// Its `hidden_dim` is the complementary feature width.
    pub comp: EncoderConfig,
    pub comp_kind: CompKind,
    pub comp_tuning: CompTuning,
    pub comp_prompt_len: usize,
    /// Length of the raw complementary vector; it is cut into rows of the
    /// complementary encoder's feature width.
    pub comp_input_dim: usize,
    pub prompt: PromptConfig,
    pub mode: FusionMode,
    pub label_mode: LabelMode,
    pub num_outputs: usize,
    /// Seed for prompt, mapper, router and head initialization.
    pub seed: u64,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.main.validate()?;
        self.comp.validate()?;
        self.prompt.validate()?;
        if !matches!(self.main.input, InputKind::Tokens { .. }) {
            return Err(Error::Config("main encoder must take token input".into()));
        }
        let InputKind::Features { feature_dim } = self.comp.input else {
            return Err(Error::Config("complementary encoder must take feature input".into()));
        };
        if self.comp_input_dim == 0 || !self.comp_input_dim.is_multiple_of(feature_dim) {
            return Err(Error::Config(format!(
                "comp_input_dim {} is not a multiple of the complementary row width {feature_dim}",
                self.comp_input_dim
            )));
        }
        if self.comp_input_dim / feature_dim > self.comp.max_seq_len {
            return Err(Error::Config("complementary rows exceed the complementary max_seq_len".into()));
        }
        if self.prompt.comp_dim != self.comp.hidden_dim {
            return Err(Error::Config(format!(
                "prompt comp_dim {} does not match complementary feature width {}",
                self.prompt.comp_dim, self.comp.hidden_dim
            )));
        }
        if self.mode == FusionMode::MainOnly && self.prompt.enabled != [PromptKind::Static] {
            return Err(Error::Config("main_only mode allows only the static prompt".into()));
        }
        if self.comp_tuning == CompTuning::Prompted && self.comp_prompt_len == 0 {
            return Err(Error::Config("comp_prompt_len must be at least 1 when prompting".into()));
        }
        if self.num_outputs == 0 {
            return Err(Error::Config("num_outputs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn comp_rows(&self) -> usize {
        match self.comp.input {
            InputKind::Features { feature_dim } => self.comp_input_dim / feature_dim,
            InputKind::Tokens { .. } => 0,
        }
    }
}

#[derive(Debug, Clone)]
enum CompEncoder {
    Transformer(Encoder),
    Bag { proj: ParamId, bias: ParamId },
}

/// Importance of every expert at one layer over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceStats {
    pub layer: usize,
    pub importance: Vec<f64>,
    pub cv: f64,
    pub cv_squared: f64,
}

impl ImportanceStats {
    /// Column sums of `scores` (`batch` rows of `k`) and their coefficient
    /// of variation, using the population standard deviation.
    pub fn from_scores(layer: usize, scores: &[f64], k: usize) -> Result<Self> {
        if k == 0 || scores.is_empty() || !scores.len().is_multiple_of(k) {
            return Err(Error::Contract("importance needs at least one full score row".into()));
        }
        let mut importance = vec![0.0; k];
        for row in scores.chunks(k) {
            for (acc, &s) in importance.iter_mut().zip(row) {
                *acc += s;
            }
        }
        let mean = importance.iter().sum::<f64>() / k as f64;
        if mean.is_nan() || mean <= 0.0 {
            return Err(Error::Numeric("zero mean expert importance".into()));
        }
        let var = importance.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let cv_squared = var / (mean * mean);
        Ok(ImportanceStats {
            layer,
            importance,
            cv: cv_squared.sqrt(),
            cv_squared,
        })
    }
}

/// `(value, applied)`: the layer-averaged squared CV, and the part of it
/// that carries gradient (layers whose CV reaches `gamma`).
pub fn importance_loss(stats: &[ImportanceStats], gamma: f64) -> (f64, f64) {
    if stats.is_empty() {
        return (0.0, 0.0);
    }
    let n = stats.len() as f64;
    let value = stats.iter().map(|s| s.cv_squared).sum::<f64>() / n;
    let applied = stats.iter().filter(|s| s.cv >= gamma).map(|s| s.cv_squared).sum::<f64>() / n;
    (value, applied)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub importance_loss: f64,
    pub applied_importance: f64,
    pub total: f64,
    pub lambda_imp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
}

/// Graph and handles from one forward pass over a batch.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    /// `[batch, num_outputs]`
    pub logits: Var,
    /// `[batch, d_c]`, absent in main-only mode.
    pub psi: Option<Var>,
    /// Prompt block handed to each main layer.
    pub prompt_blocks: Vec<Var>,
    /// Routing per main layer (`None` where the dynamic prompt is off).
    pub routing: Vec<Option<RoutingVars>>,
    pub main_trace: EncodeTrace,
}

/// Everything a training step reports.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub importance: Vec<ImportanceStats>,
    /// Mean routing entropy (bits) over instances and routed layers.
    pub mean_entropy: Option<f64>,
    /// Mean routing entropy per routed layer, in layer order.
    pub layer_entropy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionModel<T> {
    config: FusionConfig,
    store: ParamStore<T>,
    main: Encoder,
    comp: CompEncoder,
    comp_prompts: Vec<ParamId>,
    layers: Vec<LayerPromptModule>,
    head: (ParamId, ParamId),
}

impl<T: Float> FusionModel<T> {
    pub fn new(config: &FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let main = Encoder::init_frozen(&config.main, &mut store, "main")?;
        let comp = match config.comp_kind {
            CompKind::Transformer => CompEncoder::Transformer(Encoder::init_frozen(&config.comp, &mut store, "comp")?),
            CompKind::BagOfEmbeddings => {
                let InputKind::Features { feature_dim } = config.comp.input else {
                    unreachable!("validated feature input");
                };
                let mut rng = ChaCha8Rng::seed_from_u64(config.comp.seed);
                let std = 1.0 / (feature_dim as f64).sqrt();
                CompEncoder::Bag {
                    proj: store.register(
                        "comp.bag.proj",
                        truncated_normal(&mut rng, &[feature_dim, config.comp.hidden_dim], std),
                        true,
                    ),
                    bias: store.register("comp.bag.bias", Tensor::zeros(&[config.comp.hidden_dim]), true),
                }
            }
        };
        if config.comp_tuning == CompTuning::Finetune {
            let ids: Vec<ParamId> = store
                .iter()
                .filter(|(_, p)| p.name.starts_with("comp."))
                .map(|(id, _)| id)
                .collect();
            for id in ids {
                store.set_frozen(id, false);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = config.prompt.init_std;
        let comp_prompts = match (&comp, config.comp_tuning) {
            (CompEncoder::Transformer(enc), CompTuning::Prompted) => (0..enc.num_layers())
                .map(|i| {
                    store.register(
                        format!("comp_prompt.layer{i}"),
                        truncated_normal(&mut rng, &[config.comp_prompt_len, config.comp.hidden_dim], std),
                        false,
                    )
                })
                .collect(),
            _ => Vec::new(),
        };

        let layers = if config.mode == FusionMode::CompOnly {
            Vec::new()
        } else {
            let shared = (config.prompt.share_mapper && config.prompt.has(PromptKind::Mapped)).then(|| {
                Mapper::register(
                    &mut store,
                    &mut rng,
                    "prompt.mapper",
                    config.prompt.comp_dim,
                    config.prompt.mapper_hidden,
                    config.main.hidden_dim,
                    std,
                )
            });
            (0..config.main.num_layers)
                .map(|i| LayerPromptModule::new(&config.prompt, config.main.hidden_dim, i, &mut store, &mut rng, shared))
                .collect::<Result<Vec<_>>>()?
        };

        let head_in = match config.mode {
            FusionMode::CompOnly => config.comp.hidden_dim,
            _ => config.main.hidden_dim,
        };
        let head = (
            store.register("head.weight", truncated_normal(&mut rng, &[head_in, config.num_outputs], std), false),
            store.register("head.bias", Tensor::zeros(&[config.num_outputs]), false),
        );
        Ok(FusionModel {
            config: config.clone(),
            store,
            main,
            comp,
            comp_prompts,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn layers(&self) -> &[LayerPromptModule] {
        &self.layers
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        self.head
    }

    pub fn comp_prompts(&self) -> &[ParamId] {
        &self.comp_prompts
    }

    pub fn count_params(&self) -> ParamCounts {
        let (trainable, frozen) = self.store.count();
        ParamCounts { trainable, frozen }
    }

    /// Checksums of the main and complementary encoder bodies.
    pub fn encoder_checksums(&self) -> (u64, u64) {
        (
            self.store.checksum_where(|p| p.name.starts_with("main.")),
            self.store.checksum_where(|p| p.name.starts_with("comp.")),
        )
    }

    /// Same model in another precision.
    pub fn cast<U: Float>(&self) -> FusionModel<U> {
        FusionModel {
            config: self.config.clone(),
            store: self.store.cast(),
            main: self.main.clone(),
            comp: self.comp.clone(),
            comp_prompts: self.comp_prompts.clone(),
            layers: self.layers.clone(),
            head: self.head,
        }
    }

    fn comp_features(&self, batch: &[&Instance]) -> Result<Vec<Tensor<T>>> {
        let rows = self.config.comp_rows();
        let width = self.config.comp_input_dim / rows;
        batch
            .iter()
            .map(|inst| {
                if inst.comp.len() != self.config.comp_input_dim {
                    return Err(Error::Config(format!(
                        "complementary input has {} values, model expects {}",
                        inst.comp.len(),
                        self.config.comp_input_dim
                    )));
                }
                Tensor::from_f64(&[rows, width], &inst.comp)
            })
            .collect()
    }

    /// Pooled complementary feature `[batch, d_c]`.
    fn encode_comp(&self, g: &mut Graph<T>, batch: &[&Instance]) -> Result<Var> {
        let features = self.comp_features(batch)?;
        let n = batch.len();
        match &self.comp {
            CompEncoder::Transformer(enc) => {
                let inputs: Vec<EncoderInput<'_, T>> = features.iter().map(EncoderInput::Features).collect();
                let mut trace = EncodeTrace::default();
                let out = enc.encode(
                    g,
                    &self.store,
                    &inputs,
                    |g, layer| match self.comp_prompts.get(layer) {
                        Some(&id) => {
                            let p = g.param(&self.store, id);
                            let idx: Vec<usize> = (0..n).flat_map(|_| 0..self.config.comp_prompt_len).collect();
                            g.select_rows(p, &idx).map(Some)
                        }
                        None => Ok(None),
                    },
                    &mut trace,
                )?;
                Ok(out.cls)
            }
            CompEncoder::Bag { proj, bias } => {
                let rows = self.config.comp_rows();
                let mut flat = Vec::new();
                for f in &features {
                    flat.extend_from_slice(f.data());
                }
                let width = self.config.comp_input_dim / rows;
                let x = g.constant(Tensor::new(vec![n * rows, width], flat)?);
                let (w, b) = (g.param(&self.store, *proj), g.param(&self.store, *bias));
                let e = g.matmul(x, w)?;
                let e = g.add_row(e, b)?;
                let inv = T::one() / T::c(rows as f64);
                let pool = Tensor::from_fn(&[n, n * rows], |i| {
                    let (r, c) = (i / (n * rows), i % (n * rows));
                    if c / rows == r {
                        inv
                    } else {
                        T::zero()
                    }
                });
                let pool = g.constant(pool);
                g.matmul(pool, e)
            }
        }
    }

    pub fn forward<R: Rng>(&self, batch: &[&Instance], training: bool, rng: &mut R) -> Result<ForwardPass<T>> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut g = Graph::new();
        let n = batch.len();
        let psi = match self.config.mode {
            FusionMode::MainOnly => None,
            _ => Some(self.encode_comp(&mut g, batch)?),
        };
        let mut prompt_blocks = Vec::new();
        let mut routing = Vec::new();
        let mut main_trace = EncodeTrace::default();
        let features = match self.config.mode {
            FusionMode::CompOnly => psi.expect("comp-only computes psi"),
            _ => {
                // Static-only prompting never reads psi; a zero stand-in keeps
                // one code path.
                let psi_in = match psi {
                    Some(p) => p,
                    None => g.constant(Tensor::zeros(&[n, self.config.prompt.comp_dim])),
                };
                let tokens: Vec<EncoderInput<'_, T>> =
                    batch.iter().map(|i| EncoderInput::Tokens(&i.main_tokens)).collect();
                let out = self.main.encode(
                    &mut g,
                    &self.store,
                    &tokens,
                    |g, layer| {
                        let assembled = self.layers[layer].assemble(g, &self.store, psi_in, training, rng)?;
                        prompt_blocks.push(assembled.block);
                        routing.push(assembled.routing);
                        Ok(Some(assembled.block))
                    },
                    &mut main_trace,
                )?;
                out.cls
            }
        };
        let (w, b) = (g.param(&self.store, self.head.0), g.param(&self.store, self.head.1));
        let logits = g.matmul(features, w)?;
        let logits = g.add_row(logits, b)?;
        Ok(ForwardPass {
            graph: g,
            logits,
            psi,
            prompt_blocks,
            routing,
            main_trace,
        })
    }

    /// Routing records per routed layer, one per instance.
    pub fn routing_records(&self, pass: &ForwardPass<T>) -> Vec<Vec<RoutingRecord>> {
        pass.routing
            .iter()
            .zip(&self.layers)
            .filter_map(|(r, m)| r.as_ref().map(|r| m.records(&pass.graph, r)))
            .collect()
    }

    /// Importance statistics from the noiseless scores of every routed layer.
    pub fn importance(&self, pass: &ForwardPass<T>) -> Result<Vec<ImportanceStats>> {
        let k = self.config.prompt.num_experts;
        pass.routing
            .iter()
            .enumerate()
            .filter_map(|(layer, r)| r.map(|r| (layer, r)))
            .map(|(layer, r)| ImportanceStats::from_scores(layer, &pass.graph.value(r.clean_scores).to_f64_vec(), k))
            .collect()
    }

    /// Adds the task loss and the thresholded importance loss to the graph.
    /// Returns the node to differentiate together with its breakdown.
    pub fn loss(
        &self,
        pass: &mut ForwardPass<T>,
        batch: &[&Instance],
        lambda_imp: f64,
        gamma: f64,
    ) -> Result<(Var, LossBreakdown, Vec<ImportanceStats>)> {
        let g = &mut pass.graph;
        let task = match self.config.label_mode {
            LabelMode::Single => {
                let targets = batch
                    .iter()
                    .map(|i| match i.target {
                        Target::Class(c) => Ok(c),
                        Target::Tags(_) => Err(Error::Input("multilabel target in single-label model".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                g.cross_entropy(pass.logits, &targets)?
            }
            LabelMode::Multilabel => {
                let mut flat = Vec::new();
                for inst in batch {
                    let Target::Tags(tags) = &inst.target else {
                        return Err(Error::Input("single-label target in multilabel model".into()));
                    };
                    flat.extend(tags.iter().map(|&t| if t { 1.0 } else { 0.0 }));
                }
                let targets = Tensor::from_f64(&[batch.len(), self.config.num_outputs], &flat)?;
                g.bce_with_logits(pass.logits, &targets)?
            }
        };
        let stats = self.importance(pass)?;
        let (value, applied) = importance_loss(&stats, gamma);
        let g = &mut pass.graph;
        let mut total = task;
        if lambda_imp > 0.0 && !stats.is_empty() {
            let routed: Vec<Var> = pass.routing.iter().flatten().map(|r| r.clean_scores).collect();
            let mut terms = Vec::new();
            for (r, s) in routed.iter().zip(&stats) {
                if s.cv < gamma {
                    continue;
                }
                let imp = g.sum_rows(*r);
                let mean = g.mean_all(imp);
                let centered = g.sub_scalar(imp, mean)?;
                let sq = g.square(centered)?;
                let var = g.mean_all(sq);
                let mean_sq = g.square(mean)?;
                terms.push(g.div(var, mean_sq)?);
            }
            if !terms.is_empty() {
                let mut sum = terms[0];
                for &t in &terms[1..] {
                    sum = g.add(sum, t)?;
                }
                let weight = T::c(lambda_imp / stats.len() as f64);
                let scaled = g.scale(sum, weight);
                total = g.add(task, scaled)?;
            }
        }
        let task_loss = g.value(task).item().as_f64();
        if !task_loss.is_finite() {
            return Err(Error::Numeric(format!("task loss is {task_loss}")));
        }
        let breakdown = LossBreakdown {
            task_loss,
            importance_loss: value,
            applied_importance: applied,
            total: task_loss + lambda_imp * applied,
            lambda_imp,
        };
        Ok((total, breakdown, stats))
    }

    /// Forward, backward and one optimizer update on trainable parameters.
    pub fn train_step<R: Rng>(
        &mut self,
        batch: &[&Instance],
        optimizer: &mut AdamW,
        lambda_imp: f64,
        gamma: f64,
        rng: &mut R,
    ) -> Result<StepReport> {
        let mut pass = self.forward(batch, true, rng)?;
        let (total, loss, importance) = self.loss(&mut pass, batch, lambda_imp, gamma)?;
        let records = self.routing_records(&pass);
        let layer_entropy: Vec<f64> = records
            .iter()
            .map(|rs| rs.iter().map(|r| r.entropy_bits).sum::<f64>() / rs.len() as f64)
            .collect();
        pass.graph.backward(total)?;
        self.store.zero_grad();
        pass.graph.write_param_grads(&mut self.store)?;
        optimizer.step(&mut self.store);
        self.store.zero_grad();
        Ok(StepReport {
            loss,
            importance,
            mean_entropy: (!layer_entropy.is_empty())
                .then(|| layer_entropy.iter().sum::<f64>() / layer_entropy.len() as f64),
            layer_entropy,
        })
    }

    /// Decisions for a batch: argmax class, or tags whose sigmoid exceeds 0.5.
    pub fn predict(&self, pass: &ForwardPass<T>) -> Vec<Target> {
        let logits = pass.graph.value(pass.logits);
        let (_, cols) = logits.matrix_dims();
        logits
            .data()
            .chunks(cols)
            .map(|row| match self.config.label_mode {
                LabelMode::Single => Target::Class(crate::prompts::argmax(row)),
                LabelMode::Multilabel => Target::Tags(row.iter().map(|&z| z > T::zero()).collect()),
            })
            .collect()
    }

    /// Noise-free evaluation over `instances` in fixed order.
    pub fn evaluate(&self, instances: &[Instance], batch_size: usize) -> Result<MetricReport> {
        if instances.is_empty() {
            return Err(Error::Input("cannot evaluate an empty split".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut predicted = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(batch_size.max(1)) {
            let batch: Vec<&Instance> = chunk.iter().collect();
            let pass = self.forward(&batch, false, &mut rng)?;
            predicted.extend(self.predict(&pass));
        }
        match self.config.label_mode {
            LabelMode::Single => {
                let unwrap = |t: &Target| match t {
                    Target::Class(c) => *c,
                    Target::Tags(_) => usize::MAX,
                };
                let preds: Vec<usize> = predicted.iter().map(unwrap).collect();
                let targets: Vec<usize> = instances.iter().map(|i| unwrap(&i.target)).collect();
                single_label_report(&preds, &targets, self.config.num_outputs)
            }
            LabelMode::Multilabel => {
                let unwrap = |t: &Target| match t {
                    Target::Tags(v) => v.clone(),
                    Target::Class(_) => Vec::new(),
                };
                let preds: Vec<Vec<bool>> = predicted.iter().map(unwrap).collect();
                let targets: Vec<Vec<bool>> = instances.iter().map(|i| unwrap(&i.target)).collect();
                multilabel_report(&preds, &targets)
            }
        }
    }

    /// Restores parameters by name from another store with identical layout.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>, bool)>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                values.len(),
                self.store.len()
            )));
        }
        for (name, value, frozen) in values {
            let id = self
                .store
                .lookup(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            let p = self.store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            if p.frozen != frozen {
                return Err(Error::Checkpoint(format!("frozen flag mismatch for {name}")));
            }
            p.value = value;
        }
        Ok(())
    }
}
