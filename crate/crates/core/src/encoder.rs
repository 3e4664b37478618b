//! Pre-norm transformer encoder with a [CLS] token and a prompt slot in
//! front of every layer.
//!
//! Each layer sees `[cls, prompts, tokens]` per instance. Prompt rows carry
//! no positional encoding and are dropped from the layer output before the
//! next layer, which receives fresh prompts of its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// What an encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Discrete token ids embedded through a lookup table.
    Tokens { vocab_size: usize },
    /// Continuous feature rows projected through a frozen linear map.
    Features { feature_dim: usize },
}

/// Scale of the random frozen weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every tensor drawn with the same standard deviation.
    Fixed,
    /// Projection matrices use `1 / sqrt(fan_in)`; embeddings keep the fixed std.
    #[default]
    FanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub input: InputKind,
    pub max_seq_len: usize,
    pub seed: u64,
    pub init_std: f64,
    pub init_scheme: InitScheme,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        match self.input {
            InputKind::Tokens { vocab_size: 0 } | InputKind::Features { feature_dim: 0 } => {
                return Err(Error::Config("input dimension must be at least 1".into()))
            }
            _ => {}
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// One instance's raw input.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a, T> {
    Tokens(&'a [usize]),
    /// `[rows, feature_dim]`
    Features(&'a Tensor<T>),
}

impl<T: Float> EncoderInput<'_, T> {
    fn len(&self) -> usize {
        match self {
            EncoderInput::Tokens(ids) => ids.len(),
            EncoderInput::Features(rows) => rows.matrix_dims().0,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    w1: (ParamId, ParamId),
    w2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    prefix: String,
    embed: ParamId,
    embed_bias: Option<ParamId>,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    final_ln: (ParamId, ParamId),
}

/// Batched encoder output as graph nodes.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[batch, d]` final-layer [CLS] features.
    pub cls: Var,
    /// `[batch * len, d]` final-layer token features.
    pub tokens: Var,
}

/// Per-forward instrumentation.
#[derive(Debug, Clone, Default)]
pub struct EncodeTrace {
    /// Attention sequence length (per instance) seen by each layer.
    pub seq_lens: Vec<usize>,
    /// Attention nodes, one per layer, for inspecting softmax weights.
    pub attention: Vec<Var>,
}

const LN_EPS: f64 = 1e-5;

impl Encoder {
    /// Registers seeded random weights in `store`, all frozen. Layer-norm
    /// gains start at one and every bias at zero; everything else is drawn
    /// from a two-sigma truncated normal.
    pub fn init_frozen<T: Float>(config: &EncoderConfig, store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let std = config.init_std;
        let proj_std = |fan_in: usize| match config.init_scheme {
            InitScheme::Fixed => std,
            InitScheme::FanIn => 1.0 / (fan_in as f64).sqrt(),
        };
        let mut reg = |name: String, value: Tensor<T>| store.register(format!("{prefix}.{name}"), value, true);

        let (embed, embed_bias) = match config.input {
            InputKind::Tokens { vocab_size } => (reg("embed.token".into(), truncated_normal(&mut rng, &[vocab_size, d], std)), None),
            InputKind::Features { feature_dim } => (
                reg("embed.proj".into(), truncated_normal(&mut rng, &[feature_dim, d], proj_std(feature_dim))),
                Some(reg("embed.proj_bias".into(), Tensor::zeros(&[d]))),
            ),
        };
        let pos = reg("embed.pos".into(), truncated_normal(&mut rng, &[config.max_seq_len + 1, d], std));
        let cls = reg("cls".into(), truncated_normal(&mut rng, &[1, d], std));

        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let mut ln = |name: &str| {
                (
                    reg(format!("layer{i}.{name}.gain"), Tensor::full(&[d], T::one())),
                    reg(format!("layer{i}.{name}.bias"), Tensor::zeros(&[d])),
                )
            };
            let ln1 = ln("ln1");
            let ln2 = ln("ln2");
            let mut linear = |name: &str, fan_in: usize, fan_out: usize| {
                (
                    reg(format!("layer{i}.{name}.weight"), truncated_normal(&mut rng, &[fan_in, fan_out], proj_std(fan_in))),
                    reg(format!("layer{i}.{name}.bias"), Tensor::zeros(&[fan_out])),
                )
            };
            blocks.push(Block {
                ln1,
                wq: linear("attn.q", d, d),
                wk: linear("attn.k", d, d),
                wv: linear("attn.v", d, d),
                wo: linear("attn.out", d, d),
                ln2,
                w1: linear("ffn.in", d, config.ffn_dim),
                w2: linear("ffn.out", config.ffn_dim, d),
            });
        }
        let final_ln = (
            reg("final_ln.gain".into(), Tensor::full(&[d], T::one())),
            reg("final_ln.bias".into(), Tensor::zeros(&[d])),
        );
        Ok(Encoder {
            config: config.clone(),
            prefix: prefix.to_string(),
            embed,
            embed_bias,
            pos,
            cls,
            blocks,
            final_ln,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Every parameter this encoder registered.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed, self.pos, self.cls];
        ids.extend(self.embed_bias);
        for b in &self.blocks {
            for (w, bias) in [b.ln1, b.wq, b.wk, b.wv, b.wo, b.ln2, b.w1, b.w2] {
                ids.push(w);
                ids.push(bias);
            }
        }
        ids.push(self.final_ln.0);
        ids.push(self.final_ln.1);
        ids.sort();
        ids
    }

    /// Input embeddings without positions: `[batch * len, d]`.
    pub fn embed<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: &[EncoderInput<'_, T>]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let len = first.len();
        if len == 0 {
            return Err(Error::Input("empty input sequence".into()));
        }
        if len > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if inputs.iter().any(|x| x.len() != len) {
            return Err(Error::Input("all sequences in a batch must share one length".into()));
        }
        match self.config.input {
            InputKind::Tokens { vocab_size } => {
                let mut ids = Vec::with_capacity(inputs.len() * len);
                for x in inputs {
                    let EncoderInput::Tokens(tokens) = x else {
                        return Err(Error::Input(format!("{} expects token input", self.prefix)));
                    };
                    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
                        return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab_size}")));
                    }
                    ids.extend_from_slice(tokens);
                }
                let table = g.param(store, self.embed);
                g.select_rows(table, &ids)
            }
            InputKind::Features { feature_dim } => {
                let mut rows = Vec::with_capacity(inputs.len() * len * feature_dim);
                for x in inputs {
                    let EncoderInput::Features(f) = x else {
                        return Err(Error::Input(format!("{} expects feature input", self.prefix)));
                    };
                    if f.matrix_dims().1 != feature_dim {
                        return Err(Error::Shape {
                            op: "encoder features",
                            lhs: f.shape().to_vec(),
                            rhs: vec![feature_dim],
                        });
                    }
                    rows.extend_from_slice(f.data());
                }
                let x = g.constant(Tensor::new(vec![inputs.len() * len, feature_dim], rows)?);
                let w = g.param(store, self.embed);
                let b = g.param(store, self.embed_bias.expect("feature encoders have a bias"));
                let h = g.matmul(x, w)?;
                g.add_row(h, b)
            }
        }
    }

    /// Runs one transformer block over `[cls, prompts, tokens]` and returns
    /// the whole sequence, prompt positions included.
    ///
    /// `hidden` holds `batch` sequences of `seq` rows each, [CLS] first.
    /// `prompts`, when given, holds `batch` blocks of equal height.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        layer: usize,
        hidden: Var,
        batch: usize,
        prompts: Option<Var>,
        trace: &mut EncodeTrace,
    ) -> Result<Var> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("layer {layer} out of range")))?;
        let d = self.config.hidden_dim;
        let rows = g.value(hidden).matrix_dims().0;
        if batch == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::Shape {
                op: "layer_forward",
                lhs: g.value(hidden).shape().to_vec(),
                rhs: vec![batch],
            });
        }
        let seq = rows / batch;
        let (x, full_seq) = match prompts {
            None => (hidden, seq),
            Some(p) => {
                let (prows, pcols) = g.value(p).matrix_dims();
                if pcols != d || prows % batch != 0 {
                    return Err(Error::Shape {
                        op: "prompt block",
                        lhs: g.value(p).shape().to_vec(),
                        rhs: vec![batch, d],
                    });
                }
                let plen = prows / batch;
                let joined = g.concat_rows(&[hidden, p])?;
                let mut order = Vec::with_capacity(batch * (seq + plen));
                for b in 0..batch {
                    order.push(b * seq);
                    order.extend((0..plen).map(|j| rows + b * plen + j));
                    order.extend((1..seq).map(|j| b * seq + j));
                }
                (g.select_rows(joined, &order)?, seq + plen)
            }
        };
        trace.seq_lens.push(full_seq);

        let p = |g: &mut Graph<T>, id: ParamId| g.param(store, id);
        let linear = |g: &mut Graph<T>, x: Var, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let (w, b) = (g.param(store, w), g.param(store, b));
            let h = g.matmul(x, w)?;
            g.add_row(h, b)
        };

        let (gain, bias) = (p(g, block.ln1.0), p(g, block.ln1.1));
        let normed = g.layer_norm(x, gain, bias, LN_EPS)?;
        let q = linear(g, normed, block.wq)?;
        let k = linear(g, normed, block.wk)?;
        let v = linear(g, normed, block.wv)?;
        let attn = g.attention(q, k, v, batch, full_seq, self.config.num_heads)?;
        trace.attention.push(attn);
        let attn_out = linear(g, attn, block.wo)?;
        let x = g.add(x, attn_out)?;

        let (gain, bias) = (p(g, block.ln2.0), p(g, block.ln2.1));
        let normed = g.layer_norm(x, gain, bias, LN_EPS)?;
        let h = linear(g, normed, block.w1)?;
        let h = g.gelu(h);
        let ffn_out = linear(g, h, block.w2)?;
        g.add(x, ffn_out)
    }

    /// Embeds a batch, runs every layer (asking `prompts` for the block to
    /// insert before each one), and returns [CLS] plus token features.
    pub fn encode<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &[EncoderInput<'_, T>],
        mut prompts: impl FnMut(&mut Graph<T>, usize) -> Result<Option<Var>>,
        trace: &mut EncodeTrace,
    ) -> Result<EncoderOutput> {
        let batch = inputs.len();
        let tokens = self.embed(g, store, inputs)?;
        let len = g.value(tokens).matrix_dims().0 / batch;
        let seq = len + 1;

        // Positions: [CLS] takes 0, tokens 1..=len.
        let pos_table = g.param(store, self.pos);
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 1..=len).collect();
        let pos = g.select_rows(pos_table, &pos_idx)?;
        let tokens = g.add(tokens, pos)?;
        let cls_table = g.param(store, self.cls);
        let cls_pos = g.select_rows(pos_table, &vec![0; batch])?;
        let cls_rows = g.select_rows(cls_table, &vec![0; batch])?;
        let cls_rows = g.add(cls_rows, cls_pos)?;

        let joined = g.concat_rows(&[cls_rows, tokens])?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(b).chain((0..len).map(move |j| batch + b * len + j)))
            .collect();
        let mut hidden = g.select_rows(joined, &order)?;

        for layer in 0..self.config.num_layers {
            let block = prompts(g, layer)?;
            let out = self.layer_forward(g, store, layer, hidden, batch, block, trace)?;
            hidden = match block {
                None => out,
                Some(p) => {
                    let plen = g.value(p).matrix_dims().0 / batch;
                    let full = seq + plen;
                    let keep: Vec<usize> = (0..batch)
                        .flat_map(|b| std::iter::once(b * full).chain((1 + plen..full).map(move |j| b * full + j)))
                        .collect();
                    g.select_rows(out, &keep)?
                }
            };
        }

        let (gain, bias) = (g.param(store, self.final_ln.0), g.param(store, self.final_ln.1));
        let normed = g.layer_norm(hidden, gain, bias, LN_EPS)?;
        let cls_idx: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let tok_idx: Vec<usize> = (0..batch).flat_map(|b| (1..seq).map(move |j| b * seq + j)).collect();
        let cls = g.select_rows(normed, &cls_idx)?;
        let tokens = g.select_rows(normed, &tok_idx)?;
        Ok(EncoderOutput { cls, tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(seed: u64) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            input: InputKind::Tokens { vocab_size: 10 },
            max_seq_len: 6,
            seed,
            init_std: 0.02,
            init_scheme: InitScheme::Fixed,
        }
    }

    fn build(seed: u64) -> (Encoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let enc = Encoder::init_frozen(&small_config(seed), &mut store, "enc").unwrap();
        (enc, store)
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(0);
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small_config(0);
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_frozen() {
        let (_, a) = build(1);
        let (_, b) = build(1);
        let (_, c) = build(2);
        let all = |_: &crate::params::Parameter<f64>| true;
        assert_eq!(a.checksum_where(all), b.checksum_where(all));
        assert_ne!(a.checksum_where(all), c.checksum_where(all));
        assert!(a.iter().all(|(_, p)| p.frozen));
        assert_eq!(a.count().0, 0);
    }

    #[test]
    fn layer_lengths_with_and_without_prompts() {
        let (enc, store) = build(3);
        let mut g = Graph::new();
        let hidden = g.constant(Tensor::from_fn(&[2 * 4, 8], |i| (i as f64 * 0.37).sin()));
        let mut trace = EncodeTrace::default();
        let out = enc.layer_forward(&mut g, &store, 0, hidden, 2, None, &mut trace).unwrap();
        assert_eq!(g.value(out).shape(), &[8, 8]);
        let prompts = g.constant(Tensor::zeros(&[2 * 3, 8]));
        let out = enc.layer_forward(&mut g, &store, 0, hidden, 2, Some(prompts), &mut trace).unwrap();
        assert_eq!(g.value(out).shape(), &[2 * 7, 8]);
        assert_eq!(trace.seq_lens, vec![4, 7]);

        let wide = g.constant(Tensor::zeros(&[2, 9]));
        assert!(matches!(
            enc.layer_forward(&mut g, &store, 0, hidden, 2, Some(wide), &mut trace),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_prompts_still_shift_outputs() {
        let (enc, store) = build(4);
        let tokens = [1usize, 5, 7];
        let run = |plen: Option<usize>| {
            let mut g = Graph::new();
            let mut trace = EncodeTrace::default();
            let out = enc
                .encode(
                    &mut g,
                    &store,
                    &[EncoderInput::Tokens(&tokens)],
                    |g, _| Ok(plen.map(|p| g.constant(Tensor::zeros(&[p, 8])))),
                    &mut trace,
                )
                .unwrap();
            g.value(out.cls).clone()
        };
        let plain = run(None);
        let prompted = run(Some(2));
        let diff = plain.data().iter().zip(prompted.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-9, "zero prompts left outputs unchanged");
    }

    #[test]
    fn encode_without_prompts_is_plain_transformer() {
        let (enc, store) = build(5);
        let tokens = [2usize, 3, 4, 9];
        let mut g = Graph::new();
        let mut trace = EncodeTrace::default();
        let out = enc
            .encode(&mut g, &store, &[EncoderInput::Tokens(&tokens)], |_, _| Ok(None), &mut trace)
            .unwrap();
        assert_eq!(g.value(out.cls).shape(), &[1, 8]);
        assert_eq!(g.value(out.tokens).shape(), &[4, 8]);
        assert_eq!(trace.seq_lens, vec![5, 5]);
        for &a in &trace.attention {
            for row in g.attention_probs(a).unwrap().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batched_encode_matches_single() {
        let (enc, store) = build(6);
        let a = [1usize, 2, 3];
        let b = [7usize, 0, 4];
        let encode = |inputs: &[EncoderInput<'_, f64>]| {
            let mut g = Graph::new();
            let mut trace = EncodeTrace::default();
            let out = enc.encode(&mut g, &store, inputs, |_, _| Ok(None), &mut trace).unwrap();
            g.value(out.cls).clone()
        };
        let both = encode(&[EncoderInput::Tokens(&a), EncoderInput::Tokens(&b)]);
        let single = encode(&[EncoderInput::Tokens(&b)]);
        assert_eq!(both.row(1), single.row(0));
    }

    #[test]
    fn input_errors() {
        let (enc, store) = build(7);
        let mut g = Graph::new();
        let mut trace = EncodeTrace::default();
        let long = [1usize; 7];
        let err = enc
            .encode(&mut g, &store, &[EncoderInput::Tokens(&long)], |_, _| Ok(None), &mut trace)
            .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let oov = [10usize];
        assert!(enc
            .encode(&mut g, &store, &[EncoderInput::Tokens(&oov)], |_, _| Ok(None), &mut trace)
            .is_err());
    }

    #[test]
    fn gradients_reach_prompts_not_weights() {
        let (enc, store) = build(8);
        let tokens = [1usize, 2];
        let mut g = Graph::new();
        let mut trace = EncodeTrace::default();
        let mut prompt_vars = Vec::new();
        let out = enc
            .encode(
                &mut g,
                &store,
                &[EncoderInput::Tokens(&tokens)],
                |g, layer| {
                    let p = g.leaf(Tensor::from_fn(&[2, 8], |i| 0.1 * (i + layer) as f64), true);
                    prompt_vars.push(p);
                    Ok(Some(p))
                },
                &mut trace,
            )
            .unwrap();
        let loss = g.sum_all(out.cls);
        let loss = g.square(loss).unwrap();
        g.backward(loss).unwrap();
        for p in prompt_vars {
            assert!(g.grad(p).unwrap().iter().any(|&v| v != 0.0));
        }
        let mut store = store;
        g.write_param_grads(&mut store).unwrap();
        assert!(store.iter().all(|(_, p)| p.grad.is_none()));
    }

    #[test]
    fn feature_input_encoder() {
        let mut cfg = small_config(9);
        cfg.input = InputKind::Features { feature_dim: 3 };
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::init_frozen(&cfg, &mut store, "comp").unwrap();
        let x = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
        let mut g = Graph::new();
        let mut trace = EncodeTrace::default();
        let out = enc
            .encode(&mut g, &store, &[EncoderInput::Features(&x)], |_, _| Ok(None), &mut trace)
            .unwrap();
        assert_eq!(g.value(out.cls).shape(), &[1, 8]);
        let bad = Tensor::zeros(&[4, 2]);
        assert!(enc
            .encode(&mut g, &store, &[EncoderInput::Features(&bad)], |_, _| Ok(None), &mut trace)
            .is_err());
    }
}
