//! GPT-style decoder whose heads, MLP columns and layers can be sampled.
//!
//! Wiring follows GPT-2: learned absolute positions, pre-LayerNorm residual
//! blocks, causal attention, GELU MLP and an output projection tied to the
//! token embedding. Each attention head owns separate `W^Q`, `W^K`, `W^V`
//! (`d×d_k`) and `W^O` (`d_k×d`) tensors. The two MLP matrices are stored
//! transposed (`N_M×d`) so that an intermediate column of `W^1`/`W^2` is a
//! contiguous row and a column subset is a row gather.
//!
//! A sampled module is divided by the fraction of units it kept, so its
//! expectation over uniformly drawn subsets equals the full module. Skipped
//! layers are exact identities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::scheduler::Rates;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Standard deviation of the weight initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub mlp_inner: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    /// GPT2-base (117M).
    pub const fn gpt2_base() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            head_dim: 64,
            hidden: 768,
            mlp_inner: 3072,
            vocab: 50257,
            seq_len: 1024,
        }
    }

    /// TinyLlama 1.1B dimensions (attention counted as full multi-head).
    pub const fn tinyllama() -> Self {
        Self {
            n_layers: 22,
            n_heads: 32,
            head_dim: 64,
            hidden: 2048,
            mlp_inner: 5632,
            vocab: 32000,
            seq_len: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
            ("model.head_dim", self.head_dim),
            ("model.hidden", self.hidden),
            ("model.mlp_inner", self.mlp_inner),
            ("model.vocab", self.vocab),
        ];
        for (path, v) in fields {
            if v == 0 {
                return Err(Error::config(path, "must be at least 1"));
            }
        }
        if self.seq_len < 2 {
            return Err(Error::config("model.seq_len", "must be at least 2"));
        }
        Ok(())
    }

    /// Width of the concatenated heads, `N_H·d_k`.
    pub fn attention_width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// Sampled units of one active layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub layer: usize,
    pub heads: Vec<usize>,
    pub cols: Vec<usize>,
}

/// One step's sampled index sets. `layers` lists the active layers (the
/// layer set) in increasing order; indices are zero-based.
#[derive(Clone, Debug, PartialEq)]
pub struct SubnetworkMask {
    pub layers: Vec<LayerMask>,
    pub rates: Rates,
}

impl SubnetworkMask {
    /// Every layer, head and column.
    pub fn full(config: &ModelConfig) -> Self {
        let layers = (0..config.n_layers)
            .map(|layer| LayerMask {
                layer,
                heads: (0..config.n_heads).collect(),
                cols: (0..config.mlp_inner).collect(),
            })
            .collect();
        Self {
            layers,
            rates: Rates::FULL,
        }
    }

    pub fn layer_set(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerMask> {
        self.layers
            .binary_search_by_key(&layer, |l| l.layer)
            .ok()
            .map(|i| &self.layers[i])
    }

    pub fn is_full(&self, config: &ModelConfig) -> bool {
        self.layers.len() == config.n_layers
            && self
                .layers
                .iter()
                .all(|l| l.heads.len() == config.n_heads && l.cols.len() == config.mlp_inner)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        check_index_set("layer set", &self.layer_set(), config.n_layers)?;
        for l in &self.layers {
            check_index_set(&format!("heads of layer {}", l.layer), &l.heads, config.n_heads)?;
            check_index_set(&format!("columns of layer {}", l.layer), &l.cols, config.mlp_inner)?;
        }
        Ok(())
    }
}

fn check_index_set(what: &str, set: &[usize], limit: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidMask(format!("{what} is empty")));
    }
    if set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidMask(format!("{what} is not sorted and duplicate-free")));
    }
    if let Some(&bad) = set.iter().find(|&&i| i >= limit) {
        return Err(Error::InvalidMask(format!("{what} contains {bad}, limit {limit}")));
    }
    Ok(())
}

/// What a parameter tensor is, which decides initialisation and whether
/// AdamW applies weight decay to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    NormGain,
    NormBias,
    Weight,
    /// Projections that write into the residual stream (`W^O`, `W^2`).
    ResidualWeight,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::ResidualWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_gain: usize,
    ln1_bias: usize,
    query: Vec<usize>,
    key: Vec<usize>,
    value: Vec<usize>,
    output: Vec<usize>,
    ln2_gain: usize,
    ln2_bias: usize,
    mlp_in: usize,
    mlp_out: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    token_embedding: usize,
    position_embedding: usize,
    layers: Vec<LayerIds>,
    final_gain: usize,
    final_bias: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, kind: ParamKind| {
            specs.push(ParamSpec { name, shape, kind });
            specs.len() - 1
        };
        let token_embedding = add("wte".into(), vec![c.vocab, c.hidden], ParamKind::Embedding);
        let position_embedding = add("wpe".into(), vec![c.seq_len, c.hidden], ParamKind::Embedding);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let ln1_gain = add(format!("h{l}.ln1.gain"), vec![c.hidden], ParamKind::NormGain);
            let ln1_bias = add(format!("h{l}.ln1.bias"), vec![c.hidden], ParamKind::NormBias);
            let mut heads = |proj: &str, shape: Vec<usize>, kind| {
                (0..c.n_heads)
                    .map(|h| add(format!("h{l}.attn.{proj}{h}"), shape.clone(), kind))
                    .collect::<Vec<_>>()
            };
            let query = heads("q", vec![c.hidden, c.head_dim], ParamKind::Weight);
            let key = heads("k", vec![c.hidden, c.head_dim], ParamKind::Weight);
            let value = heads("v", vec![c.hidden, c.head_dim], ParamKind::Weight);
            let output = heads("o", vec![c.head_dim, c.hidden], ParamKind::ResidualWeight);
            let ln2_gain = add(format!("h{l}.ln2.gain"), vec![c.hidden], ParamKind::NormGain);
            let ln2_bias = add(format!("h{l}.ln2.bias"), vec![c.hidden], ParamKind::NormBias);
            let mlp_in = add(format!("h{l}.mlp.w1t"), vec![c.mlp_inner, c.hidden], ParamKind::Weight);
            let mlp_out = add(
                format!("h{l}.mlp.w2t"),
                vec![c.mlp_inner, c.hidden],
                ParamKind::ResidualWeight,
            );
            layers.push(LayerIds {
                ln1_gain,
                ln1_bias,
                query,
                key,
                value,
                output,
                ln2_gain,
                ln2_bias,
                mlp_in,
                mlp_out,
            });
        }
        let final_gain = add("ln_f.gain".into(), vec![c.hidden], ParamKind::NormGain);
        let final_bias = add("ln_f.bias".into(), vec![c.hidden], ParamKind::NormBias);
        Self {
            specs,
            token_embedding,
            position_embedding,
            layers,
            final_gain,
            final_bias,
        }
    }
}

/// All trainable tensors of the model, in declaration order.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    config: ModelConfig,
    layout: Layout,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Normal(0, 0.02) weights with residual projections scaled by
    /// `1/√(2·N_L)`, unit LayerNorm gains and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let tensors = layout
            .specs
            .iter()
            .map(|spec| match spec.kind {
                ParamKind::NormGain => Tensor::filled(&spec.shape, T::one()),
                ParamKind::NormBias => Tensor::zeros(&spec.shape),
                ParamKind::Embedding | ParamKind::Weight => normal(&spec.shape, INIT_STD, &mut rng),
                ParamKind::ResidualWeight => normal(&spec.shape, residual_std, &mut rng),
            })
            .collect();
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    /// Rebuilds parameters from tensors in declaration order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if tensors.len() != layout.specs.len() {
            return Err(Error::Shape {
                op: "from_tensors",
                left: vec![layout.specs.len()],
                right: vec![tensors.len()],
            });
        }
        for (spec, t) in layout.specs.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(Error::Shape {
                    op: "from_tensors",
                    left: spec.shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.specs.iter().position(|s| s.name == name)
    }

    /// Precision conversion.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// All scalars concatenated in declaration order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape {
                op: "assign_flat",
                left: vec![self.num_scalars()],
                right: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Mean next-token cross-entropy and per-parameter gradients.
    /// Parameters the forward pass never touched get `None`.
    ///
    /// `mask = None` runs the plain full model without any sampling logic.
    pub fn loss_and_grads(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        mask: Option<&SubnetworkMask>,
    ) -> Result<(f64, Vec<Option<Vec<T>>>)> {
        let mut fwd = Forward::new(self);
        let logits = match mask {
            Some(m) => fwd.logits(inputs, batch, m)?,
            None => fwd.logits_dense(inputs, batch)?,
        };
        let loss = fwd.tape.cross_entropy(logits, targets)?;
        let value = fwd.tape.value(loss).item().as_f64();
        let mut grads = fwd.tape.backward(loss)?;
        let mut out = vec![None; self.tensors.len()];
        for (id, var) in fwd.bound.iter().enumerate() {
            if let Some(var) = var {
                out[id] = grads.take(*var);
            }
        }
        Ok((value, out))
    }

    /// Forward-only loss.
    pub fn loss(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        mask: Option<&SubnetworkMask>,
    ) -> Result<f64> {
        let mut fwd = Forward::new(self);
        let logits = match mask {
            Some(m) => fwd.logits(inputs, batch, m)?,
            None => fwd.logits_dense(inputs, batch)?,
        };
        let loss = fwd.tape.cross_entropy(logits, targets)?;
        Ok(fwd.tape.value(loss).item().as_f64())
    }
}

fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

/// Builds one forward pass on a tape, binding parameters lazily so that
/// unsampled heads, columns and layers never enter the graph.
pub struct Forward<'a, T: Scalar> {
    pub tape: Tape<'a, T>,
    params: &'a ModelParams<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.tensors.len()],
        }
    }

    /// Tape variable of parameter `id`, binding it on first use.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let v = self.tape.param(&self.params.tensors[id]);
        self.bound[id] = Some(v);
        v
    }

    /// Parameters bound so far, with their tape variables.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    fn config(&self) -> &'a ModelConfig {
        &self.params.config
    }

    fn layer_ids(&self, layer: usize) -> Result<&'a LayerIds> {
        self.params.layout.layers.get(layer).ok_or(Error::Index {
            what: "layer",
            position: 0,
            index: layer,
            limit: self.params.config.n_layers,
        })
    }

    fn seq_of(&self, rows: usize, batch: usize) -> Result<usize> {
        if batch == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::Shape {
                op: "batch",
                left: vec![rows],
                right: vec![batch],
            });
        }
        Ok(rows / batch)
    }

    /// Token plus learned positional embedding of `batch` sequences.
    pub fn embed(&mut self, tokens: &[usize], batch: usize) -> Result<Var> {
        let seq = self.seq_of(tokens.len(), batch)?;
        let max = self.config().seq_len;
        if seq > max {
            return Err(Error::Shape {
                op: "sequence length",
                left: vec![seq],
                right: vec![max],
            });
        }
        let wte = self.param(self.params.layout.token_embedding);
        let wpe = self.param(self.params.layout.position_embedding);
        let tok = self.tape.embedding_lookup(wte, tokens)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = self.tape.gather_rows(wpe, &positions)?;
        self.tape.add(tok, pos)
    }

    fn head(&mut self, x: Var, ids: &LayerIds, h: usize, batch: usize) -> Result<Var> {
        let seq = self.seq_of(self.tape.value(x).rows(), batch)?;
        let (wq, wk, wv, wo) = (
            self.param(ids.query[h]),
            self.param(ids.key[h]),
            self.param(ids.value[h]),
            self.param(ids.output[h]),
        );
        let q = self.tape.matmul(x, wq)?;
        let k = self.tape.matmul(x, wk)?;
        let v = self.tape.matmul(x, wv)?;
        let att = self.tape.causal_attention(q, k, v, batch, seq)?;
        self.tape.matmul(att, wo)
    }

    fn sum_heads(
        &mut self,
        x: Var,
        ids: &LayerIds,
        heads: impl IntoIterator<Item = usize>,
        batch: usize,
    ) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for h in heads {
            let out = self.head(x, ids, h, batch)?;
            acc = Some(match acc {
                None => out,
                Some(prev) => self.tape.add(prev, out)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidMask("empty head set".into()))
    }

    /// Multi-head attention over the sampled heads, divided by the sampled
    /// fraction `|heads|/N_H`.
    pub fn mha(&mut self, x: Var, layer: usize, heads: &[usize], batch: usize) -> Result<Var> {
        let n_heads = self.config().n_heads;
        check_index_set("head set", heads, n_heads)?;
        let ids = self.layer_ids(layer)?;
        let out = self.sum_heads(x, ids, heads.iter().copied(), batch)?;
        if heads.len() == n_heads {
            Ok(out)
        } else {
            self.tape.scale(out, n_heads as f64 / heads.len() as f64)
        }
    }

    fn mlp_with(&mut self, x: Var, w1t: Var, w2t: Var) -> Result<Var> {
        let pre = self.tape.matmul_nt(x, w1t)?;
        let act = self.tape.gelu(pre)?;
        self.tape.matmul(act, w2t)
    }

    /// MLP over the sampled intermediate columns, divided by `|cols|/N_M`.
    pub fn mlp(&mut self, x: Var, layer: usize, cols: &[usize]) -> Result<Var> {
        let n_inner = self.config().mlp_inner;
        check_index_set("column set", cols, n_inner)?;
        let ids = self.layer_ids(layer)?;
        let (w1t, w2t) = (self.param(ids.mlp_in), self.param(ids.mlp_out));
        if cols.len() == n_inner {
            return self.mlp_with(x, w1t, w2t);
        }
        let w1 = self.tape.gather_rows(w1t, cols)?;
        let w2 = self.tape.gather_rows(w2t, cols)?;
        let out = self.mlp_with(x, w1, w2)?;
        self.tape.scale(out, n_inner as f64 / cols.len() as f64)
    }

    /// One pre-LayerNorm block, or the identity when `layer` is not sampled.
    pub fn layer(&mut self, x: Var, layer: usize, mask: &SubnetworkMask, batch: usize) -> Result<Var> {
        if layer >= self.config().n_layers {
            return Err(Error::Index {
                what: "layer",
                position: 0,
                index: layer,
                limit: self.config().n_layers,
            });
        }
        let Some(lm) = mask.layer(layer) else {
            return Ok(x);
        };
        let ids = self.layer_ids(layer)?;
        let (g1, b1) = (self.param(ids.ln1_gain), self.param(ids.ln1_bias));
        let normed = self.tape.layer_norm(x, g1, b1)?;
        let attn = self.mha(normed, layer, &lm.heads, batch)?;
        let x = self.tape.add(x, attn)?;
        let (g2, b2) = (self.param(ids.ln2_gain), self.param(ids.ln2_bias));
        let normed = self.tape.layer_norm(x, g2, b2)?;
        let mlp = self.mlp(normed, layer, &lm.cols)?;
        self.tape.add(x, mlp)
    }

    fn head_out(&mut self, x: Var) -> Result<Var> {
        let layout = &self.params.layout;
        let (g, b) = (self.param(layout.final_gain), self.param(layout.final_bias));
        let normed = self.tape.layer_norm(x, g, b)?;
        let wte = self.param(layout.token_embedding);
        self.tape.matmul_nt(normed, wte)
    }

    /// `(batch·seq)×V` logits through the sampled subnetwork.
    pub fn logits(&mut self, tokens: &[usize], batch: usize, mask: &SubnetworkMask) -> Result<Var> {
        mask.validate(self.config())?;
        let mut x = self.embed(tokens, batch)?;
        for layer in 0..self.config().n_layers {
            x = self.layer(x, layer, mask, batch)?;
        }
        self.head_out(x)
    }

    /// `(batch·seq)×V` logits of the complete model, without any sampling
    /// logic involved.
    pub fn logits_dense(&mut self, tokens: &[usize], batch: usize) -> Result<Var> {
        let mut x = self.embed(tokens, batch)?;
        for layer in 0..self.config().n_layers {
            let ids = self.layer_ids(layer)?;
            let (g1, b1) = (self.param(ids.ln1_gain), self.param(ids.ln1_bias));
            let normed = self.tape.layer_norm(x, g1, b1)?;
            let attn = self.sum_heads(normed, ids, 0..self.config().n_heads, batch)?;
            x = self.tape.add(x, attn)?;
            let (g2, b2) = (self.param(ids.ln2_gain), self.param(ids.ln2_bias));
            let normed = self.tape.layer_norm(x, g2, b2)?;
            let (w1t, w2t) = (self.param(ids.mlp_in), self.param(ids.mlp_out));
            let mlp = self.mlp_with(normed, w1t, w2t)?;
            x = self.tape.add(x, mlp)?;
        }
        self.head_out(x)
    }
}
