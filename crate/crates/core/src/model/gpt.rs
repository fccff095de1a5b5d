//! The pre-norm decoder stack and its named parameter store.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::attention::{differential_core, lambda_exp, lambda_sigmoid, standard_core};
use crate::model::config::{AttnKind, FfnKind, ModelConfig, NormKind, PosKind};
use crate::model::norm::{norm_apply, param_suffixes, NormParams};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;
const LAMBDA_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Const(f64),
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// AdamW decays matrices (embeddings and linear weights) only.
    pub fn decays(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Every parameter `config` implies, in a stable order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let (d, v, hd) = (config.d_model, config.vocab_size, config.head_dim());
    let kv = config.n_kv_head * hd;
    let hidden = config.ffn_hidden();
    let resid_std = INIT_STD / (2.0 * config.n_layer as f64).sqrt();
    let w = Init::Normal(INIT_STD);
    let zero = Init::Const(0.0);

    let mut specs = vec![ParamSpec::new("wte", &[v, d], w)];
    if config.pos_kind == PosKind::Learned {
        specs.push(ParamSpec::new("wpe", &[config.block_size, d], w));
    }
    let norm_site = |specs: &mut Vec<ParamSpec>, prefix: &str| {
        for suffix in param_suffixes(config.norm_kind) {
            let init = match *suffix {
                "alpha" => Init::Const(config.alpha_init),
                "weight" => Init::Const(1.0),
                _ => zero,
            };
            let shape: &[usize] = if *suffix == "alpha" { &[1] } else { &[d] };
            specs.push(ParamSpec::new(format!("{prefix}.{suffix}"), shape, init));
        }
    };
    let linear = |specs: &mut Vec<ParamSpec>, prefix: String, fan_in: usize, fan_out: usize, init: Init| {
        specs.push(ParamSpec::new(format!("{prefix}.weight"), &[fan_in, fan_out], init));
        specs.push(ParamSpec::new(format!("{prefix}.bias"), &[fan_out], zero));
    };

    for i in 0..config.n_layer {
        let h = format!("h.{i}");
        norm_site(&mut specs, &format!("{h}.ln_1"));
        linear(&mut specs, format!("{h}.attn.q"), d, d, w);
        linear(&mut specs, format!("{h}.attn.k"), d, kv, w);
        linear(&mut specs, format!("{h}.attn.v"), d, kv, w);
        match config.attn_kind {
            AttnKind::Standard => {}
            AttnKind::DiffV1 => {
                for l in ["lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"] {
                    specs.push(ParamSpec::new(format!("{h}.attn.{l}"), &[hd], Init::Normal(LAMBDA_STD)));
                }
            }
            AttnKind::DiffSigmoid => {
                specs.push(ParamSpec::new(format!("{h}.attn.lambda_raw"), &[config.n_head / 2], zero));
            }
        }
        if config.attn_kind.is_differential() && config.diff_stabilizer {
            specs.push(ParamSpec::new(format!("{h}.attn.subln.weight"), &[d], Init::Const(1.0)));
        }
        linear(&mut specs, format!("{h}.attn.proj"), d, d, Init::Normal(resid_std));
        norm_site(&mut specs, &format!("{h}.ln_2"));
        match config.ffn_kind {
            FfnKind::Gelu => linear(&mut specs, format!("{h}.mlp.fc"), d, hidden, w),
            FfnKind::Swiglu => {
                linear(&mut specs, format!("{h}.mlp.w1"), d, hidden, w);
                linear(&mut specs, format!("{h}.mlp.w2"), d, hidden, w);
            }
        }
        linear(&mut specs, format!("{h}.mlp.proj"), hidden, d, Init::Normal(resid_std));
    }
    norm_site(&mut specs, "ln_f");
    if !config.weight_tying {
        specs.push(ParamSpec::new("lm_head.weight", &[v, d], w));
    }
    specs
}

/// Per-parameter generator keyed by `(seed, name)`, so changing one part of
/// the architecture leaves every other parameter's initial values unchanged.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    match spec.init {
        Init::Const(c) => Tensor::full(spec.shape.clone(), T::from_f64(c)),
        Init::Normal(std) => {
            let mut rng = param_rng(seed, &spec.name);
            let dist = Normal::new(0.0, std).expect("finite std");
            let n = spec.shape.iter().product();
            let data = (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
            Tensor::new(spec.shape.clone(), data).expect("numel matches")
        }
    }
}

/// Forward-pass switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Enables dropout.
    pub train: bool,
    pub dropout_seed: u64,
    /// Records norm-site inputs and block outputs.
    pub probe: bool,
    /// Registers parameters as trainable leaves.
    pub requires_grad: bool,
}

impl ForwardOptions {
    pub fn training(dropout_seed: u64) -> Self {
        Self {
            train: true,
            dropout_seed,
            probe: false,
            requires_grad: true,
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }

    pub fn probing() -> Self {
        Self {
            probe: true,
            ..Self::default()
        }
    }
}

/// Input to one norm site, recorded during a probing forward pass.
#[derive(Clone, Debug)]
pub struct NormTap {
    pub site: String,
    pub input: NodeId,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: NodeId,
    /// Graph handle of every parameter, aligned with [`Gpt::names`].
    pub params: Vec<NodeId>,
    /// Token (plus learned position) embeddings entering the first block.
    pub embeddings: NodeId,
    pub taps: Vec<NormTap>,
    pub block_outputs: Vec<NodeId>,
}

/// Decoder-only transformer with named parameters.
#[derive(Clone, Debug)]
pub struct Gpt<T: Scalar = f32> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

struct Ctx<'a> {
    ids: &'a [NodeId],
    index: &'a HashMap<String, usize>,
    opts: ForwardOptions,
    dropout_site: u64,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> NodeId {
        self.ids[self.index[name]]
    }

    fn maybe(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).map(|&i| self.ids[i])
    }
}

impl<T: Scalar> Gpt<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        let tensors = specs.iter().map(|s| init_tensor(s, seed)).collect();
        Ok(Self::assemble(config, specs, tensors))
    }

    /// Rebuilds a model from named tensors, checking them against the
    /// layout `config` implies.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut by_name: HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = by_name
                .remove(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, config implies {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            tensors.push(t);
        }
        Ok(Self::assemble(config, specs, tensors))
    }

    fn assemble(config: ModelConfig, specs: Vec<ParamSpec>, tensors: Vec<Tensor<T>>) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Self {
            config,
            specs,
            tensors,
            index,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Gpt<U> {
        Gpt {
            config: self.config.clone(),
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Learned DyT α per norm site, in site order.
    pub fn alphas(&self) -> Option<Vec<(String, f64)>> {
        (self.config.norm_kind == NormKind::Dyt).then(|| {
            self.config
                .site_names()
                .into_iter()
                .map(|site| {
                    let a = self.get(&format!("{site}.alpha")).map_or(f64::NAN, |t| t.data()[0].as_f64());
                    (site, a)
                })
                .collect()
        })
    }

    /// Places every parameter on the graph.
    pub fn load_params(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<Vec<NodeId>> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }

    /// Embeds `ids` (`batch × seq`, row-major) and runs the stack.
    pub fn forward(&self, g: &mut Graph<T>, ids: &[usize], batch: usize, opts: ForwardOptions) -> Result<ForwardOutput> {
        let params = self.load_params(g, opts.requires_grad)?;
        self.forward_with(g, params, ids, batch, opts)
    }

    /// [`Gpt::forward`] over parameter nodes the caller already placed on
    /// `g`, in [`Gpt::names`] order. The stored tensors are not read.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        params: Vec<NodeId>,
        ids: &[usize],
        batch: usize,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        if params.len() != self.specs.len() {
            return Err(Error::Precondition(format!(
                "expected {} parameter nodes, got {}",
                self.specs.len(),
                params.len()
            )));
        }
        let seq = self.check_tokens(ids, batch)?;
        let p = |name: &str| params[self.index[name]];
        let tok = g.embedding(p("wte"), ids, &[batch, seq])?;
        let embeddings = match self.config.pos_kind {
            PosKind::Learned => {
                let positions: Vec<usize> = (0..seq).collect();
                let pos = g.embedding(p("wpe"), &positions, &[seq])?;
                g.add(tok, pos)?
            }
            PosKind::Rope => tok,
        };
        self.run_stack(g, embeddings, params, opts)
    }

    /// Runs the stack on a caller-supplied `[B, T, D]` embedding node, as
    /// produced by [`Gpt::forward`]'s `embeddings`. Parameters are loaded
    /// fresh onto `g`.
    pub fn forward_from_embeddings(&self, g: &mut Graph<T>, embeddings: NodeId, opts: ForwardOptions) -> Result<ForwardOutput> {
        let shape = g.shape(embeddings).to_vec();
        if shape.len() != 3 || shape[2] != self.config.d_model || shape[1] > self.config.block_size {
            return Err(Error::InvalidShape {
                op: "forward_from_embeddings",
                shape,
                reason: format!("expected [B, T ≤ {}, {}]", self.config.block_size, self.config.d_model),
            });
        }
        let params = self.load_params(g, opts.requires_grad)?;
        self.run_stack(g, embeddings, params, opts)
    }

    fn check_tokens(&self, ids: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: vec![batch, ids.len()],
                reason: "token count must be a positive multiple of the batch size".into(),
            });
        }
        let seq = ids.len() / batch;
        if seq > self.config.block_size {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: vec![batch, seq],
                reason: format!("sequence exceeds block_size {}", self.config.block_size),
            });
        }
        if let Some((i, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {id} at position {i} is outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(seq)
    }

    fn run_stack(&self, g: &mut Graph<T>, embeddings: NodeId, params: Vec<NodeId>, opts: ForwardOptions) -> Result<ForwardOutput> {
        let mut ctx = Ctx {
            ids: &params,
            index: &self.index,
            opts,
            dropout_site: 0,
        };
        let mut taps = Vec::new();
        let mut block_outputs = Vec::new();
        let mut x = self.dropout(g, &mut ctx, embeddings)?;
        for i in 0..self.config.n_layer {
            let site = format!("h.{i}.ln_1");
            if opts.probe {
                taps.push(NormTap { site: site.clone(), input: x });
            }
            let h = self.norm(g, &ctx, &site, x)?;
            let a = self.attention(g, &ctx, i, h)?;
            let a = self.dropout(g, &mut ctx, a)?;
            x = g.add(x, a)?;

            let site = format!("h.{i}.ln_2");
            if opts.probe {
                taps.push(NormTap { site: site.clone(), input: x });
            }
            let h = self.norm(g, &ctx, &site, x)?;
            let m = self.ffn(g, &ctx, i, h)?;
            let m = self.dropout(g, &mut ctx, m)?;
            x = g.add(x, m)?;
            if opts.probe {
                block_outputs.push(x);
            }
        }
        if opts.probe {
            taps.push(NormTap {
                site: "ln_f".into(),
                input: x,
            });
        }
        let h = self.norm(g, &ctx, "ln_f", x)?;
        let head = if self.config.weight_tying { "wte" } else { "lm_head.weight" };
        let logits = g.matmul_ext(h, ctx.p(head), true)?;
        Ok(ForwardOutput {
            logits,
            params,
            embeddings,
            taps,
            block_outputs,
        })
    }

    fn norm(&self, g: &mut Graph<T>, ctx: &Ctx, site: &str, x: NodeId) -> Result<NodeId> {
        let p = NormParams {
            alpha: ctx.maybe(&format!("{site}.alpha")),
            gamma: ctx.maybe(&format!("{site}.weight")),
            beta: ctx.maybe(&format!("{site}.bias")),
        };
        norm_apply(g, self.config.norm_kind, x, &p, self.config.norm_eps)
    }

    fn linear(&self, g: &mut Graph<T>, ctx: &Ctx, prefix: &str, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, ctx.p(&format!("{prefix}.weight")))?;
        g.add(y, ctx.p(&format!("{prefix}.bias")))
    }

    /// Splits `[B, T, heads·width]` into `[B, heads, T, width]`.
    fn split_heads(g: &mut Graph<T>, x: NodeId, heads: usize, width: usize) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        let r = g.reshape(x, &[s[0], s[1], heads, width])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    fn merge_heads(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        let p = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(p, &[s[0], s[2], s[1] * s[3]])
    }

    /// Repeats each of `from` groups along dim 1 so it serves `to` slots.
    fn repeat_heads(g: &mut Graph<T>, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        if from == to {
            return Ok(x);
        }
        let group = to / from;
        let idx: Vec<usize> = (0..to).map(|h| h / group).collect();
        g.index_select(x, 1, &idx)
    }

    fn attention(&self, g: &mut Graph<T>, ctx: &Ctx, layer: usize, x: NodeId) -> Result<NodeId> {
        let c = &self.config;
        let (h, kvh, hd) = (c.n_head, c.n_kv_head, c.head_dim());
        let pre = format!("h.{layer}.attn");
        let q = self.linear(g, ctx, &format!("{pre}.q"), x)?;
        let k = self.linear(g, ctx, &format!("{pre}.k"), x)?;
        let v = self.linear(g, ctx, &format!("{pre}.v"), x)?;
        let mut q = Self::split_heads(g, q, h, hd)?;
        let mut k = Self::split_heads(g, k, kvh, hd)?;
        if c.pos_kind == PosKind::Rope {
            q = g.rope(q, c.rope_base)?;
            k = g.rope(k, c.rope_base)?;
        }
        let k = Self::repeat_heads(g, k, kvh, h)?;

        let merged = if c.attn_kind.is_differential() {
            let v = Self::split_heads(g, v, kvh / 2, 2 * hd)?;
            let v = Self::repeat_heads(g, v, kvh / 2, h / 2)?;
            let lambda = match c.attn_kind {
                AttnKind::DiffV1 => {
                    let l = |n: &str| ctx.p(&format!("{pre}.{n}"));
                    lambda_exp(g, [l("lambda_q1"), l("lambda_k1"), l("lambda_q2"), l("lambda_k2")], c.lambda_init)?
                }
                _ => lambda_sigmoid(g, ctx.p(&format!("{pre}.lambda_raw")))?,
            };
            let mut out = differential_core(g, q, k, v, lambda)?;
            if c.diff_stabilizer {
                out = g.rms_norm(out, c.norm_eps)?;
            }
            let mut out = Self::merge_heads(g, out)?;
            if let Some(w) = ctx.maybe(&format!("{pre}.subln.weight")) {
                out = g.mul(out, w)?;
            }
            if c.lambda_init != 0.0 {
                out = g.scale(out, 1.0 - c.lambda_init)?;
            }
            out
        } else {
            let v = Self::split_heads(g, v, kvh, hd)?;
            let v = Self::repeat_heads(g, v, kvh, h)?;
            let out = standard_core(g, q, k, v)?;
            Self::merge_heads(g, out)?
        };
        self.linear(g, ctx, &format!("{pre}.proj"), merged)
    }

    fn ffn(&self, g: &mut Graph<T>, ctx: &Ctx, layer: usize, x: NodeId) -> Result<NodeId> {
        let pre = format!("h.{layer}.mlp");
        let hidden = match self.config.ffn_kind {
            FfnKind::Gelu => {
                let a = self.linear(g, ctx, &format!("{pre}.fc"), x)?;
                g.gelu(a)?
            }
            FfnKind::Swiglu => {
                let a = self.linear(g, ctx, &format!("{pre}.w1"), x)?;
                let b = self.linear(g, ctx, &format!("{pre}.w2"), x)?;
                let b = g.silu(b)?;
                g.mul(a, b)?
            }
        };
        self.linear(g, ctx, &format!("{pre}.proj"), hidden)
    }

    /// Inverted dropout with a mask drawn from `(dropout_seed, site)`.
    fn dropout(&self, g: &mut Graph<T>, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let p = self.config.dropout_p;
        let site = ctx.dropout_site;
        ctx.dropout_site += 1;
        if !ctx.opts.train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.opts.dropout_seed);
        rng.set_stream(site);
        let keep = Bernoulli::new(1.0 - p).map_err(|e| Error::Config(e.to_string()))?;
        let scale = T::from_f64(1.0 / (1.0 - p));
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if keep.sample(&mut rng) { scale } else { T::zero() })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?)?;
        g.mul(x, m)
    }
}

/// Mean next-token cross-entropy of `logits` against `targets`.
pub fn lm_loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    g.cross_entropy(logits, targets)
}
