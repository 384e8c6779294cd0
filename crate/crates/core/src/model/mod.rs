//! Encoder-decoder transformer whose self-attention layers optionally use
//! context-aware query/key projections.

pub mod checkpoint;
pub mod config;
pub mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, weights_blob, FORMAT_VERSION};
pub use config::{ModelConfig, NormStyle};
pub use params::{context_param_count, init_params, layout_for, param_count, Layout, ParamBreakdown, ParamStore};

use crate::attention::{multi_head_attention, AttentionMask};
use crate::autodiff::{Graph, Var};
use crate::context::{
    context_aware_attention, AttentionTrace, AttentionWeights, Block, ContextParams, ContextSite, ContextStrategy,
    SideParams,
};
use crate::data::{wrap, Batch, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::parallel::{map_ordered, Execution};
use crate::tensor::Tensor;
use params::{AttnIds, CtxIds, FfnIds, LnIds, SideIds};

const LN_EPS: f64 = 1e-6;
/// Samples whose gradients are held in memory at once during reduction.
const GRAD_CHUNK: usize = 16;

/// Gate values and per-head attention weights of one self-attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub block: Block,
    /// 1-indexed.
    pub layer: usize,
    pub lambda_q: Option<Vec<f64>>,
    pub lambda_k: Option<Vec<f64>>,
    pub weights: Vec<Tensor>,
}

impl LayerTrace {
    fn new(block: Block, layer: usize, t: AttentionTrace) -> Self {
        LayerTrace {
            block,
            layer,
            lambda_q: t.lambda_q,
            lambda_k: t.lambda_k,
            weights: t.weights,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Tensor,
    pub pad_mask: Vec<bool>,
    pub traces: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub logits: Tensor,
    pub traces: Vec<LayerTrace>,
}

/// Dropout state for one forward pass; inert in evaluation.
pub struct Pass {
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl Pass {
    pub fn eval() -> Self {
        Pass { dropout: None }
    }

    /// Inverted dropout at `rate`, drawing masks from `seed`.
    pub fn train(rate: f64, seed: u64) -> Self {
        if rate <= 0.0 {
            return Pass::eval();
        }
        Pass {
            dropout: Some((rate, ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let shape = g.shape(x).to_vec();
        let mask: Vec<f64> = (0..g.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

/// Loss and summed gradients of one batch, one gradient vector per tensor.
#[derive(Clone, Debug)]
pub struct BatchGrads {
    /// Mean cross-entropy over every label position in the batch.
    pub loss: f64,
    pub tokens: usize,
    pub grads: Vec<Vec<f64>>,
}

/// Sinusoidal position table, `max_len × d`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d], data).expect("sized above")
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    layout: Layout,
    params: ParamStore,
    positions: Tensor,
}

impl Model {
    /// Freshly initialized model.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, params) = init_params(&cfg);
        let positions = sinusoidal_positions(cfg.max_len, cfg.d_model);
        Ok(Model {
            cfg,
            layout,
            params,
            positions,
        })
    }

    /// Model from existing tensors; names and shapes must match the layout.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let (layout, expected) = layout_for(&cfg);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint {
                tensor: "<all>".into(),
                msg: format!("expected {} tensors, found {}", expected.len(), params.len()),
            });
        }
        for ((name, shape), t) in expected.iter().zip(params.tensors()) {
            if &t.name != name || t.tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint {
                    tensor: t.name.clone(),
                    msg: format!(
                        "expected {name} with shape {shape:?}, found shape {:?}",
                        t.tensor.shape()
                    ),
                });
            }
        }
        let positions = sinusoidal_positions(cfg.max_len, cfg.d_model);
        Ok(Model {
            cfg,
            layout,
            params,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Registers every tensor as a gradient leaf, in store order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.param(&t.tensor)).collect()
    }

    fn check_ids(&self, ids: &[usize], vocab: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if ids.len() > self.cfg.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.cfg.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Vocab { id, size: vocab });
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph<'_>, table: Var, ids: &[usize]) -> Result<Var> {
        let d = self.cfg.d_model;
        let e = g.gather_rows(table, ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        if !self.cfg.positional_encoding {
            return Ok(e);
        }
        let n = ids.len();
        let pe = Tensor::new(vec![n, d], self.positions.data()[..n * d].to_vec())?;
        let pe = g.constant(pe);
        g.add(e, pe)
    }

    fn norm(g: &mut Graph<'_>, vars: &[Var], ln: LnIds, x: Var) -> Result<Var> {
        g.layer_norm(x, vars[ln.gain], vars[ln.bias], LN_EPS)
    }

    fn ffn(g: &mut Graph<'_>, vars: &[Var], f: FfnIds, x: Var) -> Result<Var> {
        let h = g.matmul(x, vars[f.w1])?;
        let h = g.add_bias(h, vars[f.b1])?;
        let h = g.relu(h);
        let o = g.matmul(h, vars[f.w2])?;
        g.add_bias(o, vars[f.b2])
    }

    fn attn_weights(vars: &[Var], a: AttnIds) -> AttentionWeights {
        AttentionWeights {
            w_q: vars[a.w_q],
            w_k: vars[a.w_k],
            w_v: vars[a.w_v],
            w_o: vars[a.w_o],
        }
    }

    fn ctx_params(&self, vars: &[Var], ids: &CtxIds, block: Block) -> Option<ContextParams> {
        let ctx = &self.cfg.context;
        if ctx.strategy == ContextStrategy::None || !ctx.apply_to.covers(block) {
            return None;
        }
        let side = |s: Option<SideIds>| {
            s.map(|s| SideParams {
                u: vars[s.u],
                v_h: s.v_h.map(|i| vars[i]),
                v_c: s.v_c.map(|i| vars[i]),
            })
        };
        Some(ContextParams {
            query: side(ids.query),
            key: side(ids.key),
        })
    }

    /// Applies a residual sublayer around `f` according to the norm style.
    fn residual<'g>(
        &self,
        g: &mut Graph<'g>,
        vars: &[Var],
        ln: LnIds,
        h: Var,
        pass: &mut Pass,
        f: impl FnOnce(&mut Graph<'g>, Var) -> Result<Var>,
    ) -> Result<Var> {
        match self.cfg.norm_style {
            NormStyle::Pre => {
                let x = Self::norm(g, vars, ln, h)?;
                let y = f(g, x)?;
                let y = pass.apply(g, y)?;
                g.add(h, y)
            }
            NormStyle::Post => {
                let y = f(g, h)?;
                let y = pass.apply(g, y)?;
                let s = g.add(h, y)?;
                Self::norm(g, vars, ln, s)
            }
        }
    }

    /// Encoder over `src` (ids as fed, e.g. `BOS x EOS`); returns `n × d` states.
    pub fn encode_graph(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        src: &[usize],
        pass: &mut Pass,
    ) -> Result<(Var, Vec<LayerTrace>)> {
        self.check_ids(src, self.cfg.src_vocab)?;
        let heads = self.cfg.heads();
        let pad = vec![true; src.len()];
        let h0 = self.embed(g, vars[self.layout.src_embed], src)?;
        let mut h = pass.apply(g, h0)?;
        let mut states = Vec::with_capacity(self.layout.enc.len());
        let mut traces = Vec::with_capacity(self.layout.enc.len());
        for (i, ids) in self.layout.enc.iter().enumerate() {
            let layer = i + 1;
            states.push(h);
            let ctx = self.ctx_params(vars, &ids.ctx, Block::Encoder);
            let weights = Self::attn_weights(vars, ids.attn);
            let site = ContextSite {
                layer,
                states: &states,
                pad_mask: &pad,
                causal: false,
            };
            let mut trace = AttentionTrace::default();
            h = self.residual(g, vars, ids.ln1, h, pass, |g, x| {
                let (a, t) = context_aware_attention(
                    g,
                    x,
                    &weights,
                    ctx.as_ref().map(|p| (p, &self.cfg.context)),
                    &heads,
                    None,
                    &site,
                )?;
                trace = t;
                Ok(a)
            })?;
            traces.push(LayerTrace::new(Block::Encoder, layer, trace));
            h = self.residual(g, vars, ids.ln2, h, pass, |g, x| Self::ffn(g, vars, ids.ffn, x))?;
        }
        if let Some(ln) = self.layout.enc_final {
            h = Self::norm(g, vars, ln, h)?;
        }
        Ok((h, traces))
    }

    /// Causal decoder over the target prefix `tgt_in` (starting with BOS)
    /// attending to encoder states `enc`; returns `m × |V_tgt|` logits.
    pub fn decode_graph(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        tgt_in: &[usize],
        enc: Var,
        pass: &mut Pass,
    ) -> Result<(Var, Vec<LayerTrace>)> {
        self.check_ids(tgt_in, self.cfg.tgt_vocab)?;
        if tgt_in[0] != BOS {
            return Err(Error::Contract("decoder input must begin with BOS".into()));
        }
        let heads = self.cfg.heads();
        let m = tgt_in.len();
        let pad = vec![true; m];
        let causal = AttentionMask::causal(m)?;
        let h0 = self.embed(g, vars[self.layout.tgt_embed], tgt_in)?;
        let mut h = pass.apply(g, h0)?;
        let mut states = Vec::with_capacity(self.layout.dec.len());
        let mut traces = Vec::with_capacity(self.layout.dec.len());
        for (i, ids) in self.layout.dec.iter().enumerate() {
            let layer = i + 1;
            states.push(h);
            let ctx = self.ctx_params(vars, &ids.ctx, Block::Decoder);
            let weights = Self::attn_weights(vars, ids.self_attn);
            let site = ContextSite {
                layer,
                states: &states,
                pad_mask: &pad,
                causal: true,
            };
            let mut trace = AttentionTrace::default();
            h = self.residual(g, vars, ids.ln1, h, pass, |g, x| {
                let (a, t) = context_aware_attention(
                    g,
                    x,
                    &weights,
                    ctx.as_ref().map(|p| (p, &self.cfg.context)),
                    &heads,
                    Some(&causal),
                    &site,
                )?;
                trace = t;
                Ok(a)
            })?;
            traces.push(LayerTrace::new(Block::Decoder, layer, trace));
            let cross = ids.cross;
            h = self.residual(g, vars, ids.ln2, h, pass, |g, x| {
                let q = g.matmul(x, vars[cross.w_q])?;
                let k = g.matmul(enc, vars[cross.w_k])?;
                let v = g.matmul(enc, vars[cross.w_v])?;
                Ok(multi_head_attention(g, q, k, v, &heads, vars[cross.w_o], None)?.output)
            })?;
            h = self.residual(g, vars, ids.ln3, h, pass, |g, x| Self::ffn(g, vars, ids.ffn, x))?;
        }
        if let Some(ln) = self.layout.dec_final {
            h = Self::norm(g, vars, ln, h)?;
        }
        let logits = g.matmul(h, vars[self.layout.out_w])?;
        let logits = g.add_bias(logits, vars[self.layout.out_b])?;
        Ok((logits, traces))
    }

    /// Mean cross-entropy of one example. `src` and `tgt` are full rows
    /// (`BOS … EOS`, unpadded); the decoder reads `tgt[..m-1]` and predicts
    /// `tgt[1..]`.
    pub fn sample_loss_graph(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        src: &[usize],
        tgt: &[usize],
        pass: &mut Pass,
    ) -> Result<Var> {
        if tgt.len() < 2 {
            return Err(Error::Contract("target row needs BOS and at least one label".into()));
        }
        let (enc, _) = self.encode_graph(g, vars, src, pass)?;
        let (logits, _) = self.decode_graph(g, vars, &tgt[..tgt.len() - 1], enc, pass)?;
        g.cross_entropy(logits, &tgt[1..], PAD)
    }

    pub fn encode(&self, src: &[usize]) -> Result<Encoded> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let (h, traces) = self.encode_graph(&mut g, &vars, src, &mut Pass::eval())?;
        Ok(Encoded {
            states: g.tensor(h),
            pad_mask: vec![true; src.len()],
            traces,
        })
    }

    pub fn decode_teacher_forced(&self, tgt_in: &[usize], enc_states: &Tensor) -> Result<Decoded> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let enc = g.constant(enc_states.clone());
        let (logits, traces) = self.decode_graph(&mut g, &vars, tgt_in, enc, &mut Pass::eval())?;
        Ok(Decoded {
            logits: g.tensor(logits),
            traces,
        })
    }

    /// Loss of one example without gradients.
    pub fn sample_loss(&self, src: &[usize], tgt: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let loss = self.sample_loss_graph(&mut g, &vars, src, tgt, &mut Pass::eval())?;
        Ok(g.scalar(loss))
    }

    /// Mean cross-entropy over all label positions of `batch`.
    pub fn forward_loss(&self, batch: &Batch, exec: Execution) -> Result<f64> {
        let rows: Vec<usize> = (0..batch.rows()).collect();
        let total = batch.label_tokens() as f64;
        let per: Vec<Result<f64>> = map_ordered(exec, &rows, |&i| {
            let tgt = batch.tgt_row(i);
            let w = (tgt.len() - 1) as f64 / total;
            Ok(w * self.sample_loss(batch.src_row(i), tgt)?)
        });
        per.into_iter().sum()
    }

    /// Batch loss and its gradient. Examples run in parallel (per `exec`) and
    /// their gradients are summed in row order, so the result does not depend
    /// on the thread count. `dropout_seed` enables dropout when the config
    /// has a non-zero rate.
    pub fn loss_and_grads(&self, batch: &Batch, exec: Execution, dropout_seed: Option<u64>) -> Result<BatchGrads> {
        let tokens = batch.label_tokens();
        if tokens == 0 {
            return Err(Error::EmptyLoss);
        }
        let total = tokens as f64;
        let mut grads: Vec<Vec<f64>> = self
            .params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.tensor.len()])
            .collect();
        let mut loss = 0.0;
        let rows: Vec<usize> = (0..batch.rows()).collect();
        for chunk in rows.chunks(GRAD_CHUNK) {
            let results = map_ordered(exec, chunk, |&i| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
                let mut pass = match dropout_seed {
                    Some(s) => Pass::train(self.cfg.dropout, s ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                    None => Pass::eval(),
                };
                let src = batch.src_row(i);
                let tgt = batch.tgt_row(i);
                let mut g = Graph::new();
                let vars = self.bind(&mut g);
                let l = self.sample_loss_graph(&mut g, &vars, src, tgt, &mut pass)?;
                let l = g.scale(l, (tgt.len() - 1) as f64 / total);
                g.backward(l)?;
                let gs = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
                Ok((g.scalar(l), gs))
            });
            for r in results {
                let (l, gs) = r?;
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(gs) {
                    if let Some(gi) = gi {
                        acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        Ok(BatchGrads { loss, tokens, grads })
    }

    /// Greedy decoding of content ids `src` (BOS/EOS added here). Ties go to
    /// the lowest id; stops at EOS or after `max_steps` tokens (never past
    /// `max_len`). The returned ids exclude BOS and EOS.
    pub fn greedy_decode(&self, src: &[usize], max_steps: usize) -> Result<Vec<usize>> {
        let enc = self.encode(&wrap(src))?.states;
        let steps = max_steps.min(self.cfg.max_len);
        let mut prefix = vec![BOS];
        for _ in 0..steps {
            let logits = self.decode_teacher_forced(&prefix, &enc)?.logits;
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        prefix.remove(0);
        Ok(prefix)
    }
}

/// Index of the largest value, first index among ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
