//! Context-aware query/key contextualization.
//!
//! A context matrix `C` (n × d_c) is built from the block's own layer states,
//! projected by a per-side `U` (d_c × d), and mixed into `Q` and `K` as
//! `(1 − λ) ⊙ X + λ ⊙ (C·U)`. The per-position gate is
//! `λ = σ(X·v_h + (C·U)·v_c)`, or a fixed constant in the ablation mode.
//! Values are never contextualized.
//!
//! Layer states are indexed from 1: `H¹` is the block input (embeddings plus
//! positions) and layer `l` consumes `Hˡ`. The context width at layer `l` is
//!
//! | strategy               | d_c          |
//! |------------------------|--------------|
//! | global                 | d            |
//! | deep                   | (l − 1)·d    |
//! | deep-global            | l·d          |
//! | deep-global + deep     | (2l − 1)·d   |
//!
//! Decoder blocks replace every mean over positions by a prefix mean so
//! position `t` only ever reads positions `≤ t`.

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionMask, HeadConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextStrategy {
    #[default]
    None,
    Global,
    Deep,
    DeepGlobal,
    DeepGlobalPlusDeep,
}

impl ContextStrategy {
    pub const ALL: [ContextStrategy; 5] = [
        ContextStrategy::None,
        ContextStrategy::Global,
        ContextStrategy::Deep,
        ContextStrategy::DeepGlobal,
        ContextStrategy::DeepGlobalPlusDeep,
    ];

    /// Context width `d_c` at 1-indexed layer `layer`.
    pub fn context_width(self, layer: usize, d: usize) -> usize {
        debug_assert!(layer >= 1);
        match self {
            ContextStrategy::None => 0,
            ContextStrategy::Global => d,
            ContextStrategy::Deep => (layer - 1) * d,
            ContextStrategy::DeepGlobal => layer * d,
            ContextStrategy::DeepGlobalPlusDeep => (2 * layer - 1) * d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ContextStrategy::None => "none",
            ContextStrategy::Global => "global",
            ContextStrategy::Deep => "deep",
            ContextStrategy::DeepGlobal => "deep_global",
            ContextStrategy::DeepGlobalPlusDeep => "deep_global_plus_deep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Encoder,
    Decoder,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::Encoder => "enc",
            Block::Decoder => "dec",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Encoder,
    Decoder,
    Both,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Encoder, Placement::Decoder, Placement::Both];

    pub fn covers(self, block: Block) -> bool {
        matches!(
            (self, block),
            (Placement::Both, _) | (Placement::Encoder, Block::Encoder) | (Placement::Decoder, Block::Decoder)
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sides {
    QueryOnly,
    KeyOnly,
    #[default]
    Both,
}

impl Sides {
    pub const ALL: [Sides; 3] = [Sides::QueryOnly, Sides::KeyOnly, Sides::Both];

    pub fn has(self, side: Side) -> bool {
        matches!(
            (self, side),
            (Sides::Both, _) | (Sides::QueryOnly, Side::Query) | (Sides::KeyOnly, Side::Key)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Query,
    Key,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Query => "q",
            Side::Key => "k",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Gating {
    #[default]
    Learned,
    /// λ held at a constant in `[0, 1]`; no gate parameters exist.
    Fixed { lambda: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub strategy: ContextStrategy,
    #[serde(default)]
    pub apply_to: Placement,
    #[serde(default)]
    pub sides: Sides,
    #[serde(default)]
    pub gating: Gating,
}

impl ContextConfig {
    pub fn new(strategy: ContextStrategy, apply_to: Placement, sides: Sides, gating: Gating) -> Self {
        ContextConfig {
            strategy,
            apply_to,
            sides,
            gating,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Gating::Fixed { lambda } = self.gating {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Config(format!("fixed lambda {lambda} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Whether `side` of layer `layer` in `block` carries context parameters.
    pub fn side_active(&self, block: Block, layer: usize, side: Side, d: usize) -> bool {
        self.apply_to.covers(block) && self.sides.has(side) && self.strategy.context_width(layer, d) > 0
    }

    pub fn learned(&self) -> bool {
        matches!(self.gating, Gating::Learned)
    }
}

/// Parameters of one contextualized side (query or key) of one layer.
#[derive(Clone, Copy, Debug)]
pub struct SideParams {
    /// `d_c × d`
    pub u: Var,
    /// `d × 1`, absent under fixed gating
    pub v_h: Option<Var>,
    /// `d × 1`, absent under fixed gating
    pub v_c: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ContextParams {
    pub query: Option<SideParams>,
    pub key: Option<SideParams>,
}

impl ContextParams {
    fn side(&self, side: Side) -> Option<&SideParams> {
        match side {
            Side::Query => self.query.as_ref(),
            Side::Key => self.key.as_ref(),
        }
    }
}

/// Mean over non-pad rows of `h`, a `[d]` vector.
pub fn build_global_context(g: &mut Graph<'_>, h: Var, pad_mask: &[bool]) -> Result<Var> {
    g.masked_mean_rows(h, pad_mask)
}

/// Row `t` is the mean of rows `0..=t`.
pub fn build_causal_global_context(g: &mut Graph<'_>, h: Var) -> Result<Var> {
    g.prefix_mean_rows(h)
}

/// `[H¹, …, Hˡ⁻¹]` per position; `None` at the first layer.
pub fn build_deep_context(g: &mut Graph<'_>, lower_layers: &[Var], layer: usize) -> Result<Option<Var>> {
    if layer == 0 || lower_layers.len() != layer - 1 {
        return Err(Error::Config(format!(
            "deep context at layer {layer} needs {} lower layers, got {}",
            layer.saturating_sub(1),
            lower_layers.len()
        )));
    }
    if layer == 1 {
        return Ok(None);
    }
    g.concat_last_dim(lower_layers).map(Some)
}

/// `[c¹, …, cˡ]` over all layers up to and including the current one.
/// Non-causal: a `[l·d]` vector. Causal: an `n × l·d` matrix of prefix means.
pub fn build_deep_global_context(
    g: &mut Graph<'_>,
    all_layers: &[Var],
    pad_mask: &[bool],
    causal: bool,
) -> Result<Var> {
    if all_layers.is_empty() {
        return Err(Error::Config("deep-global context needs at least one layer".into()));
    }
    let per_layer = all_layers
        .iter()
        .map(|&h| {
            if causal {
                build_causal_global_context(g, h)
            } else {
                build_global_context(g, h, pad_mask)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_last_dim(&per_layer)
}

/// Context matrix `n × d_c` for `strategy` at layer `layer`, with vectors
/// broadcast to every position. `None` when the strategy yields no context.
pub fn assemble_context(
    g: &mut Graph<'_>,
    strategy: ContextStrategy,
    layer: usize,
    states: &[Var],
    pad_mask: &[bool],
    causal: bool,
) -> Result<Option<Var>> {
    if layer == 0 || states.len() < layer {
        return Err(Error::Config(format!(
            "context at layer {layer} needs {layer} layer states, got {}",
            states.len()
        )));
    }
    let current = states[layer - 1];
    let n = g.shape(current)[0];
    let broadcast = |g: &mut Graph<'_>, v: Var| -> Result<Var> {
        if causal {
            Ok(v)
        } else {
            g.repeat_rows(v, n)
        }
    };
    match strategy {
        ContextStrategy::None => Ok(None),
        ContextStrategy::Global => {
            let c = if causal {
                build_causal_global_context(g, current)?
            } else {
                build_global_context(g, current, pad_mask)?
            };
            broadcast(g, c).map(Some)
        }
        ContextStrategy::Deep => build_deep_context(g, &states[..layer - 1], layer),
        ContextStrategy::DeepGlobal => {
            let c = build_deep_global_context(g, &states[..layer], pad_mask, causal)?;
            broadcast(g, c).map(Some)
        }
        ContextStrategy::DeepGlobalPlusDeep => {
            let dg = build_deep_global_context(g, &states[..layer], pad_mask, causal)?;
            let dg = broadcast(g, dg)?;
            match build_deep_context(g, &states[..layer - 1], layer)? {
                Some(deep) => g.concat_last_dim(&[dg, deep]).map(Some),
                None => Ok(Some(dg)),
            }
        }
    }
}

fn gate_from_projected(g: &mut Graph<'_>, x: Var, cu: Var, v_h: Var, v_c: Var) -> Result<Var> {
    let a = g.matmul(x, v_h)?;
    let b = g.matmul(cu, v_c)?;
    let s = g.add(a, b)?;
    Ok(g.sigmoid(s))
}

/// `λ = σ(X·v_h + (C·U)·v_c)`, one value per position (`n × 1`).
pub fn gate_lambda(g: &mut Graph<'_>, x: Var, c: Var, u: Var, v_h: Var, v_c: Var) -> Result<Var> {
    let cu = g.matmul(c, u)?;
    if g.shape(cu) != g.shape(x) {
        return Err(Error::dim("gate_lambda", g.shape(x), g.shape(cu)));
    }
    gate_from_projected(g, x, cu, v_h, v_c)
}

pub struct Contextualized {
    pub q: Var,
    pub k: Var,
    pub lambda_q: Option<Var>,
    pub lambda_k: Option<Var>,
}

fn mix_side(g: &mut Graph<'_>, x: Var, c: Var, p: &SideParams, gating: Gating) -> Result<(Var, Option<Var>)> {
    let cu = g.matmul(c, p.u)?;
    if g.shape(cu) != g.shape(x) {
        return Err(Error::dim("contextualize_qk", g.shape(x), g.shape(cu)));
    }
    match gating {
        Gating::Fixed { lambda } => {
            let keep = g.scale(x, 1.0 - lambda);
            let ctx = g.scale(cu, lambda);
            Ok((g.add(keep, ctx)?, None))
        }
        Gating::Learned => {
            let (v_h, v_c) = p
                .v_h
                .zip(p.v_c)
                .ok_or_else(|| Error::Config("learned gating without gate vectors".into()))?;
            let lam = gate_from_projected(g, x, cu, v_h, v_c)?;
            let inv = g.one_minus(lam);
            let keep = g.mul(x, inv)?;
            let ctx = g.mul(cu, lam)?;
            Ok((g.add(keep, ctx)?, Some(lam)))
        }
    }
}

/// `X̂ = (1 − λ) ⊙ X + λ ⊙ (C·U)` on each side enabled by `cfg.sides`;
/// disabled sides pass through untouched.
pub fn contextualize_qk(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    c: Option<Var>,
    params: &ContextParams,
    cfg: &ContextConfig,
) -> Result<Contextualized> {
    cfg.validate()?;
    let mut out = Contextualized {
        q,
        k,
        lambda_q: None,
        lambda_k: None,
    };
    for side in [Side::Query, Side::Key] {
        if !cfg.sides.has(side) {
            continue;
        }
        let c = c.ok_or_else(|| Error::Config(format!("{} side enabled without a context", side.name())))?;
        let p = params
            .side(side)
            .ok_or_else(|| Error::Config(format!("{} side enabled without parameters", side.name())))?;
        let x = if side == Side::Query { q } else { k };
        let (mixed, lam) = mix_side(g, x, c, p, cfg.gating)?;
        match side {
            Side::Query => {
                out.q = mixed;
                out.lambda_q = lam;
            }
            Side::Key => {
                out.k = mixed;
                out.lambda_k = lam;
            }
        }
    }
    Ok(out)
}

/// Self-attention projection weights of one layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Where a self-attention layer sits and what it can draw context from.
pub struct ContextSite<'s> {
    /// 1-indexed layer number.
    pub layer: usize,
    /// `H¹ … Hˡ`, current layer input last.
    pub states: &'s [Var],
    /// `true` for real tokens.
    pub pad_mask: &'s [bool],
    pub causal: bool,
}

/// Captured gate values and attention weights of one self-attention layer.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub lambda_q: Option<Vec<f64>>,
    pub lambda_k: Option<Vec<f64>>,
    /// Per head, `n × n`.
    pub weights: Vec<Tensor>,
}

/// `MultiHead(Att(Q̂, K̂)·V)` with `Q̂`, `K̂` contextualized at full width
/// before the head split. With no context (strategy none, a layer with an
/// empty deep context, or `ctx == None`) this is plain multi-head attention.
#[allow(clippy::too_many_arguments)]
pub fn context_aware_attention(
    g: &mut Graph<'_>,
    h: Var,
    weights: &AttentionWeights,
    ctx: Option<(&ContextParams, &ContextConfig)>,
    heads: &HeadConfig,
    mask: Option<&AttentionMask>,
    site: &ContextSite<'_>,
) -> Result<(Var, AttentionTrace)> {
    let q = g.matmul(h, weights.w_q)?;
    let k = g.matmul(h, weights.w_k)?;
    let v = g.matmul(h, weights.w_v)?;
    let mut trace = AttentionTrace::default();
    let (q, k) = match ctx {
        Some((params, cfg)) => {
            match assemble_context(g, cfg.strategy, site.layer, site.states, site.pad_mask, site.causal)? {
                Some(c) => {
                    let out = contextualize_qk(g, q, k, Some(c), params, cfg)?;
                    trace.lambda_q = out.lambda_q.map(|l| g.value(l).to_vec());
                    trace.lambda_k = out.lambda_k.map(|l| g.value(l).to_vec());
                    (out.q, out.k)
                }
                None => (q, k),
            }
        }
        None => (q, k),
    };
    let mh = multi_head_attention(g, q, k, v, heads, weights.w_o, mask)?;
    trace.weights = mh.weights.iter().map(|&w| g.tensor(w)).collect();
    Ok((mh.output, trace))
}
