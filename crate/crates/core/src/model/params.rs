//! Parameter layout, initialization and closed-form parameter accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, NormStyle};
use crate::context::{Block, Side};
use crate::tensor::{NamedTensor, Tensor};

/// Index of a tensor in a [`ParamStore`].
pub type ParamId = usize;

/// Ordered, uniquely named model tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tensors: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        ParamStore { tensors }
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug)]
pub struct LnIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SideIds {
    pub u: ParamId,
    pub v_h: Option<ParamId>,
    pub v_c: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CtxIds {
    pub query: Option<SideIds>,
    pub key: Option<SideIds>,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EncLayerIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ctx: CtxIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
pub struct DecLayerIds {
    pub ln1: LnIds,
    pub self_attn: AttnIds,
    pub ctx: CtxIds,
    pub ln2: LnIds,
    pub cross: AttnIds,
    pub ln3: LnIds,
    pub ffn: FfnIds,
}

/// Where every parameter lives in the store.
#[derive(Clone, Debug)]
pub struct Layout {
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    pub enc: Vec<EncLayerIds>,
    pub enc_final: Option<LnIds>,
    pub dec: Vec<DecLayerIds>,
    pub dec_final: Option<LnIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.specs.push((name, shape.to_vec(), init));
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            gain: self.add(format!("{prefix}.gain"), &[d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), &[d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            w_q: self.add(format!("{prefix}.w_q"), &[d, d], Init::Xavier),
            w_k: self.add(format!("{prefix}.w_k"), &[d, d], Init::Xavier),
            w_v: self.add(format!("{prefix}.w_v"), &[d, d], Init::Xavier),
            w_o: self.add(format!("{prefix}.w_o"), &[d, d], Init::Xavier),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.w1"), &[d, ff], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), &[ff], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), &[ff, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros),
        }
    }

    fn ctx(&mut self, prefix: &str, cfg: &ModelConfig, block: Block, layer: usize) -> CtxIds {
        let d = cfg.d_model;
        let ctx = &cfg.context;
        let d_c = ctx.strategy.context_width(layer, d);
        let mut side = |side: Side| -> Option<SideIds> {
            if !ctx.side_active(block, layer, side, d) {
                return None;
            }
            let s = side.name();
            Some(SideIds {
                u: self.add(format!("{prefix}.ctx.{s}.u"), &[d_c, d], Init::Xavier),
                v_h: ctx
                    .learned()
                    .then(|| self.add(format!("{prefix}.ctx.{s}.v_h"), &[d, 1], Init::Zeros)),
                v_c: ctx
                    .learned()
                    .then(|| self.add(format!("{prefix}.ctx.{s}.v_c"), &[d, 1], Init::Zeros)),
            })
        };
        CtxIds {
            query: side(Side::Query),
            key: side(Side::Key),
        }
    }
}

fn plan(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let pre = cfg.norm_style == NormStyle::Pre;
    let mut b = Builder { specs: Vec::new() };
    let src_embed = b.add("src_embed".into(), &[cfg.src_vocab, d], Init::Xavier);
    let tgt_embed = b.add("tgt_embed".into(), &[cfg.tgt_vocab, d], Init::Xavier);
    let enc = (1..=cfg.n_enc_layers)
        .map(|l| {
            let p = format!("enc.{l}");
            EncLayerIds {
                ln1: b.ln(&format!("{p}.ln1"), d),
                attn: b.attn(&format!("{p}.self_attn"), d),
                ctx: b.ctx(&p, cfg, Block::Encoder, l),
                ln2: b.ln(&format!("{p}.ln2"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, ff),
            }
        })
        .collect();
    let enc_final = pre.then(|| b.ln("enc.final_ln", d));
    let dec = (1..=cfg.n_dec_layers)
        .map(|l| {
            let p = format!("dec.{l}");
            DecLayerIds {
                ln1: b.ln(&format!("{p}.ln1"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ctx: b.ctx(&p, cfg, Block::Decoder, l),
                ln2: b.ln(&format!("{p}.ln2"), d),
                cross: b.attn(&format!("{p}.cross_attn"), d),
                ln3: b.ln(&format!("{p}.ln3"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, ff),
            }
        })
        .collect();
    let dec_final = pre.then(|| b.ln("dec.final_ln", d));
    let out_w = b.add("out.w".into(), &[d, cfg.tgt_vocab], Init::Xavier);
    let out_b = b.add("out.b".into(), &[cfg.tgt_vocab], Init::Zeros);
    let layout = Layout {
        src_embed,
        tgt_embed,
        enc,
        enc_final,
        dec,
        dec_final,
        out_w,
        out_b,
    };
    (layout, b.specs)
}

/// Layout plus the expected `(name, shape)` of every tensor, in store order.
pub fn layout_for(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>)>) {
    let (layout, specs) = plan(cfg);
    (layout, specs.into_iter().map(|(n, s, _)| (n, s)).collect())
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Fresh parameters: Xavier-uniform matrices, unit gains, zero biases and
/// zero gate vectors (so every gate starts at σ(0) = 0.5).
///
/// Each tensor draws from its own stream keyed by name, so tensors shared by
/// two configurations with the same seed are initialized identically.
pub fn init_params(cfg: &ModelConfig) -> (Layout, ParamStore) {
    let (layout, specs) = plan(cfg);
    let tensors = specs
        .into_iter()
        .map(|(name, shape, init)| {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, 1.0),
                Init::Xavier => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(name_stream(&name));
                    let (fan_in, fan_out) = (shape[0], shape[1]);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n = fan_in * fan_out;
                    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                    Tensor::new(shape, data).expect("shape matches data")
                }
            };
            NamedTensor::new(name, t)
        })
        .collect();
    (layout, ParamStore::new(tensors))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub total: usize,
    pub embeddings: usize,
    /// Encoder layers and final norm, excluding context parameters.
    pub encoder: usize,
    /// Decoder layers and final norm, excluding context parameters.
    pub decoder: usize,
    pub output: usize,
    pub context_encoder: usize,
    pub context_decoder: usize,
}

impl ParamBreakdown {
    pub fn context(&self) -> usize {
        self.context_encoder + self.context_decoder
    }
}

/// Context parameters of one block: for each layer `l` and active side,
/// `d_c(l)·d` for `U` plus `d + d` for the gate vectors under learned gating.
pub fn context_param_count(cfg: &ModelConfig, block: Block) -> usize {
    let d = cfg.d_model;
    let layers = match block {
        Block::Encoder => cfg.n_enc_layers,
        Block::Decoder => cfg.n_dec_layers,
    };
    let gate = if cfg.context.learned() { 2 * d } else { 0 };
    (1..=layers)
        .map(|l| {
            let sides = [Side::Query, Side::Key]
                .into_iter()
                .filter(|&s| cfg.context.side_active(block, l, s, d))
                .count();
            sides * (cfg.context.strategy.context_width(l, d) * d + gate)
        })
        .sum()
}

/// Closed-form parameter count, independent of instantiating the model.
pub fn param_count(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let ln = 2 * d;
    let attn = 4 * d * d;
    let ffn = d * ff + ff + ff * d + d;
    let final_ln = if cfg.norm_style == NormStyle::Pre { ln } else { 0 };
    let embeddings = (cfg.src_vocab + cfg.tgt_vocab) * d;
    let encoder = cfg.n_enc_layers * (2 * ln + attn + ffn) + final_ln;
    let decoder = cfg.n_dec_layers * (3 * ln + 2 * attn + ffn) + final_ln;
    let output = d * cfg.tgt_vocab + cfg.tgt_vocab;
    let context_encoder = context_param_count(cfg, Block::Encoder);
    let context_decoder = context_param_count(cfg, Block::Decoder);
    ParamBreakdown {
        total: embeddings + encoder + decoder + output + context_encoder + context_decoder,
        embeddings,
        encoder,
        decoder,
        output,
        context_encoder,
        context_decoder,
    }
}
