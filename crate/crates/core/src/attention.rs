//! Scaled dot-product and multi-head attention with padding and causal masks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, MASK_SENTINEL};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which keys each query may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_q: usize,
    n_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n_q: usize, n_k: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n_q * n_k {
            return Err(Error::dim("attention_mask", &[n_q, n_k], &[allowed.len()]));
        }
        let mask = AttentionMask { n_q, n_k, allowed };
        mask.validate()?;
        Ok(mask)
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Contract("causal mask of size 0".into()));
        }
        let allowed = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        Ok(AttentionMask {
            n_q: n,
            n_k: n,
            allowed,
        })
    }

    /// Every query sees exactly the non-pad keys (`key_real[j] == true`).
    pub fn key_padding(n_q: usize, key_real: &[bool]) -> Result<Self> {
        let n_k = key_real.len();
        let allowed = (0..n_q).flat_map(|_| key_real.iter().copied()).collect();
        AttentionMask::new(n_q, n_k, allowed)
    }

    /// Entries allowed by both masks.
    pub fn intersect(&self, other: &AttentionMask) -> Result<Self> {
        if (self.n_q, self.n_k) != (other.n_q, other.n_k) {
            return Err(Error::dim(
                "mask_intersect",
                &[self.n_q, self.n_k],
                &[other.n_q, other.n_k],
            ));
        }
        let allowed = self.allowed.iter().zip(&other.allowed).map(|(&a, &b)| a && b).collect();
        AttentionMask::new(self.n_q, self.n_k, allowed)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_q, self.n_k)
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n_k + j]
    }

    pub fn allowed_in_row(&self, i: usize) -> usize {
        self.allowed[i * self.n_k..(i + 1) * self.n_k]
            .iter()
            .filter(|&&a| a)
            .count()
    }

    fn validate(&self) -> Result<()> {
        match (0..self.n_q).find(|&i| self.allowed_in_row(i) == 0) {
            Some(row) => Err(Error::MaskedOutRow { row }),
            None => Ok(()),
        }
    }

    /// `0` where allowed, the masking sentinel elsewhere.
    pub fn additive_bias(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_SENTINEL })
            .collect();
        Tensor::new(vec![self.n_q, self.n_k], data).expect("mask dims are non-zero")
    }
}

pub fn make_causal_mask(n: usize) -> Result<AttentionMask> {
    AttentionMask::causal(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl HeadConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible into {n_heads} heads"
            )));
        }
        Ok(HeadConfig { d_model, n_heads })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `Q = H·W_Q`, `K = H·W_K`, `V = H·W_V`.
pub fn project_qkv(g: &mut Graph<'_>, h: Var, w_q: Var, w_k: Var, w_v: Var) -> Result<(Var, Var, Var)> {
    Ok((g.matmul(h, w_q)?, g.matmul(h, w_k)?, g.matmul(h, w_v)?))
}

fn check_mask(g: &Graph<'_>, q: Var, k: Var, mask: &AttentionMask) -> Result<()> {
    let (nq, nk) = (g.shape(q)[0], g.shape(k)[0]);
    if mask.dims() != (nq, nk) {
        return Err(Error::dim("attention mask", &[nq, nk], &[mask.n_q, mask.n_k]));
    }
    mask.validate()
}

fn attend(g: &mut Graph<'_>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::dim("scaled_dot_attention", &qs, &ks));
    }
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let scores = match bias {
        Some(b) => g.add(scores, b)?,
        None => scores,
    };
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// `softmax(Q·Kᵀ/√d_h + mask)·V`; returns the output and the weight matrix.
pub fn scaled_dot_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Var)> {
    let bias = match mask {
        Some(m) => {
            check_mask(g, q, k, m)?;
            Some(g.constant(m.additive_bias()))
        }
        None => None,
    };
    attend(g, q, k, v, bias)
}

pub struct MultiHeadOutput {
    pub output: Var,
    /// One `n_q × n_k` weight matrix per head.
    pub weights: Vec<Var>,
}

/// Splits full-width `Q`, `K`, `V` into contiguous head slices, attends per
/// head with divisor `√d_head`, concatenates and projects by `W_O`.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    cfg: &HeadConfig,
    w_o: Var,
    mask: Option<&AttentionMask>,
) -> Result<MultiHeadOutput> {
    let cfg = HeadConfig::new(cfg.d_model, cfg.n_heads)?;
    for x in [q, k, v] {
        if g.shape(x).len() != 2 || g.shape(x)[1] != cfg.d_model {
            return Err(Error::dim("multi_head_attention", g.shape(x), &[cfg.d_model]));
        }
    }
    let bias = match mask {
        Some(m) => {
            check_mask(g, q, k, m)?;
            Some(g.constant(m.additive_bias()))
        }
        None => None,
    };
    let dh = cfg.d_head();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let (o, w) = attend(g, qh, kh, vh, bias)?;
        heads.push(o);
        weights.push(w);
    }
    let cat = g.concat_last_dim(&heads)?;
    let output = g.matmul(cat, w_o)?;
    Ok(MultiHeadOutput { output, weights })
}
