//! Step-time comparison between a configured model and its context-free baseline.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::ContextStrategy;
use crate::data::{Batch, Pair, RESERVED_IDS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::parallel::Execution;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Median seconds per forward+backward pass over the batch.
    pub train_step_secs: f64,
    pub train_tokens_per_sec: f64,
    /// Median seconds per forward-only pass over the batch.
    pub forward_secs: f64,
    pub forward_tokens_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub seq_len: usize,
    pub rows: usize,
    pub iters: usize,
    pub strategy: ContextStrategy,
    pub baseline: Throughput,
    pub configured: Throughput,
    /// Median of per-iteration configured/baseline forward+backward time.
    pub train_ratio: f64,
    pub forward_ratio: f64,
}

/// `rows` random pairs whose wrapped source and target both have `seq_len` ids.
pub fn synthetic_batch(vocab: usize, seq_len: usize, rows: usize, seed: u64) -> Result<Batch> {
    if seq_len < 3 || rows == 0 || vocab <= RESERVED_IDS {
        return Err(Error::Config(
            "bench needs seq_len >= 3, rows >= 1 and content ids".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = |n| (0..n).map(|_| rng.gen_range(RESERVED_IDS..vocab)).collect::<Vec<_>>();
    let pairs: Vec<Pair> = (0..rows)
        .map(|_| Pair {
            src: ids(seq_len - 2),
            tgt: ids(seq_len - 2),
        })
        .collect();
    let refs: Vec<&Pair> = pairs.iter().collect();
    Ok(Batch::from_pairs(&refs))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time<T>(f: impl FnOnce() -> Result<T>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64())
}

/// Times `cfg` against the same config with strategy none on one synthetic
/// batch. Runs alternate between the two models so drift affects both.
pub fn overhead(
    cfg: &ModelConfig,
    seq_len: usize,
    rows: usize,
    iters: usize,
    exec: Execution,
) -> Result<OverheadReport> {
    if iters == 0 {
        return Err(Error::Config("bench needs at least one iteration".into()));
    }
    let mut cfg = cfg.clone();
    cfg.max_len = cfg.max_len.max(seq_len);
    let mut base_cfg = cfg.clone();
    base_cfg.context.strategy = ContextStrategy::None;
    let configured = Model::new(cfg.clone())?;
    let baseline = Model::new(base_cfg)?;
    let batch = synthetic_batch(cfg.src_vocab.min(cfg.tgt_vocab), seq_len, rows, cfg.seed)?;
    let tokens = (batch.label_tokens()) as f64;

    // Warm-up.
    baseline.loss_and_grads(&batch, exec, None)?;
    configured.loss_and_grads(&batch, exec, None)?;

    let (mut bt, mut ct, mut bf, mut cf, mut tr, mut fr) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..iters {
        let b = time(|| baseline.loss_and_grads(&batch, exec, None))?;
        let c = time(|| configured.loss_and_grads(&batch, exec, None))?;
        let b_f = time(|| baseline.forward_loss(&batch, exec))?;
        let c_f = time(|| configured.forward_loss(&batch, exec))?;
        tr.push(c / b);
        fr.push(c_f / b_f);
        bt.push(b);
        ct.push(c);
        bf.push(b_f);
        cf.push(c_f);
    }
    let through = |train: &mut [f64], fwd: &mut [f64]| {
        let (t, f) = (median(train), median(fwd));
        Throughput {
            train_step_secs: t,
            train_tokens_per_sec: tokens / t,
            forward_secs: f,
            forward_tokens_per_sec: tokens / f,
        }
    };
    Ok(OverheadReport {
        seq_len,
        rows,
        iters,
        strategy: cfg.context.strategy,
        baseline: through(&mut bt, &mut bf),
        configured: through(&mut ct, &mut cf),
        train_ratio: median(&mut tr),
        forward_ratio: median(&mut fr),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_batch_shape() {
        let b = synthetic_batch(16, 10, 3, 1).unwrap();
        assert_eq!(b.rows(), 3);
        assert!((0..3).all(|i| b.src_row(i).len() == 10 && b.tgt_row(i).len() == 10));
        assert!(synthetic_batch(16, 2, 3, 1).is_err());
    }

    #[test]
    fn overhead_report_is_sane() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_len: 8,
            ..ModelConfig::default()
        };
        let r = overhead(&cfg, 12, 2, 3, Execution::Sequential).unwrap();
        assert!(r.train_ratio > 0.0 && r.forward_ratio > 0.0);
        assert!(r.baseline.train_tokens_per_sec > 0.0);
        assert_eq!(r.seq_len, 12);
    }
}
