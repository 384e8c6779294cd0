//! Greedy-decoding evaluation, length buckets and corpus BLEU.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{wrap, Pair};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel::{map_ordered, Execution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub min_src_len: usize,
    pub max_src_len: usize,
    pub count: usize,
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    /// Mean per-token cross-entropy under teacher forcing.
    pub loss: f64,
    pub buckets: Vec<BucketReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub buckets: usize,
    pub exec: Execution,
    /// Decode to `max_len` and report corpus BLEU.
    pub bleu: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            buckets: 10,
            exec: Execution::default(),
            bleu: false,
        }
    }
}

/// Positions where `pred` agrees with `reference`, after truncating or
/// padding `pred` to the reference length.
pub fn position_matches(pred: &[usize], reference: &[usize]) -> usize {
    reference.iter().zip(pred).filter(|(a, b)| a == b).count()
}

/// Splits `0..n` sorted by `key` into `k` contiguous groups whose sizes differ
/// by at most one. Ties keep their original order.
pub fn equal_count_buckets(keys: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    let n = order.len();
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for b in 0..k {
        let size = n / k + usize::from(b < n % k);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

struct Scored {
    matches: usize,
    ref_len: usize,
    exact: bool,
    loss_sum: f64,
    labels: usize,
    hyp: Vec<usize>,
}

/// Greedy-decodes every pair and scores it against the reference.
pub fn evaluate(model: &Model, pairs: &[Pair], opts: &EvalOptions) -> Result<EvalReport> {
    let cfg = model.config();
    for p in pairs {
        if let Some(&id) = p.src.iter().find(|&&t| t >= cfg.src_vocab) {
            return Err(Error::Config(format!(
                "source id {id} outside the model vocabulary of {}",
                cfg.src_vocab
            )));
        }
        if let Some(&id) = p.tgt.iter().find(|&&t| t >= cfg.tgt_vocab) {
            return Err(Error::Config(format!(
                "target id {id} outside the model vocabulary of {}",
                cfg.tgt_vocab
            )));
        }
    }
    if opts.buckets == 0 {
        return Err(Error::Contract("need at least one length bucket".into()));
    }
    let scored: Vec<Result<Scored>> = map_ordered(opts.exec, pairs, |p| {
        // One step past the reference decides both accuracies exactly;
        // BLEU needs the unconstrained hypothesis.
        let steps = if opts.bleu { cfg.max_len } else { p.tgt.len() + 1 };
        let hyp = model.greedy_decode(&p.src, steps)?;
        let tgt = wrap(&p.tgt);
        let labels = tgt.len() - 1;
        let loss = model.sample_loss(&wrap(&p.src), &tgt)?;
        Ok(Scored {
            matches: position_matches(&hyp, &p.tgt),
            ref_len: p.tgt.len(),
            exact: hyp == p.tgt,
            loss_sum: loss * labels as f64,
            labels,
            hyp,
        })
    });
    let scored = scored.into_iter().collect::<Result<Vec<_>>>()?;

    let summarize = |idx: &[usize]| -> (f64, f64) {
        let m: usize = idx.iter().map(|&i| scored[i].matches).sum();
        let r: usize = idx.iter().map(|&i| scored[i].ref_len).sum();
        let e = idx.iter().filter(|&&i| scored[i].exact).count();
        let tok = if r == 0 { 0.0 } else { m as f64 / r as f64 };
        let seq = if idx.is_empty() {
            0.0
        } else {
            e as f64 / idx.len() as f64
        };
        (tok, seq)
    };
    let all: Vec<usize> = (0..scored.len()).collect();
    let (token_accuracy, sequence_accuracy) = summarize(&all);
    let labels: usize = scored.iter().map(|s| s.labels).sum();
    let loss = if labels == 0 {
        0.0
    } else {
        scored.iter().map(|s| s.loss_sum).sum::<f64>() / labels as f64
    };
    let lens: Vec<usize> = pairs.iter().map(|p| p.src.len()).collect();
    let buckets = equal_count_buckets(&lens, opts.buckets)
        .iter()
        .map(|idx| {
            let (tok, seq) = summarize(idx);
            BucketReport {
                min_src_len: idx.iter().map(|&i| lens[i]).min().unwrap_or(0),
                max_src_len: idx.iter().map(|&i| lens[i]).max().unwrap_or(0),
                count: idx.len(),
                token_accuracy: tok,
                sequence_accuracy: seq,
            }
        })
        .collect();
    let bleu = opts.bleu.then(|| {
        let hyps: Vec<&[usize]> = scored.iter().map(|s| s.hyp.as_slice()).collect();
        let refs: Vec<&[usize]> = pairs.iter().map(|p| p.tgt.as_slice()).collect();
        corpus_bleu(&hyps, &refs)
    });
    Ok(EvalReport {
        n_samples: pairs.len(),
        token_accuracy,
        sequence_accuracy,
        loss,
        buckets,
        bleu,
    })
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with clipped 1..4-gram precisions, uniform weights and the
/// brevity penalty; 0 when any precision is 0.
pub fn corpus_bleu(hyps: &[&[usize]], refs: &[&[usize]]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            matched[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_p.exp()
}
