//! Gate-value statistics and run comparison reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::{Block, ContextStrategy, Gating, Side};
use crate::data::{read_json, wrap, Pair};
use crate::error::{Error, Result};
use crate::model::{param_count, LayerTrace, Model};
use crate::parallel::{map_ordered, Execution};
use crate::train::{EvalReport, RunConfig};

/// Streaming count, mean and sum of squared deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Count-weighted combination of two disjoint samples.
    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        Moments {
            count: n,
            mean: self.mean + delta * nb / n as f64,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n as f64,
        }
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }
}

/// `(block, layer, side)`, ordered encoder before decoder, query before key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GateKey {
    block: u8,
    pub layer: usize,
    side: u8,
}

impl GateKey {
    pub fn new(block: Block, layer: usize, side: Side) -> Self {
        GateKey {
            block: match block {
                Block::Encoder => 0,
                Block::Decoder => 1,
            },
            layer,
            side: match side {
                Side::Query => 0,
                Side::Key => 1,
            },
        }
    }

    pub fn block(&self) -> Block {
        if self.block == 0 {
            Block::Encoder
        } else {
            Block::Decoder
        }
    }

    pub fn side(&self) -> Side {
        if self.side == 0 {
            Side::Query
        } else {
            Side::Key
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LambdaStats {
    pub entries: BTreeMap<GateKey, Moments>,
}

impl LambdaStats {
    pub fn add_traces(&mut self, traces: &[LayerTrace]) {
        for t in traces {
            for (side, lam) in [(Side::Query, &t.lambda_q), (Side::Key, &t.lambda_k)] {
                if let Some(values) = lam {
                    let m = self.entries.entry(GateKey::new(t.block, t.layer, side)).or_default();
                    values.iter().for_each(|&x| m.push(x));
                }
            }
        }
    }

    pub fn merge(&self, other: &LambdaStats) -> LambdaStats {
        let mut entries = self.entries.clone();
        for (k, m) in &other.entries {
            let merged = entries.get(k).map_or(*m, |a| a.merge(m));
            entries.insert(*k, merged);
        }
        LambdaStats { entries }
    }

    pub fn rows(&self) -> Vec<LambdaRow> {
        self.entries
            .iter()
            .map(|(k, m)| LambdaRow {
                block: k.block().name().to_string(),
                layer: k.layer,
                side: k.side().name().to_string(),
                mean_lambda: m.mean,
                std_lambda: m.std(),
                count: m.count,
            })
            .collect()
    }
}

/// Shards of this many examples are collected independently and merged.
const SHARD: usize = 32;

/// Gate statistics over `pairs`: the source runs through the encoder and the
/// gold target prefix through the decoder, and every position of every
/// layer with a learned gate contributes its λ.
pub fn collect_lambda_stats(model: &Model, pairs: &[Pair], exec: Execution) -> Result<LambdaStats> {
    let ctx = &model.config().context;
    if ctx.strategy == ContextStrategy::None {
        return Err(Error::NothingToCollect("the model has no context strategy".into()));
    }
    if let Gating::Fixed { lambda } = ctx.gating {
        return Err(Error::NothingToCollect(format!("gates are fixed at {lambda}")));
    }
    let shards: Vec<&[Pair]> = pairs.chunks(SHARD).collect();
    let parts = map_ordered(exec, &shards, |shard| -> Result<LambdaStats> {
        let mut stats = LambdaStats::default();
        for p in shard.iter() {
            let enc = model.encode(&wrap(&p.src))?;
            stats.add_traces(&enc.traces);
            let tgt = wrap(&p.tgt);
            let dec = model.decode_teacher_forced(&tgt[..tgt.len() - 1], &enc.states)?;
            stats.add_traces(&dec.traces);
        }
        Ok(stats)
    });
    parts
        .into_iter()
        .try_fold(LambdaStats::default(), |acc, s| Ok(acc.merge(&s?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub block: String,
    pub layer: usize,
    pub side: String,
    pub mean_lambda: f64,
    pub std_lambda: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub strategy: String,
    pub params: usize,
    pub tokens_per_sec: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::csv(path, e)))
        .collect()
}

pub const LAMBDA_HEADER: [&str; 6] = ["block", "layer", "side", "mean_lambda", "std_lambda", "count"];
pub const COMPARISON_HEADER: [&str; 6] = ["model", "strategy", "params", "tokens_per_sec", "token_acc", "seq_acc"];

/// `block,layer,side,mean_lambda,std_lambda,count` with six decimals.
pub fn export_lambda_csv(stats: &LambdaStats, path: &Path) -> Result<()> {
    write_csv(
        path,
        &LAMBDA_HEADER,
        stats.rows().into_iter().map(|r| {
            vec![
                r.block,
                r.layer.to_string(),
                r.side,
                f6(r.mean_lambda),
                f6(r.std_lambda),
                r.count.to_string(),
            ]
        }),
    )
}

pub fn parse_lambda_csv(path: &Path) -> Result<Vec<LambdaRow>> {
    read_csv(path)
}

/// `model,strategy,params,tokens_per_sec,token_acc,seq_acc` with six decimals.
pub fn export_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    write_csv(
        path,
        &COMPARISON_HEADER,
        rows.iter().map(|r| {
            vec![
                r.model.clone(),
                r.strategy.clone(),
                r.params.to_string(),
                f6(r.tokens_per_sec),
                f6(r.token_acc),
                f6(r.seq_acc),
            ]
        }),
    )
}

pub fn parse_comparison_csv(path: &Path) -> Result<Vec<ComparisonRow>> {
    read_csv(path)
}

/// Median of the `tokens_per_sec` entries in a run's `log.jsonl`.
fn median_throughput(log: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
    let mut xs: Vec<f64> = text
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v.get("tokens_per_sec").and_then(serde_json::Value::as_f64))
        .collect();
    if xs.is_empty() {
        return Ok(0.0);
    }
    xs.sort_by(f64::total_cmp);
    Ok(xs[xs.len() / 2])
}

/// One comparison row per run directory (`config.json`, `eval.json`,
/// `log.jsonl`), named after the directory.
pub fn compare_runs(run_dirs: &[&Path]) -> Result<Vec<ComparisonRow>> {
    run_dirs
        .iter()
        .map(|dir| {
            let cfg: RunConfig = read_json(&dir.join("config.json"))?;
            let eval: EvalReport = read_json(&dir.join("eval.json"))?;
            Ok(ComparisonRow {
                model: dir
                    .file_name()
                    .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into()),
                strategy: cfg.model.context.strategy.name().to_string(),
                params: param_count(&cfg.model).total,
                tokens_per_sec: median_throughput(&dir.join("log.jsonl"))?,
                token_acc: eval.token_accuracy,
                seq_acc: eval.sequence_accuracy,
            })
        })
        .collect()
}
