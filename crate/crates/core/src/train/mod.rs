//! Training loop, optimizer and evaluation.

pub mod eval;
pub mod optim;

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use eval::{corpus_bleu, evaluate, BucketReport, EvalOptions, EvalReport};
pub use optim::{adam_step, clip_global_norm, lr_at, OptimState};

use crate::data::{batchify, write_json, Batch, Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::parallel::Execution;

fn default_warmup() -> u64 {
    400
}

fn default_max_tokens() -> usize {
    256
}

fn default_one() -> f64 {
    1.0
}

/// Model config plus training hyperparameters, as stored in `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    /// Padded-token budget per batch.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "default_one")]
    pub clip_norm: f64,
    /// Multiplier on the warmup schedule.
    #[serde(default = "default_one")]
    pub lr_factor: f64,
    /// Stop at the first evaluation whose token accuracy reaches this.
    #[serde(default)]
    pub target_token_acc: Option<f64>,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        RunConfig {
            model,
            warmup: default_warmup(),
            max_tokens: default_max_tokens(),
            clip_norm: 1.0,
            lr_factor: 1.0,
            target_token_acc: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.warmup == 0 || self.max_tokens == 0 {
            return Err(Error::Config("warmup and max_tokens must be positive".into()));
        }
        if !(self.clip_norm >= 0.0 && self.lr_factor > 0.0) {
            return Err(Error::Config("clip_norm must be >= 0 and lr_factor > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub steps: u64,
    /// Evaluate on the validation split every this many steps; 0 evaluates
    /// only at the start and end.
    pub eval_every: u64,
    pub exec: Execution,
    /// Echo evaluation lines to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_run: u64,
    /// Training loss at every step.
    pub losses: Vec<f64>,
    pub initial_valid_loss: f64,
    pub best_valid_loss: f64,
    /// Step at which `target_token_acc` was reached, if it was.
    pub reached_target_at: Option<u64>,
    pub final_report: EvalReport,
}

struct Log {
    w: BufWriter<File>,
    path: std::path::PathBuf,
}

impl Log {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Log {
            w: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    fn line(&mut self, mut value: serde_json::Value) -> Result<()> {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        value["time"] = json!(now);
        writeln!(self.w, "{value}")
            .and_then(|_| self.w.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn eval_line(step: u64, r: &EvalReport) -> serde_json::Value {
    json!({
        "step": step,
        "valid_loss": r.loss,
        "token_acc": r.token_accuracy,
        "seq_acc": r.sequence_accuracy,
    })
}

/// Trains on `data_dir`, writing `config.json`, `log.jsonl`, `ckpt-best/`,
/// `ckpt-last/` and `eval.json` under `out_dir`. Runs are a pure function of
/// the config and data: timing appears only in `log.jsonl`.
pub fn train_loop(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::load(data_dir)?;
    if cfg.model.src_vocab != ds.vocab_size || cfg.model.tgt_vocab != ds.vocab_size {
        return Err(Error::Config(format!(
            "model vocabularies {}/{} do not match dataset vocabulary {}",
            cfg.model.src_vocab, cfg.model.tgt_vocab, ds.vocab_size
        )));
    }
    if ds.train.is_empty() || ds.valid.is_empty() {
        return Err(Error::Config("dataset needs non-empty train and valid splits".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("config.json"), cfg)?;
    let mut log = Log::create(&out_dir.join("log.jsonl"))?;

    let eval_opts = EvalOptions {
        buckets: 10,
        exec: opts.exec,
        bleu: ds.spec.kind == TaskKind::LexicalTranslate,
    };
    let mut model = Model::new(cfg.model.clone())?;
    let mut optim = OptimState::new(model.params());

    let mut report = evaluate(&model, &ds.valid, &eval_opts)?;
    log.line(eval_line(0, &report))?;
    let initial_valid_loss = report.loss;
    let mut best = report.loss;
    save_checkpoint(&model, &out_dir.join("ckpt-best"))?;

    let mut epoch = 0u64;
    let mut queue: VecDeque<Batch> = VecDeque::new();
    let mut losses = Vec::with_capacity(opts.steps as usize);
    let mut reached_target_at = None;
    let mut evaluated_at = 0;
    let mut step = 0;
    while step < opts.steps {
        step += 1;
        if queue.is_empty() {
            queue.extend(batchify(&ds.train, cfg.max_tokens, cfg.model.seed.wrapping_add(epoch))?);
            epoch += 1;
        }
        let batch = queue.pop_front().expect("refilled above");
        let t0 = Instant::now();
        let dropout_seed = (cfg.model.dropout > 0.0).then(|| cfg.model.seed ^ step.wrapping_mul(0x2545_F491_4F6C_DD1D));
        let mut bg = model.loss_and_grads(&batch, opts.exec, dropout_seed)?;
        if !bg.loss.is_finite() {
            let dump = out_dir.join(format!("nonfinite-batch-step{step}.json"));
            write_json(&dump, &batch)?;
            return Err(Error::Numeric(format!(
                "loss {} at step {step}; batch written to {}",
                bg.loss,
                dump.display()
            )));
        }
        let grad_norm = if cfg.clip_norm > 0.0 {
            clip_global_norm(&mut bg.grads, cfg.clip_norm)
        } else {
            bg.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
        };
        let lr = cfg.lr_factor * lr_at(step, cfg.model.d_model, cfg.warmup)?;
        adam_step(model.params_mut(), &bg.grads, &mut optim, lr)?;
        losses.push(bg.loss);
        let secs = t0.elapsed().as_secs_f64();
        log.line(json!({
            "step": step,
            "loss": bg.loss,
            "lr": lr,
            "grad_norm": grad_norm,
            "tokens_per_sec": bg.tokens as f64 / secs.max(1e-12),
        }))?;

        if (opts.eval_every > 0 && step % opts.eval_every == 0) || step == opts.steps {
            report = evaluate(&model, &ds.valid, &eval_opts)?;
            evaluated_at = step;
            log.line(eval_line(step, &report))?;
            if opts.verbose {
                eprintln!(
                    "step {step}: train loss {:.4}, valid loss {:.4}, token acc {:.4}, seq acc {:.4}",
                    bg.loss, report.loss, report.token_accuracy, report.sequence_accuracy
                );
            }
            if report.loss < best {
                best = report.loss;
                save_checkpoint(&model, &out_dir.join("ckpt-best"))?;
            }
            if cfg.target_token_acc.is_some_and(|t| report.token_accuracy >= t) {
                reached_target_at = Some(step);
                break;
            }
        }
    }
    if evaluated_at != step {
        report = evaluate(&model, &ds.valid, &eval_opts)?;
        log.line(eval_line(step, &report))?;
    }
    save_checkpoint(&model, &out_dir.join("ckpt-last"))?;
    write_json(&out_dir.join("eval.json"), &report)?;
    Ok(TrainSummary {
        steps_run: step,
        losses,
        initial_valid_loss,
        best_valid_loss: best,
        reached_target_at,
        final_report: report,
    })
}
