use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxsan::analysis::{collect_lambda_stats, compare_runs, export_comparison_csv, export_lambda_csv};
use ctxsan::autodiff::{finite_diff_gradcheck, GradCheckOptions};
use ctxsan::bench::overhead;
use ctxsan::data::{wrap, Dataset, TaskKind, TaskSpec, RESERVED_IDS};
use ctxsan::model::{load_checkpoint, Model, Pass};
use ctxsan::parallel::Execution;
use ctxsan::train::{evaluate, train_loop, EvalOptions, RunConfig, TrainOptions};
use ctxsan::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ctxsan",
    version,
    about = "Context-aware self-attention: data, training, evaluation and analysis"
)]
struct Cli {
    /// Run data-parallel work on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        vocab: usize,
        /// Inclusive source length range, MIN:MAX.
        #[arg(long, value_parser = parse_range)]
        len: [usize; 2],
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 500)]
        eval_every: u64,
        #[arg(long)]
        quiet: bool,
    },
    /// Greedy-decode a dataset split and report accuracies.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        buckets: usize,
        /// Also report corpus BLEU.
        #[arg(long)]
        bleu: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare backprop gradients with central differences on one example.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        /// Source and target length of the probe example, BOS/EOS included.
        #[arg(long, default_value_t = 5)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Half-width of the uniform noise added to every parameter before
        /// checking. Fresh gates sit at a point where some gradients vanish
        /// exactly, and there the ratio only measures rounding noise.
        #[arg(long, default_value_t = 0.1)]
        jitter: f64,
    },
    /// Export gate statistics of a checkpoint, or compare finished runs.
    Analyze {
        #[arg(long, required_unless_present = "runs", requires = "data")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, num_args = 1.., conflicts_with = "ckpt")]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time forward+backward against the context-free baseline.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        rows: usize,
    },
}

fn parse_range(s: &str) -> std::result::Result<[usize; 2], String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected MIN:MAX, got {s:?}"))?;
    let lo = a.trim().parse().map_err(|e| format!("bad MIN: {e}"))?;
    let hi = b.trim().parse().map_err(|e| format!("bad MAX: {e}"))?;
    Ok([lo, hi])
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::GenData {
            task,
            vocab,
            len,
            n,
            seed,
            out,
        } => {
            let spec = TaskSpec {
                kind: task,
                vocab_size: vocab,
                len_range: len,
                n_samples: n,
                seed,
            };
            let ds = Dataset::generate(&spec)?;
            ds.save(&out)?;
            println!(
                "wrote {} train and {} valid {} pairs to {}",
                ds.train.len(),
                ds.valid.len(),
                task.name(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            steps,
            eval_every,
            quiet,
        } => {
            let cfg = read_config(&config)?;
            let opts = TrainOptions {
                steps,
                eval_every,
                exec,
                verbose: !quiet,
            };
            let s = train_loop(&cfg, &data, &out, &opts)?;
            println!("{}", to_json(&s.final_report));
            println!(
                "steps {}; valid loss {:.4} -> {:.4} (best {:.4})",
                s.steps_run, s.initial_valid_loss, s.final_report.loss, s.best_valid_loss
            );
        }
        Command::Eval {
            ckpt,
            data,
            buckets,
            bleu,
            out,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let cfg = model.config();
            if cfg.src_vocab != ds.vocab_size || cfg.tgt_vocab != ds.vocab_size {
                return Err(Error::Config(format!(
                    "checkpoint vocabularies {}/{} do not match dataset vocabulary {}",
                    cfg.src_vocab, cfg.tgt_vocab, ds.vocab_size
                )));
            }
            let opts = EvalOptions { buckets, exec, bleu };
            let report = evaluate(&model, &ds.valid, &opts)?;
            let text = to_json(&report);
            if let Some(path) = out {
                std::fs::write(&path, format!("{text}\n"))
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            }
            println!("{text}");
        }
        Command::Gradcheck {
            config,
            tol,
            samples,
            seq_len,
            seed,
            jitter,
        } => {
            let cfg = read_config(&config)?;
            let mut model = Model::new(cfg.model)?;
            if !(jitter >= 0.0 && jitter.is_finite()) {
                return Err(Error::Config(format!(
                    "jitter must be finite and non-negative, got {jitter}"
                )));
            }
            if seq_len < 3 || seq_len > model.config().max_len {
                return Err(Error::Config(format!(
                    "seq_len must lie in 3..={}",
                    model.config().max_len
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if jitter > 0.0 {
                for t in model.params_mut().tensors_mut() {
                    for x in t.tensor.data_mut() {
                        *x += rng.gen_range(-jitter..jitter);
                    }
                }
            }
            let mut ids =
                |vocab: usize| -> Vec<usize> { (0..seq_len - 2).map(|_| rng.gen_range(RESERVED_IDS..vocab)).collect() };
            let src = wrap(&ids(model.config().src_vocab));
            let tgt = wrap(&ids(model.config().tgt_vocab));
            let opts = GradCheckOptions {
                tol,
                samples_per_tensor: samples,
                seed,
                exec,
                ..GradCheckOptions::default()
            };
            let report = finite_diff_gradcheck(
                |g, vars| model.sample_loss_graph(g, vars, &src, &tgt, &mut Pass::eval()),
                model.params().tensors(),
                &opts,
            )?;
            println!(
                "max relative error {:.3e} over {} entries",
                report.max_rel_err, report.entries_checked
            );
            println!(
                "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                report.worst_param, report.worst_index, report.worst_analytic, report.worst_numeric
            );
            if !report.passed {
                return Err(Error::Numeric(format!(
                    "gradient check failed: {:.3e} >= tolerance {tol:e}",
                    report.max_rel_err
                )));
            }
            println!("passed (tolerance {tol:e})");
        }
        Command::Analyze { ckpt, data, runs, out } => match ckpt {
            Some(ckpt) => {
                let model = load_checkpoint(&ckpt)?;
                let data = data.expect("clap requires --data with --ckpt");
                let ds = Dataset::load(&data)?;
                let stats = collect_lambda_stats(&model, &ds.valid, exec)?;
                export_lambda_csv(&stats, &out)?;
                for r in stats.rows() {
                    println!(
                        "{} layer {} {}: mean {:.6} std {:.6} over {}",
                        r.block, r.layer, r.side, r.mean_lambda, r.std_lambda, r.count
                    );
                }
            }
            None => {
                let dirs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
                let rows = compare_runs(&dirs)?;
                export_comparison_csv(&rows, &out)?;
                for r in &rows {
                    println!(
                        "{}: {} params {} tok/s {:.1} token acc {:.4} seq acc {:.4}",
                        r.model, r.strategy, r.params, r.tokens_per_sec, r.token_acc, r.seq_acc
                    );
                }
            }
        },
        Command::Bench {
            config,
            seq_len,
            iters,
            rows,
        } => {
            let cfg = read_config(&config)?;
            let r = overhead(&cfg.model, seq_len, rows, iters, exec)?;
            println!("{}", to_json(&r));
            println!(
                "{} vs baseline: train step x{:.3}, forward x{:.3}",
                r.strategy.name(),
                r.train_ratio,
                r.forward_ratio
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
