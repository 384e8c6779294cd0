//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! and prints one PASS/FAIL line per criterion, followed by a summary.
//!
//! The process exits non-zero when any criterion fails, except for failures
//! listed in `KNOWN_GAPS`, which are still printed as FAIL.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxsan::analysis::{collect_lambda_stats, export_lambda_csv, parse_lambda_csv};
use ctxsan::autodiff::{finite_diff_gradcheck, GradCheckOptions};
use ctxsan::bench::overhead;
use ctxsan::context::{Block, ContextConfig, ContextStrategy, Gating, Placement, Sides};
use ctxsan::data::{wrap, Dataset, TaskKind, TaskSpec, BOS, RESERVED_IDS};
use ctxsan::model::{context_param_count, load_checkpoint, save_checkpoint, LayerTrace, Model, ModelConfig, Pass};
use ctxsan::parallel::Execution;
use ctxsan::train::{train_loop, RunConfig, TrainOptions, TrainSummary};

/// Sub-checks that cannot pass as stated; see the explanation printed with them.
const KNOWN_GAPS: &[&str] = &["3:global"];

struct Outcome {
    passed: bool,
    detail: String,
    /// Names of failing sub-checks, matched against `KNOWN_GAPS` as `"<n>:<name>"`.
    failed_parts: Vec<String>,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Outcome {
            passed,
            detail,
            failed_parts: if passed { vec![] } else { vec!["all".into()] },
        }
    }
}

fn ctx(strategy: ContextStrategy, apply_to: Placement, gating: Gating) -> ContextConfig {
    ContextConfig::new(strategy, apply_to, Sides::Both, gating)
}

fn jitter(model: &mut Model, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut().tensors_mut() {
        for x in t.tensor.data_mut() {
            *x += rng.gen_range(-scale..scale);
        }
    }
}

fn content_ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(RESERVED_IDS..vocab)).collect()
}

/// Content ids of a random length in `lo..=hi`.
fn random_ids(rng: &mut ChaCha8Rng, lo: usize, hi: usize, vocab: usize) -> Vec<usize> {
    let n = rng.gen_range(lo..=hi);
    content_ids(rng, n, vocab)
}

// ---------------------------------------------------------------------------

fn reduction_equivalence() -> Outcome {
    let base_cfg = ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        src_vocab: 20,
        tgt_vocab: 20,
        max_len: 16,
        ..ModelConfig::default()
    };
    let mut base = Model::new(base_cfg.clone()).unwrap();
    jitter(&mut base, 0.2, 101);

    let mut worst = 0.0f64;
    for strategy in ContextStrategy::ALL {
        let cfg = ModelConfig {
            context: ctx(strategy, Placement::Both, Gating::Fixed { lambda: 0.0 }),
            ..base_cfg.clone()
        };
        let mut m = Model::new(cfg).unwrap();
        // Share every baseline tensor; context projections keep a jittered init.
        jitter(&mut m, 0.2, 202);
        for t in m.params_mut().tensors_mut() {
            if let Some(id) = base.params().find(&t.name) {
                t.tensor = base.params().get(id).clone();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..=12);
            let m_len = rng.gen_range(1..=12);
            let src = wrap(&content_ids(&mut rng, n, 20));
            let mut tgt_in = vec![BOS];
            tgt_in.extend(content_ids(&mut rng, m_len, 20));

            let eb = base.encode(&src).unwrap();
            let ec = m.encode(&src).unwrap();
            worst = worst.max(eb.states.max_abs_diff(&ec.states));
            let db = base.decode_teacher_forced(&tgt_in, &eb.states).unwrap();
            let dc = m.decode_teacher_forced(&tgt_in, &ec.states).unwrap();
            worst = worst.max(db.logits.max_abs_diff(&dc.logits));
        }
    }
    Outcome::new(
        worst < 1e-9,
        format!("5 strategies x 20 inputs, max |diff| {worst:.2e} (tol 1e-9)"),
    )
}

fn gradient_fidelity() -> Outcome {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        context: ctx(ContextStrategy::DeepGlobalPlusDeep, Placement::Both, Gating::Learned),
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg).unwrap();
    // Away from the zero-gate init, where some gradients vanish identically.
    jitter(&mut model, 0.1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let src = wrap(&content_ids(&mut rng, 3, 16));
    let tgt = wrap(&content_ids(&mut rng, 3, 16));
    let opts = GradCheckOptions {
        samples_per_tensor: 32,
        seed: 3,
        ..GradCheckOptions::default()
    };
    let r = finite_diff_gradcheck(
        |g, vars| model.sample_loss_graph(g, vars, &src, &tgt, &mut Pass::eval()),
        model.params().tensors(),
        &opts,
    )
    .unwrap();
    Outcome::new(
        r.max_rel_err < 1e-4,
        format!(
            "{} entries over {} tensors, max rel err {:.2e} at {}[{}] (tol 1e-4)",
            r.entries_checked,
            model.params().len(),
            r.max_rel_err,
            r.worst_param,
            r.worst_index
        ),
    )
}

fn parameter_accounting() -> Outcome {
    // Deltas read off the reported totals (88.0M baseline, each rounded to 0.1M).
    let expected = [
        (ContextStrategy::Global, 3.0),
        (ContextStrategy::DeepGlobal, 11.0),
        (ContextStrategy::Deep, 7.9),
        (ContextStrategy::DeepGlobalPlusDeep, 18.9),
    ];
    let mut parts = Vec::new();
    let mut failed = Vec::new();
    for (strategy, want) in expected {
        let cfg = ModelConfig {
            d_model: 512,
            n_heads: 8,
            n_enc_layers: 6,
            n_dec_layers: 6,
            d_ff: 2048,
            context: ctx(strategy, Placement::Encoder, Gating::Learned),
            ..ModelConfig::default()
        };
        let got = context_param_count(&cfg, Block::Encoder) as f64 / 1e6;
        let ok = (got - want).abs() <= 0.05;
        if !ok {
            failed.push(strategy.name().to_string());
        }
        parts.push(format!(
            "{} {:.3}M vs {:.1}M {}",
            strategy.name(),
            got,
            want,
            if ok { "ok" } else { "off" }
        ));
    }
    let mut detail = parts.join("; ");
    if failed.iter().any(|f| f == "global") {
        detail.push_str(
            ". global: 6 layers x 2 sides x (512x512 + 2x512) = 3.158M; a 3.0M delta \
             rounded from 0.1M totals allows at most 3.1M",
        );
    }
    Outcome {
        passed: failed.is_empty(),
        detail,
        failed_parts: failed,
    }
}

fn causality() -> Outcome {
    let mut worst = 0.0f64;
    let mut trials = 0;
    for (si, strategy) in ContextStrategy::ALL.into_iter().enumerate() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_len: 16,
            context: ctx(strategy, Placement::Decoder, Gating::Learned),
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg).unwrap();
        jitter(&mut model, 0.3, 40 + si as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(400 + si as u64);
        for _ in 0..10 {
            trials += 1;
            let src = wrap(&random_ids(&mut rng, 1, 8, 16));
            let m = rng.gen_range(2..=12);
            let mut tgt = vec![BOS];
            tgt.extend(content_ids(&mut rng, m - 1, 16));
            let t = rng.gen_range(0..m - 1);
            let mut perturbed = tgt.clone();
            for x in &mut perturbed[t + 1..] {
                *x = RESERVED_IDS + (*x - RESERVED_IDS + rng.gen_range(1..12)) % 12;
            }
            let enc = model.encode(&src).unwrap().states;
            let a = model.decode_teacher_forced(&tgt, &enc).unwrap().logits;
            let b = model.decode_teacher_forced(&perturbed, &enc).unwrap().logits;
            for i in 0..=t {
                for (x, y) in a.row(i).iter().zip(b.row(i)) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    Outcome::new(
        worst < 1e-9,
        format!("{trials} trials, max prefix logit change {worst:.2e} (tol 1e-9)"),
    )
}

fn permutation_equivariance() -> Outcome {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        d_ff: 32,
        max_len: 16,
        positional_encoding: false,
        context: ctx(ContextStrategy::Global, Placement::Encoder, Gating::Learned),
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg).unwrap();
    jitter(&mut model, 0.3, 55);
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(2..=12);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..16)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<usize> = perm.iter().map(|&p| ids[p]).collect();
        let a = model.encode(&ids).unwrap().states;
        let b = model.encode(&permuted).unwrap().states;
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in b.row(i).iter().zip(a.row(p)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Outcome::new(
        worst < 1e-9,
        format!("20 trials, max |f(Px) - Pf(x)| {worst:.2e} (tol 1e-9)"),
    )
}

fn softmax_and_gate_ranges() -> Outcome {
    let mut worst_row = 0.0f64;
    let (mut lam_min, mut lam_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut fresh_exact = true;
    let mut fresh_count = 0usize;
    let mut fresh_sum = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for (si, strategy) in ContextStrategy::ALL.into_iter().enumerate() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 4,
            n_enc_layers: 3,
            n_dec_layers: 3,
            d_ff: 32,
            context: ctx(strategy, Placement::Both, Gating::Learned),
            ..ModelConfig::default()
        };
        let fresh = Model::new(cfg).unwrap();
        let mut trained_like = fresh.clone();
        jitter(&mut trained_like, 0.5, 600 + si as u64);
        for _ in 0..4 {
            let src = wrap(&random_ids(&mut rng, 1, 10, 16));
            let mut tgt = vec![BOS];
            tgt.extend(random_ids(&mut rng, 1, 10, 16));
            for (model, is_fresh) in [(&fresh, true), (&trained_like, false)] {
                let enc = model.encode(&src).unwrap();
                let dec = model.decode_teacher_forced(&tgt, &enc.states).unwrap();
                let traces: Vec<&LayerTrace> = enc.traces.iter().chain(&dec.traces).collect();
                for tr in traces {
                    for w in &tr.weights {
                        for i in 0..w.rows() {
                            worst_row = worst_row.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
                        }
                    }
                    for l in tr.lambda_q.iter().chain(&tr.lambda_k).flatten() {
                        if is_fresh {
                            fresh_exact &= *l == 0.5;
                            fresh_count += 1;
                            fresh_sum += l;
                        } else {
                            lam_min = lam_min.min(*l);
                            lam_max = lam_max.max(*l);
                        }
                    }
                }
            }
        }
    }
    let fresh_mean = fresh_sum / fresh_count as f64;
    let in_range = lam_min > 0.0 && lam_max < 1.0;
    Outcome::new(
        worst_row < 1e-9 && in_range && fresh_exact && fresh_mean == 0.5,
        format!(
            "max |row sum - 1| {worst_row:.2e}; jittered lambda min {lam_min:.3e}, 1 - max {:.3e}; \
             fresh lambda mean {fresh_mean} over {fresh_count}, all exactly 0.5: {fresh_exact}",
            1.0 - lam_max
        ),
    )
}

struct RunResult {
    summary: TrainSummary,
    secs: f64,
}

fn train_run(cfg: &RunConfig, data: &Path, out: &Path, steps: u64) -> RunResult {
    let opts = TrainOptions {
        steps,
        eval_every: 250,
        exec: Execution::default(),
        verbose: false,
    };
    let t = Instant::now();
    let summary = train_loop(cfg, data, out, &opts).unwrap();
    RunResult {
        summary,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn desk_config(strategy: ContextStrategy, target: Option<f64>) -> RunConfig {
    let model = ModelConfig {
        d_model: 64,
        n_heads: 4,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ff: 256,
        src_vocab: 16,
        tgt_vocab: 16,
        max_len: 16,
        context: ctx(
            strategy,
            if strategy == ContextStrategy::DeepGlobalPlusDeep {
                Placement::Both
            } else {
                Placement::Encoder
            },
            Gating::Learned,
        ),
        ..ModelConfig::default()
    };
    RunConfig {
        target_token_acc: target,
        ..RunConfig::new(model)
    }
}

fn desk_data(kind: TaskKind, dir: &Path) {
    Dataset::generate(&TaskSpec {
        kind,
        vocab_size: 16,
        len_range: [3, 12],
        n_samples: 5000,
        seed: 1,
    })
    .unwrap()
    .save(dir)
    .unwrap();
}

fn desk_training(root: &Path) -> Outcome {
    let copy = root.join("copy");
    let maj = root.join("majority");
    desk_data(TaskKind::Copy, &copy);
    desk_data(TaskKind::MajorityTag, &maj);

    let mut parts = Vec::new();
    let mut ok = true;
    for strategy in [ContextStrategy::None, ContextStrategy::DeepGlobalPlusDeep] {
        let r = train_run(
            &desk_config(strategy, Some(0.99)),
            &copy,
            &root.join(format!("copy-{}", strategy.name())),
            5000,
        );
        let acc = r.summary.final_report.token_accuracy;
        let pass = acc >= 0.99 && r.secs <= 900.0;
        ok &= pass;
        parts.push(format!(
            "copy/{} token acc {:.4} at step {} in {:.0}s",
            strategy.name(),
            acc,
            r.summary.steps_run,
            r.secs
        ));
    }

    let g = train_run(
        &desk_config(ContextStrategy::Global, Some(0.95)),
        &maj,
        &root.join("majority-global"),
        8000,
    );
    let g_acc = g.summary.final_report.token_accuracy;
    ok &= g_acc >= 0.95;
    parts.push(format!(
        "majority/global token acc {:.4} at step {} in {:.0}s",
        g_acc, g.summary.steps_run, g.secs
    ));
    // Reported only: the baseline gets the step budget the global model used.
    let b = train_run(
        &desk_config(ContextStrategy::None, None),
        &maj,
        &root.join("majority-none"),
        g.summary.steps_run,
    );
    parts.push(format!(
        "majority/none (reported) token acc {:.4} at step {}",
        b.summary.final_report.token_accuracy, b.summary.steps_run
    ));
    Outcome::new(ok, parts.join("; "))
}

fn overhead_bound() -> Outcome {
    let cfg = ModelConfig {
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        max_len: 66,
        context: ctx(ContextStrategy::DeepGlobalPlusDeep, Placement::Both, Gating::Learned),
        ..ModelConfig::default()
    };
    let r = overhead(&cfg, 64, 1, 10, Execution::default()).unwrap();
    Outcome::new(
        r.train_ratio <= 2.0,
        format!(
            "forward+backward x{:.3} ({:.1} ms vs {:.1} ms), forward x{:.3} (bound 2.0)",
            r.train_ratio,
            r.configured.train_step_secs * 1e3,
            r.baseline.train_step_secs * 1e3,
            r.forward_ratio
        ),
    )
}

fn small_run_config() -> RunConfig {
    let model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        context: ctx(ContextStrategy::DeepGlobalPlusDeep, Placement::Both, Gating::Learned),
        ..ModelConfig::default()
    };
    RunConfig {
        warmup: 20,
        max_tokens: 96,
        ..RunConfig::new(model)
    }
}

fn reproducibility(root: &Path) -> Outcome {
    let data = root.join("repro-data");
    Dataset::generate(&TaskSpec {
        kind: TaskKind::Reverse,
        vocab_size: 16,
        len_range: [2, 8],
        n_samples: 200,
        seed: 4,
    })
    .unwrap()
    .save(&data)
    .unwrap();
    let cfg = small_run_config();
    let mut blobs = Vec::new();
    for (name, exec) in [
        ("a", Execution::default()),
        ("b", Execution::default()),
        ("seq", Execution::Sequential),
    ] {
        let opts = TrainOptions {
            steps: 40,
            eval_every: 20,
            exec,
            verbose: false,
        };
        train_loop(&cfg, &data, &root.join(format!("repro-{name}")), &opts).unwrap();
        blobs.push(std::fs::read(root.join(format!("repro-{name}/ckpt-last/weights.bin"))).unwrap());
    }
    let same = blobs[0] == blobs[1];
    let seq_same = blobs[0] == blobs[2];
    Outcome::new(
        same,
        format!(
            "two 40-step runs: {} bytes, identical {same}; sequential path identical {seq_same}",
            blobs[0].len()
        ),
    )
}

fn persistence(root: &Path) -> Outcome {
    let original = root.join("repro-a/ckpt-last");
    let first = load_checkpoint(&original).unwrap();
    let again = root.join("persist/ckpt");
    save_checkpoint(&first, &again).unwrap();
    let same_file = |f: &str| std::fs::read(original.join(f)).unwrap() == std::fs::read(again.join(f)).unwrap();
    let ckpt_ok = same_file("weights.bin") && same_file("manifest.json");

    let data = Dataset::load(&root.join("repro-data")).unwrap();
    let csv_a = root.join("persist/lambda-a.csv");
    let csv_b = root.join("persist/lambda-b.csv");
    let stats = collect_lambda_stats(&first, &data.valid, Execution::default()).unwrap();
    export_lambda_csv(&stats, &csv_a).unwrap();
    let reloaded = load_checkpoint(&again).unwrap();
    let stats_b = collect_lambda_stats(&reloaded, &data.valid, Execution::Sequential).unwrap();
    export_lambda_csv(&stats_b, &csv_b).unwrap();
    let csv_ok = std::fs::read(&csv_a).unwrap() == std::fs::read(&csv_b).unwrap();
    let rows = parse_lambda_csv(&csv_a).unwrap();
    let parse_ok = rows.len() == stats.rows().len();
    Outcome::new(
        ckpt_ok && csv_ok && parse_ok,
        format!(
            "checkpoint save->load->save identical {ckpt_ok}; lambda CSV re-export identical {csv_ok} ({} rows)",
            rows.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(usize, &str, f64, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "reduction equivalence", 10.0, Box::new(reduction_equivalence)),
        (2, "gradient fidelity", 120.0, Box::new(gradient_fidelity)),
        (3, "parameter accounting", 1.0, Box::new(parameter_accounting)),
        (4, "causality", 30.0, Box::new(causality)),
        (
            5,
            "permutation equivariance",
            f64::INFINITY,
            Box::new(permutation_equivariance),
        ),
        (
            6,
            "softmax and gate ranges",
            f64::INFINITY,
            Box::new(softmax_and_gate_ranges),
        ),
        (
            7,
            "desk-scale training",
            f64::INFINITY,
            Box::new(|| desk_training(root.path())),
        ),
        (8, "overhead bound", f64::INFINITY, Box::new(overhead_bound)),
        (
            9,
            "reproducibility",
            f64::INFINITY,
            Box::new(|| reproducibility(root.path())),
        ),
        (10, "persistence", f64::INFINITY, Box::new(|| persistence(root.path()))),
    ];

    let mut unexpected = Vec::new();
    let mut passed = 0;
    for (n, name, budget, check) in &criteria {
        let t = Instant::now();
        let mut out = check();
        let secs = t.elapsed().as_secs_f64();
        if secs > *budget {
            out.passed = false;
            out.failed_parts.push("runtime".into());
            out.detail.push_str(&format!("; runtime {secs:.1}s over {budget}s"));
        }
        let known = !out.passed
            && out
                .failed_parts
                .iter()
                .all(|p| KNOWN_GAPS.contains(&format!("{n}:{p}").as_str()));
        let tag = match (out.passed, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known gap)",
            (false, false) => "FAIL",
        };
        println!("[{tag}] criterion {n:>2} {name} ({secs:.1}s): {}", out.detail);
        std::io::stdout().flush().ok();
        if out.passed {
            passed += 1;
        } else if !known {
            unexpected.push(*n);
        }
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
