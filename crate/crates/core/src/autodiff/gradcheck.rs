//! Central-difference verification of `Graph::backward`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::parallel::{map_ordered, Execution};
use crate::tensor::NamedTensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, must lie in `[1e-6, 1e-3]`.
    pub step: f64,
    pub tol: f64,
    /// Entries checked per tensor; tensors at most this large are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            samples_per_tensor: 32,
            seed: 0,
            exec: Execution::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
    pub passed: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval_loss<F>(f: &F, params: &[NamedTensor]) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(&p.tensor)).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares `backward` gradients of the scalar built by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, entry by entry.
pub fn finite_diff_gradcheck<F>(f: F, params: &[NamedTensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var> + Sync + Send,
{
    if !(1e-6..=1e-3).contains(&opts.step) {
        return Err(Error::Contract(format!(
            "finite-difference step {} outside [1e-6, 1e-3]",
            opts.step
        )));
    }

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(&p.tensor)).collect();
        let loss = f(&mut g, &vars)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {}", g.scalar(loss))));
        }
        g.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.tensor.len()], <[f64]>::to_vec))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let n = p.tensor.len();
        if n <= opts.samples_per_tensor {
            entries.extend((0..n).map(|i| (pi, i)));
        } else {
            let mut picked = index::sample(&mut rng, n, opts.samples_per_tensor).into_vec();
            picked.sort_unstable();
            entries.extend(picked.into_iter().map(|i| (pi, i)));
        }
    }

    let h = opts.step;
    let numeric: Vec<Result<f64>> = map_ordered(opts.exec, &entries, |&(pi, i)| {
        let mut work = params.to_vec();
        let orig = work[pi].tensor.data()[i];
        work[pi].tensor.data_mut()[i] = orig + h;
        let plus = eval_loss(&f, &work)?;
        work[pi].tensor.data_mut()[i] = orig - h;
        let minus = eval_loss(&f, &work)?;
        Ok((plus - minus) / (2.0 * h))
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: entries.len(),
        passed: true,
    };
    for (&(pi, i), num) in entries.iter().zip(numeric) {
        let num = num?;
        let ana = analytic[pi][i];
        let err = rel_err(ana, num);
        if err > report.max_rel_err || report.worst_param.is_empty() {
            report.max_rel_err = err;
            report.worst_param = params[pi].name.clone();
            report.worst_index = i;
            report.worst_analytic = ana;
            report.worst_numeric = num;
        }
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}
