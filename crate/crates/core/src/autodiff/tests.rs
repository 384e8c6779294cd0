use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::tensor::{NamedTensor, Tensor};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let eye = Tensor::eye(2);
    let b = Tensor::from_rows(&[&[5.0], &[6.0]]);
    let zeros = Tensor::zeros(&[2, 3]);
    let mut g = Graph::new();
    let (va, vi, vb, vz) = (g.param(&a), g.param(&eye), g.param(&b), g.param(&zeros));
    let ai = g.matmul(va, vi).unwrap();
    assert_eq!(g.value(ai), a.data());
    let ab = g.matmul(va, vb).unwrap();
    assert_eq!(g.value(ab), &[17.0, 39.0]);
    assert_eq!(g.shape(ab), &[2, 1]);
    let az = g.matmul(va, vz).unwrap();
    assert!(g.value(az).iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let mut g = Graph::new();
    let (va, vb) = (g.param(&a), g.param(&b));
    match g.matmul(va, vb) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.scalar(s), 0.5);
    let l3 = g.constant(Tensor::scalar(3f64.ln()));
    let s3 = g.sigmoid(l3);
    assert!((g.scalar(s3) - 0.75).abs() < 1e-15);

    let row = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
    let ten = g.constant(Tensor::new(vec![1, 1], vec![10.0]).unwrap());
    let sum = g.add(row, ten).unwrap();
    assert_eq!(g.value(sum), &[11.0, 12.0]);

    let m = g.constant(Tensor::zeros(&[2, 3]));
    let bad = g.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(g.add(m, bad), Err(Error::Dimension { .. })));
    let bad_row = g.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(g.mul(m, bad_row), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_examples() {
    let x = Tensor::from_rows(&[
        &[0.0, 0.0, 0.0],
        &[1f64.ln(), 2f64.ln(), 3f64.ln()],
        &[0.0, MASK_SENTINEL, 0.0],
    ]);
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.softmax_rows(v).unwrap();
    let y = g.tensor(y);
    assert!(close(y.row(0), &[1.0 / 3.0; 3], 1e-15));
    assert!(close(y.row(1), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15));
    assert!(close(y.row(2), &[0.5, 0.0, 0.5], 1e-15));

    let two = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, MASK_SENTINEL]]);
    let v = g.constant(two);
    let y = g.softmax_rows(v).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5, 1.0, 0.0]);
}

#[test]
fn masked_mean_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::from_rows(&[&[2.0, -1.0], &[2.0, -1.0], &[2.0, -1.0]]));
    let m = g.masked_mean_rows(c, &[true; 3]).unwrap();
    assert_eq!(g.value(m), &[2.0, -1.0]);
    let x = g.constant(Tensor::from_rows(&[&[1.0, 3.0], &[5.0, 7.0]]));
    let m = g.masked_mean_rows(x, &[true, true]).unwrap();
    assert_eq!(g.value(m), &[3.0, 5.0]);
    let y = g.constant(Tensor::from_rows(&[&[1.0], &[9.0]]));
    let m = g.masked_mean_rows(y, &[true, false]).unwrap();
    assert_eq!(g.value(m), &[1.0]);
    assert!(matches!(g.masked_mean_rows(y, &[false, false]), Err(Error::EmptyMean)));
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    let ab = g.concat_last_dim(&[a, b]).unwrap();
    assert_eq!(g.shape(ab), &[2, 5]);
    let l = g.constant(Tensor::from_rows(&[&[1.0], &[2.0]]));
    let r = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
    let lr = g.concat_last_dim(&[l, r]).unwrap();
    assert_eq!(g.value(lr), &[1.0, 3.0, 2.0, 4.0]);
    let single = g.concat_last_dim(&[l]).unwrap();
    assert_eq!(g.value(single), g.value(l));
    let c = g.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(g.concat_last_dim(&[l, c]), Err(Error::Dimension { .. })));
    assert!(matches!(g.concat_last_dim(&[]), Err(Error::EmptyConcat)));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::filled(&[3], 1.0));
    let zeros3 = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::from_rows(&[&[1.0, 1.0, 1.0]]));
    let y = g.layer_norm(x, ones, zeros3, 1e-6).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);

    let ones2 = g.constant(Tensor::filled(&[2], 1.0));
    let zeros2 = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::from_rows(&[&[1.0, 3.0]]));
    let y = g.layer_norm(x, ones2, zeros2, 1e-6).unwrap();
    assert!(close(g.value(y), &[-1.0, 1.0], 1e-5));

    let bias = g.constant(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
    let y = g.layer_norm(x, zeros2, bias, 1e-6).unwrap();
    assert_eq!(g.value(y), &[0.3, -0.7]);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::zeros(&[3, 4]));
    let l = g.cross_entropy(uniform, &[0, 2, 3], 99).unwrap();
    assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
    let sat = g.constant(Tensor::from_rows(&[&[10.0, -10.0]]));
    let l = g.cross_entropy(sat, &[0], 99).unwrap();
    assert!(g.scalar(l) < 1e-4);
    assert!(matches!(g.cross_entropy(uniform, &[0, 0, 0], 0), Err(Error::EmptyLoss)));
}

#[test]
fn backward_examples() {
    let x = Tensor::new(vec![5], vec![0.1, -2.0, 3.0, 0.0, 7.5]).unwrap();
    let mut g = Graph::new();
    let vx = g.param(&x);
    let m = g.mean(vx);
    g.backward(m).unwrap();
    assert!(g.grad(vx).unwrap().iter().all(|&d| (d - 0.2).abs() < 1e-15));

    let zero = Tensor::scalar(0.0);
    let mut g = Graph::new();
    let vz = g.param(&zero);
    let s = g.sigmoid(vz);
    g.backward(s).unwrap();
    assert_eq!(g.grad(vz).unwrap(), &[0.25]);

    // used twice: d/dx (x + x) = 2
    let mut g = Graph::new();
    let vx = g.param(&x);
    let twice = g.add(vx, vx).unwrap();
    let s = g.sum(twice);
    g.backward(s).unwrap();
    assert!(g.grad(vx).unwrap().iter().all(|&d| d == 2.0));

    let mut g = Graph::new();
    let vx = g.param(&x);
    assert!(matches!(g.backward(vx), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let w = Tensor::from_rows(&[&[1.0, 2.0]]);
    let mut g = Graph::new();
    let c = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
    let vw = g.param(&w);
    let y = g.matmul(vw, c).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(vw).unwrap(), &[3.0, 4.0]);
}

fn params(specs: &[(&str, &[usize])], seed: u64) -> Vec<NamedTensor> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            NamedTensor::new(*name, Tensor::new(shape.to_vec(), data).unwrap())
        })
        .collect()
}

#[test]
fn gradcheck_linear_is_exact() {
    let ps = params(&[("w", &[3, 2]), ("b", &[2])], 3);
    let x = Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[0.0, 1.0, 1.0]]);
    let report = finite_diff_gradcheck(
        |g, v| {
            let xv = g.constant(x.clone());
            let y = g.matmul(xv, v[0])?;
            let y = g.add_bias(y, v[1])?;
            Ok(g.sum(y))
        },
        &ps,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-8, "{report:?}");
    assert_eq!(report.entries_checked, 8);
}

#[test]
fn gradcheck_rejects_invalid_step() {
    let ps = params(&[("w", &[2])], 1);
    let opts = GradCheckOptions {
        step: 0.0,
        ..Default::default()
    };
    let r = finite_diff_gradcheck(|g, v| Ok(g.sum(v[0])), &ps, &opts);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn gradcheck_reports_non_finite_loss() {
    let ps = params(&[("w", &[2])], 1);
    let r = finite_diff_gradcheck(
        |g, v| {
            let s = g.scale(v[0], f64::INFINITY);
            Ok(g.sum(s))
        },
        &ps,
        &GradCheckOptions::default(),
    );
    assert!(matches!(r, Err(Error::Numeric(_))));
}

/// Every differentiable op chained together, checked against central differences.
#[test]
fn gradcheck_all_ops_composition() {
    let ps = params(
        &[
            ("table", &[6, 4]),
            ("w", &[4, 4]),
            ("gate", &[4, 1]),
            ("gain", &[4]),
            ("bias", &[4]),
            ("out", &[8, 5]),
        ],
        11,
    );
    let report = finite_diff_gradcheck(
        |g, v| {
            let h = g.gather_rows(v[0], &[1, 3, 3, 0, 5])?;
            let q = g.matmul(h, v[1])?;
            let k = g.matmul_nt(h, v[1])?; // 5×4
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, 0.5);
            let a = g.softmax_rows(s)?;
            let o = g.matmul(a, h)?;
            let lam = g.matmul(o, v[2])?;
            let lam = g.sigmoid(lam);
            let inv = g.one_minus(lam);
            let mixed_a = g.mul(o, inv)?;
            let pm = g.prefix_mean_rows(h)?;
            let mixed_b = g.mul(pm, lam)?;
            let mixed = g.add(mixed_a, mixed_b)?;
            let glob = g.masked_mean_rows(mixed, &[true, false, true, true, true])?;
            let rep = g.repeat_rows(glob, 5)?;
            let diff = g.sub(mixed, rep)?;
            let ln = g.layer_norm(diff, v[3], v[4], 1e-6)?;
            let r = g.relu(ln);
            let cat = g.concat_last_dim(&[r, mixed])?;
            let logits = g.matmul(cat, v[5])?;
            let sl = g.slice_cols(logits, 0, 5)?;
            let ce = g.cross_entropy(sl, &[0, 4, 2, 1, 3], 7)?;
            let extra = g.add_scalar(ce, 1.0);
            Ok(extra)
        },
        &ps,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let y = g.tensor(y);
        for i in 0..rows {
            let s: f64 = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(y.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn matmul_identity_is_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
        let eye = Tensor::eye(cols);
        let mut g = Graph::new();
        let (vx, vi) = (g.param(&x), g.param(&eye));
        let y = g.matmul(vx, vi).unwrap();
        prop_assert_eq!(g.shape(y), x.shape());
        prop_assert!(g.tensor(y).max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn full_mask_mean_gradient_sums_to_one_per_column(rows in 1usize..6, cols in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let mut g = Graph::new();
        let vx = g.param(&x);
        let m = g.masked_mean_rows(vx, &vec![true; rows]).unwrap();
        let plain = g.mean(vx);
        // unmasked mean of all entries equals mean of the column means
        let mm = g.mean(m);
        prop_assert!((g.scalar(mm) - g.scalar(plain)).abs() < 1e-12);
        // weight each column separately by picking one column's mean as the loss
        for col in 0..cols {
            let mut g = Graph::new();
            let vx = g.param(&x);
            let m = g.masked_mean_rows(vx, &vec![true; rows]).unwrap();
            let row = g.repeat_rows(m, 1).unwrap();
            let pick = g.slice_cols(row, col, 1).unwrap();
            let s = g.sum(pick);
            g.backward(s).unwrap();
            let gr = g.grad(vx).unwrap();
            let colsum: f64 = (0..rows).map(|i| gr[i * cols + col]).sum();
            prop_assert!((colsum - 1.0).abs() < 1e-12);
        }
    }
}
