use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Floor applied to row norms before division.
pub const NORM_EPS: f64 = 1e-12;

fn expect_rank2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::dim(
            op,
            format!("expected a rank-2 tensor, got {s:?}"),
        )),
    }
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`, accumulating in f64.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_rank2("matmul", a)?;
    let (k2, n) = expect_rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: [{m}x{k}] · [{k2}x{n}]"),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        let mut acc = vec![0.0f64; n];
        for (p, &x) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let x = x.wide();
            if x == 0.0 {
                continue;
            }
            for (s, &y) in acc.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *s += x * y.wide();
            }
        }
        for (o, s) in row.iter_mut().zip(acc) {
            *o = T::of(s);
        }
    });
    Tensor::from_parts(vec![m, n], out).ensure_finite("matmul")
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_rank2("matmul_nt", a)?;
    let (n, k2) = expect_rank2("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim(
            "matmul_nt",
            format!("row widths differ: [{m}x{k}] · [{n}x{k2}]ᵀ"),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        let ar = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &bd[j * k..(j + 1) * k];
            let s: f64 = ar.iter().zip(br).map(|(x, y)| x.wide() * y.wide()).sum();
            *o = T::of(s);
        }
    });
    Tensor::from_parts(vec![m, n], out).ensure_finite("matmul_nt")
}

/// Euclidean norm of every row of a rank-2 tensor.
pub fn row_norms<T: Real>(x: &Tensor<T>) -> Result<Vec<f64>> {
    expect_rank2("row_norms", x)?;
    Ok(x.rows()
        .map(|r| r.iter().map(|v| v.wide() * v.wide()).sum::<f64>().sqrt())
        .collect())
}

/// Divides every row by `max(‖row‖₂, NORM_EPS)`; zero rows stay zero.
pub fn l2_normalize_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = expect_rank2("l2_normalize_rows", x)?;
    let norms = row_norms(x)?;
    let mut out = x.clone();
    par::for_each_chunk_mut(out.data_mut(), cols, |i, row| {
        let inv = 1.0 / norms[i].max(NORM_EPS);
        for v in row {
            *v = T::of(v.wide() * inv);
        }
    });
    out.ensure_finite("l2_normalize_rows")
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (b, n) = expect_rank2("softmax_cross_entropy", logits)?;
    if targets.len() != b {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{} targets for a batch of {b}", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Index {
            op: "softmax_cross_entropy",
            index: bad,
            bound: n,
        });
    }
    let inv_b = 1.0 / b as f64;
    let mut grad = vec![T::zero(); b * n];
    let mut loss = 0.0f64;
    for ((row, g), &t) in logits.rows().zip(grad.chunks_exact_mut(n)).zip(targets) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.wide()));
        let exps: Vec<f64> = row.iter().map(|v| (v.wide() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[t].wide() - max);
        for (j, (gj, e)) in g.iter_mut().zip(&exps).enumerate() {
            let p = e / z;
            let onehot = if j == t { 1.0 } else { 0.0 };
            *gj = T::of((p - onehot) * inv_b);
        }
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    let grad = Tensor::from_parts(vec![b, n], grad).ensure_finite("softmax_cross_entropy")?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    fn naive_matmul(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[8, 8]);
        let b = random(&mut rng, &[8, 8]);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((*g as f64 - e).abs() <= 1e-5);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension { .. })));
        assert!(matches!(
            matmul(&t(&[6], &[0.0; 6]), &a),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn matmul_nt_equals_matmul_with_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, &[4, 6]);
        let b = random(&mut rng, &[5, 6]);
        let mut bt = vec![0.0f32; 30];
        for i in 0..5 {
            for j in 0..6 {
                bt[j * 5 + i] = b.data()[i * 6 + j];
            }
        }
        let bt = t(&[6, 5], &bt);
        let x = matmul_nt(&a, &b).unwrap();
        let y = matmul(&a, &bt).unwrap();
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() <= 1e-6);
        }
    }

    #[test]
    fn normalize_examples() {
        let r = l2_normalize_rows(&t(&[1, 2], &[3.0, 4.0])).unwrap();
        assert!((r.data()[0] - 0.6).abs() < 1e-7 && (r.data()[1] - 0.8).abs() < 1e-7);
        let z = l2_normalize_rows(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_random_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[5, 7]);
        let y = l2_normalize_rows(&x).unwrap();
        for r in y.rows() {
            let n: f64 = r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6, "{n}");
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let (l, _) = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = softmax_cross_entropy(&t(&[1, 2], &[10.0, -10.0]), &[0]).unwrap();
        let expected = (-20.0f64).exp().ln_1p();
        assert!((l - expected).abs() / expected < 1e-6, "{l} vs {expected}");
        assert!((l - 2.06e-9).abs() < 0.01e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let r = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]);
        assert!(matches!(r, Err(Error::Index { index: 2, .. })));
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[3, 4]).scale(2.0).cast::<f64>();
        let targets = [1, 3, 0];
        let (_, g) = softmax_cross_entropy(&x, &targets).unwrap();
        let h = 1e-3;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (softmax_cross_entropy(&p, &targets).unwrap().0
                - softmax_cross_entropy(&m, &targets).unwrap().0)
                / (2.0 * h);
            let a = g.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-3, "entry {i}: analytic {a} fd {fd}");
        }
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[3, 4]);
            let b = random(&mut rng, &[4, 2]);
            let c = random(&mut rng, &[2, 5]);
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                prop_assert!((x - y).abs() <= 1e-4);
            }
        }

        #[test]
        fn normalize_is_idempotent(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[rows, cols]);
            let once = l2_normalize_rows(&x).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn cross_entropy_is_nonnegative(seed in any::<u64>(), n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[4, n]).scale(5.0);
            let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..n)).collect();
            let (l, _) = softmax_cross_entropy(&x, &targets).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn cross_entropy_of_equal_logits_is_ln_n(v in -50.0f32..50.0, n in 1usize..12) {
            let x = Tensor::filled(&[2, n], v);
            let (l, _) = softmax_cross_entropy(&x, &[0, n - 1]).unwrap();
            prop_assert!((l - (n as f64).ln()).abs() <= 1e-12);
        }
    }
}
