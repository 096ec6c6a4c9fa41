//! Dense-tensor operations with reverse-mode automatic differentiation.

mod check;
mod scalar;
mod tape;
mod tensor;

pub use check::grad_check;
pub use scalar::{normal_cdf, normal_pdf, Scalar};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use crate::error::Result;

/// Plain matrix product of two value tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let ia = tape.leaf(a.clone(), false);
    let ib = tape.leaf(b.clone(), false);
    let c = tape.matmul(ia, ib)?;
    Ok(tape.value(c).clone())
}

/// Row-wise softmax of `tau * x` as a plain value.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let ix = tape.leaf(x.clone(), false);
    let y = tape.softmax_rows(ix, tau)?;
    Ok(tape.value(y).clone())
}

/// Exact Gaussian-CDF GELU as a plain value.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * normal_cdf(v))
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let ix = tape.leaf(x.clone(), false);
    let ig = tape.leaf(gamma.clone(), false);
    let ib = tape.leaf(beta.clone(), false);
    let y = tape.layer_norm(ix, ig, ib, eps)?;
    Ok(tape.value(y).clone())
}

/// Unit-normalize each row. Rows with norm below `eps` pass through as
/// zeros; the returned mask flags them (true = degenerate).
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<bool>)> {
    let mut degenerate = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let norm: f64 = x.row(i).iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
        degenerate.push(norm < eps);
    }
    let mut tape = Tape::new();
    let ix = tape.leaf(x.clone(), false);
    let y = tape.l2_normalize_rows(ix, eps)?;
    Ok((tape.value(y).clone(), degenerate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn rand_matrix(rng: &mut impl Rng, m: usize, n: usize) -> Tensor<f64> {
        let data = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(m, n, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 4, 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - s).abs() <= 1e-5 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_values() {
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = softmax_rows(&x, 1.0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = softmax_rows(&x, 1.0).unwrap();
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let c = 7.25;
        let xs = x.map(|v| v + c);
        let y = softmax_rows(&x, 1.0).unwrap();
        let ys = softmax_rows(&xs, 1.0).unwrap();
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_tau() {
        let x = Tensor::<f64>::zeros(vec![1, 2]);
        assert!(softmax_rows(&x, 0.0).is_err());
        assert!(softmax_rows(&x, -1.0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let gamma = Tensor::vector(vec![1.0, 1.0]);
        let beta = Tensor::vector(vec![0.0, 0.0]);

        let constant = Tensor::matrix(1, 2, vec![3.0, 3.0]).unwrap();
        let y = layer_norm(&constant, &gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));

        let x = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &gamma, &beta, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_matrix(&mut rng, 1, 16);
        let gamma = Tensor::vector(vec![1.0; 16]);
        let beta = Tensor::vector(vec![0.0; 16]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 16.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gelu_values() {
        let x = Tensor::vector(vec![0.0, 1.0, 10.0]);
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841345).abs() < 1e-6);
        assert!((y.data()[2] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_examples() {
        let x = Tensor::matrix(3, 2, vec![3.0, 4.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let (y, mask) = l2_normalize_rows(&x, 1e-12).unwrap();
        assert_eq!(y.row(0), &[0.6, 0.8]);
        assert_eq!(y.row(1), &[1.0, 0.0]);
        assert_eq!(y.row(2), &[0.0, 0.0]);
        assert_eq!(mask, vec![false, false, true]);
    }

    #[test]
    fn backward_quadratic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f64, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_constant_function() {
        // f(x) = sum(softmax(x)) is constant 1, so grad ≈ 0
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 4, vec![0.3f64, -1.0, 2.0, 0.1]).unwrap(), true);
        let s = tape.softmax_rows(x, 1.0).unwrap();
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        for g in grads.get(x).unwrap().data() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f64, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f64]), true);
        let y = tape.leaf(Tensor::vector(vec![5.0f64]), true);
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let w = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap(), false);
                let y = tape.matmul(x, ids[0])?;
                Ok(tape.sum_all(y))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn grad_check_gelu_at_half() {
        let x = Tensor::vector(vec![0.5]);
        let err = grad_check(
            |tape, ids| {
                let y = tape.gelu(ids[0]);
                Ok(tape.sum_all(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_matrix(&mut rng, 5, 7);
        let b = rand_matrix(&mut rng, 7, 3);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1, c2);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in 1usize..8, n in 1usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_matrix(&mut rng, m, n);
            let y = softmax_rows(&x, 2.0).unwrap();
            for i in 0..m {
                let s: f64 = y.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(y.row(i).iter().all(|&v| v > 0.0 && v < 1.0 + 1e-12));
            }
        }

        #[test]
        fn grad_check_random_composites(seed in 0u64..40) {
            // matmul → layer_norm → gelu → softmax → sum, randomized shapes up to 16×32
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(1..=16);
            let k = rng.gen_range(1..=8);
            let n = rng.gen_range(1..=32);
            let w = rand_matrix(&mut rng, k, n);
            let gamma = Tensor::vector((0..n).map(|_| rng.gen_range(0.5..1.5)).collect());
            let beta = Tensor::vector((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect());
            let x = rand_matrix(&mut rng, m, k);
            let err = grad_check(
                move |tape, ids| {
                    let xi = tape.leaf(x.clone(), false);
                    let h = tape.matmul(xi, ids[0])?;
                    let h = tape.layer_norm(h, ids[1], ids[2], 1e-5)?;
                    let h = tape.gelu(h);
                    let s = tape.softmax_rows(h, 3.0)?;
                    let d = tape.mul(s, s)?;
                    Ok(tape.sum_all(d))
                },
                &[w, gamma, beta],
                1e-5,
            ).unwrap();
            prop_assert!(err < 1e-4, "err = {}", err);
        }
    }
}
