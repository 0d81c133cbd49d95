//! Central-finite-difference gradient verification. The numeric side never
//! touches the tape's backward rules, so it stays an independent oracle.

use crate::error::{contract_err, numeric_err, Result};

use super::tape::{Tape, TensorId};
use super::tensor::Tensor;

/// Compare an arbitrary gradient claim against central differences of the
/// matching value function. Returns the worst relative error
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
pub fn grad_check_with<V>(mut value: V, analytic: &[f64], point: &Tensor, eps: f64) -> Result<f64>
where
    V: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 || eps > 1e-2 {
        return Err(contract_err(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    if analytic.len() != point.numel() {
        return Err(contract_err("gradient length does not match point"));
    }
    let mut worst = 0.0_f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = value(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = value(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(numeric_err("non-finite intermediate in finite-difference probe"));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Tape convenience: differentiate `f` at `point` with reverse mode, then
/// check that gradient against central differences of the same `f`.
pub fn grad_check<F>(mut f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    grad_check_with(
        |p| {
            let mut tape = Tape::new();
            let x = tape.constant(p);
            let out = f(&mut tape, x)?;
            tape.scalar_value(out)
        },
        &analytic,
        point,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Reduce any tensor to a scalar with non-trivial weights so every
    /// coordinate of the intermediate contributes to the loss.
    fn weighted_sum(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let n = tape.value(x).len();
        let cols = tape.shape(x).last().copied().unwrap_or(1);
        let rows = n / cols;
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
        let wt = Tensor::new(vec![rows, cols], w).unwrap();
        let wid = tape.constant(&wt);
        let prod = tape.mul(x, wid)?;
        let ones_c = tape.constant(&Tensor::new(vec![cols, 1], vec![1.0; cols]).unwrap());
        let rowsum = tape.matmul(prod, ones_c)?;
        let rt = tape.transpose(rowsum)?;
        let ones_r = tape.constant(&Tensor::new(vec![rows, 1], vec![1.0; rows]).unwrap());
        tape.matmul(rt, ones_r)
    }

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let point = Tensor::scalar(3.0).unwrap();
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let mut rng = StdRng::seed_from_u64(7);
        let point = rand_tensor(&mut rng, vec![1, 8]);
        let err = grad_check(
            |tape, x| tape.cross_entropy(x, &[3], &[true]),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        let point = Tensor::scalar(3.0).unwrap();
        // Claim d(x²)/dx = 3x instead of 2x.
        let wrong = vec![9.0];
        let err = grad_check_with(|p| Ok(p.data()[0] * p.data()[0]), &wrong, &point, 1e-5).unwrap();
        assert!(err > 1e-2, "err = {err}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let point = Tensor::scalar(1.0).unwrap();
        assert!(grad_check_with(|p| Ok(p.data()[0]), &[1.0], &point, 0.5).is_err());
        assert!(grad_check_with(|p| Ok(p.data()[0]), &[1.0], &point, 0.0).is_err());
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let b = rand_tensor(&mut rng, vec![3, 2]);
        let point = rand_tensor(&mut rng, vec![2, 3]);
        let err = grad_check(
            |tape, x| {
                let bid = tape.constant(&b);
                let prod = tape.matmul(x, bid)?;
                weighted_sum(tape, prod)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        let point = rand_tensor(&mut rng, vec![3, 5]);
        let gain = rand_tensor(&mut rng, vec![5]);
        let bias = rand_tensor(&mut rng, vec![5]);
        let err = grad_check(
            |tape, x| {
                let g = tape.constant(&gain);
                let b = tape.constant(&bias);
                let ln = tape.layer_norm(x, g, b, 1e-5)?;
                weighted_sum(tape, ln)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    /// Every primitive against central differences across random shapes.
    #[test]
    fn all_primitives_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(42);
        let mut checked = 0usize;
        for trial in 0..100 {
            let rows = rng.gen_range(1..5usize);
            let cols = rng.gen_range(1..6usize);
            let point = rand_tensor(&mut rng, vec![rows, cols]);
            let other = rand_tensor(&mut rng, vec![rows, cols]);
            let kind = trial % 10;
            let gain = rand_tensor(&mut rng, vec![cols]);
            let bias = rand_tensor(&mut rng, vec![cols]);
            let right_cols = rng.gen_range(1..4usize);
            let right = rand_tensor(&mut rng, vec![cols, right_cols]);
            let scales = rand_tensor(&mut rng, vec![rows]);
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
            let soft_target: Vec<f64> = {
                let raw: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|v| v / sum).collect()
            };
            let err = grad_check(
                |tape, x| {
                    let y = match kind {
                        0 => {
                            let r = tape.constant(&right);
                            tape.matmul(x, r)?
                        }
                        1 => {
                            let o = tape.constant(&other);
                            tape.add(x, o)?
                        }
                        2 => {
                            let o = tape.constant(&other);
                            tape.mul(x, o)?
                        }
                        3 => tape.relu(x)?,
                        4 => tape.sigmoid(x)?,
                        5 => tape.softmax(x)?,
                        6 => {
                            let g = tape.constant(&gain);
                            let b = tape.constant(&bias);
                            tape.layer_norm(x, g, b, 1e-5)?
                        }
                        7 => {
                            let s = tape.constant(&scales);
                            tape.scale_rows(x, s)?
                        }
                        8 => return tape.cross_entropy(x, &targets, &vec![true; rows]),
                        _ => return tape.soft_cross_entropy(x, &soft_target),
                    };
                    weighted_sum(tape, y)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "primitive kind {kind} trial {trial}: err = {err}");
            checked += 1;
        }
        assert_eq!(checked, 100);
    }
}
