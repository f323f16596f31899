//! Central-finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central finite differences with step `h`, over all coordinates.
///
/// `f` must build a scalar loss on the given tape. The relative error per
/// coordinate uses denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&tape, xv);
    assert_eq!(loss.numel(), 1, "grad_check needs a scalar-valued f");
    tape.backward(loss).expect("backward failed in grad_check");
    let analytic = xv.grad().expect("input gradient missing in grad_check");

    let eval = |i: usize, xi: f64| -> f64 {
        let mut shifted = x.clone();
        shifted.data_mut()[i] = xi;
        let t = Tape::new();
        let v = t.leaf(shifted, false);
        f(&t, v).item()
    };

    let mut max_rel: f64 = 0.0;
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let numeric = (eval(i, xi + h) - eval(i, xi - h)) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.4, 0.01]);
        let err = grad_check(|_, v| v.square().sum(), &x, 1e-6);
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn log_softmax_pick_target() {
        // f = mean over rows of log_softmax(x)[., 1]
        let x = Tensor::new(vec![3, 4], vec![
            0.5, -0.2, 1.1, 0.0, -0.7, 0.3, 0.9, -1.5, 2.0, 0.1, -0.4, 0.6,
        ])
        .unwrap();
        let err = grad_check(
            |_, v| v.log_softmax().slice(1, 1, 2).unwrap().mean(),
            &x,
            1e-6,
        );
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(|t, _| t.scalar(5.0), &x, 1e-6);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn conv_mean_matches_finite_differences() {
        // loss = mean(conv1d(x, k)) with fixed kernel
        let x = Tensor::new(vec![1, 12], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let err = grad_check(
            |t, v| {
                let k = t.constant(
                    Tensor::new(vec![2, 1, 3], vec![0.4, -0.3, 0.2, 0.1, 0.6, -0.5]).unwrap(),
                );
                v.conv1d(k, 2).unwrap().mean()
            },
            &x,
            1e-6,
        );
        assert!(err < 1e-5, "err = {err}");
    }
}
