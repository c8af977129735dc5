//! Central finite-difference gradient checking.
//!
//! The numeric side re-evaluates a pure forward closure at `x ± h` and never
//! touches the backward pass, so it stays an independent oracle for the
//! analytic gradients produced by the tape. Checks run in `f64`; the default
//! step is 1e-5 and the acceptance threshold is a relative error below 1e-4
//! under `|analytic − numeric| / max(1, |numeric|)`.

use rand_chacha::ChaCha8Rng;

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Number of randomly sampled coordinates to probe per tensor.
    pub points: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            points: 20,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks analytic gradients of `loss(tensors)` against central differences.
///
/// `loss` must be a pure function of the tensors (fresh tape per call).
/// `analytic[t]` holds ∂loss/∂tensors[t]. For each tensor, `cfg.points`
/// coordinates are sampled with `rng` (all coordinates when the tensor is
/// smaller than that).
pub fn check_gradients(
    loss: &dyn Fn(&[Tensor<f64>]) -> f64,
    tensors: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport {
    assert_eq!(tensors.len(), analytic.len());
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = tensors.to_vec();
    for t in 0..tensors.len() {
        let n = tensors[t].numel();
        let coords: Vec<usize> = if n <= cfg.points {
            (0..n).collect()
        } else {
            (0..cfg.points).map(|_| rng::below(rng, n)).collect()
        };
        for c in coords {
            let probe = |step: f64, work: &mut Vec<Tensor<f64>>| -> f64 {
                let original = work[t].data()[c];
                work[t].data_mut()[c] = original + step;
                let plus = loss(work);
                work[t].data_mut()[c] = original - step;
                let minus = loss(work);
                work[t].data_mut()[c] = original;
                (plus - minus) / (2.0 * step)
            };
            let numeric = probe(cfg.step, &mut work);
            let mut err = relative_error(analytic[t].data()[c], numeric);
            if err >= cfg.rel_tol {
                // The coarse window may straddle a ReLU kink; a genuine
                // analytic error persists at a smaller step.
                let refined = probe(cfg.step / 100.0, &mut work);
                err = relative_error(analytic[t].data()[c], refined);
            }
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((t, c));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::from_f64(vec![3], &[0.5, -1.2, 2.0]).unwrap();
        let loss = |ts: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(ts[0].clone());
            let sq = tape.mul(v, v).unwrap();
            let l = tape.sum_all(sq);
            tape.value(l)[0]
        };
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let l = tape.sum_all(sq);
        tape.backward(l).unwrap();
        let grads = vec![tape.grad_tensor(v)];
        let mut rng = rng::stream_rng(0, 0);
        let report = check_gradients(&loss, &[x], &grads, &GradCheckConfig::default(), &mut rng);
        assert!(report.passed(1e-4), "max err {}", report.max_rel_err);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let loss = |ts: &[Tensor<f64>]| ts[0].data().iter().map(|v| v * v).sum::<f64>();
        let wrong = vec![Tensor::from_f64(vec![2], &[1.0, 1.0]).unwrap()];
        let mut rng = rng::stream_rng(0, 1);
        let report = check_gradients(&loss, &[x], &wrong, &GradCheckConfig::default(), &mut rng);
        assert!(!report.passed(1e-4));
    }
}
