//! Answer-classification loss: −log softmax(logits)[target], max-subtracted,
//! batch-averaged, with an optional L2 penalty over all trainable weights.

use hvqa_core::nn::Forward;
use hvqa_core::scalar::Scalar;
use hvqa_core::tape::{Tape, Var};
use hvqa_core::tensor::TensorError;

use crate::Result;

/// Mean cross-entropy of `logits[batch, classes]` against integer targets.
/// The gradient is `(softmax(logits) − onehot(target)) / batch`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[u16]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(TensorError::arg(
            "cross_entropy",
            format!("logits {shape:?} against {} targets", targets.len()),
        )
        .into());
    }
    let classes = shape[1];
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= classes) {
        return Err(TensorError::arg(
            "cross_entropy",
            format!("target {bad} out of range for {classes} classes"),
        )
        .into());
    }
    let log_probs = tape.log_softmax(logits, 1)?;
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = tape.take_per_row(log_probs, &idx)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / targets.len() as f64))
}

/// Single-sample convenience: `logits` is `[classes]` or `[1, classes]`.
pub fn cross_entropy_single<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: u16) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let flat = match shape.len() {
        1 => tape.reshape(logits, vec![1, shape[0]])?,
        2 => logits,
        _ => {
            return Err(
                TensorError::shape("cross_entropy", format!("expected vector logits, got {shape:?}"))
                    .into(),
            )
        }
    };
    cross_entropy(tape, flat, &[target])
}

/// Adds `coeff · Σ‖θ‖²` over every trainable parameter to `loss`, on the
/// tape so gradients include the penalty.
pub fn with_weight_decay<T: Scalar>(fwd: &mut Forward<T>, loss: Var, coeff: f64) -> Result<Var> {
    if coeff == 0.0 {
        return Ok(loss);
    }
    let ids = fwd.params.trainable_ids();
    let mut penalty: Option<Var> = None;
    for id in ids {
        let var = fwd.bind(id);
        let sq = fwd.tape.mul(var, var)?;
        let sum = fwd.tape.sum_all(sq);
        penalty = Some(match penalty {
            None => sum,
            Some(acc) => fwd.tape.add(acc, sum)?,
        });
    }
    match penalty {
        None => Ok(loss),
        Some(p) => {
            let scaled = fwd.tape.scale(p, coeff);
            Ok(fwd.tape.add(loss, scaled)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hvqa_core::tensor::Tensor;

    #[test]
    fn uniform_logits_log2() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::from_f64(vec![2], &[0.0, 0.0]).unwrap());
        let loss = cross_entropy_single(&mut tape, logits, 0).unwrap();
        assert!((tape.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn saturated_logits_near_zero_loss() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::from_f64(vec![2], &[30.0, -30.0]).unwrap());
        let loss = cross_entropy_single(&mut tape, logits, 0).unwrap();
        assert!(tape.value(loss)[0] < 1e-9);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::from_f64(vec![1, 3], &[0.2, -0.4, 1.1]).unwrap());
        let loss = cross_entropy(&mut tape, logits, &[2]).unwrap();
        tape.backward(loss).unwrap();
        let vals: Vec<f64> = tape.value(logits).to_vec();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let grad = tape.grad(logits);
        for (i, g) in grad.iter().enumerate() {
            let want = exps[i] / total - if i == 2 { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-9, "{g} vs {want}");
        }
    }

    #[test]
    fn out_of_range_target_rejected() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(cross_entropy(&mut tape, logits, &[3]).is_err());
    }
}
