//! Segmentation losses on the softmax output.
//!
//! `q` is the `(n, 2, d, h, w)` probability tensor (channel 1 = lesion) and
//! `target` the `(n, 1, d, h, w)` ground truth in `{0, 1}`.

use crate::error::{Error, Result};
use crate::tensor::{add, Backward, Tape, Tensor, Var};

/// Probabilities are clamped to `[Q_MIN, 1 - Q_MIN]` before the logarithm.
pub const Q_MIN: f64 = 1e-12;
/// Added to the Dice denominator.
pub const DICE_GUARD: f64 = 1e-12;

fn lesion_view(q: &Tensor, target: &Tensor) -> Result<(usize, usize)> {
    let [n, c, d, h, w] = q.dims5()?;
    if c != 2 || target.shape() != [n, 1, d, h, w] {
        return Err(Error::contract(format!(
            "loss expects q (n, 2, d, h, w) and target (n, 1, d, h, w), got {:?} and {:?}",
            q.shape(),
            target.shape()
        )));
    }
    Ok((n, d * h * w))
}

/// Lesion-channel probabilities paired with targets.
fn pairs<'a>(q: &'a Tensor, t: &'a Tensor, n: usize, vol: usize) -> impl Iterator<Item = (usize, f64, f64)> + 'a {
    (0..n).flat_map(move |b| {
        (0..vol).map(move |i| ((2 * b + 1) * vol + i, q.data()[(2 * b + 1) * vol + i], t.data()[b * vol + i]))
    })
}

struct BceOp {
    target: Tensor,
}

impl Backward for BceOp {
    fn name(&self) -> &'static str {
        "bce_loss"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let q = inputs[0];
        let (n, vol) = lesion_view(q, &self.target).expect("checked in forward");
        let scale = grad.data()[0] / (n * vol) as f64;
        let mut dq = Tensor::zeros(q.shape());
        let d = dq.data_mut();
        for (i, qv, p) in pairs(q, &self.target, n, vol) {
            if qv > Q_MIN && qv < 1.0 - Q_MIN {
                d[i] = -scale * (p / qv - (1.0 - p) / (1.0 - qv));
            }
        }
        vec![Some(dq)]
    }
}

/// Mean binary cross-entropy of the lesion channel.
pub fn bce_loss(tape: &Tape, q: Var, target: &Tensor) -> Result<Var> {
    let qv = tape.value(q)?;
    let (n, vol) = lesion_view(&qv, target)?;
    let total: f64 = pairs(&qv, target, n, vol)
        .map(|(_, qv, p)| {
            let qc = qv.clamp(Q_MIN, 1.0 - Q_MIN);
            p * qc.ln() + (1.0 - p) * (1.0 - qc).ln()
        })
        .sum();
    let out = Tensor::scalar(-total / (n * vol) as f64);
    Ok(tape.record(
        &[q],
        out,
        Box::new(BceOp {
            target: target.clone(),
        }),
    ))
}

struct DiceOp {
    target: Tensor,
}

/// `(Σ p·q, Σ p² + Σ q² + guard)` over the lesion channel.
fn dice_terms(q: &Tensor, t: &Tensor, n: usize, vol: usize) -> (f64, f64) {
    let (mut inter, mut denom) = (0.0, DICE_GUARD);
    for (_, qv, p) in pairs(q, t, n, vol) {
        inter += p * qv;
        denom += p * p + qv * qv;
    }
    (inter, denom)
}

impl Backward for DiceOp {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let q = inputs[0];
        let (n, vol) = lesion_view(q, &self.target).expect("checked in forward");
        let (inter, denom) = dice_terms(q, &self.target, n, vol);
        let g = grad.data()[0];
        let mut dq = Tensor::zeros(q.shape());
        let d = dq.data_mut();
        for (i, qv, p) in pairs(q, &self.target, n, vol) {
            d[i] = g * (-2.0 * p / denom + 4.0 * inter * qv / (denom * denom));
        }
        vec![Some(dq)]
    }
}

/// Soft Dice loss `1 - 2Σpq / (Σp² + Σq²)` over the whole batch.
pub fn dice_loss(tape: &Tape, q: Var, target: &Tensor) -> Result<Var> {
    let qv = tape.value(q)?;
    let (n, vol) = lesion_view(&qv, target)?;
    let (inter, denom) = dice_terms(&qv, target, n, vol);
    let out = Tensor::scalar(1.0 - 2.0 * inter / denom);
    Ok(tape.record(
        &[q],
        out,
        Box::new(DiceOp {
            target: target.clone(),
        }),
    ))
}

/// Unweighted sum of [`bce_loss`] and [`dice_loss`].
pub fn total_loss(tape: &Tape, q: Var, target: &Tensor) -> Result<Var> {
    let b = bce_loss(tape, q, target)?;
    let d = dice_loss(tape, q, target)?;
    add(tape, b, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-channel probabilities whose lesion channel is `lesion`.
    fn probs(lesion: &[f64]) -> Tensor {
        let n = lesion.len();
        let mut data: Vec<f64> = lesion.iter().map(|q| 1.0 - q).collect();
        data.extend_from_slice(lesion);
        Tensor::new(vec![1, 2, 1, 1, n], data).unwrap()
    }

    fn target(p: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, 1, 1, p.len()], p.to_vec()).unwrap()
    }

    fn eval(f: fn(&Tape, Var, &Tensor) -> Result<Var>, q: &[f64], p: &[f64]) -> f64 {
        let tape = Tape::new();
        let qv = tape.constant(probs(q));
        tape.value(f(&tape, qv, &target(p)).unwrap()).unwrap().item().unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        assert!((eval(bce_loss, &[0.5], &[1.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((eval(bce_loss, &[0.25], &[1.0]) - 4f64.ln()).abs() < 1e-15);
        assert!(eval(bce_loss, &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]) <= 1e-11);
    }

    #[test]
    fn dice_closed_forms() {
        assert!(eval(dice_loss, &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).abs() < 1e-12);
        assert!((eval(dice_loss, &[0.5; 4], &[1.0, 1.0, 0.0, 0.0]) - 1.0 / 3.0).abs() < 1e-12);
        assert!((eval(dice_loss, &[0.0; 3], &[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let (q, p) = ([0.3, 0.8, 0.1, 0.6], [1.0, 1.0, 0.0, 0.0]);
        let t = eval(total_loss, &q, &p);
        assert!((t - (eval(bce_loss, &q, &p) + eval(dice_loss, &q, &p))).abs() <= 1e-15);
        assert!(eval(total_loss, &[1.0, 0.0], &[1.0, 0.0]) < 1e-11);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let tape = Tape::new();
        let q = tape.constant(probs(&[0.5, 0.5]));
        assert!(bce_loss(&tape, q, &target(&[1.0])).is_err());
        assert!(dice_loss(&tape, q, &target(&[1.0, 0.0, 1.0])).is_err());
    }
}
