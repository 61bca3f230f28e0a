//! Elementwise and channel-wise primitives shared by every layer.

use super::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

struct AddOp;

impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, grad: &Tensor, _: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        needs.iter().map(|&n| n.then(|| grad.clone())).collect()
    }
}

/// Elementwise sum of two tensors of identical shape.
pub fn add(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let (x, y) = (tape.value(a)?, tape.value(b)?);
    same_shape(&x, &y, "add")?;
    let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
    let out = Tensor::new(x.shape().to_vec(), data)?;
    Ok(tape.record(&[a, b], out, Box::new(AddOp)))
}

struct MulOp;

impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let scaled = |other: &Tensor| {
            let data = grad.data().iter().zip(other.data()).map(|(g, o)| g * o).collect();
            Tensor::new(grad.shape().to_vec(), data).expect("shape preserved")
        };
        vec![
            needs[0].then(|| scaled(inputs[1])),
            needs[1].then(|| scaled(inputs[0])),
        ]
    }
}

/// Elementwise product of two tensors of identical shape.
pub fn mul(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let (x, y) = (tape.value(a)?, tape.value(b)?);
    same_shape(&x, &y, "mul")?;
    let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
    let out = Tensor::new(x.shape().to_vec(), data)?;
    Ok(tape.record(&[a, b], out, Box::new(MulOp)))
}

struct SumOp;

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))]
    }
}

/// Sum of all elements, as a one-element tensor.
pub fn sum(tape: &Tape, a: Var) -> Result<Var> {
    let x = tape.value(a)?;
    let out = Tensor::scalar(x.data().iter().sum());
    Ok(tape.record(&[a], out, Box::new(SumOp)))
}

struct ReluOp;

impl Backward for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let data = grad
            .data()
            .iter()
            .zip(inputs[0].data())
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(grad.shape().to_vec(), data).expect("shape preserved"))]
    }
}

/// `max(0, x)`; the subgradient at exactly zero is zero. NaN passes through
/// so that a corrupt input surfaces as a non-finite loss.
pub fn relu(tape: &Tape, a: Var) -> Result<Var> {
    let x = tape.value(a)?;
    let data = x.data().iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect();
    let out = Tensor::new(x.shape().to_vec(), data)?;
    Ok(tape.record(&[a], out, Box::new(ReluOp)))
}

struct ConcatOp {
    ca: usize,
    cb: usize,
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let [n, _, d, h, w] = grad.dims5().expect("rank 5");
        let vol = d * h * w;
        let split = |offset: usize, ch: usize| {
            let mut out = Vec::with_capacity(n * ch * vol);
            for b in 0..n {
                let start = (b * (self.ca + self.cb) + offset) * vol;
                out.extend_from_slice(&grad.data()[start..start + ch * vol]);
            }
            Tensor::new(vec![n, ch, d, h, w], out).expect("split shape")
        };
        debug_assert_eq!(inputs.len(), 2);
        vec![
            needs[0].then(|| split(0, self.ca)),
            needs[1].then(|| split(self.ca, self.cb)),
        ]
    }
}

/// Concatenates two rank-5 tensors along the channel axis.
pub fn concat_channels(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let (x, y) = (tape.value(a)?, tape.value(b)?);
    let [n, ca, d, h, w] = x.dims5()?;
    let [nb, cb, db, hb, wb] = y.dims5()?;
    if (n, d, h, w) != (nb, db, hb, wb) {
        return Err(Error::contract(format!(
            "concat_channels: non-channel dims differ, {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let vol = d * h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * vol);
    for i in 0..n {
        data.extend_from_slice(&x.data()[i * ca * vol..(i + 1) * ca * vol]);
        data.extend_from_slice(&y.data()[i * cb * vol..(i + 1) * cb * vol]);
    }
    let out = Tensor::new(vec![n, ca + cb, d, h, w], data)?;
    Ok(tape.record(&[a, b], out, Box::new(ConcatOp { ca, cb })))
}

struct SoftmaxOp;

impl Backward for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(&self, grad: &Tensor, _: &[&Tensor], output: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let [n, c, d, h, w] = output.dims5().expect("rank 5");
        let vol = d * h * w;
        let (s, g) = (output.data(), grad.data());
        let mut dz = vec![0.0; s.len()];
        for b in 0..n {
            let base = b * c * vol;
            for v in 0..vol {
                let dot: f64 = (0..c).map(|k| s[base + k * vol + v] * g[base + k * vol + v]).sum();
                for k in 0..c {
                    let i = base + k * vol + v;
                    dz[i] = s[i] * (g[i] - dot);
                }
            }
        }
        vec![Some(Tensor::new(output.shape().to_vec(), dz).expect("shape preserved"))]
    }
}

/// Per-voxel softmax across the channel axis, computed with max-subtraction
/// so that large logits do not overflow.
pub fn softmax_channels(tape: &Tape, z: Var) -> Result<Var> {
    let x = tape.value(z)?;
    let [n, c, d, h, w] = x.dims5()?;
    if c < 2 {
        return Err(Error::contract(format!(
            "softmax_channels needs at least 2 channels, got {c}"
        )));
    }
    let vol = d * h * w;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        let base = b * c * vol;
        for v in 0..vol {
            let max = (0..c)
                .map(|k| src[base + k * vol + v])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..c {
                let e = (src[base + k * vol + v] - max).exp();
                out[base + k * vol + v] = e;
                total += e;
            }
            for k in 0..c {
                out[base + k * vol + v] /= total;
            }
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    Ok(tape.record(&[z], out, Box::new(SoftmaxOp)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_keeps_nan() {
        let tape = Tape::new();
        let a = tape.constant(t(&[3], &[-1.0, f64::NAN, 2.0]));
        let y = tape.value(relu(&tape, a).unwrap()).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data()[1].is_nan());
        assert_eq!(y.data()[2], 2.0);
    }

    #[test]
    fn add_elementwise_and_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let z = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(tape.value(add(&tape, a, b).unwrap()).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(tape.value(add(&tape, a, z).unwrap()).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(add(&tape, a, b), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = relu(&tape, x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
        let s = sum(&tape, y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_gives_zero_output_and_grad() {
        let tape = Tape::new();
        let x = tape.param(t(&[4], &[-1.0, -2.0, -0.5, -3.0]));
        let s = sum(&tape, relu(&tape, x).unwrap()).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[0.0]);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_widths_and_empty_identity() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 32, 8, 8, 8]));
        let b = tape.constant(Tensor::zeros(&[1, 32, 8, 8, 8]));
        let c = concat_channels(&tape, a, b).unwrap();
        assert_eq!(tape.shape(c).unwrap(), vec![1, 64, 8, 8, 8]);

        let x = tape.constant(t(&[1, 2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let e = tape.constant(Tensor::zeros(&[1, 0, 1, 1, 2]));
        let y = concat_channels(&tape, x, e).unwrap();
        assert_eq!(*tape.value(y).unwrap(), *tape.value(x).unwrap());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 2]));
        assert!(concat_channels(&tape, a, b).is_err());
        let r4 = tape.constant(Tensor::zeros(&[2, 4, 4, 4]));
        assert!(concat_channels(&tape, a, r4).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::new();
        let z = tape.constant(t(&[1, 2, 1, 1, 3], &[0.0, 3f64.ln(), 1000.0, 0.0, 0.0, 0.0]));
        let q = tape.value(softmax_channels(&tape, z).unwrap()).unwrap();
        let q = q.data();
        assert_eq!((q[0], q[3]), (0.5, 0.5));
        assert!((q[1] - 0.75).abs() < 1e-15 && (q[4] - 0.25).abs() < 1e-15);
        assert_eq!((q[2], q[5]), (1.0, 0.0));
    }

    #[test]
    fn softmax_needs_two_channels() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
        assert!(softmax_channels(&tape, z).is_err());
    }
}
