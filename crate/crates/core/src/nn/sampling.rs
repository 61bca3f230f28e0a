//! Resolution changes between encoder/decoder levels: 2×2×2 max-pooling and
//! ×2 trilinear upsampling (half-pixel centres, i.e. `align_corners = false`).

use crate::error::{Error, Result};
use crate::tensor::{Backward, Tape, Tensor, Var};

struct MaxPoolOp {
    /// Flat input index of the winning voxel for every output element.
    argmax: Vec<usize>,
}

impl Backward for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] += g;
        }
        vec![Some(dx)]
    }
}

/// 2×2×2 max-pooling with stride 2. Ties go to the first voxel in
/// depth-major scan order of the window.
pub fn maxpool2(tape: &Tape, x: Var) -> Result<Var> {
    let xv = tape.value(x)?;
    let [n, c, d, h, w] = xv.dims5()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!(
            "maxpool2 needs even spatial dims, got {d}×{h}×{w}"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let src = xv.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base + ((2 * z) * h + 2 * y) * w + 2 * xx;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                // NaN wins and then sticks, like the relu.
                                if src[i] > best || src[i].is_nan() {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(src[best_i]);
                    argmax.push(best_i);
                }
            }
        }
    }
    let out = Tensor::new(vec![n, c, od, oh, ow], out)?;
    Ok(tape.record(&[x], out, Box::new(MaxPoolOp { argmax })))
}

/// Source taps for one output coordinate of a ×2 linear upsample of an axis
/// of length `len`: `(lower, upper, weight of upper)`.
fn taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Linear ×2 resampling along one axis of a row-major block viewed as
/// `(outer, len, inner)`.
fn upsample_axis(src: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let t = taps(len);
    let mut out = vec![0.0; outer * 2 * len * inner];
    for o in 0..outer {
        for (i, &(lo, hi, a)) in t.iter().enumerate() {
            let dst = &mut out[(o * 2 * len + i) * inner..(o * 2 * len + i + 1) * inner];
            let l = &src[(o * len + lo) * inner..(o * len + lo + 1) * inner];
            let u = &src[(o * len + hi) * inner..(o * len + hi + 1) * inner];
            for ((dv, lv), uv) in dst.iter_mut().zip(l).zip(u) {
                *dv = (1.0 - a) * lv + a * uv;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_axis`].
fn upsample_axis_adjoint(grad: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let t = taps(len);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for (i, &(lo, hi, a)) in t.iter().enumerate() {
            let g = &grad[(o * 2 * len + i) * inner..(o * 2 * len + i + 1) * inner];
            for (j, gv) in g.iter().enumerate() {
                out[(o * len + lo) * inner + j] += (1.0 - a) * gv;
                out[(o * len + hi) * inner + j] += a * gv;
            }
        }
    }
    out
}

struct UpsampleOp;

impl Backward for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_trilinear2"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let [n, c, d, h, w] = inputs[0].dims5().expect("rank 5");
        let nc = n * c;
        let g = upsample_axis_adjoint(grad.data(), nc, d, 4 * h * w);
        let g = upsample_axis_adjoint(&g, nc * d, h, 2 * w);
        let g = upsample_axis_adjoint(&g, nc * d * h, w, 1);
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), g).expect("dx shape"))]
    }
}

/// Trilinear ×2 upsampling of every spatial axis. Sample positions follow
/// `src = (i + 0.5) / 2 − 0.5`, clamped to the valid range.
pub fn upsample_trilinear2(tape: &Tape, x: Var) -> Result<Var> {
    let xv = tape.value(x)?;
    let [n, c, d, h, w] = xv.dims5()?;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::contract("upsample of an empty volume"));
    }
    let nc = n * c;
    let a = upsample_axis(xv.data(), nc * d * h, w, 1);
    let a = upsample_axis(&a, nc * d, h, 2 * w);
    let a = upsample_axis(&a, nc, d, 4 * h * w);
    let out = Tensor::new(vec![n, c, 2 * d, 2 * h, 2 * w], a)?;
    Ok(tape.record(&[x], out, Box::new(UpsampleOp)))
}
