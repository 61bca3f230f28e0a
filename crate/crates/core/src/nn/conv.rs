//! Same-padded, stride-1 3D convolution (cross-correlation) with kernel 1 or 3.
//!
//! Kernel-3 convolutions are lowered to GEMM over depth slabs of an
//! im2col buffer so that the temporary stays bounded for large volumes.
//! The input gradient reuses the forward path with a spatially flipped,
//! channel-transposed kernel.

use crate::error::{Error, Result};
use crate::tensor::{Backward, Tape, Tensor, Var};

/// Upper bound on im2col buffer elements per slab (16 MiB of f64).
const COL_BUDGET: usize = 1 << 21;

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices that cover every strided index of the
    // m×k, k×n and m×n operands; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
}

impl Geometry {
    fn vol(&self) -> usize {
        self.d * self.h * self.w
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn slab_depth(&self) -> usize {
        (COL_BUDGET / (self.patch() * self.plane()).max(1)).clamp(1, self.d)
    }
}

/// Fills `col` (patch × slab voxels) with zero-padded 3×3×3 neighbourhoods
/// of one batch item for depth planes `d0..d1`.
fn im2col3(x: &[f64], g: &Geometry, d0: usize, d1: usize, col: &mut [f64]) {
    let (h, w, plane) = (g.h, g.w, g.plane());
    let cols = (d1 - d0) * plane;
    let mut row = 0;
    for ci in 0..g.cin {
        let src = &x[ci * g.vol()..(ci + 1) * g.vol()];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for (zi, z) in (d0..d1).enumerate() {
                        let sz = z as isize + kd as isize - 1;
                        let dplane = &mut dst[zi * plane..(zi + 1) * plane];
                        if sz < 0 || sz >= g.d as isize {
                            dplane.fill(0.0);
                            continue;
                        }
                        let splane = &src[sz as usize * plane..(sz as usize + 1) * plane];
                        for y in 0..h {
                            let sy = y as isize + kh as isize - 1;
                            let drow = &mut dplane[y * w..(y + 1) * w];
                            if sy < 0 || sy >= h as isize {
                                drow.fill(0.0);
                                continue;
                            }
                            let srow = &splane[sy as usize * w..(sy as usize + 1) * w];
                            match kw {
                                0 => {
                                    drow[0] = 0.0;
                                    drow[1..].copy_from_slice(&srow[..w - 1]);
                                }
                                1 => drow.copy_from_slice(srow),
                                _ => {
                                    drow[..w - 1].copy_from_slice(&srow[1..]);
                                    drow[w - 1] = 0.0;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Raw forward convolution. `weight` is `(cout, cin, k, k, k)` flattened.
fn conv_forward(x: &[f64], g: &Geometry, weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let vol = g.vol();
    let mut out = vec![0.0; g.n * g.cout * vol];
    for b in 0..g.n {
        let xb = &x[b * g.cin * vol..(b + 1) * g.cin * vol];
        let ob = &mut out[b * g.cout * vol..(b + 1) * g.cout * vol];
        if g.k == 1 {
            gemm(
                g.cout,
                g.cin,
                vol,
                weight,
                (g.cin as isize, 1),
                xb,
                (vol as isize, 1),
                0.0,
                ob,
                (vol as isize, 1),
            );
        } else {
            let slab = g.slab_depth();
            let mut col = vec![0.0; g.patch() * slab * g.plane()];
            let mut d0 = 0;
            while d0 < g.d {
                let d1 = (d0 + slab).min(g.d);
                let cols = (d1 - d0) * g.plane();
                im2col3(xb, g, d0, d1, &mut col);
                gemm(
                    g.cout,
                    g.patch(),
                    cols,
                    weight,
                    (g.patch() as isize, 1),
                    &col,
                    (cols as isize, 1),
                    0.0,
                    &mut ob[d0 * g.plane()..],
                    (vol as isize, 1),
                );
                d0 = d1;
            }
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ob[co * vol..(co + 1) * vol] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// `W'[ci, co, a, b, c] = W[co, ci, k-1-a, k-1-b, k-1-c]`.
fn flip_transpose(weight: &[f64], cout: usize, cin: usize, k: usize) -> Vec<f64> {
    let k3 = k * k * k;
    let mut out = vec![0.0; weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            let src = &weight[(co * cin + ci) * k3..(co * cin + ci + 1) * k3];
            let dst = &mut out[(ci * cout + co) * k3..(ci * cout + co + 1) * k3];
            for (i, v) in src.iter().enumerate() {
                dst[k3 - 1 - i] = *v;
            }
        }
    }
    out
}

struct Conv3dOp {
    geom: Geometry,
}

impl Backward for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let g = self.geom;
        let (x, weight) = (inputs[0], inputs[1]);
        let vol = g.vol();
        let dy = grad.data();

        let dx = needs[0].then(|| {
            let flipped = flip_transpose(weight.data(), g.cout, g.cin, g.k);
            let gt = Geometry {
                cin: g.cout,
                cout: g.cin,
                ..g
            };
            Tensor::new(x.shape().to_vec(), conv_forward(dy, &gt, &flipped, None)).expect("dx shape")
        });

        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; weight.len()];
            for b in 0..g.n {
                let xb = &x.data()[b * g.cin * vol..(b + 1) * g.cin * vol];
                let dyb = &dy[b * g.cout * vol..(b + 1) * g.cout * vol];
                if g.k == 1 {
                    gemm(
                        g.cout,
                        vol,
                        g.cin,
                        dyb,
                        (vol as isize, 1),
                        xb,
                        (1, vol as isize),
                        1.0,
                        &mut dw,
                        (g.cin as isize, 1),
                    );
                } else {
                    let slab = g.slab_depth();
                    let mut col = vec![0.0; g.patch() * slab * g.plane()];
                    let mut d0 = 0;
                    while d0 < g.d {
                        let d1 = (d0 + slab).min(g.d);
                        let cols = (d1 - d0) * g.plane();
                        im2col3(xb, &g, d0, d1, &mut col);
                        gemm(
                            g.cout,
                            cols,
                            g.patch(),
                            &dyb[d0 * g.plane()..],
                            (vol as isize, 1),
                            &col,
                            (1, cols as isize),
                            1.0,
                            &mut dw,
                            (g.patch() as isize, 1),
                        );
                        d0 = d1;
                    }
                }
            }
            Tensor::new(weight.shape().to_vec(), dw).expect("dw shape")
        });

        let db = needs.get(2).copied().unwrap_or(false).then(|| {
            let mut db = vec![0.0; g.cout];
            for b in 0..g.n {
                for (co, acc) in db.iter_mut().enumerate() {
                    let start = (b * g.cout + co) * vol;
                    *acc += dy[start..start + vol].iter().sum::<f64>();
                }
            }
            Tensor::new(vec![g.cout], db).expect("db shape")
        });

        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(db);
        }
        out
    }
}

/// Same-padded 3D cross-correlation plus bias.
///
/// `x` is `(n, cin, d, h, w)`, `weight` is `(cout, cin, k, k, k)` with
/// `k ∈ {1, 3}` and `bias`, when given, is `(cout)`.
pub fn conv3d(tape: &Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let xv = tape.value(x)?;
    let wv = tape.value(weight)?;
    let [n, cin, d, h, w] = xv.dims5()?;
    let [cout, wcin, k, k2, k3] = wv.dims5().map_err(|_| {
        Error::contract(format!("conv3d weight must be rank 5, got {:?}", wv.shape()))
    })?;
    if k != k2 || k != k3 || !(k == 1 || k == 3) {
        return Err(Error::contract(format!(
            "conv3d supports cubic kernels of size 1 or 3, got {:?}",
            wv.shape()
        )));
    }
    if wcin != cin {
        return Err(Error::contract(format!(
            "conv3d: input has {cin} channels but the kernel expects {wcin}"
        )));
    }
    let bv = match bias {
        Some(b) => {
            let bv = tape.value(b)?;
            if bv.shape() != [cout] {
                return Err(Error::contract(format!(
                    "conv3d bias must have shape [{cout}], got {:?}",
                    bv.shape()
                )));
            }
            Some(bv)
        }
        None => None,
    };
    let geom = Geometry { n, cin, d, h, w, cout, k };
    let data = conv_forward(xv.data(), &geom, wv.data(), bv.as_ref().map(|b| b.data()));
    let out = Tensor::new(vec![n, cout, d, h, w], data)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(tape.record(&inputs, out, Box::new(Conv3dOp { geom })))
}
