//! Bilinear resampling (half-pixel centers, no corner alignment).

use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;

struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_taps(input: usize, output: usize) -> AxisTaps {
    let scale = input as f64 / output as f64;
    let mut lo = Vec::with_capacity(output);
    let mut hi = Vec::with_capacity(output);
    let mut frac = Vec::with_capacity(output);
    for d in 0..output {
        let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(input - 1);
        lo.push(i0);
        hi.push((i0 + 1).min(input - 1));
        frac.push(s - i0 as f64);
    }
    AxisTaps { lo, hi, frac }
}

/// Resize [N,C,H,W] to [N,C,oh,ow].
pub fn bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert!(oh >= 1 && ow >= 1);
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for_each_chunk_mut(&mut out, ow, |row, dst| {
        let plane = row / oh;
        let oy = row % oh;
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
        for (ox, d) in dst.iter_mut().enumerate() {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            *d = top * (1.0 - fy) + bot * fy;
        }
    });
    Tensor::new([n, c, oh, ow], out)
}

/// Adjoint of [`bilinear`]: scatter output gradients back through the
/// interpolation weights. One task per (n,c) plane keeps the scatter
/// race-free and deterministic.
pub fn bilinear_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, oh, ow] = dy.shape();
    if (oh, ow) == (h, w) {
        return dy.clone();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let dyd = dy.data();
    let mut dx = vec![0.0; n * c * h * w];
    for_each_chunk_mut(&mut dx, h * w, |plane, dst| {
        let src = &dyd[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    });
    Tensor::new([n, c, h, w], dx)
}
