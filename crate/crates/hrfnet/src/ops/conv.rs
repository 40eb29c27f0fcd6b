//! 2-D convolution via im2col plus a small row-parallel matmul, with a
//! direct path for depthwise convolutions.

use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn unit(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn out_dim(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - self.dilation * (kernel - 1) - 1) / self.stride + 1
    }
}

/// out[m x n] = a[m x p] * b[p x n], parallel over output rows.
pub fn matmul(a: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk_mut(out, n, |i, row| {
        row.fill(0.0);
        for k in 0..p {
            let aik = a[i * p + k];
            if aik != 0.0 {
                let brow = &b[k * n..(k + 1) * n];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r += aik * bv;
                }
            }
        }
    });
}

/// out[m x p] += a[m x n] * b[p x n]^T, parallel over output rows.
pub fn matmul_acc_bt(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * p);
    for_each_chunk_mut(out, p, |i, row| {
        let arow = &a[i * n..(i + 1) * n];
        for (k, r) in row.iter_mut().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *r += acc;
        }
    });
}

/// out[p x n] = a[m x p]^T * b[m x n], parallel over output rows.
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), p * n);
    for_each_chunk_mut(out, n, |k, row| {
        row.fill(0.0);
        for i in 0..m {
            let aik = a[i * p + k];
            if aik != 0.0 {
                let brow = &b[i * n..(i + 1) * n];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r += aik * bv;
                }
            }
        }
    });
}

/// Unfold one image group [cg, h, w] into columns [cg*kh*kw, oh*ow]
/// with zero padding.
pub fn im2col(
    x: &[f64],
    cg: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    cols: &mut [f64],
) {
    let oh = spec.out_dim(h, kh);
    let ow = spec.out_dim(w, kw);
    debug_assert_eq!(cols.len(), cg * kh * kw * oh * ow);
    for_each_chunk_mut(cols, oh * ow, |r, row| {
        let ci = r / (kh * kw);
        let ki = (r / kw) % kh;
        let kj = r % kw;
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
            let dst = &mut row[oy * ow..(oy + 1) * ow];
            if iy < 0 || iy >= h as isize {
                dst.fill(0.0);
                continue;
            }
            let src = &plane[iy as usize * w..(iy as usize + 1) * w];
            for (ox, d) in dst.iter_mut().enumerate() {
                let ix = (ox * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                *d = if ix < 0 || ix >= w as isize {
                    0.0
                } else {
                    src[ix as usize]
                };
            }
        }
    });
}

/// Adjoint of [`im2col`] as a race-free gather: every input pixel collects
/// the column entries that referenced it.
pub fn col2im_gather(
    dcols: &[f64],
    cg: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    dx: &mut [f64],
) {
    let oh = spec.out_dim(h, kh);
    let ow = spec.out_dim(w, kw);
    debug_assert_eq!(dcols.len(), cg * kh * kw * oh * ow);
    debug_assert_eq!(dx.len(), cg * h * w);
    for_each_chunk_mut(dx, w, |chunk, row| {
        let ci = chunk / h;
        let iy = chunk % h;
        for (ix, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ki in 0..kh {
                let oy_num = iy as isize + spec.padding as isize - (ki * spec.dilation) as isize;
                if oy_num < 0 || oy_num as usize % spec.stride != 0 {
                    continue;
                }
                let oy = oy_num as usize / spec.stride;
                if oy >= oh {
                    continue;
                }
                for kj in 0..kw {
                    let ox_num =
                        ix as isize + spec.padding as isize - (kj * spec.dilation) as isize;
                    if ox_num < 0 || ox_num as usize % spec.stride != 0 {
                        continue;
                    }
                    let ox = ox_num as usize / spec.stride;
                    if ox >= ow {
                        continue;
                    }
                    let r = (ci * kh + ki) * kw + kj;
                    acc += dcols[r * oh * ow + oy * ow + ox];
                }
            }
            *out += acc;
        }
    });
}

/// Grouped convolution forward. `x` is [N,Ci,H,W], `weight` is
/// [Co, Ci/groups, kh, kw], `bias` (optional) is [1,Co,1,1].
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let [n, ci, h, w] = x.shape();
    let [co, cig, kh, kw] = weight.shape();
    assert_eq!(ci, cig * spec.groups, "conv input channels mismatch");
    assert_eq!(co % spec.groups, 0, "conv output channels vs groups");
    if spec.groups == ci && cig == 1 {
        return depthwise(x, weight, bias, spec);
    }
    let oh = spec.out_dim(h, kh);
    let ow = spec.out_dim(w, kw);
    let cog = co / spec.groups;
    let kdim = cig * kh * kw;
    let mut out = vec![0.0; n * co * oh * ow];
    let mut cols = vec![0.0; kdim * oh * ow];
    for ni in 0..n {
        for g in 0..spec.groups {
            let xg = &x.data()[(ni * ci + g * cig) * h * w..(ni * ci + (g + 1) * cig) * h * w];
            im2col(xg, cig, h, w, kh, kw, spec, &mut cols);
            let wg = &weight.data()[g * cog * kdim..(g + 1) * cog * kdim];
            let og = &mut out[(ni * co + g * cog) * oh * ow..(ni * co + (g + 1) * cog) * oh * ow];
            matmul(wg, &cols, cog, kdim, oh * ow, og);
            if let Some(b) = bias {
                for c in 0..cog {
                    let bv = b.data()[g * cog + c];
                    for v in &mut og[c * oh * ow..(c + 1) * oh * ow] {
                        *v += bv;
                    }
                }
            }
        }
    }
    Tensor::new([n, co, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    dy: &Tensor,
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [n, ci, h, w] = x.shape();
    let [co, cig, kh, kw] = weight.shape();
    if spec.groups == ci && cig == 1 {
        return depthwise_backward(x, weight, spec, dy, with_bias);
    }
    let oh = spec.out_dim(h, kh);
    let ow = spec.out_dim(w, kw);
    let cog = co / spec.groups;
    let kdim = cig * kh * kw;
    let mut dx = vec![0.0; n * ci * h * w];
    let mut dw = vec![0.0; co * kdim];
    let mut cols = vec![0.0; kdim * oh * ow];
    let mut dcols = vec![0.0; kdim * oh * ow];
    for ni in 0..n {
        for g in 0..spec.groups {
            let xg = &x.data()[(ni * ci + g * cig) * h * w..(ni * ci + (g + 1) * cig) * h * w];
            im2col(xg, cig, h, w, kh, kw, spec, &mut cols);
            let dyg = &dy.data()[(ni * co + g * cog) * oh * ow..(ni * co + (g + 1) * cog) * oh * ow];
            let wg = &weight.data()[g * cog * kdim..(g + 1) * cog * kdim];
            matmul_acc_bt(
                dyg,
                &cols,
                cog,
                oh * ow,
                kdim,
                &mut dw[g * cog * kdim..(g + 1) * cog * kdim],
            );
            matmul_at(wg, dyg, cog, kdim, oh * ow, &mut dcols);
            let dxg =
                &mut dx[(ni * ci + g * cig) * h * w..(ni * ci + (g + 1) * cig) * h * w];
            col2im_gather(&dcols, cig, h, w, kh, kw, spec, dxg);
        }
    }
    let db = with_bias.then(|| {
        let mut b = vec![0.0; co];
        for ni in 0..n {
            for c in 0..co {
                b[c] += dy.data()[(ni * co + c) * oh * ow..(ni * co + c + 1) * oh * ow]
                    .iter()
                    .sum::<f64>();
            }
        }
        Tensor::new([1, co, 1, 1], b)
    });
    (
        Tensor::new([n, ci, h, w], dx),
        Tensor::new([co, cig, kh, kw], dw),
        db,
    )
}

fn depthwise(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let [n, c, h, w] = x.shape();
    let [_, _, kh, kw] = weight.shape();
    let oh = spec.out_dim(h, kh);
    let ow = spec.out_dim(w, kw);
    let mut out = vec![0.0; n * c * oh * ow];
    let xd = x.data();
    let wd = weight.data();
    for_each_chunk_mut(&mut out, oh * ow, |plane, dst| {
        let ci = plane % c;
        let xplane = &xd[plane * h * w..(plane + 1) * h * w];
        let k = &wd[ci * kh * kw..(ci + 1) * kh * kw];
        let bv = bias.map_or(0.0, |b| b.data()[ci]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bv;
                for ki in 0..kh {
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += k[ki * kw + kj] * xplane[iy as usize * w + ix as usize];
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    });
    Tensor::new([n, c, oh, ow], out)
}

fn depthwise_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    dy: &Tensor,
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [n, c, h, w] = x.shape();
    let [_, _, kh, kw] = weight.shape();
    let oh = spec.out_dim(h, kh);
    let ow = spec.out_dim(w, kw);
    let mut dx = vec![0.0; n * c * h * w];
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    // dx: gather formulation, one task per (n,c) plane.
    for_each_chunk_mut(&mut dx, h * w, |plane, dst| {
        let ci = plane % c;
        let k = &wd[ci * kh * kw..(ci + 1) * kh * kw];
        let dplane = &dyd[plane * oh * ow..(plane + 1) * oh * ow];
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = 0.0;
                for ki in 0..kh {
                    let oy_num =
                        iy as isize + spec.padding as isize - (ki * spec.dilation) as isize;
                    if oy_num < 0 || oy_num as usize % spec.stride != 0 {
                        continue;
                    }
                    let oy = oy_num as usize / spec.stride;
                    if oy >= oh {
                        continue;
                    }
                    for kj in 0..kw {
                        let ox_num =
                            ix as isize + spec.padding as isize - (kj * spec.dilation) as isize;
                        if ox_num < 0 || ox_num as usize % spec.stride != 0 {
                            continue;
                        }
                        let ox = ox_num as usize / spec.stride;
                        if ox >= ow {
                            continue;
                        }
                        acc += k[ki * kw + kj] * dplane[oy * ow + ox];
                    }
                }
                dst[iy * w + ix] += acc;
            }
        }
    });
    // dw: one task per channel, summing over the batch in fixed order.
    let mut dw = vec![0.0; c * kh * kw];
    for_each_chunk_mut(&mut dw, kh * kw, |ci, dk| {
        for ni in 0..n {
            let xplane = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let dplane = &dyd[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * spec.stride + ki * spec.dilation) as isize
                            - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * spec.stride + kj * spec.dilation) as isize
                                - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += dplane[oy * ow + ox] * xplane[iy as usize * w + ix as usize];
                        }
                    }
                    dk[ki * kw + kj] += acc;
                }
            }
        }
    });
    let db = with_bias.then(|| {
        let mut b = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                b[ci] += dyd[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow]
                    .iter()
                    .sum::<f64>();
            }
        }
        Tensor::new([1, c, 1, 1], b)
    });
    (
        Tensor::new([n, c, h, w], dx),
        Tensor::new(weight.shape(), dw),
        db,
    )
}
