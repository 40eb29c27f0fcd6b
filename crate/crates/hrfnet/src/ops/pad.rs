//! Reflect padding and center cropping.

use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;

/// Mirror an index into [0, len): -1 -> 1, len -> len-2 (edge not repeated).
#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let last = len as isize - 1;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

/// Reflect-pad [N,C,H,W] by (top, bottom, left, right).
///
/// Requires padding strictly smaller than the padded dimension.
pub fn reflect_pad(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert!(top < h && bottom < h && left < w && right < w, "reflect pad too large");
    let oh = h + top + bottom;
    let ow = w + left + right;
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for_each_chunk_mut(&mut out, ow, |row, dst| {
        let plane = row / oh;
        let oy = row % oh;
        let iy = reflect(oy as isize - top as isize, h);
        let src = &xd[plane * h * w + iy * w..plane * h * w + (iy + 1) * w];
        for (ox, d) in dst.iter_mut().enumerate() {
            *d = src[reflect(ox as isize - left as isize, w)];
        }
    });
    Tensor::new([n, c, oh, ow], out)
}

/// Symmetric padding amounts that bring `dim` up to the next multiple of
/// `multiple`: (before, after) with before = delta/2.
pub fn pad_amounts(dim: usize, multiple: usize) -> (usize, usize) {
    let rem = dim % multiple;
    if rem == 0 {
        (0, 0)
    } else {
        let delta = multiple - rem;
        (delta / 2, delta - delta / 2)
    }
}

/// Center crop [N,C,H,W] down to (h, w), offset matching [`pad_amounts`].
pub fn center_crop(x: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, ih, iw] = x.shape();
    assert!(h <= ih && w <= iw);
    if (h, w) == (ih, iw) {
        return x.clone();
    }
    let oy = (ih - h) / 2;
    let ox = (iw - w) / 2;
    let xd = x.data();
    let mut out = vec![0.0; n * c * h * w];
    for_each_chunk_mut(&mut out, w, |row, dst| {
        let plane = row / h;
        let y = row % h;
        let start = plane * ih * iw + (y + oy) * iw + ox;
        dst.copy_from_slice(&xd[start..start + w]);
    });
    Tensor::new([n, c, h, w], out)
}

/// Adjoint of [`center_crop`]: embed gradients back at the crop offset,
/// zero elsewhere.
pub fn center_crop_backward(dy: &Tensor, ih: usize, iw: usize) -> Tensor {
    let [n, c, h, w] = dy.shape();
    if (h, w) == (ih, iw) {
        return dy.clone();
    }
    let oy = (ih - h) / 2;
    let ox = (iw - w) / 2;
    let dyd = dy.data();
    let mut dx = vec![0.0; n * c * ih * iw];
    for_each_chunk_mut(&mut dx, ih * iw, |plane, dst| {
        let src = &dyd[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            dst[(y + oy) * iw + ox..(y + oy) * iw + ox + w]
                .copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    });
    Tensor::new([n, c, ih, iw], dx)
}
