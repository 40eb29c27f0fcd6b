//! Max pooling and global average pooling.

use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;

/// Max pool with zero-free padding semantics: padded positions are simply
/// skipped, and the first maximal element in scan order wins ties.
/// Returns the pooled tensor and per-output argmax indices (flat within
/// each (n,c) plane) for the backward pass.
pub fn max_pool(x: &Tensor, k: usize, stride: usize, padding: usize) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let xd = x.data();
    let mut fused: Vec<(f64, u32)> = vec![(0.0, 0); n * c * oh * ow];
    for_each_chunk_mut(&mut fused, oh * ow, |plane, dst| {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                dst[oy * ow + ox] = (best, best_idx as u32);
            }
        }
    });
    let (out, arg) = fused.into_iter().unzip();
    (Tensor::new([n, c, oh, ow], out), arg)
}

pub fn max_pool_backward(
    dy: &Tensor,
    arg: &[u32],
    h: usize,
    w: usize,
) -> Tensor {
    let [n, c, oh, ow] = dy.shape();
    let dyd = dy.data();
    let mut dx = vec![0.0; n * c * h * w];
    for_each_chunk_mut(&mut dx, h * w, |plane, dst| {
        let grad = &dyd[plane * oh * ow..(plane + 1) * oh * ow];
        let idxs = &arg[plane * oh * ow..(plane + 1) * oh * ow];
        for (g, &i) in grad.iter().zip(idxs) {
            dst[i as usize] += g;
        }
    });
    Tensor::new([n, c, h, w], dx)
}

/// Global average pool to [N,C,1,1].
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let xd = x.data();
    let mut out = vec![0.0; n * c];
    for_each_chunk_mut(&mut out, 1, |plane, dst| {
        dst[0] = xd[plane * h * w..(plane + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
    });
    Tensor::new([n, c, 1, 1], out)
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, _, _] = dy.shape();
    let dyd = dy.data();
    let mut dx = vec![0.0; n * c * h * w];
    for_each_chunk_mut(&mut dx, h * w, |plane, dst| {
        let g = dyd[plane] / (h * w) as f64;
        dst.fill(g);
    });
    Tensor::new([n, c, h, w], dx)
}
