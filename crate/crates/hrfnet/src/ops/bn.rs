//! Batch normalization kernels.

use crate::parallel::map_indices;
use crate::tensor::Tensor;

/// Per-channel mean and biased variance over (N,H,W).
pub fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let count = (n * h * w) as f64;
    let xd = x.data();
    let stats = map_indices(c, |ci| {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for ni in 0..n {
            for &v in &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w] {
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / count;
        (mean, (sumsq / count - mean * mean).max(0.0))
    });
    stats.into_iter().unzip()
}

/// Normalize with given per-channel mean/invstd and affine parameters.
/// Returns (y, xhat).
pub fn bn_apply(
    x: &Tensor,
    mean: &[f64],
    invstd: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
) -> (Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut y = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (m, s, g, b) = (mean[ci], invstd[ci], gd[ci], bd[ci]);
            for i in 0..h * w {
                let xh = (xd[base + i] - m) * s;
                xhat[base + i] = xh;
                y[base + i] = g * xh + b;
            }
        }
    }
    (Tensor::new(x.shape(), y), Tensor::new(x.shape(), xhat))
}

/// Backward through training-mode batch norm (batch statistics are part
/// of the computation). Returns (dx, dgamma, dbeta).
pub fn bn_backward_train(
    xhat: &Tensor,
    invstd: &[f64],
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = xhat.shape();
    let count = (n * h * w) as f64;
    let xh = xhat.data();
    let gd = gamma.data();
    let dyd = dy.data();
    let per_channel = map_indices(c, |ci| {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                sum_dy += dyd[base + i];
                sum_dy_xhat += dyd[base + i] * xh[base + i];
            }
        }
        (sum_dy, sum_dy_xhat)
    });
    let mut dx = vec![0.0; xh.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (sum_dy, sum_dy_xhat) = per_channel[ci];
            let g = gd[ci];
            let s = invstd[ci];
            for i in 0..h * w {
                let dxhat = dyd[base + i] * g;
                dx[base + i] =
                    s * (dxhat - (g / count) * sum_dy - xh[base + i] * (g / count) * sum_dy_xhat);
            }
        }
    }
    let dgamma: Vec<f64> = per_channel.iter().map(|&(_, sdx)| sdx).collect();
    let dbeta: Vec<f64> = per_channel.iter().map(|&(sd, _)| sd).collect();
    (
        Tensor::new(xhat.shape(), dx),
        Tensor::new([1, c, 1, 1], dgamma),
        Tensor::new([1, c, 1, 1], dbeta),
    )
}

/// Backward through eval-mode batch norm (fixed statistics): the mapping
/// is a per-channel affine transform.
pub fn bn_backward_eval(
    xhat: &Tensor,
    invstd: &[f64],
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = xhat.shape();
    let xh = xhat.data();
    let gd = gamma.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; xh.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let gs = gd[ci] * invstd[ci];
            for i in 0..h * w {
                dx[base + i] = dyd[base + i] * gs;
                dgamma[ci] += dyd[base + i] * xh[base + i];
                dbeta[ci] += dyd[base + i];
            }
        }
    }
    (
        Tensor::new(xhat.shape(), dx),
        Tensor::new([1, c, 1, 1], dgamma),
        Tensor::new([1, c, 1, 1], dbeta),
    )
}
