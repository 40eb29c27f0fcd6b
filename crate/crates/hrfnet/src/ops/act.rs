//! Elementwise activations with their derivatives.

use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(x.shape(), dy.shape());
    Tensor::new(
        x.shape(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

/// x * relu6(x + 3) / 6
pub fn hardswish(x: &Tensor) -> Tensor {
    x.map(|v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0)
}

pub fn hardswish_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(x.shape(), dy.shape());
    Tensor::new(
        x.shape(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| {
                let d = if v <= -3.0 {
                    0.0
                } else if v >= 3.0 {
                    1.0
                } else {
                    (2.0 * v + 3.0) / 6.0
                };
                g * d
            })
            .collect(),
    )
}

/// relu6(x + 3) / 6
pub fn hardsigmoid(x: &Tensor) -> Tensor {
    x.map(|v| (v + 3.0).clamp(0.0, 6.0) / 6.0)
}

pub fn hardsigmoid_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(x.shape(), dy.shape());
    Tensor::new(
        x.shape(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| if (-3.0..3.0).contains(&v) { g / 6.0 } else { 0.0 })
            .collect(),
    )
}

/// Tampered-class probability from a two-channel logit map:
/// softmax over channels, returning channel 1 as [N,1,H,W].
pub fn softmax2_tampered(logits: &Tensor) -> Tensor {
    let [n, c, h, w] = logits.shape();
    assert_eq!(c, 2, "expected two logit channels");
    let d = logits.data();
    let mut out = vec![0.0; n * h * w];
    for ni in 0..n {
        let base = ni * 2 * h * w;
        for i in 0..h * w {
            let z0 = d[base + i];
            let z1 = d[base + h * w + i];
            let m = z0.max(z1);
            let e0 = (z0 - m).exp();
            let e1 = (z1 - m).exp();
            out[ni * h * w + i] = e1 / (e0 + e1);
        }
    }
    Tensor::new([n, 1, h, w], out)
}
