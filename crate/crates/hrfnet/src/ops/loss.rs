//! Weighted two-class cross-entropy over pixel maps.
//!
//! The loss is the weight-normalized mean of per-pixel cross-entropy:
//! pristine pixels weigh 1, tampered pixels weigh `tampered_weight`, and
//! the sum is divided by the total applied weight so the scale does not
//! drift with the tampered fraction.

use crate::tensor::Tensor;

/// Forward pass. `logits` is [N,2,H,W], `target` is [N,1,H,W] with values
/// in {0,1}. Returns (loss, tampered-class probabilities, weight sum);
/// the extras feed [`weighted_ce_backward`].
pub fn weighted_ce(logits: &Tensor, target: &Tensor, tampered_weight: f64) -> (f64, Tensor, f64) {
    let [n, c, h, w] = logits.shape();
    assert_eq!(c, 2, "weighted_ce expects two logit channels");
    assert_eq!(target.shape(), [n, 1, h, w], "target shape mismatch");
    let ld = logits.data();
    let td = target.data();
    let hw = h * w;
    let mut p1 = vec![0.0; n * hw];
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    for ni in 0..n {
        let base = ni * 2 * hw;
        for i in 0..hw {
            let z0 = ld[base + i];
            let z1 = ld[base + hw + i];
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let t = td[ni * hw + i];
            debug_assert!(t == 0.0 || t == 1.0);
            let (wt, logp) = if t == 1.0 {
                (tampered_weight, z1 - lse)
            } else {
                (1.0, z0 - lse)
            };
            loss_sum -= wt * logp;
            weight_sum += wt;
            p1[ni * hw + i] = (z1 - lse).exp();
        }
    }
    (loss_sum / weight_sum, Tensor::new([n, 1, h, w], p1), weight_sum)
}

/// Gradient of the loss w.r.t. the logits, scaled by `dloss`.
pub fn weighted_ce_backward(
    p1: &Tensor,
    target: &Tensor,
    tampered_weight: f64,
    weight_sum: f64,
    dloss: f64,
) -> Tensor {
    let [n, _, h, w] = p1.shape();
    let hw = h * w;
    let pd = p1.data();
    let td = target.data();
    let mut dl = vec![0.0; n * 2 * hw];
    for ni in 0..n {
        for i in 0..hw {
            let p = pd[ni * hw + i];
            let t = td[ni * hw + i];
            let wt = if t == 1.0 { tampered_weight } else { 1.0 };
            let scale = dloss * wt / weight_sum;
            // d/dz_c of -log softmax(z)[t] is p_c - 1[t==c]
            dl[ni * 2 * hw + i] = scale * ((1.0 - p) - (1.0 - t));
            dl[ni * 2 * hw + hw + i] = scale * (p - t);
        }
    }
    Tensor::new([n, 2, h, w], dl)
}
