//! Eager tape autodiff over [`Tensor`] values.
//!
//! Every operation computes its result immediately and, when the graph is
//! recording, registers a backward closure. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients into parameter slots.
//!
//! The op set is exactly what the network needs: convolution, batch norm,
//! piecewise-linear activations, pooling, bilinear resize, channel concat,
//! residual add, channel scaling, center crop and the weighted
//! cross-entropy loss.

use crate::ops::conv::ConvSpec;
use crate::ops::{act, bn, conv, loss, pad, pool, resize};
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

type BackFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(usize, Tensor))>;

struct Node {
    value: Tensor,
    param: Option<usize>,
    backward: Option<BackFn>,
}

/// Gradients of a scalar root with respect to registered parameters.
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, pid: usize) -> Option<&Tensor> {
        self.by_param.get(pid).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn into_vec(self) -> Vec<Option<Tensor>> {
        self.by_param
    }
}

pub struct Graph {
    track: bool,
    nodes: Vec<Node>,
}

impl Graph {
    /// Graph that records backward closures for training.
    pub fn recording() -> Self {
        Graph {
            track: true,
            nodes: Vec::new(),
        }
    }

    /// Gradient-free graph for inference.
    pub fn inference() -> Self {
        Graph {
            track: false,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, backward: Option<BackFn>) -> ValueId {
        self.nodes.push(Node {
            value,
            param: None,
            backward: if self.track { backward } else { None },
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Leaf input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor) -> ValueId {
        self.push(t, None)
    }

    /// Leaf parameter; gradients accumulate under `pid`.
    pub fn param(&mut self, pid: usize, t: Tensor) -> ValueId {
        self.nodes.push(Node {
            value: t,
            param: Some(pid),
            backward: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        spec: ConvSpec,
    ) -> ValueId {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = b.map(|bid| self.value(bid).clone());
        let out = conv::conv2d(&xv, &wv, bv.as_ref(), &spec);
        let back: BackFn = Box::new(move |g, acc| {
            let (dx, dw, db) = conv::conv2d_backward(&xv, &wv, &spec, g, bv.is_some());
            acc(x.0, dx);
            acc(w.0, dw);
            if let (Some(bid), Some(db)) = (b, db) {
                acc(bid.0, db);
            }
        });
        self.push(out, Some(back))
    }

    /// Batch norm using batch statistics. Returns the output id plus the
    /// batch (mean, var) for the caller's running-average bookkeeping.
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> (ValueId, Vec<f64>, Vec<f64>) {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let (mean, var) = bn::batch_stats(&xv);
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = bn::bn_apply(&xv, &mean, &invstd, &gv, &bv);
        let back: BackFn = Box::new(move |g, acc| {
            let (dx, dgamma, dbeta) = bn::bn_backward_train(&xhat, &invstd, &gv, g);
            acc(x.0, dx);
            acc(gamma.0, dgamma);
            acc(beta.0, dbeta);
        });
        let id = self.push(y, Some(back));
        (id, mean, var)
    }

    /// Batch norm with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> ValueId {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let invstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = bn::bn_apply(&xv, running_mean, &invstd, &gv, &bv);
        let back: BackFn = Box::new(move |g, acc| {
            let (dx, dgamma, dbeta) = bn::bn_backward_eval(&xhat, &invstd, &gv, g);
            acc(x.0, dx);
            acc(gamma.0, dgamma);
            acc(beta.0, dbeta);
        });
        self.push(y, Some(back))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x).clone();
        let y = act::relu(&xv);
        let back: BackFn = Box::new(move |g, acc| acc(x.0, act::relu_backward(&xv, g)));
        self.push(y, Some(back))
    }

    pub fn hardswish(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x).clone();
        let y = act::hardswish(&xv);
        let back: BackFn = Box::new(move |g, acc| acc(x.0, act::hardswish_backward(&xv, g)));
        self.push(y, Some(back))
    }

    pub fn hardsigmoid(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x).clone();
        let y = act::hardsigmoid(&xv);
        let back: BackFn = Box::new(move |g, acc| acc(x.0, act::hardsigmoid_backward(&xv, g)));
        self.push(y, Some(back))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let y = av.add(&bv);
        let back: BackFn = Box::new(move |g, acc| {
            acc(a.0, g.clone());
            acc(b.0, g.clone());
        });
        self.push(y, Some(back))
    }

    /// Multiply [N,C,H,W] by per-channel scales [N,C,1,1].
    pub fn scale_channels(&mut self, x: ValueId, s: ValueId) -> ValueId {
        let xv = self.value(x).clone();
        let sv = self.value(s).clone();
        let [n, c, h, w] = xv.shape();
        assert_eq!(sv.shape(), [n, c, 1, 1], "scale shape mismatch");
        let mut y = vec![0.0; xv.numel()];
        for plane in 0..n * c {
            let sc = sv.data()[plane];
            for i in 0..h * w {
                y[plane * h * w + i] = xv.data()[plane * h * w + i] * sc;
            }
        }
        let out = Tensor::new(xv.shape(), y);
        let back: BackFn = Box::new(move |g, acc| {
            let mut dx = vec![0.0; xv.numel()];
            let mut ds = vec![0.0; n * c];
            for plane in 0..n * c {
                let sc = sv.data()[plane];
                let mut acc_s = 0.0;
                for i in 0..h * w {
                    let gi = g.data()[plane * h * w + i];
                    dx[plane * h * w + i] = gi * sc;
                    acc_s += gi * xv.data()[plane * h * w + i];
                }
                ds[plane] = acc_s;
            }
            acc(x.0, Tensor::new(xv.shape(), dx));
            acc(s.0, Tensor::new([n, c, 1, 1], ds));
        });
        self.push(out, Some(back))
    }

    pub fn global_avg_pool(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x).clone();
        let [_, _, h, w] = xv.shape();
        let y = pool::global_avg_pool(&xv);
        let back: BackFn = Box::new(move |g, acc| acc(x.0, pool::global_avg_pool_backward(g, h, w)));
        self.push(y, Some(back))
    }

    pub fn max_pool(&mut self, x: ValueId, k: usize, stride: usize, padding: usize) -> ValueId {
        let xv = self.value(x).clone();
        let [_, _, h, w] = xv.shape();
        let (y, arg) = pool::max_pool(&xv, k, stride, padding);
        let back: BackFn = Box::new(move |g, acc| acc(x.0, pool::max_pool_backward(g, &arg, h, w)));
        self.push(y, Some(back))
    }

    pub fn resize_bilinear(&mut self, x: ValueId, oh: usize, ow: usize) -> ValueId {
        let xv = self.value(x).clone();
        let [_, _, h, w] = xv.shape();
        let y = resize::bilinear(&xv, oh, ow);
        let back: BackFn = Box::new(move |g, acc| acc(x.0, resize::bilinear_backward(g, h, w)));
        self.push(y, Some(back))
    }

    pub fn concat_channels(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let [n, _, h, w] = tensors[0].shape();
        let channels: Vec<usize> = tensors.iter().map(|t| t.c()).collect();
        for t in &tensors {
            assert_eq!([t.n(), t.h(), t.w()], [n, h, w], "concat spatial mismatch");
        }
        let total_c: usize = channels.iter().sum();
        let mut out = vec![0.0; n * total_c * h * w];
        for ni in 0..n {
            let mut off = 0;
            for t in &tensors {
                let c = t.c();
                let src = &t.data()[ni * c * h * w..(ni + 1) * c * h * w];
                out[(ni * total_c + off) * h * w..(ni * total_c + off + c) * h * w]
                    .copy_from_slice(src);
                off += c;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let back: BackFn = Box::new(move |g, acc| {
            let mut off = 0;
            for (&pid, &c) in ids.iter().zip(&channels) {
                let mut dpart = vec![0.0; n * c * h * w];
                for ni in 0..n {
                    let src = &g.data()
                        [(ni * total_c + off) * h * w..(ni * total_c + off + c) * h * w];
                    dpart[ni * c * h * w..(ni + 1) * c * h * w].copy_from_slice(src);
                }
                acc(pid, Tensor::new([n, c, h, w], dpart));
                off += c;
            }
        });
        self.push(Tensor::new([n, total_c, h, w], out), Some(back))
    }

    pub fn center_crop(&mut self, x: ValueId, h: usize, w: usize) -> ValueId {
        let xv = self.value(x).clone();
        let [_, _, ih, iw] = xv.shape();
        let y = pad::center_crop(&xv, h, w);
        let back: BackFn = Box::new(move |g, acc| acc(x.0, pad::center_crop_backward(g, ih, iw)));
        self.push(y, Some(back))
    }

    /// Weight-normalized two-class cross-entropy; returns a scalar node.
    pub fn weighted_ce(&mut self, logits: ValueId, target: &Tensor, tampered_weight: f64) -> ValueId {
        let lv = self.value(logits).clone();
        let (loss_val, p1, wsum) = loss::weighted_ce(&lv, target, tampered_weight);
        let tv = target.clone();
        let back: BackFn = Box::new(move |g, acc| {
            let dloss = g.data()[0];
            acc(
                logits.0,
                loss::weighted_ce_backward(&p1, &tv, tampered_weight, wsum, dloss),
            );
        });
        self.push(Tensor::scalar(loss_val), Some(back))
    }

    /// Reverse pass from a scalar root; gradients gather per parameter id.
    pub fn backward(&mut self, root: ValueId, n_params: usize) -> Gradients {
        assert!(self.track, "backward on an inference graph");
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut by_param: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(pid) = self.nodes[i].param {
                match &mut by_param[pid] {
                    Some(existing) => *existing = existing.add(&g),
                    slot => *slot = Some(g.clone()),
                }
            }
            if let Some(back) = self.nodes[i].backward.take() {
                back(&g, &mut |parent, contrib| match &mut grads[parent] {
                    Some(existing) => *existing = existing.add(&contrib),
                    slot => *slot = Some(contrib),
                });
            }
        }
        Gradients { by_param }
    }
}
