//! Layer library on top of the autodiff graph: parameter/buffer stores,
//! convolution, batch norm, squeeze-excitation, inverted-residual and
//! basic residual blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, ValueId};
use crate::ops::conv::ConvSpec;
use crate::tensor::Tensor;

/// Named trainable parameters, indexed densely by creation order.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: String, value: Tensor) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, pid: usize) -> &Tensor {
        &self.values[pid]
    }

    pub fn name(&self, pid: usize) -> &str {
        &self.names[pid]
    }

    pub fn set(&mut self, pid: usize, value: Tensor) {
        assert_eq!(self.values[pid].shape(), value.shape());
        self.values[pid] = value;
    }

    /// Add `delta` to one scalar element; used by finite-difference checks.
    pub fn nudge(&mut self, pid: usize, index: usize, delta: f64) {
        self.values[pid].data_mut()[index] += delta;
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_prefixed(&mut self, prefix: &str) {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                *value = Tensor::zeros(value.shape());
            }
        }
    }
}

/// Non-trainable named buffers (batch-norm running statistics).
#[derive(Clone, Default)]
pub struct BufferStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl BufferStore {
    pub fn add(&mut self, name: String, value: Tensor) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn set(&mut self, id: usize, value: Tensor) {
        assert_eq!(self.values[id].shape(), value.shape());
        self.values[id] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }
}

/// Deferred running-statistics update produced by a training-mode batch
/// norm. Applying these is the caller's responsibility so that forward
/// passes never mutate the model.
pub struct StatUpdate {
    pub mean_buffer: usize,
    pub var_buffer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub params: &'a ParamStore,
    pub buffers: &'a BufferStore,
    pub train: bool,
    pub stat_updates: Vec<StatUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, params: &'a ParamStore, buffers: &'a BufferStore, train: bool) -> Self {
        Ctx {
            g,
            params,
            buffers,
            train,
            stat_updates: Vec::new(),
        }
    }

    fn bind(&mut self, pid: usize) -> ValueId {
        self.g.param(pid, self.params.get(pid).clone())
    }
}

/// Parameter initializer with a deterministic stream.
pub struct Init<'a> {
    pub params: &'a mut ParamStore,
    pub buffers: &'a mut BufferStore,
    pub rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(params: &'a mut ParamStore, buffers: &'a mut BufferStore, seed: u64) -> Self {
        Init {
            params,
            buffers,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-uniform weight draw from fan-in.
    fn conv_weight(&mut self, name: String, shape: [usize; 4]) -> usize {
        let fan_in = shape[1] * shape[2] * shape[3];
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product())
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.params.add(name, Tensor::new(shape, data))
    }
}

#[derive(Clone, Copy)]
pub enum Act {
    Relu,
    Hardswish,
    None,
}

fn activate(cx: &mut Ctx, x: ValueId, act: Act) -> ValueId {
    match act {
        Act::Relu => cx.g.relu(x),
        Act::Hardswish => cx.g.hardswish(x),
        Act::None => x,
    }
}

pub struct Conv2d {
    weight: usize,
    bias: Option<usize>,
    spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let spec = ConvSpec {
            stride,
            padding: dilation * (kernel / 2),
            dilation,
            groups,
        };
        let weight = init.conv_weight(
            format!("{name}.weight"),
            [out_c, in_c / groups, kernel, kernel],
        );
        let bias = bias.then(|| {
            init.params
                .add(format!("{name}.bias"), Tensor::zeros([1, out_c, 1, 1]))
        });
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, cx: &mut Ctx, x: ValueId) -> ValueId {
        let w = cx.bind(self.weight);
        let b = self.bias.map(|pid| cx.bind(pid));
        cx.g.conv2d(x, w, b, self.spec)
    }
}

pub struct BatchNorm2d {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: init
                .params
                .add(format!("{name}.gamma"), Tensor::filled([1, channels, 1, 1], 1.0)),
            beta: init
                .params
                .add(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1])),
            running_mean: init
                .buffers
                .add(format!("{name}.running_mean"), Tensor::zeros([1, channels, 1, 1])),
            running_var: init
                .buffers
                .add(format!("{name}.running_var"), Tensor::filled([1, channels, 1, 1], 1.0)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: ValueId) -> ValueId {
        let gamma = cx.bind(self.gamma);
        let beta = cx.bind(self.beta);
        if cx.train {
            let n = cx.g.value(x).n() * cx.g.value(x).h() * cx.g.value(x).w();
            let (y, mean, var) = cx.g.batch_norm_train(x, gamma, beta, self.eps);
            cx.stat_updates.push(StatUpdate {
                mean_buffer: self.running_mean,
                var_buffer: self.running_var,
                mean,
                var,
                count: n,
            });
            y
        } else {
            let mean = cx.buffers.get(self.running_mean).data().to_vec();
            let var = cx.buffers.get(self.running_var).data().to_vec();
            cx.g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
}

/// Apply deferred batch-norm statistics updates to the buffer store.
pub fn apply_stat_updates(buffers: &mut BufferStore, updates: &[StatUpdate], momentum: f64) {
    for u in updates {
        let old_mean = buffers.get(u.mean_buffer).clone();
        let c = old_mean.c();
        let mut new_mean = vec![0.0; c];
        let mut new_var = vec![0.0; c];
        // unbiased variance feeds the running average
        let correction = if u.count > 1 {
            u.count as f64 / (u.count as f64 - 1.0)
        } else {
            1.0
        };
        for ci in 0..c {
            new_mean[ci] = (1.0 - momentum) * old_mean.data()[ci] + momentum * u.mean[ci];
            new_var[ci] = (1.0 - momentum) * buffers.get(u.var_buffer).data()[ci]
                + momentum * u.var[ci] * correction;
        }
        buffers.set(u.mean_buffer, Tensor::new([1, c, 1, 1], new_mean));
        buffers.set(u.var_buffer, Tensor::new([1, c, 1, 1], new_var));
    }
}

/// Squeeze-excitation: global pool, bottleneck MLP (as 1x1 convs), then
/// per-channel rescaling with a hard sigmoid gate.
pub struct SqueezeExcite {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl SqueezeExcite {
    pub fn new(init: &mut Init, name: &str, channels: usize, squeeze: usize) -> Self {
        SqueezeExcite {
            fc1: Conv2d::new(init, &format!("{name}.fc1"), channels, squeeze, 1, 1, 1, 1, true),
            fc2: Conv2d::new(init, &format!("{name}.fc2"), squeeze, channels, 1, 1, 1, 1, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: ValueId) -> ValueId {
        let s = cx.g.global_avg_pool(x);
        let s = self.fc1.forward(cx, s);
        let s = cx.g.relu(s);
        let s = self.fc2.forward(cx, s);
        let s = cx.g.hardsigmoid(s);
        cx.g.scale_channels(x, s)
    }
}

/// MobileNet-style inverted residual block.
pub struct Bneck {
    expand: Option<(Conv2d, BatchNorm2d)>,
    depthwise: Conv2d,
    dw_bn: BatchNorm2d,
    se: Option<SqueezeExcite>,
    project: Conv2d,
    proj_bn: BatchNorm2d,
    act: Act,
    residual: bool,
}

impl Bneck {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        in_c: usize,
        expand_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        se: bool,
        act: Act,
    ) -> Self {
        let expand = (expand_c != in_c).then(|| {
            (
                Conv2d::new(init, &format!("{name}.expand"), in_c, expand_c, 1, 1, 1, 1, false),
                BatchNorm2d::new(init, &format!("{name}.expand_bn"), expand_c),
            )
        });
        Bneck {
            expand,
            depthwise: Conv2d::new(
                init,
                &format!("{name}.dw"),
                expand_c,
                expand_c,
                kernel,
                stride,
                1,
                expand_c,
                false,
            ),
            dw_bn: BatchNorm2d::new(init, &format!("{name}.dw_bn"), expand_c),
            se: se.then(|| {
                SqueezeExcite::new(init, &format!("{name}.se"), expand_c, (expand_c / 4).max(8))
            }),
            project: Conv2d::new(init, &format!("{name}.project"), expand_c, out_c, 1, 1, 1, 1, false),
            proj_bn: BatchNorm2d::new(init, &format!("{name}.project_bn"), out_c),
            act,
            residual: stride == 1 && in_c == out_c,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: ValueId) -> ValueId {
        let mut h = x;
        if let Some((conv, bn)) = &self.expand {
            h = conv.forward(cx, h);
            h = bn.forward(cx, h);
            h = activate(cx, h, self.act);
        }
        h = self.depthwise.forward(cx, h);
        h = self.dw_bn.forward(cx, h);
        h = activate(cx, h, self.act);
        if let Some(se) = &self.se {
            h = se.forward(cx, h);
        }
        h = self.project.forward(cx, h);
        h = self.proj_bn.forward(cx, h);
        if self.residual {
            h = cx.g.add(h, x);
        }
        h
    }
}

/// ResNet basic block: two 3x3 convs with identity or projected skip.
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    pub fn new(init: &mut Init, name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        BasicBlock {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), in_c, out_c, 3, stride, 1, 1, false),
            bn1: BatchNorm2d::new(init, &format!("{name}.bn1"), out_c),
            conv2: Conv2d::new(init, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1, 1, false),
            bn2: BatchNorm2d::new(init, &format!("{name}.bn2"), out_c),
            downsample: (stride != 1 || in_c != out_c).then(|| {
                (
                    Conv2d::new(init, &format!("{name}.down"), in_c, out_c, 1, stride, 1, 1, false),
                    BatchNorm2d::new(init, &format!("{name}.down_bn"), out_c),
                )
            }),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: ValueId) -> ValueId {
        let mut h = self.conv1.forward(cx, x);
        h = self.bn1.forward(cx, h);
        h = cx.g.relu(h);
        h = self.conv2.forward(cx, h);
        h = self.bn2.forward(cx, h);
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(cx, x);
                bn.forward(cx, s)
            }
            None => x,
        };
        let sum = cx.g.add(h, skip);
        cx.g.relu(sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_names_and_counts() {
        let mut params = ParamStore::default();
        let mut buffers = BufferStore::default();
        let mut init = Init::new(&mut params, &mut buffers, 0);
        let _block = Bneck::new(&mut init, "b0", 8, 16, 8, 3, 1, true, Act::Relu);
        assert!(params.iter().any(|(n, _)| n == "b0.dw.weight"));
        assert!(buffers.iter().any(|(n, _)| n == "b0.dw_bn.running_var"));
        assert!(params.num_scalars() > 0);
    }

    #[test]
    fn bneck_residual_preserves_shape() {
        let mut params = ParamStore::default();
        let mut buffers = BufferStore::default();
        let mut init = Init::new(&mut params, &mut buffers, 1);
        let block = Bneck::new(&mut init, "b", 8, 24, 8, 3, 1, false, Act::Hardswish);
        let mut g = Graph::inference();
        let x = g.input(Tensor::filled([2, 8, 12, 12], 0.3));
        let mut cx = Ctx::new(&mut g, &params, &buffers, false);
        let y = block.forward(&mut cx, x);
        assert_eq!(g.value(y).shape(), [2, 8, 12, 12]);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn basic_block_strided_halves_spatial() {
        let mut params = ParamStore::default();
        let mut buffers = BufferStore::default();
        let mut init = Init::new(&mut params, &mut buffers, 2);
        let block = BasicBlock::new(&mut init, "rb", 8, 16, 2);
        let mut g = Graph::inference();
        let x = g.input(Tensor::filled([1, 8, 16, 16], 1.0));
        let mut cx = Ctx::new(&mut g, &params, &buffers, false);
        let y = block.forward(&mut cx, x);
        assert_eq!(g.value(y).shape(), [1, 16, 8, 8]);
    }

    #[test]
    fn running_stats_update_moves_toward_batch() {
        let mut params = ParamStore::default();
        let mut buffers = BufferStore::default();
        let mut init = Init::new(&mut params, &mut buffers, 3);
        let bn = BatchNorm2d::new(&mut init, "bn", 2, );
        let mut g = Graph::recording();
        let x = g.input(Tensor::new(
            [1, 2, 2, 2],
            vec![4.0, 4.0, 4.0, 4.0, 0.0, 2.0, 0.0, 2.0],
        ));
        let mut cx = Ctx::new(&mut g, &params, &buffers, true);
        let _y = bn.forward(&mut cx, x);
        let updates = cx.stat_updates;
        apply_stat_updates(&mut buffers, &updates, 0.1);
        // channel 0: batch mean 4 -> running 0.9*0 + 0.1*4 = 0.4
        assert!((buffers.get(0).data()[0] - 0.4).abs() < 1e-12);
        // channel 1: batch mean 1, biased var 1, unbiased 4/3
        assert!((buffers.get(0).data()[1] - 0.1).abs() < 1e-12);
        assert!((buffers.get(1).data()[1] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);
    }
}
