use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{kaiming_normal, BufferId, ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal kernel, zero bias.
    Kaiming,
    /// All-zero kernel and bias.
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let dims = [out_channels, in_channels, kernel, kernel];
        let w = match init {
            Init::Kaiming => kaiming_normal(dims, rng),
            Init::Zeros => Tensor::zeros(dims),
        };
        let weight = store.add_param(format!("{name}.weight"), w, ParamKind::Weight);
        let bias = bias.then(|| {
            store.add_param(
                format!("{name}.bias"),
                Tensor::zeros([1, out_channels, 1, 1]),
                ParamKind::Bias,
            )
        });
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let d = [1, channels, 1, 1];
        BatchNorm2d {
            gamma: store.add_param(
                format!("{name}.gamma"),
                Tensor::full(d, 1.0),
                ParamKind::NormScale,
            ),
            beta: store.add_param(
                format!("{name}.beta"),
                Tensor::zeros(d),
                ParamKind::NormShift,
            ),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(d)),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(d, 1.0)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            self.running_mean,
            self.running_var,
            self.eps,
        )
    }
}

/// `conv -> [batch norm] -> relu`.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm2d>,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        // a bias in front of batch norm is redundant
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            in_channels,
            out_channels,
            kernel,
            stride,
            !norm,
            Init::Kaiming,
            rng,
        );
        let norm = norm.then(|| BatchNorm2d::new(store, &format!("{name}.bn"), out_channels));
        ConvBnRelu { conv, norm }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = self.conv.forward(g, x);
        if let Some(bn) = &self.norm {
            h = bn.forward(g, h);
        }
        g.relu(h)
    }
}
