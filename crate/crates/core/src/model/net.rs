use lorafwi_tensor::{Parameter, Scalar, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LayerKind, Layout, ModelConfig};
use crate::error::Result;
use crate::nn::{BatchNorm2dLayer, Conv2dLayer, ConvTranspose2dLayer, Mode, LEAKY_SLOPE};

/// Anything that maps a `[B, S, T, R]` gather batch to `[B, 1, V, V]` maps.
pub trait Network<T: Scalar> {
    fn config(&self) -> &ModelConfig;

    fn forward<'t>(&mut self, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>>;

    fn parameters(&self) -> Vec<&Parameter<T>>;

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn param_count(&self, trainable_only: bool) -> usize {
        self.parameters()
            .iter()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.numel())
            .sum()
    }

    /// Eval-mode forward without recording gradients.
    fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let x = tape.constant(x.clone());
        Ok(self.forward(x, Mode::Eval)?.value())
    }
}

#[derive(Clone, Debug)]
pub(crate) enum ConvLayer<T> {
    Conv(Conv2dLayer<T>),
    Transpose(ConvTranspose2dLayer<T>),
}

impl<T: Scalar> ConvLayer<T> {
    fn weight(&self) -> &Parameter<T> {
        match self {
            Self::Conv(l) => &l.weight,
            Self::Transpose(l) => &l.weight,
        }
    }

    fn params_mut(&mut self) -> (&mut Parameter<T>, Option<&mut Parameter<T>>) {
        match self {
            Self::Conv(l) => (&mut l.weight, l.bias.as_mut()),
            Self::Transpose(l) => (&mut l.weight, l.bias.as_mut()),
        }
    }

    fn bias(&self) -> Option<&Parameter<T>> {
        match self {
            Self::Conv(l) => l.bias.as_ref(),
            Self::Transpose(l) => l.bias.as_ref(),
        }
    }

    fn forward_with<'t>(&self, x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Self::Conv(l) => l.forward_with(x, w),
            Self::Transpose(l) => l.forward_with(x, w),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Block<T> {
    pub(crate) conv: ConvLayer<T>,
    pub(crate) bn: BatchNorm2dLayer<T>,
}

/// Encoder-decoder inversion network. Parameters are named
/// `encoder.{i}.conv.weight`, `encoder.{i}.bn.gamma`, `decoder.{i}.deconv.weight`,
/// `head.weight` and so on; the names are stable across save and load.
#[derive(Clone, Debug)]
pub struct InversionNet<T> {
    config: ModelConfig,
    layout: Layout,
    pub(crate) encoder: Vec<Block<T>>,
    pub(crate) decoder: Vec<Block<T>>,
    pub(crate) head: Conv2dLayer<T>,
}

impl<T: Scalar> InversionNet<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let layout = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = config.in_channels;
        let mut blocks = |prefix: &str, specs: &[super::config::BlockSpec], rng: &mut ChaCha8Rng| {
            specs
                .iter()
                .enumerate()
                .map(|(i, spec)| {
                    let conv = match spec.kind {
                        LayerKind::Conv => ConvLayer::Conv(Conv2dLayer::new(
                            &format!("{prefix}.{i}.conv"),
                            channels,
                            spec.out_channels,
                            spec.kernel,
                            spec.geometry(),
                            false,
                            rng,
                        )),
                        LayerKind::ConvTranspose => ConvLayer::Transpose(ConvTranspose2dLayer::new(
                            &format!("{prefix}.{i}.deconv"),
                            channels,
                            spec.out_channels,
                            spec.kernel,
                            spec.geometry(),
                            false,
                            rng,
                        )),
                    };
                    channels = spec.out_channels;
                    Block {
                        conv,
                        bn: BatchNorm2dLayer::new(&format!("{prefix}.{i}.bn"), spec.out_channels),
                    }
                })
                .collect::<Vec<_>>()
        };
        let encoder = blocks("encoder", &config.encoder, &mut rng);
        let decoder = blocks("decoder", &config.decoder, &mut rng);
        let last = config.decoder.last().expect("validated").out_channels;
        let head = Conv2dLayer::new(
            "head",
            last,
            1,
            (3, 3),
            lorafwi_tensor::ops::ConvGeometry::new((1, 1), (1, 1)),
            true,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            layout,
            encoder,
            decoder,
            head,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Forward pass where every conv weight is routed through `hook`, which
    /// receives the stored parameter and its tape variable and returns the
    /// weight actually used.
    pub fn forward_hooked<'t, F>(&mut self, x: Var<'t, T>, mode: Mode, mut hook: F) -> Result<Var<'t, T>>
    where
        F: FnMut(&Parameter<T>, Var<'t, T>) -> Result<Var<'t, T>>,
    {
        let shape = x.shape();
        let batch = shape.first().copied().unwrap_or(0);
        if shape.len() != 4 || shape[1..] != self.config.input_shape(batch)[1..] {
            return Err(TensorError::mismatch("inversion_net", &shape, &self.config.input_shape(batch)).into());
        }
        let tape = x.tape();
        let slope = T::of(LEAKY_SLOPE);
        let mut h = x;
        for block in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            let w = hook(block.conv.weight(), tape.param(block.conv.weight()))?;
            h = block.conv.forward_with(h, w)?;
            h = block.bn.forward(h, mode)?;
            h = h.leaky_relu(slope);
        }
        let (ch, cw) = self.layout.crop;
        if ch > 0 || cw > 0 {
            h = h.crop2d(ch, cw)?;
        }
        let w = hook(&self.head.weight, tape.param(&self.head.weight))?;
        Ok(self.head.forward_with(h, w)?.tanh())
    }

    /// Conv and transposed-conv weights in forward order.
    pub fn conv_weights(&self) -> Vec<(&Parameter<T>, LayerKind)> {
        let mut out: Vec<_> = self
            .encoder
            .iter()
            .chain(&self.decoder)
            .map(|b| {
                let kind = match b.conv {
                    ConvLayer::Conv(_) => LayerKind::Conv,
                    ConvLayer::Transpose(_) => LayerKind::ConvTranspose,
                };
                (b.conv.weight(), kind)
            })
            .collect();
        out.push((&self.head.weight, LayerKind::Conv));
        out
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.parameters().into_iter().find(|p| p.name == name)
    }

    /// Batch-norm running statistics, named `{layer}.running_mean` and
    /// `{layer}.running_var`.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|b| {
                let prefix = b.bn.gamma.name.trim_end_matches(".gamma").to_string();
                [
                    (format!("{prefix}.running_mean"), &b.bn.running_mean),
                    (format!("{prefix}.running_var"), &b.bn.running_var),
                ]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|b| {
                let prefix = b.bn.gamma.name.trim_end_matches(".gamma").to_string();
                [
                    (format!("{prefix}.running_mean"), &mut b.bn.running_mean),
                    (format!("{prefix}.running_var"), &mut b.bn.running_var),
                ]
            })
            .collect()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.parameters_mut() {
            p.trainable = trainable;
        }
    }

    /// Converts every parameter and buffer to another element type.
    pub fn cast<U: Scalar>(&self) -> InversionNet<U> {
        let param = |p: &Parameter<T>| Parameter {
            name: p.name.clone(),
            value: p.value.cast(),
            grad: None,
            trainable: p.trainable,
        };
        let block = |b: &Block<T>| Block {
            conv: match &b.conv {
                ConvLayer::Conv(l) => ConvLayer::Conv(Conv2dLayer {
                    weight: param(&l.weight),
                    bias: l.bias.as_ref().map(param),
                    geom: l.geom,
                }),
                ConvLayer::Transpose(l) => ConvLayer::Transpose(ConvTranspose2dLayer {
                    weight: param(&l.weight),
                    bias: l.bias.as_ref().map(param),
                    geom: l.geom,
                }),
            },
            bn: BatchNorm2dLayer {
                gamma: param(&b.bn.gamma),
                beta: param(&b.bn.beta),
                running_mean: b.bn.running_mean.cast(),
                running_var: b.bn.running_var.cast(),
                momentum: b.bn.momentum,
                eps: b.bn.eps,
            },
        };
        InversionNet {
            config: self.config.clone(),
            layout: self.layout,
            encoder: self.encoder.iter().map(block).collect(),
            decoder: self.decoder.iter().map(block).collect(),
            head: Conv2dLayer {
                weight: param(&self.head.weight),
                bias: self.head.bias.as_ref().map(param),
                geom: self.head.geom,
            },
        }
    }
}

impl<T: Scalar> Network<T> for InversionNet<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward<'t>(&mut self, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        self.forward_hooked(x, mode, |_, w| Ok(w))
    }

    /// Registry order: per block conv weight, conv bias, gamma, beta; then
    /// the head.
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        for b in self.encoder.iter().chain(&self.decoder) {
            out.push(b.conv.weight());
            out.extend(b.conv.bias());
            out.push(&b.bn.gamma);
            out.push(&b.bn.beta);
        }
        out.push(&self.head.weight);
        out.extend(self.head.bias.as_ref());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            let (w, bias) = b.conv.params_mut();
            out.push(w);
            out.extend(bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.head.weight);
        out.extend(self.head.bias.as_mut());
        out
    }
}
