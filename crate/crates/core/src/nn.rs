//! Layers with parameters: convolution, transposed convolution and batch
//! normalization. Activations live on [`Var`] directly.

use lorafwi_tensor::ops::{
    batch_norm2d_eval, batch_norm2d_train, conv2d, conv_output_extent, conv_transpose2d, conv_transpose_output_extent,
    ConvGeometry,
};
use lorafwi_tensor::{Parameter, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running estimates updated.
    Train,
    /// Running estimates only.
    Eval,
}

/// Kaiming-uniform bound for a layer followed by a leaky ReLU.
fn kaiming_bound(fan_in: usize) -> f64 {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

fn uniform<T: Scalar>(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer<T> {
    /// `[C_out, C_in, kh, kw]`
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub geom: ConvGeometry,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        geom: ConvGeometry,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let weight = uniform(vec![out_channels, in_channels, kernel.0, kernel.1], kaiming_bound(fan_in), rng);
        let bias = bias.then(|| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Parameter::new(format!("{name}.bias"), uniform(vec![out_channels], bound, rng))
        });
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias,
            geom,
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[2], s[3])
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (s, p) = (self.geom.stride, self.geom.padding);
        Some((conv_output_extent(h, kh, s.0, p.0)?, conv_output_extent(w, kw, s.1, p.1)?))
    }

    pub fn forward<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = x.tape().param(&self.weight);
        self.forward_with(x, w)
    }

    /// Runs the layer with a substitute weight of the same shape.
    pub fn forward_with<'t>(&self, x: Var<'t, T>, weight: Var<'t, T>) -> Result<Var<'t, T>> {
        let bias = self.bias.as_ref().map(|b| x.tape().param(b));
        Ok(conv2d(x, weight, bias, self.geom)?)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2dLayer<T> {
    /// `[C_in, C_out, kh, kw]`
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub geom: ConvGeometry,
}

impl<T: Scalar> ConvTranspose2dLayer<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        geom: ConvGeometry,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        // Same fan convention as the usual framework default for transposed
        // weights: the second dimension times the kernel area.
        let fan_in = out_channels * kernel.0 * kernel.1;
        let weight = uniform(vec![in_channels, out_channels, kernel.0, kernel.1], kaiming_bound(fan_in), rng);
        let bias = bias.then(|| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Parameter::new(format!("{name}.bias"), uniform(vec![out_channels], bound, rng))
        });
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias,
            geom,
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[2], s[3])
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (s, p) = (self.geom.stride, self.geom.padding);
        Some((
            conv_transpose_output_extent(h, kh, s.0, p.0)?,
            conv_transpose_output_extent(w, kw, s.1, p.1)?,
        ))
    }

    pub fn forward<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = x.tape().param(&self.weight);
        self.forward_with(x, w)
    }

    pub fn forward_with<'t>(&self, x: Var<'t, T>, weight: Var<'t, T>) -> Result<Var<'t, T>> {
        let bias = self.bias.as_ref().map(|b| x.tape().param(b));
        Ok(conv_transpose2d(x, weight, bias, self.geom)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2dLayer<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2dLayer<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()).expect("channels > 0")),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(vec![channels]).expect("channels > 0")),
            running_mean: Tensor::zeros(vec![channels]).expect("channels > 0"),
            running_var: Tensor::full(vec![channels], T::one()).expect("channels > 0"),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode reads the estimates.
    pub fn forward<'t>(&mut self, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let tape: &'t Tape<T> = x.tape();
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        let eps = T::of(self.eps);
        match mode {
            Mode::Train => {
                let (y, moments) = batch_norm2d_train(x, gamma, beta, eps)?;
                let m = T::of(self.momentum);
                let keep = T::one() - m;
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&moments.mean) {
                    *r = keep * *r + m * *b;
                }
                for (r, b) in self.running_var.data_mut().iter_mut().zip(&moments.var_unbiased) {
                    *r = keep * *r + m * *b;
                }
                Ok(y)
            }
            Mode::Eval => Ok(batch_norm2d_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                eps,
            )?),
        }
    }
}
