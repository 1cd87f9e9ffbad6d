//! Low-rank adaptation of conv and transposed-conv weights.
//!
//! A weight `W0` of shape `[d0, d1, kh, kw]` is viewed as a `d0 x (d1*kh*kw)`
//! matrix and adapted as `W0 + s * B A` with `B: [d0, r]`, `A: [r, d1*kh*kw]`.
//! For a conv `d0` is the output channel count, for a transposed conv it is
//! the input channel count (the weight layouts differ).
//!
//! Adapter files (`FWLA`):
//!
//! ```text
//! "FWLA" | u32 version | u32 len | config JSON | 32-byte base fingerprint
//!        | u32 len | manifest JSON | A/B blobs
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use lorafwi_tensor::{gemm, MatRef, Parameter, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{decode_tensors, encode_tensors, push_json, read_file, write_file, Reader, TensorEntry};
use crate::error::{Error, Result};
use crate::model::{ArtifactMeta, InversionNet, ModelConfig, Network};
use crate::nn::Mode;

pub const ADAPTER_MAGIC: &[u8; 4] = b"FWLA";
pub const ADAPTER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// `s = alpha`
    Alpha,
    /// `s = alpha / r`
    #[default]
    AlphaOverR,
}

/// Which weights receive an adapter.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFilter {
    /// Every conv and transposed-conv weight, including the output head.
    #[default]
    AllConv,
    /// Weights whose name starts with one of the prefixes.
    Prefixes(Vec<String>),
}

impl TargetFilter {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            Self::AllConv => true,
            Self::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub scaling: ScalingMode,
    #[serde(default)]
    pub target: TargetFilter,
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64) -> Self {
        Self {
            rank,
            alpha,
            scaling: ScalingMode::default(),
            target: TargetFilter::default(),
        }
    }

    pub fn with_scaling(mut self, scaling: ScalingMode) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::LoraConfig("rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::LoraConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        match self.scaling {
            ScalingMode::Alpha => self.alpha,
            ScalingMode::AlphaOverR => self.alpha / self.rank as f64,
        }
    }
}

/// SHA-256 over the base model's parameter names and shapes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn of<T: Scalar>(model: &InversionNet<T>) -> Self {
        let mut h = Sha256::new();
        for p in model.parameters() {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update([0u8]);
        }
        Self(h.finalize().into())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|b| write!(f, "{b:02x}"))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

/// Low-rank pair for one base weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer<T> {
    /// Name of the adapted base weight.
    pub target: String,
    /// `[r, d1*kh*kw]`
    pub a: Parameter<T>,
    /// `[d0, r]`
    pub b: Parameter<T>,
    pub base_shape: Vec<usize>,
}

impl<T: Scalar> LoraLayer<T> {
    /// `s * reshape(B A)` as a plain tensor.
    pub fn delta(&self, scale: f64) -> Tensor<T> {
        let (d0, r) = (self.b.value.shape()[0], self.b.value.shape()[1]);
        let k = self.a.value.shape()[1];
        let mut out = vec![T::zero(); d0 * k];
        gemm(
            MatRef::new(self.b.value.data(), d0, r),
            MatRef::new(self.a.value.data(), r, k),
            T::zero(),
            &mut out,
        );
        let s = T::of(scale);
        out.iter_mut().for_each(|v| *v = *v * s);
        Tensor::new(self.base_shape.clone(), out).expect("delta matches base shape")
    }

    fn effective<'t>(&self, w0: Var<'t, T>, scale: f64) -> Result<Var<'t, T>> {
        let tape = w0.tape();
        let a = tape.param(&self.a);
        let b = tape.param(&self.b);
        let delta = b.matmul(a)?.scale(T::of(scale)).reshape(self.base_shape.clone())?;
        Ok(w0.add(delta)?)
    }
}

fn layer_prefix(target: &str) -> &str {
    target.strip_suffix(".weight").unwrap_or(target)
}

/// The per-task artifact: A/B pairs, their config and the fingerprint of the
/// base model they belong to. Never holds base weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub config: LoraConfig,
    pub fingerprint: Fingerprint,
    pub layers: Vec<LoraLayer<T>>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A ~ N(0, 1/r)`, `B = 0`, so the adapter starts as an exact no-op.
    pub fn init(base: &InversionNet<T>, config: LoraConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let r = config.rank;
        let normal = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (w, _kind) in base.conv_weights() {
            if !config.target.matches(&w.name) {
                continue;
            }
            let shape = w.value.shape().to_vec();
            let d0 = shape[0];
            let k: usize = shape[1..].iter().product();
            let prefix = layer_prefix(&w.name);
            let a: Vec<T> = (0..r * k).map(|_| T::of(normal.sample(&mut rng))).collect();
            layers.push(LoraLayer {
                target: w.name.clone(),
                a: Parameter::new(format!("{prefix}.lora_a"), Tensor::new(vec![r, k], a)?),
                b: Parameter::new(format!("{prefix}.lora_b"), Tensor::zeros(vec![d0, r])?),
                base_shape: shape,
            });
        }
        if layers.is_empty() {
            return Err(Error::EmptyTarget);
        }
        Ok(Self {
            config,
            fingerprint: Fingerprint::of(base),
            layers,
        })
    }

    pub fn layer(&self, target: &str) -> Option<&LoraLayer<T>> {
        self.layers.iter().find(|l| l.target == target)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.a.numel() + l.b.numel()).sum()
    }

    /// Same adapter with every `B` zeroed.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.b.value = Tensor::zeros(l.b.value.shape().to_vec()).expect("nonempty");
        }
        out
    }

    pub fn check(&self, base: &InversionNet<T>) -> Result<()> {
        let expected = Fingerprint::of(base);
        if expected != self.fingerprint {
            return Err(Error::Fingerprint {
                expected: expected.to_string(),
                found: self.fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, meta: &ArtifactMeta) -> Vec<u8> {
        let tensors: Vec<(String, &Tensor<T>)> = self
            .layers
            .iter()
            .flat_map(|l| [(l.a.name.clone(), &l.a.value), (l.b.name.clone(), &l.b.value)])
            .collect();
        let (entries, blob) = encode_tensors(&tensors);
        let manifest = AdapterManifest {
            meta: meta.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerEntry {
                    target: l.target.clone(),
                    base_shape: l.base_shape.clone(),
                })
                .collect(),
            tensors: entries,
        };
        let mut out = Vec::with_capacity(blob.len() + 4096);
        out.extend_from_slice(ADAPTER_MAGIC);
        out.extend_from_slice(&ADAPTER_VERSION.to_le_bytes());
        push_json(&mut out, &self.config);
        out.extend_from_slice(&self.fingerprint.0);
        push_json(&mut out, &manifest);
        out.extend_from_slice(&blob);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<(Self, ArtifactMeta)> {
        let mut r = Reader::new(bytes);
        r.magic(ADAPTER_MAGIC)?;
        let version = r.u32()?;
        if version != ADAPTER_VERSION {
            return Err(Error::UnknownVersion {
                what: "adapter",
                version,
            });
        }
        let config: LoraConfig = r.json("adapter config")?;
        config.validate()?;
        let fingerprint = Fingerprint(r.take(32)?.try_into().expect("32 bytes"));
        let manifest: AdapterManifest = r.json("adapter manifest")?;
        let tensors = decode_tensors::<T>(&manifest.tensors, r.rest())?;
        if tensors.len() != 2 * manifest.layers.len() {
            return Err(Error::Corrupt(format!(
                "{} tensors for {} adapted layers",
                tensors.len(),
                manifest.layers.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for entry in manifest.layers {
            let (an, a) = it.next().expect("counted");
            let (bn, b) = it.next().expect("counted");
            let prefix = layer_prefix(&entry.target);
            let r_ok = a.shape().len() == 2 && b.shape().len() == 2 && a.shape()[0] == config.rank && b.shape()[1] == config.rank;
            let dims_ok = r_ok
                && entry.base_shape.len() == 4
                && b.shape()[0] == entry.base_shape[0]
                && a.shape()[1] == entry.base_shape[1..].iter().product::<usize>();
            if an != format!("{prefix}.lora_a") || bn != format!("{prefix}.lora_b") || !dims_ok {
                return Err(Error::Corrupt(format!("inconsistent adapter tensors for {}", entry.target)));
            }
            layers.push(LoraLayer {
                target: entry.target,
                a: Parameter::new(an, a),
                b: Parameter::new(bn, b),
                base_shape: entry.base_shape,
            });
        }
        Ok((
            Self {
                config,
                fingerprint,
                layers,
            },
            manifest.meta,
        ))
    }

    pub fn save(&self, meta: &ArtifactMeta, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode(meta))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, ArtifactMeta)> {
        Self::decode(&read_file(path.as_ref())?)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    target: String,
    base_shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdapterManifest {
    meta: ArtifactMeta,
    layers: Vec<LayerEntry>,
    tensors: Vec<TensorEntry>,
}

/// `W0 + s * reshape(B A)` for one adapted weight. Pure.
pub fn effective_weight<T: Scalar>(base: &InversionNet<T>, adapter: &LoraAdapter<T>, target: &str) -> Result<Tensor<T>> {
    adapter.check(base)?;
    let w0 = base.parameter(target).ok_or_else(|| Error::MissingParam(target.to_string()))?;
    match adapter.layer(target) {
        Some(layer) => {
            let delta = layer.delta(adapter.config.scale());
            Ok(w0.value.zip_map(&delta, "effective_weight", |w, d| w + d)?)
        }
        None => Ok(w0.value.clone()),
    }
}

/// Frozen base plus a trainable adapter. Batch norm always runs on the base
/// model's running statistics, which are never updated.
#[derive(Clone, Debug)]
pub struct LoraModel<T> {
    base: InversionNet<T>,
    adapter: LoraAdapter<T>,
}

/// Freezes `base` and attaches a freshly initialized adapter.
pub fn attach<T: Scalar>(base: InversionNet<T>, config: LoraConfig, seed: u64) -> Result<LoraModel<T>> {
    let adapter = LoraAdapter::init(&base, config, seed)?;
    LoraModel::new(base, adapter)
}

impl<T: Scalar> LoraModel<T> {
    pub fn new(mut base: InversionNet<T>, mut adapter: LoraAdapter<T>) -> Result<Self> {
        adapter.check(&base)?;
        base.set_trainable(false);
        for l in &mut adapter.layers {
            l.a.trainable = true;
            l.b.trainable = true;
        }
        Ok(Self { base, adapter })
    }

    pub fn base(&self) -> &InversionNet<T> {
        &self.base
    }

    pub fn adapter(&self) -> &LoraAdapter<T> {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut LoraAdapter<T> {
        &mut self.adapter
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapter.param_count()
    }

    /// Replaces the adapter and returns the previous one.
    pub fn swap_adapter(&mut self, mut adapter: LoraAdapter<T>) -> Result<LoraAdapter<T>> {
        adapter.check(&self.base)?;
        for l in &mut adapter.layers {
            l.a.trainable = true;
            l.b.trainable = true;
        }
        Ok(std::mem::replace(&mut self.adapter, adapter))
    }

    /// Folds the adapter into the base weights. The result is a plain model
    /// with every parameter trainable; it has no adapter left to merge.
    ///
    /// ```compile_fail
    /// use lorafwi_core::model::{InversionNet, ModelConfig};
    /// let net = InversionNet::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
    /// let _ = net.merge();
    /// ```
    pub fn merge(self) -> InversionNet<T> {
        let scale = self.adapter.config.scale();
        let deltas: HashMap<&str, Tensor<T>> = self.adapter.layers.iter().map(|l| (l.target.as_str(), l.delta(scale))).collect();
        let mut base = self.base.clone();
        for p in base.parameters_mut() {
            if let Some(d) = deltas.get(p.name.as_str()) {
                for (w, dv) in p.value.data_mut().iter_mut().zip(d.data()) {
                    *w = *w + *dv;
                }
            }
            p.trainable = true;
        }
        base
    }

    pub fn into_parts(self) -> (InversionNet<T>, LoraAdapter<T>) {
        (self.base, self.adapter)
    }
}

impl<T: Scalar> Network<T> for LoraModel<T> {
    fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    fn forward<'t>(&mut self, x: Var<'t, T>, _mode: Mode) -> Result<Var<'t, T>> {
        let scale = self.adapter.config.scale();
        let index: HashMap<&str, &LoraLayer<T>> = self.adapter.layers.iter().map(|l| (l.target.as_str(), l)).collect();
        self.base.forward_hooked(x, Mode::Eval, |p, w| match index.get(p.name.as_str()) {
            Some(layer) => layer.effective(w, scale),
            None => Ok(w),
        })
    }

    /// Base parameters (frozen) followed by adapter pairs.
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = self.base.parameters();
        out.extend(self.adapter.layers.iter().flat_map(|l| [&l.a, &l.b]));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.base.parameters_mut();
        out.extend(self.adapter.layers.iter_mut().flat_map(|l| [&mut l.a, &mut l.b]));
        out
    }
}

