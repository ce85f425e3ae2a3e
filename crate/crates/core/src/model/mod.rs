//! Teacher/student networks: specification, parameters, forward and backward passes.

mod arch;
pub mod checkpoint;
pub mod layers;
pub mod params;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use layers::{BnUpdate, Layer, Mode};
pub use params::{Gradients, ParamKind, Parameter, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "tiny-cnn")]
    TinyCnn,
    #[serde(rename = "resnet18")]
    Resnet18,
    #[serde(rename = "mobilenetv2")]
    Mobilenetv2,
    /// A single affine map on the flattened `(h, w, c)`-ordered input; used by tests and
    /// closed-form attack checks.
    #[serde(rename = "linear")]
    Linear,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::TinyCnn => "tiny-cnn",
            Architecture::Resnet18 => "resnet18",
            Architecture::Mobilenetv2 => "mobilenetv2",
            Architecture::Linear => "linear",
        }
    }

    /// Base channel count used when none is configured.
    pub fn default_width(self) -> usize {
        match self {
            Architecture::TinyCnn => 16,
            Architecture::Resnet18 => 64,
            Architecture::Mobilenetv2 => 32,
            Architecture::Linear => 1,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Architecture::TinyCnn => 0,
            Architecture::Resnet18 => 1,
            Architecture::Mobilenetv2 => 2,
            Architecture::Linear => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Architecture::TinyCnn),
            1 => Some(Architecture::Resnet18),
            2 => Some(Architecture::Mobilenetv2),
            3 => Some(Architecture::Linear),
            _ => None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-cnn" => Ok(Architecture::TinyCnn),
            "resnet18" => Ok(Architecture::Resnet18),
            "mobilenetv2" => Ok(Architecture::Mobilenetv2),
            "linear" => Ok(Architecture::Linear),
            other => Err(Error::InvalidInput(format!(
                "unknown architecture `{other}` (expected tiny-cnn, resnet18, mobilenetv2 or linear)"
            ))),
        }
    }
}

/// Backbone, class count, per-image input shape `(channels, height, width)` and base width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub width: usize,
}

impl ModelSpec {
    pub fn new(
        architecture: Architecture,
        num_classes: usize,
        input_shape: (usize, usize, usize),
    ) -> Self {
        ModelSpec {
            architecture,
            num_classes,
            input_shape,
            width: architecture.default_width(),
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::DegenerateDimension(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 || self.width == 0 {
            return Err(Error::DegenerateDimension(format!(
                "input shape {:?} and width {} must be positive",
                self.input_shape, self.width
            )));
        }
        Ok(())
    }
}

/// A network graph together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    layers: Vec<Layer>,
    params: ParameterSet<T>,
}

/// Activations recorded by [`Model::forward`] for a later backward pass.
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    saved: Vec<layers::Saved<T>>,
    bn_updates: Vec<BnUpdate<T>>,
    input_shape: Vec<usize>,
}

impl<T> ForwardPass<T> {
    /// Batch statistics gathered by train-mode batch norms.
    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (layers, params) = arch::build(&spec, rng);
        Ok(Model {
            spec,
            layers,
            params,
        })
    }

    /// Rebuilds the graph for `spec` and installs `params`, which must match it name-for-name.
    pub fn from_parts(spec: ModelSpec, params: ParameterSet<T>) -> Result<Self> {
        spec.validate()?;
        let (layers, template) = arch::build::<T, _>(
            &spec,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        );
        if template.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "{} expects {} parameter tensors, got {}",
                spec.architecture,
                template.len(),
                params.len()
            )));
        }
        for (want, got) in template.iter().zip(params.iter()) {
            if want.name != got.name
                || want.value.shape() != got.value.shape()
                || want.kind != got.kind
            {
                return Err(Error::InvalidInput(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Model {
            spec,
            layers,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec,
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.spec.input_shape;
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![shape.first().copied().unwrap_or(0), c, h, w],
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the network on an `[N, C, H, W]` batch, keeping what backward needs.
    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        self.check_input(images)?;
        let x = nchw_to_nhwc(images);
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut bn_updates = Vec::new();
        let logits = layers::forward(
            &self.layers,
            &self.params,
            x,
            mode,
            &mut saved,
            &mut bn_updates,
        );
        Ok(ForwardPass {
            logits,
            saved,
            bn_updates,
            input_shape: images.shape().to_vec(),
        })
    }

    /// Eval-mode logits, `[N, num_classes]`.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(images, Mode::Eval)?.logits)
    }

    /// Back-propagates `grad_logits`. Parameter gradients are accumulated into `grads`
    /// when provided; the `[N, C, H, W]` input gradient is returned when requested.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        grad_logits: &Tensor<T>,
        grads: Option<&mut Gradients<T>>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        if grad_logits.shape() != pass.logits.shape() {
            return Err(Error::ShapeMismatch {
                expected: pass.logits.shape().to_vec(),
                actual: grad_logits.shape().to_vec(),
            });
        }
        let mut grads = grads;
        let dx = layers::backward(
            &self.layers,
            &self.params,
            &pass.saved,
            grad_logits.clone(),
            &mut grads,
            need_input_grad,
        );
        Ok(dx.map(|d| nhwc_to_nchw(&d, &pass.input_shape)))
    }

    /// Gradient of `sum(grad_logits * logits)` with respect to the input images.
    pub fn input_gradient(
        &self,
        pass: &ForwardPass<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.backward(pass, grad_logits, None, true)?
            .ok_or_else(|| Error::Numeric("input gradient unavailable".into()))
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            u.apply(&mut self.params);
        }
    }
}

fn nchw_to_nhwc<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    out[((ni * h + yi) * w + xi) * c + ci] = src[((ni * c + ci) * h + yi) * w + xi];
                }
            }
        }
    }
    Tensor::from_vec(&[n, h, w, c], out).expect("transpose")
}

fn nhwc_to_nchw<T: Scalar>(x: &Tensor<T>, nchw: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = (nchw[0], nchw[1], nchw[2], nchw[3]);
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for yi in 0..h {
            for xi in 0..w {
                for ci in 0..c {
                    out[((ni * c + ci) * h + yi) * w + xi] = src[((ni * h + yi) * w + xi) * c + ci];
                }
            }
        }
    }
    Tensor::from_vec(nchw, out).expect("transpose")
}

/// Max-subtracted softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Row-wise softmax of an `[N, k]` logit tensor into row-major `f64` probabilities.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(logits.len());
    let mut row = Vec::with_capacity(logits.row_len());
    for i in 0..logits.rows() {
        row.clear();
        row.extend(logits.row(i).iter().map(|v| v.f64()));
        out.extend(softmax(&row)?);
    }
    Ok(out)
}
