//! Network graph builders for the supported backbones.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::model::layers::Layer;
use crate::model::params::{ParamKind, ParameterSet};
use crate::model::{Architecture, ModelSpec};
use crate::tensor::{Scalar, Tensor};

struct Builder<'a, T, R> {
    params: ParameterSet<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::lit(dist.sample(self.rng))).collect();
        Tensor::from_vec(shape, data).expect("init shape")
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64, kind: ParamKind) -> usize {
        let len = shape.iter().product();
        let t = Tensor::from_vec(shape, vec![T::lit(value); len]).expect("init shape");
        self.params.push(name, kind, t)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Layer {
        let cg = in_channels / groups;
        let fan_in = cg * kernel * kernel;
        let w = self.normal(
            &[out_channels, kernel, kernel, cg],
            (2.0 / fan_in as f64).sqrt(),
        );
        let weight = self
            .params
            .push(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = bias.then(|| {
            self.fill(
                format!("{name}.bias"),
                &[out_channels],
                0.0,
                ParamKind::Weight,
            )
        });
        Layer::Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    fn bn(&mut self, name: &str, channels: usize) -> Layer {
        Layer::BatchNorm {
            gamma: self.fill(
                format!("{name}.weight"),
                &[channels],
                1.0,
                ParamKind::Weight,
            ),
            beta: self.fill(format!("{name}.bias"), &[channels], 0.0, ParamKind::Weight),
            running_mean: self.fill(
                format!("{name}.running_mean"),
                &[channels],
                0.0,
                ParamKind::Buffer,
            ),
            running_var: self.fill(
                format!("{name}.running_var"),
                &[channels],
                1.0,
                ParamKind::Buffer,
            ),
            channels,
        }
    }

    fn linear(&mut self, name: &str, in_features: usize, out_features: usize) -> Layer {
        let w = self.normal(
            &[out_features, in_features],
            (1.0 / in_features as f64).sqrt(),
        );
        Layer::Linear {
            weight: self
                .params
                .push(format!("{name}.weight"), ParamKind::Weight, w),
            bias: self.fill(
                format!("{name}.bias"),
                &[out_features],
                0.0,
                ParamKind::Weight,
            ),
            in_features,
            out_features,
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

pub(crate) fn build<T: Scalar, R: Rng>(
    spec: &ModelSpec,
    rng: &mut R,
) -> (Vec<Layer>, ParameterSet<T>) {
    let mut b = Builder {
        params: ParameterSet::new(),
        rng,
    };
    let layers = match spec.architecture {
        Architecture::TinyCnn => tiny_cnn(&mut b, spec),
        Architecture::Resnet18 => resnet18(&mut b, spec),
        Architecture::Mobilenetv2 => mobilenet_v2(&mut b, spec),
        Architecture::Linear => {
            let (c, h, w) = spec.input_shape;
            vec![Layer::Flatten, b.linear("fc", c * h * w, spec.num_classes)]
        }
    };
    (layers, b.params)
}

/// Four stride-2 3x3 convolutions with ReLU, then a linear head on the flattened map.
fn tiny_cnn<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, spec: &ModelSpec) -> Vec<Layer> {
    let (c, mut h, mut w) = spec.input_shape;
    let widths = [spec.width, 2 * spec.width, 4 * spec.width, 4 * spec.width];
    let mut layers = Vec::new();
    let mut cin = c;
    for (i, &cout) in widths.iter().enumerate() {
        layers.push(b.conv(&format!("conv{}", i + 1), cin, cout, 3, 2, 1, true));
        layers.push(Layer::Relu);
        cin = cout;
        h = conv_out(h, 3, 2);
        w = conv_out(w, 3, 2);
    }
    layers.push(Layer::Flatten);
    layers.push(b.linear("fc", h * w * cin, spec.num_classes));
    layers
}

/// CIFAR-style ResNet-18: 3x3 stem, four stages of two basic blocks, global pooling.
fn resnet18<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, spec: &ModelSpec) -> Vec<Layer> {
    let base = spec.width;
    let mut layers = vec![
        b.conv("conv1", spec.input_shape.0, base, 3, 1, 1, false),
        b.bn("bn1", base),
        Layer::Relu,
    ];
    let mut cin = base;
    for (stage, (mult, stride)) in [(1, 1), (2, 2), (4, 2), (8, 2)].into_iter().enumerate() {
        let cout = base * mult;
        for block in 0..2 {
            let s = if block == 0 { stride } else { 1 };
            let p = format!("layer{}.{}", stage + 1, block);
            let body = vec![
                b.conv(&format!("{p}.conv1"), cin, cout, 3, s, 1, false),
                b.bn(&format!("{p}.bn1"), cout),
                Layer::Relu,
                b.conv(&format!("{p}.conv2"), cout, cout, 3, 1, 1, false),
                b.bn(&format!("{p}.bn2"), cout),
            ];
            let shortcut = if s != 1 || cin != cout {
                vec![
                    b.conv(&format!("{p}.shortcut.0"), cin, cout, 1, s, 1, false),
                    b.bn(&format!("{p}.shortcut.1"), cout),
                ]
            } else {
                Vec::new()
            };
            layers.push(Layer::Residual { body, shortcut });
            layers.push(Layer::Relu);
            cin = cout;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(b.linear("linear", cin, spec.num_classes));
    layers
}

/// CIFAR-style MobileNetV2 (stride-1 stem and second stage). `width` 32 is the
/// standard 1.0 multiplier.
fn mobilenet_v2<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, spec: &ModelSpec) -> Vec<Layer> {
    let scale = |c: usize| (c * spec.width).div_ceil(32).max(1);
    // (expansion, channels, repeats, stride)
    let settings = [
        (1, 16, 1, 1),
        (6, 24, 2, 1),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let stem = scale(32);
    let mut layers = vec![
        b.conv("conv1", spec.input_shape.0, stem, 3, 1, 1, false),
        b.bn("bn1", stem),
        Layer::Relu6,
    ];
    let mut cin = stem;
    let mut idx = 0;
    for (t, c, n, s) in settings {
        let cout = scale(c);
        for rep in 0..n {
            let stride = if rep == 0 { s } else { 1 };
            let hidden = cin * t;
            let p = format!("layers.{idx}");
            let mut body = Vec::new();
            if t != 1 {
                body.push(b.conv(&format!("{p}.conv1"), cin, hidden, 1, 1, 1, false));
                body.push(b.bn(&format!("{p}.bn1"), hidden));
                body.push(Layer::Relu6);
            }
            body.push(b.conv(
                &format!("{p}.conv2"),
                hidden,
                hidden,
                3,
                stride,
                hidden,
                false,
            ));
            body.push(b.bn(&format!("{p}.bn2"), hidden));
            body.push(Layer::Relu6);
            body.push(b.conv(&format!("{p}.conv3"), hidden, cout, 1, 1, 1, false));
            body.push(b.bn(&format!("{p}.bn3"), cout));
            if stride == 1 && cin == cout {
                layers.push(Layer::Residual {
                    body,
                    shortcut: Vec::new(),
                });
            } else {
                layers.extend(body);
            }
            cin = cout;
            idx += 1;
        }
    }
    let last = scale(1280);
    layers.push(b.conv("conv2", cin, last, 1, 1, 1, false));
    layers.push(b.bn("bn2", last));
    layers.push(Layer::Relu6);
    layers.push(Layer::GlobalAvgPool);
    layers.push(b.linear("linear", last, spec.num_classes));
    layers
}
