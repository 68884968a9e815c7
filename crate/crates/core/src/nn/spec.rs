//! Declarative model description and the canonical architectures.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        features: usize,
    },
    Flatten,
    InjectionPoint {
        id: usize,
    },
}

impl LayerKind {
    pub fn is_learnable(&self) -> bool {
        matches!(self, LayerKind::FullyConnected { .. } | LayerKind::Conv2d { .. })
    }

    /// Short lowercase tag used to name injection points.
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::FullyConnected { .. } => "fc",
            LayerKind::Conv2d { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "pool",
            LayerKind::BatchNorm { .. } => "bn",
            LayerKind::Flatten => "flatten",
            LayerKind::InjectionPoint { .. } => "noise",
        }
    }

    /// Whether `build_model` places an injection point after this layer.
    /// Batch norm layers are skipped, and so is `Flatten`, which only
    /// reshapes the values already exposed by the preceding point.
    pub fn gets_injection_point(&self) -> bool {
        !matches!(
            self,
            LayerKind::BatchNorm { .. } | LayerKind::Flatten | LayerKind::InjectionPoint { .. }
        )
    }

    /// Per-item output shape for the given per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerKind::FullyConnected { inputs, outputs } => match input {
                [n] if *n == inputs => Ok(vec![outputs]),
                _ => Err(format!("expects [{inputs}] inputs, got {input:?}")),
            },
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => match input {
                [c, h, w] if *c == in_channels => {
                    if stride == 0 || kernel == 0 {
                        return Err("kernel and stride must be positive".into());
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(format!("kernel {kernel} larger than padded input {input:?}"));
                    }
                    Ok(vec![
                        out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ])
                }
                _ => Err(format!("expects [{in_channels}, H, W] input, got {input:?}")),
            },
            LayerKind::MaxPool2d { kernel, stride } => match input {
                [c, h, w] => {
                    if stride == 0 || kernel == 0 || *h < kernel || *w < kernel {
                        return Err(format!("pool {kernel}/{stride} does not fit {input:?}"));
                    }
                    Ok(vec![*c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
                }
                _ => Err(format!("expects [C, H, W] input, got {input:?}")),
            },
            LayerKind::BatchNorm { features } => match input.first() {
                Some(&c) if c == features && (input.len() == 1 || input.len() == 3) => {
                    Ok(input.to_vec())
                }
                _ => Err(format!("expects {features} features/channels, got {input:?}")),
            },
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Relu | LayerKind::InjectionPoint { .. } => Ok(input.to_vec()),
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::FullyConnected { inputs, outputs } => write!(f, "FC({inputs}→{outputs})"),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "Conv({in_channels}→{out_channels}, {kernel}x{kernel}, s{stride}, p{padding})"
            ),
            LayerKind::Relu => write!(f, "ReLU"),
            LayerKind::MaxPool2d { kernel, stride } => write!(f, "MaxPool({kernel}, s{stride})"),
            LayerKind::BatchNorm { features } => write!(f, "BN({features})"),
            LayerKind::Flatten => write!(f, "Flatten"),
            LayerKind::InjectionPoint { id } => write!(f, "Noise#{id}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape `[C, H, W]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerKind>,
}

pub const MLP_WIDTH: usize = 64;

impl ModelSpec {
    /// Three hidden fully-connected layers of 64 units with ReLU, optional
    /// batch norm between FC and ReLU, and a linear classifier.
    pub fn mlp(input: [usize; 3], classes: usize, batch_norm: bool) -> Self {
        let mut layers = vec![LayerKind::Flatten];
        let mut width = input.iter().product();
        for _ in 0..3 {
            layers.push(LayerKind::FullyConnected {
                inputs: width,
                outputs: MLP_WIDTH,
            });
            if batch_norm {
                layers.push(LayerKind::BatchNorm { features: MLP_WIDTH });
            }
            layers.push(LayerKind::Relu);
            width = MLP_WIDTH;
        }
        layers.push(LayerKind::FullyConnected {
            inputs: width,
            outputs: classes,
        });
        ModelSpec {
            name: if batch_norm { "mlp-bn" } else { "mlp" }.into(),
            input,
            classes,
            layers,
        }
    }

    /// LeNet-5: two 5x5 convolutions (6 and 16 maps) with 2x2 max pooling,
    /// then FC 120 → 84 → classes. 28x28 inputs get 2 pixels of padding on
    /// the first convolution so both 28x28 and 32x32 inputs reach 16x5x5.
    pub fn lenet5(input: [usize; 3], classes: usize, batch_norm: bool) -> Self {
        let [c, h, _] = input;
        let pad = if h < 32 { (32 - h) / 2 } else { 0 };
        let mut layers = Vec::new();
        let push_bn = |layers: &mut Vec<LayerKind>, f| {
            if batch_norm {
                layers.push(LayerKind::BatchNorm { features: f });
            }
        };
        layers.push(LayerKind::Conv2d {
            in_channels: c,
            out_channels: 6,
            kernel: 5,
            stride: 1,
            padding: pad,
        });
        push_bn(&mut layers, 6);
        layers.push(LayerKind::Relu);
        layers.push(LayerKind::MaxPool2d { kernel: 2, stride: 2 });
        layers.push(LayerKind::Conv2d {
            in_channels: 6,
            out_channels: 16,
            kernel: 5,
            stride: 1,
            padding: 0,
        });
        push_bn(&mut layers, 16);
        layers.push(LayerKind::Relu);
        layers.push(LayerKind::MaxPool2d { kernel: 2, stride: 2 });
        layers.push(LayerKind::Flatten);
        // feature count depends on the input size; fixed up below
        layers.push(LayerKind::FullyConnected {
            inputs: 0,
            outputs: 120,
        });
        push_bn(&mut layers, 120);
        layers.push(LayerKind::Relu);
        layers.push(LayerKind::FullyConnected {
            inputs: 120,
            outputs: 84,
        });
        push_bn(&mut layers, 84);
        layers.push(LayerKind::Relu);
        layers.push(LayerKind::FullyConnected {
            inputs: 84,
            outputs: classes,
        });

        let mut shape = input.to_vec();
        for layer in layers.iter_mut() {
            if let LayerKind::FullyConnected { inputs, .. } = layer {
                if *inputs == 0 {
                    *inputs = shape[0];
                }
            }
            match layer.output_shape(&shape) {
                Ok(s) => shape = s,
                Err(_) => break, // reported by build_model
            }
        }
        ModelSpec {
            name: if batch_norm { "lenet5-bn" } else { "lenet5" }.into(),
            input,
            classes,
            layers,
        }
    }

    /// `mlp`, `mlp-bn`, `lenet5`, `lenet5-bn`.
    pub fn by_name(name: &str, input: [usize; 3], classes: usize) -> Result<Self> {
        match name {
            "mlp" => Ok(Self::mlp(input, classes, false)),
            "mlp-bn" => Ok(Self::mlp(input, classes, true)),
            "lenet5" | "lenet" => Ok(Self::lenet5(input, classes, false)),
            "lenet5-bn" | "lenet-bn" => Ok(Self::lenet5(input, classes, true)),
            other => Err(Error::Spec(format!("unknown model {other:?}"))),
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerKind::BatchNorm { .. }))
    }
}
