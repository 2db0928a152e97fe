use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kl::{ParamRole, Prior};

/// One layer of a network. Convolution and linear layers carry no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        /// `(w, h)`
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    /// Flattens all trailing axes of its input.
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool2d {
        kernel: (usize, usize),
        stride: usize,
    },
    AvgPool2d {
        kernel: (usize, usize),
        stride: usize,
    },
    /// Normalizes axis 1 of a rank-2 or rank-4 input.
    BatchNorm {
        channels: usize,
    },
    /// Softmax over axis 1. Only valid as the last layer.
    Softmax,
    /// `body(x) + x`; the body must preserve shape.
    Residual(Vec<LayerSpec>),
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, k: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride,
            padding,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Residual(_) => "residual",
        }
    }

    /// Trainable parameters this layer owns directly.
    pub(crate) fn param_slots(&self) -> Vec<(ParamRole, Prior, Vec<usize>, &'static str)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: (w, h),
                ..
            } => vec![(
                ParamRole::ConvWeight,
                Prior::conv(out_channels, w, h),
                vec![out_channels, in_channels, h, w],
                "weight",
            )],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![(
                ParamRole::LinearWeight,
                Prior::linear(out_features),
                vec![out_features, in_features],
                "weight",
            )],
            LayerSpec::BatchNorm { channels } => vec![
                (ParamRole::BnWeight, Prior::bn_weight(), vec![channels], "weight"),
                (ParamRole::BnBias, Prior::bn_bias(), vec![channels], "bias"),
            ],
            _ => Vec::new(),
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("layer {path} ({}): {msg}", self.kind())));
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel: (w, h),
                stride,
                ..
            } => {
                if *in_channels == 0 || *out_channels == 0 {
                    return bad("channel counts must be at least 1".into());
                }
                if *w == 0 || *h == 0 || *stride == 0 {
                    return bad("kernel dims and stride must be at least 1".into());
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if *in_features == 0 || *out_features == 0 {
                    return bad("feature counts must be at least 1".into());
                }
            }
            LayerSpec::MaxPool2d {
                kernel: (w, h),
                stride,
            }
            | LayerSpec::AvgPool2d {
                kernel: (w, h),
                stride,
            } => {
                if *w == 0 || *h == 0 || *stride == 0 {
                    return bad("kernel dims and stride must be at least 1".into());
                }
            }
            LayerSpec::BatchNorm { channels } => {
                if *channels == 0 {
                    return bad("channels must be at least 1".into());
                }
            }
            LayerSpec::Residual(body) => {
                if body.is_empty() {
                    return bad("empty residual body".into());
                }
                for (i, l) in body.iter().enumerate() {
                    if matches!(l, LayerSpec::Softmax) {
                        return bad("softmax inside a residual body".into());
                    }
                    l.validate(&format!("{path}.{i}"))?;
                }
            }
            LayerSpec::Relu | LayerSpec::Softmax => {}
        }
        Ok(())
    }
}

/// Validate a whole layer list: every layer well-formed, softmax terminal.
pub fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("network has no layers".into()));
    }
    for (i, l) in layers.iter().enumerate() {
        if matches!(l, LayerSpec::Softmax) && i + 1 != layers.len() {
            return Err(Error::Config(format!(
                "layer {i}: softmax must be the last layer"
            )));
        }
        l.validate(&i.to_string())?;
    }
    Ok(())
}

/// Metadata for one trainable parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub role: ParamRole,
    pub prior: Prior,
    pub shape: Vec<usize>,
}
