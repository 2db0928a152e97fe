use serde::{Deserialize, Serialize};

use super::LayerSpec;

/// Named architectures used by the experiment runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Linear-batchnorm-relu stack for vector inputs.
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// Small residual CNN for image inputs.
    ResidualCnn {
        in_channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        #[serde(default = "default_widths")]
        widths: [usize; 3],
    },
}

fn default_widths() -> [usize; 3] {
    [16, 32, 64]
}

impl Architecture {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            Architecture::Mlp {
                input_dim,
                hidden,
                classes,
            } => mlp(*input_dim, hidden, *classes),
            Architecture::ResidualCnn {
                in_channels,
                height,
                width,
                classes,
                widths,
            } => residual_cnn(*in_channels, (*height, *width), *classes, *widths),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Architecture::Mlp { classes, .. } | Architecture::ResidualCnn { classes, .. } => *classes,
        }
    }
}

pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut width = input_dim;
    for &h in hidden {
        layers.push(LayerSpec::linear(width, h));
        layers.push(LayerSpec::BatchNorm { channels: h });
        layers.push(LayerSpec::Relu);
        width = h;
    }
    layers.push(LayerSpec::linear(width, classes));
    layers.push(LayerSpec::Softmax);
    layers
}

fn conv_bn_relu(inp: usize, out: usize, stride: usize) -> [LayerSpec; 3] {
    [
        LayerSpec::conv(inp, out, 3, stride, 1),
        LayerSpec::BatchNorm { channels: out },
        LayerSpec::Relu,
    ]
}

fn residual_block(channels: usize) -> [LayerSpec; 2] {
    let mut body = conv_bn_relu(channels, channels, 1).to_vec();
    body.push(LayerSpec::conv(channels, channels, 3, 1, 1));
    body.push(LayerSpec::BatchNorm { channels });
    [LayerSpec::Residual(body), LayerSpec::Relu]
}

fn downsampled(size: usize) -> usize {
    (size + 2 - 3) / 2 + 1
}

/// Stem, then four residual blocks at widths `w0, w1, w2, w2` with stride-2
/// transitions between widths, global average pooling and a linear head.
pub fn residual_cnn(in_channels: usize, (height, width): (usize, usize), classes: usize, widths: [usize; 3]) -> Vec<LayerSpec> {
    let [w0, w1, w2] = widths;
    let mut layers = Vec::new();
    layers.extend(conv_bn_relu(in_channels, w0, 1));
    layers.extend(residual_block(w0));
    layers.extend(conv_bn_relu(w0, w1, 2));
    layers.extend(residual_block(w1));
    layers.extend(conv_bn_relu(w1, w2, 2));
    layers.extend(residual_block(w2));
    layers.extend(residual_block(w2));
    let (h, w) = (downsampled(downsampled(height)), downsampled(downsampled(width)));
    layers.push(LayerSpec::AvgPool2d {
        kernel: (w, h),
        stride: 1,
    });
    layers.push(LayerSpec::linear(w2, classes));
    layers.push(LayerSpec::Softmax);
    layers
}

/// Three stride-2 conv-bn-relu stages: features at 1/8 input resolution.
pub fn seg_encoder(in_channels: usize, widths: [usize; 3]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut c = in_channels;
    for w in widths {
        layers.extend(conv_bn_relu(c, w, 2));
        c = w;
    }
    layers
}

/// 1x1 conv to `hidden`, relu, 1x1 conv to `classes`, softmax.
pub fn seg_head(features: usize, hidden: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(features, hidden, 1, 1, 0),
        LayerSpec::Relu,
        LayerSpec::conv(hidden, classes, 1, 1, 0),
        LayerSpec::Softmax,
    ]
}
