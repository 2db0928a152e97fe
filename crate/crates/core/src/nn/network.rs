use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::layer::{validate_layers, LayerSpec, ParamInfo};
use super::ops::{self, BnTrainCache, ConvGeom, PoolGeom, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm; running averages are updated.
    Train,
    /// Running averages in batchnorm.
    Eval,
}

/// Batchnorm running statistics (not trainable).
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        weight: usize,
    },
    Linear {
        in_features: usize,
        weight: usize,
    },
    Relu,
    MaxPool {
        kh: usize,
        kw: usize,
        stride: usize,
    },
    AvgPool {
        kh: usize,
        kw: usize,
        stride: usize,
    },
    BatchNorm {
        channels: usize,
        gamma: usize,
        beta: usize,
        running: usize,
    },
    Softmax,
    Residual(Vec<Node>),
}

#[derive(Debug, Clone)]
struct Node {
    /// Depth-first layer index, used in error messages.
    id: usize,
    kind: &'static str,
    op: Op,
}

#[derive(Debug, Clone)]
enum Saved {
    Conv { input: Tensor, geom: ConvGeom },
    Linear { input: Tensor },
    Relu { input: Tensor },
    MaxPool { in_shape: Vec<usize>, argmax: Vec<usize> },
    AvgPool { geom: PoolGeom },
    BnTrain { cache: BnTrainCache },
    BnEval { input: Tensor },
    Softmax { output: Tensor },
    Residual(Vec<Saved>),
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One tensor per parameter, in [`Network::params`] order.
    pub params: Vec<Tensor>,
    /// Gradient with respect to the network input.
    pub input: Tensor,
}

/// A feed-forward network: layer specs, parameters and the recorded tape of
/// the last training forward pass.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LayerSpec>,
    nodes: Vec<Node>,
    params: Vec<Tensor>,
    infos: Vec<ParamInfo>,
    running: Vec<BnRunning>,
    tape: Option<Vec<Saved>>,
}

type RunningUpdate = (usize, Vec<f64>, Vec<f64>);

impl Network {
    /// Builds a network with zero weights, unit batchnorm scales and zero
    /// batchnorm shifts. Use [`super::he_initialize`] for random weights.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        validate_layers(&layers)?;
        let mut net = Network {
            layers: Vec::new(),
            nodes: Vec::new(),
            params: Vec::new(),
            infos: Vec::new(),
            running: Vec::new(),
            tape: None,
        };
        let mut next_id = 0;
        net.nodes = net.compile(&layers, "", &mut next_id);
        net.layers = layers;
        Ok(net)
    }

    fn compile(&mut self, layers: &[LayerSpec], prefix: &str, next_id: &mut usize) -> Vec<Node> {
        layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let path = format!("{prefix}{i}");
                let id = *next_id;
                *next_id += 1;
                let mut slots = Vec::new();
                for (role, prior, shape, suffix) in spec.param_slots() {
                    slots.push(self.params.len());
                    let init = if role == crate::kl::ParamRole::BnWeight { 1.0 } else { 0.0 };
                    self.params.push(Tensor::filled(&shape, init));
                    self.infos.push(ParamInfo {
                        name: format!("{path}.{suffix}"),
                        role,
                        prior,
                        shape,
                    });
                }
                let op = match *spec {
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel: (w, h),
                        stride,
                        padding,
                    } => Op::Conv {
                        in_channels,
                        out_channels,
                        kh: h,
                        kw: w,
                        stride,
                        padding,
                        weight: slots[0],
                    },
                    LayerSpec::Linear { in_features, .. } => Op::Linear {
                        in_features,
                        weight: slots[0],
                    },
                    LayerSpec::Relu => Op::Relu,
                    LayerSpec::MaxPool2d {
                        kernel: (w, h),
                        stride,
                    } => Op::MaxPool { kh: h, kw: w, stride },
                    LayerSpec::AvgPool2d {
                        kernel: (w, h),
                        stride,
                    } => Op::AvgPool { kh: h, kw: w, stride },
                    LayerSpec::BatchNorm { channels } => {
                        self.running.push(BnRunning {
                            mean: vec![0.0; channels],
                            var: vec![1.0; channels],
                        });
                        Op::BatchNorm {
                            channels,
                            gamma: slots[0],
                            beta: slots[1],
                            running: self.running.len() - 1,
                        }
                    }
                    LayerSpec::Softmax => Op::Softmax,
                    LayerSpec::Residual(ref body) => {
                        Op::Residual(self.compile(body, &format!("{path}."), next_id))
                    }
                };
                Node {
                    id,
                    kind: spec.kind(),
                    op,
                }
            })
            .collect()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    /// Total number of scalar trainable parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn running_stats(&self) -> &[BnRunning] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [BnRunning] {
        &mut self.running
    }

    /// Whether the last layer is a softmax, i.e. outputs are probabilities.
    pub fn outputs_probabilities(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Softmax))
    }

    /// Forward pass that records a tape for [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.tape = None;
        let mut updates = Vec::new();
        let (out, saved) = self.run(&self.nodes, x, mode, true, &mut updates)?;
        for (idx, mean, var) in updates {
            let r = &mut self.running[idx];
            for (rm, m) in r.mean.iter_mut().zip(mean) {
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
            }
            for (rv, v) in r.var.iter_mut().zip(var) {
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v;
            }
        }
        self.tape = Some(saved);
        Ok(out)
    }

    /// Evaluation-mode forward pass; records nothing and mutates nothing.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut updates = Vec::new();
        Ok(self.run(&self.nodes, x, Mode::Eval, false, &mut updates)?.0)
    }

    fn run(
        &self,
        nodes: &[Node],
        x: &Tensor,
        mode: Mode,
        record: bool,
        updates: &mut Vec<RunningUpdate>,
    ) -> Result<(Tensor, Vec<Saved>)> {
        let mut saved = Vec::with_capacity(if record { nodes.len() } else { 0 });
        let mut cur = std::borrow::Cow::Borrowed(x);
        for node in nodes {
            let x = cur.as_ref();
            let shape_err = |msg: String| {
                Error::Shape(format!("layer {} ({}): {msg}", node.id, node.kind))
            };
            let (out, entry) = match &node.op {
                Op::Conv {
                    in_channels,
                    out_channels,
                    kh,
                    kw,
                    stride,
                    padding,
                    weight,
                } => {
                    if x.rank() != 4 || x.dim(1) != *in_channels {
                        return Err(shape_err(format!(
                            "expected (N, {in_channels}, H, W), got {:?}",
                            x.shape()
                        )));
                    }
                    let geom = ConvGeom::new(x.shape(), *out_channels, *kh, *kw, *stride, *padding)
                        .ok_or_else(|| shape_err(format!("input {:?} smaller than kernel", x.shape())))?;
                    let out = ops::conv2d_forward(x, &self.params[*weight], &geom);
                    (out, record.then(|| Saved::Conv { input: x.clone(), geom }))
                }
                Op::Linear {
                    in_features,
                    weight,
                } => {
                    if x.rank() < 2 || x.row_len() != *in_features {
                        return Err(shape_err(format!(
                            "expected {in_features} features per sample, got shape {:?}",
                            x.shape()
                        )));
                    }
                    let out = ops::linear_forward(x, &self.params[*weight]);
                    (out, record.then(|| Saved::Linear { input: x.clone() }))
                }
                Op::Relu => (
                    ops::relu_forward(x),
                    record.then(|| Saved::Relu { input: x.clone() }),
                ),
                Op::MaxPool { kh, kw, stride } => {
                    let geom = pool_geom(x, *kh, *kw, *stride).map_err(shape_err)?;
                    let (out, argmax) = ops::maxpool_forward(x, &geom);
                    (
                        out,
                        record.then(|| Saved::MaxPool {
                            in_shape: x.shape().to_vec(),
                            argmax,
                        }),
                    )
                }
                Op::AvgPool { kh, kw, stride } => {
                    let geom = pool_geom(x, *kh, *kw, *stride).map_err(shape_err)?;
                    (ops::avgpool_forward(x, &geom), record.then_some(Saved::AvgPool { geom }))
                }
                Op::BatchNorm {
                    channels,
                    gamma,
                    beta,
                    running,
                } => {
                    if !(x.rank() == 2 || x.rank() == 4) || x.dim(1) != *channels {
                        return Err(shape_err(format!(
                            "expected (N, {channels}) or (N, {channels}, H, W), got {:?}",
                            x.shape()
                        )));
                    }
                    let (g, b) = (&self.params[*gamma], &self.params[*beta]);
                    match mode {
                        Mode::Train => {
                            let (out, cache, mean, var) = ops::batchnorm_train_forward(x, g, b);
                            updates.push((*running, mean, var));
                            (
                                out,
                                record.then_some(Saved::BnTrain { cache }),
                            )
                        }
                        Mode::Eval => {
                            let r = &self.running[*running];
                            let out = ops::batchnorm_eval_forward(x, g, b, &r.mean, &r.var);
                            (out, record.then(|| Saved::BnEval { input: x.clone() }))
                        }
                    }
                }
                Op::Softmax => {
                    if x.rank() < 2 {
                        return Err(shape_err(format!("softmax needs rank >= 2, got {:?}", x.shape())));
                    }
                    let out = ops::softmax_forward(x);
                    let entry = record.then(|| Saved::Softmax { output: out.clone() });
                    (out, entry)
                }
                Op::Residual(body) => {
                    let (mut out, inner) = self.run(body, x, mode, record, updates)?;
                    if out.shape() != x.shape() {
                        return Err(shape_err(format!(
                            "residual body maps {:?} to {:?}",
                            x.shape(),
                            out.shape()
                        )));
                    }
                    out.axpy(1.0, x)?;
                    (out, record.then_some(Saved::Residual(inner)))
                }
            };
            if !out.is_finite() {
                return Err(Error::NonFinite {
                    layer: node.id,
                    kind: node.kind,
                });
            }
            if let Some(e) = entry {
                saved.push(e);
            }
            cur = std::borrow::Cow::Owned(out);
        }
        Ok((cur.into_owned(), saved))
    }

    /// Backpropagates `grad_out` (gradient of the loss with respect to the
    /// network output) through the tape of the last [`Network::forward`].
    /// The tape is consumed.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Gradients> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::Usage("backward called without a recorded forward pass".into()))?;
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let input = self.back(&self.nodes, &tape, grad_out.clone(), &mut grads)?;
        Ok(Gradients {
            params: grads,
            input,
        })
    }

    fn back(&self, nodes: &[Node], tape: &[Saved], mut g: Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        for (node, saved) in nodes.iter().zip(tape).rev() {
            g = match (&node.op, saved) {
                (Op::Conv { weight, .. }, Saved::Conv { input, geom }) => {
                    check_grad_shape(node, &g, &[geom.n, geom.o, geom.oh, geom.ow])?;
                    let (gx, gw) = ops::conv2d_backward(input, &self.params[*weight], &g, geom);
                    grads[*weight].axpy(1.0, &gw)?;
                    gx
                }
                (Op::Linear { weight, .. }, Saved::Linear { input }) => {
                    check_grad_shape(node, &g, &[input.dim(0), self.params[*weight].dim(0)])?;
                    let (gx, gw) = ops::linear_backward(input, &self.params[*weight], &g);
                    grads[*weight].axpy(1.0, &gw)?;
                    gx
                }
                (Op::Relu, Saved::Relu { input }) => {
                    check_grad_shape(node, &g, input.shape())?;
                    ops::relu_backward(input, &g)
                }
                (Op::MaxPool { .. }, Saved::MaxPool { in_shape, argmax }) => {
                    if g.len() != argmax.len() {
                        return Err(grad_shape_error(node, &g));
                    }
                    ops::maxpool_backward(in_shape, argmax, &g)
                }
                (Op::AvgPool { .. }, Saved::AvgPool { geom }) => {
                    check_grad_shape(node, &g, &[geom.n, geom.c, geom.oh, geom.ow])?;
                    ops::avgpool_backward(geom, &g)
                }
                (Op::BatchNorm { gamma, beta, .. }, Saved::BnTrain { cache }) => {
                    check_grad_shape(node, &g, cache.xhat.shape())?;
                    let (gx, gg, gb) = ops::batchnorm_train_backward(cache, &self.params[*gamma], &g);
                    grads[*gamma].axpy(1.0, &gg)?;
                    grads[*beta].axpy(1.0, &gb)?;
                    gx
                }
                (
                    Op::BatchNorm {
                        gamma,
                        beta,
                        running,
                        ..
                    },
                    Saved::BnEval { input },
                ) => {
                    check_grad_shape(node, &g, input.shape())?;
                    let r = &self.running[*running];
                    let (gx, gg, gb) =
                        ops::batchnorm_eval_backward(input, &self.params[*gamma], &r.mean, &r.var, &g);
                    grads[*gamma].axpy(1.0, &gg)?;
                    grads[*beta].axpy(1.0, &gb)?;
                    gx
                }
                (Op::Softmax, Saved::Softmax { output }) => {
                    check_grad_shape(node, &g, output.shape())?;
                    ops::softmax_backward(output, &g)
                }
                (Op::Residual(body), Saved::Residual(inner)) => {
                    let mut gx = self.back(body, inner, g.clone(), grads)?;
                    gx.axpy(1.0, &g)?;
                    gx
                }
                _ => unreachable!("tape entry does not match layer {}", node.id),
            };
        }
        Ok(g)
    }

    /// Fingerprint of the piecewise-linear regions visited by the last
    /// recorded forward pass: ReLU sign patterns and max-pool winners.
    /// Two passes with equal fingerprints lie in the same smooth region.
    pub fn activation_fingerprint(&self) -> Option<u64> {
        fn feed(h: &mut u64, v: u64) {
            *h = (*h ^ v).wrapping_mul(0x0100_0000_01B3);
        }
        fn walk(saved: &[Saved], h: &mut u64) {
            for s in saved {
                match s {
                    Saved::Relu { input } => input.data().iter().for_each(|&x| feed(h, (x > 0.0) as u64)),
                    Saved::MaxPool { argmax, .. } => argmax.iter().for_each(|&a| feed(h, a as u64)),
                    Saved::Residual(inner) => walk(inner, h),
                    _ => {}
                }
            }
        }
        self.tape.as_ref().map(|t| {
            let mut h = 0xCBF2_9CE4_8422_2325;
            walk(t, &mut h);
            h
        })
    }
}

fn pool_geom(x: &Tensor, kh: usize, kw: usize, stride: usize) -> Result<PoolGeom, String> {
    if x.rank() != 4 {
        return Err(format!("expected (N, C, H, W), got {:?}", x.shape()));
    }
    PoolGeom::new(x.shape(), kh, kw, stride)
        .ok_or_else(|| format!("input {:?} smaller than {kh}x{kw} window", x.shape()))
}

fn grad_shape_error(node: &Node, g: &Tensor) -> Error {
    Error::Shape(format!(
        "layer {} ({}): unexpected gradient shape {:?}",
        node.id,
        node.kind,
        g.shape()
    ))
}

fn check_grad_shape(node: &Node, g: &Tensor, expected: &[usize]) -> Result<()> {
    if g.shape() != expected {
        return Err(grad_shape_error(node, g));
    }
    Ok(())
}
