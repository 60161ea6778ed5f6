//! Layer descriptions, parameter storage and sequential forward passes.

use std::collections::BTreeMap;

use rand::Rng;

use super::ops::{BatchStats, ConvGeometry};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Fraction of the old running statistic kept on each update. Zero means the
/// running statistics become the latest batch statistics.
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

const MAX_CONV_KERNEL: usize = 5;
/// Convolutions are meant for small images only.
pub const MAX_CONV_CHANNELS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Relu,
    /// `features` is the affine length: channels for `[n, c, ..]` inputs,
    /// the feature width for `[n, d]` inputs.
    InstanceNorm {
        features: usize,
        eps: f64,
        affine: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Invalid(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                positive("dense inputs", inputs)?;
                positive("dense outputs", outputs)
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                positive("conv in_channels", in_channels)?;
                positive("conv out_channels", out_channels)?;
                positive("conv kernel", kernel)?;
                positive("conv stride", stride)?;
                if kernel > MAX_CONV_KERNEL || in_channels.max(out_channels) > MAX_CONV_CHANNELS {
                    return Err(Error::Invalid(format!(
                        "convolution limited to kernels <= {MAX_CONV_KERNEL} and <= {MAX_CONV_CHANNELS} channels"
                    )));
                }
                Ok(())
            }
            LayerSpec::InstanceNorm { features, eps, .. } => {
                positive("instance norm features", features)?;
                check_eps(eps)
            }
            LayerSpec::BatchNorm {
                channels,
                eps,
                momentum,
            } => {
                positive("batch norm channels", channels)?;
                check_eps(eps)?;
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Invalid(format!(
                        "batch norm momentum {momentum} outside [0, 1)"
                    )));
                }
                Ok(())
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool => Ok(()),
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "normalization epsilon must be positive, got {eps}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn fresh(channels: usize, momentum: f64) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    pub fn as_batch_stats(&self) -> BatchStats {
        BatchStats {
            mean: self.mean.clone(),
            var: self.var.clone(),
        }
    }
}

/// Named parameters plus batch-norm running statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
    running: BTreeMap<String, RunningStats>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn set_running(&mut self, name: impl Into<String>, stats: RunningStats) {
        self.running.insert(name.into(), stats);
    }

    pub fn running(&self, name: &str) -> Result<&RunningStats> {
        self.running
            .get(name)
            .ok_or_else(|| Error::UninitializedStats(name.to_string()))
    }

    pub fn running_iter(&self) -> impl Iterator<Item = (&String, &RunningStats)> {
        self.running.iter()
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) -> Result<()> {
        for u in updates {
            let stats = self
                .running
                .get_mut(&u.name)
                .ok_or_else(|| Error::UninitializedStats(u.name.clone()))?;
            stats.update(&u.stats);
        }
        Ok(())
    }

    /// Merge another set in, prefixing nothing; names must not collide.
    pub fn extend(&mut self, other: ParameterSet) {
        self.tensors.extend(other.tensors);
        self.running.extend(other.running);
    }

    /// Sub-set of parameters whose names start with `prefix`.
    pub fn filtered(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            running: self
                .running
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Batch statistics observed by a train-mode batch norm, to be folded into
/// the layer's running statistics by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub name: String,
    pub stats: BatchStats,
}

/// An ordered stack of layers whose parameters live under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    prefix: String,
    layers: Vec<LayerSpec>,
}

impl Sequential {
    pub fn new(prefix: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            l.validate().map_err(|e| Error::LayerShape {
                layer: i,
                detail: e.to_string(),
            })?;
        }
        Ok(Self {
            prefix: prefix.into(),
            layers,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, layer: usize, what: &str) -> String {
        if self.prefix.is_empty() {
            format!("{layer}.{what}")
        } else {
            format!("{}.{layer}.{what}", self.prefix)
        }
    }

    fn stats_name(&self, layer: usize) -> String {
        self.name(layer, "running")
    }

    /// Fan-in scaled uniform weights, zero biases, unit/zero norm affine.
    pub fn init(&self, rng: &mut impl Rng) -> ParameterSet {
        let mut ps = ParameterSet::new();
        let uniform = |shape: Vec<usize>, fan_in: usize, rng: &mut dyn rand::RngCore| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_parts(shape, data)
        };
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    bias,
                } => {
                    ps.insert(
                        self.name(i, "weight"),
                        uniform(vec![outputs, inputs], inputs, rng),
                    );
                    if bias {
                        ps.insert(self.name(i, "bias"), Tensor::zeros(&[outputs]));
                    }
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    ps.insert(
                        self.name(i, "weight"),
                        uniform(
                            vec![out_channels, in_channels, kernel, kernel],
                            in_channels * kernel * kernel,
                            rng,
                        ),
                    );
                    if bias {
                        ps.insert(self.name(i, "bias"), Tensor::zeros(&[out_channels]));
                    }
                }
                LayerSpec::InstanceNorm {
                    features,
                    affine: true,
                    ..
                } => {
                    ps.insert(self.name(i, "gamma"), Tensor::full(&[features], 1.0));
                    ps.insert(self.name(i, "beta"), Tensor::zeros(&[features]));
                }
                LayerSpec::BatchNorm {
                    channels, momentum, ..
                } => {
                    ps.insert(self.name(i, "gamma"), Tensor::full(&[channels], 1.0));
                    ps.insert(self.name(i, "beta"), Tensor::zeros(&[channels]));
                    ps.set_running(self.stats_name(i), RunningStats::fresh(channels, momentum));
                }
                LayerSpec::Relu | LayerSpec::GlobalAvgPool | LayerSpec::InstanceNorm { .. } => {}
            }
        }
        ps
    }

    /// Record the stack on `tape`. With `trainable` false, parameters enter
    /// the tape as constants: gradients still flow through them to the input
    /// but none are reported for them.
    pub fn record(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        x: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<(Var, Vec<StatUpdate>)> {
        let mut updates = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |e: Error| match e {
                Error::Shape(detail) | Error::Invalid(detail) => {
                    Error::LayerShape { layer: i, detail }
                }
                other => other,
            };
            let p = |tape: &mut Tape, what: &str| -> Result<Var> {
                let name = self.name(i, what);
                let t = params.get(&name)?.clone();
                Ok(if trainable {
                    tape.param(name, t)
                } else {
                    tape.constant(t)
                })
            };
            h = match *layer {
                LayerSpec::Dense { bias, .. } => {
                    let w = p(tape, "weight")?;
                    let b = if bias { Some(p(tape, "bias")?) } else { None };
                    tape.dense(h, w, b).map_err(at)?
                }
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    bias,
                    ..
                } => {
                    let w = p(tape, "weight")?;
                    let b = if bias { Some(p(tape, "bias")?) } else { None };
                    tape.conv2d(
                        h,
                        w,
                        b,
                        ConvGeometry {
                            kernel,
                            stride,
                            padding,
                        },
                    )
                    .map_err(at)?
                }
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::InstanceNorm { eps, affine, .. } => {
                    let aff = if affine {
                        Some((p(tape, "gamma")?, p(tape, "beta")?))
                    } else {
                        None
                    };
                    tape.instance_norm(h, aff, eps).map_err(at)?
                }
                LayerSpec::BatchNorm { eps, .. } => {
                    let gamma = p(tape, "gamma")?;
                    let beta = p(tape, "beta")?;
                    match mode {
                        Mode::Train => {
                            let (y, stats) = tape.batch_norm(h, gamma, beta, eps).map_err(at)?;
                            updates.push(StatUpdate {
                                name: self.stats_name(i),
                                stats,
                            });
                            y
                        }
                        Mode::Eval => {
                            let stats = params.running(&self.stats_name(i))?.as_batch_stats();
                            tape.batch_norm_eval(h, gamma, beta, &stats, eps)
                                .map_err(at)?
                        }
                    }
                }
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(h).map_err(at)?,
            };
        }
        Ok((h, updates))
    }

    /// Forward pass without recording gradients for later use.
    pub fn apply(
        &self,
        params: &ParameterSet,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Vec<StatUpdate>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (y, updates) = self.record(&mut tape, params, xv, mode, false)?;
        Ok((tape.value(y).clone(), updates))
    }
}

/// Output of [`forward`]: the value, the tape that produced it, and handles
/// to the input and output on that tape.
pub struct Forward {
    pub output: Tensor,
    pub tape: Tape,
    pub input: Var,
    pub out: Var,
    pub stat_updates: Vec<StatUpdate>,
}

/// Run `spec` on `x`, recording a tape from which gradients of any
/// downstream scalar can be taken with respect to all parameters and `x`.
pub fn forward(
    spec: &[LayerSpec],
    params: &ParameterSet,
    x: &Tensor,
    mode: Mode,
) -> Result<Forward> {
    let net = Sequential::new("", spec.to_vec())?;
    let mut tape = Tape::new();
    let input = tape.constant(x.clone());
    let (out, stat_updates) = net.record(&mut tape, params, input, mode, true)?;
    Ok(Forward {
        output: tape.value(out).clone(),
        tape,
        input,
        out,
        stat_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn empty_stack_is_identity() {
        let x = matrix(&[&[1.0, -2.0], &[3.0, 4.0]]);
        let f = forward(&[], &ParameterSet::new(), &x, Mode::Train).unwrap();
        assert_eq!(f.output, x);
    }

    #[test]
    fn identity_dense_is_passthrough() {
        let spec = [LayerSpec::Dense {
            inputs: 2,
            outputs: 2,
            bias: true,
        }];
        let mut ps = ParameterSet::new();
        ps.insert("0.weight", matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
        ps.insert("0.bias", Tensor::zeros(&[2]));
        let x = matrix(&[&[0.5, -1.5]]);
        assert_eq!(forward(&spec, &ps, &x, Mode::Train).unwrap().output, x);
    }

    #[test]
    fn two_dense_layers_match_matrix_product() {
        // Oracle: y = x (W2 W1)ᵀ, computed by hand.
        let spec = [
            LayerSpec::Dense {
                inputs: 2,
                outputs: 2,
                bias: false,
            },
            LayerSpec::Dense {
                inputs: 2,
                outputs: 1,
                bias: false,
            },
        ];
        let mut ps = ParameterSet::new();
        ps.insert("0.weight", matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        ps.insert("1.weight", matrix(&[&[0.5, -1.0]]));
        // W2 W1 = [0.5 - 3, 1 - 4] = [-2.5, -3]
        let x = matrix(&[&[1.0, 1.0], &[2.0, -1.0]]);
        let y = forward(&spec, &ps, &x, Mode::Train).unwrap().output;
        assert_eq!(y.data(), &[-5.5, -2.0]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let spec = [
            LayerSpec::Dense {
                inputs: 2,
                outputs: 3,
                bias: false,
            },
            LayerSpec::Dense {
                inputs: 4,
                outputs: 1,
                bias: false,
            },
        ];
        let net = Sequential::new("", spec.to_vec()).unwrap();
        let ps = net.init(&mut ChaCha8Rng::seed_from_u64(0));
        let x = matrix(&[&[1.0, 2.0]]);
        match forward(&spec, &ps, &x, Mode::Train) {
            Err(Error::LayerShape { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {:?}", other.map(|f| f.output)),
        }
    }

    #[test]
    fn eval_matches_train_when_stats_come_from_same_batch() {
        let spec = [LayerSpec::BatchNorm {
            channels: 3,
            eps: 1e-5,
            momentum: 0.0,
        }];
        let net = Sequential::new("bn", spec.to_vec()).unwrap();
        let mut ps = net.init(&mut ChaCha8Rng::seed_from_u64(1));
        ps.get_mut("bn.0.gamma")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.5, 2.0, -1.0]);
        ps.get_mut("bn.0.beta")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.1, 0.0, 3.0]);
        let x = matrix(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 7.0], &[4.0, 4.0, 4.0]]);
        let (train, updates) = net.apply(&ps, &x, Mode::Train).unwrap();
        ps.apply_stat_updates(&updates).unwrap();
        let (eval, _) = net.apply(&ps, &x, Mode::Eval).unwrap();
        assert!(train.max_abs_diff(&eval) < 1e-10);
    }

    #[test]
    fn eval_without_running_stats_fails() {
        let spec = [LayerSpec::BatchNorm {
            channels: 1,
            eps: 1e-5,
            momentum: 0.5,
        }];
        let mut ps = ParameterSet::new();
        ps.insert("0.gamma", Tensor::full(&[1], 1.0));
        ps.insert("0.beta", Tensor::zeros(&[1]));
        let x = matrix(&[&[1.0]]);
        assert!(matches!(
            forward(&spec, &ps, &x, Mode::Eval),
            Err(Error::UninitializedStats(_))
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(LayerSpec::Dense {
            inputs: 0,
            outputs: 1,
            bias: true
        }
        .validate()
        .is_err());
        assert!(LayerSpec::InstanceNorm {
            features: 2,
            eps: 0.0,
            affine: false
        }
        .validate()
        .is_err());
        assert!(LayerSpec::BatchNorm {
            channels: 2,
            eps: 1e-5,
            momentum: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let spec = vec![
            LayerSpec::Dense {
                inputs: 3,
                outputs: 4,
                bias: true,
            },
            LayerSpec::InstanceNorm {
                features: 4,
                eps: 1e-5,
                affine: true,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 4,
                outputs: 2,
                bias: true,
            },
        ];
        let ps = Sequential::new("", spec.clone())
            .unwrap()
            .init(&mut ChaCha8Rng::seed_from_u64(3));
        let x = matrix(&[&[0.3, -0.2, 1.0], &[2.0, 1.0, -1.0]]);
        let a = forward(&spec, &ps, &x, Mode::Train).unwrap().output;
        let b = forward(&spec, &ps, &x, Mode::Train).unwrap().output;
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
