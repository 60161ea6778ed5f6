//! Reverse-mode gradient tape.
//!
//! Operations append nodes holding their value and whatever the backward
//! pass needs. [`Tape::gradient`] walks the nodes in reverse order and
//! accumulates vector-Jacobian products. Scalar losses record their local
//! gradients at forward time, so the tape never re-evaluates a loss.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, BatchStats, ConvGeometry, NormCache};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geometry: ConvGeometry,
    },
    Relu {
        x: Var,
    },
    InstanceNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        cache: NormCache,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    GlobalAvgPool {
        x: Var,
    },
    /// A scalar whose partial derivatives with respect to each input were
    /// computed alongside its value.
    Scalar {
        inputs: Vec<(Var, Tensor)>,
    },
    /// `Σ wᵢ·termᵢ` over scalar terms.
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives a gradient but is not a named parameter
    /// (network inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable parameter; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((name.into(), v));
        v
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        for v in [Some(x), Some(w), b].into_iter().flatten() {
            self.check(v)?;
        }
        let y = ops::dense(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geometry: ConvGeometry,
    ) -> Result<Var> {
        for v in [Some(x), Some(w), b].into_iter().flatten() {
            self.check(v)?;
        }
        let y = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geometry,
        )?;
        Ok(self.push(y, Op::Conv2d { x, w, b, geometry }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = ops::relu(self.value(x));
        Ok(self.push(y, Op::Relu { x }))
    }

    pub fn instance_norm(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
        self.check(x)?;
        if let Some((g, b)) = affine {
            self.check(g)?;
            self.check(b)?;
        }
        let (y, cache) = ops::instance_norm(
            self.value(x),
            affine.map(|(g, b)| (self.value(g), self.value(b))),
            eps,
        )?;
        Ok(self.push(y, Op::InstanceNorm { x, affine, cache }))
    }

    /// Train-mode batch norm; returns the batch statistics for the caller
    /// to fold into running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let (y, cache, stats) =
            ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok((
            self.push(
                y,
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                },
            ),
            stats,
        ))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchStats,
        eps: f64,
    ) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let (y, cache) = ops::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            stats,
            eps,
        )?;
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    /// Record a scalar computed outside the tape together with its partial
    /// derivatives with respect to `inputs`.
    pub fn scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("scalar loss".into()));
        }
        for (v, g) in &inputs {
            self.check(*v)?;
            if g.shape() != self.value(*v).shape() {
                return Err(Error::Shape(format!(
                    "local gradient {:?} for value {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Scalar { inputs }))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in &terms {
            self.check(v)?;
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Shape(format!(
                    "weighted sum term {:?} is not a scalar",
                    t.shape()
                )));
            }
            total += w * t.item();
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms }))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn gradient(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = &self.nodes[loss.index].value;
        if lv.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.index).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut contributions: Vec<(usize, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), &dy);
                    contributions.push((x.index, dx));
                    contributions.push((w.index, dw));
                    if let Some(b) = b {
                        contributions.push((b.index, db));
                    }
                }
                Op::Conv2d { x, w, b, geometry } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), &dy, *geometry)?;
                    contributions.push((x.index, dx));
                    contributions.push((w.index, dw));
                    if let Some(b) = b {
                        contributions.push((b.index, db));
                    }
                }
                Op::Relu { x } => {
                    contributions.push((x.index, ops::relu_backward(self.value(*x), &dy)))
                }
                Op::InstanceNorm { x, affine, cache } => {
                    let gamma = affine.map(|(g, _)| self.value(g));
                    let (dx, dg, db) =
                        ops::instance_norm_backward(self.value(*x), cache, gamma, &dy)?;
                    contributions.push((x.index, dx));
                    if let Some((g, b)) = affine {
                        contributions.push((g.index, dg));
                        contributions.push((b.index, db));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::batch_norm_train_backward(
                        self.value(*x),
                        cache,
                        self.value(*gamma),
                        &dy,
                    )?;
                    contributions.push((x.index, dx));
                    contributions.push((gamma.index, dg));
                    contributions.push((beta.index, db));
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::batch_norm_eval_backward(
                        self.value(*x),
                        cache,
                        self.value(*gamma),
                        &dy,
                    )?;
                    contributions.push((x.index, dx));
                    contributions.push((gamma.index, dg));
                    contributions.push((beta.index, db));
                }
                Op::GlobalAvgPool { x } => contributions
                    .push((x.index, ops::global_avg_pool_backward(self.value(*x), &dy))),
                Op::Scalar { inputs } => {
                    let s = dy.item();
                    for (v, g) in inputs {
                        contributions.push((v.index, g.scale(s)));
                    }
                }
                Op::WeightedSum { terms } => {
                    let s = dy.item();
                    for (v, w) in terms {
                        contributions.push((v.index, Tensor::scalar(s * w)));
                    }
                }
            }
            grads[idx] = Some(dy);
            for (target, g) in contributions {
                match &mut grads[target] {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| v.index <= loss.index)
            .map(|(name, v)| {
                let g = grads[v.index]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.index].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }
}

/// Result of a backward pass.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any recorded value; `None` when the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradients for every named parameter, zero-filled where unreached.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
