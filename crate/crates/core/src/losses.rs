//! Training losses. Every loss returns its value together with the gradient
//! with respect to its (first) tensor argument, so it can be recorded on a
//! [`Tape`](crate::diffcore::Tape) as a scalar node.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.3;

/// A scalar loss and its gradient with respect to the primary input.
#[derive(Debug, Clone)]
pub struct Loss {
    pub value: f64,
    pub grad: Tensor,
}

/// Features or codes with their identity and domain labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Tensor,
    pub identities: Vec<usize>,
    pub domains: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(features: Tensor, identities: Vec<usize>, domains: Vec<usize>) -> Result<Self> {
        let n = features.rows();
        if identities.len() != n || domains.len() != n {
            return Err(Error::Shape(format!(
                "{n} rows but {} identity and {} domain labels",
                identities.len(),
                domains.len()
            )));
        }
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        for (&id, &dom) in identities.iter().zip(&domains) {
            if let Some(&d) = seen.get(&id) {
                if d != dom {
                    return Err(Error::Invalid(format!(
                        "identity {id} appears in domains {d} and {dom}"
                    )));
                }
            }
            seen.insert(id, dom);
        }
        Ok(Self {
            features,
            identities,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    /// Distinct domain labels present, ascending.
    pub fn domain_set(&self) -> Vec<usize> {
        let mut d = self.domains.clone();
        d.sort_unstable();
        d.dedup();
        d
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
fn softmax_nll(logits: &Tensor, labels: &[usize]) -> Result<Loss> {
    let (n, c) = logits.ensure_matrix("logits")?;
    if c < 2 {
        return Err(Error::Invalid(format!("need at least 2 classes, got {c}")));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    logits.ensure_finite("logits")?;
    let mut grad = vec![0.0; n * c];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: c,
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (k, e) in exps.iter().enumerate() {
            grad[i * c + k] = e / z / n as f64;
        }
        grad[i * c + y] -= 1.0 / n as f64;
        total -= (exps[y] / z).max(PROB_FLOOR).ln();
    }
    Ok(Loss {
        value: total / n as f64,
        grad: Tensor::from_parts(vec![n, c], grad),
    })
}

/// Cross-entropy identity loss on identity logits.
pub fn identity_loss(logits: &Tensor, labels: &[usize]) -> Result<Loss> {
    softmax_nll(logits, labels)
}

/// Cross-entropy of the true domain under the discriminator's logits.
pub fn domain_discrimination_loss(logits: &Tensor, domains: &[usize]) -> Result<Loss> {
    if logits.shape().get(1).is_some_and(|&k| k < 2) {
        return Err(Error::Invalid(
            "domain discrimination needs at least 2 domains".into(),
        ));
    }
    softmax_nll(logits, domains)
}

/// The negated domain classification loss; minimizing it pushes codes
/// toward being indistinguishable across domains.
pub fn adversarial_loss(logits: &Tensor, domains: &[usize]) -> Result<Loss> {
    let l = domain_discrimination_loss(logits, domains)?;
    Ok(Loss {
        value: -l.value,
        grad: l.grad.scale(-1.0),
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Batch-hard triplet loss: for every anchor with at least one positive,
/// hinge on (farthest positive − nearest negative + margin), averaged over
/// those anchors. Ties resolve to the lowest index.
pub fn triplet_loss_batch_hard(codes: &Tensor, labels: &[usize], margin: f64) -> Result<Loss> {
    let (n, d) = codes.ensure_matrix("triplet codes")?;
    if d < 1 {
        return Err(Error::Invalid("codes need at least one dimension".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} codes but {} labels",
            labels.len()
        )));
    }
    if !(margin >= 0.0) {
        return Err(Error::Invalid(format!(
            "margin must be non-negative, got {margin}"
        )));
    }
    codes.ensure_finite("triplet codes")?;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = euclidean(codes.row(i), codes.row(j));
        }
    }
    let mut grad = vec![0.0; n * d];
    // Running mean, so a batch of equal hinges averages to exactly that value.
    let mut mean = 0.0;
    let mut anchors = 0usize;
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let dj = dist[a * n + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| dj > dist[a * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| dj < dist[a * n + q]) {
                neg = Some(j);
            }
        }
        let (Some(p), Some(q)) = (pos, neg) else {
            continue;
        };
        anchors += 1;
        let (dap, dan) = (dist[a * n + p], dist[a * n + q]);
        let hinge = (dap - dan + margin).max(0.0);
        mean += (hinge - mean) / anchors as f64;
        if hinge == 0.0 {
            continue;
        }
        // d/dx_a ||x_a − x_j|| = (x_a − x_j)/||x_a − x_j||, zero at coincidence.
        for (other, sign, dd) in [(p, 1.0, dap), (q, -1.0, dan)] {
            if dd == 0.0 {
                continue;
            }
            let (ra, ro) = (codes.row(a), codes.row(other));
            for k in 0..d {
                let u = sign * (ra[k] - ro[k]) / dd;
                grad[a * d + k] += u;
                grad[other * d + k] -= u;
            }
        }
    }
    if anchors == 0 {
        return Err(Error::Invalid(
            "no valid triplet anchors: need an identity with two samples and a second identity"
                .into(),
        ));
    }
    let scale = 1.0 / anchors as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(Loss {
        value: mean,
        grad: Tensor::from_parts(vec![n, d], grad),
    })
}

/// Mean over the batch of `||x − x_rec||²`. The gradient is with respect to
/// `x_rec`; the gradient with respect to `x` is its negation.
pub fn reconstruction_loss(x: &Tensor, x_rec: &Tensor) -> Result<Loss> {
    if x.shape() != x_rec.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs input {:?}",
            x_rec.shape(),
            x.shape()
        )));
    }
    let n = x.rows() as f64;
    let mut value = 0.0;
    let grad = x
        .data()
        .iter()
        .zip(x_rec.data())
        .map(|(a, r)| {
            value += (r - a) * (r - a);
            2.0 * (r - a) / n
        })
        .collect();
    Ok(Loss {
        value: value / n,
        grad: Tensor::from_parts(x.shape().to_vec(), grad),
    })
}

/// Weights of the combined feature loss
/// `id + λ1·tri + λ2·rec + λ3·mmd + λ4·adv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub triplet: f64,
    pub reconstruction: f64,
    pub mmd: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            triplet: 1.0,
            reconstruction: 10.0,
            mmd: 0.2,
            adversarial: 0.5,
        }
    }
}

impl LossWeights {
    /// Identity + triplet only.
    pub fn baseline() -> Self {
        Self {
            triplet: 1.0,
            reconstruction: 0.0,
            mmd: 0.0,
            adversarial: 0.0,
        }
    }
}

/// Per-component values of one feature update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub identity: f64,
    pub triplet: f64,
    pub reconstruction: f64,
    pub mmd: f64,
    pub adversarial: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("identity", self.identity),
            ("triplet", self.triplet),
            ("reconstruction", self.reconstruction),
            ("mmd", self.mmd),
            ("adversarial", self.adversarial),
        ]
    }
}

pub fn combined_feature_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in c.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss component")));
        }
    }
    Ok(c.identity
        + w.triplet * c.triplet
        + w.reconstruction * c.reconstruction
        + w.mmd * c.mmd
        + w.adversarial * c.adversarial)
}
