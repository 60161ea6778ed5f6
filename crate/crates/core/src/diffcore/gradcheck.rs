//! Central finite-difference validation of analytic gradients.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coordinates are perturbed exhaustively up to this many scalars.
pub const EXHAUSTIVE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Per-block coordinate budget once the parameter count exceeds
    /// [`EXHAUSTIVE_LIMIT`].
    pub sampled_per_block: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            sampled_per_block: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    pub mismatches: Vec<Mismatch>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn max_rel(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel).fold(0.0, f64::max)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<32} n={:<6} max={:.3e} mean={:.3e}",
                b.name, b.checked, b.max_rel, b.mean_rel
            )?;
        }
        for m in &self.mismatches {
            writeln!(
                f,
                "MISMATCH {}[{}]: analytic {:.9e} numeric {:.9e} (rel {:.3e})",
                m.block, m.index, m.analytic, m.numeric, m.rel
            )?;
        }
        write!(
            f,
            "{} (tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance
        )
    }
}

/// Relative error with a floor that scales with the loss magnitude, so
/// coordinates whose true gradient is ~0 are judged on round-off scale.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = 1e-6 * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the analytic gradient returned by `loss_fn` against central
/// differences of its value, block by block.
pub fn finite_difference_check<F>(
    params: &ParameterSet,
    loss_fn: F,
    opts: CheckOptions,
) -> Result<CheckReport>
where
    F: Fn(&ParameterSet) -> Result<(f64, BTreeMap<String, Tensor>)>,
{
    let (base, analytic) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }
    let exhaustive = params.scalar_count() <= EXHAUSTIVE_LIMIT;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = CheckReport {
        tolerance: opts.tolerance,
        blocks: Vec::new(),
        mismatches: Vec::new(),
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name)?.len();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Tape(format!("no analytic gradient for `{name}`")))?;
        if grad.len() != len {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has {} values, parameter {len}",
                grad.len()
            )));
        }
        let coords: Vec<usize> = if exhaustive || len <= opts.sampled_per_block {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.sampled_per_block).into_vec();
            c.sort_unstable();
            c
        };
        let (mut max_rel, mut sum_rel) = (0.0f64, 0.0);
        for &i in &coords {
            let original = params.get(&name)?.data()[i];
            probe.get_mut(&name).expect("cloned").data_mut()[i] = original + opts.step;
            let (plus, _) = loss_fn(&probe)?;
            probe.get_mut(&name).expect("cloned").data_mut()[i] = original - opts.step;
            let (minus, _) = loss_fn(&probe)?;
            probe.get_mut(&name).expect("cloned").data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric, base);
            if !(rel < opts.tolerance) {
                report.mismatches.push(Mismatch {
                    block: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel,
                });
            }
            max_rel = max_rel.max(rel);
            sum_rel += rel;
        }
        report.blocks.push(BlockReport {
            name,
            checked: coords.len(),
            max_rel,
            mean_rel: sum_rel / coords.len().max(1) as f64,
        });
    }
    Ok(report)
}
