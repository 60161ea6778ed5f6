//! Kernel maximum mean discrepancy between sets of hidden codes, and the
//! K-domain alignment regularizer built from it.
//!
//! The RKHS feature map is never materialized: every quantity is written in
//! terms of kernel evaluations. `mmd_squared` is the biased V-statistic, so
//! the `i = i'` pairs are included and the estimate is never negative beyond
//! round-off.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::Loss;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combination {
    /// Arithmetic mean of the per-bandwidth kernels.
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
    pub combination: Combination,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            bandwidths: vec![1.0, 5.0, 10.0],
            combination: Combination::Mean,
        }
    }
}

impl KernelSpec {
    pub fn single(bandwidth: f64) -> Self {
        Self {
            bandwidths: vec![bandwidth],
            combination: Combination::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::Invalid("kernel needs at least one bandwidth".into()));
        }
        if let Some(b) = self
            .bandwidths
            .iter()
            .find(|b| !(**b > 0.0 && b.is_finite()))
        {
            return Err(Error::Invalid(format!("bandwidth {b} must be positive")));
        }
        Ok(())
    }

    fn weight(&self) -> f64 {
        match self.combination {
            Combination::Mean => 1.0 / self.bandwidths.len() as f64,
            Combination::Sum => 1.0,
        }
    }

    /// Kernel value and `g` such that `∂k(a, b)/∂a = −g·(a − b)`.
    fn eval(&self, a: &[f64], b: &[f64]) -> (f64, f64) {
        let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let w = self.weight();
        let (mut k, mut g) = (0.0, 0.0);
        for &bw in &self.bandwidths {
            let e = (-r2 / (2.0 * bw)).exp();
            k += w * e;
            g += w * e / bw;
        }
        (k, g)
    }
}

/// `exp(−||a − b||² / (2·bandwidth))`.
pub fn rbf_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "kernel arguments of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Invalid(format!(
            "bandwidth {bandwidth} must be positive"
        )));
    }
    let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((-r2 / (2.0 * bandwidth)).exp())
}

fn check_pair(hl: &Tensor, ht: &Tensor) -> Result<usize> {
    let (_, dl) = hl.ensure_matrix("first code set")?;
    let (_, dt) = ht.ensure_matrix("second code set")?;
    if dl != dt {
        return Err(Error::Shape(format!(
            "code dimensions {dl} and {dt} differ"
        )));
    }
    Ok(dl)
}

/// Accumulate `scale · Σ_{i,j} k(a_i, b_j)` and its gradients into `ga`/`gb`.
fn kernel_block(
    kernel: &KernelSpec,
    a: &Tensor,
    b: &Tensor,
    scale: f64,
    ga: &mut [f64],
    gb: &mut [f64],
) -> f64 {
    let d = a.row_len();
    let mut sum = 0.0;
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            let rb = b.row(j);
            let (k, g) = kernel.eval(ra, rb);
            sum += k;
            for t in 0..d {
                let u = scale * g * (ra[t] - rb[t]);
                ga[i * d + t] -= u;
                gb[j * d + t] += u;
            }
        }
    }
    scale * sum
}

/// Squared MMD with gradients with respect to both code sets.
pub fn mmd_squared_with_grad(
    hl: &Tensor,
    ht: &Tensor,
    kernel: &KernelSpec,
) -> Result<(f64, Tensor, Tensor)> {
    kernel.validate()?;
    check_pair(hl, ht)?;
    let (nl, nt) = (hl.rows() as f64, ht.rows() as f64);
    let mut gl = vec![0.0; hl.len()];
    let mut gt = vec![0.0; ht.len()];
    // Self blocks: both arguments belong to the same set, so accumulate
    // into a scratch buffer and fold in.
    let mut scratch = vec![0.0; hl.len()];
    let kll = kernel_block(kernel, hl, hl, 1.0 / (nl * nl), &mut gl, &mut scratch);
    gl.iter_mut().zip(&scratch).for_each(|(g, s)| *g += s);
    let mut scratch = vec![0.0; ht.len()];
    let ktt = kernel_block(kernel, ht, ht, 1.0 / (nt * nt), &mut gt, &mut scratch);
    gt.iter_mut().zip(&scratch).for_each(|(g, s)| *g += s);
    let klt = kernel_block(kernel, hl, ht, -2.0 / (nl * nt), &mut gl, &mut gt);
    let value = (kll + ktt + klt).max(0.0);
    Ok((
        value,
        Tensor::from_parts(hl.shape().to_vec(), gl),
        Tensor::from_parts(ht.shape().to_vec(), gt),
    ))
}

pub fn mmd_squared(hl: &Tensor, ht: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    Ok(mmd_squared_with_grad(hl, ht, kernel)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmdForm {
    /// Sum of pairwise squared discrepancies.
    Squared,
    /// Sum of pairwise discrepancies (square roots, clamped at 0).
    Root,
}

/// Per-domain code matrices sharing one code dimension.
#[derive(Debug, Clone)]
pub struct DomainCodeSets {
    sets: Vec<Tensor>,
}

impl DomainCodeSets {
    pub fn new(sets: Vec<Tensor>) -> Result<Self> {
        if sets.len() < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 domains, got {}",
                sets.len()
            )));
        }
        let d = sets[0].ensure_matrix("domain codes")?.1;
        for s in &sets {
            let (_, ds) = s.ensure_matrix("domain codes")?;
            if ds != d {
                return Err(Error::Shape(format!(
                    "domain code dimensions {d} and {ds} differ"
                )));
            }
        }
        Ok(Self { sets })
    }

    pub fn sets(&self) -> &[Tensor] {
        &self.sets
    }
}

/// `(1/K²) Σ_{i,j} MMD(H_i, H_j)` over ordered domain pairs, with gradients
/// for each domain's codes. Diagonal pairs are zero and skipped.
pub fn multi_domain_mmd_with_grad(
    codes: &DomainCodeSets,
    kernel: &KernelSpec,
    form: MmdForm,
) -> Result<(f64, Vec<Tensor>)> {
    let sets = codes.sets();
    let k = sets.len() as f64;
    // Each unordered pair appears twice in the ordered double sum.
    let pair_weight = 2.0 / (k * k);
    let mut grads: Vec<Tensor> = sets.iter().map(|s| Tensor::zeros(s.shape())).collect();
    let mut total = 0.0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let (m2, gi, gj) = mmd_squared_with_grad(&sets[i], &sets[j], kernel)?;
            let (term, dterm) = match form {
                MmdForm::Squared => (m2, 1.0),
                MmdForm::Root => {
                    let r = m2.sqrt();
                    (r, if r > 0.0 { 0.5 / r } else { 0.0 })
                }
            };
            total += term;
            grads[i].add_scaled(&gi, pair_weight * dterm);
            grads[j].add_scaled(&gj, pair_weight * dterm);
        }
    }
    Ok((pair_weight * total, grads))
}

pub fn multi_domain_mmd(codes: &DomainCodeSets, kernel: &KernelSpec, form: MmdForm) -> Result<f64> {
    Ok(multi_domain_mmd_with_grad(codes, kernel, form)?.0)
}

/// Multi-domain MMD over the rows of `codes`, grouped by `domains`; the
/// gradient is scattered back to row order.
pub fn multi_domain_mmd_rows(
    codes: &Tensor,
    domains: &[usize],
    kernel: &KernelSpec,
    form: MmdForm,
) -> Result<Loss> {
    if domains.len() != codes.rows() {
        return Err(Error::Shape(format!(
            "{} codes but {} domain labels",
            codes.rows(),
            domains.len()
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &d) in domains.iter().enumerate() {
        groups.entry(d).or_default().push(i);
    }
    let rows: Vec<Vec<usize>> = groups.into_values().collect();
    let sets = DomainCodeSets::new(rows.iter().map(|r| codes.select_rows(r)).collect())?;
    let (value, grads) = multi_domain_mmd_with_grad(&sets, kernel, form)?;
    let d = codes.row_len();
    let mut grad = Tensor::zeros(codes.shape());
    for (idx, g) in rows.iter().zip(&grads) {
        for (local, &row) in idx.iter().enumerate() {
            grad.data_mut()[row * d..(row + 1) * d].copy_from_slice(g.row(local));
        }
    }
    Ok(Loss { value, grad })
}
