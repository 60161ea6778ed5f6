//! Brute-force reference implementations, written independently of the
//! library so the tests compare two derivations rather than one.

#![allow(dead_code)]

use mmfa_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, n: usize, d: usize, scale: f64) -> Tensor {
    Tensor::new(
        vec![n, d],
        (0..n * d)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s
}

/// Mean of Gaussian kernels `exp(−r²/(2α))` over the bandwidths.
pub fn kernel(a: &[f64], b: &[f64], bandwidths: &[f64]) -> f64 {
    let r2 = sq_dist(a, b);
    bandwidths
        .iter()
        .map(|bw| (-r2 / (2.0 * bw)).exp())
        .sum::<f64>()
        / bandwidths.len() as f64
}

/// Biased squared MMD by explicit double loops.
pub fn mmd2(x: &Tensor, y: &Tensor, bandwidths: &[f64]) -> f64 {
    let (n, m) = (x.rows(), y.rows());
    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            xx += kernel(x.row(i), x.row(j), bandwidths);
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            yy += kernel(y.row(i), y.row(j), bandwidths);
        }
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += kernel(x.row(i), y.row(j), bandwidths);
        }
    }
    xx / (n * n) as f64 + yy / (m * m) as f64 - 2.0 * xy / (n * m) as f64
}

/// `(1/K²)` times the sum over all ordered pairs of distinct domains.
pub fn multi_mmd2(sets: &[Tensor], bandwidths: &[f64]) -> f64 {
    let k = sets.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                total += mmd2(&sets[i], &sets[j], bandwidths);
            }
        }
    }
    total / (k * k) as f64
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Triplet loss by enumerating every (anchor, positive, negative) triple
/// and keeping the worst hinge per anchor; anchors without a positive or a
/// negative are skipped. `None` when no anchor qualifies.
pub fn triplet_exhaustive(codes: &Tensor, labels: &[usize], margin: f64) -> Option<f64> {
    let n = codes.rows();
    let mut mean = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        let mut worst: Option<f64> = None;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let h = euclid(codes.row(a), codes.row(p)) - euclid(codes.row(a), codes.row(q))
                    + margin;
                worst = Some(worst.map_or(h, |w: f64| w.max(h)));
            }
        }
        if let Some(w) = worst {
            count += 1;
            mean += (w.max(0.0) - mean) / count as f64;
        }
    }
    (count > 0).then_some(mean)
}

/// Gallery order for one probe by repeated selection of the smallest
/// remaining distance, lowest index first on ties.
fn selection_order(row: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..row.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if row[left[k]] < row[left[best]] {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn cmc_brute(dist: &Tensor, pids: &[usize], gids: &[usize], max_rank: usize) -> Vec<f64> {
    let mut cmc = vec![0.0; max_rank];
    for (i, &id) in pids.iter().enumerate() {
        let order = selection_order(dist.row(i));
        for (r, c) in cmc.iter_mut().enumerate() {
            if order[..(r + 1).min(order.len())]
                .iter()
                .any(|&g| gids[g] == id)
            {
                *c += 1.0;
            }
        }
    }
    cmc.iter().map(|c| c / pids.len() as f64).collect()
}

/// Average precision as the mean, over relevant items, of precision at
/// that item's rank.
pub fn map_brute(dist: &Tensor, pids: &[usize], gids: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &id) in pids.iter().enumerate() {
        let order = selection_order(dist.row(i));
        let relevant: Vec<usize> = (0..order.len()).filter(|&k| gids[order[k]] == id).collect();
        let mut ap = 0.0;
        for &k in &relevant {
            let hits = (0..=k).filter(|&j| gids[order[j]] == id).count();
            ap += hits as f64 / (k + 1) as f64;
        }
        total += ap / relevant.len() as f64;
    }
    total / pids.len() as f64
}

/// Random retrieval instance where every probe identity appears in the
/// gallery. Distances are drawn on a coarse grid so ties occur.
pub fn retrieval_instance(
    rng: &mut impl Rng,
    max_p: usize,
    max_g: usize,
) -> (Tensor, Vec<usize>, Vec<usize>) {
    let ng = rng.random_range(1..=max_g);
    let np = rng.random_range(1..=max_p);
    let ids = rng.random_range(1..=ng);
    let mut gids: Vec<usize> = (0..ng).map(|_| rng.random_range(0..ids)).collect();
    gids[0] = 0;
    let present: Vec<usize> = {
        let mut v = gids.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    let pids: Vec<usize> = (0..np)
        .map(|_| present[rng.random_range(0..present.len())])
        .collect();
    let dist = Tensor::new(
        vec![np, ng],
        (0..np * ng)
            .map(|_| rng.random_range(0..6) as f64 * 0.5)
            .collect(),
    )
    .unwrap();
    (dist, pids, gids)
}
