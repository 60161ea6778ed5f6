//! Retrieval metrics on an unseen domain and a linear domain probe.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{EvalConfig, RunConfig};
use crate::data::{generate_synthetic, make_eval_split, Dataset};
use crate::error::{Error, Result};
use crate::model::{init_model, ModelState};
use crate::tensor::Tensor;
use crate::train::{run_training, TrainOutcome};

pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.1;

/// Pairwise Euclidean distances between rows, optionally after scaling
/// every row to unit length.
pub fn distance_matrix(probe: &Tensor, gallery: &Tensor, normalize: bool) -> Result<Tensor> {
    let (np, d) = probe.ensure_matrix("probe codes")?;
    let (ng, dg) = gallery.ensure_matrix("gallery codes")?;
    if d != dg {
        return Err(Error::Shape(format!(
            "probe codes have {d} dims, gallery {dg}"
        )));
    }
    let prep = |t: &Tensor, what: &str| -> Result<Vec<Vec<f64>>> {
        (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                if !normalize {
                    return Ok(r.to_vec());
                }
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(Error::Invalid(format!(
                        "{what} row {i} is zero and cannot be normalized"
                    )));
                }
                Ok(r.iter().map(|v| v / n).collect())
            })
            .collect()
    };
    let p = prep(probe, "probe")?;
    let g = prep(gallery, "gallery")?;
    let mut out = Vec::with_capacity(np * ng);
    for a in &p {
        for b in &g {
            out.push(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    Tensor::new(vec![np, ng], out)
}

/// Gallery indices of one distance row, nearest first, ties by index.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

fn check_ids(dist: &Tensor, probe_ids: &[usize], gallery_ids: &[usize]) -> Result<(usize, usize)> {
    let (np, ng) = dist.ensure_matrix("distance matrix")?;
    if probe_ids.len() != np || gallery_ids.len() != ng {
        return Err(Error::Shape(format!(
            "distance matrix {np}x{ng} with {} probe and {} gallery ids",
            probe_ids.len(),
            gallery_ids.len()
        )));
    }
    if np == 0 {
        return Err(Error::Invalid("no probes".into()));
    }
    Ok((np, ng))
}

/// `cmc[r-1]` is the fraction of probes whose first correct gallery entry
/// ranks at or before `r`.
pub fn cmc_curve(
    dist: &Tensor,
    probe_ids: &[usize],
    gallery_ids: &[usize],
    max_rank: usize,
) -> Result<Vec<f64>> {
    let (np, _) = check_ids(dist, probe_ids, gallery_ids)?;
    let mut hits = vec![0usize; max_rank];
    for (i, &id) in probe_ids.iter().enumerate() {
        let rank = ranking(dist.row(i))
            .iter()
            .position(|&g| gallery_ids[g] == id)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "probe {i} (identity {id}) has no match in the gallery"
                ))
            })?;
        for h in hits.iter_mut().skip(rank) {
            *h += 1;
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / np as f64).collect())
}

/// Mean over probes of average precision.
pub fn mean_average_precision(
    dist: &Tensor,
    probe_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<f64> {
    let (np, _) = check_ids(dist, probe_ids, gallery_ids)?;
    let mut total = 0.0;
    for (i, &id) in probe_ids.iter().enumerate() {
        let (mut found, mut ap) = (0usize, 0.0);
        for (k, &g) in ranking(dist.row(i)).iter().enumerate() {
            if gallery_ids[g] == id {
                found += 1;
                ap += found as f64 / (k + 1) as f64;
            }
        }
        if found == 0 {
            return Err(Error::Invalid(format!(
                "probe {i} (identity {id}) has no relevant gallery entry"
            )));
        }
        total += ap / found as f64;
    }
    Ok(total / np as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub cmc: Vec<f64>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean CMC over trials, ranks 1..=max_rank.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub trials: Vec<TrialResult>,
    pub domain_probe_accuracy: Option<f64>,
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc[r - 1]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per trial plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let ranks = (1..=self.cmc.len())
            .map(|r| format!("rank{r}"))
            .collect::<Vec<_>>()
            .join(",");
        let mut out = format!("trial,seed,{ranks},map\n");
        let row = |cmc: &[f64]| {
            cmc.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        for t in &self.trials {
            writeln!(out, "{},{},{},{}", t.trial, t.seed, row(&t.cmc), t.map)
                .expect("writing to a String");
        }
        writeln!(out, "mean,,{},{}", row(&self.cmc), self.map).expect("writing to a String");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    pub trials: usize,
    pub max_rank: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            max_rank: 10,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }
}

/// Single-shot retrieval on `ds`: per trial a fresh probe/gallery split,
/// eval-mode codes, unit-normalized Euclidean ranking.
pub fn run_protocol(state: &ModelState, ds: &Dataset, cfg: &ProtocolConfig) -> Result<EvalReport> {
    if cfg.trials == 0 || cfg.max_rank == 0 {
        return Err(Error::Config("trials and max_rank must be positive".into()));
    }
    if ds.mode != state.config.input {
        return Err(Error::Config(format!(
            "dataset input {:?} differs from model input {:?}",
            ds.mode, state.config.input
        )));
    }
    let codes = state.embed(&ds.samples)?;
    evaluate_codes(&codes, ds, cfg)
}

/// The protocol on precomputed codes (one row per sample of `ds`).
pub fn evaluate_codes(codes: &Tensor, ds: &Dataset, cfg: &ProtocolConfig) -> Result<EvalReport> {
    let mut trials = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let seed = cfg.trial_seed(t);
        let split = make_eval_split(ds, seed)?;
        if split.gallery.len() < cfg.max_rank {
            return Err(Error::Config(format!(
                "max_rank {} exceeds gallery size {}",
                cfg.max_rank,
                split.gallery.len()
            )));
        }
        let pid: Vec<usize> = split.probe.iter().map(|&r| ds.identities[r]).collect();
        let gid: Vec<usize> = split.gallery.iter().map(|&r| ds.identities[r]).collect();
        let dist = distance_matrix(
            &codes.select_rows(&split.probe),
            &codes.select_rows(&split.gallery),
            true,
        )?;
        trials.push(TrialResult {
            trial: t,
            seed,
            cmc: cmc_curve(&dist, &pid, &gid, cfg.max_rank)?,
            map: mean_average_precision(&dist, &pid, &gid)?,
        });
    }
    let n = trials.len() as f64;
    let cmc = (0..cfg.max_rank)
        .map(|r| trials.iter().map(|t| t.cmc[r]).sum::<f64>() / n)
        .collect();
    let map = trials.iter().map(|t| t.map).sum::<f64>() / n;
    Ok(EvalReport {
        cmc,
        map,
        trials,
        domain_probe_accuracy: None,
        config: vec![
            ("eval.trials".into(), cfg.trials.to_string()),
            ("eval.max_rank".into(), cfg.max_rank.to_string()),
            ("eval.seed".into(), cfg.seed.to_string()),
        ],
    })
}

/// Multinomial logistic regression on standardized inputs, fitted by
/// full-batch gradient descent from zero weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmax {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes, dims]`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

impl LinearSoftmax {
    pub fn fit(
        x: &Tensor,
        labels: &[usize],
        classes: usize,
        steps: usize,
        lr: f64,
    ) -> Result<Self> {
        let (n, d) = x.ensure_matrix("classifier inputs")?;
        if labels.len() != n || n == 0 {
            return Err(Error::Shape(format!(
                "{n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in scale.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        // Constant columns carry no signal; leave them centred at zero.
        for s in scale.iter_mut() {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut model = Self {
            mean,
            scale,
            weights: vec![0.0; classes * d],
            bias: vec![0.0; classes],
            classes,
        };
        let z: Vec<Vec<f64>> = (0..n).map(|i| model.standardize(x.row(i))).collect();
        for _ in 0..steps {
            let mut gw = vec![0.0; classes * d];
            let mut gb = vec![0.0; classes];
            for (zi, &y) in z.iter().zip(labels) {
                let p = model.probabilities(zi);
                for k in 0..classes {
                    let e = (p[k] - if k == y { 1.0 } else { 0.0 }) / n as f64;
                    gb[k] += e;
                    for (g, v) in gw[k * d..(k + 1) * d].iter_mut().zip(zi) {
                        *g += e * v;
                    }
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        }
        Ok(model)
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn probabilities(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        let logits: Vec<f64> = (0..self.classes)
            .map(|k| {
                self.bias[k]
                    + self.weights[k * d..(k + 1) * d]
                        .iter()
                        .zip(z)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / s).collect()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict(&self, row: &[f64]) -> usize {
        let p = self.probabilities(&self.standardize(row));
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> f64 {
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| self.predict(x.row(i)) == y)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Held-out accuracy of a fresh linear softmax trained to predict the
/// domain of frozen codes. With `groups` (e.g. identities), whole groups
/// are held out so the probe cannot win by memorizing them.
pub fn probe_domain_accuracy(
    codes: &Tensor,
    domains: &[usize],
    groups: Option<&[usize]>,
    holdout: f64,
    seed: u64,
) -> Result<f64> {
    let (n, _) = codes.ensure_matrix("codes")?;
    if domains.len() != n {
        return Err(Error::Shape(format!(
            "{n} codes but {} domain labels",
            domains.len()
        )));
    }
    let mut present = domains.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Invalid(
            "domain probe needs at least 2 domains".into(),
        ));
    }
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(Error::Invalid(format!(
            "holdout fraction {holdout} outside (0, 1)"
        )));
    }
    let keys: Vec<usize> = match groups {
        Some(g) if g.len() == n => g.to_vec(),
        Some(g) => {
            return Err(Error::Shape(format!(
                "{n} codes but {} group labels",
                g.len()
            )))
        }
        None => (0..n).collect(),
    };
    let mut units = keys.clone();
    units.sort_unstable();
    units.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);
    let held = ((units.len() as f64 * holdout).round() as usize).clamp(1, units.len() - 1);
    let held_units = &units[..held];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, k) in keys.iter().enumerate() {
        if held_units.contains(k) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    let classes = present.last().copied().unwrap_or(0) + 1;
    let ytrain: Vec<usize> = train.iter().map(|&i| domains[i]).collect();
    let ytest: Vec<usize> = test.iter().map(|&i| domains[i]).collect();
    let clf = LinearSoftmax::fit(
        &codes.select_rows(&train),
        &ytrain,
        classes,
        PROBE_STEPS,
        PROBE_LR,
    )?;
    Ok(clf.accuracy(&codes.select_rows(&test), &ytest))
}

/// Retrieval on the unseen domains of `ds` plus the domain probe on the
/// codes of its source domains, holding out whole identities.
pub fn full_report(state: &ModelState, ds: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let unseen = ds.unseen();
    let mut report = run_protocol(state, &unseen, &cfg.protocol)?;
    let sources = ds.sources();
    let codes = state.embed(&sources.samples)?;
    report.domain_probe_accuracy = Some(probe_domain_accuracy(
        &codes,
        &sources.domains,
        Some(&sources.identities),
        cfg.probe_holdout,
        cfg.protocol.seed,
    )?);
    report
        .config
        .push(("eval.probe_holdout".into(), cfg.probe_holdout.to_string()));
    Ok(report)
}

/// Generate the corpus, train on its source domains and evaluate.
pub fn train_and_evaluate(cfg: &RunConfig) -> Result<(TrainOutcome, EvalReport)> {
    cfg.validate()?;
    let ds = generate_synthetic(&cfg.data)?;
    let outcome = run_training(init_model(&cfg.model)?, &ds.sources(), &cfg.train)?;
    let report = full_report(&outcome.state, &ds, &cfg.eval)?;
    Ok((outcome, report))
}
