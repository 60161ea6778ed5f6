//! Alternating adversarial optimization: several discriminator updates on
//! frozen codes, then one joint update of extractor, encoder, decoder and
//! identity head on the weighted feature loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{join_list, parse, parse_bool, parse_list};
use crate::data::Dataset;
use crate::diffcore::{Mode, ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, combined_feature_loss, domain_discrimination_loss, identity_loss,
    reconstruction_loss, triplet_loss_batch_hard, LabeledBatch, LossComponents, LossWeights,
    DEFAULT_MARGIN,
};
use crate::mmd::{multi_domain_mmd_rows, Combination, KernelSpec, MmdForm};
use crate::model::{ModelState, Networks, Part};
use crate::tensor::Tensor;

/// Parts updated by the feature step.
pub const FEATURE_PARTS: [Part; 4] = [
    Part::Extractor,
    Part::Encoder,
    Part::Decoder,
    Part::Classifier,
];

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// First-moment accumulator of `name`, if it has been touched.
    pub fn moment(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn apply(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                Error::Invalid(format!("gradient for unknown parameter `{name}`"))
            })?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            g.ensure_finite(name)?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Which optional components take part in training. Instance
/// normalization is toggled through the model's `in_blocks`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub triplet: bool,
    /// Reconstruction, adversarial loss and the discriminator updates.
    pub aae: bool,
    pub mmd: bool,
}

impl Components {
    pub const ALL: Components = Components {
        triplet: true,
        aae: true,
        mmd: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub margin: f64,
    pub kernel: KernelSpec,
    pub mmd_form: MmdForm,
    pub components: Components,
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity in a batch.
    pub k_per: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub disc_steps: usize,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            margin: DEFAULT_MARGIN,
            kernel: KernelSpec::default(),
            mmd_form: MmdForm::Squared,
            components: Components::ALL,
            epochs: 60,
            p: 8,
            k_per: 4,
            batch_size: 32,
            base_lr: 3.5e-4,
            warmup_epochs: 10,
            decay_epochs: vec![40, 70],
            decay_factor: 0.1,
            disc_steps: 5,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The domain-aggregation baseline: identity and triplet losses only.
    pub fn baseline() -> Self {
        Self {
            components: Components {
                triplet: true,
                aae: false,
                mmd: false,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.p * self.k_per != self.batch_size {
            return bad(format!(
                "p·k_per = {}·{} differs from batch_size {}",
                self.p, self.k_per, self.batch_size
            ));
        }
        if self.k_per < 2 {
            return bad(format!(
                "k_per must be at least 2 for triplets, got {}",
                self.k_per
            ));
        }
        if self.p < 2 {
            return bad(format!("p must be at least 2, got {}", self.p));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] <= w[1]) {
            return bad(format!(
                "decay epochs {:?} must be sorted",
                self.decay_epochs
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay factor {} outside (0, 1]", self.decay_factor));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!(
                "base learning rate {} must be positive",
                self.base_lr
            ));
        }
        if !(self.margin >= 0.0) {
            return bad(format!("margin {} must be non-negative", self.margin));
        }
        let w = &self.weights;
        for (name, v) in [
            ("triplet", w.triplet),
            ("reconstruction", w.reconstruction),
            ("mmd", w.mmd),
            ("adversarial", w.adversarial),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} weight {v} must be non-negative"));
            }
        }
        self.kernel.validate()
    }

    /// Loss weights with disabled components zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let c = self.components;
        let w = self.weights;
        LossWeights {
            triplet: if c.triplet { w.triplet } else { 0.0 },
            reconstruction: if c.aae { w.reconstruction } else { 0.0 },
            mmd: if c.mmd { w.mmd } else { 0.0 },
            adversarial: if c.aae { w.adversarial } else { 0.0 },
        }
    }

    /// Discriminator updates per iteration; none when the AAE is off.
    pub fn effective_disc_steps(&self) -> usize {
        if self.components.aae {
            self.disc_steps
        } else {
            0
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        let c = &self.components;
        let pairs: [(&str, String); 22] = [
            ("train.lambda_triplet", w.triplet.to_string()),
            ("train.lambda_reconstruction", w.reconstruction.to_string()),
            ("train.lambda_mmd", w.mmd.to_string()),
            ("train.lambda_adversarial", w.adversarial.to_string()),
            ("train.margin", self.margin.to_string()),
            ("train.mmd_bandwidths", join_list(&self.kernel.bandwidths)),
            (
                "train.mmd_combination",
                match self.kernel.combination {
                    Combination::Mean => "mean".into(),
                    Combination::Sum => "sum".into(),
                },
            ),
            (
                "train.mmd_form",
                match self.mmd_form {
                    MmdForm::Squared => "squared".into(),
                    MmdForm::Root => "root".into(),
                },
            ),
            ("train.triplet", c.triplet.to_string()),
            ("train.aae", c.aae.to_string()),
            ("train.mmd", c.mmd.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.p", self.p.to_string()),
            ("train.k_per", self.k_per.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.base_lr", self.base_lr.to_string()),
            ("train.warmup_epochs", self.warmup_epochs.to_string()),
            ("train.decay_epochs", join_list(&self.decay_epochs)),
            ("train.decay_factor", self.decay_factor.to_string()),
            ("train.disc_steps", self.disc_steps.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.seed", self.seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train.lambda_triplet" => self.weights.triplet = parse(key, value)?,
            "train.lambda_reconstruction" => self.weights.reconstruction = parse(key, value)?,
            "train.lambda_mmd" => self.weights.mmd = parse(key, value)?,
            "train.lambda_adversarial" => self.weights.adversarial = parse(key, value)?,
            "train.margin" => self.margin = parse(key, value)?,
            "train.mmd_bandwidths" => self.kernel.bandwidths = parse_list(key, value)?,
            "train.mmd_combination" => {
                self.kernel.combination = match value {
                    "mean" => Combination::Mean,
                    "sum" => Combination::Sum,
                    other => {
                        return Err(Error::Config(format!(
                            "{key} must be mean or sum, got `{other}`"
                        )))
                    }
                }
            }
            "train.mmd_form" => {
                self.mmd_form = match value {
                    "squared" => MmdForm::Squared,
                    "root" => MmdForm::Root,
                    other => {
                        return Err(Error::Config(format!(
                            "{key} must be squared or root, got `{other}`"
                        )))
                    }
                }
            }
            "train.triplet" => self.components.triplet = parse_bool(key, value)?,
            "train.aae" => self.components.aae = parse_bool(key, value)?,
            "train.mmd" => self.components.mmd = parse_bool(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.p" => self.p = parse(key, value)?,
            "train.k_per" => self.k_per = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.base_lr" => self.base_lr = parse(key, value)?,
            "train.warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "train.decay_epochs" => self.decay_epochs = parse_list(key, value)?,
            "train.decay_factor" => self.decay_factor = parse(key, value)?,
            "train.disc_steps" => self.disc_steps = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr` over `warmup_epochs`, then a staircase
/// multiplying by `decay_factor` from each decay epoch on.
pub fn learning_rate_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let epoch = epoch.max(1);
    if epoch <= cfg.warmup_epochs {
        return cfg.base_lr * epoch as f64 / cfg.warmup_epochs as f64;
    }
    let decays = cfg.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    cfg.base_lr * cfg.decay_factor.powi(decays as i32)
}

/// A sampled mini-batch: flat samples plus labels and source rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub labeled: LabeledBatch,
}

/// `p` distinct identities with `k_per` samples each. Identities are drawn
/// uniformly; if they all come from one domain while the data spans more,
/// the last one is swapped for an identity from another domain so the
/// domain-level losses are defined. Identities with fewer than `k_per`
/// samples are sampled with replacement.
pub fn sample_pk_batch(ds: &Dataset, p: usize, k_per: usize, rng: &mut impl Rng) -> Result<Batch> {
    let groups: Vec<(usize, Vec<usize>)> = ds.by_identity().into_iter().collect();
    if groups.len() < p {
        return Err(Error::Invalid(format!(
            "need {p} identities for a batch, dataset has {}",
            groups.len()
        )));
    }
    let domain_of = |g: &(usize, Vec<usize>)| ds.domains[g.1[0]];
    let mut chosen = sample(rng, groups.len(), p).into_vec();
    let first = domain_of(&groups[chosen[0]]);
    if chosen.iter().all(|&g| domain_of(&groups[g]) == first) {
        let others: Vec<usize> = (0..groups.len())
            .filter(|&g| domain_of(&groups[g]) != first)
            .collect();
        if !others.is_empty() {
            chosen[p - 1] = others[rng.random_range(0..others.len())];
        }
    }
    let mut rows = Vec::with_capacity(p * k_per);
    for g in chosen {
        let members = &groups[g].1;
        if members.len() >= k_per {
            rows.extend(
                sample(rng, members.len(), k_per)
                    .into_iter()
                    .map(|i| members[i]),
            );
        } else {
            rows.extend((0..k_per).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    let labeled = LabeledBatch::new(
        ds.samples.select_rows(&rows),
        rows.iter().map(|&r| ds.identities[r]).collect(),
        rows.iter().map(|&r| ds.domains[r]).collect(),
    )?;
    Ok(Batch { rows, labeled })
}

fn require_domains(batch: &LabeledBatch) -> Result<()> {
    if batch.domain_set().len() < 2 {
        return Err(Error::Invalid(
            "batch spans a single domain; domain losses are undefined".into(),
        ));
    }
    Ok(())
}

/// Codes of `batch` with the extractor and encoder frozen. Batch norm uses
/// the batch statistics, as in the feature step, without updating the
/// running estimates.
fn frozen_codes(state: &ModelState, nets: &Networks, batch: &LabeledBatch) -> Result<Tensor> {
    let x = state.input_batch(&batch.features)?;
    let (f, _) = nets.extractor.apply(&state.params, &x, Mode::Train)?;
    Ok(nets.encoder.apply(&state.params, &f, Mode::Train)?.0)
}

/// Discriminator loss and gradients at fixed codes.
pub fn discriminator_loss_and_grad(
    state: &ModelState,
    nets: &Networks,
    codes: &Tensor,
    domains: &[usize],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let h = tape.constant(codes.clone());
    let (logits, _) = state.record(nets, Part::Discriminator, &mut tape, h, Mode::Train, true)?;
    let l = domain_discrimination_loss(tape.value(logits), domains)?;
    let loss = tape.scalar(l.value, vec![(logits, l.grad)])?;
    Ok((l.value, tape.gradient(loss)?.into_params()))
}

/// One discriminator update. Only discriminator parameters change.
pub fn discriminator_step(
    state: &mut ModelState,
    batch: &LabeledBatch,
    opt: &mut Adam,
    lr: f64,
) -> Result<f64> {
    require_domains(batch)?;
    let nets = state.networks()?;
    let codes = frozen_codes(state, &nets, batch)?;
    let (loss, grads) = discriminator_loss_and_grad(state, &nets, &codes, &batch.domains)?;
    opt.apply(&mut state.params, &grads, lr)?;
    Ok(loss)
}

/// Result of recording the feature loss on a tape.
pub struct FeatureGraph {
    pub tape: Tape,
    pub total: Var,
    pub components: LossComponents,
    pub stat_updates: Vec<crate::diffcore::StatUpdate>,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} loss")))
    }
}

/// Record the weighted feature loss of `batch`. Components with zero
/// effective weight are neither computed nor recorded and report 0.
pub fn feature_graph(
    state: &ModelState,
    nets: &Networks,
    batch: &LabeledBatch,
    cfg: &TrainConfig,
) -> Result<FeatureGraph> {
    weighted_graph(state, nets, batch, cfg, 1.0, cfg.effective_weights())
}

fn weighted_graph(
    state: &ModelState,
    nets: &Networks,
    batch: &LabeledBatch,
    cfg: &TrainConfig,
    identity_weight: f64,
    w: LossWeights,
) -> Result<FeatureGraph> {
    require_domains(batch)?;
    let mut tape = Tape::new();
    let x = tape.constant(state.input_batch(&batch.features)?);
    let (f, stat_updates) = state.record(nets, Part::Extractor, &mut tape, x, Mode::Train, true)?;
    let (h, _) = state.record(nets, Part::Encoder, &mut tape, f, Mode::Train, true)?;
    let mut c = LossComponents::default();
    let mut terms: Vec<(Var, f64)> = Vec::new();

    if identity_weight != 0.0 {
        let (logits, _) = state.record(nets, Part::Classifier, &mut tape, h, Mode::Train, true)?;
        let l = identity_loss(tape.value(logits), &batch.identities)?;
        c.identity = finite("identity", l.value)?;
        terms.push((
            tape.scalar(l.value, vec![(logits, l.grad)])?,
            identity_weight,
        ));
    }
    if w.triplet != 0.0 {
        let l = triplet_loss_batch_hard(tape.value(h), &batch.identities, cfg.margin)?;
        c.triplet = finite("triplet", l.value)?;
        terms.push((tape.scalar(l.value, vec![(h, l.grad)])?, w.triplet));
    }
    if w.reconstruction != 0.0 {
        let (xr, _) = state.record(nets, Part::Decoder, &mut tape, h, Mode::Train, true)?;
        let l = reconstruction_loss(tape.value(f), tape.value(xr))?;
        c.reconstruction = finite("reconstruction", l.value)?;
        let to_features = l.grad.scale(-1.0);
        terms.push((
            tape.scalar(l.value, vec![(xr, l.grad), (f, to_features)])?,
            w.reconstruction,
        ));
    }
    if w.mmd != 0.0 {
        let l = multi_domain_mmd_rows(tape.value(h), &batch.domains, &cfg.kernel, cfg.mmd_form)?;
        c.mmd = finite("mmd", l.value)?;
        terms.push((tape.scalar(l.value, vec![(h, l.grad)])?, w.mmd));
    }
    if w.adversarial != 0.0 {
        // Discriminator weights enter as constants: the gradient reaches
        // the codes but never the discriminator.
        let (dl, _) = state.record(nets, Part::Discriminator, &mut tape, h, Mode::Train, false)?;
        let l = adversarial_loss(tape.value(dl), &batch.domains)?;
        c.adversarial = finite("adversarial", l.value)?;
        terms.push((tape.scalar(l.value, vec![(dl, l.grad)])?, w.adversarial));
    }
    let total = tape.weighted_sum(terms)?;
    Ok(FeatureGraph {
        tape,
        total,
        components: c,
        stat_updates,
    })
}

/// Per-step loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub components: LossComponents,
    pub total: f64,
}

/// One joint update of extractor, encoder, decoder and identity head.
/// The discriminator is untouched.
pub fn feature_step(
    state: &mut ModelState,
    batch: &LabeledBatch,
    cfg: &TrainConfig,
    opt: &mut Adam,
    lr: f64,
) -> Result<StepLosses> {
    let nets = state.networks()?;
    let g = feature_graph(state, &nets, batch, cfg)?;
    let total = finite("total", g.tape.value(g.total).item())?;
    let grads = g.tape.gradient(g.total)?.into_params();
    opt.apply(&mut state.params, &grads, lr)?;
    state.params.apply_stat_updates(&g.stat_updates)?;
    Ok(StepLosses {
        components: g.components,
        total,
    })
}

/// One row of the metrics log: losses averaged over an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub components: LossComponents,
    pub discriminator: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,l_id,l_tri,l_rec,l_mmd,l_adv,l_D,total";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in rows {
        let c = &m.components;
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            m.epoch,
            m.lr,
            c.identity,
            c.triplet,
            c.reconstruction,
            c.mmd,
            c.adversarial,
            m.discriminator,
            m.total
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Discriminator,
    Feature,
}

/// One optimizer step, with digests of the parameter groups that step
/// must leave untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub kind: StepKind,
    pub loss: f64,
    pub frozen_before: u64,
    pub frozen_after: u64,
    /// Loss components computed by a feature step.
    pub computed: Vec<&'static str>,
}

impl StepRecord {
    pub fn freeze_held(&self) -> bool {
        self.frozen_before == self.frozen_after
    }
}

pub fn step_log_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from("epoch,iteration,kind,loss,frozen_before,frozen_after,components\n");
    for s in steps {
        let kind = match s.kind {
            StepKind::Discriminator => "D",
            StepKind::Feature => "F",
        };
        writeln!(
            out,
            "{},{},{kind},{:e},{:016x},{:016x},{}",
            s.epoch,
            s.iteration,
            s.loss,
            s.frozen_before,
            s.frozen_after,
            s.computed.join("+")
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub metrics: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
}

fn check_labels(state: &ModelState, ds: &Dataset) -> Result<()> {
    let cfg = &state.config;
    if ds.mode != cfg.input {
        return Err(Error::Config(format!(
            "dataset input {:?} differs from model input {:?}",
            ds.mode, cfg.input
        )));
    }
    if let Some(&i) = ds.identities.iter().find(|&&i| i >= cfg.identities) {
        return Err(Error::LabelOutOfRange {
            label: i,
            classes: cfg.identities,
        });
    }
    if let Some(&d) = ds.domains.iter().find(|&&d| d >= cfg.domains) {
        return Err(Error::LabelOutOfRange {
            label: d,
            classes: cfg.domains,
        });
    }
    if ds.present_domains().len() < 2 {
        return Err(Error::Invalid("training data spans a single domain".into()));
    }
    Ok(())
}

fn diverged(e: Error, epoch: usize, iteration: usize) -> Error {
    match e {
        Error::NonFinite(component) => Error::Diverged {
            component,
            epoch,
            iteration,
        },
        other => other,
    }
}

pub fn run_training(state: ModelState, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_training_with(state, ds, cfg, |_, _| Ok(()))
}

/// Train on `ds` (the source domains). `on_epoch` runs after every epoch
/// with the current state, e.g. to write checkpoints.
pub fn run_training_with(
    mut state: ModelState,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ModelState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_labels(&state, ds)?;
    let iterations = ds.len() / cfg.batch_size;
    if iterations == 0 {
        return Err(Error::Invalid(format!(
            "{} samples cannot fill a batch of {}",
            ds.len(),
            cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut opt_d, mut opt_f) = (Adam::new(), Adam::new());
    let disc_steps = cfg.effective_disc_steps();
    let w = cfg.effective_weights();
    let computed: Vec<&'static str> = LossComponents::default()
        .named()
        .iter()
        .map(|&(n, _)| n)
        .zip([1.0, w.triplet, w.reconstruction, w.mmd, w.adversarial])
        .filter(|&(_, wt)| wt != 0.0)
        .map(|(n, _)| n)
        .collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    for epoch in 1..=cfg.epochs {
        let lr = learning_rate_at(cfg, epoch);
        let mut sum = EpochMetrics {
            epoch,
            lr,
            components: LossComponents::default(),
            discriminator: 0.0,
            total: 0.0,
        };
        for it in 0..iterations {
            let mut d_sum = 0.0;
            for _ in 0..disc_steps {
                let b = sample_pk_batch(ds, cfg.p, cfg.k_per, &mut rng)?;
                let before = state.digest(&FEATURE_PARTS);
                let loss = discriminator_step(&mut state, &b.labeled, &mut opt_d, lr)
                    .map_err(|e| diverged(e, epoch, it))?;
                steps.push(StepRecord {
                    epoch,
                    iteration: it,
                    kind: StepKind::Discriminator,
                    loss,
                    frozen_before: before,
                    frozen_after: state.digest(&FEATURE_PARTS),
                    computed: vec!["discriminator"],
                });
                d_sum += loss;
            }
            let b = sample_pk_batch(ds, cfg.p, cfg.k_per, &mut rng)?;
            let before = state.digest(&[Part::Discriminator]);
            let l = feature_step(&mut state, &b.labeled, cfg, &mut opt_f, lr)
                .map_err(|e| diverged(e, epoch, it))?;
            steps.push(StepRecord {
                epoch,
                iteration: it,
                kind: StepKind::Feature,
                loss: l.total,
                frozen_before: before,
                frozen_after: state.digest(&[Part::Discriminator]),
                computed: computed.clone(),
            });
            let c = &mut sum.components;
            c.identity += l.components.identity;
            c.triplet += l.components.triplet;
            c.reconstruction += l.components.reconstruction;
            c.mmd += l.components.mmd;
            c.adversarial += l.components.adversarial;
            if disc_steps > 0 {
                sum.discriminator += d_sum / disc_steps as f64;
            }
            sum.total += l.total;
        }
        let n = iterations as f64;
        let c = &mut sum.components;
        for v in [
            &mut c.identity,
            &mut c.triplet,
            &mut c.reconstruction,
            &mut c.mmd,
            &mut c.adversarial,
        ] {
            *v /= n;
        }
        sum.discriminator /= n;
        sum.total /= n;
        metrics.push(sum);
        on_epoch(epoch, &state)?;
    }
    Ok(TrainOutcome {
        state,
        metrics,
        steps,
    })
}

/// Smallest distance from zero of any ReLU input in `net` on `x`.
fn relu_margin(
    net: &crate::diffcore::Sequential,
    params: &ParameterSet,
    x: &Tensor,
) -> Result<f64> {
    use crate::diffcore::{LayerSpec, Sequential};
    let mut margin = f64::INFINITY;
    for (i, layer) in net.layers().iter().enumerate() {
        if matches!(layer, LayerSpec::Relu) {
            let head = Sequential::new(net.prefix(), net.layers()[..i].to_vec())?;
            let (pre, _) = head.apply(params, x, Mode::Train)?;
            margin = pre.data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
    }
    Ok(margin)
}

/// A model small enough for exhaustive finite differences (every width at
/// most 8, 12 samples over 3 domains) and one batch for it. Draws whose
/// ReLU inputs come within 1e-3 of the kink are skipped: central
/// differences straddling it measure the kink, not the gradient.
pub fn micro_problem(seed: u64) -> Result<(ModelState, LabeledBatch)> {
    const KINK_MARGIN: f64 = 1e-3;
    for attempt in 0..256u64 {
        let draw = seed.wrapping_mul(256).wrapping_add(attempt);
        let model = crate::model::ModelConfig {
            input: crate::model::InputMode::Vector { dim: 6 },
            widths: vec![8, 8, 7],
            in_blocks: 2,
            hidden: 5,
            identities: 6,
            domains: 3,
            seed: draw,
            ..crate::model::ModelConfig::default()
        };
        let state = crate::model::init_model(&model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(draw ^ 0x5eed);
        let n = 12;
        let data: Vec<f64> = (0..n * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        // Two identities per domain, two views each.
        let identities: Vec<usize> = (0..n).map(|i| i / 2).collect();
        let domains: Vec<usize> = identities.iter().map(|&i| i / 2).collect();
        let batch = LabeledBatch::new(Tensor::new(vec![n, 6], data)?, identities, domains)?;

        let nets = state.networks()?;
        let x = state.input_batch(&batch.features)?;
        let (f, _) = nets.extractor.apply(&state.params, &x, Mode::Train)?;
        let (h, _) = nets.encoder.apply(&state.params, &f, Mode::Train)?;
        let margin = [
            relu_margin(&nets.extractor, &state.params, &x)?,
            relu_margin(&nets.encoder, &state.params, &f)?,
            relu_margin(&nets.decoder, &state.params, &h)?,
            relu_margin(&nets.discriminator, &state.params, &h)?,
            relu_margin(&nets.classifier, &state.params, &h)?,
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
        if margin >= KINK_MARGIN {
            return Ok((state, batch));
        }
    }
    Err(Error::Invalid(format!(
        "no kink-free micro problem for seed {seed}"
    )))
}

/// Central-difference check of every loss composed through the model,
/// one loss at a time: identity, triplet, reconstruction, MMD, the
/// discriminator loss on discriminator weights and the adversarial loss
/// on the feature path.
pub fn gradient_check_suite(
    cfg: &TrainConfig,
    seed: u64,
    opts: crate::diffcore::CheckOptions,
) -> Result<Vec<(&'static str, crate::diffcore::CheckReport)>> {
    use crate::diffcore::finite_difference_check;
    let (state, batch) = micro_problem(seed)?;
    let nets = state.networks()?;
    let zero = LossWeights {
        triplet: 0.0,
        reconstruction: 0.0,
        mmd: 0.0,
        adversarial: 0.0,
    };
    use Part::{Classifier, Decoder, Discriminator, Encoder, Extractor};
    let feature_cases: [(&'static str, f64, LossWeights, &[Part]); 5] = [
        ("identity", 1.0, zero, &[Extractor, Encoder, Classifier]),
        (
            "triplet",
            0.0,
            LossWeights {
                triplet: 1.0,
                ..zero
            },
            &[Extractor, Encoder],
        ),
        (
            "reconstruction",
            0.0,
            LossWeights {
                reconstruction: 1.0,
                ..zero
            },
            &[Extractor, Encoder, Decoder],
        ),
        (
            "mmd",
            0.0,
            LossWeights { mmd: 1.0, ..zero },
            &[Extractor, Encoder],
        ),
        (
            "adversarial",
            0.0,
            LossWeights {
                adversarial: 1.0,
                ..zero
            },
            &[Extractor, Encoder],
        ),
    ];
    // The checked subset is perturbed; everything else stays at `state`.
    let with = |ps: &ParameterSet| {
        let mut params = state.params.clone();
        for (name, t) in ps.iter() {
            params.insert(name.clone(), t.clone());
        }
        ModelState {
            config: state.config.clone(),
            params,
        }
    };
    let mut out = Vec::new();
    for (name, id_w, w, parts) in feature_cases {
        let loss_fn = |ps: &ParameterSet| {
            let g = weighted_graph(&with(ps), &nets, &batch, cfg, id_w, w)?;
            let value = g.tape.value(g.total).item();
            let mut grads = g.tape.gradient(g.total)?.into_params();
            grads.retain(|k, _| ps.get(k).is_ok());
            Ok((value, grads))
        };
        out.push((
            name,
            finite_difference_check(&state.part_params(parts), loss_fn, opts)?,
        ));
    }
    let codes = frozen_codes(&state, &nets, &batch)?;
    let loss_fn =
        |ps: &ParameterSet| discriminator_loss_and_grad(&with(ps), &nets, &codes, &batch.domains);
    out.push((
        "discriminator",
        finite_difference_check(&state.part_params(&[Discriminator]), loss_fn, opts)?,
    ));
    out.sort_by_key(|(n, _)| match *n {
        "identity" => 0,
        "triplet" => 1,
        "reconstruction" => 2,
        "discriminator" => 3,
        "adversarial" => 4,
        _ => 5,
    });
    Ok(out)
}

/// Total loss recomputed from logged components, for bookkeeping checks.
pub fn recombine(losses: &StepLosses, cfg: &TrainConfig) -> Result<f64> {
    combined_feature_loss(&losses.components, &cfg.effective_weights())
}
