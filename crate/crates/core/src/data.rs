//! Synthetic multi-domain corpus and its binary file format.
//!
//! Every domain restyles identity prototypes with its own channel-wise
//! gain and bias (optionally after a mild linear mixing), and each sample
//! additionally carries a small per-sample restyling, the analogue of
//! camera and lighting changes between views. Identities never repeat
//! across domains; the last domain is held out for evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{join_list, parse, parse_list};
use crate::error::{Error, Result};
use crate::model::InputMode;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "MMFA1";
pub const DATASET_VERSION: u32 = 1;

/// Upper bound on the condition number of a domain mixing matrix.
pub const MAX_CONDITION: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub mode: InputMode,
    pub train_domains: usize,
    pub identities_per_domain: usize,
    pub samples_per_identity: usize,
    pub heldout_identities: usize,
    /// Standard deviation of identity prototypes.
    pub prototype_spread: f64,
    /// Per-view perturbation of the prototype.
    pub view_sigma: f64,
    pub sensor_sigma: f64,
    /// Domain gains are drawn log-uniformly from this range.
    pub gain_range: (f64, f64),
    /// Lower bound on the gap between the channel means of any two domains.
    pub style_gap: f64,
    /// Per-sample log-gain standard deviation.
    pub gain_jitter: f64,
    /// Per-sample bias standard deviation.
    pub bias_jitter: f64,
    /// Strength of the domain mixing matrix `I + s·R` with `‖R‖_F = 1`;
    /// zero disables mixing.
    pub mixing: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            mode: InputMode::Vector { dim: 32 },
            train_domains: 3,
            identities_per_domain: 20,
            samples_per_identity: 4,
            heldout_identities: 60,
            prototype_spread: 1.0,
            view_sigma: 0.5,
            sensor_sigma: 0.05,
            gain_range: (0.5, 2.0),
            style_gap: 1.0,
            gain_jitter: 0.25,
            bias_jitter: 0.5,
            mixing: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.samples_per_identity < 2 {
            return bad(format!(
                "samples_per_identity must be at least 2 for probe and gallery views, got {}",
                self.samples_per_identity
            ));
        }
        if self.train_domains < 2 {
            return bad(format!(
                "need at least 2 training domains, got {}",
                self.train_domains
            ));
        }
        if self.identities_per_domain == 0 || self.heldout_identities == 0 {
            return bad("identity counts must be positive".into());
        }
        if self.mode.sample_len() == 0 {
            return bad("sample dimensions must be positive".into());
        }
        let (lo, hi) = self.gain_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!(
                "gain range ({lo}, {hi}) must be positive and ordered"
            ));
        }
        for (name, v) in [
            ("prototype_spread", self.prototype_spread),
            ("view_sigma", self.view_sigma),
            ("sensor_sigma", self.sensor_sigma),
            ("style_gap", self.style_gap),
            ("gain_jitter", self.gain_jitter),
            ("bias_jitter", self.bias_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        // ‖sR‖₂ ≤ s, so cond(I + sR) ≤ (1 + s)/(1 − s).
        let s = self.mixing;
        if !(0.0..1.0).contains(&s) || (1.0 + s) / (1.0 - s) > MAX_CONDITION {
            return bad(format!(
                "mixing {s} would allow a condition number above {MAX_CONDITION}"
            ));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = match self.mode {
            InputMode::Vector { dim } => vec![
                ("data.input".into(), "vector".into()),
                ("data.input_dim".into(), dim.to_string()),
            ],
            InputMode::Image {
                channels,
                height,
                width,
            } => vec![
                ("data.input".into(), "image".into()),
                ("data.channels".into(), channels.to_string()),
                ("data.height".into(), height.to_string()),
                ("data.width".into(), width.to_string()),
            ],
        };
        out.extend([
            ("data.train_domains".into(), self.train_domains.to_string()),
            (
                "data.identities_per_domain".into(),
                self.identities_per_domain.to_string(),
            ),
            (
                "data.samples_per_identity".into(),
                self.samples_per_identity.to_string(),
            ),
            (
                "data.heldout_identities".into(),
                self.heldout_identities.to_string(),
            ),
            (
                "data.prototype_spread".into(),
                self.prototype_spread.to_string(),
            ),
            ("data.view_sigma".into(), self.view_sigma.to_string()),
            ("data.sensor_sigma".into(), self.sensor_sigma.to_string()),
            (
                "data.gain_range".into(),
                join_list(&[self.gain_range.0, self.gain_range.1]),
            ),
            ("data.style_gap".into(), self.style_gap.to_string()),
            ("data.gain_jitter".into(), self.gain_jitter.to_string()),
            ("data.bias_jitter".into(), self.bias_jitter.to_string()),
            ("data.mixing".into(), self.mixing.to_string()),
            ("data.seed".into(), self.seed.to_string()),
        ]);
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.input" => {
                self.mode = match value {
                    "vector" => InputMode::Vector {
                        dim: self.mode.sample_len(),
                    },
                    "image" => match self.mode {
                        img @ InputMode::Image { .. } => img,
                        InputMode::Vector { .. } => InputMode::Image {
                            channels: 3,
                            height: 6,
                            width: 6,
                        },
                    },
                    other => {
                        return Err(Error::Config(format!(
                            "data.input must be vector or image, got `{other}`"
                        )))
                    }
                }
            }
            "data.input_dim" => match &mut self.mode {
                InputMode::Vector { dim } => *dim = parse(key, value)?,
                InputMode::Image { .. } => {
                    return Err(Error::Config(
                        "data.input_dim needs data.input = vector".into(),
                    ))
                }
            },
            "data.channels" | "data.height" | "data.width" => match &mut self.mode {
                InputMode::Image {
                    channels,
                    height,
                    width,
                } => {
                    let slot = match key {
                        "data.channels" => channels,
                        "data.height" => height,
                        _ => width,
                    };
                    *slot = parse(key, value)?;
                }
                InputMode::Vector { .. } => {
                    return Err(Error::Config(format!("{key} needs data.input = image")))
                }
            },
            "data.train_domains" => self.train_domains = parse(key, value)?,
            "data.identities_per_domain" => self.identities_per_domain = parse(key, value)?,
            "data.samples_per_identity" => self.samples_per_identity = parse(key, value)?,
            "data.heldout_identities" => self.heldout_identities = parse(key, value)?,
            "data.prototype_spread" => self.prototype_spread = parse(key, value)?,
            "data.view_sigma" => self.view_sigma = parse(key, value)?,
            "data.sensor_sigma" => self.sensor_sigma = parse(key, value)?,
            "data.gain_range" => {
                let v: Vec<f64> = parse_list(key, value)?;
                let [lo, hi] = v[..] else {
                    return Err(Error::Config(format!(
                        "data.gain_range needs two values, got `{value}`"
                    )));
                };
                self.gain_range = (lo, hi);
            }
            "data.style_gap" => self.style_gap = parse(key, value)?,
            "data.gain_jitter" => self.gain_jitter = parse(key, value)?,
            "data.bias_jitter" => self.bias_jitter = parse(key, value)?,
            "data.mixing" => self.mixing = parse(key, value)?,
            "data.seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

/// The style transform of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub id: usize,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    /// Row-major mixing over the feature axis (vector mode) or the channel
    /// axis (image mode).
    pub mixing: Option<Vec<f64>>,
    pub noise: f64,
}

/// Labeled samples from several domains, stored flat as `[n, sample_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mode: InputMode,
    pub samples: Tensor,
    pub identities: Vec<usize>,
    pub domains: Vec<usize>,
    pub domain_names: Vec<String>,
    /// Domains `0..source_domains` are for training; the rest are unseen.
    pub source_domains: usize,
    pub identity_count: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_names.is_empty() {
            return Err(Error::Invalid("domain count must be positive".into()));
        }
        if self.source_domains > self.domain_names.len() {
            return Err(Error::Inconsistent(format!(
                "{} source domains declared but only {} domains",
                self.source_domains,
                self.domain_names.len()
            )));
        }
        let n = self.len();
        if self.domains.len() != n || self.samples.shape() != [n, self.mode.sample_len()] {
            return Err(Error::Inconsistent(format!(
                "{n} labels, {} domain labels, samples {:?}",
                self.domains.len(),
                self.samples.shape()
            )));
        }
        if let Some(&d) = self.domains.iter().find(|&&d| d >= self.domain_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: d,
                classes: self.domain_names.len(),
            });
        }
        if let Some(&i) = self.identities.iter().find(|&&i| i >= self.identity_count) {
            return Err(Error::LabelOutOfRange {
                label: i,
                classes: self.identity_count,
            });
        }
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        for (&i, &d) in self.identities.iter().zip(&self.domains) {
            if *owner.entry(i).or_insert(d) != d {
                return Err(Error::Inconsistent(format!(
                    "identity {i} appears in more than one domain"
                )));
            }
        }
        Ok(())
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            mode: self.mode,
            samples: self.samples.select_rows(idx),
            identities: idx.iter().map(|&i| self.identities[i]).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
            domain_names: self.domain_names.clone(),
            source_domains: self.source_domains,
            identity_count: self.identity_count,
            seed: self.seed,
        }
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.domains[i])).collect();
        self.subset(&idx)
    }

    /// Samples of the training domains.
    pub fn sources(&self) -> Dataset {
        self.select(|d| d < self.source_domains)
    }

    /// Samples of the held-out domains.
    pub fn unseen(&self) -> Dataset {
        self.select(|d| d >= self.source_domains)
    }

    /// Row indices grouped by identity, identities ascending.
    pub fn by_identity(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &id) in self.identities.iter().enumerate() {
            out.entry(id).or_default().push(row);
        }
        out
    }

    /// Number of distinct domains actually present.
    pub fn present_domains(&self) -> Vec<usize> {
        let mut d = self.domains.clone();
        d.sort_unstable();
        d.dedup();
        d
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Sample layout as (channels, positions per channel).
fn layout(mode: InputMode) -> (usize, usize) {
    match mode {
        InputMode::Vector { dim } => (1, dim),
        InputMode::Image {
            channels,
            height,
            width,
        } => (channels, height * width),
    }
}

fn domain_specs(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<DomainSpec> {
    let total = cfg.train_domains + 1;
    let (channels, positions) = layout(cfg.mode);
    // Bias centres sit on a grid with spacing 1.5·style_gap, leaving a
    // margin for sampling noise in measured means; a random permutation
    // decides which domain gets which slot.
    let mut slots: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    let (lo, hi) = cfg.gain_range;
    let mix_dim = if channels == 1 { positions } else { channels };
    (0..total)
        .map(|d| {
            let centre = 1.5 * cfg.style_gap * (slots[d] as f64 - (total - 1) as f64 / 2.0);
            let gain = (0..channels)
                .map(|_| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp())
                .collect();
            let bias = (0..channels).map(|_| centre).collect();
            let mixing = (cfg.mixing > 0.0).then(|| {
                let r: Vec<f64> = (0..mix_dim * mix_dim).map(|_| normal(rng)).collect();
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut m: Vec<f64> = r.iter().map(|v| cfg.mixing * v / norm).collect();
                for i in 0..mix_dim {
                    m[i * mix_dim + i] += 1.0;
                }
                m
            });
            DomainSpec {
                id: d,
                gain,
                bias,
                mixing,
                noise: cfg.sensor_sigma,
            }
        })
        .collect()
}

fn apply_mixing(m: &[f64], z: &[f64], channels: usize, positions: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    if channels == 1 {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..positions).map(|j| m[i * positions + j] * z[j]).sum();
        }
    } else {
        for c in 0..channels {
            for p in 0..positions {
                out[c * positions + p] = (0..channels)
                    .map(|k| m[c * channels + k] * z[k * positions + p])
                    .sum();
            }
        }
    }
    out
}

/// Generate the corpus: `train_domains` source domains plus one unseen
/// domain with fresh identities and a fresh style.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs = domain_specs(cfg, &mut rng);
    let (channels, positions) = layout(cfg.mode);
    let len = cfg.mode.sample_len();
    let m = cfg.samples_per_identity;
    let mut data = Vec::new();
    let (mut identities, mut domains) = (Vec::new(), Vec::new());
    let mut next_id = 0;
    for spec in &specs {
        let count = if spec.id < cfg.train_domains {
            cfg.identities_per_domain
        } else {
            cfg.heldout_identities
        };
        for _ in 0..count {
            let proto: Vec<f64> = (0..len)
                .map(|_| cfg.prototype_spread * normal(&mut rng))
                .collect();
            for _ in 0..m {
                let z: Vec<f64> = proto
                    .iter()
                    .map(|p| p + cfg.view_sigma * normal(&mut rng))
                    .collect();
                let z = match &spec.mixing {
                    Some(mx) => apply_mixing(mx, &z, channels, positions),
                    None => z,
                };
                for c in 0..channels {
                    let g = spec.gain[c] * (cfg.gain_jitter * normal(&mut rng)).exp();
                    let b = spec.bias[c] + cfg.bias_jitter * normal(&mut rng);
                    for p in 0..positions {
                        let v = g * z[c * positions + p] + b + spec.noise * normal(&mut rng);
                        // Stored as f32; round now so the file round-trips exactly.
                        data.push(v as f32 as f64);
                    }
                }
                identities.push(next_id);
                domains.push(spec.id);
            }
            next_id += 1;
        }
    }
    let n = identities.len();
    let mut names: Vec<String> = (0..cfg.train_domains)
        .map(|d| format!("source{d}"))
        .collect();
    names.push("unseen".into());
    let ds = Dataset {
        mode: cfg.mode,
        samples: Tensor::new(vec![n, len], data)?,
        identities,
        domains,
        domain_names: names,
        source_domains: cfg.train_domains,
        identity_count: next_id,
        seed: cfg.seed,
    };
    ds.validate()?;
    Ok(ds)
}

fn mode_header(mode: InputMode) -> (String, String) {
    match mode {
        InputMode::Vector { dim } => ("vector".into(), dim.to_string()),
        InputMode::Image {
            channels,
            height,
            width,
        } => ("image".into(), format!("{channels}x{height}x{width}")),
    }
}

pub fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let (mode, dims) = mode_header(ds.mode);
    let labels = ds
        .identities
        .iter()
        .zip(&ds.domains)
        .map(|(i, d)| format!("{i}:{d}"))
        .collect::<Vec<_>>()
        .join(" ");
    let header = format!(
        "{DATASET_MAGIC}\nversion = {DATASET_VERSION}\nmode = {mode}\ndims = {dims}\nsamples = {}\ndomains = {}\n\
         domain_names = {}\nsource_domains = {}\nidentities = {}\nseed = {}\nlabels = {labels}\n",
        ds.len(),
        ds.domain_names.len(),
        ds.domain_names.join(","),
        ds.source_domains,
        ds.identity_count,
        ds.seed,
    );
    let mut out = header.into_bytes();
    out.push(0);
    for v in ds.samples.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&dataset_bytes(ds))
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes)
}

fn header_map(text: &str) -> Result<BTreeMap<&str, &str>> {
    let mut map = BTreeMap::new();
    for line in text.lines().skip(1) {
        let (k, v) = line
            .split_once(" = ")
            .or_else(|| line.strip_suffix(" =").map(|k| (k, "")))
            .ok_or_else(|| Error::Header(format!("unreadable line `{line}`")))?;
        if map.insert(k, v).is_some() {
            return Err(Error::Header(format!("duplicate field `{k}`")));
        }
    }
    Ok(map)
}

fn field<'a>(map: &BTreeMap<&str, &'a str>, key: &str) -> Result<&'a str> {
    map.get(key)
        .copied()
        .ok_or_else(|| Error::Header(format!("missing field `{key}`")))
}

fn header_num<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let v = field(map, key)?;
    v.parse()
        .map_err(|_| Error::Header(format!("field `{key}` has bad value `{v}`")))
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.starts_with(DATASET_MAGIC.as_bytes())
        || bytes.get(DATASET_MAGIC.len()) != Some(&b'\n')
    {
        let found =
            String::from_utf8_lossy(&bytes[..bytes.len().min(DATASET_MAGIC.len())]).into_owned();
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC.into(),
            found,
        });
    }
    let split = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::Header("no header terminator".into()))?;
    let text = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Header("header is not UTF-8".into()))?;
    let map = header_map(text)?;
    let version: u32 = header_num(&map, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::Header(format!("unsupported version {version}")));
    }
    let dims = field(&map, "dims")?;
    let mode = match field(&map, "mode")? {
        "vector" => InputMode::Vector {
            dim: header_num(&map, "dims")?,
        },
        "image" => {
            let d: Vec<usize> = dims
                .split('x')
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::Header(format!("bad image dims `{dims}`")))
                })
                .collect::<Result<_>>()?;
            let [channels, height, width] = d[..] else {
                return Err(Error::Header(format!(
                    "image dims need three values, got `{dims}`"
                )));
            };
            InputMode::Image {
                channels,
                height,
                width,
            }
        }
        other => return Err(Error::Header(format!("unknown mode `{other}`"))),
    };
    let domain_count: usize = header_num(&map, "domains")?;
    if domain_count == 0 {
        return Err(Error::Invalid("domain count must be positive".into()));
    }
    let names: Vec<String> = field(&map, "domain_names")?
        .split(',')
        .map(str::to_string)
        .collect();
    if names.len() != domain_count {
        return Err(Error::Inconsistent(format!(
            "{domain_count} domains but {} names",
            names.len()
        )));
    }
    let n: usize = header_num(&map, "samples")?;
    let labels = field(&map, "labels")?;
    let mut identities = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    for tok in labels.split_whitespace() {
        let (i, d) = tok
            .split_once(':')
            .and_then(|(i, d)| Some((i.parse().ok()?, d.parse().ok()?)))
            .ok_or_else(|| Error::Header(format!("bad label entry `{tok}`")))?;
        identities.push(i);
        domains.push(d);
    }
    if identities.len() != n {
        return Err(Error::Inconsistent(format!(
            "header declares {n} samples but lists {} labels",
            identities.len()
        )));
    }
    let len = mode.sample_len();
    let payload = &bytes[split + 1..];
    let expected = n * len * 4;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Inconsistent(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let samples = Tensor::new(vec![n, len], data)?;
    let ds = Dataset {
        mode,
        samples,
        identities,
        domains,
        domain_names: names,
        source_domains: header_num(&map, "source_domains")?,
        identity_count: header_num(&map, "identities")?,
        seed: header_num(&map, "seed")?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Single-shot split: one probe and one gallery row per identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSplit {
    pub probe: Vec<usize>,
    pub gallery: Vec<usize>,
}

pub fn make_eval_split(ds: &Dataset, trial_seed: u64) -> Result<EvalSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let mut split = EvalSplit {
        probe: Vec::new(),
        gallery: Vec::new(),
    };
    for (id, rows) in ds.by_identity() {
        if rows.len() < 2 {
            return Err(Error::Invalid(format!(
                "identity {id} has {} sample(s), need at least 2",
                rows.len()
            )));
        }
        let pick = sample(&mut rng, rows.len(), 2);
        split.probe.push(rows[pick.index(0)]);
        split.gallery.push(rows[pick.index(1)]);
    }
    if split.probe.is_empty() {
        return Err(Error::Invalid("no identities to split".into()));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            identities_per_domain: 5,
            heldout_identities: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_label_ranges() {
        let cfg = SynthConfig {
            heldout_identities: 60,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let src = ds.sources();
        assert_eq!(src.len(), 3 * 20 * 4);
        assert!(src.identities.iter().all(|&i| i < 60));
        assert!(src.domains.iter().all(|&d| d < 3));
        let un = ds.unseen();
        assert_eq!(un.len(), 60 * 4);
        assert_eq!(un.by_identity().len(), 60);
        assert!(un.identities.iter().all(|&i| (60..120).contains(&i)));
    }

    #[test]
    fn identities_are_disjoint_across_domains() {
        generate_synthetic(&small()).unwrap().validate().unwrap();
    }

    #[test]
    fn domain_means_respect_style_gap() {
        for (seed, mode) in [
            (0, InputMode::Vector { dim: 32 }),
            (
                5,
                InputMode::Image {
                    channels: 2,
                    height: 3,
                    width: 3,
                },
            ),
        ] {
            let cfg = SynthConfig {
                seed,
                mode,
                ..SynthConfig::default()
            };
            let ds = generate_synthetic(&cfg).unwrap();
            let (channels, positions) = layout(mode);
            let mut sums = vec![vec![0.0; channels]; 4];
            let mut counts = [0usize; 4];
            for r in 0..ds.len() {
                let d = ds.domains[r];
                counts[d] += 1;
                let row = ds.samples.row(r);
                for (c, s) in sums[d].iter_mut().enumerate() {
                    *s += row[c * positions..(c + 1) * positions].iter().sum::<f64>()
                        / positions as f64;
                }
            }
            for a in 0..4 {
                for b in a + 1..4 {
                    for (c, (sa, sb)) in sums[a].iter().zip(&sums[b]).enumerate() {
                        let gap = (sa / counts[a] as f64 - sb / counts[b] as f64).abs();
                        assert!(gap >= cfg.style_gap, "domains {a},{b} channel {c}: {gap}");
                    }
                }
            }
        }
    }

    #[test]
    fn too_few_views_rejected() {
        let cfg = SynthConfig {
            samples_per_identity: 1,
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn ill_conditioned_mixing_rejected() {
        assert!(SynthConfig {
            mixing: 0.99,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            mixing: 0.5,
            ..small()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = dataset_bytes(&generate_synthetic(&small()).unwrap());
        let b = dataset_bytes(&generate_synthetic(&small()).unwrap());
        assert_eq!(a, b);
        let c = dataset_bytes(&generate_synthetic(&SynthConfig { seed: 1, ..small() }).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn round_trip_is_identity() {
        for cfg in [
            small(),
            SynthConfig {
                mode: InputMode::Image {
                    channels: 2,
                    height: 3,
                    width: 3,
                },
                mixing: 0.3,
                ..small()
            },
        ] {
            let ds = generate_synthetic(&cfg).unwrap();
            let bytes = dataset_bytes(&ds);
            let back = parse_dataset(&bytes).unwrap();
            assert_eq!(back, ds);
            assert_eq!(dataset_bytes(&back), bytes);
        }
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let bytes = dataset_bytes(&generate_synthetic(&small()).unwrap());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(parse_dataset(&magic), Err(Error::BadMagic { .. })));
        let short = &bytes[..bytes.len() - 4];
        match parse_dataset(short) {
            Err(Error::Truncated { expected, actual }) => assert_eq!(expected, actual + 4),
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(parse_dataset(&long), Err(Error::Inconsistent(_))));
        let text = String::from_utf8_lossy(&bytes).replacen("domains = 4\n", "domains = 0\n", 1);
        assert!(matches!(
            parse_dataset(text.as_bytes()),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn split_is_single_shot_and_disjoint() {
        let cfg = SynthConfig {
            heldout_identities: 60,
            ..small()
        };
        let un = generate_synthetic(&cfg).unwrap().unseen();
        let s = make_eval_split(&un, 3).unwrap();
        assert_eq!((s.probe.len(), s.gallery.len()), (60, 60));
        assert!(s.probe.iter().all(|p| !s.gallery.contains(p)));
        for (p, g) in s.probe.iter().zip(&s.gallery) {
            assert_eq!(un.identities[*p], un.identities[*g]);
        }
        assert_eq!(make_eval_split(&un, 3).unwrap(), s);
        assert!((4..14).any(|t| make_eval_split(&un, t).unwrap() != s));
    }

    #[test]
    fn singleton_identity_cannot_be_split() {
        let ds = generate_synthetic(&small()).unwrap();
        let one = ds.subset(&[0, 4]);
        assert!(make_eval_split(&one, 0).is_err());
    }
}
