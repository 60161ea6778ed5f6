//! The trainable sub-networks: feature extractor with early instance
//! normalization, encoder, decoder, domain discriminator and identity head.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::layers::{DEFAULT_BN_MOMENTUM, DEFAULT_NORM_EPS};
use crate::diffcore::{
    LayerSpec, Mode, ParameterSet, RunningStats, Sequential, StatUpdate, Tape, Var,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "MMFA-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Vector {
        dim: usize,
    },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputMode {
    /// Number of scalars per sample.
    pub fn sample_len(&self) -> usize {
        match *self {
            InputMode::Vector { dim } => dim,
            InputMode::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    /// Shape of a batch of `n` samples.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        match *self {
            InputMode::Vector { dim } => vec![n, dim],
            InputMode::Image {
                channels,
                height,
                width,
            } => vec![n, channels, height, width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input: InputMode,
    /// Backbone block widths (dense outputs or conv channels). The last
    /// width is the feature dimension.
    pub widths: Vec<usize>,
    /// Leading blocks that use instance normalization; the rest use batch
    /// normalization.
    pub in_blocks: usize,
    pub hidden: usize,
    pub identities: usize,
    pub domains: usize,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: InputMode::Vector { dim: 32 },
            widths: vec![64, 64, 64],
            in_blocks: 2,
            hidden: 64,
            identities: 60,
            domains: 3,
            norm_eps: DEFAULT_NORM_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!(
                "backbone widths must be non-empty and positive, got {:?}",
                self.widths
            ));
        }
        if self.input.sample_len() == 0 {
            return bad("input dimensions must be positive".into());
        }
        if let InputMode::Image { channels, .. } = self.input {
            if channels > crate::diffcore::layers::MAX_CONV_CHANNELS
                || self
                    .widths
                    .iter()
                    .any(|&w| w > crate::diffcore::layers::MAX_CONV_CHANNELS)
            {
                return bad(format!(
                    "image mode supports at most {} channels per layer",
                    crate::diffcore::layers::MAX_CONV_CHANNELS
                ));
            }
        }
        if self.in_blocks > self.widths.len() {
            return bad(format!(
                "in_blocks {} exceeds {} backbone blocks",
                self.in_blocks,
                self.widths.len()
            ));
        }
        if self.hidden == 0 || self.hidden > self.feature_dim() {
            return bad(format!(
                "hidden dimension {} must be in 1..={} (the feature dimension)",
                self.hidden,
                self.feature_dim()
            ));
        }
        if self.identities < 2 {
            return bad(format!(
                "need at least 2 identities, got {}",
                self.identities
            ));
        }
        if self.domains < 2 {
            return bad(format!("need at least 2 domains, got {}", self.domains));
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum {} outside [0, 1)", self.bn_momentum));
        }
        Ok(())
    }
}

/// The five parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Part {
    Extractor,
    Encoder,
    Decoder,
    Discriminator,
    Classifier,
}

impl Part {
    pub const ALL: [Part; 5] = [
        Part::Extractor,
        Part::Encoder,
        Part::Decoder,
        Part::Discriminator,
        Part::Classifier,
    ];

    pub fn prefix(&self) -> &'static str {
        match self {
            Part::Extractor => "extractor",
            Part::Encoder => "encoder",
            Part::Decoder => "decoder",
            Part::Discriminator => "discriminator",
            Part::Classifier => "classifier",
        }
    }

    pub fn of(name: &str) -> Option<Part> {
        Part::ALL
            .into_iter()
            .find(|p| name.split('.').next() == Some(p.prefix()))
    }
}

/// Layer stacks derived from a [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Networks {
    pub extractor: Sequential,
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub discriminator: Sequential,
    pub classifier: Sequential,
}

impl Networks {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let eps = cfg.norm_eps;
        let bn = |channels| LayerSpec::BatchNorm {
            channels,
            eps,
            momentum: cfg.bn_momentum,
        };
        let mut layers = Vec::new();
        if cfg.in_blocks > 0 {
            // Instance-normalize the raw input so per-sample channel-wise
            // affine restyling never reaches the first block.
            let features = match cfg.input {
                InputMode::Vector { dim } => dim,
                InputMode::Image { channels, .. } => channels,
            };
            layers.push(LayerSpec::InstanceNorm {
                features,
                eps,
                affine: false,
            });
        }
        let mut prev = match cfg.input {
            InputMode::Vector { dim } => dim,
            InputMode::Image { channels, .. } => channels,
        };
        for (b, &w) in cfg.widths.iter().enumerate() {
            layers.push(match cfg.input {
                InputMode::Vector { .. } => LayerSpec::Dense {
                    inputs: prev,
                    outputs: w,
                    bias: false,
                },
                InputMode::Image { .. } => LayerSpec::Conv2d {
                    in_channels: prev,
                    out_channels: w,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: false,
                },
            });
            layers.push(if b < cfg.in_blocks {
                LayerSpec::InstanceNorm {
                    features: w,
                    eps,
                    affine: true,
                }
            } else {
                bn(w)
            });
            layers.push(LayerSpec::Relu);
            prev = w;
        }
        if matches!(cfg.input, InputMode::Image { .. }) {
            layers.push(LayerSpec::GlobalAvgPool);
        }
        layers.push(bn(prev));
        let f = cfg.feature_dim();
        let h = cfg.hidden;
        let head = |out| {
            vec![
                LayerSpec::Dense {
                    inputs: h,
                    outputs: h,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: h,
                    outputs: out,
                    bias: true,
                },
            ]
        };
        Ok(Self {
            extractor: Sequential::new(Part::Extractor.prefix(), layers)?,
            encoder: Sequential::new(
                Part::Encoder.prefix(),
                vec![
                    LayerSpec::Dense {
                        inputs: f,
                        outputs: h,
                        bias: true,
                    },
                    LayerSpec::Relu,
                ],
            )?,
            decoder: Sequential::new(
                Part::Decoder.prefix(),
                vec![LayerSpec::Dense {
                    inputs: h,
                    outputs: f,
                    bias: true,
                }],
            )?,
            discriminator: Sequential::new(Part::Discriminator.prefix(), head(cfg.domains))?,
            classifier: Sequential::new(Part::Classifier.prefix(), head(cfg.identities))?,
        })
    }

    pub fn part(&self, p: Part) -> &Sequential {
        match p {
            Part::Extractor => &self.extractor,
            Part::Encoder => &self.encoder,
            Part::Decoder => &self.decoder,
            Part::Discriminator => &self.discriminator,
            Part::Classifier => &self.classifier,
        }
    }
}

/// Configuration plus every parameter of every sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

/// Deterministic seeded initialization; each part draws from its own
/// stream so adding a head never perturbs the others.
pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    let nets = Networks::build(config)?;
    let mut params = ParameterSet::new();
    for (i, p) in Part::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        params.extend(nets.part(p).init(&mut rng));
    }
    Ok(ModelState {
        config: config.clone(),
        params,
    })
}

impl ModelState {
    pub fn networks(&self) -> Result<Networks> {
        Networks::build(&self.config)
    }

    /// Parameters of the given parts only.
    pub fn part_params(&self, parts: &[Part]) -> ParameterSet {
        let mut out = ParameterSet::new();
        for p in parts {
            out.extend(self.params.filtered(&format!("{}.", p.prefix())));
        }
        out
    }

    /// Reshape flat samples `[n, sample_len]` to the model's input layout.
    pub fn input_batch(&self, samples: &Tensor) -> Result<Tensor> {
        let (n, len) = samples.ensure_matrix("samples")?;
        let want = self.config.input.sample_len();
        if len != want {
            return Err(Error::Shape(format!(
                "samples have {len} values, model expects {want}"
            )));
        }
        samples.reshape(self.config.input.batch_shape(n))
    }

    /// Record one part on `tape`.
    pub fn record(
        &self,
        nets: &Networks,
        part: Part,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<(Var, Vec<StatUpdate>)> {
        nets.part(part)
            .record(tape, &self.params, x, mode, trainable)
    }

    fn apply(&self, part: Part, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<StatUpdate>)> {
        self.networks()?.part(part).apply(&self.params, x, mode)
    }

    /// Backbone features `X` for flat samples.
    pub fn extract_features(
        &self,
        samples: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Vec<StatUpdate>)> {
        let x = self.input_batch(samples)?;
        self.apply(Part::Extractor, &x, mode)
    }

    /// Hidden codes `H = Q(X)`.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.apply(Part::Encoder, features, Mode::Eval)?.0)
    }

    pub fn decode(&self, codes: &Tensor) -> Result<Tensor> {
        Ok(self.apply(Part::Decoder, codes, Mode::Eval)?.0)
    }

    pub fn discriminate(&self, codes: &Tensor) -> Result<Tensor> {
        Ok(self.apply(Part::Discriminator, codes, Mode::Eval)?.0)
    }

    pub fn classify_identity(&self, codes: &Tensor) -> Result<Tensor> {
        Ok(self.apply(Part::Classifier, codes, Mode::Eval)?.0)
    }

    /// Eval-mode retrieval representation: codes of flat samples.
    pub fn embed(&self, samples: &Tensor) -> Result<Tensor> {
        let (x, _) = self.extract_features(samples, Mode::Eval)?;
        self.encode(&x)
    }

    /// Order-sensitive digest of the parameters of `parts`, used to verify
    /// that frozen groups are untouched by an update.
    pub fn digest(&self, parts: &[Part]) -> u64 {
        // FNV-1a over names and raw value bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (name, t) in self.params.iter() {
            if Part::of(name).is_some_and(|p| parts.contains(&p)) {
                eat(name.as_bytes());
                for v in t.data() {
                    eat(&v.to_bits().to_le_bytes());
                }
            }
        }
        for (name, s) in self.params.running_iter() {
            if Part::of(name).is_some_and(|p| parts.contains(&p)) {
                eat(name.as_bytes());
                for v in s.mean.iter().chain(&s.var) {
                    eat(&v.to_bits().to_le_bytes());
                }
            }
        }
        h
    }
}

fn input_pairs(input: &InputMode) -> Vec<(String, String)> {
    match *input {
        InputMode::Vector { dim } => vec![
            ("model.input".into(), "vector".into()),
            ("model.input_dim".into(), dim.to_string()),
        ],
        InputMode::Image {
            channels,
            height,
            width,
        } => vec![
            ("model.input".into(), "image".into()),
            ("model.channels".into(), channels.to_string()),
            ("model.height".into(), height.to_string()),
            ("model.width".into(), width.to_string()),
        ],
    }
}

impl ModelConfig {
    /// `model.*` key/value pairs; [`ModelConfig::from_pairs`] inverts it.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = input_pairs(&self.input);
        let widths = self
            .widths
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        out.extend([
            ("model.widths".into(), widths),
            ("model.in_blocks".into(), self.in_blocks.to_string()),
            ("model.hidden".into(), self.hidden.to_string()),
            ("model.identities".into(), self.identities.to_string()),
            ("model.domains".into(), self.domains.to_string()),
            ("model.norm_eps".into(), self.norm_eps.to_string()),
            ("model.bn_momentum".into(), self.bn_momentum.to_string()),
            ("model.seed".into(), self.seed.to_string()),
        ]);
        out
    }

    /// Apply one `model.*` key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::config::{parse, parse_list};
        match key {
            "model.input" => {
                self.input = match value {
                    "vector" => InputMode::Vector {
                        dim: self.input.sample_len(),
                    },
                    "image" => match self.input {
                        img @ InputMode::Image { .. } => img,
                        InputMode::Vector { .. } => InputMode::Image {
                            channels: 3,
                            height: 6,
                            width: 6,
                        },
                    },
                    other => {
                        return Err(Error::Config(format!(
                            "model.input must be vector or image, got `{other}`"
                        )))
                    }
                }
            }
            "model.input_dim" => match &mut self.input {
                InputMode::Vector { dim } => *dim = parse(key, value)?,
                InputMode::Image { .. } => {
                    return Err(Error::Config(
                        "model.input_dim needs model.input = vector".into(),
                    ))
                }
            },
            "model.channels" | "model.height" | "model.width" => match &mut self.input {
                InputMode::Image {
                    channels,
                    height,
                    width,
                } => {
                    let slot = match key {
                        "model.channels" => channels,
                        "model.height" => height,
                        _ => width,
                    };
                    *slot = parse(key, value)?;
                }
                InputMode::Vector { .. } => {
                    return Err(Error::Config(format!("{key} needs model.input = image")))
                }
            },
            "model.widths" => self.widths = parse_list(key, value)?,
            "model.in_blocks" => self.in_blocks = parse(key, value)?,
            "model.hidden" => self.hidden = parse(key, value)?,
            "model.identities" => self.identities = parse(key, value)?,
            "model.domains" => self.domains = parse(key, value)?,
            "model.norm_eps" => self.norm_eps = parse(key, value)?,
            "model.bn_momentum" => self.bn_momentum = parse(key, value)?,
            "model.seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Serialize the checkpoint: text header with the configuration and the
/// tensor manifest, then the raw little-endian `f64` payload in manifest
/// order (tensors, then running means and variances).
pub fn checkpoint_bytes(state: &ModelState) -> Vec<u8> {
    let mut header = format!(
        "{CHECKPOINT_MAGIC}\nversion = {CHECKPOINT_VERSION}\nseed = {}\n",
        state.config.seed
    );
    for (k, v) in state.config.to_pairs() {
        header.push_str(&format!("{k} = {v}\n"));
    }
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in state.params.iter() {
        let dims = t
            .shape()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        header.push_str(&format!("tensor {name} {dims}\n"));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (name, s) in state.params.running_iter() {
        header.push_str(&format!("running {name} {} {}\n", s.mean.len(), s.momentum));
        for v in s.mean.iter().chain(&s.var) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend(payload);
    out
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(state))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let magic_line = format!("{CHECKPOINT_MAGIC}\n");
    if !bytes.starts_with(magic_line.as_bytes()) {
        let found =
            String::from_utf8_lossy(&bytes[..bytes.len().min(CHECKPOINT_MAGIC.len())]).into_owned();
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC.into(),
            found,
        });
    }
    let end = b"\nend\n";
    let header_end = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| Error::Header("missing `end` line".into()))?
        + end.len();
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Header("header is not UTF-8".into()))?;
    let payload = &bytes[header_end..];

    let mut pairs: BTreeMap<String, String> = BTreeMap::new();
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    let mut running: Vec<(String, usize, f64)> = Vec::new();
    for line in header.lines().skip(1) {
        if line == "end" {
            break;
        }
        let bad = || Error::Header(format!("malformed line `{line}`"));
        if let Some(rest) = line.strip_prefix("tensor ") {
            let (name, dims) = rest.rsplit_once(' ').ok_or_else(bad)?;
            let shape = dims
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| bad())?;
            tensors.push((name.to_string(), shape));
        } else if let Some(rest) = line.strip_prefix("running ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, channels, momentum] = parts.as_slice() else {
                return Err(bad());
            };
            running.push((
                name.to_string(),
                channels.parse().map_err(|_| bad())?,
                momentum.parse().map_err(|_| bad())?,
            ));
        } else {
            let (k, v) = line.split_once(" = ").ok_or_else(bad)?;
            pairs.insert(k.to_string(), v.to_string());
        }
    }
    let version = pairs
        .remove("version")
        .ok_or_else(|| Error::Header("missing version".into()))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Header(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let seed = pairs
        .remove("seed")
        .ok_or_else(|| Error::Header("missing seed".into()))?;
    let config = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    if seed != config.seed.to_string() {
        return Err(Error::Inconsistent(format!(
            "seed {seed} disagrees with model.seed {}",
            config.seed
        )));
    }

    let expected_floats: usize = tensors
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum::<usize>()
        + running.iter().map(|(_, c, _)| 2 * c).sum::<usize>();
    let expected = expected_floats * 8;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Inconsistent(format!(
            "{} trailing payload bytes",
            payload.len() - expected
        )));
    }

    let mut floats = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let reference = init_model(&config)?;
    let mut params = ParameterSet::new();
    for (name, shape) in tensors {
        let want = reference.params.get(&name).map_err(|_| {
            Error::Inconsistent(format!("tensor `{name}` not part of the configured model"))
        })?;
        if want.shape() != shape.as_slice() {
            return Err(Error::Inconsistent(format!(
                "tensor `{name}` has shape {shape:?}, config implies {:?}",
                want.shape()
            )));
        }
        let len = shape.iter().product();
        let t = Tensor::new(shape, floats.by_ref().take(len).collect())?;
        params.insert(name, t);
    }
    for (name, c, momentum) in running {
        let mean = floats.by_ref().take(c).collect();
        let var = floats.by_ref().take(c).collect();
        params.set_running(
            name,
            RunningStats {
                mean,
                var,
                momentum,
            },
        );
    }
    let state = ModelState { config, params };
    if state.params.scalar_count() != reference.params.scalar_count()
        || state.params.running_iter().count() != reference.params.running_iter().count()
    {
        return Err(Error::Inconsistent(
            "checkpoint does not cover every model parameter".into(),
        ));
    }
    Ok(state)
}
