//! Desk-scale adapter training on synthetic identity clusters.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::loss::{reid_loss, sigmoid, LossConfig, LossError, NegativeMining, ReidBatch, ReidIdentity};
use crate::mask::BinaryMask;
use crate::metrics::{MetricsReport, DEFAULT_MIN_MASK_PIXELS};
use crate::model::{
    gallery_name, AnnotationStore, BBox, CropRef, IdentityId, ImageId, InstanceAnnotation, ModelError, QueryId,
    QueryRecord, SplitManifest,
};
use crate::retrieval::{run_protocol, DecisionPolicy, EmbeddingTable, RetrievalError};
use crate::rng::{SplitMix64, RNG_ALGORITHM};

pub const PARAMS_MAGIC: [u8; 4] = *b"RFAP";
pub const PARAMS_VERSION: u16 = 1;
pub const MIN_CENTER_ANGLE_DEG: f64 = 10.0;
pub const MAX_CENTER_ATTEMPTS: usize = 10_000;
pub const DEFAULT_P: usize = 3;
pub const DEFAULT_K: usize = 3;
pub const TOY_IMAGE_SIDE: u32 = 16;
pub const TOY_PERSON_SIDE: u32 = 10;
const PROBE_BATCHES: usize = 8;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("could not place {identities} centers {MIN_CENTER_ANGLE_DEG} degrees apart in {dim} dimensions after {attempts} draws")]
    Rejection { identities: usize, dim: usize, attempts: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("params file: {0}")]
    Params(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Rectified,
    /// `z * sigmoid(z)`.
    SmoothGated,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Rectified => z.max(0.0),
            Activation::SmoothGated => z * sigmoid(z),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Rectified => f64::from(u8::from(z > 0.0)),
            Activation::SmoothGated => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Rectified => 1,
            Activation::SmoothGated => 2,
        }
    }

    fn from_code(b: u8) -> Option<Self> {
        [Activation::Identity, Activation::Rectified, Activation::SmoothGated].into_iter().find(|a| a.code() == b)
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Rectified => "rectified",
            Activation::SmoothGated => "smooth-gated",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = ToyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Activation::Identity),
            "rectified" => Ok(Activation::Rectified),
            "smooth-gated" => Ok(Activation::SmoothGated),
            _ => Err(ToyError::InvalidConfig(format!("unknown activation {s:?}"))),
        }
    }
}

/// `y = W2 act(W1 x + b1) + b2`; weights row-major, `W1` is `hidden x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCache {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl AdapterParams {
    /// Weights drawn from `N(0, 1/fan_in)`, zero biases.
    pub fn init(d_in: usize, hidden: usize, d_out: usize, activation: Activation, rng: &mut SplitMix64) -> Result<Self, ToyError> {
        if d_in == 0 || hidden == 0 || d_out == 0 {
            return Err(ToyError::InvalidConfig("adapter dimensions must be >= 1".into()));
        }
        let s1 = (1.0 / d_in as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let w1 = (0..hidden * d_in).map(|_| rng.normal() * s1).collect();
        let w2 = (0..d_out * hidden).map(|_| rng.normal() * s2).collect();
        Ok(Self { d_in, hidden, d_out, w1, b1: vec![0.0; hidden], w2, b2: vec![0.0; d_out], activation })
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let shapes = [
            (self.w1.len(), self.hidden * self.d_in),
            (self.b1.len(), self.hidden),
            (self.w2.len(), self.d_out * self.hidden),
            (self.b2.len(), self.d_out),
        ];
        for (found, expected) in shapes {
            if found != expected {
                return Err(ToyError::Dimension { expected, found });
            }
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(ToyError::InvalidConfig("non-finite adapter parameter".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.hidden * self.d_in + self.hidden + self.d_out * self.hidden + self.d_out
    }

    /// `w1, b1, w2, b2` concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, ToyError> {
        if flat.len() != self.num_params() {
            return Err(ToyError::Dimension { expected: self.num_params(), found: flat.len() });
        }
        let (w1, rest) = flat.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.w2.len());
        Ok(Self { w1: w1.to_vec(), b1: b1.to_vec(), w2: w2.to_vec(), b2: b2.to_vec(), ..self.clone() })
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, AdapterCache), ToyError> {
        if x.len() != self.d_in {
            return Err(ToyError::Dimension { expected: self.d_in, found: x.len() });
        }
        let pre: Vec<f64> = (0..self.hidden)
            .map(|h| self.b1[h] + self.w1[h * self.d_in..(h + 1) * self.d_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|&z| self.activation.apply(z)).collect();
        let y = (0..self.d_out)
            .map(|o| {
                self.b2[o] + self.w2[o * self.hidden..(o + 1) * self.hidden].iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        Ok((y, AdapterCache { input: x.to_vec(), pre, hidden }))
    }

    /// Flat parameter gradient (layout of [`to_flat`](Self::to_flat)) and input gradient.
    pub fn backward(&self, cache: &AdapterCache, grad_y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = vec![0.0; self.num_params()];
        let (g_w1, rest) = g.split_at_mut(self.w1.len());
        let (g_b1, rest) = rest.split_at_mut(self.hidden);
        let (g_w2, g_b2) = rest.split_at_mut(self.w2.len());
        let mut g_hidden = vec![0.0; self.hidden];
        for o in 0..self.d_out {
            g_b2[o] = grad_y[o];
            for h in 0..self.hidden {
                g_w2[o * self.hidden + h] = grad_y[o] * cache.hidden[h];
                g_hidden[h] += grad_y[o] * self.w2[o * self.hidden + h];
            }
        }
        let mut g_x = vec![0.0; self.d_in];
        for h in 0..self.hidden {
            let g_pre = g_hidden[h] * self.activation.derivative(cache.pre[h]);
            g_b1[h] = g_pre;
            for i in 0..self.d_in {
                g_w1[h * self.d_in + i] = g_pre * cache.input[i];
                g_x[i] += g_pre * self.w1[h * self.d_in + i];
            }
        }
        (g, g_x)
    }

    fn step(&mut self, delta: &[f64]) {
        let mut flat = self.to_flat();
        flat.iter_mut().zip(delta).for_each(|(p, d)| *p -= d);
        *self = self.with_flat(&flat).expect("same length");
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub raw_dim: usize,
    /// Norm of each identity center.
    pub cluster_spread: f64,
    /// Per-coordinate noise standard deviation; 0 gives exact copies of the center.
    pub noise_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_identities: 16, samples_per_identity: 20, raw_dim: 32, cluster_spread: 1.0, noise_spread: 0.05, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.num_identities == 0 || self.samples_per_identity == 0 || self.raw_dim == 0 {
            return Err(ToyError::InvalidConfig("identity, sample and dimension counts must be >= 1".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(ToyError::InvalidConfig(format!("cluster_spread must be > 0, got {}", self.cluster_spread)));
        }
        if !(self.noise_spread >= 0.0 && self.noise_spread.is_finite()) {
            return Err(ToyError::InvalidConfig(format!("noise_spread must be >= 0, got {}", self.noise_spread)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub raw_dim: usize,
    pub centers: Vec<Vec<f64>>,
    /// `samples[identity][j]`.
    pub samples: Vec<Vec<Vec<f64>>>,
}

pub fn synth_identities(cfg: &SynthConfig) -> Result<Dataset, ToyError> {
    cfg.validate()?;
    let max_cos = MIN_CENTER_ANGLE_DEG.to_radians().cos();
    let mut rng = SplitMix64::derive(cfg.seed, "toy/centers");
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_identities);
    let mut attempts = 0;
    while units.len() < cfg.num_identities {
        if attempts == MAX_CENTER_ATTEMPTS {
            return Err(ToyError::Rejection { identities: cfg.num_identities, dim: cfg.raw_dim, attempts });
        }
        attempts += 1;
        let v: Vec<f64> = (0..cfg.raw_dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
        if units.iter().all(|c| c.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() < max_cos) {
            units.push(u);
        }
    }
    let centers: Vec<Vec<f64>> = units.iter().map(|u| u.iter().map(|x| x * cfg.cluster_spread).collect()).collect();
    let samples = centers
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = SplitMix64::derive(cfg.seed, &format!("toy/samples/{i}"));
            (0..cfg.samples_per_identity)
                .map(|_| c.iter().map(|x| x + cfg.noise_spread * rng.normal()).collect())
                .collect()
        })
        .collect();
    Ok(Dataset { raw_dim: cfg.raw_dim, centers, samples })
}

/// Sample indices for one batch: per identity, the query first, then positives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub identities: Vec<(usize, Vec<usize>)>,
}

/// `P` identities without replacement among those with at least `K` usable
/// samples, then `K` samples each without replacement.
pub fn sample_batch(pool: &[Vec<usize>], p: usize, k: usize, rng: &mut SplitMix64) -> Result<BatchPlan, ToyError> {
    if p < 2 || k < 2 {
        return Err(ToyError::InvalidConfig(format!("need P >= 2 and K >= 2, got P={p}, K={k}")));
    }
    let eligible: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].len() >= k).collect();
    if eligible.len() < p {
        return Err(ToyError::InsufficientData(format!(
            "{} identities have >= {k} samples, batch needs {p}",
            eligible.len()
        )));
    }
    let identities = rng
        .sample_indices(eligible.len(), p)
        .into_iter()
        .map(|e| {
            let id = eligible[e];
            let picks = rng.sample_indices(pool[id].len(), k).into_iter().map(|j| pool[id][j]).collect();
            (id, picks)
        })
        .collect();
    Ok(BatchPlan { identities })
}

/// Loss and flat gradients for both adapters on one batch. Queries run through
/// `phi_r`; positives and negatives through `phi_i`. Negatives of an identity
/// are every sampled item of the other identities.
pub fn batch_loss(
    plan: &BatchPlan,
    data: &Dataset,
    phi_r: &AdapterParams,
    phi_i: &AdapterParams,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>), ToyError> {
    let mut q_out = Vec::new();
    let mut g_out: Vec<Vec<(Vec<f64>, AdapterCache)>> = Vec::new();
    for (id, picks) in &plan.identities {
        q_out.push(phi_r.forward(&data.samples[*id][picks[0]])?);
        g_out.push(picks.iter().map(|&j| phi_i.forward(&data.samples[*id][j])).collect::<Result<_, _>>()?);
    }
    let identities = (0..plan.identities.len())
        .map(|a| ReidIdentity {
            query: q_out[a].0.clone(),
            positives: g_out[a][1..].iter().map(|(y, _)| y.clone()).collect(),
            negatives: (0..g_out.len()).filter(|&b| b != a).flat_map(|b| g_out[b].iter().map(|(y, _)| y.clone())).collect(),
        })
        .collect();
    let r = reid_loss(&ReidBatch { identities }, cfg)?;

    let zero = || vec![0.0; phi_i.d_out];
    let mut g_gallery: Vec<Vec<Vec<f64>>> = g_out.iter().map(|g| vec![zero(); g.len()]).collect();
    let mut grad_r = vec![0.0; phi_r.num_params()];
    for (a, gi) in r.grads.identities.iter().enumerate() {
        let (g, _) = phi_r.backward(&q_out[a].1, &gi.query);
        add(&mut grad_r, &g);
        for (j, gp) in gi.positives.iter().enumerate() {
            add(&mut g_gallery[a][j + 1], gp);
        }
        let mut negs = gi.negatives.iter();
        for b in (0..g_out.len()).filter(|&b| b != a) {
            for slot in g_gallery[b].iter_mut().take(g_out[b].len()) {
                add(slot, negs.next().expect("negative count"));
            }
        }
    }
    let mut grad_i = vec![0.0; phi_i.num_params()];
    for (a, outs) in g_out.iter().enumerate() {
        for (j, (_, cache)) in outs.iter().enumerate() {
            add(&mut grad_i, &phi_i.backward(cache, &g_gallery[a][j]).0);
        }
    }
    Ok((r.value, grad_r, grad_i))
}

fn add(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub p: usize,
    pub k: usize,
    pub steps: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub seed: u64,
    pub hidden: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Start both adapters from the same draw.
    pub shared_init: bool,
    /// Trailing samples per identity withheld from training for evaluation.
    pub heldout_per_identity: usize,
    pub gallery_size: usize,
    pub eval_threshold: f64,
    pub loss: LossConfig,
    pub data: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: DEFAULT_P,
            k: DEFAULT_K,
            steps: 500,
            step_size: 0.1,
            momentum: 0.0,
            seed: 0,
            hidden: 64,
            out_dim: 16,
            activation: Activation::SmoothGated,
            shared_init: false,
            heldout_per_identity: 5,
            gallery_size: 50,
            eval_threshold: 1.0,
            loss: LossConfig::default(),
            data: SynthConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        self.data.validate()?;
        self.loss.validate()?;
        if self.p < 2 || self.k < 2 {
            return Err(ToyError::InvalidConfig(format!("need P >= 2 and K >= 2, got P={}, K={}", self.p, self.k)));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(ToyError::InvalidConfig(format!("step_size must be >= 0, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ToyError::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.hidden == 0 || self.out_dim == 0 {
            return Err(ToyError::InvalidConfig("hidden and out_dim must be >= 1".into()));
        }
        if self.heldout_per_identity < 2 || self.heldout_per_identity >= self.data.samples_per_identity {
            return Err(ToyError::InvalidConfig(format!(
                "heldout_per_identity must be in [2, samples_per_identity), got {}",
                self.heldout_per_identity
            )));
        }
        if self.data.samples_per_identity - self.heldout_per_identity < self.k {
            return Err(ToyError::InvalidConfig("fewer training samples per identity than K".into()));
        }
        DecisionPolicy::threshold(self.eval_threshold)?;
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. `seed` also seeds the
    /// data unless `data_seed` is given.
    pub fn parse(text: &str) -> Result<Self, ToyError> {
        let mut cfg = Self::default();
        let mut data_seed = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ToyError::ConfigParse { line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| err(format!("{key}: {e}"));
            macro_rules! set {
                ($field:expr) => {
                    $field = value.parse().map_err(|e| bad(&e))?
                };
            }
            match key {
                "p" => set!(cfg.p),
                "k" => set!(cfg.k),
                "steps" => set!(cfg.steps),
                "step_size" => set!(cfg.step_size),
                "momentum" => set!(cfg.momentum),
                "seed" => set!(cfg.seed),
                "data_seed" => data_seed = Some(value.parse::<u64>().map_err(|e| bad(&e))?),
                "hidden" => set!(cfg.hidden),
                "out_dim" => set!(cfg.out_dim),
                "activation" => set!(cfg.activation),
                "shared_init" => set!(cfg.shared_init),
                "heldout_per_identity" => set!(cfg.heldout_per_identity),
                "gallery_size" => set!(cfg.gallery_size),
                "eval_threshold" => set!(cfg.eval_threshold),
                "tau" => set!(cfg.loss.tau),
                "lambda_reid" => set!(cfg.loss.lambda_reid),
                "negative_mining" => set!(cfg.loss.negative_mining),
                "identities" => set!(cfg.data.num_identities),
                "samples_per_identity" => set!(cfg.data.samples_per_identity),
                "raw_dim" => set!(cfg.data.raw_dim),
                "cluster_spread" => set!(cfg.data.cluster_spread),
                "noise_spread" => set!(cfg.data.noise_spread),
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        cfg.data.seed = data_seed.unwrap_or(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolved values in the same `key = value` form, sorted by key.
    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let mining = match self.loss.negative_mining {
            NegativeMining::Literal => "literal",
            NegativeMining::Hard => "hard",
        };
        BTreeMap::from([
            ("p", self.p.to_string()),
            ("k", self.k.to_string()),
            ("steps", self.steps.to_string()),
            ("step_size", self.step_size.to_string()),
            ("momentum", self.momentum.to_string()),
            ("seed", self.seed.to_string()),
            ("data_seed", self.data.seed.to_string()),
            ("hidden", self.hidden.to_string()),
            ("out_dim", self.out_dim.to_string()),
            ("activation", self.activation.to_string()),
            ("shared_init", self.shared_init.to_string()),
            ("heldout_per_identity", self.heldout_per_identity.to_string()),
            ("gallery_size", self.gallery_size.to_string()),
            ("eval_threshold", self.eval_threshold.to_string()),
            ("tau", self.loss.tau.to_string()),
            ("lambda_reid", self.loss.lambda_reid.to_string()),
            ("negative_mining", mining.to_string()),
            ("identities", self.data.num_identities.to_string()),
            ("samples_per_identity", self.data.samples_per_identity.to_string()),
            ("raw_dim", self.data.raw_dim.to_string()),
            ("cluster_spread", self.data.cluster_spread.to_string()),
            ("noise_spread", self.data.noise_spread.to_string()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub phi_r: AdapterParams,
    pub phi_i: AdapterParams,
    /// Batch loss before each update.
    pub trajectory: Vec<f64>,
    /// Mean loss over fixed probe batches before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub report: MetricsReport,
    pub baseline: MetricsReport,
}

/// The held-out evaluation set as an annotation store and a per-query manifest:
/// every held-out sample is a query and a gallery image.
pub struct ToyEval {
    pub store: AnnotationStore,
    pub manifest: SplitManifest,
    /// `(image id, identity, sample index)` for every held-out sample.
    pub images: Vec<(ImageId, usize, usize)>,
}

fn toy_identity(i: usize) -> IdentityId {
    format!("id_{i:03}").into()
}

fn toy_image(i: usize, j: usize) -> ImageId {
    format!("toy_{i:03}_{j:03}").into()
}

fn toy_query(i: usize, j: usize) -> QueryId {
    format!("q_{i:03}_{j:03}").into()
}

fn person_mask() -> BinaryMask {
    let lo = (TOY_IMAGE_SIDE - TOY_PERSON_SIDE) / 2;
    let hi = lo + TOY_PERSON_SIDE;
    BinaryMask::from_fn(TOY_IMAGE_SIDE, TOY_IMAGE_SIDE, |x, y| (lo..hi).contains(&x) && (lo..hi).contains(&y))
        .expect("nonzero size")
}

pub fn build_toy_eval(cfg: &TrainConfig) -> Result<ToyEval, ToyError> {
    let n = cfg.data.num_identities;
    let s = cfg.data.samples_per_identity;
    let first = s - cfg.heldout_per_identity;
    let mask = person_mask();
    let lo = f64::from((TOY_IMAGE_SIDE - TOY_PERSON_SIDE) / 2);
    let side = f64::from(TOY_PERSON_SIDE);
    let mut store = AnnotationStore::default();
    let mut images = Vec::new();
    for i in 0..n {
        for j in first..s {
            let img = toy_image(i, j);
            store.insert_image(TOY_IMAGE_SIDE, TOY_IMAGE_SIDE, img.clone())?;
            store.insert_instance(InstanceAnnotation {
                instance_id: format!("{img}_0").into(),
                image_id: img.clone(),
                identity_id: toy_identity(i),
                bbox: BBox::new(lo, lo, side, side)?,
                mask_rle: mask.clone(),
                description: None,
            })?;
            images.push((img, i, j));
        }
    }
    let positives = cfg.heldout_per_identity - 1;
    if cfg.gallery_size <= positives {
        return Err(ToyError::InvalidConfig(format!("gallery_size must exceed the {positives} positives per query")));
    }
    let distractors = cfg.gallery_size - positives;
    let others = (n - 1) * cfg.heldout_per_identity;
    if distractors > others {
        return Err(ToyError::InsufficientData(format!("gallery needs {distractors} distractors, {others} available")));
    }
    let name = gallery_name(cfg.gallery_size);
    let mut lists = BTreeMap::new();
    let mut queries = Vec::new();
    for &(ref img, i, j) in &images {
        let qid = toy_query(i, j);
        let mut rng = SplitMix64::derive(cfg.seed, &format!("toy/gallery/{qid}"));
        let neg: Vec<&ImageId> = images.iter().filter(|e| e.1 != i).map(|e| &e.0).collect();
        let mut list: Vec<ImageId> = images.iter().filter(|e| e.1 == i && e.2 != j).map(|e| e.0.clone()).collect();
        list.extend(rng.sample_indices(neg.len(), distractors).into_iter().map(|k| neg[k].clone()));
        list.sort();
        queries.push(QueryRecord {
            query_id: qid.clone(),
            identity_id: toy_identity(i),
            crop_ref: CropRef { image_id: img.clone(), instance_id: format!("{img}_0").into() },
            description: None,
        });
        lists.insert(qid, list);
    }
    let manifest = SplitManifest {
        seed: cfg.seed,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        gallery_construction: "toy; every held-out sample queries the other held-out samples of its identity plus seeded distractors".into(),
        train_ids: (0..n).map(toy_identity).collect(),
        test_ids: (0..n).map(toy_identity).collect(),
        queries,
        galleries: BTreeMap::from([(name, lists)]),
    };
    Ok(ToyEval { store, manifest, images })
}

/// Embeds the held-out set with both adapters and runs the protocol.
pub fn evaluate_adapters(
    eval: &ToyEval,
    data: &Dataset,
    phi_r: &AdapterParams,
    phi_i: &AdapterParams,
    threshold: f64,
) -> Result<MetricsReport, ToyError> {
    let mut table = EmbeddingTable::new(phi_r.d_out);
    let mask = person_mask();
    for (img, i, j) in &eval.images {
        let x = &data.samples[*i][*j];
        table.insert_query(toy_query(*i, *j), phi_r.forward(x)?.0)?;
        table.insert_shared(img.clone(), phi_i.forward(x)?.0, None, Some(mask.clone()))?;
    }
    let policy = DecisionPolicy::threshold(threshold)?;
    let mut out = run_protocol(&eval.manifest, &table, policy, &eval.store, None, DEFAULT_MIN_MASK_PIXELS)?;
    Ok(out.reports.pop_first().expect("one gallery").1)
}

fn probe_loss(
    probes: &[BatchPlan],
    data: &Dataset,
    phi_r: &AdapterParams,
    phi_i: &AdapterParams,
    cfg: &LossConfig,
) -> Result<f64, ToyError> {
    let mut sum = 0.0;
    for plan in probes {
        sum += batch_loss(plan, data, phi_r, phi_i, cfg)?.0;
    }
    Ok(sum / probes.len() as f64)
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, ToyError> {
    cfg.validate()?;
    let data = synth_identities(&cfg.data)?;
    let train_len = cfg.data.samples_per_identity - cfg.heldout_per_identity;
    let pool: Vec<Vec<usize>> = (0..cfg.data.num_identities).map(|_| (0..train_len).collect()).collect();

    let mut init_rng = SplitMix64::derive(cfg.seed, "toy/init/phi_r");
    let d_in = cfg.data.raw_dim;
    let mut phi_r = AdapterParams::init(d_in, cfg.hidden, cfg.out_dim, cfg.activation, &mut init_rng)?;
    let mut phi_i = if cfg.shared_init {
        phi_r.clone()
    } else {
        AdapterParams::init(d_in, cfg.hidden, cfg.out_dim, cfg.activation, &mut SplitMix64::derive(cfg.seed, "toy/init/phi_i"))?
    };

    let mut probe_rng = SplitMix64::derive(cfg.seed, "toy/probe");
    let probes: Vec<BatchPlan> =
        (0..PROBE_BATCHES).map(|_| sample_batch(&pool, cfg.p, cfg.k, &mut probe_rng)).collect::<Result<_, _>>()?;
    let eval = build_toy_eval(cfg)?;
    let baseline = evaluate_adapters(&eval, &data, &phi_r, &phi_i, cfg.eval_threshold)?;
    let initial_loss = probe_loss(&probes, &data, &phi_r, &phi_i, &cfg.loss)?;

    let mut rng = SplitMix64::derive(cfg.seed, "toy/batches");
    let mut vel_r = vec![0.0; phi_r.num_params()];
    let mut vel_i = vec![0.0; phi_i.num_params()];
    let mut trajectory = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let plan = sample_batch(&pool, cfg.p, cfg.k, &mut rng)?;
        let (loss, g_r, g_i) = match batch_loss(&plan, &data, &phi_r, &phi_i, &cfg.loss) {
            Err(ToyError::Loss(LossError::NonFinite | LossError::ZeroNorm)) => {
                return Err(ToyError::Diverged { step, loss: f64::NAN })
            }
            other => other?,
        };
        if !loss.is_finite() || g_r.iter().chain(&g_i).any(|g| !g.is_finite()) {
            return Err(ToyError::Diverged { step, loss });
        }
        trajectory.push(loss);
        for (v, g) in vel_r.iter_mut().zip(&g_r).chain(vel_i.iter_mut().zip(&g_i)) {
            *v = cfg.momentum * *v + g;
        }
        let dr: Vec<f64> = vel_r.iter().map(|v| cfg.step_size * v).collect();
        let di: Vec<f64> = vel_i.iter().map(|v| cfg.step_size * v).collect();
        phi_r.step(&dr);
        phi_i.step(&di);
    }
    let final_loss = probe_loss(&probes, &data, &phi_r, &phi_i, &cfg.loss)?;
    if !final_loss.is_finite() {
        return Err(ToyError::Diverged { step: cfg.steps, loss: final_loss });
    }
    let report = evaluate_adapters(&eval, &data, &phi_r, &phi_i, cfg.eval_threshold)?;
    Ok(TrainOutcome { phi_r, phi_i, trajectory, initial_loss, final_loss, report, baseline })
}

/// `step,loss` with one row per iteration.
pub fn trajectory_csv(trajectory: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trajectory.iter().enumerate() {
        s.push_str(&format!("{i},{l:.12e}\n"));
    }
    s
}

/// Magic `RFAP`, version u16, adapter count u8, then per adapter: activation u8,
/// `d_in`, `hidden`, `d_out` as u32, and `w1, b1, w2, b2` as f32. Little-endian.
pub fn write_params(mut w: impl Write, adapters: &[&AdapterParams]) -> Result<(), ToyError> {
    w.write_all(&PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    w.write_all(&[adapters.len() as u8])?;
    for a in adapters {
        w.write_all(&[a.activation.code()])?;
        for d in [a.d_in, a.hidden, a.d_out] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in a.to_flat() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params(mut r: impl Read) -> Result<Vec<AdapterParams>, ToyError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = &bytes[..];
    let mut take = |n: usize| -> Result<&[u8], ToyError> {
        if cur.len() < n {
            return Err(ToyError::Params("truncated".into()));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != PARAMS_MAGIC {
        return Err(ToyError::Params("bad magic; expected RFAP".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
    if version != PARAMS_VERSION {
        return Err(ToyError::Params(format!("unsupported version {version}")));
    }
    let count = take(1)?[0];
    let mut out = Vec::new();
    for _ in 0..count {
        let act = Activation::from_code(take(1)?[0]).ok_or_else(|| ToyError::Params("bad activation code".into()))?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        }
        let [d_in, hidden, d_out] = dims;
        let shell = AdapterParams {
            d_in,
            hidden,
            d_out,
            w1: vec![0.0; hidden * d_in],
            b1: vec![0.0; hidden],
            w2: vec![0.0; d_out * hidden],
            b2: vec![0.0; d_out],
            activation: act,
        };
        let flat: Vec<f64> = take(4 * shell.num_params())?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        out.push(shell.with_flat(&flat)?);
    }
    if !cur.is_empty() {
        return Err(ToyError::Params("trailing bytes".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::finite_diff_gradient;
    use crate::loss::gradcheck::compare_gradients;

    fn eye(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| f64::from(u8::from(i % (n + 1) == 0))).collect()
    }

    #[test]
    fn identity_adapter_is_identity() {
        let p = AdapterParams {
            d_in: 3,
            hidden: 3,
            d_out: 3,
            w1: eye(3),
            b1: vec![0.0; 3],
            w2: eye(3),
            b2: vec![0.0; 3],
            activation: Activation::Identity,
        };
        assert_eq!(p.forward(&[1.5, -2.0, 0.25]).unwrap().0, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut p = AdapterParams::init(4, 5, 3, Activation::SmoothGated, &mut SplitMix64::new(1)).unwrap();
        p.w1.iter_mut().chain(p.w2.iter_mut()).for_each(|w| *w = 0.0);
        p.b2 = vec![0.5, -1.0, 2.0];
        assert_eq!(p.forward(&[1.0; 4]).unwrap().0, p.b2);
        assert!(p.forward(&[1.0; 3]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let p = AdapterParams::init(3, 4, 2, Activation::Rectified, &mut SplitMix64::new(2)).unwrap();
        assert_eq!(p.with_flat(&p.to_flat()).unwrap(), p);
        assert_eq!(p.to_flat().len(), p.num_params());
    }

    fn small_data(noise: f64, seed: u64) -> Dataset {
        synth_identities(&SynthConfig {
            num_identities: 4,
            samples_per_identity: 5,
            raw_dim: 6,
            cluster_spread: 1.0,
            noise_spread: noise,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn synth_examples() {
        let d = synth_identities(&SynthConfig { num_identities: 2, noise_spread: 0.0, ..Default::default() }).unwrap();
        for s in &d.samples {
            assert!(s.iter().all(|x| x == &s[0]));
        }
        let cfg = SynthConfig::default();
        assert_eq!(synth_identities(&cfg).unwrap(), synth_identities(&cfg).unwrap());
        let too_many = SynthConfig { num_identities: 50, raw_dim: 2, ..Default::default() };
        assert!(matches!(synth_identities(&too_many), Err(ToyError::Rejection { .. })));
    }

    #[test]
    fn centers_are_separated() {
        let d = synth_identities(&SynthConfig::default()).unwrap();
        let min_cos = MIN_CENTER_ANGLE_DEG.to_radians().cos();
        for a in 0..d.centers.len() {
            for b in 0..a {
                let dot: f64 = d.centers[a].iter().zip(&d.centers[b]).map(|(x, y)| x * y).sum();
                assert!(dot < min_cos);
            }
        }
    }

    #[test]
    fn nearest_center_classification() {
        let d = synth_identities(&SynthConfig { num_identities: 16, raw_dim: 32, ..Default::default() }).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for (i, samples) in d.samples.iter().enumerate() {
            for s in samples {
                let dist = |c: &Vec<f64>| c.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..d.centers.len()).min_by(|&a, &b| dist(&d.centers[a]).total_cmp(&dist(&d.centers[b]))).unwrap();
                correct += usize::from(best == i);
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn batch_shapes() {
        let pool: Vec<Vec<usize>> = vec![(0..5).collect(); 6];
        let mut rng = SplitMix64::new(3);
        let plan = sample_batch(&pool, 3, 3, &mut rng).unwrap();
        assert_eq!(plan.identities.len(), 3);
        for (_, picks) in &plan.identities {
            assert_eq!(picks.len(), 3);
            let mut u = picks.clone();
            u.sort();
            u.dedup();
            assert_eq!(u.len(), 3);
        }
        let replay = sample_batch(&pool, 3, 3, &mut SplitMix64::new(3)).unwrap();
        assert_eq!(plan, replay);
        assert!(sample_batch(&pool, 7, 2, &mut rng).is_err());
        assert!(sample_batch(&pool, 1, 2, &mut rng).is_err());
    }

    #[test]
    fn batch_counts_through_loss() {
        let d = small_data(0.1, 4);
        let pool: Vec<Vec<usize>> = vec![(0..5).collect(); 4];
        let plan = sample_batch(&pool, 2, 2, &mut SplitMix64::new(5)).unwrap();
        let mut r = SplitMix64::new(6);
        let phi = AdapterParams::init(6, 4, 3, Activation::SmoothGated, &mut r).unwrap();
        // P=2, K=2: one positive and two negatives per identity.
        let (loss, _, _) = batch_loss(&plan, &d, &phi, &phi, &LossConfig::default()).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn end_to_end_gradient_matches_fd() {
        for seed in 0..5 {
            let d = small_data(0.3, seed);
            let pool: Vec<Vec<usize>> = vec![(0..5).collect(); 4];
            let mut rng = SplitMix64::new(100 + seed);
            let plan = sample_batch(&pool, 3, 3, &mut rng).unwrap();
            let phi_r = AdapterParams::init(6, 5, 4, Activation::SmoothGated, &mut rng).unwrap();
            let phi_i = AdapterParams::init(6, 5, 4, Activation::SmoothGated, &mut rng).unwrap();
            let cfg = LossConfig { tau: 0.2, ..Default::default() };
            let (_, g_r, g_i) = batch_loss(&plan, &d, &phi_r, &phi_i, &cfg).unwrap();
            let n_r = phi_r.num_params();
            let x = [phi_r.to_flat(), phi_i.to_flat()].concat();
            let f = |x: &[f64]| {
                let r = phi_r.with_flat(&x[..n_r]).unwrap();
                let i = phi_i.with_flat(&x[n_r..]).unwrap();
                batch_loss(&plan, &d, &r, &i, &cfg).unwrap().0
            };
            let numeric = finite_diff_gradient(f, &x, 1e-5);
            let c = compare_gradients(&[g_r, g_i].concat(), &numeric);
            assert!(c.pass, "seed {seed}: {c:?}");
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            steps: 30,
            hidden: 16,
            out_dim: 8,
            data: SynthConfig { num_identities: 6, samples_per_identity: 8, raw_dim: 8, ..Default::default() },
            heldout_per_identity: 3,
            gallery_size: 10,
            ..Default::default()
        }
    }

    #[test]
    fn zero_step_size_is_flat() {
        let out = train(&TrainConfig { step_size: 0.0, ..quick_cfg() }).unwrap();
        assert_eq!(out.initial_loss, out.final_loss);
        assert_eq!(out.report, out.baseline);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&quick_cfg()).unwrap();
        let b = train(&quick_cfg()).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn adapters_diverge_from_shared_init() {
        let out = train(&TrainConfig { steps: 10, shared_init: true, ..quick_cfg() }).unwrap();
        assert_ne!(out.phi_r.to_flat(), out.phi_i.to_flat());
    }

    #[test]
    fn separable_case_reaches_perfect_top1() {
        let cfg = TrainConfig {
            steps: 300,
            data: SynthConfig { noise_spread: 0.0, ..quick_cfg().data },
            loss: LossConfig { negative_mining: NegativeMining::Hard, ..Default::default() },
            ..quick_cfg()
        };
        let out = train(&cfg).unwrap();
        assert_eq!(out.report.top_k(1), Some(1.0), "{:?}", out.report.cmc_topk);
    }

    #[test]
    fn divergence_reports_step() {
        let cfg = TrainConfig { step_size: 1e300, steps: 5, ..quick_cfg() };
        match train(&cfg) {
            Err(ToyError::Diverged { step, .. }) => assert!(step < 5),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.trajectory)),
        }
    }

    #[test]
    fn config_parse() {
        let cfg = TrainConfig::parse("# demo\nsteps = 12\nstep_size=0.05\nactivation = rectified\nseed = 9\n").unwrap();
        assert_eq!((cfg.steps, cfg.step_size, cfg.activation, cfg.data.seed), (12, 0.05, Activation::Rectified, 9));
        assert_eq!((cfg.p, cfg.k), (3, 3));
        assert!(matches!(TrainConfig::parse("bogus = 1"), Err(ToyError::ConfigParse { line: 1, .. })));
        assert!(matches!(TrainConfig::parse("\nsteps = x"), Err(ToyError::ConfigParse { line: 2, .. })));
        assert!(TrainConfig::parse("p = 1").is_err());
        let round: String = cfg.to_map().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        assert_eq!(TrainConfig::parse(&round).unwrap(), cfg);
    }

    #[test]
    fn params_round_trip() {
        let mut rng = SplitMix64::new(8);
        let a = AdapterParams::init(3, 4, 2, Activation::SmoothGated, &mut rng).unwrap();
        let b = AdapterParams::init(3, 4, 2, Activation::Identity, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &[&a, &b]).unwrap();
        let back = read_params(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for (orig, got) in [a, b].iter().zip(&back) {
            assert_eq!(got.activation, orig.activation);
            for (x, y) in orig.to_flat().iter().zip(got.to_flat()) {
                assert_eq!(*x as f32, y as f32);
            }
        }
        assert!(read_params(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn csv_layout() {
        assert_eq!(trajectory_csv(&[1.5, 0.25]), "step,loss\n0,1.500000000000e0\n1,2.500000000000e-1\n");
    }
}
