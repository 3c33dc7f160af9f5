//! Deterministic toy training harness: Gaussian cluster worlds, a small
//! model (shared linear trunk, cosine classifier, contrastive projection
//! head) with hand-written backpropagation, a constant-rate gradient
//! descent loop over the joint loss, and the open-set inference rule.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bank::{select_ic_anchors, MemoryBank, MemoryBankConfig, Proposal};
use crate::eval::{
    evaluate, latent_statistics, BBox, ClassRegistry, Detection, EvalOptions, EvalReport,
    GroundTruth, LatentStats,
};
use crate::latent::{
    cosine_logits, cosine_logits_backward, l2_norm, l2_normalize, softmax, ClassSpace,
    ClassifierWeights, Embedding, ProbVector,
};
use crate::losses::{
    joint_loss, IcConfig, JointBatch, ScheduleConfig, ScoredProposal, UpConfig,
};
use crate::mining::{mine_hard_examples, MiningConfig};
use crate::{Error, Result};

/// Logit substituted for the unknown class when the model runs without
/// unknown-probability learning. Softmax underflows it to exactly zero
/// probability, so the baseline literally cannot predict unknown and its
/// unknown weight row receives no gradient.
pub const UNKNOWN_MASK_LOGIT: f64 = -1e4;

// ---------------------------------------------------------------------------
// Synthetic world

/// Geometry and sampling rules of a synthetic proposal world. Known classes
/// live on mutually orthogonal directions; unknown clusters share the cone
/// equidistant from all of them, the low-density region a close-set model
/// leaves empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldConfig {
    pub num_known: usize,
    pub num_unknown_clusters: usize,
    pub feature_dim: usize,
    /// Norm of every cluster mean.
    pub mean_scale: f64,
    /// Per-coordinate spread of foreground and unknown draws.
    pub cluster_stddev: f64,
    /// Per-coordinate spread of background draws around the origin.
    pub bg_stddev: f64,
    /// Synthetic IoU range for foreground proposals.
    pub fg_iou: (f64, f64),
    /// Synthetic IoU range for background proposals.
    pub bg_iou: (f64, f64),
    /// Fraction of each batch devoted to background slots.
    pub bg_fraction: f64,
    /// Seed for the cluster-mean construction.
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            num_known: 5,
            num_unknown_clusters: 3,
            feature_dim: 16,
            mean_scale: 3.0,
            cluster_stddev: 0.5,
            bg_stddev: 1.0,
            fg_iou: (0.5, 1.0),
            bg_iou: (0.0, 0.3),
            bg_fraction: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_known == 0 {
            return Err(Error::InvalidConfig("world needs at least one known class".into()));
        }
        if self.feature_dim < self.num_known {
            return Err(Error::InvalidConfig(format!(
                "feature_dim {} cannot hold {} orthogonal class means",
                self.feature_dim, self.num_known
            )));
        }
        if self.num_unknown_clusters > 0 && self.num_known < 2 {
            return Err(Error::InvalidConfig(
                "unknown clusters sit apart from the knowns; need at least two known classes"
                    .into(),
            ));
        }
        if !(self.mean_scale.is_finite() && self.mean_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mean_scale must be positive, got {}",
                self.mean_scale
            )));
        }
        if !(self.cluster_stddev.is_finite() && self.cluster_stddev >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cluster_stddev must be non-negative, got {}",
                self.cluster_stddev
            )));
        }
        if !(self.bg_stddev.is_finite() && self.bg_stddev > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bg_stddev must be positive, got {}",
                self.bg_stddev
            )));
        }
        for (name, range) in [("fg_iou", self.fg_iou), ("bg_iou", self.bg_iou)] {
            if !(0.0..=1.0).contains(&range.0) || !(0.0..=1.0).contains(&range.1) || range.0 > range.1
            {
                return Err(Error::InvalidConfig(format!(
                    "{name} range [{}, {}] is not an interval inside [0, 1]",
                    range.0, range.1
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.bg_fraction) {
            return Err(Error::InvalidConfig(format!(
                "bg_fraction must lie in [0, 1], got {}",
                self.bg_fraction
            )));
        }
        Ok(())
    }
}

/// A world with its cluster means materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: SyntheticWorldConfig,
    pub known_means: Vec<Vec<f64>>,
    pub unknown_means: Vec<Vec<f64>>,
}

/// Angular tilt separating the unknown means within their shared cone.
const UNKNOWN_TILT: f64 = 0.4;

/// Build the cluster means. Known means are a seeded random orthonormal
/// frame scaled to `mean_scale`. Unknown means share the low-density cone
/// around the pole equidistant from every known mean: each tilts the pole
/// by a fixed amount along its own direction orthogonal to all known
/// means, then is rescaled to the common norm, so every unknown cluster
/// keeps the same (low) cosine to every known cluster while the unknown
/// means stay pairwise distinct. Once the orthogonal directions run out
/// (`feature_dim - num_known` of them exist) the tilt falls back to
/// known-pair differences, trading exact equidistance for distinctness.
pub fn resolve_world(config: &SyntheticWorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.feature_dim;
    let extra = config.num_unknown_clusters.min(dim - config.num_known);
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(config.num_known + extra);
    while frame.len() < config.num_known + extra {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &frame {
            let proj = crate::latent::dot(&v, u);
            for (a, b) in v.iter_mut().zip(u) {
                *a -= proj * b;
            }
        }
        if l2_norm(&v) < 1e-6 {
            continue;
        }
        frame.push(l2_normalize(&v)?.as_slice().to_vec());
    }
    let (known_frame, tilt_frame) = frame.split_at(config.num_known);
    let known_means: Vec<Vec<f64>> = known_frame
        .iter()
        .map(|u| u.iter().map(|x| x * config.mean_scale).collect())
        .collect();

    let mut unknown_means: Vec<Vec<f64>> = Vec::with_capacity(config.num_unknown_clusters);
    if config.num_unknown_clusters > 0 {
        let mut pole = vec![0.0; dim];
        for u in known_frame {
            for (p, x) in pole.iter_mut().zip(u) {
                *p += x;
            }
        }
        let pole = l2_normalize(&pole)?;
        for i in 0..config.num_unknown_clusters {
            let mut v = pole.as_slice().to_vec();
            if let Some(axis) = tilt_frame.get(i) {
                for (a, b) in v.iter_mut().zip(axis) {
                    *a += UNKNOWN_TILT * b;
                }
            } else {
                let j = i - tilt_frame.len();
                let first = &known_frame[j % config.num_known];
                let second = &known_frame[(j + 1) % config.num_known];
                let t = UNKNOWN_TILT * (1.0 + 0.5 * (j / config.num_known) as f64)
                    * std::f64::consts::FRAC_1_SQRT_2;
                for ((a, x), y) in v.iter_mut().zip(first).zip(second) {
                    *a += t * (x - y);
                }
            }
            let unit = l2_normalize(&v)?;
            unknown_means.push(unit.as_slice().iter().map(|x| x * config.mean_scale).collect());
        }
    }
    Ok(SyntheticWorld {
        config: config.clone(),
        known_means,
        unknown_means,
    })
}

impl SyntheticWorld {
    pub fn num_known(&self) -> usize {
        self.config.num_known
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn space(&self) -> Result<ClassSpace> {
        ClassSpace::new(self.config.num_known)
    }
}

fn sample_iou(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn gaussian_around(rng: &mut ChaCha8Rng, mean: &[f64], stddev: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| m + stddev * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draw one training batch: foreground slots first (uniform over known
/// classes), then background slots. Unknown clusters are never sampled.
pub fn generate_batch(
    world: &SyntheticWorld,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Proposal>> {
    let space = world.space()?;
    let cfg = &world.config;
    let num_bg = (batch_size as f64 * cfg.bg_fraction).round() as usize;
    let num_fg = batch_size - num_bg.min(batch_size);
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..num_fg {
        let class = rng.random_range(0..cfg.num_known);
        batch.push(Proposal {
            features: gaussian_around(rng, &world.known_means[class], cfg.cluster_stddev),
            embedding: None,
            gt_class: class,
            iou_with_gt: sample_iou(rng, cfg.fg_iou),
            is_foreground: true,
        });
    }
    let origin = vec![0.0; cfg.feature_dim];
    for _ in num_fg..batch_size {
        batch.push(Proposal {
            features: gaussian_around(rng, &origin, cfg.bg_stddev),
            embedding: None,
            gt_class: space.background_index(),
            iou_with_gt: sample_iou(rng, cfg.bg_iou),
            is_foreground: false,
        });
    }
    Ok(batch)
}

/// One held-out evaluation point: `label` is a known class index or, for
/// unknown-cluster draws, the unknown index K.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Held-out draw with knowns first, unknown-cluster samples after.
pub fn generate_eval_set(
    world: &SyntheticWorld,
    known_per_class: usize,
    unknown_per_cluster: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EvalSample>> {
    let cfg = &world.config;
    let unknown_label = cfg.num_known;
    let mut samples = Vec::new();
    for class in 0..cfg.num_known {
        for _ in 0..known_per_class {
            samples.push(EvalSample {
                features: gaussian_around(rng, &world.known_means[class], cfg.cluster_stddev),
                label: class,
            });
        }
    }
    for mean in &world.unknown_means {
        for _ in 0..unknown_per_cluster {
            samples.push(EvalSample {
                features: gaussian_around(rng, mean, cfg.cluster_stddev),
                label: unknown_label,
            });
        }
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Toy model

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub feature_dim: usize,
    /// Width of the shared trainable trunk both branches consume.
    pub trunk_dim: usize,
    /// Hidden width of the contrastive head.
    pub hidden_dim: usize,
    /// Output dimension of the contrastive head.
    pub embedding_dim: usize,
    /// Cosine classifier scale.
    pub scale: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            trunk_dim: 16,
            hidden_dim: 32,
            embedding_dim: 128,
            scale: 20.0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("trunk_dim", self.trunk_dim),
            ("hidden_dim", self.hidden_dim),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("model {name} must be positive")));
            }
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "classifier scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Dense layer with row-major weights.
#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: Vec<f64>,
    b: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: (0..in_dim * out_dim)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (row, out) in y.iter_mut().enumerate() {
            let w = &self.w[row * self.in_dim..(row + 1) * self.in_dim];
            *out += crate::latent::dot(w, x);
        }
        y
    }

    /// Accumulate parameter gradients for upstream `dy` and return the
    /// gradient with respect to the input.
    fn backward(&self, x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (row, &g) in dy.iter().enumerate() {
            let w = &self.w[row * self.in_dim..(row + 1) * self.in_dim];
            let dwr = &mut dw[row * self.in_dim..(row + 1) * self.in_dim];
            for i in 0..self.in_dim {
                dwr[i] += g * x[i];
                dx[i] += g * w[i];
            }
            db[row] += g;
        }
        dx
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Cached intermediates of one contrastive-head forward pass.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
    pub norm: f64,
    pub embedding: Embedding,
}

/// The trained model: a shared linear trunk feeding a cosine classifier
/// over all C classes and, in parallel, the contrastive head. Inference
/// never touches the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    space: ClassSpace,
    config: ToyModelConfig,
    mask_unknown: bool,
    trunk: Linear,
    classifier: ClassifierWeights,
    fc1: Linear,
    fc2: Linear,
}

impl ToyModel {
    /// Seeded random initialization. `mask_unknown` pins the unknown logit
    /// to a constant, the shape of a close-set classifier.
    pub fn init(
        config: &ToyModelConfig,
        space: ClassSpace,
        mask_unknown: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let trunk = Linear::init(config.feature_dim, config.trunk_dim, rng);
        let vectors: Vec<Vec<f64>> = (0..space.num_classes())
            .map(|_| {
                (0..config.trunk_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let classifier = ClassifierWeights::new(vectors, config.scale)?;
        let fc1 = Linear::init(config.trunk_dim, config.hidden_dim, rng);
        let fc2 = Linear::init(config.hidden_dim, config.embedding_dim, rng);
        Ok(Self {
            space,
            config: config.clone(),
            mask_unknown,
            trunk,
            classifier,
            fc1,
            fc2,
        })
    }

    pub fn space(&self) -> &ClassSpace {
        &self.space
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn mask_unknown(&self) -> bool {
        self.mask_unknown
    }

    pub fn forward_trunk(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.config.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "got {} features, model expects {}",
                features.len(),
                self.config.feature_dim
            )));
        }
        Ok(self.trunk.forward(features))
    }

    /// Classifier logits over all C classes for a trunk output.
    pub fn logits(&self, trunk_out: &[f64]) -> Result<Vec<f64>> {
        let mut logits = cosine_logits(trunk_out, &self.classifier)?;
        if self.mask_unknown {
            logits[self.space.unknown_index()] = UNKNOWN_MASK_LOGIT;
        }
        Ok(logits)
    }

    pub fn forward_head(&self, trunk_out: &[f64]) -> Result<HeadForward> {
        let hidden_pre = self.fc1.forward(trunk_out);
        let hidden: Vec<f64> = hidden_pre.iter().map(|h| h.max(0.0)).collect();
        let out = self.fc2.forward(&hidden);
        let norm = l2_norm(&out);
        let embedding = l2_normalize(&out)?;
        Ok(HeadForward {
            hidden_pre,
            hidden,
            out,
            norm,
            embedding,
        })
    }

    /// Contrastive embedding of raw features.
    pub fn embed(&self, features: &[f64]) -> Result<Embedding> {
        let trunk = self.forward_trunk(features)?;
        Ok(self.forward_head(&trunk)?.embedding)
    }

    /// Unit direction the cosine classifier scores for raw features. This is
    /// the latent space where class clusters live; every loss shapes it.
    pub fn classifier_direction(&self, features: &[f64]) -> Result<Embedding> {
        let trunk = self.forward_trunk(features)?;
        l2_normalize(&trunk)
    }

    /// Open-set inference: argmax over all C classes, ties to the lowest
    /// index. Background winners are flagged so evaluation can drop them.
    pub fn infer(&self, features: &[f64]) -> Result<Inference> {
        let trunk = self.forward_trunk(features)?;
        let probs = softmax(&self.logits(&trunk)?)?;
        let predicted_class = probs.argmax();
        Ok(Inference {
            predicted_class,
            score: probs.get(predicted_class),
            is_background: predicted_class == self.space.background_index(),
            probs,
        })
    }

    pub fn num_params(&self) -> usize {
        self.trunk.param_count()
            + self.space.num_classes() * self.config.trunk_dim
            + self.fc1.param_count()
            + self.fc2.param_count()
    }

    /// Flatten all trainable parameters: trunk, classifier rows, head.
    pub fn param_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.trunk.w);
        v.extend_from_slice(&self.trunk.b);
        for row in self.classifier.vectors() {
            v.extend_from_slice(row);
        }
        v.extend_from_slice(&self.fc1.w);
        v.extend_from_slice(&self.fc1.b);
        v.extend_from_slice(&self.fc2.w);
        v.extend_from_slice(&self.fc2.b);
        v
    }

    pub fn set_param_vec(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "got {} parameters, model has {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &params[at..at + n];
            at += n;
            s
        };
        let (trunk_w, trunk_b) = (self.trunk.w.len(), self.trunk.b.len());
        let (fc1_w, fc1_b) = (self.fc1.w.len(), self.fc1.b.len());
        let (fc2_w, fc2_b) = (self.fc2.w.len(), self.fc2.b.len());
        self.trunk.w.copy_from_slice(take(trunk_w));
        self.trunk.b.copy_from_slice(take(trunk_b));
        let dim = self.config.trunk_dim;
        for row in self.classifier.vectors_mut() {
            row.copy_from_slice(take(dim));
        }
        self.fc1.w.copy_from_slice(take(fc1_w));
        self.fc1.b.copy_from_slice(take(fc1_b));
        self.fc2.w.copy_from_slice(take(fc2_w));
        self.fc2.b.copy_from_slice(take(fc2_b));
        Ok(())
    }

    /// Write a versioned flat binary checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for dim in [
            self.config.feature_dim,
            self.config.trunk_dim,
            self.config.hidden_dim,
            self.config.embedding_dim,
            self.space.num_known(),
        ] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&[self.mask_unknown as u8])?;
        w.write_all(&self.config.scale.to_le_bytes())?;
        let params = self.param_vec();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in &params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != *CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a model checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let feature_dim = read_u32(&mut r)? as usize;
        let trunk_dim = read_u32(&mut r)? as usize;
        let hidden_dim = read_u32(&mut r)? as usize;
        let embedding_dim = read_u32(&mut r)? as usize;
        let num_known = read_u32(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut scale_bytes = [0u8; 8];
        r.read_exact(&mut scale_bytes)?;
        let config = ToyModelConfig {
            feature_dim,
            trunk_dim,
            hidden_dim,
            embedding_dim,
            scale: f64::from_le_bytes(scale_bytes),
        };
        let space = ClassSpace::new(num_known)?;
        let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = ToyModel::init(&config, space, flag[0] != 0, &mut seed_rng)?;
        let mut count_bytes = [0u8; 8];
        r.read_exact(&mut count_bytes)?;
        let count = u64::from_le_bytes(count_bytes) as usize;
        if count != model.num_params() {
            return Err(Error::Parse(format!(
                "checkpoint holds {count} parameters, dimensions imply {}",
                model.num_params()
            )));
        }
        let mut params = vec![0.0; count];
        for p in &mut params {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *p = f64::from_le_bytes(b);
        }
        model.set_param_vec(&params)?;
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OSLABCK\0";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Result of open-set inference on one feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub predicted_class: usize,
    pub score: f64,
    pub probs: ProbVector,
    pub is_background: bool,
}

// ---------------------------------------------------------------------------
// Loss evaluation through the model

/// One training step's inputs with every data-dependent selection already
/// made, so the loss is a smooth function of the model parameters.
pub struct FrozenStep<'a> {
    pub proposals: &'a [Proposal],
    /// Indices of the mined hard examples for the UP term.
    pub mined: &'a [usize],
    /// Indices of the contrastive anchors.
    pub anchors: &'a [usize],
    pub t: u64,
}

/// Joint loss value, its breakdown, and the gradient over the flattened
/// parameter vector.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub value: f64,
    pub ce: f64,
    pub up: f64,
    pub ic: f64,
    pub gamma: f64,
    pub up_gate: f64,
    pub ic_skipped: usize,
    pub param_grads: Vec<f64>,
    /// Head embeddings for anchor proposals, by proposal index.
    pub embeddings: Vec<Option<Embedding>>,
}

/// Evaluate the joint loss on a frozen step and backpropagate it through
/// the whole model.
pub fn evaluate_step(
    model: &ToyModel,
    step: &FrozenStep,
    bank: &MemoryBank,
    up: &UpConfig,
    ic: &IcConfig,
    schedule: &ScheduleConfig,
) -> Result<StepOutcome> {
    let n = step.proposals.len();
    let mut trunks = Vec::with_capacity(n);
    let mut scored = Vec::with_capacity(n);
    for p in step.proposals {
        let trunk = model.forward_trunk(&p.features)?;
        let logits = model.logits(&trunk)?;
        scored.push(ScoredProposal {
            logits,
            gt_class: p.gt_class,
        });
        trunks.push(trunk);
    }
    let mut heads: Vec<Option<HeadForward>> = (0..n).map(|_| None).collect();
    let mut anchor_pairs = Vec::with_capacity(step.anchors.len());
    for &i in step.anchors {
        let head = model.forward_head(&trunks[i])?;
        anchor_pairs.push((head.embedding.clone(), step.proposals[i].gt_class));
        heads[i] = Some(head);
    }

    let joint = joint_loss(
        &JointBatch {
            proposals: &scored,
            mined: step.mined,
            anchors: &anchor_pairs,
        },
        bank,
        model.space(),
        up,
        ic,
        schedule,
        step.t,
    )?;

    let mut grads = vec![0.0; model.num_params()];
    let (trunk_w, trunk_b, cls, fc1_w, fc1_b, fc2_w, fc2_b) = split_grads(model, &mut grads);
    let mut anchor_grad: Vec<Option<&Vec<f64>>> = (0..n).map(|_| None).collect();
    for (slot, &i) in step.anchors.iter().enumerate() {
        anchor_grad[i] = joint.grad_anchors[slot].as_ref();
    }
    for i in 0..n {
        let mut grad_logits = joint.grad_logits[i].clone();
        if model.mask_unknown {
            grad_logits[model.space.unknown_index()] = 0.0;
        }
        let back = cosine_logits_backward(&trunks[i], &model.classifier, &grad_logits)?;
        let dim = model.config.trunk_dim;
        for (j, row) in back.grad_weights.iter().enumerate() {
            for (g, d) in cls[j * dim..(j + 1) * dim].iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut d_trunk = back.grad_features;
        if let (Some(head), Some(g_embed)) = (&heads[i], anchor_grad[i]) {
            // L2-norm backward: project out the radial component.
            let z = head.embedding.as_slice();
            let radial = crate::latent::dot(g_embed, z);
            let d_out: Vec<f64> = g_embed
                .iter()
                .zip(z)
                .map(|(g, zi)| (g - radial * zi) / head.norm)
                .collect();
            let d_hidden = model.fc2.backward(&head.hidden, &d_out, fc2_w, fc2_b);
            let d_hidden_pre: Vec<f64> = d_hidden
                .iter()
                .zip(&head.hidden_pre)
                .map(|(d, h)| if *h > 0.0 { *d } else { 0.0 })
                .collect();
            let from_head = model.fc1.backward(&trunks[i], &d_hidden_pre, fc1_w, fc1_b);
            for (a, b) in d_trunk.iter_mut().zip(&from_head) {
                *a += b;
            }
        }
        model
            .trunk
            .backward(&step.proposals[i].features, &d_trunk, trunk_w, trunk_b);
    }

    Ok(StepOutcome {
        value: joint.value,
        ce: joint.ce,
        up: joint.up,
        ic: joint.ic,
        gamma: joint.gamma,
        up_gate: joint.up_gate,
        ic_skipped: joint.ic_skipped,
        param_grads: grads,
        embeddings: heads.into_iter().map(|h| h.map(|f| f.embedding)).collect(),
    })
}

type GradSlices<'a> = (
    &'a mut [f64],
    &'a mut [f64],
    &'a mut [f64],
    &'a mut [f64],
    &'a mut [f64],
    &'a mut [f64],
    &'a mut [f64],
);

fn split_grads<'a>(model: &ToyModel, buf: &'a mut [f64]) -> GradSlices<'a> {
    let (trunk_w, rest) = buf.split_at_mut(model.trunk.w.len());
    let (trunk_b, rest) = rest.split_at_mut(model.trunk.b.len());
    let (cls, rest) = rest.split_at_mut(model.space.num_classes() * model.config.trunk_dim);
    let (fc1_w, rest) = rest.split_at_mut(model.fc1.w.len());
    let (fc1_b, rest) = rest.split_at_mut(model.fc1.b.len());
    let (fc2_w, fc2_b) = rest.split_at_mut(model.fc2.w.len());
    (trunk_w, trunk_b, cls, fc1_w, fc1_b, fc2_w, fc2_b)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub total_iterations: u64,
    pub warmup_iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Held-out draw sizes for the experiment runner.
    pub eval_known_per_class: usize,
    pub eval_unknown_per_cluster: usize,
    pub seed: u64,
    pub model: ToyModelConfig,
    pub up: UpConfig,
    pub ic: IcConfig,
    pub bank: MemoryBankConfig,
    pub mining: MiningConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            total_iterations: 1000,
            warmup_iterations: 100,
            learning_rate: 0.05,
            batch_size: 32,
            eval_known_per_class: 40,
            eval_unknown_per_cluster: 40,
            seed: 7,
            model: ToyModelConfig::default(),
            up: UpConfig::default(),
            ic: IcConfig::default(),
            bank: MemoryBankConfig::default(),
            mining: MiningConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.eval_known_per_class == 0 || self.eval_unknown_per_cluster == 0 {
            return Err(Error::InvalidConfig("evaluation draw sizes must be positive".into()));
        }
        self.model.validate()?;
        self.up.validate()?;
        self.ic.validate()?;
        self.bank.validate()?;
        self.mining.validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            warmup: self.warmup_iterations,
            total_iterations: self.total_iterations,
        }
    }

    /// The baseline runs a close-set classifier: without an unknown-probability
    /// term there is nothing to train the unknown logit and it stays masked.
    pub fn masks_unknown(&self) -> bool {
        self.up.beta == 0.0
    }
}

/// Per-iteration loss telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTelemetry {
    pub iteration: u64,
    pub ce: f64,
    pub up: f64,
    pub ic: f64,
    pub gamma: f64,
    /// Effective UP weight at this iteration: 0 during warmup, beta after.
    pub up_gate: f64,
}

/// One gradient-descent step: forward, mine, evaluate the joint loss,
/// update every parameter once, then feed the bank from the pre-update
/// embeddings.
pub fn train_step(
    model: &mut ToyModel,
    bank: &mut MemoryBank,
    batch: &mut [Proposal],
    cfg: &TrainerConfig,
    t: u64,
    mining_rng: &mut ChaCha8Rng,
) -> Result<StepTelemetry> {
    if t >= cfg.total_iterations {
        return Err(Error::IterationOutOfRange {
            t,
            total: cfg.total_iterations,
        });
    }
    let mine_now = cfg.up.beta > 0.0 && t >= cfg.warmup_iterations;
    let mined = if mine_now {
        let mut probs = Vec::with_capacity(batch.len());
        for p in batch.iter() {
            let trunk = model.forward_trunk(&p.features)?;
            probs.push(softmax(&model.logits(&trunk)?)?);
        }
        let fg: Vec<bool> = batch.iter().map(|p| p.is_foreground).collect();
        mine_hard_examples(&probs, &fg, &cfg.mining, mining_rng)?
    } else {
        Vec::new()
    };
    let contrastive = cfg.ic.gamma0 > 0.0;
    let anchors = if contrastive {
        select_ic_anchors(batch, &cfg.bank)
    } else {
        Vec::new()
    };

    let frozen = FrozenStep {
        proposals: batch,
        mined: &mined,
        anchors: &anchors,
        t,
    };
    let outcome = evaluate_step(model, &frozen, bank, &cfg.up, &cfg.ic, &cfg.schedule())?;
    if !outcome.value.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: t,
            diagnostic: format!(
                "ce={} up={} ic={} gamma={} (batch of {}, {} mined, {} anchors)",
                outcome.ce,
                outcome.up,
                outcome.ic,
                outcome.gamma,
                batch.len(),
                mined.len(),
                anchors.len()
            ),
        });
    }

    let mut params = model.param_vec();
    for (p, g) in params.iter_mut().zip(&outcome.param_grads) {
        *p -= cfg.learning_rate * g;
    }
    model.set_param_vec(&params)?;

    if contrastive {
        for (i, embedding) in outcome.embeddings.into_iter().enumerate() {
            if embedding.is_some() {
                batch[i].embedding = embedding;
            }
        }
        bank.enqueue(batch, &cfg.bank)?;
    }

    Ok(StepTelemetry {
        iteration: t,
        ce: outcome.ce,
        up: outcome.up,
        ic: outcome.ic,
        gamma: outcome.gamma,
        up_gate: outcome.up_gate,
    })
}

/// Seeded model construction; the stream is independent of the batch,
/// evaluation, and mining streams.
pub fn init_model(world: &SyntheticWorld, cfg: &TrainerConfig) -> Result<ToyModel> {
    cfg.validate()?;
    if cfg.model.feature_dim != world.feature_dim() {
        return Err(Error::InvalidConfig(format!(
            "model expects {} input features, world produces {}",
            cfg.model.feature_dim,
            world.feature_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_INIT);
    ToyModel::init(&cfg.model, world.space()?, cfg.masks_unknown(), &mut rng)
}

const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_MINING: u64 = 3;

/// Run the full training schedule, mutating the model in place.
pub fn train_model(
    model: &mut ToyModel,
    world: &SyntheticWorld,
    cfg: &TrainerConfig,
) -> Result<(MemoryBank, Vec<StepTelemetry>)> {
    cfg.validate()?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(STREAM_BATCH);
    let mut mining_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mining_rng.set_stream(STREAM_MINING);
    let mut bank = MemoryBank::new(world.space()?);
    let mut telemetry = Vec::with_capacity(cfg.total_iterations as usize);
    for t in 0..cfg.total_iterations {
        let mut batch = generate_batch(world, cfg.batch_size, &mut batch_rng)?;
        telemetry.push(train_step(model, &mut bank, &mut batch, cfg, t, &mut mining_rng)?);
    }
    Ok((bank, telemetry))
}

/// Convenience bundle of a fresh model trained to the horizon.
pub struct TrainOutcome {
    pub model: ToyModel,
    pub bank: MemoryBank,
    pub telemetry: Vec<StepTelemetry>,
}

pub fn train(world: &SyntheticWorld, cfg: &TrainerConfig) -> Result<TrainOutcome> {
    let mut model = init_model(world, cfg)?;
    let (bank, telemetry) = train_model(&mut model, world, cfg)?;
    Ok(TrainOutcome {
        model,
        bank,
        telemetry,
    })
}

// ---------------------------------------------------------------------------
// Experiment runner

/// Everything a full run produces: the trained model, training telemetry,
/// the open-set evaluation of a held-out draw, and latent statistics before
/// and after training on that same draw.
pub struct ExperimentOutcome {
    pub model: ToyModel,
    pub bank: MemoryBank,
    pub telemetry: Vec<StepTelemetry>,
    pub report: EvalReport,
    pub init_latent: Option<LatentStats>,
    pub final_latent: Option<LatentStats>,
    /// Percentage of held-out known samples classified into their true
    /// class (predictions of unknown or background count as misses).
    pub close_set_accuracy: f64,
    /// Final-model classifier directions of the held-out draw, with true
    /// labels (known class index, or K for unknown samples).
    pub latent_points: Vec<(usize, Embedding)>,
}

/// Train on the synthetic world, then evaluate open-set behavior on a fresh
/// draw containing known and unknown clusters. Each held-out sample becomes
/// one single-proposal image with a degenerate unit box, so detection
/// metrics reduce to classification counts.
pub fn run_experiment(
    world_cfg: &SyntheticWorldConfig,
    cfg: &TrainerConfig,
) -> Result<ExperimentOutcome> {
    let world = resolve_world(world_cfg)?;
    let mut model = init_model(&world, cfg)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(STREAM_EVAL);
    let samples = generate_eval_set(
        &world,
        cfg.eval_known_per_class,
        cfg.eval_unknown_per_cluster,
        &mut eval_rng,
    )?;
    let unknown_label = world.num_known();

    let init_latent = draw_latent_stats(&model, &samples, unknown_label)?;
    let (bank, telemetry) = train_model(&mut model, &world, cfg)?;
    let final_latent = draw_latent_stats(&model, &samples, unknown_label)?;

    let unit_box = || BBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box is valid");
    let mut gts = Vec::with_capacity(samples.len());
    let mut dets = Vec::new();
    let mut known_total = 0usize;
    let mut known_correct = 0usize;
    let mut latent_points = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let image_id = i as i64;
        gts.push(GroundTruth {
            id: i as i64 + 1,
            image_id,
            category_id: sample.label as i64,
            bbox: unit_box(),
        });
        let inference = model.infer(&sample.features)?;
        if sample.label < unknown_label {
            known_total += 1;
            if inference.predicted_class == sample.label {
                known_correct += 1;
            }
        }
        if !inference.is_background {
            dets.push(Detection {
                image_id,
                category_id: inference.predicted_class as i64,
                score: inference.score,
                bbox: unit_box(),
            });
        }
        latent_points.push((sample.label, model.classifier_direction(&sample.features)?));
    }

    let registry = ClassRegistry::new(
        (0..world.num_known() as i64).collect(),
        unknown_label as i64,
    )?;
    let mut report = evaluate(&dets, &gts, &registry, &EvalOptions::default())?;
    report.latent = final_latent.clone();

    Ok(ExperimentOutcome {
        model,
        bank,
        telemetry,
        report,
        init_latent,
        final_latent,
        close_set_accuracy: 100.0 * known_correct as f64 / known_total.max(1) as f64,
        latent_points,
    })
}

fn draw_latent_stats(
    model: &ToyModel,
    samples: &[EvalSample],
    unknown_label: usize,
) -> Result<Option<LatentStats>> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for s in samples.iter().filter(|s| s.label < unknown_label) {
        points.push(model.classifier_direction(&s.features)?.as_slice().to_vec());
        labels.push(s.label);
    }
    let distinct = {
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Ok(None);
    }
    latent_statistics(&points, &labels).map(Some)
}
