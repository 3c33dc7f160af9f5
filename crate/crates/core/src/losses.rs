//! Training objectives: cross-entropy, the unknown-probability loss with its
//! uncertainty weighting family, the instance-contrastive loss against the
//! memory bank, and the scheduled joint combination. Every loss returns its
//! value together with an analytic gradient.

use crate::bank::MemoryBank;
use crate::latent::{entropy, softmax, ClassSpace, Embedding, ProbVector};
use crate::{Error, Result};

/// Uncertainty weighting applied to the unknown-probability loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingFn {
    /// Constant 1.
    Identity,
    /// `-p * ln(p)` of the ground-truth probability.
    EntropyOfGt,
    /// `(1 - p)^alpha * p` of the ground-truth probability.
    Polynomial,
    /// `(1 - p_m)^alpha * p_m` where `p_m` is the largest probability.
    PolynomialMaxProb,
    /// Full-distribution entropy scaled to `[0, 1]`.
    NormalizedEntropy,
}

impl WeightingFn {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "entropy_of_gt" => Ok(Self::EntropyOfGt),
            "polynomial" => Ok(Self::Polynomial),
            "polynomial_maxprob" => Ok(Self::PolynomialMaxProb),
            "normalized_entropy" => Ok(Self::NormalizedEntropy),
            other => Err(Error::Parse(format!("unknown weighting '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::EntropyOfGt => "entropy_of_gt",
            Self::Polynomial => "polynomial",
            Self::PolynomialMaxProb => "polynomial_maxprob",
            Self::NormalizedEntropy => "normalized_entropy",
        }
    }
}

/// Configuration of the unknown-probability loss.
#[derive(Debug, Clone, PartialEq)]
pub struct UpConfig {
    /// Exponent of the polynomial weighting.
    pub alpha: f64,
    /// Weight of the loss inside the joint objective.
    pub beta: f64,
    pub weighting: WeightingFn,
    /// Treat the weighting factor as a constant during backprop.
    pub detach_weight: bool,
}

impl Default for UpConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            weighting: WeightingFn::Polynomial,
            detach_weight: false,
        }
    }
}

impl UpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weighting exponent must be non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weight beta must be non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Which exemplars form the denominator of the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenominatorMode {
    /// Only exemplars of other classes, the literal printed form.
    AsWritten,
    /// Every bank exemplar, positives included.
    SupCon,
}

impl DenominatorMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(Self::AsWritten),
            "supcon" => Ok(Self::SupCon),
            other => Err(Error::Parse(format!("unknown denominator mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::AsWritten => "as_written",
            Self::SupCon => "supcon",
        }
    }
}

/// Configuration of the instance-contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct IcConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Initial weight of the loss; decays linearly to zero over training.
    pub gamma0: f64,
    pub denominator: DenominatorMode,
}

impl Default for IcConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            gamma0: 0.1,
            denominator: DenominatorMode::SupCon,
        }
    }
}

impl IcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if !(self.gamma0.is_finite() && self.gamma0 >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma0 must be non-negative, got {}",
                self.gamma0
            )));
        }
        Ok(())
    }
}

/// A loss value paired with its gradient. For logit-level losses the
/// gradient runs over logits; for the contrastive loss it runs over the
/// anchor embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValueWithGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Plain softmax cross-entropy over an arbitrary logit vector. The gradient
/// is `p - onehot(gt)`.
pub fn cross_entropy(logits: &[f64], gt: usize) -> Result<LossValueWithGrad> {
    if gt >= logits.len() {
        return Err(Error::InvalidClassIndex {
            index: gt,
            num_classes: logits.len(),
        });
    }
    let p = softmax(logits)?;
    let value = -p.get(gt).ln();
    let mut grad = p.as_slice().to_vec();
    grad[gt] -= 1.0;
    Ok(LossValueWithGrad { value, grad })
}

/// Close-set cross-entropy: the label may be a known class or background,
/// never the unknown index.
pub fn ce_loss(logits: &[f64], gt_class: usize, space: &ClassSpace) -> Result<LossValueWithGrad> {
    check_logit_layout(logits, space)?;
    space.check_training_gt(gt_class)?;
    cross_entropy(logits, gt_class)
}

/// Probability of the unknown class under the softmax that excludes the
/// ground-truth logit. Always strictly inside `(0, 1)`.
pub fn conditional_unknown_prob(logits: &[f64], gt_class: usize, space: &ClassSpace) -> Result<f64> {
    check_logit_layout(logits, space)?;
    space.check_training_gt(gt_class)?;
    let (q, _) = leave_one_out_softmax(logits, gt_class);
    Ok(q[space.unknown_index()])
}

/// Softmax over all entries except `excluded`; returns the distribution
/// (zero at the excluded index) and the log-sum-exp of the kept entries.
fn leave_one_out_softmax(logits: &[f64], excluded: usize) -> (Vec<f64>, f64) {
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != excluded)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut q = vec![0.0; logits.len()];
    for (j, &s) in logits.iter().enumerate() {
        if j != excluded {
            let e = (s - max).exp();
            q[j] = e;
            sum += e;
        }
    }
    for v in &mut q {
        *v /= sum;
    }
    (q, max + sum.ln())
}

/// Uncertainty weight for a proposal with distribution `probs` and
/// ground-truth class `gt_class`.
pub fn up_weight(probs: &ProbVector, gt_class: usize, config: &UpConfig) -> f64 {
    match config.weighting {
        WeightingFn::Identity => 1.0,
        WeightingFn::EntropyOfGt => entropy_weight(probs.get(gt_class)),
        WeightingFn::Polynomial => polynomial_weight(probs.get(gt_class), config.alpha),
        WeightingFn::PolynomialMaxProb => polynomial_weight(probs.max(), config.alpha),
        WeightingFn::NormalizedEntropy => entropy(probs) / (probs.len() as f64).ln(),
    }
}

/// `(1 - p)^alpha * p`: zero at both endpoints, peaking at `p = 1/(1+alpha)`.
pub fn polynomial_weight(p: f64, alpha: f64) -> f64 {
    (1.0 - p).powf(alpha) * p
}

/// `-p * ln(p)` with the zero-probability limit handled.
pub fn entropy_weight(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.ln()
    }
}

/// Weight plus its gradient with respect to the logits.
fn up_weight_with_grad(
    probs: &ProbVector,
    gt_class: usize,
    config: &UpConfig,
) -> (f64, Vec<f64>) {
    let n = probs.len();
    let p = probs.as_slice();
    match config.weighting {
        WeightingFn::Identity => (1.0, vec![0.0; n]),
        WeightingFn::EntropyOfGt => {
            let pg = p[gt_class];
            let w = entropy_weight(pg);
            if pg <= 0.0 {
                return (w, vec![0.0; n]);
            }
            let dw_dp = -(pg.ln() + 1.0);
            let grad = (0..n)
                .map(|j| {
                    let d = if j == gt_class { 1.0 } else { 0.0 };
                    dw_dp * pg * (d - p[j])
                })
                .collect();
            (w, grad)
        }
        WeightingFn::Polynomial => {
            let pg = p[gt_class];
            let (w, dw_dp) = polynomial_weight_with_slope(pg, config.alpha);
            let grad = (0..n)
                .map(|j| {
                    let d = if j == gt_class { 1.0 } else { 0.0 };
                    dw_dp * pg * (d - p[j])
                })
                .collect();
            (w, grad)
        }
        WeightingFn::PolynomialMaxProb => {
            let m = probs.argmax();
            let pm = p[m];
            let (w, dw_dp) = polynomial_weight_with_slope(pm, config.alpha);
            let grad = (0..n)
                .map(|j| {
                    let d = if j == m { 1.0 } else { 0.0 };
                    dw_dp * pm * (d - p[j])
                })
                .collect();
            (w, grad)
        }
        WeightingFn::NormalizedEntropy => {
            let log_c = (n as f64).ln();
            let h = entropy(probs);
            let grad = (0..n)
                .map(|j| {
                    if p[j] <= 0.0 {
                        0.0
                    } else {
                        -p[j] * (p[j].ln() + h) / log_c
                    }
                })
                .collect();
            (h / log_c, grad)
        }
    }
}

fn polynomial_weight_with_slope(p: f64, alpha: f64) -> (f64, f64) {
    let w = polynomial_weight(p, alpha);
    let slope = if alpha == 0.0 {
        1.0
    } else {
        (1.0 - p).powf(alpha) - alpha * (1.0 - p).powf(alpha - 1.0) * p
    };
    (w, slope)
}

/// Unknown-probability loss: the weighted negative log of the conditional
/// unknown probability. The gradient flows through both the weight and the
/// conditional probability unless `detach_weight` is set.
pub fn up_loss(
    logits: &[f64],
    gt_class: usize,
    space: &ClassSpace,
    config: &UpConfig,
) -> Result<LossValueWithGrad> {
    check_logit_layout(logits, space)?;
    space.check_training_gt(gt_class)?;
    config.validate()?;
    let probs = softmax(logits)?;
    let (w, dw) = if config.detach_weight {
        (up_weight(&probs, gt_class, config), vec![0.0; logits.len()])
    } else {
        up_weight_with_grad(&probs, gt_class, config)
    };
    // -ln p_u' written via log-sum-exp so extreme logits stay stable.
    let unknown = space.unknown_index();
    let (q, lse) = leave_one_out_softmax(logits, gt_class);
    let neg_log_pu = lse - logits[unknown];
    let value = w * neg_log_pu;
    let grad = (0..logits.len())
        .map(|j| {
            let d = if j == unknown { 1.0 } else { 0.0 };
            dw[j] * neg_log_pu + w * (q[j] - d)
        })
        .collect();
    Ok(LossValueWithGrad { value, grad })
}

/// Per-anchor instance-contrastive loss against the memory bank, with the
/// gradient taken in the anchor embedding. `Ok(None)` signals a skipped
/// anchor: its class has no exemplars yet, or the denominator set is empty.
pub fn ic_loss(
    anchor: &Embedding,
    anchor_class: usize,
    bank: &MemoryBank,
    config: &IcConfig,
) -> Result<Option<LossValueWithGrad>> {
    ic_terms(anchor.as_slice(), anchor_class, bank, config)
}

/// Value of the contrastive loss as a smooth function of an arbitrary
/// anchor vector. Gradient checks perturb coordinates one at a time, which
/// steps off the unit sphere; the training path always passes unit vectors.
pub fn ic_loss_value_at(
    anchor: &[f64],
    anchor_class: usize,
    bank: &MemoryBank,
    config: &IcConfig,
) -> Result<Option<f64>> {
    Ok(ic_terms(anchor, anchor_class, bank, config)?.map(|t| t.value))
}

fn ic_terms(
    anchor: &[f64],
    anchor_class: usize,
    bank: &MemoryBank,
    config: &IcConfig,
) -> Result<Option<LossValueWithGrad>> {
    config.validate()?;
    let space = bank.space();
    if !space.is_known(anchor_class) {
        return Err(Error::InvalidClassIndex {
            index: anchor_class,
            num_classes: space.num_known(),
        });
    }
    if let Some(dim) = bank.dim() {
        if dim != anchor.len() {
            return Err(Error::DimensionMismatch(format!(
                "anchor has dimension {}, bank stores {dim}",
                anchor.len()
            )));
        }
    }
    let positives: Vec<&Embedding> = bank
        .exemplars(anchor_class)
        .map(|e| &e.embedding)
        .collect();
    if positives.is_empty() {
        return Ok(None);
    }
    let mut denom: Vec<&Embedding> = Vec::new();
    for class in 0..space.num_known() {
        if config.denominator == DenominatorMode::AsWritten && class == anchor_class {
            continue;
        }
        denom.extend(bank.exemplars(class).map(|e| &e.embedding));
    }
    if denom.is_empty() {
        return Ok(None);
    }

    let sims_d: Vec<f64> = denom
        .iter()
        .map(|e| crate::latent::dot(anchor, e.as_slice()) / config.tau)
        .collect();
    let max = sims_d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims_d.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();

    let mean_pos_sim = positives
        .iter()
        .map(|e| crate::latent::dot(anchor, e.as_slice()) / config.tau)
        .sum::<f64>()
        / positives.len() as f64;
    let value = lse - mean_pos_sim;

    // d/dz = (1/tau) * (sum_k a_k z_k - mean_j z_j) over denominator weights
    // a_k and positives z_j.
    let mut grad = vec![0.0; anchor.len()];
    for (e, w) in denom.iter().zip(&exps) {
        let a = w / sum;
        for (g, &x) in grad.iter_mut().zip(e.as_slice()) {
            *g += a * x / config.tau;
        }
    }
    for e in &positives {
        for (g, &x) in grad.iter_mut().zip(e.as_slice()) {
            *g -= x / (config.tau * positives.len() as f64);
        }
    }
    Ok(Some(LossValueWithGrad { value, grad }))
}

/// Mean contrastive loss over a set of anchors, with per-anchor gradients.
/// Skipped anchors contribute zero but stay in the denominator.
#[derive(Debug, Clone)]
pub struct IcBatch {
    pub value: f64,
    /// One slot per anchor; `None` marks a skipped anchor.
    pub grads: Vec<Option<Vec<f64>>>,
    pub attempted: usize,
    pub skipped: usize,
}

pub fn batch_ic_loss(
    anchors: &[(Embedding, usize)],
    bank: &MemoryBank,
    config: &IcConfig,
) -> Result<IcBatch> {
    let attempted = anchors.len();
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(attempted);
    let mut skipped = 0;
    for (embedding, class) in anchors {
        match ic_loss(embedding, *class, bank, config)? {
            Some(term) => {
                value += term.value / attempted as f64;
                grads.push(Some(
                    term.grad.iter().map(|g| g / attempted as f64).collect(),
                ));
            }
            None => {
                skipped += 1;
                grads.push(None);
            }
        }
    }
    Ok(IcBatch {
        value,
        grads,
        attempted,
        skipped,
    })
}

/// Warmup gate and total length of the training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleConfig {
    pub warmup: u64,
    pub total_iterations: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 {
            return Err(Error::InvalidConfig("schedule of zero iterations".into()));
        }
        if self.warmup >= self.total_iterations {
            return Err(Error::InvalidConfig(format!(
                "warmup ({}) must be shorter than the schedule ({})",
                self.warmup, self.total_iterations
            )));
        }
        Ok(())
    }
}

/// Linearly decayed contrastive weight: `gamma0 * (1 - t/T)`.
pub fn gamma_at(gamma0: f64, t: u64, total_iterations: u64) -> Result<f64> {
    if t > total_iterations {
        return Err(Error::IterationOutOfRange {
            t,
            total: total_iterations,
        });
    }
    Ok(gamma0 * (1.0 - t as f64 / total_iterations as f64))
}

/// One proposal as seen by the joint loss: its logits and training label.
#[derive(Debug, Clone)]
pub struct ScoredProposal {
    pub logits: Vec<f64>,
    pub gt_class: usize,
}

/// Everything the joint loss consumes for one iteration.
pub struct JointBatch<'a> {
    /// Cross-entropy runs over all of these.
    pub proposals: &'a [ScoredProposal],
    /// Indices into `proposals` selected by hard-example mining.
    pub mined: &'a [usize],
    /// Contrastive anchors with their known classes.
    pub anchors: &'a [(Embedding, usize)],
}

/// Joint loss breakdown. Logit gradients include the cross-entropy and the
/// gated unknown-probability term; anchor gradients carry the decayed
/// contrastive weight.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub value: f64,
    pub ce: f64,
    pub up: f64,
    pub ic: f64,
    pub gamma: f64,
    /// Effective weight on the unknown-probability term: `beta` once the
    /// warmup has passed, exactly zero before.
    pub up_gate: f64,
    pub grad_logits: Vec<Vec<f64>>,
    pub grad_anchors: Vec<Option<Vec<f64>>>,
    pub ic_skipped: usize,
}

pub fn joint_loss(
    batch: &JointBatch,
    bank: &MemoryBank,
    space: &ClassSpace,
    up: &UpConfig,
    ic: &IcConfig,
    schedule: &ScheduleConfig,
    t: u64,
) -> Result<JointLoss> {
    schedule.validate()?;
    up.validate()?;
    let gamma = gamma_at(ic.gamma0, t, schedule.total_iterations)?;
    let n = batch.proposals.len();

    let mut ce_total = 0.0;
    let mut grad_logits: Vec<Vec<f64>> = Vec::with_capacity(n);
    for p in batch.proposals {
        let term = ce_loss(&p.logits, p.gt_class, space)?;
        ce_total += term.value;
        grad_logits.push(term.grad.iter().map(|g| g / n.max(1) as f64).collect());
    }
    let ce_mean = if n == 0 { 0.0 } else { ce_total / n as f64 };

    let up_gate = if t >= schedule.warmup { up.beta } else { 0.0 };
    let mut up_mean = 0.0;
    if up_gate > 0.0 && !batch.mined.is_empty() {
        let m = batch.mined.len() as f64;
        for &i in batch.mined {
            let p = batch.proposals.get(i).ok_or(Error::InvalidClassIndex {
                index: i,
                num_classes: n,
            })?;
            let term = up_loss(&p.logits, p.gt_class, space, up)?;
            up_mean += term.value / m;
            for (g, d) in grad_logits[i].iter_mut().zip(&term.grad) {
                *g += up_gate * d / m;
            }
        }
    }

    let ic_batch = batch_ic_loss(batch.anchors, bank, ic)?;
    let grad_anchors = ic_batch
        .grads
        .into_iter()
        .map(|g| g.map(|v| v.iter().map(|x| gamma * x).collect()))
        .collect();

    Ok(JointLoss {
        value: ce_mean + up_gate * up_mean + gamma * ic_batch.value,
        ce: ce_mean,
        up: up_mean,
        ic: ic_batch.value,
        gamma,
        up_gate,
        grad_logits,
        grad_anchors,
        ic_skipped: ic_batch.skipped,
    })
}

fn check_logit_layout(logits: &[f64], space: &ClassSpace) -> Result<()> {
    if logits.len() != space.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "got {} logits for a class space of {}",
            logits.len(),
            space.num_classes()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{MemoryBank, MemoryBankConfig, Proposal};
    use crate::gradcheck::{central_difference, relative_error};
    use crate::latent::l2_normalize;

    // Layout used throughout: two knowns, unknown at 2, background at 3.
    fn space() -> ClassSpace {
        ClassSpace::new(2).unwrap()
    }

    #[test]
    fn cross_entropy_worked_example() {
        let out = ce_loss(&[2.0, 0.0, 0.0, 0.0], 0, &space()).unwrap();
        assert!((out.value - 0.3409).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_two_equal_logits() {
        let out = cross_entropy(&[1.3, 1.3], 0).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);
        let out = cross_entropy(&[1.3, 1.3], 1).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_gt_vanishes() {
        let out = ce_loss(&[60.0, 0.0, 0.0, 0.0], 0, &space()).unwrap();
        assert!(out.value < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let logits = [0.7, -0.4, 0.1, 1.2];
        let out = ce_loss(&logits, 1, &space()).unwrap();
        let p = softmax(&logits).unwrap();
        for j in 0..4 {
            let expect = p.get(j) - if j == 1 { 1.0 } else { 0.0 };
            assert!((out.grad[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_unknown_gt() {
        assert!(matches!(
            ce_loss(&[0.0; 4], 2, &space()),
            Err(Error::UnknownGroundTruth(2))
        ));
    }

    #[test]
    fn conditional_unknown_prob_uniform() {
        // All logits equal: exactly 1/(C-1).
        let p = conditional_unknown_prob(&[0.5; 4], 0, &space()).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_unknown_prob_worked_example() {
        let p = conditional_unknown_prob(&[2.0, 0.0, 0.0, 0.0], 0, &space()).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_unknown_prob_is_interior() {
        let p = conditional_unknown_prob(&[9.0, -4.0, 3.0, 1.0], 3, &space()).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn weight_endpoints_vanish() {
        for alpha in [0.5, 1.0, 2.0, 3.0] {
            assert_eq!(polynomial_weight(0.0, alpha), 0.0);
            assert_eq!(polynomial_weight(1.0, alpha), 0.0);
        }
        assert_eq!(entropy_weight(0.0), 0.0);
        assert!(entropy_weight(1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_worked_values() {
        assert!((polynomial_weight(0.5, 1.0) - 0.25).abs() < 1e-12);
        assert!((polynomial_weight(0.5, 2.0) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn weight_peak_location_and_height() {
        for alpha in [0.5, 1.0, 2.0, 3.0] {
            let p_star = 1.0 / (1.0 + alpha);
            let peak = polynomial_weight(p_star, alpha);
            let formula = alpha.powf(alpha) / (1.0 + alpha).powf(1.0 + alpha);
            assert!((peak - formula).abs() < 1e-12);
            for i in 0..=1000 {
                let p = i as f64 / 1000.0;
                assert!(polynomial_weight(p, alpha) <= peak + 1e-12);
            }
        }
    }

    #[test]
    fn up_weight_variants_dispatch() {
        let probs = softmax(&[2.0, 0.0, 0.0, 0.0]).unwrap();
        let mut cfg = UpConfig {
            weighting: WeightingFn::Identity,
            ..Default::default()
        };
        assert_eq!(up_weight(&probs, 0, &cfg), 1.0);
        cfg.weighting = WeightingFn::EntropyOfGt;
        let pg = probs.get(0);
        assert!((up_weight(&probs, 0, &cfg) - (-pg * pg.ln())).abs() < 1e-12);
        cfg.weighting = WeightingFn::Polynomial;
        assert!((up_weight(&probs, 0, &cfg) - 0.2054).abs() < 1e-4);
        cfg.weighting = WeightingFn::PolynomialMaxProb;
        // gt holds the max here, so (c) and (d) agree.
        assert!((up_weight(&probs, 0, &cfg) - 0.2054).abs() < 1e-4);
        cfg.weighting = WeightingFn::NormalizedEntropy;
        let expect = crate::latent::entropy(&probs) / 4f64.ln();
        assert!((up_weight(&probs, 0, &cfg) - expect).abs() < 1e-12);
    }

    #[test]
    fn up_loss_worked_example() {
        // logits (known, known, unknown, bg) = [2,0,0,0], gt 0, alpha 1:
        // weight 0.2054, conditional unknown probability 1/3.
        let out = up_loss(&[2.0, 0.0, 0.0, 0.0], 0, &space(), &UpConfig::default()).unwrap();
        assert!((out.value - 0.2257).abs() < 1e-3);
        assert!((out.value - 0.205387 * 3f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn up_loss_confident_gt_vanishes() {
        let out = up_loss(&[80.0, 0.0, 3.0, 1.0], 0, &space(), &UpConfig::default()).unwrap();
        assert!(out.value.abs() < 1e-20);
    }

    #[test]
    fn up_loss_rejects_unknown_gt() {
        assert!(up_loss(&[0.0; 4], 2, &space(), &UpConfig::default()).is_err());
    }

    fn up_fd_check(weighting: WeightingFn, detach: bool) {
        let space = space();
        let cfg = UpConfig {
            alpha: 1.7,
            weighting,
            detach_weight: detach,
            ..Default::default()
        };
        let logits = [0.8, -0.3, 0.4, -1.1];
        let analytic = up_loss(&logits, 0, &space, &cfg).unwrap();
        // A detached weight is a constant during backprop, so its numeric
        // counterpart holds the weight at the base point while the logits
        // move; attached mode differentiates the full product.
        let fd = if detach {
            let w0 = up_weight(&softmax(&logits).unwrap(), 0, &cfg);
            let bare = UpConfig {
                weighting: WeightingFn::Identity,
                ..cfg
            };
            central_difference(
                |x| w0 * up_loss(x, 0, &space, &bare).unwrap().value,
                &logits,
                1e-5,
            )
        } else {
            central_difference(
                |x| up_loss(x, 0, &space, &cfg).unwrap().value,
                &logits,
                1e-5,
            )
        };
        assert!(
            relative_error(&analytic.grad, &fd) < 1e-5,
            "{weighting:?} detach={detach}"
        );
    }

    #[test]
    fn up_loss_gradients_match_finite_differences() {
        for weighting in [
            WeightingFn::Identity,
            WeightingFn::EntropyOfGt,
            WeightingFn::Polynomial,
            WeightingFn::PolynomialMaxProb,
            WeightingFn::NormalizedEntropy,
        ] {
            up_fd_check(weighting, false);
            up_fd_check(weighting, true);
        }
    }

    #[test]
    fn detached_weight_changes_the_gradient_not_the_value() {
        let space = space();
        let logits = [0.8, -0.3, 0.4, -1.1];
        let attached = up_loss(&logits, 0, &space, &UpConfig::default()).unwrap();
        let detached = up_loss(
            &logits,
            0,
            &space,
            &UpConfig {
                detach_weight: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(attached.value, detached.value);
        assert!(relative_error(&attached.grad, &detached.grad) > 1e-3);
    }

    fn two_class_bank() -> MemoryBank {
        // Class 0 holds [1,0]; class 1 holds [0,1].
        let space = ClassSpace::new(2).unwrap();
        let mut bank = MemoryBank::new(space);
        let cfg = MemoryBankConfig {
            capacity: 4,
            sample: 4,
            ..Default::default()
        };
        let mk = |class: usize, v: &[f64]| Proposal {
            features: v.to_vec(),
            embedding: Some(l2_normalize(v).unwrap()),
            gt_class: class,
            iou_with_gt: 0.9,
            is_foreground: true,
        };
        bank.enqueue(&[mk(0, &[1.0, 0.0]), mk(1, &[0.0, 1.0])], &cfg)
            .unwrap();
        bank
    }

    #[test]
    fn ic_loss_worked_example_supcon() {
        let bank = two_class_bank();
        let anchor = l2_normalize(&[1.0, 0.0]).unwrap();
        let cfg = IcConfig {
            tau: 1.0,
            ..Default::default()
        };
        let out = ic_loss(&anchor, 0, &bank, &cfg).unwrap().unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((out.value - expect).abs() < 1e-12);
        assert!((out.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn ic_loss_worked_example_as_written() {
        let bank = two_class_bank();
        let anchor = l2_normalize(&[1.0, 0.0]).unwrap();
        let cfg = IcConfig {
            tau: 1.0,
            denominator: DenominatorMode::AsWritten,
            ..Default::default()
        };
        let out = ic_loss(&anchor, 0, &bank, &cfg).unwrap().unwrap();
        assert!((out.value - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn ic_loss_skips_without_same_class_memory() {
        let space = ClassSpace::new(2).unwrap();
        let mut bank = MemoryBank::new(space);
        let cfg = MemoryBankConfig::default();
        bank.enqueue(
            &[Proposal {
                features: vec![0.0, 1.0],
                embedding: Some(l2_normalize(&[0.0, 1.0]).unwrap()),
                gt_class: 1,
                iou_with_gt: 0.9,
                is_foreground: true,
            }],
            &cfg,
        )
        .unwrap();
        let anchor = l2_normalize(&[1.0, 0.0]).unwrap();
        assert!(ic_loss(&anchor, 0, &bank, &IcConfig::default())
            .unwrap()
            .is_none());
    }

    #[test]
    fn ic_loss_as_written_skips_without_other_classes() {
        let space = ClassSpace::new(2).unwrap();
        let mut bank = MemoryBank::new(space);
        bank.enqueue(
            &[Proposal {
                features: vec![1.0, 0.0],
                embedding: Some(l2_normalize(&[1.0, 0.0]).unwrap()),
                gt_class: 0,
                iou_with_gt: 0.9,
                is_foreground: true,
            }],
            &MemoryBankConfig::default(),
        )
        .unwrap();
        let anchor = l2_normalize(&[1.0, 0.0]).unwrap();
        let cfg = IcConfig {
            denominator: DenominatorMode::AsWritten,
            ..Default::default()
        };
        assert!(ic_loss(&anchor, 0, &bank, &cfg).unwrap().is_none());
        // supcon still works: the denominator holds the positive itself.
        assert!(ic_loss(&anchor, 0, &bank, &IcConfig::default())
            .unwrap()
            .is_some());
    }

    #[test]
    fn ic_loss_decreases_toward_own_class() {
        let bank = two_class_bank();
        let cfg = IcConfig::default();
        // Walk the anchor from the other class toward its own exemplar.
        let mut last = f64::INFINITY;
        for step in 0..5 {
            let w = step as f64 / 4.0;
            let v = [w, 1.0 - w + 1e-3];
            let anchor = l2_normalize(&v).unwrap();
            let out = ic_loss(&anchor, 0, &bank, &cfg).unwrap().unwrap();
            assert!(out.value < last);
            last = out.value;
        }
    }

    #[test]
    fn ic_loss_gradient_matches_finite_differences() {
        let bank = two_class_bank();
        for mode in [DenominatorMode::SupCon, DenominatorMode::AsWritten] {
            let cfg = IcConfig {
                tau: 0.17,
                denominator: mode,
                ..Default::default()
            };
            let anchor = l2_normalize(&[0.6, -0.8]).unwrap();
            let out = ic_loss(&anchor, 0, &bank, &cfg).unwrap().unwrap();
            // The loss is smooth in the raw anchor vector, so the check can
            // step straight off the unit sphere.
            let fd = central_difference(
                |x| ic_loss_value_at(x, 0, &bank, &cfg).unwrap().unwrap(),
                anchor.as_slice(),
                1e-6,
            );
            assert!(relative_error(&out.grad, &fd) < 1e-5, "{mode:?}");
        }
    }

    #[test]
    fn gamma_schedule() {
        assert_eq!(gamma_at(0.1, 0, 100).unwrap(), 0.1);
        assert!((gamma_at(0.1, 50, 100).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(gamma_at(0.1, 100, 100).unwrap(), 0.0);
        assert!(matches!(
            gamma_at(0.1, 101, 100),
            Err(Error::IterationOutOfRange { .. })
        ));
    }

    #[test]
    fn joint_loss_gates_up_before_warmup() {
        let space = space();
        let bank = MemoryBank::new(space);
        let proposals = vec![ScoredProposal {
            logits: vec![1.0, 0.0, -0.5, 0.2],
            gt_class: 0,
        }];
        let mined = vec![0];
        let schedule = ScheduleConfig {
            warmup: 100,
            total_iterations: 1000,
        };
        let batch = JointBatch {
            proposals: &proposals,
            mined: &mined,
            anchors: &[],
        };
        let before = joint_loss(
            &batch,
            &bank,
            &space,
            &UpConfig::default(),
            &IcConfig::default(),
            &schedule,
            99,
        )
        .unwrap();
        assert_eq!(before.up_gate, 0.0);
        assert_eq!(before.up, 0.0);
        assert_eq!(before.value, before.ce);
        let after = joint_loss(
            &batch,
            &bank,
            &space,
            &UpConfig::default(),
            &IcConfig::default(),
            &schedule,
            100,
        )
        .unwrap();
        assert_eq!(after.up_gate, 0.5);
        assert!(after.up > 0.0);
        assert!((after.value - (after.ce + 0.5 * after.up)).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_reduces_to_cross_entropy() {
        let space = space();
        let bank = MemoryBank::new(space);
        let proposals = vec![ScoredProposal {
            logits: vec![0.3, -0.2, 0.8, 0.1],
            gt_class: 3,
        }];
        let up = UpConfig {
            beta: 0.0,
            ..Default::default()
        };
        let ic = IcConfig {
            gamma0: 0.0,
            ..Default::default()
        };
        let schedule = ScheduleConfig {
            warmup: 0,
            total_iterations: 10,
        };
        let batch = JointBatch {
            proposals: &proposals,
            mined: &[0],
            anchors: &[],
        };
        let joint = joint_loss(&batch, &bank, &space, &up, &ic, &schedule, 3).unwrap();
        let ce = ce_loss(&proposals[0].logits, 3, &space).unwrap();
        assert!((joint.value - ce.value).abs() < 1e-12);
        assert!(relative_error(&joint.grad_logits[0], &ce.grad) < 1e-12);
    }

    #[test]
    fn joint_loss_rejects_out_of_schedule() {
        let space = space();
        let bank = MemoryBank::new(space);
        let schedule = ScheduleConfig {
            warmup: 1,
            total_iterations: 10,
        };
        let batch = JointBatch {
            proposals: &[],
            mined: &[],
            anchors: &[],
        };
        assert!(matches!(
            joint_loss(
                &batch,
                &bank,
                &space,
                &UpConfig::default(),
                &IcConfig::default(),
                &schedule,
                11
            ),
            Err(Error::IterationOutOfRange { .. })
        ));
    }
}
