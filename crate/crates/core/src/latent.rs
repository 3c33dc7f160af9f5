//! Numeric primitives underneath everything else: class-index conventions,
//! unit-norm embeddings, the scaled cosine classifier, stable softmax, and
//! Shannon entropy.

use crate::{Error, Result};

/// Norms below this are treated as zero and rejected.
const NORM_FLOOR: f64 = 1e-12;

/// Tolerance on the unit-norm invariant of [`Embedding`].
const UNIT_NORM_TOL: f64 = 1e-9;

/// Index layout for a problem with `K` known classes: the knowns occupy
/// `0..K`, the unknown class sits at index `K`, background at `K + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassSpace {
    num_known: usize,
}

impl ClassSpace {
    pub fn new(num_known: usize) -> Result<Self> {
        if num_known == 0 {
            return Err(Error::InvalidConfig(
                "a class space needs at least one known class".into(),
            ));
        }
        Ok(Self { num_known })
    }

    pub fn num_known(&self) -> usize {
        self.num_known
    }

    pub fn unknown_index(&self) -> usize {
        self.num_known
    }

    pub fn background_index(&self) -> usize {
        self.num_known + 1
    }

    /// Total class count, knowns plus unknown plus background.
    pub fn num_classes(&self) -> usize {
        self.num_known + 2
    }

    pub fn is_known(&self, class: usize) -> bool {
        class < self.num_known
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class < self.num_classes() {
            Ok(())
        } else {
            Err(Error::InvalidClassIndex {
                index: class,
                num_classes: self.num_classes(),
            })
        }
    }

    /// Valid close-set training label: any known class or background,
    /// never the unknown index.
    pub fn check_training_gt(&self, class: usize) -> Result<()> {
        self.check_class(class)?;
        if class == self.unknown_index() {
            return Err(Error::UnknownGroundTruth(class));
        }
        Ok(())
    }
}

/// A feature vector scaled to unit Euclidean norm.
///
/// The only constructors are [`l2_normalize`] and
/// [`Embedding::from_unit_vector`], so holding one is proof of the norm
/// invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps a vector that is already unit norm (within `1e-9`).
    pub fn from_unit_vector(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !norm.is_finite() {
            return Err(Error::NonFinite("embedding norm".into()));
        }
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::DegenerateVector(format!(
                "expected unit norm, got {norm}"
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

/// A discrete probability distribution: entries non-negative, summing to
/// one within `1e-9`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig(
                "a probability vector needs at least one entry".into(),
            ));
        }
        let mut sum = 0.0;
        for (i, &p) in values.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "probability entry {i} is {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }
}

/// Per-class weight vectors of a cosine classifier together with the logit
/// scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    vectors: Vec<Vec<f64>>,
    scale: f64,
}

impl ClassifierWeights {
    pub fn new(vectors: Vec<Vec<f64>>, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "logit scale must be positive and finite, got {scale}"
            )));
        }
        let Some(first) = vectors.first() else {
            return Err(Error::InvalidConfig(
                "a classifier needs at least one weight vector".into(),
            ));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "classifier weight vectors may not be empty".into(),
            ));
        }
        for (j, w) in vectors.iter().enumerate() {
            if w.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "weight vector {j} has length {}, expected {dim}",
                    w.len()
                )));
            }
            let norm = l2_norm(w);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("weight vector {j}")));
            }
            if norm < NORM_FLOOR {
                return Err(Error::DegenerateVector(format!(
                    "weight vector {j} has zero norm"
                )));
            }
        }
        Ok(Self { vectors, scale })
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn vector(&self, class: usize) -> &[f64] {
        &self.vectors[class]
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.vectors
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm. Zero-norm and non-finite input is
/// rejected rather than silently propagated.
pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    if v.is_empty() {
        return Err(Error::DegenerateVector("empty vector".into()));
    }
    let norm = l2_norm(v);
    if !norm.is_finite() {
        return Err(Error::NonFinite("vector norm".into()));
    }
    if norm < NORM_FLOOR {
        return Err(Error::DegenerateVector(format!(
            "norm {norm} is below {NORM_FLOOR}"
        )));
    }
    Ok(Embedding(v.iter().map(|x| x / norm).collect()))
}

/// Logit for every class `j`: `scale * cos(features, w_j)`. Each logit is
/// bounded by the scale in magnitude.
pub fn cosine_logits(features: &[f64], weights: &ClassifierWeights) -> Result<Vec<f64>> {
    if features.len() != weights.dim() {
        return Err(Error::DimensionMismatch(format!(
            "features have length {}, classifier expects {}",
            features.len(),
            weights.dim()
        )));
    }
    let fnorm = l2_norm(features);
    if !fnorm.is_finite() {
        return Err(Error::NonFinite("feature norm".into()));
    }
    if fnorm < NORM_FLOOR {
        return Err(Error::DegenerateVector("zero-norm feature vector".into()));
    }
    Ok(weights
        .vectors
        .iter()
        .map(|w| weights.scale * dot(features, w) / (fnorm * l2_norm(w)))
        .collect())
}

/// Gradients of [`cosine_logits`] given the upstream gradient on each logit.
pub struct CosineBackward {
    pub grad_features: Vec<f64>,
    pub grad_weights: Vec<Vec<f64>>,
}

pub fn cosine_logits_backward(
    features: &[f64],
    weights: &ClassifierWeights,
    upstream: &[f64],
) -> Result<CosineBackward> {
    if upstream.len() != weights.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient has length {}, expected {}",
            upstream.len(),
            weights.num_classes()
        )));
    }
    if features.len() != weights.dim() {
        return Err(Error::DimensionMismatch(format!(
            "features have length {}, classifier expects {}",
            features.len(),
            weights.dim()
        )));
    }
    let dim = weights.dim();
    let fnorm = l2_norm(features);
    if fnorm < NORM_FLOOR {
        return Err(Error::DegenerateVector("zero-norm feature vector".into()));
    }
    let fhat: Vec<f64> = features.iter().map(|x| x / fnorm).collect();
    let mut grad_features = vec![0.0; dim];
    let mut grad_weights = Vec::with_capacity(weights.num_classes());
    for (w, &u) in weights.vectors.iter().zip(upstream) {
        let wnorm = l2_norm(w);
        let what: Vec<f64> = w.iter().map(|x| x / wnorm).collect();
        let cos = dot(&fhat, &what);
        let mut gw = vec![0.0; dim];
        for i in 0..dim {
            grad_features[i] += u * weights.scale * (what[i] - cos * fhat[i]) / fnorm;
            gw[i] = u * weights.scale * (fhat[i] - cos * what[i]) / wnorm;
        }
        grad_weights.push(gw);
    }
    Ok(CosineBackward {
        grad_features,
        grad_weights,
    })
}

/// Standard max-subtracted softmax; stable for logits up to magnitude 1e4.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::InvalidConfig("softmax over no logits".into()));
    }
    if let Some(bad) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("logit {bad}")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector(exps.iter().map(|e| e / sum).collect()))
}

/// Shannon entropy in nats; zero entries contribute zero. The value lies in
/// `[0, ln(len)]`.
pub fn entropy(p: &ProbVector) -> f64 {
    p.as_slice()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn class_space_layout() {
        let space = ClassSpace::new(20).unwrap();
        assert_eq!(space.num_known(), 20);
        assert_eq!(space.unknown_index(), 20);
        assert_eq!(space.background_index(), 21);
        assert_eq!(space.num_classes(), 22);
        assert!(space.is_known(19));
        assert!(!space.is_known(20));
        assert!(ClassSpace::new(0).is_err());
    }

    #[test]
    fn training_gt_never_unknown() {
        let space = ClassSpace::new(3).unwrap();
        space.check_training_gt(0).unwrap();
        space.check_training_gt(4).unwrap();
        assert!(matches!(
            space.check_training_gt(3),
            Err(Error::UnknownGroundTruth(3))
        ));
        assert!(space.check_training_gt(5).is_err());
    }

    #[test]
    fn normalize_unit_result() {
        let e = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-12);
        assert!((e.as_slice()[1] - 0.8).abs() < 1e-12);
        assert!((l2_norm(e.as_slice()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_rejects_zero_and_nonfinite() {
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
        assert!(l2_normalize(&[f64::NAN, 1.0]).is_err());
        assert!(l2_normalize(&[]).is_err());
    }

    #[test]
    fn cosine_logits_worked_example() {
        // features [1,1] against w=[1,0] at scale 20: 20/sqrt(2).
        let w = ClassifierWeights::new(vec![vec![1.0, 0.0]], 20.0).unwrap();
        let logits = cosine_logits(&[1.0, 1.0], &w).unwrap();
        assert!((logits[0] - 20.0 / 2f64.sqrt()).abs() < 1e-9);
        assert!((logits[0] - 14.1421).abs() < 1e-4);
    }

    #[test]
    fn cosine_logits_scale_invariance() {
        let w = ClassifierWeights::new(vec![vec![1.0, 2.0], vec![-1.0, 0.5]], 20.0).unwrap();
        let a = cosine_logits(&[0.3, -0.7], &w).unwrap();
        let b = cosine_logits(&[0.3 * 7.5, -0.7 * 7.5], &w).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_logits_rejects_zero_feature() {
        let w = ClassifierWeights::new(vec![vec![1.0, 0.0]], 20.0).unwrap();
        assert!(cosine_logits(&[0.0, 0.0], &w).is_err());
    }

    #[test]
    fn classifier_rejects_zero_weight_row() {
        assert!(ClassifierWeights::new(vec![vec![0.0, 0.0]], 20.0).is_err());
        assert!(ClassifierWeights::new(vec![vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn softmax_worked_example() {
        let p = softmax(&[2.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((p.get(0) - 0.7112).abs() < 1e-4);
        for i in 1..4 {
            assert!((p.get(i) - 0.0963).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let p = softmax(&[1e4, -1e4, 0.0]).unwrap();
        assert!(p.as_slice().iter().all(|x| x.is_finite()));
        assert!((p.get(0) - 1.0).abs() < 1e-12);
        assert_eq!(p.get(1), 0.0);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn entropy_uniform_and_onehot() {
        let uniform = ProbVector::new(vec![0.25; 4]).unwrap();
        assert!((entropy(&uniform) - 4f64.ln()).abs() < 1e-12);
        let onehot = ProbVector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(entropy(&onehot), 0.0);
    }

    #[test]
    fn argmax_tie_takes_lowest_index() {
        let p = ProbVector::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(p.argmax(), 0);
        let p = ProbVector::new(vec![0.1, 0.45, 0.45]).unwrap();
        assert_eq!(p.argmax(), 1);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
    }

    #[test]
    fn embedding_from_unit_vector_checks_norm() {
        assert!(Embedding::from_unit_vector(vec![1.0, 0.0]).is_ok());
        assert!(Embedding::from_unit_vector(vec![1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-1e4f64..1e4, 1..24)) {
            let p = softmax(&logits).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn softmax_shift_invariance(
            logits in proptest::collection::vec(-100f64..100.0, 2..12),
            shift in -100f64..100.0,
        ) {
            let a = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_bounds(logits in proptest::collection::vec(-50f64..50.0, 1..12)) {
            let p = softmax(&logits).unwrap();
            let h = entropy(&p);
            prop_assert!(h >= -1e-12);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-9);
        }

        #[test]
        fn normalized_vectors_have_unit_norm(
            v in proptest::collection::vec(-1e3f64..1e3, 1..16)
        ) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let e = l2_normalize(&v).unwrap();
            prop_assert!((l2_norm(e.as_slice()) - 1.0).abs() < 1e-9);
        }
    }
}
