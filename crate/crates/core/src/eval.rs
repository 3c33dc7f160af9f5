//! Open-set detection metrics over COCO-shaped records: per-class average
//! precision, wilderness impact, open-set error counting, class-agnostic
//! unknown recallability, and latent-space statistics.
//!
//! Every sweep and reduction here iterates in a deterministic order
//! (score descending with input-order ties, category ids ascending), so a
//! report is a pure function of its inputs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RECALL_LEVEL: f64 = 0.8;
pub const DEFAULT_SCORE_FLOOR: f64 = 0.05;

/// Axis-aligned box in `[x, y, width, height]` form with strictly positive
/// extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x: f64,
    y: f64,
    width: f64,
    height: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Result<Self> {
        for (name, v) in [("x", x), ("y", y), ("width", width), ("height", height)] {
            if !v.is_finite() {
                return Err(Error::EvalInput(format!("bbox {name} is {v}")));
            }
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::EvalInput(format!(
                "bbox extent must be positive, got width={width} height={height}"
            )));
        }
        Ok(Self {
            x,
            y,
            width,
            height,
        })
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.width, self.height]
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Intersection over union; zero when the boxes are disjoint.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.width).min(other.x + other.width) - self.x.max(other.x);
        let iy = (self.y + self.height).min(other.y + other.height) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }
}

/// One annotated object.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub id: i64,
    pub image_id: i64,
    pub category_id: i64,
    pub bbox: BBox,
}

/// One scored model output.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: i64,
    pub category_id: i64,
    pub score: f64,
    pub bbox: BBox,
}

/// Which category ids count as known classes and which single id is the
/// unknown class. Background never appears in evaluation records.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRegistry {
    known: Vec<i64>,
    unknown: i64,
}

impl ClassRegistry {
    pub fn new(mut known: Vec<i64>, unknown: i64) -> Result<Self> {
        if known.is_empty() {
            return Err(Error::EvalInput("registry needs at least one known class".into()));
        }
        known.sort_unstable();
        if known.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::EvalInput("registry lists a known class twice".into()));
        }
        if known.binary_search(&unknown).is_ok() {
            return Err(Error::EvalInput(format!(
                "unknown id {unknown} collides with a known class"
            )));
        }
        Ok(Self { known, unknown })
    }

    /// Known ids in ascending order.
    pub fn known(&self) -> &[i64] {
        &self.known
    }

    pub fn unknown_id(&self) -> i64 {
        self.unknown
    }

    pub fn is_known(&self, category_id: i64) -> bool {
        self.known.binary_search(&category_id).is_ok()
    }

    pub fn contains(&self, category_id: i64) -> bool {
        category_id == self.unknown || self.is_known(category_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Minimum IoU for a detection to match a ground truth.
    pub iou_threshold: f64,
    /// Target joint recall for the wilderness-impact operating point.
    pub recall_level: f64,
    /// Detections scoring below this never enter any metric.
    pub score_floor: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            recall_level: DEFAULT_RECALL_LEVEL,
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold.is_finite() && self.iou_threshold > 0.0 && self.iou_threshold <= 1.0)
        {
            return Err(Error::EvalInput(format!(
                "iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if !(self.recall_level.is_finite() && (0.0..=1.0).contains(&self.recall_level)) {
            return Err(Error::EvalInput(format!(
                "recall_level must lie in [0, 1], got {}",
                self.recall_level
            )));
        }
        if !(self.score_floor.is_finite() && (0.0..=1.0).contains(&self.score_floor)) {
            return Err(Error::EvalInput(format!(
                "score_floor must lie in [0, 1], got {}",
                self.score_floor
            )));
        }
        Ok(())
    }
}

/// Embedding-space dispersion summary.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    /// Mean over classes of the mean squared distance to the class centroid.
    pub intra_class_variance: f64,
    /// Mean Euclidean distance between distinct class centroids.
    pub inter_class_distance: f64,
}

/// Full open-set evaluation result. Average precisions are fractions in
/// `[0, 1]`; `wi` is already scaled by 100.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Wilderness impact at the chosen recall level.
    pub wi: f64,
    /// Whether the requested recall level was reachable; when false, `wi`
    /// was measured at the highest recall available instead.
    pub wi_recall_met: bool,
    /// True positives against known classes at the WI operating point.
    pub tp_k: usize,
    /// False positives explained by an unknown object at that point.
    pub fp_u: usize,
    /// Remaining false positives at that point.
    pub fp_k: usize,
    /// Absolute count of unknown objects swallowed by known-class
    /// detections.
    pub aose: usize,
    /// Mean AP over known classes that have at least one ground truth.
    pub map_k: f64,
    /// AP per known class with at least one ground truth.
    pub per_class_ap: BTreeMap<i64, f64>,
    /// AP of the unknown class against the merged unknown ground truths.
    pub ap_unknown: f64,
    /// Filled by callers that also embed the evaluation set.
    pub latent: Option<LatentStats>,
}

/// Indices of `dets`, highest score first; equal scores keep input order.
fn rank_by_score(dets: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("scores validated finite")
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching of ranked detections against one category's ground
/// truths: each detection claims the unclaimed ground truth in its image
/// with the highest IoU at or above the threshold; IoU ties keep the first
/// maximum. Returns a per-detection TP flag in input order.
fn greedy_match(dets: &[&Detection], gts: &[&GroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut by_image: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (slot, gt) in gts.iter().enumerate() {
        by_image.entry(gt.image_id).or_default().push(slot);
    }
    let mut claimed = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &d in &rank_by_score(dets) {
        let Some(pool) = by_image.get(&dets[d].image_id) else {
            continue;
        };
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for &slot in pool {
            if claimed[slot] {
                continue;
            }
            let iou = dets[d].bbox.iou(&gts[slot].bbox);
            if iou >= iou_threshold && iou > best_iou {
                best_iou = iou;
                best = Some(slot);
            }
        }
        if let Some(slot) = best {
            claimed[slot] = true;
            tp[d] = true;
        }
    }
    tp
}

/// All-point interpolated average precision for one category: precision at
/// each rank, a backward running maximum over it, then the envelope summed
/// at true-positive ranks and divided by the ground-truth count.
fn average_precision(dets: &[&Detection], gts: &[&GroundTruth], iou_threshold: f64) -> f64 {
    let n_gt = gts.len();
    if n_gt == 0 {
        return 0.0;
    }
    let tp = greedy_match(dets, gts, iou_threshold);
    let order = rank_by_score(dets);
    let mut precision = Vec::with_capacity(order.len());
    let mut cum_tp = 0usize;
    for (rank, &d) in order.iter().enumerate() {
        if tp[d] {
            cum_tp += 1;
        }
        precision.push(cum_tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for (rank, &d) in order.iter().enumerate() {
        if tp[d] {
            ap += precision[rank] / n_gt as f64;
        }
    }
    ap
}

fn located_det_check(dets: &[Detection], registry: &ClassRegistry) -> Result<()> {
    for (i, d) in dets.iter().enumerate() {
        if !d.score.is_finite() {
            return Err(Error::EvalInput(format!("detection {i}: score is {}", d.score)));
        }
        if !registry.contains(d.category_id) {
            return Err(Error::EvalInput(format!(
                "detection {i}: category {} is not in the registry",
                d.category_id
            )));
        }
    }
    Ok(())
}

fn located_gt_check(gts: &[GroundTruth], registry: &ClassRegistry) -> Result<()> {
    for (i, g) in gts.iter().enumerate() {
        if !registry.contains(g.category_id) {
            return Err(Error::EvalInput(format!(
                "ground truth {i} (id {}): category {} is not in the registry",
                g.id, g.category_id
            )));
        }
    }
    Ok(())
}

/// Evaluate detections against ground truths.
///
/// The floor is applied first; everything below it is invisible. Known
/// classes are scored class-specifically. The unknown class is scored
/// against the merged unknown ground truths. Wilderness impact picks the
/// largest score threshold whose class-specific known recall reaches
/// `recall_level`, then reports how much of the surviving known-labeled
/// output is explained by unknown objects.
pub fn evaluate(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    registry: &ClassRegistry,
    options: &EvalOptions,
) -> Result<EvalReport> {
    options.validate()?;
    located_det_check(detections, registry)?;
    located_gt_check(ground_truths, registry)?;

    let floored: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.score >= options.score_floor)
        .collect();

    let mut gts_by_cat: BTreeMap<i64, Vec<&GroundTruth>> = BTreeMap::new();
    for g in ground_truths {
        gts_by_cat.entry(g.category_id).or_default().push(g);
    }
    let mut dets_by_cat: BTreeMap<i64, Vec<&Detection>> = BTreeMap::new();
    for d in &floored {
        dets_by_cat.entry(d.category_id).or_default().push(d);
    }
    let empty_gt: Vec<&GroundTruth> = Vec::new();
    let empty_det: Vec<&Detection> = Vec::new();

    let mut per_class_ap = BTreeMap::new();
    for &cat in registry.known() {
        let gts = gts_by_cat.get(&cat).unwrap_or(&empty_gt);
        if gts.is_empty() {
            continue;
        }
        let dets = dets_by_cat.get(&cat).unwrap_or(&empty_det);
        per_class_ap.insert(cat, average_precision(dets, gts, options.iou_threshold));
    }
    let map_k = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };

    let unknown_gts = gts_by_cat.get(&registry.unknown_id()).unwrap_or(&empty_gt);
    let unknown_dets = dets_by_cat.get(&registry.unknown_id()).unwrap_or(&empty_det);
    let ap_unknown = average_precision(unknown_dets, unknown_gts, options.iou_threshold);

    let known_dets: Vec<&Detection> = floored
        .iter()
        .copied()
        .filter(|d| registry.is_known(d.category_id))
        .collect();
    let n_known_gt: usize = registry
        .known()
        .iter()
        .map(|c| gts_by_cat.get(c).map_or(0, Vec::len))
        .sum();

    // Class-specific recall of the known ground truths using only known
    // detections at or above `theta`.
    let recall_at = |theta: f64| -> f64 {
        if n_known_gt == 0 {
            return 1.0;
        }
        let mut matched = 0usize;
        for &cat in registry.known() {
            let Some(gts) = gts_by_cat.get(&cat) else {
                continue;
            };
            let dets: Vec<&Detection> = dets_by_cat
                .get(&cat)
                .map(|v| v.iter().copied().filter(|d| d.score >= theta).collect())
                .unwrap_or_default();
            let tp = greedy_match(&dets, gts, options.iou_threshold);
            matched += tp.iter().filter(|&&t| t).count();
        }
        matched as f64 / n_known_gt as f64
    };

    let mut thresholds: Vec<f64> = known_dets.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).expect("scores validated finite"));
    thresholds.dedup();
    let mut chosen = None;
    for &theta in &thresholds {
        if recall_at(theta) >= options.recall_level {
            chosen = Some(theta);
            break;
        }
    }
    let wi_recall_met = chosen.is_some() || (n_known_gt == 0 && thresholds.is_empty());
    let theta = chosen.or(thresholds.last().copied());

    let (mut tp_k, mut fp_u, mut fp_k) = (0usize, 0usize, 0usize);
    if let Some(theta) = theta {
        let mut unknown_by_image: BTreeMap<i64, Vec<&GroundTruth>> = BTreeMap::new();
        for &g in unknown_gts.iter() {
            unknown_by_image.entry(g.image_id).or_default().push(g);
        }
        for &cat in registry.known() {
            let dets: Vec<&Detection> = dets_by_cat
                .get(&cat)
                .map(|v| v.iter().copied().filter(|d| d.score >= theta).collect())
                .unwrap_or_default();
            let gts = gts_by_cat.get(&cat).unwrap_or(&empty_gt);
            let tp = greedy_match(&dets, gts, options.iou_threshold);
            for (d, &is_tp) in dets.iter().zip(&tp) {
                if is_tp {
                    tp_k += 1;
                } else {
                    // A false positive counts against the wilderness when it
                    // lands on any unknown object; unknown ground truths are
                    // not claimed, so several detections can hit one.
                    let on_unknown = unknown_by_image
                        .get(&d.image_id)
                        .is_some_and(|pool| {
                            pool.iter().any(|g| d.bbox.iou(&g.bbox) >= options.iou_threshold)
                        });
                    if on_unknown {
                        fp_u += 1;
                    } else {
                        fp_k += 1;
                    }
                }
            }
        }
    }
    let wi = if tp_k + fp_k > 0 {
        100.0 * fp_u as f64 / (tp_k + fp_k) as f64
    } else {
        0.0
    };

    // Open-set error: every known-labeled detection, ranked by score, may
    // claim one unmatched unknown object in its image. Detections that also
    // matched a known ground truth still participate.
    let mut claimed = vec![false; unknown_gts.len()];
    let mut unknown_slots_by_image: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (slot, g) in unknown_gts.iter().enumerate() {
        unknown_slots_by_image.entry(g.image_id).or_default().push(slot);
    }
    let mut aose = 0usize;
    for &d in &rank_by_score(&known_dets) {
        let det = known_dets[d];
        let Some(pool) = unknown_slots_by_image.get(&det.image_id) else {
            continue;
        };
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for &slot in pool {
            if claimed[slot] {
                continue;
            }
            let iou = det.bbox.iou(&unknown_gts[slot].bbox);
            if iou >= options.iou_threshold && iou > best_iou {
                best_iou = iou;
                best = Some(slot);
            }
        }
        if let Some(slot) = best {
            claimed[slot] = true;
            aose += 1;
        }
    }

    Ok(EvalReport {
        wi,
        wi_recall_met,
        tp_k,
        fp_u,
        fp_k,
        aose,
        map_k,
        per_class_ap,
        ap_unknown,
        latent: None,
    })
}

/// Intra-class variance and inter-class centroid separation of labeled
/// points. Needs at least two distinct labels.
pub fn latent_statistics(points: &[Vec<f64>], labels: &[usize]) -> Result<LatentStats> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (p, &l) in points.iter().zip(labels) {
        by_label.entry(l).or_default().push(p);
    }
    if by_label.len() < 2 {
        return Err(Error::EvalInput(format!(
            "latent statistics need at least two classes, got {}",
            by_label.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch("latent points differ in dimension".into()));
    }

    let mut centroids = Vec::with_capacity(by_label.len());
    let mut intra_sum = 0.0;
    for members in by_label.values() {
        let mut centroid = vec![0.0; dim];
        for p in members {
            for (c, x) in centroid.iter_mut().zip(p.iter()) {
                *c += x;
            }
        }
        for c in &mut centroid {
            *c /= members.len() as f64;
        }
        let mut spread = 0.0;
        for p in members {
            spread += p
                .iter()
                .zip(&centroid)
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>();
        }
        intra_sum += spread / members.len() as f64;
        centroids.push(centroid);
    }
    let intra = intra_sum / centroids.len() as f64;

    let mut inter_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter_sum += centroids[i]
                .iter()
                .zip(&centroids[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(LatentStats {
        intra_class_variance: intra,
        inter_class_distance: inter_sum / pairs as f64,
    })
}

// ---------------------------------------------------------------------------
// COCO-shaped file records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: i64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: i64,
    pub image_id: i64,
    pub category_id: i64,
    pub bbox: [f64; 4],
}

/// Ground-truth dataset file: images, categories and annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtFile {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<CategoryRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetRecord {
    pub image_id: i64,
    pub category_id: i64,
    pub score: f64,
    pub bbox: [f64; 4],
}

/// Detection results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetFile {
    pub detections: Vec<DetRecord>,
}

/// Registry file: known category ids plus the unknown id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryFile {
    pub known: Vec<i64>,
    pub unknown: i64,
}

impl GtFile {
    /// Structural validation with messages that point at the offending
    /// record.
    pub fn validate(&self) -> Result<()> {
        let mut image_ids = BTreeSet::new();
        for (i, img) in self.images.iter().enumerate() {
            if !image_ids.insert(img.id) {
                return Err(Error::EvalInput(format!(
                    "image {i}: duplicate image id {}",
                    img.id
                )));
            }
        }
        let mut category_ids = BTreeSet::new();
        for (i, cat) in self.categories.iter().enumerate() {
            if !category_ids.insert(cat.id) {
                return Err(Error::EvalInput(format!(
                    "category {i}: duplicate category id {}",
                    cat.id
                )));
            }
        }
        let mut ann_ids = BTreeSet::new();
        for (i, ann) in self.annotations.iter().enumerate() {
            if !ann_ids.insert(ann.id) {
                return Err(Error::EvalInput(format!(
                    "annotation {i}: duplicate annotation id {}",
                    ann.id
                )));
            }
            if !image_ids.contains(&ann.image_id) {
                return Err(Error::EvalInput(format!(
                    "annotation {i} (id {}): image_id {} is not among the images",
                    ann.id, ann.image_id
                )));
            }
            if !category_ids.contains(&ann.category_id) {
                return Err(Error::EvalInput(format!(
                    "annotation {i} (id {}): category_id {} is not among the categories",
                    ann.id, ann.category_id
                )));
            }
            BBox::from_array(ann.bbox).map_err(|e| {
                Error::EvalInput(format!("annotation {i} (id {}): {e}", ann.id))
            })?;
        }
        Ok(())
    }

    pub fn image_ids(&self) -> BTreeSet<i64> {
        self.images.iter().map(|i| i.id).collect()
    }

    /// Validated conversion into matchable ground truths.
    pub fn ground_truths(&self) -> Result<Vec<GroundTruth>> {
        self.validate()?;
        self.annotations
            .iter()
            .map(|a| {
                Ok(GroundTruth {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: BBox::from_array(a.bbox)?,
                })
            })
            .collect()
    }
}

impl DetFile {
    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.detections.iter().enumerate() {
            if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
                return Err(Error::EvalInput(format!(
                    "detection {i}: score must lie in [0, 1], got {}",
                    d.score
                )));
            }
            BBox::from_array(d.bbox)
                .map_err(|e| Error::EvalInput(format!("detection {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn detections(&self) -> Result<Vec<Detection>> {
        self.validate()?;
        self.detections
            .iter()
            .map(|d| {
                Ok(Detection {
                    image_id: d.image_id,
                    category_id: d.category_id,
                    score: d.score,
                    bbox: BBox::from_array(d.bbox)?,
                })
            })
            .collect()
    }
}

impl RegistryFile {
    pub fn registry(&self) -> Result<ClassRegistry> {
        ClassRegistry::new(self.known.clone(), self.unknown)
    }
}

pub fn parse_gt_json(s: &str) -> Result<GtFile> {
    let file: GtFile =
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("ground truth json: {e}")))?;
    file.validate()?;
    Ok(file)
}

pub fn parse_detections_json(s: &str) -> Result<DetFile> {
    let file: DetFile =
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("detections json: {e}")))?;
    file.validate()?;
    Ok(file)
}

pub fn parse_registry_json(s: &str) -> Result<ClassRegistry> {
    let file: RegistryFile =
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("registry json: {e}")))?;
    file.registry()
}

/// Checks that detections refer to ground-truth images and registered
/// categories.
pub fn cross_validate(dets: &DetFile, gt: &GtFile, registry: &ClassRegistry) -> Result<()> {
    let images = gt.image_ids();
    for (i, d) in dets.detections.iter().enumerate() {
        if !images.contains(&d.image_id) {
            return Err(Error::EvalInput(format!(
                "detection {i}: image_id {} is not in the ground truth",
                d.image_id
            )));
        }
        if !registry.contains(d.category_id) {
            return Err(Error::EvalInput(format!(
                "detection {i}: category {} is not in the registry",
                d.category_id
            )));
        }
    }
    for (i, a) in gt.annotations.iter().enumerate() {
        if !registry.contains(a.category_id) {
            return Err(Error::EvalInput(format!(
                "annotation {i} (id {}): category {} is not in the registry",
                a.id, a.category_id
            )));
        }
    }
    Ok(())
}
