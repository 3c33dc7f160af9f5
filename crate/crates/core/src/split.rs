//! Benchmark split construction: carve a joint open-set test manifest out
//! of standard annotation sources by picking open-set images (containing
//! designated classes, or disjoint from the close set) and close-set
//! images, relabeling designated objects to a fresh unknown category.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{AnnotationRecord, CategoryRecord, ClassRegistry, GtFile, ImageRecord};
use crate::{Error, Result};

/// How open-set images relate to the close-set classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Open images contain at least one designated-class object; close-set
    /// objects may co-occur.
    Containing,
    /// Open images contain no close-set object at all (and at least one
    /// designated-class object).
    Disjoint,
}

/// Declarative description of a split. Classes are matched by name so that
/// several sources with different id spaces can feed one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Names of the classes the model is trained on.
    pub close_set: Vec<String>,
    /// Groups of class names designated as unknown. Empty means every
    /// class outside the close set is designated.
    #[serde(default)]
    pub open_set_groups: Vec<Vec<String>>,
    /// Number of close-set images to select.
    #[serde(default)]
    pub known_images: usize,
    /// Number of open-set images to select. Exactly one of this and
    /// `wilderness_ratio` must be given.
    #[serde(default)]
    pub open_images: Option<usize>,
    /// Target ratio of open to known images; the open count is its
    /// rounding against `known_images`.
    #[serde(default)]
    pub wilderness_ratio: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.close_set.is_empty() {
            return Err(Error::InvalidConfig("close_set must name at least one class".into()));
        }
        let mut seen = BTreeSet::new();
        for name in &self.close_set {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "close_set lists '{name}' twice"
                )));
            }
        }
        let mut open_seen = BTreeSet::new();
        for group in &self.open_set_groups {
            for name in group {
                if seen.contains(name.as_str()) {
                    return Err(Error::InvalidConfig(format!(
                        "'{name}' appears in both close_set and open_set_groups"
                    )));
                }
                if !open_seen.insert(name.as_str()) {
                    return Err(Error::InvalidConfig(format!(
                        "open_set_groups list '{name}' twice"
                    )));
                }
            }
        }
        match (self.open_images, self.wilderness_ratio) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::InvalidConfig(
                    "specify exactly one of open_images and wilderness_ratio".into(),
                ));
            }
            (None, Some(r)) => {
                if !(r.is_finite() && r >= 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "wilderness_ratio must be non-negative, got {r}"
                    )));
                }
                if self.known_images == 0 {
                    return Err(Error::InvalidConfig(
                        "wilderness_ratio needs known_images > 0 to resolve a count".into(),
                    ));
                }
            }
            (Some(_), None) => {}
        }
        Ok(())
    }

    /// Number of open-set images this spec asks for.
    pub fn open_count(&self) -> usize {
        match (self.open_images, self.wilderness_ratio) {
            (Some(n), _) => n,
            (None, Some(r)) => (r * self.known_images as f64).round() as usize,
            (None, None) => 0,
        }
    }
}

pub fn parse_split_spec_json(s: &str) -> Result<SplitSpec> {
    let spec: SplitSpec =
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("split spec json: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

/// A built split: the manifest in the source interchange shape, the class
/// registry for evaluating against it, and the realized image counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub manifest: GtFile,
    pub registry: ClassRegistry,
    /// Image ids selected for the open-set pool, ascending.
    pub open_images: Vec<i64>,
    /// Image ids selected for the close-set pool, ascending.
    pub known_images: Vec<i64>,
    /// Manifest images holding at least one close-set annotation.
    pub known_image_count: usize,
    /// Manifest images holding at least one unknown annotation.
    pub unknown_image_count: usize,
    /// `unknown_image_count / known_image_count`, or 0 with no known images.
    pub realized_wilderness_ratio: f64,
}

struct MergedSources {
    /// Category id to name, consistent across sources.
    categories: BTreeMap<i64, String>,
    names: BTreeMap<String, i64>,
    /// Annotations per image; every image comes from exactly one source.
    anns_by_image: BTreeMap<i64, Vec<AnnotationRecord>>,
}

fn merge_sources(sources: &[GtFile]) -> Result<MergedSources> {
    if sources.is_empty() {
        return Err(Error::InvalidConfig("split needs at least one annotation source".into()));
    }
    let mut categories: BTreeMap<i64, String> = BTreeMap::new();
    let mut names: BTreeMap<String, i64> = BTreeMap::new();
    let mut anns_by_image: BTreeMap<i64, Vec<AnnotationRecord>> = BTreeMap::new();
    for (s, source) in sources.iter().enumerate() {
        source
            .validate()
            .map_err(|e| Error::EvalInput(format!("source {s}: {e}")))?;
        for cat in &source.categories {
            if let Some(existing) = categories.get(&cat.id) {
                if existing != &cat.name {
                    return Err(Error::EvalInput(format!(
                        "source {s}: category id {} is '{}' here but '{existing}' elsewhere",
                        cat.id, cat.name
                    )));
                }
            }
            if let Some(&existing) = names.get(&cat.name) {
                if existing != cat.id {
                    return Err(Error::EvalInput(format!(
                        "source {s}: category '{}' has id {} here but {existing} elsewhere",
                        cat.name, cat.id
                    )));
                }
            }
            categories.insert(cat.id, cat.name.clone());
            names.insert(cat.name.clone(), cat.id);
        }
        for image in &source.images {
            if anns_by_image.contains_key(&image.id) {
                return Err(Error::EvalInput(format!(
                    "source {s}: image id {} appears in more than one source",
                    image.id
                )));
            }
            anns_by_image.insert(image.id, Vec::new());
        }
        for ann in &source.annotations {
            anns_by_image
                .get_mut(&ann.image_id)
                .expect("validated annotation references")
                .push(ann.clone());
        }
    }
    Ok(MergedSources {
        categories,
        names,
        anns_by_image,
    })
}

/// Build the joint test manifest.
///
/// Open-set images are drawn first from the eligible pool (seeded shuffle
/// of ascending image ids), then close-set images from the remainder.
/// Close-set images keep only close-set annotations; open-set images keep
/// close-set annotations and their designated objects relabeled to a fresh
/// unknown category. Everything else is dropped. Annotation ids are
/// renumbered in (image id, source annotation id) order.
pub fn build_split(spec: &SplitSpec, sources: &[GtFile]) -> Result<SplitOutcome> {
    spec.validate()?;
    let merged = merge_sources(sources)?;

    let mut close_ids = BTreeSet::new();
    for name in &spec.close_set {
        match merged.names.get(name) {
            Some(&id) => {
                close_ids.insert(id);
            }
            None => {
                return Err(Error::EvalInput(format!(
                    "close-set class '{name}' is not in any source"
                )));
            }
        }
    }
    let designated_ids: BTreeSet<i64> = if spec.open_set_groups.is_empty() {
        merged
            .categories
            .keys()
            .copied()
            .filter(|id| !close_ids.contains(id))
            .collect()
    } else {
        let mut ids = BTreeSet::new();
        for group in &spec.open_set_groups {
            for name in group {
                match merged.names.get(name) {
                    Some(&id) => {
                        ids.insert(id);
                    }
                    None => {
                        return Err(Error::EvalInput(format!(
                            "open-set class '{name}' is not in any source"
                        )));
                    }
                }
            }
        }
        ids
    };

    let has_close = |anns: &[AnnotationRecord]| anns.iter().any(|a| close_ids.contains(&a.category_id));
    let has_designated =
        |anns: &[AnnotationRecord]| anns.iter().any(|a| designated_ids.contains(&a.category_id));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut open_pool: Vec<i64> = merged
        .anns_by_image
        .iter()
        .filter(|(_, anns)| match spec.mode {
            SplitMode::Containing => has_designated(anns),
            SplitMode::Disjoint => has_designated(anns) && !has_close(anns),
        })
        .map(|(&id, _)| id)
        .collect();
    open_pool.shuffle(&mut rng);
    let open_count = spec.open_count();
    if open_pool.len() < open_count {
        return Err(Error::SplitShortfall {
            pool: "open",
            requested: open_count,
            available: open_pool.len(),
        });
    }
    let mut open_images: Vec<i64> = open_pool[..open_count].to_vec();
    open_images.sort_unstable();
    let open_set: BTreeSet<i64> = open_images.iter().copied().collect();

    let mut known_pool: Vec<i64> = merged
        .anns_by_image
        .iter()
        .filter(|(id, anns)| !open_set.contains(id) && has_close(anns))
        .map(|(&id, _)| id)
        .collect();
    known_pool.shuffle(&mut rng);
    if known_pool.len() < spec.known_images {
        return Err(Error::SplitShortfall {
            pool: "known",
            requested: spec.known_images,
            available: known_pool.len(),
        });
    }
    let mut known_images: Vec<i64> = known_pool[..spec.known_images].to_vec();
    known_images.sort_unstable();

    let unknown_id = merged
        .categories
        .keys()
        .next_back()
        .expect("sources have categories")
        + 1;

    let mut selected: Vec<i64> = open_images
        .iter()
        .chain(known_images.iter())
        .copied()
        .collect();
    selected.sort_unstable();
    let mut annotations = Vec::new();
    for &image_id in &selected {
        let is_open = open_set.contains(&image_id);
        let mut kept: Vec<AnnotationRecord> = Vec::new();
        for ann in &merged.anns_by_image[&image_id] {
            if close_ids.contains(&ann.category_id) {
                kept.push(ann.clone());
            } else if is_open && designated_ids.contains(&ann.category_id) {
                let mut relabeled = ann.clone();
                relabeled.category_id = unknown_id;
                kept.push(relabeled);
            }
        }
        kept.sort_by_key(|a| a.id);
        annotations.extend(kept);
    }
    for (new_id, ann) in annotations.iter_mut().enumerate() {
        ann.id = new_id as i64 + 1;
    }

    let mut categories: Vec<CategoryRecord> = close_ids
        .iter()
        .map(|id| CategoryRecord {
            id: *id,
            name: merged.categories[id].clone(),
        })
        .collect();
    categories.push(CategoryRecord {
        id: unknown_id,
        name: "unknown".into(),
    });

    let manifest = GtFile {
        images: selected.iter().map(|&id| ImageRecord { id }).collect(),
        categories,
        annotations,
    };
    manifest.validate()?;

    let mut with_close = BTreeSet::new();
    let mut with_unknown = BTreeSet::new();
    for ann in &manifest.annotations {
        if ann.category_id == unknown_id {
            with_unknown.insert(ann.image_id);
        } else {
            with_close.insert(ann.image_id);
        }
    }
    let known_image_count = with_close.len();
    let unknown_image_count = with_unknown.len();
    let realized_wilderness_ratio = if known_image_count > 0 {
        unknown_image_count as f64 / known_image_count as f64
    } else {
        0.0
    };

    Ok(SplitOutcome {
        manifest,
        registry: ClassRegistry::new(close_ids.into_iter().collect(), unknown_id)?,
        open_images,
        known_images,
        known_image_count,
        unknown_image_count,
        realized_wilderness_ratio,
    })
}
