//! Class-balanced memory of unit-norm exemplar embeddings.
//!
//! Each known class owns a FIFO queue of at most `capacity` exemplars. Per
//! batch, at most `sample` candidates per class are admitted, preferring the
//! ones least similar to what the queue already holds so the memory stays
//! diverse. Admission is gated on ground-truth overlap: only foreground
//! proposals with IoU strictly above `iou_memory` qualify, while the looser
//! `iou_batch` gate selects which proposals act as contrastive anchors.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::latent::{ClassSpace, Embedding};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBankConfig {
    /// Per-class queue capacity (`Q`).
    pub capacity: usize,
    /// Maximum admissions per class per batch (`q`).
    pub sample: usize,
    /// Strict IoU gate for memory admission (`T_m`).
    pub iou_memory: f64,
    /// Strict IoU gate for anchor selection (`T_b`).
    pub iou_batch: f64,
}

impl Default for MemoryBankConfig {
    fn default() -> Self {
        Self {
            capacity: 256,
            sample: 16,
            iou_memory: 0.7,
            iou_batch: 0.5,
        }
    }
}

impl MemoryBankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample == 0 || self.sample > self.capacity {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= sample <= capacity, got sample={} capacity={}",
                self.sample, self.capacity
            )));
        }
        for (name, v) in [("iou_memory", self.iou_memory), ("iou_batch", self.iou_batch)] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.iou_batch > self.iou_memory {
            return Err(Error::InvalidConfig(format!(
                "iou_batch ({}) must not exceed iou_memory ({})",
                self.iou_batch, self.iou_memory
            )));
        }
        Ok(())
    }
}

/// One training proposal. `embedding` is filled in by the model forward
/// pass; world generation leaves it empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub features: Vec<f64>,
    pub embedding: Option<Embedding>,
    pub gt_class: usize,
    pub iou_with_gt: f64,
    pub is_foreground: bool,
}

impl Proposal {
    pub fn validate(&self, space: &ClassSpace) -> Result<()> {
        space.check_class(self.gt_class)?;
        if self.gt_class == space.unknown_index() {
            return Err(Error::UnknownGroundTruth(self.gt_class));
        }
        if self.is_foreground != (self.gt_class != space.background_index()) {
            return Err(Error::InvalidConfig(format!(
                "foreground flag {} disagrees with gt_class {}",
                self.is_foreground, self.gt_class
            )));
        }
        if !(self.iou_with_gt.is_finite() && (0.0..=1.0).contains(&self.iou_with_gt)) {
            return Err(Error::InvalidConfig(format!(
                "iou_with_gt must lie in [0,1], got {}",
                self.iou_with_gt
            )));
        }
        Ok(())
    }
}

/// A stored exemplar; `timestamp` increases monotonically with admission
/// order across the whole bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub embedding: Embedding,
    pub timestamp: u64,
}

/// What [`MemoryBank::enqueue`] did: which proposals were admitted for which
/// class, and how many old exemplars fell out.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdmissionReport {
    /// `(class, proposal index)` in admission order.
    pub admitted: Vec<(usize, usize)>,
    pub evicted: usize,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    space: ClassSpace,
    queues: Vec<VecDeque<Exemplar>>,
    next_timestamp: u64,
}

impl MemoryBank {
    pub fn new(space: ClassSpace) -> Self {
        let queues = (0..space.num_known()).map(|_| VecDeque::new()).collect();
        Self {
            space,
            queues,
            next_timestamp: 0,
        }
    }

    pub fn space(&self) -> &ClassSpace {
        &self.space
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Exemplars of one known class in queue order (oldest first).
    pub fn exemplars(&self, class: usize) -> impl Iterator<Item = &Exemplar> {
        self.queues[class].iter()
    }

    /// Embedding dimensionality, or `None` while the bank is empty.
    pub fn dim(&self) -> Option<usize> {
        self.queues
            .iter()
            .find_map(|q| q.front().map(|e| e.embedding.dim()))
    }

    /// Admits up to `config.sample` eligible proposals per known class.
    ///
    /// Eligible means: foreground, known ground-truth class, IoU strictly
    /// above `config.iou_memory`, embedding present. Candidates are ranked by
    /// their maximum cosine similarity against the exemplars already stored
    /// for that class, most dissimilar first; ties fall back to the lower
    /// proposal index. Into an empty queue the first eligible candidates go
    /// in batch order. Queues evict their oldest entries beyond `capacity`.
    pub fn enqueue(
        &mut self,
        proposals: &[Proposal],
        config: &MemoryBankConfig,
    ) -> Result<AdmissionReport> {
        config.validate()?;
        let mut report = AdmissionReport::default();
        for class in 0..self.space.num_known() {
            let mut candidates: Vec<(usize, &Embedding)> = Vec::new();
            for (index, p) in proposals.iter().enumerate() {
                if !(p.is_foreground && p.gt_class == class) {
                    continue;
                }
                if !(p.iou_with_gt.is_finite() && (0.0..=1.0).contains(&p.iou_with_gt)) {
                    return Err(Error::InvalidConfig(format!(
                        "proposal {index} has iou_with_gt {}",
                        p.iou_with_gt
                    )));
                }
                if p.iou_with_gt <= config.iou_memory {
                    continue;
                }
                match &p.embedding {
                    Some(e) => candidates.push((index, e)),
                    None => return Err(Error::MissingEmbedding { index }),
                }
            }
            if candidates.is_empty() {
                continue;
            }
            // Max similarity against current exemplars only; an empty queue
            // scores everything equally, so batch order decides.
            let mut scored: Vec<(f64, usize, &Embedding)> = candidates
                .into_iter()
                .map(|(index, e)| {
                    let score = self.queues[class]
                        .iter()
                        .map(|ex| ex.embedding.dot(e))
                        .fold(f64::NEG_INFINITY, f64::max);
                    (score, index, e)
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, index, e) in scored.iter().take(config.sample) {
                self.queues[class].push_back(Exemplar {
                    embedding: e.clone(),
                    timestamp: self.next_timestamp,
                });
                self.next_timestamp += 1;
                report.admitted.push((class, index));
                if self.queues[class].len() > config.capacity {
                    self.queues[class].pop_front();
                    report.evicted += 1;
                }
            }
        }
        Ok(report)
    }

    /// Writes the bank as a line-oriented snapshot: a header, then one
    /// record per exemplar holding class index, timestamp and the embedding.
    pub fn write_snapshot(&self, mut w: impl Write) -> Result<()> {
        let dim = self.dim().unwrap_or(0);
        writeln!(
            w,
            "memory-bank v1 num_known={} dim={} next_timestamp={}",
            self.space.num_known(),
            dim,
            self.next_timestamp
        )?;
        for (class, queue) in self.queues.iter().enumerate() {
            for ex in queue {
                let mut line = format!("{} {}", class, ex.timestamp);
                for v in ex.embedding.as_slice() {
                    write!(line, " {v}").expect("writing to string");
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_snapshot(std::io::BufWriter::new(file))
    }

    pub fn read_snapshot(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty bank snapshot".into()))??;
        let mut num_known = None;
        let mut dim = None;
        let mut next_timestamp = 0u64;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("memory-bank") || parts.next() != Some("v1") {
            return Err(Error::Parse("bank snapshot header not recognized".into()));
        }
        for field in parts {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field '{field}'")))?;
            match key {
                "num_known" => num_known = Some(parse_usize(value, "num_known")?),
                "dim" => dim = Some(parse_usize(value, "dim")?),
                "next_timestamp" => {
                    next_timestamp = value
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad next_timestamp '{value}'")))?
                }
                other => return Err(Error::Parse(format!("unknown header field '{other}'"))),
            }
        }
        let num_known =
            num_known.ok_or_else(|| Error::Parse("header is missing num_known".into()))?;
        let dim = dim.ok_or_else(|| Error::Parse("header is missing dim".into()))?;
        let space = ClassSpace::new(num_known)?;
        let mut bank = Self::new(space);
        bank.next_timestamp = next_timestamp;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let class = parse_usize(
                fields.next().ok_or_else(|| record_err(lineno, "missing class"))?,
                "class",
            )?;
            if class >= num_known {
                return Err(record_err(lineno, &format!("class {class} out of range")));
            }
            let timestamp: u64 = fields
                .next()
                .ok_or_else(|| record_err(lineno, "missing timestamp"))?
                .parse()
                .map_err(|_| record_err(lineno, "bad timestamp"))?;
            let values: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| record_err(lineno, &format!("bad float '{f}'")))
                })
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(record_err(
                    lineno,
                    &format!("expected {dim} floats, got {}", values.len()),
                ));
            }
            bank.queues[class].push_back(Exemplar {
                embedding: Embedding::from_unit_vector(values)?,
                timestamp,
            });
        }
        Ok(bank)
    }

    pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_snapshot(std::fs::File::open(path)?)
    }
}

fn parse_usize(value: &str, what: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what} '{value}'")))
}

fn record_err(lineno: usize, msg: &str) -> Error {
    Error::Parse(format!("bank snapshot record {}: {msg}", lineno + 1))
}

/// Indices of the proposals that act as contrastive anchors: foreground with
/// IoU strictly above `config.iou_batch`, batch order preserved.
pub fn select_ic_anchors(proposals: &[Proposal], config: &MemoryBankConfig) -> Vec<usize> {
    proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_foreground && p.iou_with_gt > config.iou_batch)
        .map(|(i, _)| i)
        .collect()
}
