//! A plain-vector model of the class-balanced exemplar queues, rebuilt from
//! the admission rule's wording. Test generators always attach embeddings,
//! so eligibility never has to fail here.

use openset_core::bank::{MemoryBankConfig, Proposal};

/// One stored embedding with its admission tick.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowExemplar {
    pub embedding: Vec<f64>,
    pub timestamp: u64,
}

/// Reference bank: one growable vector per known class, oldest first.
#[derive(Debug, Clone)]
pub struct SlowBank {
    pub queues: Vec<Vec<SlowExemplar>>,
    tick: u64,
}

impl SlowBank {
    pub fn new(classes: usize) -> Self {
        Self {
            queues: vec![Vec::new(); classes],
            tick: 0,
        }
    }

    /// Admission per the written rule: foreground proposals of the class
    /// whose IoU strictly clears the memory threshold, ordered most novel
    /// first against the exemplars stored before this batch (lower index on
    /// ties), the first `sample` kept, the queue shedding its oldest
    /// entries past `capacity`.
    pub fn enqueue(&mut self, proposals: &[Proposal], cfg: &MemoryBankConfig) {
        for class in 0..self.queues.len() {
            let mut eligible: Vec<(f64, usize)> = Vec::new();
            for (index, p) in proposals.iter().enumerate() {
                if !p.is_foreground || p.gt_class != class || p.iou_with_gt <= cfg.iou_memory {
                    continue;
                }
                let e = p
                    .embedding
                    .as_ref()
                    .expect("eligible proposals carry embeddings")
                    .as_slice();
                let mut closest = f64::NEG_INFINITY;
                for ex in &self.queues[class] {
                    let mut dot = 0.0;
                    for (a, b) in ex.embedding.iter().zip(e) {
                        dot += a * b;
                    }
                    closest = closest.max(dot);
                }
                eligible.push((closest, index));
            }
            eligible.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, index) in eligible.iter().take(cfg.sample) {
                let e = proposals[index].embedding.as_ref().unwrap();
                self.queues[class].push(SlowExemplar {
                    embedding: e.as_slice().to_vec(),
                    timestamp: self.tick,
                });
                self.tick += 1;
                if self.queues[class].len() > cfg.capacity {
                    self.queues[class].remove(0);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use openset_core::latent::l2_normalize;

    fn fg(class: usize, iou: f64, v: &[f64]) -> Proposal {
        Proposal {
            features: v.to_vec(),
            embedding: Some(l2_normalize(v).unwrap()),
            gt_class: class,
            iou_with_gt: iou,
            is_foreground: true,
        }
    }

    #[test]
    fn threshold_is_strict_and_oldest_leave_first() {
        let cfg = MemoryBankConfig {
            capacity: 2,
            sample: 2,
            iou_memory: 0.7,
            iou_batch: 0.5,
        };
        let mut bank = SlowBank::new(1);
        bank.enqueue(&[fg(0, 0.7, &[1.0, 0.0])], &cfg);
        assert!(bank.queues[0].is_empty());

        bank.enqueue(&[fg(0, 0.8, &[1.0, 0.0]), fg(0, 0.9, &[0.0, 1.0])], &cfg);
        bank.enqueue(&[fg(0, 0.9, &[1.0, 1.0])], &cfg);
        let stamps: Vec<u64> = bank.queues[0].iter().map(|e| e.timestamp).collect();
        assert_eq!(stamps, vec![1, 2]);
    }

    #[test]
    fn most_novel_candidates_go_first() {
        let cfg = MemoryBankConfig {
            capacity: 4,
            sample: 1,
            iou_memory: 0.7,
            iou_batch: 0.5,
        };
        let mut bank = SlowBank::new(1);
        bank.enqueue(&[fg(0, 0.9, &[1.0, 0.0])], &cfg);
        // The second candidate is orthogonal to the stored exemplar, the
        // first nearly parallel; sample=1 keeps only the orthogonal one.
        bank.enqueue(
            &[fg(0, 0.9, &[0.9, 0.1]), fg(0, 0.9, &[0.0, 1.0])],
            &cfg,
        );
        assert_eq!(bank.queues[0].len(), 2);
        let last = &bank.queues[0][1].embedding;
        assert!(last[0].abs() < 1e-12 && (last[1] - 1.0).abs() < 1e-12);
    }
}
