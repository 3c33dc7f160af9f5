//! Uncertainty-guided hard example selection: rank proposals by how unsure
//! the current classifier is about them and keep the top few from the
//! foreground and background pools.

use rand_chacha::ChaCha8Rng;

use crate::latent::{entropy, ProbVector};
use crate::{Error, Result};

/// Ranking criterion for hardness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningMethod {
    /// Highest predictive entropy first.
    MaxEntropy,
    /// Lowest maximum probability first.
    MinMaxProbability,
    /// Seeded uniform sample of the same cardinality.
    Random,
}

impl MiningMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max_entropy" => Ok(Self::MaxEntropy),
            "min_max_probability" => Ok(Self::MinMaxProbability),
            "random" => Ok(Self::Random),
            other => Err(Error::Parse(format!("unknown mining method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MaxEntropy => "max_entropy",
            Self::MinMaxProbability => "min_max_probability",
            Self::Random => "random",
        }
    }
}

/// Which pools contribute and in what amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningMode {
    /// Top-k foreground plus top-k background.
    BalancedFgBg,
    /// Top-k foreground only.
    FgOnly,
    /// Every foreground plus an equal number of background.
    All,
}

impl MiningMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "balanced_fg_bg" => Ok(Self::BalancedFgBg),
            "fg_only" => Ok(Self::FgOnly),
            "all" => Ok(Self::All),
            other => Err(Error::Parse(format!("unknown mining mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BalancedFgBg => "balanced_fg_bg",
            Self::FgOnly => "fg_only",
            Self::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    /// Per-pool selection count for the top-k modes.
    pub k: usize,
    pub method: MiningMethod,
    pub mode: MiningMode,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            k: 3,
            method: MiningMethod::MinMaxProbability,
            mode: MiningMode::BalancedFgBg,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("mining k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Select hard examples from a batch. `probs` and `is_foreground` run
/// parallel to the batch; the result holds batch indices, foreground picks
/// first. Pools smaller than the requested count are taken whole. The rng
/// is only consumed by the random method.
pub fn mine_hard_examples(
    probs: &[ProbVector],
    is_foreground: &[bool],
    config: &MiningConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    config.validate()?;
    if probs.len() != is_foreground.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability vectors against {} foreground flags",
            probs.len(),
            is_foreground.len()
        )));
    }
    let fg: Vec<usize> = (0..probs.len()).filter(|&i| is_foreground[i]).collect();
    let bg: Vec<usize> = (0..probs.len()).filter(|&i| !is_foreground[i]).collect();
    let (want_fg, want_bg) = match config.mode {
        MiningMode::BalancedFgBg => (config.k.min(fg.len()), config.k.min(bg.len())),
        MiningMode::FgOnly => (config.k.min(fg.len()), 0),
        MiningMode::All => (fg.len(), fg.len().min(bg.len())),
    };
    let mut picked = select_from_pool(&fg, probs, config.method, want_fg, rng);
    picked.extend(select_from_pool(&bg, probs, config.method, want_bg, rng));
    Ok(picked)
}

fn select_from_pool(
    pool: &[usize],
    probs: &[ProbVector],
    method: MiningMethod,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    match method {
        MiningMethod::MaxEntropy => {
            let mut ranked: Vec<(f64, usize)> =
                pool.iter().map(|&i| (entropy(&probs[i]), i)).collect();
            // Stable sort keeps equal-uncertainty candidates in index order.
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            ranked.into_iter().take(count).map(|(_, i)| i).collect()
        }
        MiningMethod::MinMaxProbability => {
            let mut ranked: Vec<(f64, usize)> =
                pool.iter().map(|&i| (probs[i].max(), i)).collect();
            ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            ranked.into_iter().take(count).map(|(_, i)| i).collect()
        }
        MiningMethod::Random => {
            use rand::Rng;
            let mut pool = pool.to_vec();
            // Partial Fisher-Yates: the first `count` slots end up a uniform
            // draw without replacement.
            for i in 0..count.min(pool.len()) {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(count);
            pool
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pv(values: &[f64]) -> ProbVector {
        ProbVector::new(values.to_vec()).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn max_entropy_prefers_the_uniform_prediction() {
        let probs = vec![pv(&[0.9, 0.05, 0.05]), pv(&[0.34, 0.33, 0.33])];
        let cfg = MiningConfig {
            k: 1,
            method: MiningMethod::MaxEntropy,
            mode: MiningMode::FgOnly,
        };
        let picked = mine_hard_examples(&probs, &[true, true], &cfg, &mut rng()).unwrap();
        assert_eq!(picked, vec![1]);
    }

    #[test]
    fn min_max_probability_prefers_the_flat_prediction() {
        let probs = vec![pv(&[0.9, 0.05, 0.05]), pv(&[0.34, 0.33, 0.33])];
        let cfg = MiningConfig {
            k: 1,
            method: MiningMethod::MinMaxProbability,
            mode: MiningMode::FgOnly,
        };
        let picked = mine_hard_examples(&probs, &[true, true], &cfg, &mut rng()).unwrap();
        assert_eq!(picked, vec![1]);
    }

    #[test]
    fn oversized_k_returns_the_whole_pool() {
        let probs = vec![pv(&[0.6, 0.4]), pv(&[0.5, 0.5])];
        let cfg = MiningConfig {
            k: 10,
            method: MiningMethod::MaxEntropy,
            mode: MiningMode::BalancedFgBg,
        };
        let picked = mine_hard_examples(&probs, &[true, false], &cfg, &mut rng()).unwrap();
        assert_eq!(picked.len(), 2);
    }

    #[test]
    fn balanced_mode_takes_k_from_each_pool() {
        let probs: Vec<ProbVector> = (0..8)
            .map(|i| {
                let p = 0.5 + 0.05 * i as f64;
                pv(&[p, 1.0 - p])
            })
            .collect();
        let fg: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let cfg = MiningConfig {
            k: 2,
            method: MiningMethod::MinMaxProbability,
            mode: MiningMode::BalancedFgBg,
        };
        let picked = mine_hard_examples(&probs, &fg, &cfg, &mut rng()).unwrap();
        // Flattest distributions sit at the low indices of each pool.
        assert_eq!(picked, vec![0, 1, 4, 5]);
    }

    #[test]
    fn fg_only_ignores_background() {
        let probs = vec![pv(&[0.5, 0.5]), pv(&[0.5, 0.5])];
        let cfg = MiningConfig {
            k: 5,
            method: MiningMethod::MaxEntropy,
            mode: MiningMode::FgOnly,
        };
        let picked = mine_hard_examples(&probs, &[false, true], &cfg, &mut rng()).unwrap();
        assert_eq!(picked, vec![1]);
    }

    #[test]
    fn all_mode_balances_background_to_foreground() {
        let probs: Vec<ProbVector> = (0..6).map(|_| pv(&[0.5, 0.5])).collect();
        let fg = [true, true, false, false, false, false];
        let cfg = MiningConfig {
            k: 1,
            method: MiningMethod::MaxEntropy,
            mode: MiningMode::All,
        };
        let picked = mine_hard_examples(&probs, &fg, &cfg, &mut rng()).unwrap();
        // Every foreground, then an equal number of background.
        assert_eq!(picked.len(), 4);
        assert_eq!(&picked[..2], &[0, 1]);
        assert!(picked[2..].iter().all(|&i| !fg[i]));
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let probs = vec![pv(&[0.5, 0.5]), pv(&[0.5, 0.5]), pv(&[0.5, 0.5])];
        let cfg = MiningConfig {
            k: 2,
            method: MiningMethod::MaxEntropy,
            mode: MiningMode::FgOnly,
        };
        let picked = mine_hard_examples(&probs, &[true, true, true], &cfg, &mut rng()).unwrap();
        assert_eq!(picked, vec![0, 1]);
        let cfg = MiningConfig {
            method: MiningMethod::MinMaxProbability,
            ..cfg
        };
        let picked = mine_hard_examples(&probs, &[true, true, true], &cfg, &mut rng()).unwrap();
        assert_eq!(picked, vec![0, 1]);
    }

    #[test]
    fn random_mode_is_reproducible_and_within_pools() {
        let probs: Vec<ProbVector> = (0..10).map(|_| pv(&[0.7, 0.3])).collect();
        let fg: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let cfg = MiningConfig {
            k: 3,
            method: MiningMethod::Random,
            mode: MiningMode::BalancedFgBg,
        };
        let a = mine_hard_examples(&probs, &fg, &cfg, &mut rng()).unwrap();
        let b = mine_hard_examples(&probs, &fg, &cfg, &mut rng()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a[..3].iter().all(|&i| fg[i]));
        assert!(a[3..].iter().all(|&i| !fg[i]));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 6, "no index selected twice");
    }

    #[test]
    fn selection_dominates_unselected_candidates() {
        let probs: Vec<ProbVector> = (0..7)
            .map(|i| {
                let p = 0.2 + 0.1 * i as f64;
                pv(&[p, 1.0 - p])
            })
            .collect();
        let fg = vec![true; 7];
        let cfg = MiningConfig {
            k: 3,
            method: MiningMethod::MaxEntropy,
            mode: MiningMode::FgOnly,
        };
        let picked = mine_hard_examples(&probs, &fg, &cfg, &mut rng()).unwrap();
        let unpicked: Vec<usize> = (0..7).filter(|i| !picked.contains(i)).collect();
        for &s in &picked {
            for &u in &unpicked {
                assert!(entropy(&probs[s]) >= entropy(&probs[u]));
            }
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let probs = vec![pv(&[0.5, 0.5])];
        assert!(mine_hard_examples(&probs, &[true, false], &MiningConfig::default(), &mut rng())
            .is_err());
        let bad = MiningConfig {
            k: 0,
            ..Default::default()
        };
        assert!(mine_hard_examples(&probs, &[true], &bad, &mut rng()).is_err());
    }
}
