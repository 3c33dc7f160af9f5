//! Flat key=value experiment configuration. Nested settings use dotted
//! keys (`upl.alpha=1.0`); `#` starts a comment. Parsing is strict: a key
//! that is not recognized, appears twice, or fails to parse is an error
//! naming the key, and a handful of keys are required. `emit` writes every
//! resolved key back in sorted order so a run's config snapshot is itself
//! a valid config.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::losses::{DenominatorMode, WeightingFn};
use crate::mining::{MiningMethod, MiningMode};
use crate::trainer::{SyntheticWorldConfig, TrainerConfig};
use crate::{Error, Result};

/// A full experiment: the synthetic world plus everything the trainer
/// needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: SyntheticWorldConfig,
    pub trainer: TrainerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = SyntheticWorldConfig::default();
        let mut trainer = TrainerConfig::default();
        trainer.model.feature_dim = world.feature_dim;
        Self { world, trainer }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.trainer.validate()?;
        if self.trainer.model.feature_dim != self.world.feature_dim {
            return Err(Error::InvalidConfig(format!(
                "model feature_dim {} disagrees with world.feature_dim {}",
                self.trainer.model.feature_dim, self.world.feature_dim
            )));
        }
        Ok(())
    }

    /// Overrides every random seed at once, as the --seed flag does.
    pub fn override_seed(&mut self, seed: u64) {
        self.trainer.seed = seed;
        self.world.seed = seed;
    }
}

const REQUIRED_KEYS: [&str; 5] = [
    "total_iterations",
    "learning_rate",
    "batch_size",
    "world.num_known",
    "world.feature_dim",
];

struct KeyMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyMap {
    fn from_text(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "config line {}: expected key=value, got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse(format!("config line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), (lineno + 1, value)).is_some() {
                return Err(Error::Parse(format!(
                    "config line {}: key '{key}' given twice",
                    lineno + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, into: &mut T) -> Result<()> {
        if let Some(v) = self.take(key) {
            *into = v.parse().map_err(|_| {
                Error::InvalidConfig(format!("config key '{key}': cannot parse '{v}'"))
            })?;
        }
        Ok(())
    }

    fn take_with<T>(
        &mut self,
        key: &str,
        into: &mut T,
        parse: impl Fn(&str) -> Result<T>,
    ) -> Result<()> {
        if let Some(v) = self.take(key) {
            *into = parse(&v)
                .map_err(|e| Error::InvalidConfig(format!("config key '{key}': {e}")))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (lineno, _))) = self.entries.into_iter().next() {
            return Err(Error::InvalidConfig(format!(
                "config line {lineno}: unknown key '{key}'"
            )));
        }
        Ok(())
    }
}

/// Parse a config document into a validated experiment configuration.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let mut keys = KeyMap::from_text(text)?;
    for required in REQUIRED_KEYS {
        if !keys.entries.contains_key(required) {
            return Err(Error::InvalidConfig(format!(
                "missing required config key '{required}'"
            )));
        }
    }

    let mut cfg = ExperimentConfig::default();
    let w = &mut cfg.world;
    keys.take_parsed("world.num_known", &mut w.num_known)?;
    keys.take_parsed("world.num_unknown_clusters", &mut w.num_unknown_clusters)?;
    keys.take_parsed("world.feature_dim", &mut w.feature_dim)?;
    keys.take_parsed("world.mean_scale", &mut w.mean_scale)?;
    keys.take_parsed("world.cluster_stddev", &mut w.cluster_stddev)?;
    keys.take_parsed("world.bg_stddev", &mut w.bg_stddev)?;
    keys.take_parsed("world.fg_iou_low", &mut w.fg_iou.0)?;
    keys.take_parsed("world.fg_iou_high", &mut w.fg_iou.1)?;
    keys.take_parsed("world.bg_iou_low", &mut w.bg_iou.0)?;
    keys.take_parsed("world.bg_iou_high", &mut w.bg_iou.1)?;
    keys.take_parsed("world.bg_fraction", &mut w.bg_fraction)?;
    keys.take_parsed("world.seed", &mut w.seed)?;

    let t = &mut cfg.trainer;
    keys.take_parsed("total_iterations", &mut t.total_iterations)?;
    keys.take_parsed("warmup_iterations", &mut t.warmup_iterations)?;
    keys.take_parsed("learning_rate", &mut t.learning_rate)?;
    keys.take_parsed("batch_size", &mut t.batch_size)?;
    keys.take_parsed("eval_known_per_class", &mut t.eval_known_per_class)?;
    keys.take_parsed("eval_unknown_per_cluster", &mut t.eval_unknown_per_cluster)?;
    keys.take_parsed("seed", &mut t.seed)?;

    t.model.feature_dim = cfg.world.feature_dim;
    t.model.trunk_dim = cfg.world.feature_dim;
    keys.take_parsed("model.trunk_dim", &mut t.model.trunk_dim)?;
    keys.take_parsed("model.hidden_dim", &mut t.model.hidden_dim)?;
    keys.take_parsed("model.embedding_dim", &mut t.model.embedding_dim)?;
    keys.take_parsed("model.scale", &mut t.model.scale)?;

    keys.take_parsed("upl.alpha", &mut t.up.alpha)?;
    keys.take_parsed("upl.beta", &mut t.up.beta)?;
    keys.take_with("upl.weighting", &mut t.up.weighting, WeightingFn::parse)?;
    keys.take_parsed("upl.detach_weight", &mut t.up.detach_weight)?;

    keys.take_parsed("ic.tau", &mut t.ic.tau)?;
    keys.take_parsed("ic.gamma0", &mut t.ic.gamma0)?;
    keys.take_with("ic.denominator", &mut t.ic.denominator, DenominatorMode::parse)?;

    keys.take_parsed("bank.capacity", &mut t.bank.capacity)?;
    keys.take_parsed("bank.sample", &mut t.bank.sample)?;
    keys.take_parsed("bank.iou_memory", &mut t.bank.iou_memory)?;
    keys.take_parsed("bank.iou_batch", &mut t.bank.iou_batch)?;

    keys.take_parsed("mining.k", &mut t.mining.k)?;
    keys.take_with("mining.method", &mut t.mining.method, MiningMethod::parse)?;
    keys.take_with("mining.mode", &mut t.mining.mode, MiningMode::parse)?;

    keys.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Write every key of a configuration, sorted, one per line. The output
/// parses back to an equal configuration.
pub fn emit(cfg: &ExperimentConfig) -> String {
    let mut entries: BTreeMap<&'static str, String> = BTreeMap::new();
    let w = &cfg.world;
    entries.insert("world.num_known", w.num_known.to_string());
    entries.insert("world.num_unknown_clusters", w.num_unknown_clusters.to_string());
    entries.insert("world.feature_dim", w.feature_dim.to_string());
    entries.insert("world.mean_scale", w.mean_scale.to_string());
    entries.insert("world.cluster_stddev", w.cluster_stddev.to_string());
    entries.insert("world.bg_stddev", w.bg_stddev.to_string());
    entries.insert("world.fg_iou_low", w.fg_iou.0.to_string());
    entries.insert("world.fg_iou_high", w.fg_iou.1.to_string());
    entries.insert("world.bg_iou_low", w.bg_iou.0.to_string());
    entries.insert("world.bg_iou_high", w.bg_iou.1.to_string());
    entries.insert("world.bg_fraction", w.bg_fraction.to_string());
    entries.insert("world.seed", w.seed.to_string());

    let t = &cfg.trainer;
    entries.insert("total_iterations", t.total_iterations.to_string());
    entries.insert("warmup_iterations", t.warmup_iterations.to_string());
    entries.insert("learning_rate", t.learning_rate.to_string());
    entries.insert("batch_size", t.batch_size.to_string());
    entries.insert("eval_known_per_class", t.eval_known_per_class.to_string());
    entries.insert("eval_unknown_per_cluster", t.eval_unknown_per_cluster.to_string());
    entries.insert("seed", t.seed.to_string());

    entries.insert("model.trunk_dim", t.model.trunk_dim.to_string());
    entries.insert("model.hidden_dim", t.model.hidden_dim.to_string());
    entries.insert("model.embedding_dim", t.model.embedding_dim.to_string());
    entries.insert("model.scale", t.model.scale.to_string());

    entries.insert("upl.alpha", t.up.alpha.to_string());
    entries.insert("upl.beta", t.up.beta.to_string());
    entries.insert("upl.weighting", t.up.weighting.name().to_string());
    entries.insert("upl.detach_weight", t.up.detach_weight.to_string());

    entries.insert("ic.tau", t.ic.tau.to_string());
    entries.insert("ic.gamma0", t.ic.gamma0.to_string());
    entries.insert("ic.denominator", t.ic.denominator.name().to_string());

    entries.insert("bank.capacity", t.bank.capacity.to_string());
    entries.insert("bank.sample", t.bank.sample.to_string());
    entries.insert("bank.iou_memory", t.bank.iou_memory.to_string());
    entries.insert("bank.iou_batch", t.bank.iou_batch.to_string());

    entries.insert("mining.k", t.mining.k.to_string());
    entries.insert("mining.method", t.mining.method.name().to_string());
    entries.insert("mining.mode", t.mining.mode.name().to_string());

    let mut out = String::new();
    for (key, value) in entries {
        writeln!(out, "{key}={value}").expect("string writes cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::UpConfig;

    const MINIMAL: &str = "\
total_iterations=200
learning_rate=0.05
batch_size=16
world.num_known=4
world.feature_dim=8
";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.trainer.total_iterations, 200);
        assert_eq!(cfg.world.num_known, 4);
        assert_eq!(cfg.trainer.model.feature_dim, 8);
        assert_eq!(cfg.trainer.model.trunk_dim, 8, "trunk width follows the world");
        assert_eq!(cfg.trainer.up.beta, UpConfig::default().beta);
        assert_eq!(cfg.trainer.bank.capacity, 256);
    }

    #[test]
    fn missing_required_key_is_named() {
        let err = parse("learning_rate=0.1\n").unwrap_err();
        assert!(err.to_string().contains("total_iterations"), "{err}");
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let text = format!("{MINIMAL}upl.alhpa=2.0\n");
        let err = parse(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("upl.alhpa"), "{msg}");
        assert!(msg.contains("line 6"), "{msg}");
    }

    #[test]
    fn bad_value_is_attributed_to_its_key() {
        let text = MINIMAL.replace("batch_size=16", "batch_size=many");
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let text = format!("{MINIMAL}seed=1\nseed=2\n");
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("'seed'"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = format!("# experiment\n\n{MINIMAL}seed=9 # trailing note\n");
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.trainer.seed, 9);
    }

    #[test]
    fn enums_parse_by_name() {
        let text = format!(
            "{MINIMAL}upl.weighting=entropy_of_gt\nic.denominator=as_written\nmining.method=random\n"
        );
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.trainer.up.weighting, WeightingFn::EntropyOfGt);
        assert_eq!(cfg.trainer.ic.denominator, DenominatorMode::AsWritten);
        assert_eq!(cfg.trainer.mining.method, MiningMethod::Random);

        let text = format!("{MINIMAL}upl.weighting=parabolic\n");
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("upl.weighting"), "{err}");
    }

    #[test]
    fn invalid_settings_are_rejected_after_parsing() {
        let text = MINIMAL.replace("learning_rate=0.05", "learning_rate=-1");
        assert!(parse(&text).is_err());
        let text = format!("{MINIMAL}world.num_unknown_clusters=2\nworld.feature_dim=3\nworld.num_known=5\n");
        assert!(parse(&text).is_err(), "means no longer fit the feature space");
    }

    #[test]
    fn emit_round_trips_exactly() {
        let mut cfg = parse(MINIMAL).unwrap();
        cfg.trainer.learning_rate = 0.015625;
        cfg.trainer.up.weighting = WeightingFn::PolynomialMaxProb;
        cfg.trainer.up.detach_weight = true;
        cfg.world.cluster_stddev = 0.3;
        cfg.world.seed = 1234567;
        let text = emit(&cfg);
        let reparsed = parse(&text).unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(emit(&reparsed), text);
    }

    #[test]
    fn emitted_keys_are_sorted() {
        let text = emit(&parse(MINIMAL).unwrap());
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
    }
}
