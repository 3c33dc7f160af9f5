//! Finite-difference verification of every analytic gradient in the crate,
//! from the individual losses up to the joint objective through the full
//! toy model's parameter vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bank::{MemoryBank, MemoryBankConfig, Proposal};
use crate::latent::{l2_normalize, softmax, ClassSpace};
use crate::losses::{
    ce_loss, ic_loss, ic_loss_value_at, up_loss, up_weight, DenominatorMode, IcConfig,
    ScheduleConfig, UpConfig, WeightingFn,
};
use crate::trainer::{evaluate_step, FrozenStep, ToyModel, ToyModelConfig};
use crate::Result;

/// Central-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound an analytic gradient must meet.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Central finite differences of a scalar function at `x`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let original = point[i];
        point[i] = original + step;
        let above = f(&point);
        point[i] = original - step;
        let below = f(&point);
        point[i] = original;
        grad.push((above - below) / (2.0 * step));
    }
    grad
}

/// Scale-free disagreement between two gradients: the largest coordinate
/// difference over the larger of the two magnitudes.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-12)
}

/// Compare an analytic gradient against central differences of `f` at `x`.
pub fn check_gradient<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64]) -> f64 {
    let numeric = central_difference(f, x, FD_STEP);
    relative_error(analytic, &numeric)
}

/// Result of one randomized check suite.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn row(name: &str, trials: usize, max_rel_error: f64) -> CheckRow {
    CheckRow {
        name: name.to_string(),
        trials,
        max_rel_error,
        tolerance: GRAD_TOLERANCE,
    }
}

fn random_logits(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-3.0..3.0)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(e) = l2_normalize(&v) {
            return e.as_slice().to_vec();
        }
    }
}

/// Randomized check of the cross-entropy gradient.
pub fn check_ce(seed: u64, trials: usize) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let space = ClassSpace::new(rng.random_range(2..6))?;
        let logits = random_logits(&mut rng, space.num_classes());
        let gt = random_training_gt(&mut rng, &space);
        let out = ce_loss(&logits, gt, &space)?;
        let err = check_gradient(
            |x| ce_loss(x, gt, &space).unwrap().value,
            &logits,
            &out.grad,
        );
        worst = worst.max(err);
    }
    Ok(row("ce", trials, worst))
}

fn random_training_gt(rng: &mut ChaCha8Rng, space: &ClassSpace) -> usize {
    // Knowns plus background, never the unknown index.
    let pick = rng.random_range(0..space.num_known() + 1);
    if pick == space.num_known() {
        space.background_index()
    } else {
        pick
    }
}

/// Randomized check of the unknown-probability gradient for one weighting.
pub fn check_up(seed: u64, trials: usize, weighting: WeightingFn) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + weighting as u64);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let space = ClassSpace::new(rng.random_range(2..6))?;
        let cfg = UpConfig {
            alpha: rng.random_range(0.5..3.0),
            weighting,
            detach_weight: trial % 2 == 1,
            ..Default::default()
        };
        let gt = random_training_gt(&mut rng, &space);
        let logits = well_separated_logits(&mut rng, &space, weighting);
        let out = up_loss(&logits, gt, &space, &cfg)?;
        // Detached weights are constants during backprop, so the numeric
        // reference holds the weight at the base point while the logits move.
        let err = if cfg.detach_weight {
            let w0 = up_weight(&softmax(&logits)?, gt, &cfg);
            let bare = UpConfig {
                weighting: WeightingFn::Identity,
                ..cfg
            };
            check_gradient(
                |x| w0 * up_loss(x, gt, &space, &bare).unwrap().value,
                &logits,
                &out.grad,
            )
        } else {
            check_gradient(
                |x| up_loss(x, gt, &space, &cfg).unwrap().value,
                &logits,
                &out.grad,
            )
        };
        worst = worst.max(err);
    }
    Ok(row(&format!("up[{}]", weighting.name()), trials, worst))
}

/// Draw logits, avoiding near-ties at the top when the weighting switches on
/// the argmax: finite differences straddle that kink and report garbage
/// there even though the analytic one-sided gradient is right.
fn well_separated_logits(
    rng: &mut ChaCha8Rng,
    space: &ClassSpace,
    weighting: WeightingFn,
) -> Vec<f64> {
    for _ in 0..100 {
        let logits = random_logits(rng, space.num_classes());
        if weighting != WeightingFn::PolynomialMaxProb {
            return logits;
        }
        let p = crate::latent::softmax(&logits).unwrap();
        let mut sorted = p.as_slice().to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sorted[0] - sorted[1] > 1e-3 {
            return logits;
        }
    }
    random_logits(rng, space.num_classes())
}

/// Randomized check of the contrastive gradient for one denominator mode.
pub fn check_ic(seed: u64, trials: usize, mode: DenominatorMode) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(10 + (mode == DenominatorMode::SupCon) as u64);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let num_known = rng.random_range(2..5);
        let dim = rng.random_range(2..6);
        let space = ClassSpace::new(num_known)?;
        let mut bank = MemoryBank::new(space);
        let bank_cfg = MemoryBankConfig {
            capacity: 8,
            sample: 8,
            ..Default::default()
        };
        let mut batch = Vec::new();
        for class in 0..num_known {
            for _ in 0..rng.random_range(1..4usize) {
                let v = random_unit(&mut rng, dim);
                batch.push(Proposal {
                    features: v.clone(),
                    embedding: Some(l2_normalize(&v)?),
                    gt_class: class,
                    iou_with_gt: 0.9,
                    is_foreground: true,
                });
            }
        }
        bank.enqueue(&batch, &bank_cfg)?;
        let cfg = IcConfig {
            tau: rng.random_range(0.05..1.0),
            denominator: mode,
            ..Default::default()
        };
        let anchor = l2_normalize(&random_unit(&mut rng, dim))?;
        let class = rng.random_range(0..num_known);
        let out = ic_loss(&anchor, class, &bank, &cfg)?.expect("every class has exemplars");
        let err = check_gradient(
            |x| ic_loss_value_at(x, class, &bank, &cfg).unwrap().unwrap(),
            anchor.as_slice(),
            &out.grad,
        );
        worst = worst.max(err);
    }
    Ok(row(&format!("ic[{}]", mode.name()), trials, worst))
}

/// End-to-end check: the joint loss differentiated through every parameter
/// of the toy model on a frozen batch, bank, and example selection.
pub fn check_joint_model(seed: u64, trials: usize) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(20);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let JointInstance {
            mut model,
            proposals,
            bank,
            mined,
            anchors,
            t,
            up,
            ic,
            schedule,
        } = joint_instance(&mut rng, trial)?;
        let frozen = FrozenStep {
            proposals: &proposals,
            mined: &mined,
            anchors: &anchors,
            t,
        };
        let outcome = evaluate_step(&model, &frozen, &bank, &up, &ic, &schedule)?;
        let params = model.param_vec();
        let numeric = central_difference(
            |p| {
                model.set_param_vec(p).unwrap();
                evaluate_step(&model, &frozen, &bank, &up, &ic, &schedule)
                    .unwrap()
                    .value
            },
            &params,
            FD_STEP,
        );
        model.set_param_vec(&params)?;
        worst = worst.max(relative_error(&outcome.param_grads, &numeric));
    }
    Ok(row("joint[model]", trials, worst))
}

/// One frozen end-to-end scenario for the joint check.
struct JointInstance {
    model: ToyModel,
    proposals: Vec<Proposal>,
    bank: MemoryBank,
    mined: Vec<usize>,
    anchors: Vec<usize>,
    t: u64,
    up: UpConfig,
    ic: IcConfig,
    schedule: ScheduleConfig,
}

fn joint_instance(rng: &mut ChaCha8Rng, trial: usize) -> Result<JointInstance> {
    let space = ClassSpace::new(3)?;
    let model_cfg = ToyModelConfig {
        feature_dim: 5,
        trunk_dim: 4,
        hidden_dim: 6,
        embedding_dim: 3,
        scale: 20.0,
    };
    // Every fourth trial exercises the masked-unknown baseline path, where
    // the unknown logit is a constant and UPL is off.
    let masked = trial % 4 == 3;
    let up = UpConfig {
        alpha: rng.random_range(0.5..3.0),
        beta: if masked { 0.0 } else { 0.5 },
        ..Default::default()
    };
    let ic = IcConfig::default();
    let schedule = ScheduleConfig {
        warmup: 10,
        total_iterations: 100,
    };

    let model = ToyModel::init(&model_cfg, space, masked, rng)?;

    let mut proposals = Vec::new();
    for i in 0..8 {
        let foreground = i < 6;
        let features: Vec<f64> = (0..model_cfg.feature_dim)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        proposals.push(Proposal {
            features,
            embedding: None,
            gt_class: if foreground {
                rng.random_range(0..space.num_known())
            } else {
                space.background_index()
            },
            iou_with_gt: if foreground {
                rng.random_range(0.55..0.95)
            } else {
                rng.random_range(0.0..0.3)
            },
            is_foreground: foreground,
        });
    }
    // Keep head activations away from their ReLU kinks so the difference
    // quotient stays on one side. A draw whose head output degenerates (all
    // hidden units cut off) is resampled like any other near-kink draw.
    for p in &mut proposals {
        for _ in 0..100 {
            let trunk = model.forward_trunk(&p.features)?;
            if let Ok(head) = model.forward_head(&trunk) {
                if head.hidden_pre.iter().all(|h| h.abs() > 1e-3) && head.norm > 0.05 {
                    break;
                }
            }
            for f in &mut p.features {
                *f = 2.0 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let mut bank = MemoryBank::new(space);
    let bank_cfg = MemoryBankConfig {
        capacity: 6,
        sample: 6,
        ..Default::default()
    };
    let dim = model_cfg.embedding_dim;
    let mut exemplars = Vec::new();
    for class in 0..space.num_known() {
        for _ in 0..2 {
            let v = random_unit(rng, dim);
            exemplars.push(Proposal {
                features: v.clone(),
                embedding: Some(l2_normalize(&v)?),
                gt_class: class,
                iou_with_gt: 0.9,
                is_foreground: true,
            });
        }
    }
    bank.enqueue(&exemplars, &bank_cfg)?;

    let mined = if masked { Vec::new() } else { vec![0, 3, 6] };
    let anchors = vec![0, 1, 2];
    let t = if trial.is_multiple_of(3) { 5 } else { 42 };
    Ok(JointInstance {
        model,
        proposals,
        bank,
        mined,
        anchors,
        t,
        up,
        ic,
        schedule,
    })
}

/// The full default suite: every loss, every variant, and the end-to-end
/// model path.
pub fn run_standard_checks(seed: u64, trials: usize) -> Result<Vec<CheckRow>> {
    if trials == 0 {
        return Ok(Vec::new());
    }
    let mut rows = vec![check_ce(seed, trials)?];
    for weighting in [
        WeightingFn::Identity,
        WeightingFn::EntropyOfGt,
        WeightingFn::Polynomial,
        WeightingFn::PolynomialMaxProb,
        WeightingFn::NormalizedEntropy,
    ] {
        rows.push(check_up(seed, trials, weighting)?);
    }
    rows.push(check_ic(seed, trials, DenominatorMode::SupCon)?);
    rows.push(check_ic(seed, trials, DenominatorMode::AsWritten)?);
    rows.push(check_joint_model(seed, trials)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_a_quadratic() {
        // f(x) = sum x_i^2 has gradient 2x.
        let x = [1.0, -2.0, 0.5];
        let grad = central_difference(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        let expect = [2.0, -4.0, 1.0];
        assert!(relative_error(&expect, &grad) < 1e-9);
    }

    #[test]
    fn relative_error_is_scale_free() {
        let a = [1.0, 2.0];
        let b = [1.0, 2.0 + 1e-6];
        let big_a = [1e6, 2e6];
        let big_b = [1e6, 2e6 + 1.0];
        assert!((relative_error(&a, &b) - relative_error(&big_a, &big_b)).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn injected_sign_error_is_caught() {
        let x = [0.4, -1.2, 2.0];
        let correct: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        let flipped: Vec<f64> = correct.iter().map(|g| -g).collect();
        let f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        assert!(check_gradient(f, &x, &correct) < GRAD_TOLERANCE);
        assert!(check_gradient(f, &x, &flipped) > GRAD_TOLERANCE);
    }

    #[test]
    fn zero_trials_yield_an_empty_suite() {
        assert!(run_standard_checks(7, 0).unwrap().is_empty());
    }

    #[test]
    fn small_suite_passes() {
        for row in run_standard_checks(7, 5).unwrap() {
            assert!(row.passed(), "{}: {}", row.name, row.max_rel_error);
        }
    }
}
