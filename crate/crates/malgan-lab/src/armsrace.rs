//! The defender/attacker alternation: retrain the black box on collected
//! adversarial examples, then retrain the generator against the updated
//! black box, for a fixed number of rounds.
//!
//! Each round has two phases. The defender generates adversarial examples
//! from the attacker's *current* generator over its own malware, labels
//! them malware, appends them to its (cumulatively growing) training set
//! and retrains the black box from scratch — after which it detects the
//! examples it retrained on essentially perfectly. The attacker answers by
//! continuing generator training (warm start) against the updated black
//! box, with a freshly initialised substitute, until fresh adversarial
//! examples evade again. On feature-addition attacks the attacker holds
//! the structural advantage: the malware signal lives in features malware
//! *lacks*, so there is always another benign-marker subset the defender
//! has not yet collected.

use ndarray::Array2;

use crate::dataset::{FeatureVector, Label, LabeledDataset, SplitPlan};
use crate::detectors::{BlackBoxDetector, DetectorKind};
use crate::error::{Error, Result};
use crate::malgan::{generate_adversarial, MalganTrainer};
use crate::seed;

#[derive(Debug, Clone)]
pub struct ArmsRaceConfig {
    pub rounds: usize,
    pub detector: DetectorKind,
    /// Attacker phase stops once validation adversarial TPR falls to this
    /// level. Well under the headline evasion bound because the round's
    /// reported TPRs are measured on fresh noise draws (and, for the test
    /// column, malware the attacker never trained on), which sit a few
    /// tenths of a percent above the validation estimate.
    pub stop_tpr: f64,
    /// Epoch cap for each round's attacker phase.
    pub attack_epoch_cap: usize,
    pub seed: u64,
}

impl Default for ArmsRaceConfig {
    fn default() -> ArmsRaceConfig {
        ArmsRaceConfig {
            rounds: 10,
            detector: DetectorKind::Rf,
            stop_tpr: 0.002,
            attack_epoch_cap: 25,
            seed: 1,
        }
    }
}

/// One row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmsRaceRound {
    /// 1-based round number.
    pub round: usize,
    /// Black-box TPR on the adversarial examples it was just retrained on
    /// (the defender-train batch) and on adversarial examples over the
    /// held-out test malware it never saw.
    pub tpr_after_defense_train: f64,
    pub tpr_after_defense_test: f64,
    /// Black-box TPR on freshly generated adversarial examples after the
    /// attacker phase.
    pub tpr_after_attack_train: f64,
    pub tpr_after_attack_test: f64,
    /// Epochs the attacker needed to push validation TPR under the stop
    /// threshold (equals the cap when it never got there).
    pub epochs_to_collapse: usize,
}

#[derive(Debug, Clone)]
pub struct ArmsRaceOutcome {
    pub rounds: Vec<ArmsRaceRound>,
    /// `Some(reason)` when a defender retraining failed and the race was
    /// cut short; the records up to that round are kept.
    pub aborted: Option<String>,
}

/// Runs `cfg.rounds` alternations starting from an already-trained black
/// box and an already-trained generator (inside its trainer, so the
/// attacker phases continue rather than restart).
///
/// The defender's collected adversarial examples are retained across
/// rounds: round r retrains on the original training rows plus all r
/// batches collected so far.
pub fn run_arms_race(
    ds: &LabeledDataset,
    plan: &SplitPlan,
    blackbox: BlackBoxDetector,
    mut trainer: MalganTrainer,
    cfg: &ArmsRaceConfig,
) -> Result<ArmsRaceOutcome> {
    if cfg.rounds < 1 {
        return Err(Error::Config("an arms race needs at least one round".into()));
    }
    if !(cfg.stop_tpr.is_finite() && (0.0..1.0).contains(&cfg.stop_tpr)) {
        return Err(Error::Config(format!(
            "stop_tpr must lie in [0, 1), got {}",
            cfg.stop_tpr
        )));
    }

    if blackbox.feature_count() != ds.feature_count() {
        return Err(Error::Shape(format!(
            "incoming detector covers {} features, dataset has {}",
            blackbox.feature_count(),
            ds.feature_count()
        )));
    }
    let defender_malware = ds.matrix(&ds.filter_indices(&plan.defender_train, Label::Malware));
    let test_malware = ds.matrix(&ds.filter_indices(&plan.test, Label::Malware));
    if defender_malware.nrows() == 0 || test_malware.nrows() == 0 {
        return Err(Error::Sizing(
            "defender-train and test splits both need malware".into(),
        ));
    }

    // Cumulative defender view: original rows first, collected adversarial
    // rows appended round by round.
    let mut samples = ds.vectors(&plan.defender_train);
    let mut labels = ds.labels_at(&plan.defender_train);
    let original_len = samples.len();
    let batch_len = defender_malware.nrows();

    // Each round replaces the detector outright: the defender retrains its
    // kind from scratch on the augmented data, so only the incoming
    // `blackbox`'s role as the already-evaded round-0 detector matters to
    // the caller, not its parameters.
    drop(blackbox);
    let mut rounds = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let r = round as u64;

        // --- Defender phase ---
        // The warm start is the point of the race: the defender phase must
        // leave the generator untouched.
        let generator_before = trainer.generator().params_digest();

        let collected = generate_adversarial(
            trainer.generator(),
            &defender_malware,
            seed::derive2(cfg.seed, 0xdef0, r),
        )?;
        let probe_test = generate_adversarial(
            trainer.generator(),
            &test_malware,
            seed::derive2(cfg.seed, 0xdef1, r),
        )?;
        for row in collected.merged.rows() {
            samples.push(binarized_vector(&row.to_owned())?);
            labels.push(Label::Malware);
        }
        debug_assert_eq!(samples.len(), original_len + round * batch_len);

        let augmented = LabeledDataset::new(samples.clone(), labels.clone(), ds.feature_count())?;
        let all: Vec<usize> = (0..augmented.len()).collect();
        let retrained =
            BlackBoxDetector::train(cfg.detector, &augmented, &all, seed::derive2(cfg.seed, 0x5f, r));
        let bb = match retrained {
            Ok(d) => d,
            Err(e) => {
                return Ok(ArmsRaceOutcome {
                    rounds,
                    aborted: Some(format!("defender retraining failed in round {round}: {e}")),
                });
            }
        };

        let tpr_after_defense_train = bb.true_positive_rate(&collected.merged)?;
        let tpr_after_defense_test = bb.true_positive_rate(&probe_test.merged)?;

        // --- Attacker phase ---
        assert_eq!(
            trainer.generator().params_digest(),
            generator_before,
            "attacker must warm-start from the previous round's generator"
        );
        trainer.reset_substitute(seed::derive2(cfg.seed, 0x50b, r))?;
        let (epochs_to_collapse, _val_tpr) =
            trainer.run_until_evasion(ds, plan, &bb, cfg.attack_epoch_cap, cfg.stop_tpr)?;

        let fresh_train = generate_adversarial(
            trainer.generator(),
            &defender_malware,
            seed::derive2(cfg.seed, 0xf4e0, r),
        )?;
        let fresh_test = generate_adversarial(
            trainer.generator(),
            &test_malware,
            seed::derive2(cfg.seed, 0xf4e1, r),
        )?;

        rounds.push(ArmsRaceRound {
            round,
            tpr_after_defense_train,
            tpr_after_defense_test,
            tpr_after_attack_train: bb.true_positive_rate(&fresh_train.merged)?,
            tpr_after_attack_test: bb.true_positive_rate(&fresh_test.merged)?,
            epochs_to_collapse,
        });
    }

    Ok(ArmsRaceOutcome {
        rounds,
        aborted: None,
    })
}

/// Converts a merged 0/1 row into a feature vector (thresholding is a
/// formality; merged rows are already discrete).
fn binarized_vector(row: &ndarray::Array1<f64>) -> Result<FeatureVector> {
    FeatureVector::new(row.iter().map(|&v| u8::from(v > 0.5)).collect())
}

/// Convenience wrapper used by tests: TPR of `bb` on freshly generated
/// adversarial examples over `malware`.
pub fn fresh_adversarial_tpr(
    bb: &BlackBoxDetector,
    trainer: &MalganTrainer,
    malware: &Array2<f64>,
    seed_value: u64,
) -> Result<f64> {
    let batch = generate_adversarial(trainer.generator(), malware, seed_value)?;
    bb.true_positive_rate(&batch.merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_split, SplitMode, SyntheticSpec};
    use crate::malgan::MalganConfig;

    fn small_setup() -> (LabeledDataset, SplitPlan, BlackBoxDetector, MalganTrainer) {
        let spec = SyntheticSpec {
            sample_count: 900,
            feature_count: 48,
            discriminative_count: 24,
            ..SyntheticSpec::default()
        };
        let ds = spec.synthesize().unwrap();
        let plan = make_split(&ds, SplitMode::Shared, 3, 4).unwrap();
        let bb = BlackBoxDetector::train(DetectorKind::Rf, &ds, &plan.defender_train, 5).unwrap();
        let mut trainer = MalganTrainer::new(
            ds.feature_count(),
            MalganConfig {
                seed: 21,
                ..MalganConfig::default()
            },
        )
        .unwrap();
        trainer
            .run_until_evasion(&ds, &plan, &bb, 30, 0.01)
            .unwrap();
        (ds, plan, bb, trainer)
    }

    #[test]
    fn zero_rounds_is_a_config_error() {
        let (ds, plan, bb, trainer) = small_setup();
        let cfg = ArmsRaceConfig {
            rounds: 0,
            ..ArmsRaceConfig::default()
        };
        assert!(matches!(
            run_arms_race(&ds, &plan, bb, trainer, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn race_produces_one_record_per_round_in_order() {
        let (ds, plan, bb, trainer) = small_setup();
        let cfg = ArmsRaceConfig {
            rounds: 3,
            attack_epoch_cap: 12,
            stop_tpr: 0.01,
            seed: 9,
            ..ArmsRaceConfig::default()
        };
        let out = run_arms_race(&ds, &plan, bb, trainer, &cfg).unwrap();
        assert!(out.aborted.is_none());
        assert_eq!(out.rounds.len(), 3);
        for (i, r) in out.rounds.iter().enumerate() {
            assert_eq!(r.round, i + 1);
            assert!(r.epochs_to_collapse >= 1 && r.epochs_to_collapse <= 12);
            for v in [
                r.tpr_after_defense_train,
                r.tpr_after_defense_test,
                r.tpr_after_attack_train,
                r.tpr_after_attack_test,
            ] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn race_is_deterministic() {
        let (ds, plan, bb, trainer) = small_setup();
        let cfg = ArmsRaceConfig {
            rounds: 2,
            attack_epoch_cap: 10,
            stop_tpr: 0.01,
            seed: 9,
            ..ArmsRaceConfig::default()
        };
        let a = run_arms_race(&ds, &plan, bb.clone(), trainer.clone(), &cfg).unwrap();
        let b = run_arms_race(&ds, &plan, bb, trainer, &cfg).unwrap();
        assert_eq!(a.rounds, b.rounds);
    }

    #[test]
    fn defense_recognizes_what_it_retrained_on() {
        let (ds, plan, bb, trainer) = small_setup();
        let cfg = ArmsRaceConfig {
            rounds: 2,
            attack_epoch_cap: 12,
            stop_tpr: 0.01,
            seed: 9,
            ..ArmsRaceConfig::default()
        };
        let out = run_arms_race(&ds, &plan, bb, trainer, &cfg).unwrap();
        for r in &out.rounds {
            assert!(
                r.tpr_after_defense_train >= 0.95,
                "round {}: defender should catch the batch it retrained on, got {}",
                r.round,
                r.tpr_after_defense_train
            );
        }
    }
}
