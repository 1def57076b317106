//! The gradient-guided comparison attack: iterative single-feature
//! addition steered by a conventionally trained substitute network.
//!
//! Where the generative attack learns a distribution over adversarial
//! examples and listens to the black box while doing so, this baseline
//! walks each malware vector uphill-to-benign one feature at a time,
//! trusting the substitute's input gradients. Each active sample flips the
//! absent feature whose partial derivative promises the largest drop in
//! predicted maliciousness and stops as soon as the substitute is
//! convinced — which is precisely its weakness: the black box usually is
//! not. The optional retraining variant refits the substitute between
//! iterations on black-box verdicts of the evolving adversarial set.

use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};

use crate::dataset::{Label, LabeledDataset, SplitPlan};
use crate::detectors::BlackBoxDetector;
use crate::error::{Error, Result};
use crate::malgan::SubstituteDetector;
use crate::neuralnet::FitConfig;
use crate::seed;

/// Whether the substitute is refit on black-box verdicts between
/// iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrainMode {
    Off,
    On,
}

impl FromStr for RetrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<RetrainMode> {
        match s {
            "off" => Ok(RetrainMode::Off),
            "on" => Ok(RetrainMode::On),
            other => Err(Error::Usage(format!(
                "unknown retrain mode `{other}` (expected `off` or `on`)"
            ))),
        }
    }
}

impl std::fmt::Display for RetrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RetrainMode::Off => "off",
            RetrainMode::On => "on",
        })
    }
}

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    /// Iteration cap; at most one feature per sample is added per
    /// iteration, so the feature count is a natural ceiling.
    pub max_iters: usize,
    /// Epochs for the initial ground-truth substitute fit.
    pub substitute_epochs: usize,
    /// Epochs for each between-iteration refit in `RetrainMode::On`.
    pub retrain_epochs: usize,
    pub batch: usize,
    /// Learning rate of the between-iteration refits. Deliberately gentler
    /// than the initial fit: refits this weak still memorise the black
    /// box's verdicts on the attacker's own rows (driving the training-set
    /// TPR down) while generalising little to held-out malware — the
    /// train/test split the retraining variant is known for.
    pub retrain_learning_rate: f64,
    pub seed: u64,
    pub retrain: RetrainMode,
}

impl Default for BaselineConfig {
    fn default() -> BaselineConfig {
        BaselineConfig {
            max_iters: 160,
            substitute_epochs: 5,
            retrain_epochs: 3,
            batch: 128,
            retrain_learning_rate: 5e-4,
            seed: 1,
            retrain: RetrainMode::Off,
        }
    }
}

/// The evolving adversarial candidates of one attack run. A sample that is
/// done — the substitute called it benign, or it has no profitable feature
/// left to add — is frozen and never touched again.
#[derive(Debug, Clone)]
pub struct IterativeAttackState {
    current: Array2<f64>,
    done: Vec<bool>,
    iteration: usize,
}

impl IterativeAttackState {
    pub fn new(malware: &Array2<f64>) -> Result<IterativeAttackState> {
        if malware.nrows() == 0 {
            return Err(Error::Sizing("attack needs at least one sample".into()));
        }
        if malware.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Usage("attack inputs must be binary".into()));
        }
        Ok(IterativeAttackState {
            current: malware.clone(),
            done: vec![false; malware.nrows()],
            iteration: 0,
        })
    }

    pub fn current(&self) -> &Array2<f64> {
        &self.current
    }

    pub fn done_mask(&self) -> &[bool] {
        &self.done
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn all_done(&self) -> bool {
        self.done.iter().all(|&d| d)
    }

    pub fn done_fraction(&self) -> f64 {
        self.done.iter().filter(|&&d| d).count() as f64 / self.done.len() as f64
    }

    /// One sweep over the active samples: mark a sample done when the
    /// substitute already calls it benign or no absent feature has a
    /// negative partial derivative; otherwise flip the absent feature with
    /// the steepest descent direction (ties to the lowest index). Returns
    /// the number of flips performed. With a linear substitute every flip
    /// provably lowers the predicted probability; deeper substitutes offer
    /// no such guarantee and none is asserted.
    pub fn advance(&mut self, substitute: &SubstituteDetector) -> Result<usize> {
        let (out, trace) = substitute.net().forward_trace(&self.current)?;
        let upstream = Array2::ones(out.dim());
        let input_grads = substitute.net().backward(&trace, &upstream)?.input;

        let mut flips = 0;
        for i in 0..self.current.nrows() {
            if self.done[i] {
                continue;
            }
            if out[(i, 0)] < 0.5 {
                self.done[i] = true;
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for d in 0..self.current.ncols() {
                if self.current[(i, d)] != 0.0 {
                    continue;
                }
                let g = input_grads[(i, d)];
                if g < 0.0 && best.map_or(true, |(_, bg)| g < bg) {
                    best = Some((d, g));
                }
            }
            match best {
                Some((d, _)) => {
                    self.current[(i, d)] = 1.0;
                    flips += 1;
                }
                None => self.done[i] = true,
            }
        }
        self.iteration += 1;
        Ok(flips)
    }
}

/// One row of `curve.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub tpr_train: f64,
    pub tpr_test: f64,
    pub done_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub curve: Vec<IterationRecord>,
    pub adversarial_train: Array2<f64>,
    pub adversarial_test: Array2<f64>,
    pub final_tpr_train: f64,
    pub final_tpr_test: f64,
}

/// Trains a substitute on ground-truth labels of the given rows — the
/// conventional supervised fit this attack starts from, in contrast to the
/// generative attack's black-box-label-only substitute.
pub fn train_substitute_supervised(
    ds: &LabeledDataset,
    indices: &[usize],
    epochs: usize,
    seed_value: u64,
) -> Result<SubstituteDetector> {
    if indices.is_empty() {
        return Err(Error::Sizing("substitute training set is empty".into()));
    }
    let x = ds.matrix(indices);
    let y = Array2::from_shape_fn((indices.len(), 1), |(r, _)| {
        f64::from(u8::from(ds.label(indices[r]).is_malware()))
    });
    let mut substitute = SubstituteDetector::new(ds.feature_count(), seed::derive(seed_value, 0xb5))?;
    crate::neuralnet::fit_binary(
        substitute.net_mut(),
        &x,
        &y,
        None,
        &FitConfig {
            epochs,
            batch: 128,
            learning_rate: 1e-3,
            seed: seed::derive(seed_value, 0xb5 + 1),
            patience: None,
        },
    )?;
    Ok(substitute)
}

/// Runs the iterative attack over the attacker-train and test malware and
/// reports the black-box TPR on both after every iteration. The substitute
/// guides; the black box only ever judges (and, with retraining on, labels
/// the refit data).
pub fn gradient_attack(
    substitute: &SubstituteDetector,
    ds: &LabeledDataset,
    plan: &SplitPlan,
    blackbox: &BlackBoxDetector,
    cfg: &BaselineConfig,
) -> Result<BaselineOutcome> {
    if cfg.max_iters < 1 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    let train_mal_idx = ds.filter_indices(&plan.attacker_train, Label::Malware);
    let test_mal_idx = ds.filter_indices(&plan.test, Label::Malware);
    if train_mal_idx.is_empty() || test_mal_idx.is_empty() {
        return Err(Error::Sizing(
            "attacker-train and test splits both need malware".into(),
        ));
    }
    let train_mal = ds.matrix(&train_mal_idx);
    let test_mal = ds.matrix(&test_mal_idx);
    let n_train = train_mal.nrows();

    let benign_train_idx = ds.filter_indices(&plan.attacker_train, Label::Benign);
    let benign_train = ds.matrix(&benign_train_idx);

    let joined = concatenate(Axis(0), &[train_mal.view(), test_mal.view()])
        .expect("same feature count");
    let mut state = IterativeAttackState::new(&joined)?;
    let mut live = substitute.clone();
    let mut curve = Vec::new();

    for iter in 1..=cfg.max_iters {
        state.advance(&live)?;
        let adv_train = state.current().slice(ndarray::s![..n_train, ..]).to_owned();
        let adv_test = state.current().slice(ndarray::s![n_train.., ..]).to_owned();
        curve.push(IterationRecord {
            iteration: iter,
            tpr_train: blackbox.true_positive_rate(&adv_train)?,
            tpr_test: blackbox.true_positive_rate(&adv_test)?,
            done_fraction: state.done_fraction(),
        });
        if state.all_done() {
            break;
        }
        if cfg.retrain == RetrainMode::On {
            live = retrain_on_verdicts(
                ds,
                &benign_train,
                &adv_train,
                blackbox,
                cfg,
                seed::derive2(cfg.seed, 0xba5e, iter as u64),
            )?;
        }
    }

    let last = curve.last().expect("max_iters >= 1 ran at least once");
    Ok(BaselineOutcome {
        final_tpr_train: last.tpr_train,
        final_tpr_test: last.tpr_test,
        adversarial_train: state.current().slice(ndarray::s![..n_train, ..]).to_owned(),
        adversarial_test: state.current().slice(ndarray::s![n_train.., ..]).to_owned(),
        curve,
    })
}

/// From-scratch substitute refit on the attacker's training set with its
/// malware replaced by the current adversarial versions, labeled by the
/// black box.
fn retrain_on_verdicts(
    ds: &LabeledDataset,
    benign_train: &Array2<f64>,
    adv_train: &Array2<f64>,
    blackbox: &BlackBoxDetector,
    cfg: &BaselineConfig,
    seed_value: u64,
) -> Result<SubstituteDetector> {
    let x = concatenate(Axis(0), &[benign_train.view(), adv_train.view()])
        .expect("same feature count");
    let verdicts = blackbox.predict(&x)?;
    let mut y = Array2::zeros((x.nrows(), 1));
    for (i, v) in verdicts.iter().enumerate() {
        y[(i, 0)] = f64::from(u8::from(v.is_malware()));
    }
    let mut fresh = SubstituteDetector::new(ds.feature_count(), seed::derive(seed_value, 0x5c))?;
    crate::neuralnet::fit_binary(
        fresh.net_mut(),
        &x,
        &y,
        None,
        &FitConfig {
            epochs: cfg.retrain_epochs,
            batch: cfg.batch,
            learning_rate: cfg.retrain_learning_rate,
            seed: seed::derive(seed_value, 0x5c + 1),
            patience: None,
        },
    )?;
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_split, SplitMode, SyntheticSpec};
    use crate::detectors::DetectorKind;
    use crate::neuralnet::DenseNetwork;
    use ndarray::{array, Array1};

    /// Single linear layer (sigmoid output) with handpicked weights.
    fn linear_substitute(weights: &[f64], bias: f64) -> SubstituteDetector {
        let w = Array2::from_shape_vec((weights.len(), 1), weights.to_vec()).unwrap();
        let net = DenseNetwork::from_params(
            vec![weights.len(), 1],
            vec![w],
            vec![Array1::from_elem(1, bias)],
        )
        .unwrap();
        SubstituteDetector::from_net(net).unwrap()
    }

    #[test]
    fn linear_saliency_flips_most_negative_weight() {
        // Gradient of σ(w·x+b) w.r.t. x is σ'·w: the sign and order follow
        // the weights, so the flip must pick the most negative weight among
        // absent features.
        let sub = linear_substitute(&[0.5, -0.3, -0.7, 0.2], 2.0);
        let x = array![[1.0, 0.0, 0.0, 0.0]];
        let mut state = IterativeAttackState::new(&x).unwrap();
        let flips = state.advance(&sub).unwrap();
        assert_eq!(flips, 1);
        assert_eq!(state.current(), &array![[1.0, 0.0, 1.0, 0.0]]);
        assert!(!state.done_mask()[0]);

        // Next-steepest is -0.3.
        state.advance(&sub).unwrap();
        assert_eq!(state.current(), &array![[1.0, 1.0, 1.0, 0.0]]);
    }

    #[test]
    fn nonnegative_gradients_finish_without_evasion() {
        let sub = linear_substitute(&[0.5, 0.4, 0.0, 0.2], 2.0);
        let x = array![[1.0, 0.0, 0.0, 0.0]];
        let mut state = IterativeAttackState::new(&x).unwrap();
        let flips = state.advance(&sub).unwrap();
        assert_eq!(flips, 0);
        assert!(state.done_mask()[0], "no profitable feature: done");
        assert_eq!(state.current(), &x, "nothing was modified");
    }

    #[test]
    fn already_benign_sample_is_left_alone() {
        // Bias -1 with one active positive weight: σ(z) < 0.5 from the
        // start, so the sample is done before any flip.
        let sub = linear_substitute(&[0.5, -0.9], -1.0);
        let x = array![[1.0, 0.0]];
        let mut state = IterativeAttackState::new(&x).unwrap();
        let flips = state.advance(&sub).unwrap();
        assert_eq!(flips, 0);
        assert!(state.done_mask()[0]);
        assert_eq!(state.current(), &x);
    }

    #[test]
    fn saliency_ties_break_to_lowest_index() {
        let sub = linear_substitute(&[-0.4, 0.1, -0.4, -0.4], 2.0);
        let x = array![[0.0, 0.0, 0.0, 0.0]];
        let mut state = IterativeAttackState::new(&x).unwrap();
        state.advance(&sub).unwrap();
        assert_eq!(state.current(), &array![[1.0, 0.0, 0.0, 0.0]]);
    }

    #[test]
    fn done_samples_are_frozen_and_monotone() {
        let sub = linear_substitute(&[-2.0, -2.0, 1.0], 1.0);
        // Row 0 evades after one flip (σ(1-2) < 0.5); row 1 starts with
        // both negative-weight features set and no profitable flip left.
        let x = array![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
        let mut state = IterativeAttackState::new(&x).unwrap();

        state.advance(&sub).unwrap();
        assert_eq!(state.done_mask(), &[false, true]);
        let after_first = state.current().clone();

        state.advance(&sub).unwrap();
        assert_eq!(state.done_mask(), &[true, true]);
        assert_eq!(
            state.current(),
            &after_first,
            "done rows are never modified"
        );
        assert!(state.all_done());

        // No bit anywhere flipped 1 -> 0.
        for (new, old) in state.current().iter().zip(x.iter()) {
            assert!(new >= old);
        }
    }

    #[test]
    fn zero_max_iters_is_a_config_error() {
        let spec = SyntheticSpec {
            sample_count: 200,
            feature_count: 16,
            discriminative_count: 8,
            ..SyntheticSpec::default()
        };
        let ds = spec.synthesize().unwrap();
        let plan = make_split(&ds, SplitMode::Shared, 3, 4).unwrap();
        let bb = BlackBoxDetector::train(DetectorKind::Lr, &ds, &plan.defender_train, 5).unwrap();
        let sub = train_substitute_supervised(&ds, &plan.attacker_train, 2, 6).unwrap();
        let cfg = BaselineConfig {
            max_iters: 0,
            ..BaselineConfig::default()
        };
        assert!(matches!(
            gradient_attack(&sub, &ds, &plan, &bb, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attack_curve_is_well_formed_and_deterministic() {
        let spec = SyntheticSpec {
            sample_count: 600,
            feature_count: 24,
            discriminative_count: 12,
            ..SyntheticSpec::default()
        };
        let ds = spec.synthesize().unwrap();
        let plan = make_split(&ds, SplitMode::Shared, 3, 4).unwrap();
        let bb = BlackBoxDetector::train(DetectorKind::Lr, &ds, &plan.defender_train, 5).unwrap();
        let sub = train_substitute_supervised(&ds, &plan.attacker_train, 10, 6).unwrap();
        let cfg = BaselineConfig {
            max_iters: 24,
            retrain: RetrainMode::On,
            retrain_epochs: 2,
            ..BaselineConfig::default()
        };
        let a = gradient_attack(&sub, &ds, &plan, &bb, &cfg).unwrap();
        let b = gradient_attack(&sub, &ds, &plan, &bb, &cfg).unwrap();
        assert_eq!(a.curve, b.curve, "same seed, same curve");

        assert!(a.curve.len() <= cfg.max_iters);
        for pair in a.curve.windows(2) {
            assert!(
                pair[1].done_fraction >= pair[0].done_fraction,
                "done fraction only grows"
            );
        }
        let train_mal =
            ds.matrix(&ds.filter_indices(&plan.attacker_train, Label::Malware));
        assert_eq!(a.adversarial_train.nrows(), train_mal.nrows());
        // Superset invariant at the endpoint.
        for (new, old) in a.adversarial_train.iter().zip(train_mal.iter()) {
            assert!(new >= old);
        }
    }
}
