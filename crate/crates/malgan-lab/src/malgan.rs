//! The attack itself: a generator that adds features to malware vectors, a
//! substitute detector distilled from black-box answers, and the
//! adversarial training loop connecting them.
//!
//! The generator maps `(malware bits, noise)` to a real vector `o`; the
//! smooth merge `max(m, o)` lets gradients reach the generator only
//! through features the malware does not already have, and binarization
//! (`o > 0.5`, then OR with `m`) produces the vectors actually submitted
//! to the black box. Features are only ever added, never removed.

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;

use crate::dataset::{minibatches, Label, LabeledDataset, SplitPlan};
use crate::detectors::BlackBoxDetector;
use crate::error::{Error, Result};
use crate::neuralnet::{AdamState, DenseNetwork, ForwardTrace, PROB_EPSILON};
use crate::seed;

/// Width of both hidden layers (generator and substitute).
const HIDDEN: usize = 256;

/// Training options for [`train_malgan`] / [`MalganTrainer`].
#[derive(Debug, Clone)]
pub struct MalganConfig {
    /// Noise vector length Z.
    pub noise_dim: usize,
    /// Epoch cap for one training call.
    pub max_epochs: usize,
    /// Combined (malware + benign) minibatch size; split by class ratio.
    pub batch_total: usize,
    /// Adam learning rate for both networks.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MalganConfig {
    fn default() -> Self {
        MalganConfig {
            noise_dim: 10,
            max_epochs: 100,
            batch_total: 128,
            learning_rate: 0.001,
            seed: 1,
        }
    }
}

/// Uniform noise on [0, 1), `count` rows by `z` columns.
pub fn sample_noise(count: usize, z: usize, seed_value: u64) -> Result<Array2<f64>> {
    if count == 0 || z == 0 {
        return Err(Error::Config(format!(
            "noise matrix needs positive dimensions, got {count}x{z}"
        )));
    }
    let mut rng = seed::rng(seed_value);
    Ok(Array2::from_shape_fn((count, z), |_| rng.gen_range(0.0..1.0)))
}

fn check_same_shape(m: &Array2<f64>, o: &Array2<f64>) -> Result<()> {
    if m.dim() != o.dim() {
        return Err(Error::Shape(format!(
            "malware batch is {:?}, generator output is {:?}",
            m.dim(),
            o.dim()
        )));
    }
    Ok(())
}

/// Element-wise `max(m, o)`: the differentiable stand-in for OR. With
/// binary `m` and `o` in (0,1), the gradient toward `o` is 1 where `m` is
/// 0 and exactly 0 where `m` is 1 — present features block the gradient.
pub fn smooth_merge(m: &Array2<f64>, o: &Array2<f64>) -> Result<Array2<f64>> {
    check_same_shape(m, o)?;
    let mut out = o.clone();
    out.zip_mut_with(m, |v, &mv| *v = v.max(mv));
    Ok(out)
}

/// Gradient mask of [`smooth_merge`] with respect to `o`: 1 − m.
pub fn merge_gradient_mask(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| 1.0 - v)
}

/// The discrete merge: `m OR (o > 0.5)`. Strictly greater — a raw output
/// of exactly 0.5 adds nothing. Equals `binarize(smooth_merge(m, o))`.
pub fn binarize_and_or(m: &Array2<f64>, o: &Array2<f64>) -> Result<Array2<f64>> {
    check_same_shape(m, o)?;
    let mut out = Array2::zeros(m.dim());
    out.zip_mut_with(o, |v, &ov| *v = f64::from(ov > 0.5));
    out.zip_mut_with(m, |v, &mv| *v = f64::from(*v > 0.5 || mv > 0.5));
    Ok(out)
}

/// Just the added-features mask `o > 0.5` (the o′ of the merge).
pub fn binarize(o: &Array2<f64>) -> Array2<f64> {
    o.mapv(|v| f64::from(v > 0.5))
}

/// Substitute-detector loss: the sum of two per-group mean log losses,
/// grouped by the *black-box* verdicts, plus the gradient with respect to
/// each probability. An empty group contributes nothing; both groups
/// empty is a usage error.
pub fn substitute_loss(
    benign_probs: &Array1<f64>,
    malware_probs: &Array1<f64>,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    if benign_probs.is_empty() && malware_probs.is_empty() {
        return Err(Error::Usage(
            "substitute_loss needs at least one nonempty group".into(),
        ));
    }
    let mut loss = 0.0;
    let mut benign_grad = Array1::zeros(benign_probs.len());
    let nb = benign_probs.len() as f64;
    for (g, &p) in benign_grad.iter_mut().zip(benign_probs.iter()) {
        let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
        loss -= (1.0 - p).ln() / nb;
        *g = 1.0 / ((1.0 - p) * nb);
    }
    let mut malware_grad = Array1::zeros(malware_probs.len());
    let nm = malware_probs.len() as f64;
    for (g, &p) in malware_grad.iter_mut().zip(malware_probs.iter()) {
        let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
        loss -= p.ln() / nm;
        *g = -1.0 / (p * nm);
    }
    Ok((loss, benign_grad, malware_grad))
}

/// Generator loss: mean log of the substitute's malware probability on the
/// smooth adversarial batch. Minimizing it drives those probabilities
/// toward zero. Returns the gradient with respect to each probability.
pub fn generator_loss(adv_probs: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    if adv_probs.is_empty() {
        return Err(Error::Usage("generator_loss needs a nonempty batch".into()));
    }
    let n = adv_probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(adv_probs.len());
    for (g, &p) in grad.iter_mut().zip(adv_probs.iter()) {
        let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
        loss += p.ln() / n;
        *g = 1.0 / (p * n);
    }
    Ok((loss, grad))
}

/// The attacker's generator network: (M+Z)-256-M, sigmoid output.
#[derive(Debug, Clone)]
pub struct Generator {
    net: DenseNetwork,
    feature_count: usize,
    noise_dim: usize,
}

/// Output-bias initialisation for a fresh generator. σ(−2) ≈ 0.12, so an
/// untrained generator adds almost no features; training has to argue each
/// feature above the 0.5 threshold. A 0.5-centred start would add half of
/// all absent features at random, which both evades nothing and strands
/// the network in a heavily saturated region that later rounds of an arms
/// race cannot climb out of.
const OUTPUT_BIAS_INIT: f64 = -2.0;

impl Generator {
    pub fn new(feature_count: usize, noise_dim: usize, seed_value: u64) -> Result<Generator> {
        if feature_count == 0 || noise_dim == 0 {
            return Err(Error::Config(
                "generator needs positive feature and noise dimensions".into(),
            ));
        }
        Ok(Generator {
            net: DenseNetwork::glorot(
                &[feature_count + noise_dim, HIDDEN, feature_count],
                seed_value,
            )?
            .with_output_bias(OUTPUT_BIAS_INIT),
            feature_count,
            noise_dim,
        })
    }

    /// All-zero weights: every raw output is exactly 0.5, so binarization
    /// adds nothing and merged batches equal the originals.
    pub fn zeros(feature_count: usize, noise_dim: usize) -> Result<Generator> {
        Ok(Generator {
            net: DenseNetwork::zeros(&[feature_count + noise_dim, HIDDEN, feature_count])?,
            feature_count,
            noise_dim,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn params_digest(&self) -> String {
        self.net.params_digest()
    }

    /// Raw outputs `o` for a malware batch and matching noise, with the
    /// forward trace needed to push gradients back in.
    fn raw_outputs(
        &self,
        malware: &Array2<f64>,
        noise: &Array2<f64>,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        if malware.ncols() != self.feature_count {
            return Err(Error::Shape(format!(
                "malware batch has {} features, generator wants {}",
                malware.ncols(),
                self.feature_count
            )));
        }
        if noise.nrows() != malware.nrows() || noise.ncols() != self.noise_dim {
            return Err(Error::Shape(format!(
                "noise is {:?}, expected ({}, {})",
                noise.dim(),
                malware.nrows(),
                self.noise_dim
            )));
        }
        let joined = concatenate(Axis(1), &[malware.view(), noise.view()])
            .expect("row counts were checked");
        self.net.forward_trace(&joined)
    }

    pub fn to_checkpoint_string(&self) -> String {
        format!(
            "malgan-generator 1\nnoise {}\n{}",
            self.noise_dim,
            self.net.to_checkpoint_string()
        )
    }

    pub fn from_checkpoint_string(text: &str) -> Result<Generator> {
        let mut split = text.splitn(3, '\n');
        let header = split.next().unwrap_or_default();
        if header != "malgan-generator 1" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected `malgan-generator 1`, got `{header}`"),
            });
        }
        let noise_line = split.next().unwrap_or_default();
        let noise_dim: usize = noise_line
            .strip_prefix("noise ")
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 2,
                msg: format!("expected `noise Z`, got `{noise_line}`"),
            })?;
        let net = DenseNetwork::from_checkpoint_string(split.next().unwrap_or_default())?;
        let feature_count = net.output_size();
        if net.input_size() != feature_count + noise_dim {
            return Err(Error::Shape(format!(
                "generator input {} does not equal features {} + noise {}",
                net.input_size(),
                feature_count,
                noise_dim
            )));
        }
        Ok(Generator {
            net,
            feature_count,
            noise_dim,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Generator> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_string(&text)
    }
}

/// The attacker's differentiable stand-in for the black box: M-256-1.
#[derive(Debug, Clone)]
pub struct SubstituteDetector {
    net: DenseNetwork,
}

impl SubstituteDetector {
    pub fn new(feature_count: usize, seed_value: u64) -> Result<SubstituteDetector> {
        Ok(SubstituteDetector {
            net: DenseNetwork::glorot(&[feature_count, HIDDEN, 1], seed_value)?,
        })
    }

    /// Malware probabilities for a batch, one per row.
    pub fn probabilities(&self, batch: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.forward(batch)?.column(0).to_owned())
    }

    pub fn params_digest(&self) -> String {
        self.net.params_digest()
    }

    pub fn net(&self) -> &DenseNetwork {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut DenseNetwork {
        &mut self.net
    }

    /// Wraps an arbitrary single-output network as a substitute; the
    /// baseline attack's closed-form tests drive it with a linear layer.
    #[cfg(test)]
    pub(crate) fn from_net(net: DenseNetwork) -> Result<SubstituteDetector> {
        if net.output_size() != 1 {
            return Err(Error::Shape(format!(
                "substitute networks emit one probability, got {}",
                net.output_size()
            )));
        }
        Ok(SubstituteDetector { net })
    }
}

/// One generated batch with every intermediate the invariants talk about.
/// Construction verifies the superset invariant, so an `AdversarialBatch`
/// cannot exist with a removed feature.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub originals: Array2<f64>,
    pub noise: Array2<f64>,
    pub raw_outputs: Array2<f64>,
    pub binarized: Array2<f64>,
    pub merged: Array2<f64>,
    pub smooth: Array2<f64>,
}

impl AdversarialBatch {
    fn build(
        originals: Array2<f64>,
        noise: Array2<f64>,
        raw_outputs: Array2<f64>,
    ) -> Result<AdversarialBatch> {
        let smooth = smooth_merge(&originals, &raw_outputs)?;
        let merged = binarize_and_or(&originals, &raw_outputs)?;
        let binarized = binarize(&raw_outputs);
        let batch = AdversarialBatch {
            originals,
            noise,
            raw_outputs,
            binarized,
            merged,
            smooth,
        };
        assert!(
            batch.superset_holds(),
            "superset invariant violated: a feature was removed"
        );
        Ok(batch)
    }

    /// merged AND originals == originals, for every bit.
    pub fn superset_holds(&self) -> bool {
        self.merged
            .iter()
            .zip(self.originals.iter())
            .all(|(&m, &o)| m * o == o)
    }

    pub fn len(&self) -> usize {
        self.originals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.nrows() == 0
    }

    /// Count of features added across the batch.
    pub fn added_features(&self) -> usize {
        self.merged
            .iter()
            .zip(self.originals.iter())
            .filter(|&(&m, &o)| m > 0.5 && o < 0.5)
            .count()
    }
}

/// Runs a trained (or untrained) generator over a malware batch with fresh
/// noise derived from `seed_value`.
pub fn generate_adversarial(
    gen: &Generator,
    malware: &Array2<f64>,
    seed_value: u64,
) -> Result<AdversarialBatch> {
    if malware.nrows() == 0 {
        return Err(Error::Usage("empty malware batch".into()));
    }
    let noise = sample_noise(malware.nrows(), gen.noise_dim(), seed_value)?;
    let (raw, _) = gen.raw_outputs(malware, &noise)?;
    AdversarialBatch::build(malware.clone(), noise, raw)
}

/// One completed training epoch, as reported in `records.csv`.
#[derive(Debug, Clone)]
pub struct TrainingRecord {
    /// 1-based; cumulative across warm-started continuation runs.
    pub epoch: usize,
    /// Black-box TPR on adversarial versions of the attacker's fit-set malware.
    pub tpr_train: f64,
    /// Black-box TPR on adversarial versions of the validation malware.
    pub tpr_validation: f64,
    /// Mean substitute loss over the epoch's steps.
    pub loss_d: f64,
    /// Mean generator loss over the epoch's steps.
    pub loss_g: f64,
    /// Digest of the generator parameters at the end of the epoch; the
    /// best epoch's digest identifies the returned checkpoint.
    pub generator_digest: String,
}

/// Outcome of one training call.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Generator parameters from the best epoch (lowest validation TPR,
    /// earliest on ties).
    pub generator: Generator,
    pub records: Vec<TrainingRecord>,
    pub best_epoch: usize,
    pub best_validation_tpr: f64,
    /// Epochs actually run in this call (≤ the cap when early-stopped).
    pub epochs_run: usize,
}

/// Owns the generator/substitute pair and both optimisers so training can
/// pause and resume (the arms race warm-starts from live weights).
#[derive(Debug, Clone)]
pub struct MalganTrainer {
    cfg: MalganConfig,
    generator: Generator,
    substitute: SubstituteDetector,
    gen_adam: AdamState,
    sub_adam: AdamState,
    /// Completed epochs across all calls.
    epoch: usize,
}

impl MalganTrainer {
    pub fn new(feature_count: usize, cfg: MalganConfig) -> Result<MalganTrainer> {
        let generator = Generator::new(
            feature_count,
            cfg.noise_dim,
            seed::derive(cfg.seed, 0x9e),
        )?;
        let substitute = SubstituteDetector::new(feature_count, seed::derive(cfg.seed, 0x5b))?;
        let gen_adam = AdamState::new(&generator.net, cfg.learning_rate);
        let sub_adam = AdamState::new(&substitute.net, cfg.learning_rate);
        Ok(MalganTrainer {
            cfg,
            generator,
            substitute,
            gen_adam,
            sub_adam,
            epoch: 0,
        })
    }

    /// Live (not best-epoch) generator parameters.
    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    /// Replaces the substitute detector (and its optimiser state) with a
    /// fresh initialization. The arms race calls this when the black box
    /// changes: the substitute's job is to mimic the *current* detector,
    /// and a substitute still confident in the previous round's boundary
    /// first drags the generator toward stale evasions and then, once it
    /// concedes, leaves it in a saturated region with vanishing gradients.
    /// The generator itself always warm-starts.
    pub fn reset_substitute(&mut self, seed_value: u64) -> Result<()> {
        self.substitute = SubstituteDetector::new(self.generator.feature_count(), seed_value)?;
        self.sub_adam = AdamState::new(&self.substitute.net, self.cfg.learning_rate);
        // The generator keeps its weights (that is the warm start) but its
        // optimiser moments describe gradients of an objective that no
        // longer exists; against the new black box they would only shrink
        // and misdirect the first steps.
        self.gen_adam = AdamState::new(&self.generator.net, self.cfg.learning_rate);
        Ok(())
    }

    pub fn substitute(&self) -> &SubstituteDetector {
        &self.substitute
    }

    pub fn completed_epochs(&self) -> usize {
        self.epoch
    }

    /// Runs up to `max_epochs` more epochs against `blackbox`; stops early
    /// once the validation adversarial TPR drops to `stop_threshold` (when
    /// given). Minibatch flow per step: malware batch → generate → benign
    /// batch → black-box labels on merged ∪ benign → one substitute update
    /// → one generator update through the updated substitute.
    pub fn run_epochs(
        &mut self,
        ds: &LabeledDataset,
        plan: &SplitPlan,
        blackbox: &BlackBoxDetector,
        max_epochs: usize,
        stop_threshold: Option<f64>,
    ) -> Result<TrainOutcome> {
        let fit = plan.attacker_fit();
        let fit_malware = ds.matrix(&ds.filter_indices(&fit, Label::Malware));
        let val_malware =
            ds.matrix(&ds.filter_indices(&plan.attacker_validation, Label::Malware));
        if fit_malware.nrows() == 0 || val_malware.nrows() == 0 {
            return Err(Error::Sizing(
                "attacker fit and validation sets both need malware".into(),
            ));
        }

        let mut records = Vec::new();
        let mut best: Option<(usize, f64, Generator)> = None;
        let mut epochs_run = 0;

        for _ in 0..max_epochs {
            self.epoch += 1;
            epochs_run += 1;
            let steps = minibatches(
                ds,
                &fit,
                self.cfg.batch_total,
                seed::derive2(self.cfg.seed, 0xe90c, self.epoch as u64),
            )?;
            let mut loss_d_sum = 0.0;
            let mut loss_g_sum = 0.0;
            for (step, (m_idx, b_idx)) in steps.iter().enumerate() {
                let (ld, lg) = self.training_step(ds, blackbox, m_idx, b_idx, step as u64)?;
                loss_d_sum += ld;
                loss_g_sum += lg;
            }

            let tpr_train = blackbox.true_positive_rate(
                &generate_adversarial(
                    &self.generator,
                    &fit_malware,
                    seed::derive2(self.cfg.seed, 0xe7a1, self.epoch as u64),
                )?
                .merged,
            )?;
            let tpr_validation = blackbox.true_positive_rate(
                &generate_adversarial(
                    &self.generator,
                    &val_malware,
                    seed::derive2(self.cfg.seed, 0xe7a2, self.epoch as u64),
                )?
                .merged,
            )?;

            let n_steps = steps.len().max(1) as f64;
            records.push(TrainingRecord {
                epoch: self.epoch,
                tpr_train,
                tpr_validation,
                loss_d: loss_d_sum / n_steps,
                loss_g: loss_g_sum / n_steps,
                generator_digest: self.generator.params_digest(),
            });

            let improved = best
                .as_ref()
                .map_or(true, |(_, b, _)| tpr_validation < *b);
            if improved {
                best = Some((self.epoch, tpr_validation, self.generator.clone()));
            }
            if let Some(th) = stop_threshold {
                if tpr_validation <= th {
                    break;
                }
            }
        }

        let (best_epoch, best_validation_tpr, generator) =
            best.expect("at least one epoch ran");
        Ok(TrainOutcome {
            generator,
            records,
            best_epoch,
            best_validation_tpr,
            epochs_run,
        })
    }

    /// Arms-race attacker phase: keep training against `blackbox` until the
    /// validation adversarial TPR drops to `threshold`, checking every few
    /// minibatches rather than once per epoch. Epoch-end checks let the
    /// last epoch keep pushing an already-evading generator for dozens of
    /// steps; that surplus saturation is exactly what the next round then
    /// has to climb back out of, so the race only stays winnable when each
    /// phase stops close to its crossing point. Returns the number of
    /// epochs touched (partial epochs count as one) and the last measured
    /// validation TPR; the caller decides what "collapse" means.
    pub fn run_until_evasion(
        &mut self,
        ds: &LabeledDataset,
        plan: &SplitPlan,
        blackbox: &BlackBoxDetector,
        max_epochs: usize,
        threshold: f64,
    ) -> Result<(usize, f64)> {
        const STEPS_PER_CHECK: usize = 6;
        let fit = plan.attacker_fit();
        let val_malware =
            ds.matrix(&ds.filter_indices(&plan.attacker_validation, Label::Malware));
        if val_malware.nrows() == 0 {
            return Err(Error::Sizing("attacker validation set needs malware".into()));
        }
        let mut check: u64 = 0;
        let mut val_tpr = f64::NAN;
        for epoch_in_run in 0..max_epochs {
            self.epoch += 1;
            let steps = minibatches(
                ds,
                &fit,
                self.cfg.batch_total,
                seed::derive2(self.cfg.seed, 0xe90c, self.epoch as u64),
            )?;
            for (step, (m_idx, b_idx)) in steps.iter().enumerate() {
                self.training_step(ds, blackbox, m_idx, b_idx, step as u64)?;
                if (step + 1) % STEPS_PER_CHECK == 0 || step + 1 == steps.len() {
                    check += 1;
                    val_tpr = blackbox.true_positive_rate(
                        &generate_adversarial(
                            &self.generator,
                            &val_malware,
                            seed::derive2(self.cfg.seed, 0xe7a3, check),
                        )?
                        .merged,
                    )?;
                    if val_tpr <= threshold {
                        return Ok((epoch_in_run + 1, val_tpr));
                    }
                }
            }
        }
        Ok((max_epochs, val_tpr))
    }

    /// One minibatch step: substitute update then generator update.
    /// Returns (substitute loss, generator loss).
    fn training_step(
        &mut self,
        ds: &LabeledDataset,
        blackbox: &BlackBoxDetector,
        m_idx: &[usize],
        b_idx: &[usize],
        step: u64,
    ) -> Result<(f64, f64)> {
        let m = ds.matrix(m_idx);
        let b = ds.matrix(b_idx);
        let noise = sample_noise(
            m.nrows(),
            self.cfg.noise_dim,
            seed::derive2(self.cfg.seed, (self.epoch as u64) << 20 | step, 0x2015),
        )?;
        let (raw, gen_trace) = self.generator.raw_outputs(&m, &noise)?;
        let smooth = smooth_merge(&m, &raw)?;
        let merged = binarize_and_or(&m, &raw)?;

        // The black box labels the adversarial examples and the benign
        // programs; those verdicts are the substitute's only supervision.
        let inputs = concatenate(Axis(0), &[merged.view(), b.view()])
            .expect("column counts match");
        let verdicts = blackbox.predict(&inputs)?;

        let (sub_out, sub_trace) = self.substitute.net.forward_trace(&inputs)?;
        let probs = sub_out.column(0).to_owned();
        let bb_benign: Vec<usize> = verdicts
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_malware())
            .map(|(i, _)| i)
            .collect();
        let bb_malware: Vec<usize> = verdicts
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_malware())
            .map(|(i, _)| i)
            .collect();
        let benign_probs = Array1::from_iter(bb_benign.iter().map(|&i| probs[i]));
        let malware_probs = Array1::from_iter(bb_malware.iter().map(|&i| probs[i]));
        let (loss_d, benign_grad, malware_grad) =
            substitute_loss(&benign_probs, &malware_probs)?;
        let mut upstream = Array2::zeros(sub_out.dim());
        for (slot, &i) in bb_benign.iter().enumerate() {
            upstream[(i, 0)] = benign_grad[slot];
        }
        for (slot, &i) in bb_malware.iter().enumerate() {
            upstream[(i, 0)] = malware_grad[slot];
        }
        let sub_grads = self.substitute.net.backward(&sub_trace, &upstream)?;
        self.sub_adam.update(&mut self.substitute.net, &sub_grads)?;

        // Generator step against the just-updated substitute, through the
        // smooth merge. The mask zeroes gradients on present features.
        let (adv_out, adv_trace) = self.substitute.net.forward_trace(&smooth)?;
        let adv_probs = adv_out.column(0).to_owned();
        let (loss_g, adv_grad) = generator_loss(&adv_probs)?;
        let mut adv_upstream = Array2::zeros(adv_out.dim());
        for (i, &g) in adv_grad.iter().enumerate() {
            adv_upstream[(i, 0)] = g;
        }
        let through_sub = self
            .substitute
            .net
            .backward(&adv_trace, &adv_upstream)?
            .input;
        let masked = &through_sub * &merge_gradient_mask(&m);
        let gen_grads = self.generator.net.backward(&gen_trace, &masked)?;
        self.gen_adam.update(&mut self.generator.net, &gen_grads)?;

        Ok((loss_d, loss_g))
    }
}

/// Trains a fresh MalGAN against `blackbox` for up to `cfg.max_epochs`
/// epochs and returns the best-epoch generator with the full record list.
pub fn train_malgan(
    ds: &LabeledDataset,
    plan: &SplitPlan,
    blackbox: &BlackBoxDetector,
    cfg: &MalganConfig,
) -> Result<TrainOutcome> {
    let mut trainer = MalganTrainer::new(ds.feature_count(), cfg.clone())?;
    trainer.run_epochs(ds, plan, blackbox, cfg.max_epochs, None)
}
