//! Browser-sized MalGAN laboratory behind `wasm-bindgen`.
//!
//! The demo exposes three interactions over one lab instance:
//!
//! 1. build a small synthetic dataset and train a chosen black-box
//!    detector on it ([`DemoLab::new`]),
//! 2. step the generator's adversarial training and stream the TPR
//!    collapse curve ([`DemoLab::train_epochs`]),
//! 3. inspect one malware sample's adversarial version bit by bit
//!    ([`DemoLab::attack_sample`]).
//!
//! The exported methods are thin JSON-returning wrappers around
//! [`LabCore`], which is plain Rust and carries the native test suite;
//! results are identical on native and wasm builds because every random
//! decision flows from the caller's seed.

use wasm_bindgen::prelude::*;

use malgan_lab::dataset::{make_split, Label, LabeledDataset, SplitMode, SplitPlan, SyntheticSpec};
use malgan_lab::detectors::{BlackBoxDetector, DetectorKind};
use malgan_lab::malgan::{generate_adversarial, MalganConfig, MalganTrainer, TrainingRecord};
use malgan_lab::seed;
use malgan_lab::{Error, Result};

/// One epoch's worth of curve data, plus the verdict flip counts the page
/// plots alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPoint {
    pub epoch: usize,
    pub tpr_train: f64,
    pub tpr_validation: f64,
}

/// A single attacked sample, decomposed for rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAttack {
    pub index: usize,
    pub original: Vec<u8>,
    pub adversarial: Vec<u8>,
    /// Feature indices present in `adversarial` but not `original`.
    pub added: Vec<usize>,
    pub detected_original: bool,
    pub detected_adversarial: bool,
}

/// The plain-Rust demo state: dataset, split, detector and the live
/// generator/substitute trainer.
pub struct LabCore {
    ds: LabeledDataset,
    plan: SplitPlan,
    detector: BlackBoxDetector,
    trainer: MalganTrainer,
    kind: DetectorKind,
    seed_value: u64,
    epochs_done: usize,
    tpr_original_test: f64,
    test_malware: Vec<usize>,
}

impl LabCore {
    /// Synthesizes `sample_count` × `feature_count` data (half the features
    /// class-informative), trains `kind` on the shared-protocol split and
    /// prepares an untrained generator.
    pub fn new(kind: DetectorKind, sample_count: usize, feature_count: usize, seed_value: u64) -> Result<LabCore> {
        let spec = SyntheticSpec {
            sample_count,
            feature_count,
            discriminative_count: feature_count / 2,
            seed: seed::derive(seed_value, 0xd5),
            ..SyntheticSpec::default()
        };
        let ds = spec.synthesize()?;
        let plan = make_split(
            &ds,
            SplitMode::Shared,
            seed::derive(seed_value, 0xa5),
            seed::derive(seed_value, 0xdf),
        )?;
        let detector =
            BlackBoxDetector::train(kind, &ds, &plan.defender_train, seed::derive(seed_value, 0xbb))?;
        let test_malware = ds.filter_indices(&plan.test, Label::Malware);
        if test_malware.is_empty() {
            return Err(Error::Sizing("demo dataset has no test malware".into()));
        }
        let tpr_original_test = detector.true_positive_rate(&ds.matrix(&test_malware))?;
        let trainer = MalganTrainer::new(
            ds.feature_count(),
            MalganConfig {
                seed: seed::derive(seed_value, 0x6a),
                ..MalganConfig::default()
            },
        )?;
        Ok(LabCore {
            ds,
            plan,
            detector,
            trainer,
            kind,
            seed_value,
            epochs_done: 0,
            tpr_original_test,
            test_malware,
        })
    }

    pub fn kind(&self) -> DetectorKind {
        self.kind
    }

    pub fn feature_count(&self) -> usize {
        self.ds.feature_count()
    }

    pub fn test_malware_count(&self) -> usize {
        self.test_malware.len()
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Detector TPR on the untouched test malware.
    pub fn tpr_original_test(&self) -> f64 {
        self.tpr_original_test
    }

    /// Runs up to `epochs` further training epochs (the trainer warm-starts
    /// from wherever the last call stopped) and returns one point per epoch
    /// actually run.
    pub fn train_epochs(&mut self, epochs: usize) -> Result<Vec<EpochPoint>> {
        if epochs == 0 {
            return Err(Error::Usage("train_epochs needs at least one epoch".into()));
        }
        let outcome =
            self.trainer
                .run_epochs(&self.ds, &self.plan, &self.detector, epochs, None)?;
        self.epochs_done += outcome.epochs_run;
        Ok(outcome
            .records
            .iter()
            .map(|r: &TrainingRecord| EpochPoint {
                epoch: r.epoch,
                tpr_train: r.tpr_train,
                tpr_validation: r.tpr_validation,
            })
            .collect())
    }

    /// Attacks the `sample_index`-th test malware sample with the current
    /// generator (fresh noise per call, deterministic in the call count).
    pub fn attack_sample(&mut self, sample_index: usize) -> Result<SampleAttack> {
        let &row = self
            .test_malware
            .get(sample_index % self.test_malware.len())
            .expect("index is reduced modulo a nonempty list");
        let original_matrix = self.ds.matrix(&[row]);
        let noise_seed = seed::derive2(self.seed_value, 0xa77, self.epochs_done as u64);
        let batch = generate_adversarial(self.trainer.generator(), &original_matrix, noise_seed)?;

        let to_bits = |m: &ndarray::Array2<f64>| -> Vec<u8> {
            m.row(0).iter().map(|&v| u8::from(v > 0.5)).collect()
        };
        let original = to_bits(&batch.originals);
        let adversarial = to_bits(&batch.merged);
        let added = original
            .iter()
            .zip(adversarial.iter())
            .enumerate()
            .filter(|&(_, (&o, &a))| o == 0 && a == 1)
            .map(|(i, _)| i)
            .collect();
        let detected = |m: &ndarray::Array2<f64>| -> Result<bool> {
            Ok(self.detector.predict(m)?[0].is_malware())
        };
        Ok(SampleAttack {
            index: sample_index % self.test_malware.len(),
            original,
            adversarial,
            added,
            detected_original: detected(&batch.originals)?,
            detected_adversarial: detected(&batch.merged)?,
        })
    }
}

fn json_f(v: f64) -> String {
    // JSON has no NaN/Infinity; the demo never produces them, but clamp
    // defensively rather than emit invalid output.
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "null".to_string()
    }
}

fn json_usize_array(values: &[usize]) -> String {
    let items: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("[{}]", items.join(","))
}

fn json_bit_array(values: &[u8]) -> String {
    let items: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("[{}]", items.join(","))
}

pub fn epoch_points_json(points: &[EpochPoint]) -> String {
    let items: Vec<String> = points
        .iter()
        .map(|p| {
            format!(
                "{{\"epoch\":{},\"tprTrain\":{},\"tprVal\":{}}}",
                p.epoch,
                json_f(p.tpr_train),
                json_f(p.tpr_validation)
            )
        })
        .collect();
    format!("[{}]", items.join(","))
}

pub fn sample_attack_json(attack: &SampleAttack) -> String {
    format!(
        "{{\"index\":{},\"original\":{},\"adversarial\":{},\"added\":{},\"detectedOriginal\":{},\"detectedAdversarial\":{}}}",
        attack.index,
        json_bit_array(&attack.original),
        json_bit_array(&attack.adversarial),
        json_usize_array(&attack.added),
        attack.detected_original,
        attack.detected_adversarial
    )
}

/// The browser handle. Methods return JSON strings; the page parses them
/// with `JSON.parse`.
#[wasm_bindgen]
pub struct DemoLab {
    core: LabCore,
}

#[wasm_bindgen]
impl DemoLab {
    /// Builds the lab: synthetic data, trained detector, fresh generator.
    /// `detector` is one of RF, LR, DT, SVM, MLP, VOTE. The seed is a
    /// plain JS number (u32 is seed space enough for a demo).
    #[wasm_bindgen(constructor)]
    pub fn new(
        detector: &str,
        sample_count: usize,
        feature_count: usize,
        seed_value: u32,
    ) -> std::result::Result<DemoLab, JsError> {
        let kind: DetectorKind = detector.parse().map_err(to_js)?;
        let core =
            LabCore::new(kind, sample_count, feature_count, u64::from(seed_value)).map_err(to_js)?;
        Ok(DemoLab { core })
    }

    /// Detector TPR on untouched test malware (the pre-attack reference).
    #[wasm_bindgen(js_name = originalTpr)]
    pub fn original_tpr(&self) -> f64 {
        self.core.tpr_original_test()
    }

    #[wasm_bindgen(js_name = featureCount)]
    pub fn feature_count(&self) -> usize {
        self.core.feature_count()
    }

    #[wasm_bindgen(js_name = testMalwareCount)]
    pub fn test_malware_count(&self) -> usize {
        self.core.test_malware_count()
    }

    #[wasm_bindgen(js_name = epochsDone)]
    pub fn epochs_done(&self) -> usize {
        self.core.epochs_done()
    }

    /// Runs further training epochs; returns a JSON array of
    /// `{epoch, tprTrain, tprVal}` points (cumulative epoch numbers).
    #[wasm_bindgen(js_name = trainEpochs)]
    pub fn train_epochs(&mut self, epochs: usize) -> std::result::Result<String, JsError> {
        let points = self.core.train_epochs(epochs).map_err(to_js)?;
        Ok(epoch_points_json(&points))
    }

    /// Attacks one test malware sample; returns JSON with both bit
    /// vectors, the added feature indices and both detector verdicts.
    #[wasm_bindgen(js_name = attackSample)]
    pub fn attack_sample(&mut self, sample_index: usize) -> std::result::Result<String, JsError> {
        let attack = self.core.attack_sample(sample_index).map_err(to_js)?;
        Ok(sample_attack_json(&attack))
    }
}

fn to_js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}
