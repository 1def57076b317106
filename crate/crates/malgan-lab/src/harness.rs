//! Experiment orchestration and reporting: configuration snapshots, the
//! detector-table experiments, convergence-curve emission, the baseline
//! and arms-race runners, and the acceptance suite behind `accept`.
//!
//! Every run is fully described by a [`RunConfig`]; the snapshot written
//! next to the result CSVs parses back into the identical configuration,
//! so every reported number is recomputable from the artifact directory
//! alone. All CSV floats are fractions in [0, 1] printed with six decimal
//! places.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;

use crate::armsrace::{run_arms_race, ArmsRaceConfig, ArmsRaceOutcome};
use crate::baseline::{
    gradient_attack, train_substitute_supervised, BaselineConfig, BaselineOutcome, RetrainMode,
};
use crate::dataset::{make_split, Label, LabeledDataset, SplitMode, SplitPlan, SyntheticSpec};
use crate::detectors::tree::DecisionTree;
use crate::detectors::{BlackBoxDetector, DetectorKind};
use crate::error::{Error, Result};
use crate::malgan::{
    generate_adversarial, generator_loss, smooth_merge, substitute_loss, train_malgan, Generator,
    MalganConfig, MalganTrainer, TrainingRecord,
};
use crate::neuralnet::DenseNetwork;
use crate::seed;

// ---------------------------------------------------------------------------
// Configuration

/// Everything an experiment needs: the dataset recipe, the split seeds and
/// every component's hyper-parameters. The pinned defaults are the
/// calibrated reference configuration the acceptance suite runs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub spec: SyntheticSpec,
    pub attacker_split_seed: u64,
    pub defender_split_seed: u64,
    /// Seed for every black-box detector training call.
    pub detector_seed: u64,
    pub malgan: MalganConfig,
    pub baseline: BaselineConfig,
    /// Seed of the baseline attack's initial supervised substitute.
    pub baseline_substitute_seed: u64,
    pub armsrace: ArmsRaceConfig,
    /// Noise seeds for the post-training adversarial evaluations over the
    /// train-side and test-side malware.
    pub eval_train_seed: u64,
    pub eval_test_seed: u64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            spec: SyntheticSpec::default(),
            attacker_split_seed: 11,
            defender_split_seed: 12,
            detector_seed: 5,
            malgan: MalganConfig {
                seed: 21,
                ..MalganConfig::default()
            },
            baseline: BaselineConfig {
                seed: 7,
                ..BaselineConfig::default()
            },
            baseline_substitute_seed: 6,
            armsrace: ArmsRaceConfig {
                seed: 17,
                ..ArmsRaceConfig::default()
            },
            eval_train_seed: 31,
            eval_test_seed: 32,
        }
    }
}

impl RunConfig {
    /// Replaces every seed with one derived from a single master seed; the
    /// `--seed` flag routes here.
    pub fn with_master_seed(mut self, master: u64) -> RunConfig {
        self.spec.seed = seed::derive(master, 0xd5);
        self.attacker_split_seed = seed::derive(master, 0xa5);
        self.defender_split_seed = seed::derive(master, 0xdf);
        self.detector_seed = seed::derive(master, 0xbb);
        self.malgan.seed = seed::derive(master, 0x6a);
        self.baseline.seed = seed::derive(master, 0xba);
        self.baseline_substitute_seed = seed::derive(master, 0x5d);
        self.armsrace.seed = seed::derive(master, 0xa2);
        self.eval_train_seed = seed::derive(master, 0xe1);
        self.eval_test_seed = seed::derive(master, 0xe2);
        self
    }

    /// Plain-text key=value snapshot; [`apply_kv_text`](Self::apply_kv_text)
    /// parses the same format, so snapshots round-trip.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("dataset.sample_count", self.spec.sample_count.to_string());
        kv("dataset.feature_count", self.spec.feature_count.to_string());
        kv(
            "dataset.discriminative_count",
            self.spec.discriminative_count.to_string(),
        );
        kv(
            "dataset.malware_on_prob",
            self.spec.malware_on_prob.to_string(),
        );
        kv(
            "dataset.benign_on_prob",
            self.spec.benign_on_prob.to_string(),
        );
        kv(
            "dataset.background_on_prob",
            self.spec.background_on_prob.to_string(),
        );
        kv(
            "dataset.malware_fraction",
            self.spec.malware_fraction.to_string(),
        );
        kv("dataset.seed", self.spec.seed.to_string());
        kv("split.attacker_seed", self.attacker_split_seed.to_string());
        kv("split.defender_seed", self.defender_split_seed.to_string());
        kv("detector.seed", self.detector_seed.to_string());
        kv("malgan.noise_dim", self.malgan.noise_dim.to_string());
        kv("malgan.max_epochs", self.malgan.max_epochs.to_string());
        kv("malgan.batch_total", self.malgan.batch_total.to_string());
        kv("malgan.learning_rate", self.malgan.learning_rate.to_string());
        kv("malgan.seed", self.malgan.seed.to_string());
        kv("baseline.max_iters", self.baseline.max_iters.to_string());
        kv(
            "baseline.substitute_epochs",
            self.baseline.substitute_epochs.to_string(),
        );
        kv(
            "baseline.retrain_epochs",
            self.baseline.retrain_epochs.to_string(),
        );
        kv("baseline.batch", self.baseline.batch.to_string());
        kv(
            "baseline.retrain_learning_rate",
            self.baseline.retrain_learning_rate.to_string(),
        );
        kv("baseline.seed", self.baseline.seed.to_string());
        kv(
            "baseline.substitute_seed",
            self.baseline_substitute_seed.to_string(),
        );
        kv("armsrace.rounds", self.armsrace.rounds.to_string());
        kv("armsrace.detector", self.armsrace.detector.to_string());
        kv("armsrace.stop_tpr", self.armsrace.stop_tpr.to_string());
        kv(
            "armsrace.attack_epoch_cap",
            self.armsrace.attack_epoch_cap.to_string(),
        );
        kv("armsrace.seed", self.armsrace.seed.to_string());
        kv("eval.train_seed", self.eval_train_seed.to_string());
        kv("eval.test_seed", self.eval_test_seed.to_string());
        s
    }

    /// Applies `key=value` lines (blank lines and `#` comments ignored)
    /// over the current configuration.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        fn value<T: std::str::FromStr>(v: &str, key: &str, line: usize) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid value `{v}` for {key}"),
            })
        }
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected key=value, got `{trimmed}`"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "dataset.sample_count" => self.spec.sample_count = value(v, k, line)?,
                "dataset.feature_count" => self.spec.feature_count = value(v, k, line)?,
                "dataset.discriminative_count" => {
                    self.spec.discriminative_count = value(v, k, line)?;
                }
                "dataset.malware_on_prob" => self.spec.malware_on_prob = value(v, k, line)?,
                "dataset.benign_on_prob" => self.spec.benign_on_prob = value(v, k, line)?,
                "dataset.background_on_prob" => self.spec.background_on_prob = value(v, k, line)?,
                "dataset.malware_fraction" => self.spec.malware_fraction = value(v, k, line)?,
                "dataset.seed" => self.spec.seed = value(v, k, line)?,
                "split.attacker_seed" => self.attacker_split_seed = value(v, k, line)?,
                "split.defender_seed" => self.defender_split_seed = value(v, k, line)?,
                "detector.seed" => self.detector_seed = value(v, k, line)?,
                "malgan.noise_dim" => self.malgan.noise_dim = value(v, k, line)?,
                "malgan.max_epochs" => self.malgan.max_epochs = value(v, k, line)?,
                "malgan.batch_total" => self.malgan.batch_total = value(v, k, line)?,
                "malgan.learning_rate" => self.malgan.learning_rate = value(v, k, line)?,
                "malgan.seed" => self.malgan.seed = value(v, k, line)?,
                "baseline.max_iters" => self.baseline.max_iters = value(v, k, line)?,
                "baseline.substitute_epochs" => {
                    self.baseline.substitute_epochs = value(v, k, line)?;
                }
                "baseline.retrain_epochs" => self.baseline.retrain_epochs = value(v, k, line)?,
                "baseline.batch" => self.baseline.batch = value(v, k, line)?,
                "baseline.retrain_learning_rate" => {
                    self.baseline.retrain_learning_rate = value(v, k, line)?;
                }
                "baseline.seed" => self.baseline.seed = value(v, k, line)?,
                "baseline.substitute_seed" => self.baseline_substitute_seed = value(v, k, line)?,
                "armsrace.rounds" => self.armsrace.rounds = value(v, k, line)?,
                "armsrace.detector" => self.armsrace.detector = value(v, k, line)?,
                "armsrace.stop_tpr" => self.armsrace.stop_tpr = value(v, k, line)?,
                "armsrace.attack_epoch_cap" => {
                    self.armsrace.attack_epoch_cap = value(v, k, line)?;
                }
                "armsrace.seed" => self.armsrace.seed = value(v, k, line)?,
                "eval.train_seed" => self.eval_train_seed = value(v, k, line)?,
                "eval.test_seed" => self.eval_test_seed = value(v, k, line)?,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown key `{other}`"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn apply_kv_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_kv_text(&text)
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_text(path: impl AsRef<Path>, content: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Table experiments

/// One detector's row of a table experiment. A failed cell keeps its error
/// message and leaves the measurements empty.
#[derive(Debug, Clone)]
pub struct TableCell {
    pub kind: DetectorKind,
    pub tpr_original_train: Option<f64>,
    pub tpr_original_test: Option<f64>,
    pub tpr_adversarial_train: Option<f64>,
    pub tpr_adversarial_test: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Per-epoch training records backing this cell's convergence curve.
    pub records: Vec<TrainingRecord>,
    /// Best-epoch generator (used for audits and checkpointing).
    pub generator: Option<Generator>,
    pub error: Option<String>,
}

impl TableCell {
    fn failed(kind: DetectorKind, err: &Error) -> TableCell {
        TableCell {
            kind,
            tpr_original_train: None,
            tpr_original_test: None,
            tpr_adversarial_train: None,
            tpr_adversarial_test: None,
            best_epoch: None,
            records: Vec::new(),
            generator: None,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub id: String,
    pub mode: SplitMode,
    pub snapshot: String,
    pub cells: Vec<TableCell>,
}

impl ExperimentReport {
    /// True when any cell failed; the failing cells are identifiable by
    /// their `error` field (and by their empty CSV columns).
    pub fn is_partial(&self) -> bool {
        self.cells.iter().any(|c| c.error.is_some())
    }

    pub fn cell(&self, kind: DetectorKind) -> Option<&TableCell> {
        self.cells.iter().find(|c| c.kind == kind)
    }

    /// Six rows, four TPR columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "detector,tpr_original_train,tpr_original_test,tpr_adversarial_train,tpr_adversarial_test\n",
        );
        for c in &self.cells {
            let col = |v: Option<f64>| v.map(fmt_f).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.kind,
                col(c.tpr_original_train),
                col(c.tpr_original_test),
                col(c.tpr_adversarial_train),
                col(c.tpr_adversarial_test),
            );
        }
        out
    }
}

fn table_cell(
    kind: DetectorKind,
    ds: &LabeledDataset,
    plan: &SplitPlan,
    orig_train_mal: &Array2<f64>,
    orig_test_mal: &Array2<f64>,
    cfg: &RunConfig,
) -> Result<TableCell> {
    let bb = BlackBoxDetector::train(kind, ds, &plan.defender_train, cfg.detector_seed)?;
    let tpr_original_train = bb.true_positive_rate(orig_train_mal)?;
    let tpr_original_test = bb.true_positive_rate(orig_test_mal)?;

    let outcome = train_malgan(ds, plan, &bb, &cfg.malgan)?;
    let adv_train = generate_adversarial(&outcome.generator, orig_train_mal, cfg.eval_train_seed)?;
    let adv_test = generate_adversarial(&outcome.generator, orig_test_mal, cfg.eval_test_seed)?;

    Ok(TableCell {
        kind,
        tpr_original_train: Some(tpr_original_train),
        tpr_original_test: Some(tpr_original_test),
        tpr_adversarial_train: Some(bb.true_positive_rate(&adv_train.merged)?),
        tpr_adversarial_test: Some(bb.true_positive_rate(&adv_test.merged)?),
        best_epoch: Some(outcome.best_epoch),
        records: outcome.records,
        generator: Some(outcome.generator),
        error: None,
    })
}

/// Trains all six detectors and one generator against each, reporting
/// original and best-epoch adversarial TPR on the train and test malware.
///
/// Cells are independent (the dataset and split are shared read-only and
/// every randomized step re-derives its own generator state), so they may
/// run in parallel; the report's row order is fixed regardless.
pub fn run_table_experiment(mode: SplitMode, cfg: &RunConfig) -> Result<ExperimentReport> {
    let ds = cfg.spec.synthesize()?;
    let plan = make_split(&ds, mode, cfg.attacker_split_seed, cfg.defender_split_seed)?;
    let orig_train_mal = ds.matrix(&ds.filter_indices(&plan.defender_train, Label::Malware));
    let orig_test_mal = ds.matrix(&ds.filter_indices(&plan.test, Label::Malware));

    let cells: Vec<TableCell> = DetectorKind::ALL
        .par_iter()
        .map(|&kind| {
            table_cell(kind, &ds, &plan, &orig_train_mal, &orig_test_mal, cfg)
                .unwrap_or_else(|e| TableCell::failed(kind, &e))
        })
        .collect();

    Ok(ExperimentReport {
        id: format!("table-{mode}"),
        mode,
        snapshot: cfg.snapshot(),
        cells,
    })
}

// ---------------------------------------------------------------------------
// Curves and CSV renderers

/// The plottable TPR-vs-epoch curve: `epoch,tpr_train,tpr_val`, no
/// smoothing, one row per record.
pub fn emit_convergence_curve(records: &[TrainingRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Usage("a convergence curve needs records".into()));
    }
    let mut out = String::from("epoch,tpr_train,tpr_val\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{}",
            r.epoch,
            fmt_f(r.tpr_train),
            fmt_f(r.tpr_validation)
        );
    }
    Ok(out)
}

/// The full per-epoch record file: `epoch,tpr_train,tpr_val,loss_d,loss_g`.
pub fn records_csv(records: &[TrainingRecord]) -> String {
    let mut out = String::from("epoch,tpr_train,tpr_val,loss_d,loss_g\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            fmt_f(r.tpr_train),
            fmt_f(r.tpr_validation),
            fmt_f(r.loss_d),
            fmt_f(r.loss_g)
        );
    }
    out
}

pub fn baseline_curve_csv(outcome: &BaselineOutcome) -> String {
    let mut out = String::from("iteration,tpr_train,tpr_test,done_fraction\n");
    for r in &outcome.curve {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.iteration,
            fmt_f(r.tpr_train),
            fmt_f(r.tpr_test),
            fmt_f(r.done_fraction)
        );
    }
    out
}

pub fn rounds_csv(outcome: &ArmsRaceOutcome) -> String {
    let mut out = String::from(
        "round,tpr_after_defense_train,tpr_after_defense_test,tpr_after_attack_train,tpr_after_attack_test,epochs_to_collapse\n",
    );
    for r in &outcome.rounds {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            fmt_f(r.tpr_after_defense_train),
            fmt_f(r.tpr_after_defense_test),
            fmt_f(r.tpr_after_attack_train),
            fmt_f(r.tpr_after_attack_test),
            r.epochs_to_collapse
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Baseline and arms-race runners

pub struct BaselineRun {
    pub outcome: BaselineOutcome,
    pub curve_csv: String,
}

/// Shared-split baseline attack against the given detector kind.
pub fn run_baseline_experiment(
    cfg: &RunConfig,
    kind: DetectorKind,
    retrain: RetrainMode,
) -> Result<BaselineRun> {
    let ds = cfg.spec.synthesize()?;
    let plan = make_split(
        &ds,
        SplitMode::Shared,
        cfg.attacker_split_seed,
        cfg.defender_split_seed,
    )?;
    let bb = BlackBoxDetector::train(kind, &ds, &plan.defender_train, cfg.detector_seed)?;
    let substitute = train_substitute_supervised(
        &ds,
        &plan.attacker_train,
        cfg.baseline.substitute_epochs,
        cfg.baseline_substitute_seed,
    )?;
    let outcome = gradient_attack(
        &substitute,
        &ds,
        &plan,
        &bb,
        &BaselineConfig {
            retrain,
            ..cfg.baseline.clone()
        },
    )?;
    let curve_csv = baseline_curve_csv(&outcome);
    Ok(BaselineRun { outcome, curve_csv })
}

pub struct ArmsRaceRun {
    pub outcome: ArmsRaceOutcome,
    pub rounds_csv: String,
}

/// Shared-split arms race: trains the initial detector and generator, then
/// alternates for the configured number of rounds.
pub fn run_armsrace_experiment(cfg: &RunConfig) -> Result<ArmsRaceRun> {
    let ds = cfg.spec.synthesize()?;
    let plan = make_split(
        &ds,
        SplitMode::Shared,
        cfg.attacker_split_seed,
        cfg.defender_split_seed,
    )?;
    let bb = BlackBoxDetector::train(
        cfg.armsrace.detector,
        &ds,
        &plan.defender_train,
        cfg.detector_seed,
    )?;
    let mut trainer = MalganTrainer::new(ds.feature_count(), cfg.malgan.clone())?;
    trainer.run_until_evasion(
        &ds,
        &plan,
        &bb,
        cfg.malgan.max_epochs,
        cfg.armsrace.stop_tpr,
    )?;
    let outcome = run_arms_race(&ds, &plan, bb, trainer, &cfg.armsrace)?;
    let rounds = rounds_csv(&outcome);
    Ok(ArmsRaceRun {
        outcome,
        rounds_csv: rounds,
    })
}

// ---------------------------------------------------------------------------
// Acceptance suite

#[derive(Debug, Clone)]
pub struct GateResult {
    pub id: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl GateResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>3} {} — {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone)]
pub struct AcceptReport {
    pub gates: Vec<GateResult>,
    pub all_passed: bool,
    pub out_dir: PathBuf,
}

impl AcceptReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for g in &self.gates {
            s.push_str(&g.line());
            s.push('\n');
        }
        s.push_str(if self.all_passed {
            "result: all criteria passed\n"
        } else {
            "result: FAILURES present\n"
        });
        s
    }
}

struct SuiteArtifacts {
    shared: ExperimentReport,
    disjoint: ExperimentReport,
    baseline_off: BaselineOutcome,
    baseline_on: BaselineOutcome,
    race: ArmsRaceOutcome,
    /// Best-epoch adversarial TPR (train, test) against the smaller forest.
    small_forest_adv: (f64, f64),
    /// Deterministic file set: name → content.
    files: Vec<(String, String)>,
}

fn run_suite(cfg: &RunConfig) -> Result<SuiteArtifacts> {
    let shared = run_table_experiment(SplitMode::Shared, cfg)?;
    let disjoint = run_table_experiment(SplitMode::Disjoint, cfg)?;
    let baseline_off = run_baseline_experiment(cfg, DetectorKind::Rf, RetrainMode::Off)?;
    let baseline_on = run_baseline_experiment(cfg, DetectorKind::Rf, RetrainMode::On)?;
    let race = run_armsrace_experiment(cfg)?;
    let small_forest_adv = small_forest_probe(cfg)?;

    let mut files = vec![
        ("table_shared.csv".to_string(), shared.to_csv()),
        ("table_disjoint.csv".to_string(), disjoint.to_csv()),
        (
            "baseline_off_curve.csv".to_string(),
            baseline_off.curve_csv.clone(),
        ),
        (
            "baseline_on_curve.csv".to_string(),
            baseline_on.curve_csv.clone(),
        ),
        ("armsrace_rounds.csv".to_string(), race.rounds_csv.clone()),
        (
            "aux_small_forest.csv".to_string(),
            format!(
                "trees,tpr_adversarial_train,tpr_adversarial_test\n25,{},{}\n",
                fmt_f(small_forest_adv.0),
                fmt_f(small_forest_adv.1)
            ),
        ),
    ];
    for report in [&shared, &disjoint] {
        for cell in &report.cells {
            if cell.records.is_empty() {
                continue;
            }
            files.push((
                format!(
                    "curve_{}_{}.csv",
                    report.mode,
                    cell.kind.to_string().to_lowercase()
                ),
                emit_convergence_curve(&cell.records)?,
            ));
        }
    }

    Ok(SuiteArtifacts {
        shared,
        disjoint,
        baseline_off: baseline_off.outcome,
        baseline_on: baseline_on.outcome,
        race: race.outcome,
        small_forest_adv,
        files,
    })
}

/// The forest-size robustness probe: the attack must also collapse a
/// 25-tree forest.
fn small_forest_probe(cfg: &RunConfig) -> Result<(f64, f64)> {
    let ds = cfg.spec.synthesize()?;
    let plan = make_split(
        &ds,
        SplitMode::Shared,
        cfg.attacker_split_seed,
        cfg.defender_split_seed,
    )?;
    let bb = BlackBoxDetector::train_forest_sized(&ds, &plan.defender_train, cfg.detector_seed, 25)?;
    let outcome = train_malgan(&ds, &plan, &bb, &cfg.malgan)?;
    let train_mal = ds.matrix(&ds.filter_indices(&plan.defender_train, Label::Malware));
    let test_mal = ds.matrix(&ds.filter_indices(&plan.test, Label::Malware));
    let adv_train = generate_adversarial(&outcome.generator, &train_mal, cfg.eval_train_seed)?;
    let adv_test = generate_adversarial(&outcome.generator, &test_mal, cfg.eval_test_seed)?;
    Ok((
        bb.true_positive_rate(&adv_train.merged)?,
        bb.true_positive_rate(&adv_test.merged)?,
    ))
}

/// Runs the complete acceptance suite twice (for the determinism check),
/// writes both runs' CSVs plus the configuration snapshot under `out_dir`,
/// and evaluates every criterion.
pub fn run_accept(cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<AcceptReport> {
    let out_dir = out_dir.as_ref();
    write_text(out_dir.join("config.txt"), &cfg.snapshot())?;

    let first = run_suite(cfg)?;
    let second = run_suite(cfg)?;
    for (name, content) in &first.files {
        write_text(out_dir.join("run1").join(name), content)?;
    }
    for (name, content) in &second.files {
        write_text(out_dir.join("run2").join(name), content)?;
    }

    let gates = vec![
        gate_loss_arithmetic(),
        gate_gradient_checks(),
        gate_superset(cfg, &first),
        gate_detector_baselines(&first.shared),
        gate_shared_collapse(&first.shared),
        gate_disjoint_collapse(&first.disjoint),
        gate_baseline_inferiority(&first),
        gate_arms_race(cfg, &first.race),
        gate_stump_oracle(),
        gate_determinism(&first.files, &second.files),
        gate_forest_size(first.small_forest_adv),
    ];
    let all_passed = gates.iter().all(|g| g.passed);
    let report = AcceptReport {
        gates,
        all_passed,
        out_dir: out_dir.to_path_buf(),
    };
    write_text(out_dir.join("accept_report.txt"), &report.render())?;
    Ok(report)
}

// --- criterion 1: loss arithmetic ---

pub(crate) fn gate_loss_arithmetic() -> GateResult {
    let a1 = Array1::from_elem(1, 0.5);
    let checks: [(Result<f64>, f64); 6] = [
        (
            substitute_loss(&a1, &a1).map(|(l, _, _)| l),
            2.0 * std::f64::consts::LN_2,
        ),
        (
            substitute_loss(&Array1::from_elem(1, 0.1), &Array1::from_elem(1, 0.9))
                .map(|(l, _, _)| l),
            -2.0 * 0.9f64.ln(),
        ),
        (
            substitute_loss(&Array1::from_elem(1, 0.9), &Array1::from_elem(1, 0.1))
                .map(|(l, _, _)| l),
            -2.0 * 0.1f64.ln(),
        ),
        (
            generator_loss(&Array1::from_elem(3, 0.5)).map(|(l, _)| l),
            0.5f64.ln(),
        ),
        (generator_loss(&Array1::from_elem(3, 1.0)).map(|(l, _)| l), 0.0),
        (
            generator_loss(&Array1::from_elem(2, 1e-7)).map(|(l, _)| l),
            1e-7f64.ln(),
        ),
    ];
    let mut worst = 0.0f64;
    for (got, want) in checks {
        match got {
            Ok(v) => worst = worst.max((v - want).abs()),
            Err(e) => {
                return GateResult {
                    id: "1",
                    name: "loss arithmetic",
                    passed: false,
                    detail: format!("loss evaluation failed: {e}"),
                };
            }
        }
    }
    GateResult {
        id: "1",
        name: "loss arithmetic",
        passed: worst <= 1e-6,
        detail: format!("6 hand-computed examples, max abs deviation {worst:.2e} (bound 1e-6)"),
    }
}

// --- criterion 2: gradient correctness ---

fn perturbed(net: &DenseNetwork, layer: usize, row: usize, col: Option<usize>, h: f64) -> DenseNetwork {
    let mut weights: Vec<Array2<f64>> = net.weights().to_vec();
    let mut biases: Vec<Array1<f64>> = net.biases().to_vec();
    match col {
        Some(c) => weights[layer][(row, c)] += h,
        None => biases[layer][row] += h,
    }
    DenseNetwork::from_params(net.layer_sizes().to_vec(), weights, biases)
        .expect("same shapes as the source network")
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs());
            if denom < 1e-8 {
                0.0
            } else {
                (a - n).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}

/// Central finite differences over every parameter of `net` against the
/// analytic gradients for an arbitrary scalar loss.
fn fd_audit(
    net: &DenseNetwork,
    loss: &dyn Fn(&DenseNetwork) -> f64,
    analytic: &crate::neuralnet::Gradients,
) -> f64 {
    const H: f64 = 1e-5;
    let mut ana = Vec::new();
    let mut num = Vec::new();
    for layer in 0..net.weights().len() {
        let (rows, cols) = net.weights()[layer].dim();
        for r in 0..rows {
            for c in 0..cols {
                ana.push(analytic.weights[layer][(r, c)]);
                let up = loss(&perturbed(net, layer, r, Some(c), H));
                let down = loss(&perturbed(net, layer, r, Some(c), -H));
                num.push((up - down) / (2.0 * H));
            }
        }
        for r in 0..net.biases()[layer].len() {
            ana.push(analytic.biases[layer][r]);
            let up = loss(&perturbed(net, layer, r, None, H));
            let down = loss(&perturbed(net, layer, r, None, -H));
            num.push((up - down) / (2.0 * H));
        }
    }
    max_rel_error(&ana, &num)
}

pub(crate) fn gate_gradient_checks() -> GateResult {
    let run = || -> Result<(f64, f64, f64)> {
        // Plain network under binary cross-entropy.
        let net = DenseNetwork::glorot(&[5, 7, 1], 0xfd01)?;
        let mut rng = seed::rng(0xfd02);
        let x = Array2::from_shape_fn((6, 5), |_| rng.gen_range(0.0..1.0));
        let y = Array2::from_shape_fn((6, 1), |_| f64::from(rng.gen_bool(0.5)));
        let (out, trace) = net.forward_trace(&x)?;
        let (_, upstream) = crate::neuralnet::bce_loss(&out, &y)?;
        let grads = net.backward(&trace, &upstream)?;
        let bce_err = fd_audit(&net, &|n| {
            let p = n.forward(&x).expect("same input shape");
            crate::neuralnet::bce_loss(&p, &y).expect("same dims").0
        }, &grads);

        // Generator through the merge into a substitute, under the
        // generator objective.
        let m = Array2::from_shape_fn((4, 6), |_| f64::from(rng.gen_bool(0.4)));
        let z = Array2::from_shape_fn((4, 3), |_| rng.gen_range(0.0..1.0));
        let gen_net = DenseNetwork::glorot(&[9, 8, 6], 0xfd03)?;
        let sub_net = DenseNetwork::glorot(&[6, 5, 1], 0xfd04)?;
        let gen_loss = |g: &DenseNetwork| -> f64 {
            let mut input = Array2::zeros((m.nrows(), 9));
            input.slice_mut(ndarray::s![.., ..6]).assign(&m);
            input.slice_mut(ndarray::s![.., 6..]).assign(&z);
            let o = g.forward(&input).expect("generator forward");
            let smooth = smooth_merge(&m, &o).expect("same shapes");
            let d = sub_net.forward(&smooth).expect("substitute forward");
            generator_loss(&d.column(0).to_owned()).expect("nonempty").0
        };
        let mut input = Array2::zeros((m.nrows(), 9));
        input.slice_mut(ndarray::s![.., ..6]).assign(&m);
        input.slice_mut(ndarray::s![.., 6..]).assign(&z);
        let (o, gen_trace) = gen_net.forward_trace(&input)?;
        let smooth = smooth_merge(&m, &o)?;
        let (d, sub_trace) = sub_net.forward_trace(&smooth)?;
        let (_, d_grad) = generator_loss(&d.column(0).to_owned())?;
        let upstream = d_grad.insert_axis(ndarray::Axis(1));
        let through_sub = sub_net.backward(&sub_trace, &upstream)?;
        // The merge passes gradient only where the original feature is
        // absent.
        let masked = &through_sub.input * &m.mapv(|v| 1.0 - v);
        let gen_grads = gen_net.backward(&gen_trace, &masked)?;
        let merge_err = fd_audit(&gen_net, &gen_loss, &gen_grads);

        // Masking: bumping the generator output where the feature is
        // already present must not change the loss at all.
        let mut bumped = 0.0f64;
        let loss_of_o = |o: &Array2<f64>| -> f64 {
            let smooth = smooth_merge(&m, o).expect("same shapes");
            let d = sub_net.forward(&smooth).expect("substitute forward");
            generator_loss(&d.column(0).to_owned()).expect("nonempty").0
        };
        let base = loss_of_o(&o);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] == 1.0 {
                    let mut o2 = o.clone();
                    o2[(r, c)] = (o2[(r, c)] - 0.2).max(0.0);
                    bumped = bumped.max((loss_of_o(&o2) - base).abs());
                }
            }
        }
        Ok((bce_err, merge_err, bumped))
    };
    match run() {
        Ok((bce_err, merge_err, bumped)) => {
            let worst = bce_err.max(merge_err);
            GateResult {
                id: "2",
                name: "gradient correctness",
                passed: worst < 1e-4 && bumped == 0.0,
                detail: format!(
                    "max FD relative error {worst:.2e} (bound 1e-4); masked-coordinate loss shift {bumped:.1e}"
                ),
            }
        }
        Err(e) => GateResult {
            id: "2",
            name: "gradient correctness",
            passed: false,
            detail: format!("gradient audit failed to run: {e}"),
        },
    }
}

// --- criterion 3: superset invariant ---

fn count_removed(original: &Array2<f64>, adversarial: &Array2<f64>) -> usize {
    original
        .iter()
        .zip(adversarial.iter())
        .filter(|&(&o, &a)| o > 0.5 && a < 0.5)
        .count()
}

fn gate_superset(cfg: &RunConfig, suite: &SuiteArtifacts) -> GateResult {
    let audit = || -> Result<(usize, usize)> {
        let mut rows = 0usize;
        let mut violations = 0usize;

        let ds = cfg.spec.synthesize()?;
        for report in [&suite.shared, &suite.disjoint] {
            let plan = make_split(
                &ds,
                report.mode,
                cfg.attacker_split_seed,
                cfg.defender_split_seed,
            )?;
            let train_mal = ds.matrix(&ds.filter_indices(&plan.defender_train, Label::Malware));
            let test_mal = ds.matrix(&ds.filter_indices(&plan.test, Label::Malware));
            for cell in &report.cells {
                let Some(generator) = &cell.generator else {
                    continue;
                };
                for (mal, seed_value) in [
                    (&train_mal, cfg.eval_train_seed),
                    (&test_mal, cfg.eval_test_seed),
                ] {
                    let batch = generate_adversarial(generator, mal, seed_value)?;
                    rows += batch.len();
                    if !batch.superset_holds() {
                        violations += 1;
                    }
                    violations += count_removed(&batch.originals, &batch.merged);
                }
            }
        }

        // Baseline attack outputs, against the malware they started from.
        let plan = make_split(
            &ds,
            SplitMode::Shared,
            cfg.attacker_split_seed,
            cfg.defender_split_seed,
        )?;
        let train_mal = ds.matrix(&ds.filter_indices(&plan.attacker_train, Label::Malware));
        let test_mal = ds.matrix(&ds.filter_indices(&plan.test, Label::Malware));
        for outcome in [&suite.baseline_off, &suite.baseline_on] {
            violations += count_removed(&train_mal, &outcome.adversarial_train);
            violations += count_removed(&test_mal, &outcome.adversarial_test);
            rows += outcome.adversarial_train.nrows() + outcome.adversarial_test.nrows();
        }
        Ok((rows, violations))
    };
    match audit() {
        Ok((rows, violations)) => GateResult {
            id: "3",
            name: "superset invariant",
            passed: rows > 0 && violations == 0,
            detail: format!(
                "{violations} violations over {rows} re-audited adversarial rows (every generated batch is also verified at construction)"
            ),
        },
        Err(e) => GateResult {
            id: "3",
            name: "superset invariant",
            passed: false,
            detail: format!("audit failed to run: {e}"),
        },
    }
}

// --- criteria 4–6: detector baselines and attack collapse ---

fn gate_detector_baselines(shared: &ExperimentReport) -> GateResult {
    let mut worst: Option<(DetectorKind, f64)> = None;
    let mut failures = Vec::new();
    for cell in &shared.cells {
        match cell.tpr_original_test {
            Some(v) => {
                if worst.map_or(true, |(_, w)| v < w) {
                    worst = Some((cell.kind, v));
                }
                if v < 0.90 {
                    failures.push(format!("{} {:.4}", cell.kind, v));
                }
            }
            None => failures.push(format!("{} failed: {}", cell.kind, cell.error.as_deref().unwrap_or("?"))),
        }
    }
    GateResult {
        id: "4",
        name: "detector baselines",
        passed: failures.is_empty(),
        detail: match (failures.is_empty(), worst) {
            (true, Some((kind, v))) => {
                format!("all six original test TPR >= 0.90; weakest {kind} at {v:.4}")
            }
            _ => format!("below bound or failed: {}", failures.join(", ")),
        },
    }
}

fn collapse_bound(kind: DetectorKind, shared: bool) -> f64 {
    if !shared {
        return 0.05;
    }
    match kind {
        DetectorKind::Rf | DetectorKind::Dt => 0.03,
        _ => 0.01,
    }
}

fn gate_collapse(
    id: &'static str,
    name: &'static str,
    report: &ExperimentReport,
    shared: bool,
) -> GateResult {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for cell in &report.cells {
        let bound = collapse_bound(cell.kind, shared);
        match (cell.tpr_adversarial_train, cell.tpr_adversarial_test) {
            (Some(tr), Some(te)) => {
                worst = worst.max(tr.max(te));
                if tr > bound || te > bound {
                    failures.push(format!("{} train {tr:.4} test {te:.4} (bound {bound})", cell.kind));
                }
            }
            _ => failures.push(format!(
                "{} failed: {}",
                cell.kind,
                cell.error.as_deref().unwrap_or("?")
            )),
        }
    }
    GateResult {
        id,
        name,
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("all six within bounds; worst adversarial TPR {worst:.4}")
        } else {
            format!("over bound or failed: {}", failures.join(", "))
        },
    }
}

fn gate_shared_collapse(shared: &ExperimentReport) -> GateResult {
    gate_collapse("5", "attack collapse, shared split", shared, true)
}

fn gate_disjoint_collapse(disjoint: &ExperimentReport) -> GateResult {
    gate_collapse("6", "attack collapse, disjoint split", disjoint, false)
}

// --- criterion 7: baseline inferiority ---

fn gate_baseline_inferiority(suite: &SuiteArtifacts) -> GateResult {
    let malgan_test = suite
        .shared
        .cell(DetectorKind::Rf)
        .and_then(|c| c.tpr_adversarial_test);
    let Some(malgan_test) = malgan_test else {
        return GateResult {
            id: "7",
            name: "baseline inferiority",
            passed: false,
            detail: "shared-split RF cell missing, no generative reference TPR".into(),
        };
    };
    let off = &suite.baseline_off;
    let on = &suite.baseline_on;
    let gap = off.final_tpr_test - malgan_test;
    let train_improves = on.final_tpr_train < off.final_tpr_train;
    let test_shift = (on.final_tpr_test - off.final_tpr_test).abs();
    let passed = gap >= 0.30 && train_improves && test_shift <= 0.10;
    GateResult {
        id: "7",
        name: "baseline inferiority",
        passed,
        detail: format!(
            "gap over generative attack {gap:.4} (need >= 0.30); retrain moves train {:.4}->{:.4} (must drop) and test by {test_shift:.4} (bound 0.10)",
            off.final_tpr_train, on.final_tpr_train
        ),
    }
}

// --- criterion 8: arms race ---

fn gate_arms_race(cfg: &RunConfig, race: &ArmsRaceOutcome) -> GateResult {
    if let Some(reason) = &race.aborted {
        return GateResult {
            id: "8",
            name: "arms race",
            passed: false,
            detail: format!("aborted: {reason}"),
        };
    }
    if race.rounds.len() != cfg.armsrace.rounds {
        return GateResult {
            id: "8",
            name: "arms race",
            passed: false,
            detail: format!(
                "expected {} rounds, got {}",
                cfg.armsrace.rounds,
                race.rounds.len()
            ),
        };
    }
    let mut failures = Vec::new();
    let mut max_attack = 0.0f64;
    let mut min_defense = 1.0f64;
    let mut max_epochs = 0usize;
    for r in &race.rounds {
        min_defense = min_defense.min(r.tpr_after_defense_train.min(r.tpr_after_defense_test));
        max_attack = max_attack.max(r.tpr_after_attack_train.max(r.tpr_after_attack_test));
        max_epochs = max_epochs.max(r.epochs_to_collapse);
        if r.tpr_after_defense_train < 0.99 || r.tpr_after_defense_test < 0.99 {
            failures.push(format!("round {} defense under 0.99", r.round));
        }
        if r.tpr_after_attack_train > 0.01 || r.tpr_after_attack_test > 0.01 {
            failures.push(format!("round {} attack over 0.01", r.round));
        }
        if r.epochs_to_collapse > 5 {
            failures.push(format!("round {} needed {} epochs", r.round, r.epochs_to_collapse));
        }
    }
    GateResult {
        id: "8",
        name: "arms race",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "{} rounds: defense >= {min_defense:.4}, fresh attack <= {max_attack:.4}, collapse within {max_epochs} epochs",
                race.rounds.len()
            )
        } else {
            failures.join(", ")
        },
    }
}

// --- criterion 9: depth-1 oracle equivalence ---

/// An exhaustive stump search in exact integer arithmetic: weighted Gini
/// impurities are compared as rationals via cross-multiplication, so this
/// oracle shares no code — and no floating-point behaviour — with the tree
/// learner it checks.
struct StumpOracle {
    /// `None`: no usable split; predict the root majority.
    split: Option<(usize, Label, Label)>,
    majority: Label,
}

impl StumpOracle {
    fn fit(x: &Array2<f64>, y: &[u8]) -> StumpOracle {
        let n = x.nrows();
        let total_mal = y.iter().filter(|&&v| v == 1).count();
        let total_ben = n - total_mal;
        let majority = if total_mal >= total_ben {
            Label::Malware
        } else {
            Label::Benign
        };
        if total_mal == 0 || total_ben == 0 {
            return StumpOracle {
                split: None,
                majority,
            };
        }

        // Weighted impurity of a candidate, as the exact rational
        //   num / (n * nl * nr),
        // with num = (nl^2 - l0^2 - l1^2) * nr + (nr^2 - r0^2 - r1^2) * nl.
        let mut best: Option<(usize, u128, u128, (usize, usize, usize, usize))> = None;
        for f in 0..x.ncols() {
            let (mut l0, mut l1, mut r0, mut r1) = (0usize, 0usize, 0usize, 0usize);
            for row in 0..n {
                match (x[(row, f)] > 0.5, y[row]) {
                    (false, 0) => l0 += 1,
                    (false, _) => l1 += 1,
                    (true, 0) => r0 += 1,
                    (true, _) => r1 += 1,
                }
            }
            let (nl, nr) = (l0 + l1, r0 + r1);
            if nl == 0 || nr == 0 {
                continue;
            }
            let num = ((nl * nl - l0 * l0 - l1 * l1) * nr + (nr * nr - r0 * r0 - r1 * r1) * nl)
                as u128;
            let den = (n * nl * nr) as u128;
            let better = match &best {
                None => true,
                Some((_, bnum, bden, _)) => num * bden < bnum * den,
            };
            if better {
                best = Some((f, num, den, (l0, l1, r0, r1)));
            }
        }

        let Some((feature, num, den, (l0, l1, r0, r1))) = best else {
            return StumpOracle {
                split: None,
                majority,
            };
        };
        // Split only when it strictly reduces the root impurity
        //   (n^2 - mal^2 - ben^2) / n^2.
        let root_num = (n * n - total_mal * total_mal - total_ben * total_ben) as u128;
        let root_den = (n * n) as u128;
        if num * root_den >= root_num * den {
            return StumpOracle {
                split: None,
                majority,
            };
        }
        let side = |c0: usize, c1: usize| {
            if c1 >= c0 {
                Label::Malware
            } else {
                Label::Benign
            }
        };
        StumpOracle {
            split: Some((feature, side(l0, l1), side(r0, r1))),
            majority,
        }
    }

    fn predict(&self, pattern: &[f64]) -> Label {
        match self.split {
            None => self.majority,
            Some((f, left, right)) => {
                if pattern[f] > 0.5 {
                    right
                } else {
                    left
                }
            }
        }
    }
}

pub(crate) fn gate_stump_oracle() -> GateResult {
    let mut datasets = 0usize;
    let mut mismatches = 0usize;
    for features in 1..=4usize {
        for samples in 1..=16usize {
            for draw in 0..3u64 {
                let mut rng = seed::rng(seed::derive2(
                    0x09ac1e,
                    (features * 100 + samples) as u64,
                    draw,
                ));
                let x = Array2::from_shape_fn((samples, features), |_| f64::from(rng.gen_bool(0.5)));
                let y: Vec<u8> = (0..samples).map(|_| u8::from(rng.gen_bool(0.5))).collect();

                let tree = DecisionTree::fit_plain(&x, &y, 1);
                let oracle = StumpOracle::fit(&x, &y);
                datasets += 1;

                // Structure must agree: same split feature, or both leaves.
                if tree.root_feature() != oracle.split.map(|(f, _, _)| f) {
                    mismatches += 1;
                }
                for code in 0..(1usize << features) {
                    let pattern: Vec<f64> =
                        (0..features).map(|b| f64::from(code >> b & 1 == 1)).collect();
                    let row = Array1::from_vec(pattern.clone());
                    if tree.predict_row(row.view()) != oracle.predict(&pattern) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    GateResult {
        id: "9",
        name: "stump oracle equivalence",
        passed: datasets > 0 && mismatches == 0,
        detail: format!(
            "{mismatches} structure or prediction mismatches across {datasets} randomized datasets (M <= 4, n <= 16), all input patterns"
        ),
    }
}

// --- criterion 10: determinism ---

fn gate_determinism(first: &[(String, String)], second: &[(String, String)]) -> GateResult {
    if first.len() != second.len() {
        return GateResult {
            id: "10",
            name: "deterministic reruns",
            passed: false,
            detail: format!(
                "file sets differ: {} vs {} files",
                first.len(),
                second.len()
            ),
        };
    }
    let mut diffs = Vec::new();
    for ((name_a, content_a), (name_b, content_b)) in first.iter().zip(second) {
        if name_a != name_b || content_a != content_b {
            diffs.push(name_a.clone());
        }
    }
    GateResult {
        id: "10",
        name: "deterministic reruns",
        passed: diffs.is_empty(),
        detail: if diffs.is_empty() {
            format!("{} CSV files byte-identical across two full runs", first.len())
        } else {
            format!("differences in: {}", diffs.join(", "))
        },
    }
}

// --- auxiliary: forest-size robustness ---

fn gate_forest_size(adv: (f64, f64)) -> GateResult {
    let (train, test) = adv;
    GateResult {
        id: "aux",
        name: "forest-size robustness",
        passed: train <= 0.03 && test <= 0.03,
        detail: format!(
            "25-tree forest: best-epoch adversarial TPR train {train:.4} test {test:.4} (bound 0.03)"
        ),
    }
}
