//! Command-line front end: dataset synthesis, detector/generator training,
//! the attacks, the arms race, the table experiments and the acceptance
//! suite. Every subcommand works from one [`RunConfig`], assembled as
//! defaults → `--config` file → `--seed` master override, and writes a
//! `config.txt` snapshot next to its artifacts so results are replayable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use malgan_lab::dataset::{Label, LabeledDataset, SplitMode};
use malgan_lab::detectors::{BlackBoxDetector, DetectorKind};
use malgan_lab::harness::{
    self, records_csv, run_accept, run_armsrace_experiment, run_baseline_experiment,
    run_table_experiment, RunConfig,
};
use malgan_lab::malgan::{generate_adversarial, train_malgan, Generator};
use malgan_lab::baseline::RetrainMode;

#[derive(Parser)]
#[command(
    name = "malgan-lab",
    version,
    about = "Black-box adversarial attacks on binary-feature malware detectors"
)]
struct Cli {
    /// Master seed; rederives every component seed from one value
    /// (applied after --config, so it overrides seeds set there).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Plain-text key=value configuration file applied over the defaults
    /// (`malgan-lab accept` writes a complete example as config.txt).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory for result CSVs and checkpoints.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the binary-feature dataset and write it as CSV.
    Synth {
        /// Number of samples (overrides the configuration).
        #[arg(long)]
        samples: Option<usize>,
        /// Number of binary features.
        #[arg(long)]
        features: Option<usize>,
        /// Number of class-informative features.
        #[arg(long)]
        discriminative: Option<usize>,
        /// Fraction of malware samples.
        #[arg(long)]
        malware_fraction: Option<f64>,
    },
    /// Train a detector, then train the generator against it; write the
    /// per-epoch records and both checkpoints.
    Train {
        #[arg(long, default_value = "RF", value_parser = parse_detector)]
        detector: DetectorKind,
        #[arg(long, default_value = "shared", value_parser = parse_mode)]
        mode: SplitMode,
        /// Epoch cap (overrides the configuration).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Load generator and detector checkpoints, attack every malware row
    /// of a dataset, and report original vs adversarial detection.
    Attack {
        /// Generator checkpoint (as written by `train`).
        #[arg(long, value_name = "FILE")]
        generator: PathBuf,
        /// Detector checkpoint (as written by `train`).
        #[arg(long, value_name = "FILE")]
        detector: PathBuf,
        /// Dataset CSV (as written by `synth`); synthesized from the
        /// configuration when omitted.
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        /// Noise seed for generation.
        #[arg(long)]
        noise_seed: Option<u64>,
    },
    /// Run the iterative saliency attack against one detector.
    Baseline {
        #[arg(long, default_value = "RF", value_parser = parse_detector)]
        detector: DetectorKind,
        /// Refit the substitute on black-box verdicts after each sweep.
        #[arg(long, default_value = "off", value_parser = parse_retrain)]
        retrain: RetrainMode,
        /// Sweep cap (overrides the configuration).
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Alternate defender retraining and attacker retraining.
    Armsrace {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, value_parser = parse_detector)]
        detector: Option<DetectorKind>,
    },
    /// Train all six detectors and one generator against each; write the
    /// four-column TPR table.
    Table {
        #[arg(long, value_parser = parse_mode)]
        mode: SplitMode,
    },
    /// Run the complete acceptance suite twice and evaluate every
    /// criterion; exits nonzero iff any criterion fails.
    Accept,
}

fn parse_detector(s: &str) -> Result<DetectorKind, malgan_lab::Error> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<SplitMode, malgan_lab::Error> {
    s.parse()
}

fn parse_retrain(s: &str) -> Result<RetrainMode, malgan_lab::Error> {
    s.parse()
}

fn build_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_kv_file(path)?;
    }
    if let Some(master) = cli.seed {
        cfg = cfg.with_master_seed(master);
    }
    Ok(cfg)
}

fn shared_plan(
    cfg: &RunConfig,
    mode: SplitMode,
) -> anyhow::Result<(LabeledDataset, malgan_lab::dataset::SplitPlan)> {
    let ds = cfg.spec.synthesize()?;
    let plan = malgan_lab::dataset::make_split(
        &ds,
        mode,
        cfg.attacker_split_seed,
        cfg.defender_split_seed,
    )?;
    Ok((ds, plan))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let mut cfg = build_config(&cli)?;
    let out = &cli.out;
    std::fs::create_dir_all(out)
        .map_err(|e| anyhow::anyhow!("cannot create output directory {}: {e}", out.display()))?;

    match cli.command {
        Command::Synth {
            samples,
            features,
            discriminative,
            malware_fraction,
        } => {
            if let Some(v) = samples {
                cfg.spec.sample_count = v;
            }
            if let Some(v) = features {
                cfg.spec.feature_count = v;
            }
            if let Some(v) = discriminative {
                cfg.spec.discriminative_count = v;
            }
            if let Some(v) = malware_fraction {
                cfg.spec.malware_fraction = v;
            }
            let ds = cfg.spec.synthesize()?;
            let path = out.join("dataset.csv");
            ds.save_csv(&path)?;
            harness::write_text(out.join("config.txt"), &cfg.snapshot())?;
            println!(
                "wrote {} ({} samples, {} features, malware fraction {:.4})",
                path.display(),
                ds.len(),
                ds.feature_count(),
                ds.malware_fraction()
            );
        }

        Command::Train {
            detector,
            mode,
            epochs,
        } => {
            if let Some(v) = epochs {
                cfg.malgan.max_epochs = v;
            }
            let (ds, plan) = shared_plan(&cfg, mode)?;
            let bb = BlackBoxDetector::train(detector, &ds, &plan.defender_train, cfg.detector_seed)?;
            let outcome = train_malgan(&ds, &plan, &bb, &cfg.malgan)?;

            harness::write_text(out.join("records.csv"), &records_csv(&outcome.records))?;
            harness::write_text(
                out.join("curve.csv"),
                &harness::emit_convergence_curve(&outcome.records)?,
            )?;
            outcome.generator.save(out.join("generator.ckpt"))?;
            bb.save(out.join("detector.ckpt"))?;
            harness::write_text(out.join("config.txt"), &cfg.snapshot())?;
            println!(
                "generator vs {}: best epoch {} of {} run, validation TPR {:.6}; artifacts in {}",
                detector,
                outcome.best_epoch,
                outcome.epochs_run,
                outcome.best_validation_tpr,
                out.display()
            );
        }

        Command::Attack {
            generator,
            detector,
            dataset,
            noise_seed,
        } => {
            let gen = Generator::load(&generator)?;
            let bb = BlackBoxDetector::load(&detector)?;
            let ds = match &dataset {
                Some(path) => LabeledDataset::load_csv(path)?,
                None => cfg.spec.synthesize()?,
            };
            let malware = ds.matrix(&ds.indices_of(Label::Malware));
            let batch = generate_adversarial(
                &gen,
                &malware,
                noise_seed.unwrap_or(cfg.eval_test_seed),
            )?;
            let tpr_original = bb.true_positive_rate(&batch.originals)?;
            let tpr_adversarial = bb.true_positive_rate(&batch.merged)?;

            let rows: Vec<malgan_lab::dataset::FeatureVector> = batch
                .merged
                .rows()
                .into_iter()
                .map(|r| {
                    malgan_lab::dataset::FeatureVector::new(
                        r.iter().map(|&v| u8::from(v > 0.5)).collect(),
                    )
                })
                .collect::<Result<_, _>>()?;
            let labels = vec![Label::Malware; rows.len()];
            let adv_ds = LabeledDataset::new(rows, labels, ds.feature_count())?;
            let path = out.join("adversarial.csv");
            adv_ds.save_csv(&path)?;
            harness::write_text(out.join("config.txt"), &cfg.snapshot())?;
            println!(
                "attacked {} malware rows: TPR original {:.6}, adversarial {:.6}; mean features added {:.2}; wrote {}",
                batch.len(),
                tpr_original,
                tpr_adversarial,
                batch.added_features() as f64 / batch.len() as f64,
                path.display()
            );
        }

        Command::Baseline {
            detector,
            retrain,
            max_iters,
        } => {
            if let Some(v) = max_iters {
                cfg.baseline.max_iters = v;
            }
            let run = run_baseline_experiment(&cfg, detector, retrain)?;
            harness::write_text(out.join("curve.csv"), &run.curve_csv)?;
            harness::write_text(out.join("config.txt"), &cfg.snapshot())?;
            println!(
                "baseline vs {} (retrain {}): {} sweeps, final TPR train {:.6} test {:.6}; artifacts in {}",
                detector,
                retrain,
                run.outcome.curve.len(),
                run.outcome.final_tpr_train,
                run.outcome.final_tpr_test,
                out.display()
            );
        }

        Command::Armsrace { rounds, detector } => {
            if let Some(v) = rounds {
                cfg.armsrace.rounds = v;
            }
            if let Some(v) = detector {
                cfg.armsrace.detector = v;
            }
            let run = run_armsrace_experiment(&cfg)?;
            harness::write_text(out.join("rounds.csv"), &run.rounds_csv)?;
            harness::write_text(out.join("config.txt"), &cfg.snapshot())?;
            for r in &run.outcome.rounds {
                println!(
                    "round {:>2}: defense TPR {:.6}/{:.6}, attack TPR {:.6}/{:.6}, collapse in {} epoch(s)",
                    r.round,
                    r.tpr_after_defense_train,
                    r.tpr_after_defense_test,
                    r.tpr_after_attack_train,
                    r.tpr_after_attack_test,
                    r.epochs_to_collapse
                );
            }
            if let Some(reason) = &run.outcome.aborted {
                anyhow::bail!("arms race aborted: {reason}");
            }
            println!("artifacts in {}", out.display());
        }

        Command::Table { mode } => {
            let report = run_table_experiment(mode, &cfg)?;
            harness::write_text(out.join("table.csv"), &report.to_csv())?;
            for cell in &report.cells {
                if cell.records.is_empty() {
                    continue;
                }
                harness::write_text(
                    out.join(format!("curve_{}.csv", cell.kind.to_string().to_lowercase())),
                    &harness::emit_convergence_curve(&cell.records)?,
                )?;
            }
            harness::write_text(out.join("config.txt"), &report.snapshot)?;
            print!("{}", report.to_csv());
            if report.is_partial() {
                for cell in &report.cells {
                    if let Some(err) = &cell.error {
                        eprintln!("cell {} failed: {err}", cell.kind);
                    }
                }
                anyhow::bail!("table experiment is partial");
            }
            println!("artifacts in {}", out.display());
        }

        Command::Accept => {
            let report = run_accept(&cfg, out)?;
            print!("{}", report.render());
            println!("artifacts in {}", report.out_dir.display());
            return Ok(report.all_passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
