//! The black-box malware detectors under attack: six classifiers behind
//! one train/predict interface.
//!
//! The interface is deliberately opaque — a trained detector answers hard
//! benign/malware labels and nothing else. No score, probability, or
//! parameter accessor is public, which is the contract the black-box
//! attack depends on.

mod linear;
mod mlp;
pub(crate) mod tree;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::dataset::{Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::seed;

use linear::LinearModel;
use mlp::MlpModel;
use tree::{DecisionTree, Forest};

/// Forest defaults: conventional values, checked for robustness by an
/// auxiliary 25-tree run in the acceptance suite.
const FOREST_TREES: usize = 100;
const TREE_DEPTH: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    Rf,
    Lr,
    Dt,
    Svm,
    Mlp,
    Vote,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 6] = [
        DetectorKind::Rf,
        DetectorKind::Lr,
        DetectorKind::Dt,
        DetectorKind::Svm,
        DetectorKind::Mlp,
        DetectorKind::Vote,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Rf => "RF",
            DetectorKind::Lr => "LR",
            DetectorKind::Dt => "DT",
            DetectorKind::Svm => "SVM",
            DetectorKind::Mlp => "MLP",
            DetectorKind::Vote => "VOTE",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<DetectorKind> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown detector `{s}` (expected RF, LR, DT, SVM, MLP or VOTE)"
                ))
            })
    }
}

#[derive(Debug, Clone)]
enum Model {
    Linear(LinearModel),
    Tree(DecisionTree),
    Forest(Forest),
    Mlp(MlpModel),
    Vote(Vec<BlackBoxDetector>),
}

/// A trained detector. Exposes hard labels only.
#[derive(Debug, Clone)]
pub struct BlackBoxDetector {
    kind: DetectorKind,
    feature_count: usize,
    model: Model,
}

impl BlackBoxDetector {
    /// Trains a detector of the given kind on the selected rows, which
    /// must contain both classes. Ground-truth labels are used here — this
    /// is the defender's side of the fence.
    pub fn train(
        kind: DetectorKind,
        ds: &LabeledDataset,
        indices: &[usize],
        seed_value: u64,
    ) -> Result<BlackBoxDetector> {
        let (x, y) = training_view(ds, indices)?;
        Self::train_on(kind, &x, &y, ds.feature_count(), seed_value)
    }

    /// As [`train`](Self::train) for RF, with an explicit tree count (the
    /// robustness knob; everything else uses the defaults).
    pub fn train_forest_sized(
        ds: &LabeledDataset,
        indices: &[usize],
        seed_value: u64,
        tree_count: usize,
    ) -> Result<BlackBoxDetector> {
        let (x, y) = training_view(ds, indices)?;
        Ok(BlackBoxDetector {
            kind: DetectorKind::Rf,
            feature_count: ds.feature_count(),
            model: Model::Forest(Forest::fit(&x, &y, tree_count, TREE_DEPTH, seed_value)),
        })
    }

    fn train_on(
        kind: DetectorKind,
        x: &Array2<f64>,
        y: &[u8],
        feature_count: usize,
        seed_value: u64,
    ) -> Result<BlackBoxDetector> {
        let model = match kind {
            DetectorKind::Lr => Model::Linear(LinearModel::fit_logistic(x, y)),
            DetectorKind::Svm => Model::Linear(LinearModel::fit_svm(x, y, seed_value)),
            DetectorKind::Dt => Model::Tree(DecisionTree::fit_plain(x, y, TREE_DEPTH)),
            DetectorKind::Rf => {
                Model::Forest(Forest::fit(x, y, FOREST_TREES, TREE_DEPTH, seed_value))
            }
            DetectorKind::Mlp => Model::Mlp(MlpModel::fit(x, y, seed_value)?),
            DetectorKind::Vote => {
                let members = [
                    DetectorKind::Rf,
                    DetectorKind::Lr,
                    DetectorKind::Dt,
                    DetectorKind::Svm,
                    DetectorKind::Mlp,
                ]
                .into_iter()
                .enumerate()
                .map(|(i, k)| {
                    Self::train_on(k, x, y, feature_count, seed::derive2(seed_value, 0x4073, i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
                Model::Vote(members)
            }
        };
        Ok(BlackBoxDetector {
            kind,
            feature_count,
            model,
        })
    }

    pub fn kind(&self) -> DetectorKind {
        self.kind
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    /// Hard labels for a batch of rows. This is the only query the
    /// detector answers.
    pub fn predict(&self, batch: &Array2<f64>) -> Result<Vec<Label>> {
        if batch.ncols() != self.feature_count {
            return Err(Error::Shape(format!(
                "batch has {} features, detector was trained on {}",
                batch.ncols(),
                self.feature_count
            )));
        }
        Ok(match &self.model {
            Model::Linear(m) => batch.rows().into_iter().map(|r| m.predict_row(r)).collect(),
            Model::Tree(t) => batch.rows().into_iter().map(|r| t.predict_row(r)).collect(),
            Model::Forest(f) => batch.rows().into_iter().map(|r| f.predict_row(r)).collect(),
            Model::Mlp(m) => m.predict_batch(batch)?,
            Model::Vote(members) => {
                let votes: Vec<Vec<Label>> = members
                    .iter()
                    .map(|d| d.predict(batch))
                    .collect::<Result<_>>()?;
                (0..batch.nrows())
                    .map(|r| {
                        let malware = votes.iter().filter(|v| v[r].is_malware()).count();
                        if malware * 2 >= members.len() {
                            Label::Malware
                        } else {
                            Label::Benign
                        }
                    })
                    .collect()
            }
        })
    }

    /// Detection rate over a batch of ground-truth malware rows.
    pub fn true_positive_rate(&self, malware: &Array2<f64>) -> Result<f64> {
        if malware.nrows() == 0 {
            return Err(Error::Usage(
                "true_positive_rate needs a nonempty malware batch".into(),
            ));
        }
        let labels = self.predict(malware)?;
        let hits = labels.iter().filter(|l| l.is_malware()).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::from("malgan-detector 1\n");
        out.push_str("kind ");
        out.push_str(self.kind.name());
        out.push('\n');
        out.push_str("features ");
        out.push_str(&self.feature_count.to_string());
        out.push('\n');
        self.write_model(&mut out);
        out
    }

    fn write_model(&self, out: &mut String) {
        match &self.model {
            Model::Linear(m) => m.write_into(out),
            Model::Tree(t) => t.write_into(out),
            Model::Forest(f) => f.write_into(out),
            Model::Mlp(m) => m.write_into(out),
            Model::Vote(members) => {
                for d in members {
                    out.push_str("member ");
                    out.push_str(&d.kind.name().to_string());
                    out.push('\n');
                    d.write_model(out);
                }
            }
        }
    }

    pub fn from_checkpoint_string(text: &str) -> Result<BlackBoxDetector> {
        let mut lines = Lines::new(text);
        let (lno, header) = lines.next_line()?;
        if header != "malgan-detector 1" {
            return Err(Error::Parse {
                line: lno,
                msg: format!("expected `malgan-detector 1`, got `{header}`"),
            });
        }
        let (lno, kind_line) = lines.next_line()?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::Parse {
                line: lno,
                msg: format!("expected `kind K`, got `{kind_line}`"),
            })?
            .parse::<DetectorKind>()
            .map_err(|e| Error::Parse {
                line: lno,
                msg: e.to_string(),
            })?;
        let (lno, feat_line) = lines.next_line()?;
        let feature_count: usize = feat_line
            .strip_prefix("features ")
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: lno,
                msg: format!("expected `features M`, got `{feat_line}`"),
            })?;
        let model = Self::read_model(kind, &mut lines, feature_count)?;
        Ok(BlackBoxDetector {
            kind,
            feature_count,
            model,
        })
    }

    fn read_model(kind: DetectorKind, lines: &mut Lines<'_>, feature_count: usize) -> Result<Model> {
        Ok(match kind {
            DetectorKind::Lr => Model::Linear(LinearModel::read_from(lines, false)?),
            DetectorKind::Svm => Model::Linear(LinearModel::read_from(lines, true)?),
            DetectorKind::Dt => Model::Tree(DecisionTree::read_from(lines)?),
            DetectorKind::Rf => Model::Forest(Forest::read_from(lines)?),
            DetectorKind::Mlp => Model::Mlp(MlpModel::read_from(lines)?),
            DetectorKind::Vote => {
                let mut members = Vec::with_capacity(5);
                for _ in 0..5 {
                    let (lno, line) = lines.next_line()?;
                    let member_kind = line
                        .strip_prefix("member ")
                        .ok_or_else(|| Error::Parse {
                            line: lno,
                            msg: format!("expected `member K`, got `{line}`"),
                        })?
                        .parse::<DetectorKind>()
                        .map_err(|e| Error::Parse {
                            line: lno,
                            msg: e.to_string(),
                        })?;
                    let model = Self::read_model(member_kind, lines, feature_count)?;
                    members.push(BlackBoxDetector {
                        kind: member_kind,
                        feature_count,
                        model,
                    });
                }
                Model::Vote(members)
            }
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BlackBoxDetector> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_string(&text)
    }
}

fn training_view(ds: &LabeledDataset, indices: &[usize]) -> Result<(Array2<f64>, Vec<u8>)> {
    if indices.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let y: Vec<u8> = ds.labels_at(indices).iter().map(|l| l.as_u8()).collect();
    if y.iter().all(|&v| v == 0) || y.iter().all(|&v| v == 1) {
        return Err(Error::Training(
            "training set contains a single class".into(),
        ));
    }
    Ok((ds.matrix(indices), y))
}

/// Line cursor over checkpoint text, tracking 1-based line numbers for
/// parse errors. Shared by the per-kind (de)serialisers.
pub(crate) struct Lines<'a> {
    lines: Vec<&'a str>,
    at: usize,
}

impl<'a> Lines<'a> {
    pub(crate) fn new(text: &'a str) -> Lines<'a> {
        Lines {
            lines: text.split('\n').collect(),
            at: 0,
        }
    }

    pub(crate) fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let line = self.lines.get(self.at).copied().ok_or(Error::Parse {
            line: self.at,
            msg: "unexpected end of checkpoint".into(),
        })?;
        self.at += 1;
        Ok((self.at, line))
    }

    /// The not-yet-consumed tail, newline-joined.
    pub(crate) fn rest(&self) -> String {
        self.lines[self.at.min(self.lines.len())..].join("\n")
    }

    /// Skips over an embedded network checkpoint that was parsed via
    /// [`rest`](Self::rest).
    pub(crate) fn consume_net_lines(&mut self, net: &crate::neuralnet::DenseNetwork) {
        self.at += net.checkpoint_line_count();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureVector, SyntheticSpec};

    fn tiny_dataset(n: usize, m: usize, seed_value: u64) -> LabeledDataset {
        SyntheticSpec {
            feature_count: m,
            discriminative_count: m / 2,
            sample_count: n,
            seed: seed_value,
            ..SyntheticSpec::default()
        }
        .synthesize()
        .unwrap()
    }

    fn all_indices(ds: &LabeledDataset) -> Vec<usize> {
        (0..ds.len()).collect()
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in DetectorKind::ALL {
            assert_eq!(kind.name().parse::<DetectorKind>().unwrap(), kind);
        }
        assert!(matches!(
            "rf".parse::<DetectorKind>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let ds = tiny_dataset(60, 8, 3);
        let malware_only = ds.indices_of(Label::Malware);
        assert!(matches!(
            BlackBoxDetector::train(DetectorKind::Lr, &ds, &malware_only, 1),
            Err(Error::Training(_))
        ));
        assert!(matches!(
            BlackBoxDetector::train(DetectorKind::Dt, &ds, &[], 1),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn predict_rejects_width_mismatch() {
        let ds = tiny_dataset(60, 8, 4);
        let det = BlackBoxDetector::train(DetectorKind::Dt, &ds, &all_indices(&ds), 1).unwrap();
        let wrong = Array2::zeros((2, 5));
        assert!(matches!(det.predict(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn tpr_counts_detected_fraction() {
        // A stump on feature 0 detects exactly 3 of these 4 "malware" rows.
        let x = ndarray::array![
            [1.0, 0.0],
            [1.0, 1.0],
            [1.0, 0.0],
            [0.0, 1.0]
        ];
        let det = BlackBoxDetector {
            kind: DetectorKind::Dt,
            feature_count: 2,
            model: Model::Tree(stump_on_feature_zero()),
        };
        assert_eq!(det.true_positive_rate(&x).unwrap(), 0.75);
        let empty = Array2::zeros((0, 2));
        assert!(matches!(
            det.true_positive_rate(&empty),
            Err(Error::Usage(_))
        ));
    }

    fn stump_on_feature_zero() -> DecisionTree {
        let x = ndarray::array![[1.0, 0.0], [1.0, 1.0], [0.0, 0.0], [0.0, 1.0]];
        let y = vec![1, 1, 0, 0];
        DecisionTree::fit_plain(&x, &y, 1)
    }

    #[test]
    fn vote_follows_three_to_two_majority() {
        // RF, LR, DT say malware; SVM, MLP say benign.
        let always = |label: Label| DecisionTree::single_leaf(label);
        let members = vec![
            BlackBoxDetector {
                kind: DetectorKind::Rf,
                feature_count: 2,
                model: Model::Forest(Forest::from_trees(vec![always(Label::Malware)])),
            },
            BlackBoxDetector {
                kind: DetectorKind::Lr,
                feature_count: 2,
                model: Model::Linear(LinearModel {
                    weights: ndarray::array![0.0, 0.0],
                    bias: 1.0,
                    malware_on_zero: false,
                }),
            },
            BlackBoxDetector {
                kind: DetectorKind::Dt,
                feature_count: 2,
                model: Model::Tree(always(Label::Malware)),
            },
            BlackBoxDetector {
                kind: DetectorKind::Svm,
                feature_count: 2,
                model: Model::Linear(LinearModel {
                    weights: ndarray::array![0.0, 0.0],
                    bias: -1.0,
                    malware_on_zero: true,
                }),
            },
            BlackBoxDetector {
                kind: DetectorKind::Mlp,
                feature_count: 2,
                model: Model::Tree(always(Label::Benign)),
            },
        ];
        let vote = BlackBoxDetector {
            kind: DetectorKind::Vote,
            feature_count: 2,
            model: Model::Vote(members),
        };
        let x = ndarray::array![[0.0, 1.0]];
        assert_eq!(vote.predict(&x).unwrap(), vec![Label::Malware]);
        // Purity: asking twice changes nothing.
        assert_eq!(vote.predict(&x).unwrap(), vote.predict(&x).unwrap());
    }

    #[test]
    fn every_kind_fits_easy_data_and_round_trips_through_checkpoints() {
        let ds = tiny_dataset(240, 12, 9);
        let indices = all_indices(&ds);
        let malware = ds.matrix(&ds.indices_of(Label::Malware));
        let probe = ds.matrix(&indices[..40.min(indices.len())].to_vec());
        for kind in DetectorKind::ALL {
            let det = BlackBoxDetector::train(kind, &ds, &indices, 5).unwrap();
            let tpr = det.true_positive_rate(&malware).unwrap();
            assert!(tpr > 0.8, "{kind}: training-set TPR {tpr}");
            let text = det.to_checkpoint_string();
            let back = BlackBoxDetector::from_checkpoint_string(&text).unwrap();
            assert_eq!(back.kind(), kind);
            assert_eq!(
                det.predict(&probe).unwrap(),
                back.predict(&probe).unwrap(),
                "{kind}: reloaded predictions differ"
            );
            assert_eq!(text, back.to_checkpoint_string());
        }
    }

    #[test]
    fn forest_seed_reproducibility_via_facade() {
        let ds = tiny_dataset(200, 10, 2);
        let indices = all_indices(&ds);
        let a = BlackBoxDetector::train(DetectorKind::Rf, &ds, &indices, 77).unwrap();
        let b = BlackBoxDetector::train(DetectorKind::Rf, &ds, &indices, 77).unwrap();
        assert_eq!(a.to_checkpoint_string(), b.to_checkpoint_string());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(matches!(
            BlackBoxDetector::from_checkpoint_string("not a checkpoint"),
            Err(Error::Parse { line: 1, .. })
        ));
        let truncated = "malgan-detector 1\nkind DT\nfeatures 4\n";
        assert!(BlackBoxDetector::from_checkpoint_string(truncated).is_err());
    }

    #[test]
    fn file_round_trip() {
        let ds = tiny_dataset(80, 6, 21);
        let det = BlackBoxDetector::train(DetectorKind::Svm, &ds, &all_indices(&ds), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svm.ckpt");
        det.save(&path).unwrap();
        let back = BlackBoxDetector::load(&path).unwrap();
        assert_eq!(det.to_checkpoint_string(), back.to_checkpoint_string());
    }

    #[test]
    fn single_feature_vector_predicts_as_one_row() {
        let ds = tiny_dataset(60, 8, 4);
        let det = BlackBoxDetector::train(DetectorKind::Lr, &ds, &all_indices(&ds), 1).unwrap();
        let v = FeatureVector::zeros(8);
        let flat = v.as_f64_vec();
        let row = Array2::from_shape_vec((1, flat.len()), flat).unwrap();
        assert_eq!(det.predict(&row).unwrap().len(), 1);
    }
}
