//! Binary-feature program datasets: synthesis, CSV I/O, split protocols
//! and class-ratio minibatching.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Ground-truth class of a program sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Benign,
    Malware,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Benign),
            1 => Some(Label::Malware),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Malware => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.as_u8() as f64
    }

    pub fn is_malware(self) -> bool {
        matches!(self, Label::Malware)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// An M-dimensional presence/absence vector describing one program.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureVector {
    bits: Vec<u8>,
}

impl FeatureVector {
    /// Builds a vector from raw bits; every element must be 0 or 1.
    pub fn new(bits: Vec<u8>) -> Result<FeatureVector> {
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::Config(format!(
                "feature vector element {pos} is {}, expected 0 or 1",
                bits[pos]
            )));
        }
        Ok(FeatureVector { bits })
    }

    pub fn zeros(len: usize) -> FeatureVector {
        FeatureVector {
            bits: vec![0; len],
        }
    }

    pub fn ones(len: usize) -> FeatureVector {
        FeatureVector {
            bits: vec![1; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, d: usize) -> u8 {
        self.bits[d]
    }

    /// Count of features that are present.
    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// True when every feature present in `other` is present in `self`.
    pub fn is_superset_of(&self, other: &FeatureVector) -> bool {
        self.bits.len() == other.bits.len()
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| a & b == b)
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// Feature vectors with ground-truth labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Vec<FeatureVector>,
    labels: Vec<Label>,
    feature_count: usize,
}

impl LabeledDataset {
    pub fn new(
        samples: Vec<FeatureVector>,
        labels: Vec<Label>,
        feature_count: usize,
    ) -> Result<LabeledDataset> {
        if samples.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(pos) = samples.iter().position(|s| s.len() != feature_count) {
            return Err(Error::Shape(format!(
                "sample {pos} has {} features, dataset is configured for {feature_count}",
                samples[pos].len()
            )));
        }
        Ok(LabeledDataset {
            samples,
            labels,
            feature_count,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn sample(&self, i: usize) -> &FeatureVector {
        &self.samples[i]
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn samples(&self) -> &[FeatureVector] {
        &self.samples
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn malware_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let malware = self.labels.iter().filter(|l| l.is_malware()).count();
        malware as f64 / self.samples.len() as f64
    }

    /// Indices (in dataset order) of all samples carrying `label`.
    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Restriction of `indices` to the samples carrying `label`.
    pub fn filter_indices(&self, indices: &[usize], label: Label) -> Vec<usize> {
        indices
            .iter()
            .copied()
            .filter(|&i| self.labels[i] == label)
            .collect()
    }

    /// Dense row matrix for the selected samples.
    pub fn matrix(&self, indices: &[usize]) -> Array2<f64> {
        let mut m = Array2::zeros((indices.len(), self.feature_count));
        for (row, &i) in indices.iter().enumerate() {
            for (col, &b) in self.samples[i].bits().iter().enumerate() {
                m[(row, col)] = b as f64;
            }
        }
        m
    }

    /// Owned copies of the selected samples.
    pub fn vectors(&self, indices: &[usize]) -> Vec<FeatureVector> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<Label> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Writes the dataset as CSV: header `label,f0,...,f{M-1}`, LF line
    /// endings, no quoting, one trailing newline.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str("label");
        for d in 0..self.feature_count {
            out.push_str(&format!(",f{d}"));
        }
        out.push('\n');
        for (sample, label) in self.samples.iter().zip(&self.labels) {
            out.push_str(&label.as_u8().to_string());
            for &b in sample.bits() {
                out.push(',');
                out.push(if b == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a dataset written by [`LabeledDataset::save_csv`]. The feature
    /// count is inferred from the header.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.split('\n').enumerate();

        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"label") || cols.len() < 2 {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header `label,f0,...`, got `{header}`"),
            });
        }
        let feature_count = cols.len() - 1;
        for (d, col) in cols[1..].iter().enumerate() {
            if *col != format!("f{d}") {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header column `f{d}`, got `{col}`"),
                });
            }
        }

        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.is_empty() {
                continue; // trailing newline
            }
            let mut cells = line.split(',');
            let label_cell = cells.next().unwrap_or_default();
            let label = match label_cell {
                "0" => Label::Benign,
                "1" => Label::Malware,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("label must be 0 or 1, got `{other}`"),
                    })
                }
            };
            let mut bits = Vec::with_capacity(feature_count);
            for cell in cells {
                match cell {
                    "0" => bits.push(0),
                    "1" => bits.push(1),
                    other => {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("cell must be 0 or 1, got `{other}`"),
                        })
                    }
                }
            }
            if bits.len() != feature_count {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "row has {} feature cells, header declares {feature_count}",
                        bits.len()
                    ),
                });
            }
            samples.push(FeatureVector { bits });
            labels.push(label);
        }
        LabeledDataset::new(samples, labels, feature_count)
    }

    /// Minibatch plan over the whole dataset; see [`minibatches`].
    pub fn sample_minibatches(
        &self,
        total_batch: usize,
        seed: u64,
    ) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let all: Vec<usize> = (0..self.len()).collect();
        minibatches(self, &all, total_batch, seed)
    }
}

/// Generative model standing in for a crawled program corpus.
///
/// The first `discriminative_count` features are benign markers: they fire
/// with `benign_on_prob` in benign programs but only `malware_on_prob` in
/// malware. The remaining features fire at `background_on_prob` in both
/// classes. Identical spec and seed reproduce the identical dataset
/// bit-for-bit.
///
/// The marker direction matters to the attack dynamics: malware is
/// recognizable by what it *lacks*, which is exactly the signal an
/// add-only adversary can erase. Were the signal carried by features
/// malware has (and benign lacks), no amount of feature addition could
/// hide it and the defender would win any retraining race outright.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub feature_count: usize,
    pub discriminative_count: usize,
    /// On-probability of a marker in malware.
    pub malware_on_prob: f64,
    /// On-probability of a marker in benign programs.
    pub benign_on_prob: f64,
    pub background_on_prob: f64,
    pub malware_fraction: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Defaults calibrated so that every stock detector clears 0.90 TPR on
    /// held-out malware. The marker block is deliberately wide: a defender
    /// that retrains on captured adversarial examples closes the marker
    /// subsets it has seen, and a narrow block would run out of fresh
    /// evasion room within a few rounds of an arms race.
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            feature_count: 160,
            discriminative_count: 64,
            malware_on_prob: 0.1,
            benign_on_prob: 0.6,
            background_on_prob: 0.15,
            malware_fraction: 0.3,
            sample_count: 10_000,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_count == 0 {
            return Err(Error::Config("feature_count must be positive".into()));
        }
        if self.discriminative_count == 0 || self.discriminative_count > self.feature_count {
            return Err(Error::Config(format!(
                "discriminative_count must be in 1..={}, got {}",
                self.feature_count, self.discriminative_count
            )));
        }
        for (name, p) in [
            ("malware_on_prob", self.malware_on_prob),
            ("benign_on_prob", self.benign_on_prob),
            ("background_on_prob", self.background_on_prob),
            ("malware_fraction", self.malware_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if self.sample_count == 0 {
            return Err(Error::Config("sample_count must be positive".into()));
        }
        Ok(())
    }

    /// Draws the dataset: one label Bernoulli per sample, then one Bernoulli
    /// per feature with the class-appropriate probability.
    pub fn synthesize(&self) -> Result<LabeledDataset> {
        self.validate()?;
        let mut rng = seed::rng(self.seed);
        let mut samples = Vec::with_capacity(self.sample_count);
        let mut labels = Vec::with_capacity(self.sample_count);
        for _ in 0..self.sample_count {
            let label = if rng.gen::<f64>() < self.malware_fraction {
                Label::Malware
            } else {
                Label::Benign
            };
            let marker_p = match label {
                Label::Malware => self.malware_on_prob,
                Label::Benign => self.benign_on_prob,
            };
            let mut bits = Vec::with_capacity(self.feature_count);
            for d in 0..self.feature_count {
                let p = if d < self.discriminative_count {
                    marker_p
                } else {
                    self.background_on_prob
                };
                bits.push(u8::from(rng.gen::<f64>() < p));
            }
            samples.push(FeatureVector { bits });
            labels.push(label);
        }
        LabeledDataset::new(samples, labels, self.feature_count)
    }
}

/// Convenience wrapper matching the operation name used elsewhere.
pub fn synthesize(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.synthesize()
}

/// The two dataset protocols: attacker and defender share one training set,
/// or train on disjoint halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Shared,
    Disjoint,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::Shared => write!(f, "shared"),
            SplitMode::Disjoint => write!(f, "disjoint"),
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<SplitMode> {
        match s {
            "shared" => Ok(SplitMode::Shared),
            "disjoint" => Ok(SplitMode::Disjoint),
            other => Err(Error::Config(format!(
                "unknown split mode `{other}`, expected shared or disjoint"
            ))),
        }
    }
}

/// Index bookkeeping for one experiment: who trains on what, what is held
/// out for testing, and the attacker's validation carve.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub attacker_train: Vec<usize>,
    pub defender_train: Vec<usize>,
    pub test: Vec<usize>,
    pub attacker_validation: Vec<usize>,
}

impl SplitPlan {
    /// Attacker training indices with the validation carve removed; this is
    /// what the networks actually fit on.
    pub fn attacker_fit(&self) -> Vec<usize> {
        let val: std::collections::HashSet<usize> =
            self.attacker_validation.iter().copied().collect();
        self.attacker_train
            .iter()
            .copied()
            .filter(|i| !val.contains(i))
            .collect()
    }
}

/// Allocates `target` slots across classes proportionally to `class_sizes`
/// (largest-remainder rounding, ties to the lower class index).
fn proportional_counts(class_sizes: &[usize], target: usize) -> Vec<usize> {
    let total: usize = class_sizes.iter().sum();
    if total == 0 || target == 0 {
        return vec![0; class_sizes.len()];
    }
    let target = target.min(total);
    let ideals: Vec<f64> = class_sizes
        .iter()
        .map(|&s| target as f64 * s as f64 / total as f64)
        .collect();
    let mut counts: Vec<usize> = ideals.iter().map(|&x| x.floor() as usize).collect();
    let mut leftover = target - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideals[a] - ideals[a].floor();
        let fb = ideals[b] - ideals[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        if counts[c] < class_sizes[c] {
            counts[c] += 1;
            leftover -= 1;
        }
    }
    counts
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Builds the split plan for `mode`.
///
/// Shared: one stratified 80/20 train/test split (defender's seed orders the
/// shuffle) with both roles training on the same 80%. Disjoint: stratified
/// 40/40/20. In both modes the attacker carves a 25% validation subset out
/// of its training indices with its own seed.
pub fn make_split(
    ds: &LabeledDataset,
    mode: SplitMode,
    seed_attacker: u64,
    seed_defender: u64,
) -> Result<SplitPlan> {
    if ds.is_empty() {
        return Err(Error::Sizing("cannot split an empty dataset".into()));
    }
    let mut benign = ds.indices_of(Label::Benign);
    let mut malware = ds.indices_of(Label::Malware);
    if benign.is_empty() || malware.is_empty() {
        return Err(Error::Sizing(
            "stratified split needs both classes present".into(),
        ));
    }

    let mut part_rng = seed::rng(seed::derive(seed_defender, 0x115));
    benign.shuffle(&mut part_rng);
    malware.shuffle(&mut part_rng);
    let class_sizes = [benign.len(), malware.len()];
    let n = ds.len();

    let (attacker_train, defender_train, test) = match mode {
        SplitMode::Shared => {
            let test_counts = proportional_counts(&class_sizes, round_half_up(0.2 * n as f64));
            let test = take_counts(&[&benign, &malware], &test_counts, &[0, 0]);
            let train = take_rest(&[&benign, &malware], &test_counts);
            (train.clone(), train, test)
        }
        SplitMode::Disjoint => {
            let att_counts = proportional_counts(&class_sizes, round_half_up(0.4 * n as f64));
            let remaining = [
                class_sizes[0] - att_counts[0],
                class_sizes[1] - att_counts[1],
            ];
            let def_target = round_half_up(0.4 * n as f64);
            let def_counts = proportional_counts(&remaining, def_target.min(remaining.iter().sum()));
            let attacker = take_counts(&[&benign, &malware], &att_counts, &[0, 0]);
            let defender = take_counts(&[&benign, &malware], &def_counts, &att_counts);
            let mut used = att_counts.to_vec();
            for (u, d) in used.iter_mut().zip(&def_counts) {
                *u += d;
            }
            let test = take_rest(&[&benign, &malware], &used);
            (attacker, defender, test)
        }
    };

    // Attacker validation: 25% of attacker_train, stratified, attacker's seed.
    let mut att_benign = ds.filter_indices(&attacker_train, Label::Benign);
    let mut att_malware = ds.filter_indices(&attacker_train, Label::Malware);
    let mut val_rng = seed::rng(seed::derive(seed_attacker, 0x7a1));
    att_benign.shuffle(&mut val_rng);
    att_malware.shuffle(&mut val_rng);
    let val_target = round_half_up(0.25 * attacker_train.len() as f64);
    let val_counts = proportional_counts(&[att_benign.len(), att_malware.len()], val_target);
    let attacker_validation = take_counts(&[&att_benign, &att_malware], &val_counts, &[0, 0]);

    let plan = SplitPlan {
        mode,
        attacker_train,
        defender_train,
        test,
        attacker_validation,
    };
    validate_plan(ds, &plan)?;
    Ok(plan)
}

fn take_counts(classes: &[&Vec<usize>], counts: &[usize], offsets: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for ((class, &count), &offset) in classes.iter().zip(counts).zip(offsets) {
        out.extend_from_slice(&class[offset..offset + count]);
    }
    out.sort_unstable();
    out
}

fn take_rest(classes: &[&Vec<usize>], used: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for (class, &used) in classes.iter().zip(used) {
        out.extend_from_slice(&class[used..]);
    }
    out.sort_unstable();
    out
}

fn validate_plan(ds: &LabeledDataset, plan: &SplitPlan) -> Result<()> {
    let roles: [(&str, &[usize]); 3] = [
        ("attacker_train", &plan.attacker_train),
        ("defender_train", &plan.defender_train),
        ("test", &plan.test),
    ];
    for (name, idx) in roles {
        for label in [Label::Benign, Label::Malware] {
            if ds.filter_indices(idx, label).is_empty() {
                return Err(Error::Sizing(format!(
                    "{name} received no {label:?} samples; dataset too small for a stratified split"
                )));
            }
        }
    }
    if plan.attacker_validation.is_empty() {
        return Err(Error::Sizing(
            "attacker validation carve is empty; dataset too small".into(),
        ));
    }
    let fit = plan.attacker_fit();
    for label in [Label::Benign, Label::Malware] {
        if ds.filter_indices(&fit, label).is_empty() {
            return Err(Error::Sizing(format!(
                "attacker fit set received no {label:?} samples; dataset too small"
            )));
        }
    }
    Ok(())
}

/// Splits `total_batch` into (malware, benign) sizes matching the class
/// ratio of the indexed subset, each side at least 1.
pub fn batch_sizes(malware_n: usize, benign_n: usize, total_batch: usize) -> (usize, usize) {
    let frac = malware_n as f64 / (malware_n + benign_n) as f64;
    let m = round_half_up(total_batch as f64 * frac).clamp(1, total_batch - 1);
    (m, total_batch - m)
}

/// One epoch of paired (malware, benign) index minibatches over `indices`.
///
/// Sizes follow the subset's class ratio; each sample appears at most once
/// per class stream per epoch; the sequence is a pure function of `seed`.
pub fn minibatches(
    ds: &LabeledDataset,
    indices: &[usize],
    total_batch: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if total_batch < 2 {
        return Err(Error::Config(format!(
            "total_batch must be at least 2, got {total_batch}"
        )));
    }
    let mut malware = ds.filter_indices(indices, Label::Malware);
    let mut benign = ds.filter_indices(indices, Label::Benign);
    if malware.is_empty() || benign.is_empty() {
        return Err(Error::Sizing(
            "minibatching needs both classes present".into(),
        ));
    }
    let mut rng = seed::rng(seed::derive(seed, 0xba7c));
    malware.shuffle(&mut rng);
    benign.shuffle(&mut rng);

    let (m_size, b_size) = batch_sizes(malware.len(), benign.len(), total_batch);
    let steps = (malware.len() / m_size).min(benign.len() / b_size).max(1);
    let mut out = Vec::with_capacity(steps);
    for s in 0..steps {
        let m_lo = (s * m_size).min(malware.len());
        let m_hi = ((s + 1) * m_size).min(malware.len());
        let b_lo = (s * b_size).min(benign.len());
        let b_hi = ((s + 1) * b_size).min(benign.len());
        if m_lo == m_hi || b_lo == b_hi {
            break;
        }
        out.push((malware[m_lo..m_hi].to_vec(), benign[b_lo..b_hi].to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degenerate_spec() -> SyntheticSpec {
        SyntheticSpec {
            feature_count: 4,
            discriminative_count: 4,
            malware_on_prob: 1.0,
            benign_on_prob: 0.0,
            background_on_prob: 0.5,
            malware_fraction: 0.5,
            sample_count: 4,
            seed: 9,
        }
    }

    #[test]
    fn degenerate_probabilities_force_outcomes() {
        // Marker probability 1 in malware and 0 in benign pins every bit.
        let ds = degenerate_spec().synthesize().unwrap();
        assert_eq!(ds.len(), 4);
        for i in 0..ds.len() {
            match ds.label(i) {
                Label::Malware => assert_eq!(ds.sample(i).bits(), &[1, 1, 1, 1]),
                Label::Benign => assert_eq!(ds.sample(i).bits(), &[0, 0, 0, 0]),
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = spec.synthesize().unwrap();
        let b = spec.synthesize().unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.malware_on_prob = 1.5;
        assert!(matches!(spec.synthesize(), Err(Error::Config(_))));
        let mut spec = SyntheticSpec::default();
        spec.discriminative_count = spec.feature_count + 1;
        assert!(matches!(spec.synthesize(), Err(Error::Config(_))));
    }

    #[test]
    fn synthesis_statistics_match_spec_probabilities() {
        let spec = SyntheticSpec::default();
        let ds = spec.synthesize().unwrap();
        let malware_idx = ds.indices_of(Label::Malware);
        let benign_idx = ds.indices_of(Label::Benign);
        let frequency = |idx: &[usize], d: usize| {
            idx.iter().filter(|&&i| ds.sample(i).get(d) == 1).count() as f64 / idx.len() as f64
        };
        for d in 0..spec.discriminative_count {
            let on_m = frequency(&malware_idx, d);
            let on_b = frequency(&benign_idx, d);
            assert!(
                (on_m - spec.malware_on_prob).abs() < 0.03,
                "feature {d}: malware on-frequency {on_m}"
            );
            assert!(
                (on_b - spec.benign_on_prob).abs() < 0.03,
                "feature {d}: benign on-frequency {on_b}"
            );
        }
        let background = frequency(&malware_idx, spec.discriminative_count);
        assert!((background - spec.background_on_prob).abs() < 0.03);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        std::fs::write(&path, "label,f0,f1\n1,1,0\n0,0,1\n").unwrap();
        let ds = LabeledDataset::load_csv(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_count(), 2);
        assert_eq!(ds.label(0), Label::Malware);
        assert_eq!(ds.label(1), Label::Benign);

        let out = dir.path().join("out.csv");
        ds.save_csv(&out).unwrap();
        assert_eq!(
            std::fs::read(&out).unwrap(),
            std::fs::read(&path).unwrap(),
            "round-trip must be byte-identical"
        );

        std::fs::write(&path, "label,f0,f1\n1,1,0\n0,2,1\n").unwrap();
        match LabeledDataset::load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "label,f0,f1\n1,1\n").unwrap();
        match LabeledDataset::load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn dataset_100() -> LabeledDataset {
        // 30 malware, 70 benign, 2 features.
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for i in 0..100 {
            let label = if i % 10 < 3 {
                Label::Malware
            } else {
                Label::Benign
            };
            samples.push(FeatureVector::new(vec![(i % 2) as u8, 1]).unwrap());
            labels.push(label);
        }
        LabeledDataset::new(samples, labels, 2).unwrap()
    }

    #[test]
    fn shared_split_sizes() {
        let ds = dataset_100();
        let plan = make_split(&ds, SplitMode::Shared, 11, 22).unwrap();
        assert_eq!(plan.attacker_train.len(), 80);
        assert_eq!(plan.defender_train, plan.attacker_train);
        assert_eq!(plan.test.len(), 20);
        assert_eq!(plan.attacker_validation.len(), 20);
        assert_eq!(plan.attacker_fit().len(), 60);
    }

    #[test]
    fn disjoint_split_sizes_and_disjointness() {
        let ds = dataset_100();
        let plan = make_split(&ds, SplitMode::Disjoint, 11, 22).unwrap();
        assert_eq!(plan.attacker_train.len(), 40);
        assert_eq!(plan.defender_train.len(), 40);
        assert_eq!(plan.test.len(), 20);
        let a: std::collections::HashSet<_> = plan.attacker_train.iter().collect();
        let d: std::collections::HashSet<_> = plan.defender_train.iter().collect();
        let t: std::collections::HashSet<_> = plan.test.iter().collect();
        assert!(a.is_disjoint(&d));
        assert!(a.is_disjoint(&t));
        assert!(d.is_disjoint(&t));
    }

    #[test]
    fn validation_is_inside_train_and_seed_dependent() {
        let ds = dataset_100();
        let plan_a = make_split(&ds, SplitMode::Shared, 1, 22).unwrap();
        let plan_b = make_split(&ds, SplitMode::Shared, 2, 22).unwrap();
        // Same defender seed: identical base split.
        assert_eq!(plan_a.attacker_train, plan_b.attacker_train);
        assert_eq!(plan_a.test, plan_b.test);
        // Different attacker seeds: different validation carves.
        assert_ne!(plan_a.attacker_validation, plan_b.attacker_validation);
        let train: std::collections::HashSet<_> = plan_a.attacker_train.iter().collect();
        assert!(plan_a.attacker_validation.iter().all(|i| train.contains(i)));
    }

    #[test]
    fn splits_are_stratified() {
        let spec = SyntheticSpec {
            sample_count: 2000,
            ..SyntheticSpec::default()
        };
        let ds = spec.synthesize().unwrap();
        let full = ds.malware_fraction();
        for mode in [SplitMode::Shared, SplitMode::Disjoint] {
            let plan = make_split(&ds, mode, 5, 6).unwrap();
            for (name, idx) in [
                ("attacker_train", &plan.attacker_train),
                ("defender_train", &plan.defender_train),
                ("test", &plan.test),
                ("attacker_validation", &plan.attacker_validation),
            ] {
                let frac = ds.filter_indices(idx, Label::Malware).len() as f64 / idx.len() as f64;
                assert!(
                    (frac - full).abs() < 0.02,
                    "{mode} {name}: fraction {frac} vs dataset {full}"
                );
            }
        }
    }

    #[test]
    fn split_rejects_tiny_datasets() {
        let samples = vec![
            FeatureVector::new(vec![1]).unwrap(),
            FeatureVector::new(vec![0]).unwrap(),
        ];
        let labels = vec![Label::Malware, Label::Benign];
        let ds = LabeledDataset::new(samples, labels, 1).unwrap();
        assert!(matches!(
            make_split(&ds, SplitMode::Shared, 1, 2),
            Err(Error::Sizing(_))
        ));
    }

    #[test]
    fn minibatch_ratio_follows_dataset() {
        let ds = dataset_100();
        let batches = ds.sample_minibatches(100, 3).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].0.len(), 30);
        assert_eq!(batches[0].1.len(), 70);
    }

    #[test]
    fn minibatch_balanced_tiny() {
        let samples = vec![
            FeatureVector::new(vec![1]).unwrap(),
            FeatureVector::new(vec![0]).unwrap(),
            FeatureVector::new(vec![1]).unwrap(),
            FeatureVector::new(vec![0]).unwrap(),
        ];
        let labels = vec![
            Label::Malware,
            Label::Benign,
            Label::Malware,
            Label::Benign,
        ];
        let ds = LabeledDataset::new(samples, labels, 1).unwrap();
        let batches = ds.sample_minibatches(2, 3).unwrap();
        assert_eq!(batches.len(), 2);
        for (m, b) in &batches {
            assert_eq!(m.len(), 1);
            assert_eq!(b.len(), 1);
        }
    }

    #[test]
    fn minibatches_are_deterministic_and_cover_once() {
        let ds = dataset_100();
        let a = ds.sample_minibatches(20, 5).unwrap();
        let b = ds.sample_minibatches(20, 5).unwrap();
        assert_eq!(a, b);
        let mut seen_malware = std::collections::HashSet::new();
        let mut seen_benign = std::collections::HashSet::new();
        for (m, bn) in &a {
            for &i in m {
                assert!(seen_malware.insert(i), "malware {i} repeated");
                assert!(ds.label(i).is_malware());
            }
            for &i in bn {
                assert!(seen_benign.insert(i), "benign {i} repeated");
                assert!(!ds.label(i).is_malware());
            }
        }
    }

    #[test]
    fn minibatch_rejects_total_below_two() {
        let ds = dataset_100();
        assert!(matches!(
            ds.sample_minibatches(1, 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn proportional_counts_hit_target_exactly() {
        for (sizes, target) in [
            (vec![70usize, 30], 20usize),
            (vec![26, 54], 20),
            (vec![55, 25], 20),
            (vec![1, 1], 1),
            (vec![3, 7, 10], 7),
        ] {
            let counts = proportional_counts(&sizes, target);
            assert_eq!(counts.iter().sum::<usize>(), target, "sizes {sizes:?}");
            for (c, s) in counts.iter().zip(&sizes) {
                assert!(c <= s);
            }
        }
    }
}
