//! CART decision trees over binary features, and the bagged forest built
//! from them.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::seed;

use super::Lines;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Node {
    /// Binary-feature test: value 0 goes left, value 1 goes right.
    Split {
        feature: usize,
        left: usize,
        right: usize,
    },
    Leaf { label: Label },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecisionTree {
    /// Node 0 is the root.
    nodes: Vec<Node>,
}

/// How split candidates are drawn: every feature, or a per-split random
/// subset of fixed size (random-forest style).
pub(crate) enum FeaturePool {
    All,
    Subset { size: usize, rng: rand_chacha::ChaCha8Rng },
}

impl FeaturePool {
    /// Candidate features in ascending order (the tie-break order).
    fn draw(&mut self, feature_count: usize) -> Vec<usize> {
        match self {
            FeaturePool::All => (0..feature_count).collect(),
            FeaturePool::Subset { size, rng } => {
                let mut all: Vec<usize> = (0..feature_count).collect();
                all.shuffle(rng);
                let mut picked: Vec<usize> = all.into_iter().take(*size).collect();
                picked.sort_unstable();
                picked
            }
        }
    }
}

/// Gini impurity of a node holding `n0` benign and `n1` malware rows.
fn gini(n0: usize, n1: usize) -> f64 {
    let n = (n0 + n1) as f64;
    if n == 0.0 {
        return 0.0;
    }
    1.0 - ((n0 * n0 + n1 * n1) as f64) / (n * n)
}

/// Weighted post-split impurity for `feature` over `rows`, or `None` when
/// the feature is constant there.
fn split_impurity(x: &Array2<f64>, y: &[u8], rows: &[usize], feature: usize) -> Option<f64> {
    let (mut l0, mut l1, mut r0, mut r1) = (0usize, 0usize, 0usize, 0usize);
    for &r in rows {
        let on = x[(r, feature)] > 0.5;
        match (on, y[r]) {
            (false, 0) => l0 += 1,
            (false, _) => l1 += 1,
            (true, 0) => r0 += 1,
            (true, _) => r1 += 1,
        }
    }
    let (nl, nr) = (l0 + l1, r0 + r1);
    if nl == 0 || nr == 0 {
        return None;
    }
    let n = (nl + nr) as f64;
    Some((nl as f64 * gini(l0, l1) + nr as f64 * gini(r0, r1)) / n)
}

/// Best (feature, weighted impurity) among `candidates`, ties going to the
/// lowest feature index. `candidates` must be ascending.
fn best_split(
    x: &Array2<f64>,
    y: &[u8],
    rows: &[usize],
    candidates: &[usize],
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &f in candidates {
        if let Some(w) = split_impurity(x, y, rows, f) {
            match best {
                Some((_, bw)) if w >= bw - 1e-12 => {}
                _ => best = Some((f, w)),
            }
        }
    }
    best
}

impl DecisionTree {
    /// Greedy CART with Gini impurity. Splits while the node is impure,
    /// the depth cap allows it, and some candidate strictly reduces
    /// impurity. Leaves take the majority label, ties toward malware.
    pub(crate) fn fit(
        x: &Array2<f64>,
        y: &[u8],
        max_depth: usize,
        mut pool: FeaturePool,
    ) -> DecisionTree {
        let rows: Vec<usize> = (0..x.nrows()).collect();
        let mut nodes = Vec::new();
        Self::grow(x, y, &rows, 0, max_depth, &mut pool, &mut nodes);
        DecisionTree { nodes }
    }

    pub(crate) fn fit_plain(x: &Array2<f64>, y: &[u8], max_depth: usize) -> DecisionTree {
        Self::fit(x, y, max_depth, FeaturePool::All)
    }

    fn grow(
        x: &Array2<f64>,
        y: &[u8],
        rows: &[usize],
        depth: usize,
        max_depth: usize,
        pool: &mut FeaturePool,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let n1 = rows.iter().filter(|&&r| y[r] == 1).count();
        let n0 = rows.len() - n1;
        let here = gini(n0, n1);
        let leaf = |nodes: &mut Vec<Node>| {
            let label = if n1 >= n0 { Label::Malware } else { Label::Benign };
            nodes.push(Node::Leaf { label });
            nodes.len() - 1
        };
        if depth >= max_depth || n0 == 0 || n1 == 0 {
            return leaf(nodes);
        }
        let candidates = pool.draw(x.ncols());
        let Some((feature, w)) = best_split(x, y, rows, &candidates) else {
            return leaf(nodes);
        };
        if w >= here - 1e-12 {
            return leaf(nodes);
        }
        let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
        for &r in rows {
            if x[(r, feature)] > 0.5 {
                right_rows.push(r);
            } else {
                left_rows.push(r);
            }
        }
        let idx = nodes.len();
        nodes.push(Node::Split {
            feature,
            left: 0,
            right: 0,
        });
        let left = Self::grow(x, y, &left_rows, depth + 1, max_depth, pool, nodes);
        let right = Self::grow(x, y, &right_rows, depth + 1, max_depth, pool, nodes);
        nodes[idx] = Node::Split {
            feature,
            left,
            right,
        };
        idx
    }

    pub(crate) fn predict_row(&self, row: ndarray::ArrayView1<f64>) -> Label {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { label } => return label,
                Node::Split {
                    feature,
                    left,
                    right,
                } => at = if row[feature] > 0.5 { right } else { left },
            }
        }
    }

    /// Feature index of the root split, if the root is not a leaf.
    pub(crate) fn root_feature(&self) -> Option<usize> {
        match self.nodes.first() {
            Some(&Node::Split { feature, .. }) => Some(feature),
            _ => None,
        }
    }

    #[cfg(test)]
    pub(crate) fn single_leaf(label: Label) -> DecisionTree {
        DecisionTree {
            nodes: vec![Node::Leaf { label }],
        }
    }

    pub(crate) fn write_into(&self, out: &mut String) {
        self.write_node(0, out);
    }

    fn write_node(&self, at: usize, out: &mut String) {
        match self.nodes[at] {
            Node::Leaf { label } => {
                out.push_str("leaf ");
                out.push_str(&label.as_u8().to_string());
                out.push('\n');
            }
            Node::Split {
                feature,
                left,
                right,
            } => {
                out.push_str("split ");
                out.push_str(&feature.to_string());
                out.push('\n');
                self.write_node(left, out);
                self.write_node(right, out);
            }
        }
    }

    pub(crate) fn read_from(lines: &mut Lines<'_>) -> Result<DecisionTree> {
        let mut nodes = Vec::new();
        Self::read_node(lines, &mut nodes)?;
        Ok(DecisionTree { nodes })
    }

    fn read_node(lines: &mut Lines<'_>, nodes: &mut Vec<Node>) -> Result<usize> {
        let (lno, line) = lines.next_line()?;
        let bad = |msg: String| Error::Parse { line: lno, msg };
        if let Some(rest) = line.strip_prefix("leaf ") {
            let v: u8 = rest
                .parse()
                .map_err(|_| bad(format!("bad leaf label `{rest}`")))?;
            let label = Label::from_u8(v)
                .ok_or_else(|| bad(format!("leaf label must be 0 or 1, got {v}")))?;
            nodes.push(Node::Leaf { label });
            Ok(nodes.len() - 1)
        } else if let Some(rest) = line.strip_prefix("split ") {
            let feature: usize = rest
                .parse()
                .map_err(|_| bad(format!("bad split feature `{rest}`")))?;
            let idx = nodes.len();
            nodes.push(Node::Split {
                feature,
                left: 0,
                right: 0,
            });
            let left = Self::read_node(lines, nodes)?;
            let right = Self::read_node(lines, nodes)?;
            nodes[idx] = Node::Split {
                feature,
                left,
                right,
            };
            Ok(idx)
        } else {
            Err(bad(format!("expected `leaf` or `split`, got `{line}`")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Forest {
    trees: Vec<DecisionTree>,
}

impl Forest {
    /// Bagged CART forest: each tree gets a bootstrap resample and draws
    /// `⌈√M⌉` split candidates per node from its own seeded stream, so the
    /// result is independent of scheduling.
    pub(crate) fn fit(
        x: &Array2<f64>,
        y: &[u8],
        tree_count: usize,
        max_depth: usize,
        seed_value: u64,
    ) -> Forest {
        let subset = (x.ncols() as f64).sqrt().ceil() as usize;
        let trees = (0..tree_count)
            .into_par_iter()
            .map(|t| {
                let mut rng = seed::rng(seed::derive2(seed_value, 0xf07e57, t as u64));
                let n = x.nrows();
                let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                let (bx, by) = resample(x, y, &rows);
                DecisionTree::fit(
                    &bx,
                    &by,
                    max_depth,
                    FeaturePool::Subset {
                        size: subset.min(x.ncols()),
                        rng,
                    },
                )
            })
            .collect();
        Forest { trees }
    }

    /// Majority vote, ties toward malware.
    pub(crate) fn predict_row(&self, row: ndarray::ArrayView1<f64>) -> Label {
        let malware = self
            .trees
            .iter()
            .filter(|t| t.predict_row(row).is_malware())
            .count();
        if malware * 2 >= self.trees.len() {
            Label::Malware
        } else {
            Label::Benign
        }
    }

    #[cfg(test)]
    pub(crate) fn from_trees(trees: Vec<DecisionTree>) -> Forest {
        Forest { trees }
    }

    pub(crate) fn write_into(&self, out: &mut String) {
        out.push_str("trees ");
        out.push_str(&self.trees.len().to_string());
        out.push('\n');
        for t in &self.trees {
            t.write_into(out);
        }
    }

    pub(crate) fn read_from(lines: &mut Lines<'_>) -> Result<Forest> {
        let (lno, line) = lines.next_line()?;
        let count: usize = line
            .strip_prefix("trees ")
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: lno,
                msg: format!("expected `trees N`, got `{line}`"),
            })?;
        let trees = (0..count)
            .map(|_| DecisionTree::read_from(lines))
            .collect::<Result<_>>()?;
        Ok(Forest { trees })
    }
}

fn resample(x: &Array2<f64>, y: &[u8], rows: &[usize]) -> (Array2<f64>, Vec<u8>) {
    let mut bx = Array2::zeros((rows.len(), x.ncols()));
    let mut by = Vec::with_capacity(rows.len());
    for (i, &r) in rows.iter().enumerate() {
        bx.row_mut(i).assign(&x.row(r));
        by.push(y[r]);
    }
    (bx, by)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Exhaustive depth-1 oracle: the best achievable weighted Gini over
    /// every single-feature stump, with its lowest achieving feature.
    fn best_stump(x: &Array2<f64>, y: &[u8]) -> Option<(usize, f64)> {
        let rows: Vec<usize> = (0..x.nrows()).collect();
        let mut best: Option<(usize, f64)> = None;
        for f in 0..x.ncols() {
            if let Some(w) = split_impurity(x, y, &rows, f) {
                if best.map_or(true, |(_, bw)| w < bw - 1e-12) {
                    best = Some((f, w));
                }
            }
        }
        best
    }

    fn random_binary_dataset(
        rng: &mut impl Rng,
        n: usize,
        m: usize,
    ) -> (Array2<f64>, Vec<u8>) {
        let x = Array2::from_shape_fn((n, m), |_| f64::from(rng.gen::<bool>()));
        let y = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        (x, y)
    }

    #[test]
    fn four_sample_example_splits_on_feature_zero() {
        let x = array![[1.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let y = vec![1, 1, 0, 0];
        let tree = DecisionTree::fit_plain(&x, &y, 12);
        assert_eq!(tree.root_feature(), Some(0));
        for (r, &label) in y.iter().enumerate() {
            assert_eq!(tree.predict_row(x.row(r)).as_u8(), label);
        }
    }

    #[test]
    fn depth_one_cart_matches_exhaustive_stump_search() {
        let mut rng = seed::rng(0x57a6);
        for _ in 0..500 {
            let n = rng.gen_range(1..=16);
            let m = rng.gen_range(1..=4);
            let (x, y) = random_binary_dataset(&mut rng, n, m);
            let tree = DecisionTree::fit_plain(&x, &y, 1);
            let rows: Vec<usize> = (0..n).collect();
            let n1 = y.iter().filter(|&&v| v == 1).count();
            let node_gini = gini(n - n1, n1);
            match (tree.root_feature(), best_stump(&x, &y)) {
                (Some(f), Some((of, ow))) => {
                    assert_eq!(f, of, "feature tie-break mismatch");
                    let w = split_impurity(&x, &y, &rows, f).unwrap();
                    assert!((w - ow).abs() < 1e-12);
                    assert!(w < node_gini - 1e-12);
                }
                (None, oracle) => {
                    // CART refused to split: no stump may strictly improve.
                    if let Some((_, ow)) = oracle {
                        assert!(ow >= node_gini - 1e-12);
                    }
                }
                (Some(f), None) => panic!("split on {f} with no valid stump"),
            }
        }
    }

    #[test]
    fn pure_node_is_a_leaf() {
        let x = array![[0.0, 1.0], [1.0, 0.0]];
        let y = vec![1, 1];
        let tree = DecisionTree::fit_plain(&x, &y, 12);
        assert_eq!(tree.root_feature(), None);
        assert_eq!(tree.predict_row(x.row(0)), Label::Malware);
    }

    #[test]
    fn leaf_tie_breaks_toward_malware() {
        // Two identical rows with opposite labels: unsplittable, tied leaf.
        let x = array![[1.0, 0.0], [1.0, 0.0]];
        let y = vec![0, 1];
        let tree = DecisionTree::fit_plain(&x, &y, 12);
        assert_eq!(tree.predict_row(x.row(0)), Label::Malware);
    }

    #[test]
    fn depth_cap_limits_tree() {
        // y = x0 AND x1 needs two levels; depth 1 must leave an error.
        let x = array![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let y = vec![0, 0, 0, 1];
        let shallow = DecisionTree::fit_plain(&x, &y, 1);
        let errors: usize = (0..4)
            .filter(|&r| shallow.predict_row(x.row(r)).as_u8() != y[r])
            .count();
        assert!(errors > 0);
        let deep = DecisionTree::fit_plain(&x, &y, 2);
        let errors: usize = (0..4)
            .filter(|&r| deep.predict_row(x.row(r)).as_u8() != y[r])
            .count();
        assert_eq!(errors, 0);
    }

    #[test]
    fn single_leaf_tree_is_constant() {
        let tree = DecisionTree::single_leaf(Label::Benign);
        let x = array![[1.0, 1.0], [0.0, 0.0]];
        assert_eq!(tree.predict_row(x.row(0)), Label::Benign);
        assert_eq!(tree.predict_row(x.row(1)), Label::Benign);
    }

    #[test]
    fn forest_of_identical_trees_matches_one_tree() {
        let x = array![[1.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let y = vec![1, 1, 0, 0];
        let tree = DecisionTree::fit_plain(&x, &y, 12);
        let forest = Forest::from_trees(vec![tree.clone(), tree.clone(), tree.clone()]);
        for r in 0..4 {
            assert_eq!(forest.predict_row(x.row(r)), tree.predict_row(x.row(r)));
        }
    }

    #[test]
    fn forest_tie_goes_to_malware() {
        let forest = Forest::from_trees(vec![
            DecisionTree::single_leaf(Label::Malware),
            DecisionTree::single_leaf(Label::Benign),
        ]);
        let x = array![[0.0]];
        assert_eq!(forest.predict_row(x.row(0)), Label::Malware);
    }

    #[test]
    fn forest_is_deterministic_and_seed_sensitive() {
        let mut rng = seed::rng(9);
        let (x, y) = random_binary_dataset(&mut rng, 64, 6);
        let a = Forest::fit(&x, &y, 11, 4, 7);
        let b = Forest::fit(&x, &y, 11, 4, 7);
        assert_eq!(a, b);
        let c = Forest::fit(&x, &y, 11, 4, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn tree_serialization_round_trips() {
        let mut rng = seed::rng(31);
        let (x, y) = random_binary_dataset(&mut rng, 32, 5);
        let tree = DecisionTree::fit_plain(&x, &y, 6);
        let mut text = String::new();
        tree.write_into(&mut text);
        let back = DecisionTree::read_from(&mut Lines::new(&text)).unwrap();
        assert_eq!(tree, back);
    }
}
