//! Linear classifiers: logistic regression (full-batch gradient descent)
//! and a linear SVM (stochastic subgradient descent on the hinge loss).

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;

use crate::dataset::Label;
use crate::error::{Error, Result};
#[cfg(test)]
use crate::neuralnet::PROB_EPSILON;
use crate::seed;

use super::Lines;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LinearModel {
    pub(crate) weights: Array1<f64>,
    pub(crate) bias: f64,
    /// LR labels malware on probability strictly above one half; the SVM
    /// labels malware on a non-negative margin.
    pub(crate) malware_on_zero: bool,
}

impl LinearModel {
    pub(crate) fn predict_row(&self, row: ndarray::ArrayView1<f64>) -> Label {
        let z = row.dot(&self.weights) + self.bias;
        let malware = if self.malware_on_zero { z >= 0.0 } else { z > 0.0 };
        if malware {
            Label::Malware
        } else {
            Label::Benign
        }
    }

    /// Logistic regression: full-batch gradient descent on mean BCE,
    /// 500 epochs at learning rate 0.1, parameters initialised to zero.
    pub(crate) fn fit_logistic(x: &Array2<f64>, y: &[u8]) -> LinearModel {
        let n = x.nrows() as f64;
        let yv = Array1::from_iter(y.iter().map(|&v| f64::from(v)));
        let mut w = Array1::zeros(x.ncols());
        let mut b = 0.0;
        for _ in 0..500 {
            let mut z = x.dot(&w);
            z += b;
            z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
            let residual = &z - &yv;
            let gw = x.t().dot(&residual) / n;
            let gb = residual.sum() / n;
            w.scaled_add(-0.1, &gw);
            b -= 0.1 * gb;
        }
        LinearModel {
            weights: w,
            bias: b,
            malware_on_zero: false,
        }
    }

    /// Mean BCE of the current logistic model; exposed for training tests
    /// only (the detector facade never reveals scores).
    #[cfg(test)]
    pub(crate) fn logistic_loss(&self, x: &Array2<f64>, y: &[u8]) -> f64 {
        let mut z = x.dot(&self.weights);
        z += self.bias;
        let mut loss = 0.0;
        for (&zi, &yi) in z.iter().zip(y) {
            let p = (1.0 / (1.0 + (-zi).exp())).clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
            loss -= if yi == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        loss / x.nrows() as f64
    }

    /// Linear SVM via Pegasos-style stochastic subgradient descent on the
    /// hinge loss with L2 term `lambda` = 1e-4, 20 shuffled epochs. The
    /// step size at global step t is 1/(lambda·t); the bias is updated on
    /// margin violations but not regularised.
    pub(crate) fn fit_svm(x: &Array2<f64>, y: &[u8], seed_value: u64) -> LinearModel {
        let lambda = 1e-4;
        let mut w: Array1<f64> = Array1::zeros(x.ncols());
        let mut b = 0.0;
        let mut t = 0u64;
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        for epoch in 0..20u64 {
            order.shuffle(&mut seed::rng(seed::derive2(seed_value, 0x5f3, epoch)));
            for &r in &order {
                t += 1;
                let eta = 1.0 / (lambda * t as f64);
                let yi = if y[r] == 1 { 1.0 } else { -1.0 };
                let row = x.row(r);
                let margin = yi * (row.dot(&w) + b);
                w *= 1.0 - eta * lambda;
                if margin < 1.0 {
                    w.scaled_add(eta * yi, &row);
                    b += eta * yi;
                }
            }
        }
        LinearModel {
            weights: w,
            bias: b,
            malware_on_zero: true,
        }
    }

    pub(crate) fn write_into(&self, out: &mut String) {
        use std::fmt::Write as _;
        let _ = writeln!(out, "weights {}", self.weights.len());
        for v in self.weights.iter() {
            let _ = writeln!(out, "{v}");
        }
        let _ = writeln!(out, "bias {}", self.bias);
    }

    pub(crate) fn read_from(lines: &mut Lines<'_>, malware_on_zero: bool) -> Result<LinearModel> {
        let (lno, line) = lines.next_line()?;
        let count: usize = line
            .strip_prefix("weights ")
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: lno,
                msg: format!("expected `weights N`, got `{line}`"),
            })?;
        let mut weights = Array1::zeros(count);
        for i in 0..count {
            let (lno, line) = lines.next_line()?;
            weights[i] = line.parse().map_err(|_| Error::Parse {
                line: lno,
                msg: format!("bad weight `{line}`"),
            })?;
        }
        let (lno, line) = lines.next_line()?;
        let bias: f64 = line
            .strip_prefix("bias ")
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: lno,
                msg: format!("expected `bias V`, got `{line}`"),
            })?;
        Ok(LinearModel {
            weights,
            bias,
            malware_on_zero,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// All-ones malware vs all-zeros benign: the degenerate extreme of the
    /// synthesizer's probability knobs.
    fn degenerate(n_each: usize, m: usize) -> (Array2<f64>, Vec<u8>) {
        let mut x = Array2::zeros((2 * n_each, m));
        let mut y = vec![0u8; 2 * n_each];
        for r in 0..n_each {
            x.row_mut(r).fill(1.0);
            y[r] = 1;
        }
        (x, y)
    }

    #[test]
    fn logistic_separates_degenerate_data_perfectly() {
        let (x, y) = degenerate(20, 8);
        let model = LinearModel::fit_logistic(&x, &y);
        let mut tp = 0;
        let mut fp = 0;
        for r in 0..x.nrows() {
            let predicted = model.predict_row(x.row(r)).is_malware();
            if y[r] == 1 && predicted {
                tp += 1;
            }
            if y[r] == 0 && predicted {
                fp += 1;
            }
        }
        assert_eq!(tp, 20, "TPR must be 1.0");
        assert_eq!(fp, 0, "FPR must be 0.0");
    }

    #[test]
    fn logistic_training_reduces_loss() {
        let mut rng = seed::rng(5);
        use rand::Rng;
        let x = Array2::from_shape_fn((80, 6), |_| f64::from(rng.gen::<bool>()));
        // Labels correlated with feature 0, with noise.
        let y: Vec<u8> = (0..80)
            .map(|r| {
                let flip = rng.gen_bool(0.1);
                let base = x[(r, 0)] > 0.5;
                u8::from(base != flip)
            })
            .collect();
        let trained = LinearModel::fit_logistic(&x, &y);
        let untrained = LinearModel {
            weights: Array1::zeros(6),
            bias: 0.0,
            malware_on_zero: false,
        };
        assert!(trained.logistic_loss(&x, &y) < untrained.logistic_loss(&x, &y) - 0.1);
    }

    #[test]
    fn logistic_zero_score_is_benign() {
        let model = LinearModel {
            weights: array![0.0, 0.0],
            bias: 0.0,
            malware_on_zero: false,
        };
        assert_eq!(model.predict_row(array![1.0, 1.0].view()), Label::Benign);
    }

    #[test]
    fn svm_separates_and_is_deterministic() {
        let (x, y) = degenerate(25, 5);
        let a = LinearModel::fit_svm(&x, &y, 3);
        let b = LinearModel::fit_svm(&x, &y, 3);
        assert_eq!(a, b);
        for r in 0..x.nrows() {
            assert_eq!(a.predict_row(x.row(r)).as_u8(), y[r]);
        }
    }

    #[test]
    fn svm_weights_point_along_discriminative_features() {
        // Feature 0 decides the class; features 1..3 are constant noise.
        let x = array![
            [1.0, 1.0, 0.0],
            [1.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 1.0],
        ];
        let y = vec![1, 1, 1, 0, 0, 0];
        let model = LinearModel::fit_svm(&x, &y, 11);
        assert!(model.weights[0] > model.weights[1].abs());
        assert!(model.weights[0] > model.weights[2].abs());
    }

    #[test]
    fn linear_serialization_round_trips() {
        let (x, y) = degenerate(10, 4);
        let model = LinearModel::fit_svm(&x, &y, 1);
        let mut text = String::new();
        model.write_into(&mut text);
        let back = LinearModel::read_from(&mut Lines::new(&text), true).unwrap();
        assert_eq!(model, back);
    }
}
