//! The MLP detector: one 64-unit hidden layer, Adam, early stopping on a
//! held-out tenth of its training rows.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::dataset::Label;
use crate::error::Result;
use crate::neuralnet::{fit_binary, gather_rows, DenseNetwork, FitConfig};
use crate::seed;

use super::Lines;

const HIDDEN: usize = 64;

#[derive(Debug, Clone)]
pub(crate) struct MlpModel {
    pub(crate) net: DenseNetwork,
}

impl MlpModel {
    /// Trains an M-64-1 network with Adam (lr 0.001, minibatch 64, at most
    /// 100 epochs). A stratified 10% slice is held out; training stops
    /// after 5 epochs without validation improvement and the best-epoch
    /// weights are kept.
    pub(crate) fn fit(x: &Array2<f64>, y: &[u8], seed_value: u64) -> Result<MlpModel> {
        let targets = Array2::from_shape_fn((y.len(), 1), |(r, _)| f64::from(y[r]));
        let (fit_rows, val_rows) = carve_validation(y, seed_value);
        let mut net = DenseNetwork::glorot(
            &[x.ncols(), HIDDEN, 1],
            seed::derive(seed_value, 0x31f),
        )?;
        let cfg = FitConfig {
            epochs: 100,
            batch: 64,
            learning_rate: 0.001,
            seed: seed::derive(seed_value, 0x31f + 1),
            patience: Some(5),
        };
        if val_rows.is_empty() {
            fit_binary(&mut net, x, &targets, None, &cfg)?;
        } else {
            let fx = gather_rows(x, &fit_rows);
            let fy = gather_rows(&targets, &fit_rows);
            let vx = gather_rows(x, &val_rows);
            let vy = gather_rows(&targets, &val_rows);
            fit_binary(&mut net, &fx, &fy, Some((&vx, &vy)), &cfg)?;
        }
        Ok(MlpModel { net })
    }

    pub(crate) fn predict_batch(&self, x: &Array2<f64>) -> Result<Vec<Label>> {
        let out = self.net.forward(x)?;
        Ok(out
            .column(0)
            .iter()
            .map(|&p| if p > 0.5 { Label::Malware } else { Label::Benign })
            .collect())
    }

    pub(crate) fn write_into(&self, out: &mut String) {
        out.push_str(&self.net.to_checkpoint_string());
    }

    pub(crate) fn read_from(lines: &mut Lines<'_>) -> Result<MlpModel> {
        let net = DenseNetwork::from_checkpoint_string(&lines.rest())?;
        lines.consume_net_lines(&net);
        Ok(MlpModel { net })
    }
}

/// Splits row indices into (fit, validation) with a tenth per class going
/// to validation, rounded half up, seeded.
fn carve_validation(y: &[u8], seed_value: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seed::rng(seed::derive(seed_value, 0x3a11));
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1u8] {
        let mut rows: Vec<usize> = (0..y.len()).filter(|&r| y[r] == class).collect();
        rows.shuffle(&mut rng);
        let take = ((rows.len() as f64 * 0.1) + 0.5).floor() as usize;
        let take = take.min(rows.len().saturating_sub(1));
        val.extend(rows.drain(..take));
        fit.extend(rows);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn learns_a_noisy_linear_rule() {
        let mut rng = seed::rng(12);
        let x = Array2::from_shape_fn((400, 10), |_| f64::from(rng.gen::<bool>()));
        let y: Vec<u8> = (0..400)
            .map(|r| u8::from(x[(r, 0)] + x[(r, 1)] + x[(r, 2)] >= 2.0))
            .collect();
        let model = MlpModel::fit(&x, &y, 4).unwrap();
        let predicted = model.predict_batch(&x).unwrap();
        let correct = predicted
            .iter()
            .zip(&y)
            .filter(|(p, &t)| p.as_u8() == t)
            .count();
        assert!(correct as f64 / 400.0 > 0.95, "accuracy {correct}/400");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = seed::rng(13);
        let x = Array2::from_shape_fn((120, 6), |_| f64::from(rng.gen::<bool>()));
        let y: Vec<u8> = (0..120).map(|r| u8::from(x[(r, 0)] > 0.5)).collect();
        let a = MlpModel::fit(&x, &y, 7).unwrap();
        let b = MlpModel::fit(&x, &y, 7).unwrap();
        assert_eq!(a.net.params_digest(), b.net.params_digest());
    }

    #[test]
    fn validation_carve_is_stratified() {
        let y: Vec<u8> = (0..100).map(|r| u8::from(r < 30)).collect();
        let (fit, val) = carve_validation(&y, 5);
        assert_eq!(fit.len() + val.len(), 100);
        let val_malware = val.iter().filter(|&&r| y[r] == 1).count();
        assert_eq!(val_malware, 3);
        assert_eq!(val.len(), 10);
    }
}
