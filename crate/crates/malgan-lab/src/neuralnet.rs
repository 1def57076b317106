//! Minimal dense feed-forward machinery: forward, backpropagation, binary
//! cross-entropy and Adam. ReLU hidden layers, sigmoid output.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

/// Probabilities are clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]` inside
/// every log-loss; the losses are unbounded otherwise.
pub const PROB_EPSILON: f64 = 1e-7;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Fully-connected network. Weights are stored `(fan_in, fan_out)` so a
/// batch flows as `activations · W + b`.
#[derive(Debug, Clone)]
pub struct DenseNetwork {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Intermediate activations of one forward pass, consumed by
/// [`DenseNetwork::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Array2<f64>,
    /// Post-activation values per layer; the last entry is the output.
    post: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("trace has at least one layer")
    }
}

/// Parameter and input gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input: Array2<f64>,
}

impl DenseNetwork {
    fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "a network needs an input and an output layer".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }

    /// Glorot-uniform initialisation, biases zero, seeded.
    pub fn glorot(layer_sizes: &[usize], seed_value: u64) -> Result<DenseNetwork> {
        Self::check_sizes(layer_sizes)?;
        let mut rng = seed::rng(seed_value);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut m = Array2::zeros((fan_in, fan_out));
            for v in m.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
            weights.push(m);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(DenseNetwork {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Overwrites the output layer's biases with a constant. Useful to
    /// start a sigmoid output away from 0.5 — e.g. a generator that should
    /// begin nearly silent instead of emitting half its features at random.
    pub fn with_output_bias(mut self, value: f64) -> DenseNetwork {
        if let Some(last) = self.biases.last_mut() {
            last.fill(value);
        }
        self
    }

    /// All-zero parameters; forward of any input gives 0.5 everywhere.
    pub fn zeros(layer_sizes: &[usize]) -> Result<DenseNetwork> {
        Self::check_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| Array2::zeros((w[0], w[1])))
            .collect();
        let biases = layer_sizes[1..]
            .iter()
            .map(|&s| Array1::zeros(s))
            .collect();
        Ok(DenseNetwork {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a network from explicit parameters, validating shapes.
    pub fn from_params(
        layer_sizes: Vec<usize>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<DenseNetwork> {
        Self::check_sizes(&layer_sizes)?;
        if weights.len() != layer_sizes.len() - 1 || biases.len() != weights.len() {
            return Err(Error::Shape(format!(
                "expected {} weight layers, got {} weights / {} biases",
                layer_sizes.len() - 1,
                weights.len(),
                biases.len()
            )));
        }
        for (l, w) in layer_sizes.windows(2).enumerate() {
            if weights[l].dim() != (w[0], w[1]) {
                return Err(Error::Shape(format!(
                    "layer {l} weights are {:?}, expected ({}, {})",
                    weights[l].dim(),
                    w[0],
                    w[1]
                )));
            }
            if biases[l].len() != w[1] {
                return Err(Error::Shape(format!(
                    "layer {l} bias has {} entries, expected {}",
                    biases[l].len(),
                    w[1]
                )));
            }
        }
        Ok(DenseNetwork {
            layer_sizes,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    fn check_input(&self, batch: &Array2<f64>) -> Result<()> {
        if batch.ncols() != self.input_size() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network input is {}",
                batch.ncols(),
                self.input_size()
            )));
        }
        Ok(())
    }

    /// Inference-only forward pass.
    pub fn forward(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(batch)?.0)
    }

    /// Forward pass that keeps every intermediate activation for backward.
    pub fn forward_trace(&self, batch: &Array2<f64>) -> Result<(Array2<f64>, ForwardTrace)> {
        self.check_input(batch)?;
        let last = self.weights.len() - 1;
        let mut post = Vec::with_capacity(self.weights.len());
        let mut act = batch.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = act.dot(w);
            z += b;
            if l == last {
                z.mapv_inplace(sigmoid);
            } else {
                z.mapv_inplace(|v| v.max(0.0));
            }
            post.push(z.clone());
            act = z;
        }
        let trace = ForwardTrace {
            input: batch.clone(),
            post,
        };
        Ok((act, trace))
    }

    /// Backpropagates `upstream` (gradient of a scalar loss with respect to
    /// the network output) through a cached forward pass.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Array2<f64>) -> Result<Gradients> {
        if trace.post.len() != self.weights.len()
            || trace.input.ncols() != self.input_size()
            || trace
                .post
                .iter()
                .zip(&self.layer_sizes[1..])
                .any(|(a, &s)| a.ncols() != s)
        {
            return Err(Error::Usage(
                "forward trace does not belong to this network".into(),
            ));
        }
        let out = trace.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Usage(format!(
                "upstream gradient is {:?}, cached output is {:?}",
                upstream.dim(),
                out.dim()
            )));
        }

        let mut w_grads = vec![Array2::zeros((0, 0)); self.weights.len()];
        let mut b_grads = vec![Array1::zeros(0); self.weights.len()];

        // Output layer: sigmoid' = a(1-a), with a clamped to the same
        // [ε, 1−ε] band the losses clamp to. The pairing keeps the chained
        // gradient near (1−p)/n however deeply the sigmoid saturates; the
        // raw derivative underflows to exact zero around |z| ≈ 40 and a
        // saturated network could then never recover.
        let clamped = out.mapv(|a| a.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON));
        let mut delta = upstream * &(&clamped * &(1.0 - &clamped));
        for l in (0..self.weights.len()).rev() {
            let prev_act = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            w_grads[l] = prev_act.t().dot(&delta);
            b_grads[l] = delta.sum_axis(ndarray::Axis(0));
            let into_prev = delta.dot(&self.weights[l].t());
            if l == 0 {
                return Ok(Gradients {
                    weights: w_grads,
                    biases: b_grads,
                    input: into_prev,
                });
            }
            // Hidden layers are ReLU: gradient passes where activation > 0.
            delta = into_prev * &trace.post[l - 1].mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
        }
        unreachable!("loop returns at l == 0");
    }

    /// Stable hex digest of the parameters; used to assert warm starts.
    pub fn params_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.layer_sizes {
            hasher.update((*s as u64).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
            for v in b.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        let out = hasher.finalize();
        out.iter().fold(String::new(), |mut acc, byte| {
            let _ = write!(acc, "{byte:02x}");
            acc
        })
    }

    /// Serialises the network in the `malgan-net v1` text layout (see
    /// docs/FORMATS.md): header lines, then one parameter per line in layer
    /// order, weights row-major before biases.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::from("malgan-net 1\n");
        out.push_str("layers");
        for s in &self.layer_sizes {
            let _ = write!(out, " {s}");
        }
        out.push('\n');
        out.push_str("hidden relu\noutput sigmoid\n");
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter() {
                let _ = writeln!(out, "{v}");
            }
            for v in b.iter() {
                let _ = writeln!(out, "{v}");
            }
        }
        out
    }

    pub fn from_checkpoint_string(text: &str) -> Result<DenseNetwork> {
        let mut lines = text.split('\n').enumerate();
        let mut expect = |want: Option<&str>| -> Result<(usize, String)> {
            let (idx, line) = lines.next().ok_or(Error::Parse {
                line: 0,
                msg: "unexpected end of checkpoint".into(),
            })?;
            if let Some(w) = want {
                if line != w {
                    return Err(Error::Parse {
                        line: idx + 1,
                        msg: format!("expected `{w}`, got `{line}`"),
                    });
                }
            }
            Ok((idx + 1, line.to_string()))
        };
        expect(Some("malgan-net 1"))?;
        let (lno, layers_line) = expect(None)?;
        let mut parts = layers_line.split(' ');
        if parts.next() != Some("layers") {
            return Err(Error::Parse {
                line: lno,
                msg: "expected `layers ...`".into(),
            });
        }
        let layer_sizes: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>().map_err(|_| Error::Parse {
                    line: lno,
                    msg: format!("bad layer size `{p}`"),
                })
            })
            .collect::<Result<_>>()?;
        expect(Some("hidden relu"))?;
        expect(Some("output sigmoid"))?;

        Self::check_sizes(&layer_sizes)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut m = Array2::zeros((fan_in, fan_out));
            for i in 0..fan_in {
                for j in 0..fan_out {
                    let (lno, line) = expect(None)?;
                    m[(i, j)] = line.parse::<f64>().map_err(|_| Error::Parse {
                        line: lno,
                        msg: format!("bad parameter `{line}`"),
                    })?;
                }
            }
            let mut b = Array1::zeros(fan_out);
            for j in 0..fan_out {
                let (lno, line) = expect(None)?;
                b[j] = line.parse::<f64>().map_err(|_| Error::Parse {
                    line: lno,
                    msg: format!("bad parameter `{line}`"),
                })?;
            }
            weights.push(m);
            biases.push(b);
        }
        DenseNetwork::from_params(layer_sizes, weights, biases)
    }

    /// Number of lines `to_checkpoint_string` produces (header included);
    /// lets containers with embedded networks skip past them when parsing.
    pub fn checkpoint_line_count(&self) -> usize {
        let params: usize = self
            .layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        4 + params
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DenseNetwork> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_string(&text)
    }
}

/// Mean binary cross-entropy of predictions in (0,1) against 0/1 targets,
/// plus the gradient with respect to the predictions. Predictions are
/// clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]`.
pub fn bce_loss(predicted: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if predicted.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "predictions are {:?}, targets are {:?}",
            predicted.dim(),
            target.dim()
        )));
    }
    let n = predicted.len() as f64;
    if predicted.is_empty() {
        return Err(Error::Usage("empty prediction batch".into()));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(predicted.dim());
    for ((g, &p), &y) in grad.iter_mut().zip(predicted.iter()).zip(target.iter()) {
        let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        *g = (p - y) / (p * (1.0 - p)) / n;
    }
    Ok((loss / n, grad))
}

/// Adam optimiser state for one [`DenseNetwork`].
#[derive(Debug, Clone)]
pub struct AdamState {
    step_count: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m_weights: Vec<Array2<f64>>,
    v_weights: Vec<Array2<f64>>,
    m_biases: Vec<Array1<f64>>,
    v_biases: Vec<Array1<f64>>,
}

impl AdamState {
    /// Fresh state with the stock defaults (beta1 0.9, beta2 0.999,
    /// epsilon 1e-8) and zeroed moment accumulators.
    pub fn new(net: &DenseNetwork, learning_rate: f64) -> AdamState {
        AdamState {
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m_weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// One bias-corrected Adam update of every parameter in `net`.
    pub fn update(&mut self, net: &mut DenseNetwork, grads: &Gradients) -> Result<()> {
        if grads.weights.len() != net.weights.len()
            || grads
                .weights
                .iter()
                .zip(&net.weights)
                .any(|(g, w)| g.dim() != w.dim())
            || grads
                .biases
                .iter()
                .zip(&net.biases)
                .any(|(g, b)| g.len() != b.len())
        {
            return Err(Error::Shape(
                "gradient shapes do not match network parameters".into(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for l in 0..net.weights.len() {
            Self::update_slice(
                net.weights[l].iter_mut(),
                grads.weights[l].iter(),
                self.m_weights[l].iter_mut(),
                self.v_weights[l].iter_mut(),
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
                bc1,
                bc2,
            );
            Self::update_slice(
                net.biases[l].iter_mut(),
                grads.biases[l].iter(),
                self.m_biases[l].iter_mut(),
                self.v_biases[l].iter_mut(),
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
                bc1,
                bc2,
            );
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn update_slice<'a>(
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'a f64>,
        ms: impl Iterator<Item = &'a mut f64>,
        vs: impl Iterator<Item = &'a mut f64>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        bc1: f64,
        bc2: f64,
    ) {
        for (((p, &g), m), v) in params.zip(grads).zip(ms).zip(vs) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Minibatch BCE training options for [`fit_binary`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement; only
    /// meaningful when a validation set is supplied.
    pub patience: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

/// Trains `net` on rows of `x` against 0/1 column targets `y` with Adam.
/// When a validation pair is given, the weights from the best-validation
/// epoch are restored at the end.
pub fn fit_binary(
    net: &mut DenseNetwork,
    x: &Array2<f64>,
    y: &Array2<f64>,
    validation: Option<(&Array2<f64>, &Array2<f64>)>,
    cfg: &FitConfig,
) -> Result<FitSummary> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "{} rows of inputs vs {} rows of targets",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Training("empty training set".into()));
    }
    let mut adam = AdamState::new(net, cfg.learning_rate);
    let mut best = net.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut seed::rng(seed::derive2(cfg.seed, 0xf17, epoch as u64)));
        for chunk in order.chunks(cfg.batch.max(1)) {
            let xb = gather_rows(x, chunk);
            let yb = gather_rows(y, chunk);
            let (out, trace) = net.forward_trace(&xb)?;
            let (_, grad) = bce_loss(&out, &yb)?;
            let grads = net.backward(&trace, &grad)?;
            adam.update(net, &grads)?;
        }
        if let Some((vx, vy)) = validation {
            let out = net.forward(vx)?;
            let (loss, _) = bce_loss(&out, vy)?;
            if loss < best_loss {
                best_loss = loss;
                best_epoch = epoch + 1;
                best = net.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if let Some(p) = cfg.patience {
                    if since_best >= p {
                        break;
                    }
                }
            }
        }
    }
    if validation.is_some() {
        *net = best;
    }
    Ok(FitSummary {
        epochs_run,
        best_epoch,
        best_validation_loss: best_loss,
    })
}

/// Copies the selected rows into a fresh matrix.
pub fn gather_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Central finite differences of `f` over every parameter of `net`,
    /// plus the input batch. Independent of `backward`.
    fn fd_grads(
        net: &DenseNetwork,
        input: &Array2<f64>,
        loss_of: impl Fn(&DenseNetwork, &Array2<f64>) -> f64,
    ) -> Gradients {
        let h = 1e-5;
        let mut g = Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            input: Array2::zeros(input.dim()),
        };
        for l in 0..net.weights.len() {
            for idx in 0..net.weights[l].len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                *plus.weights[l].iter_mut().nth(idx).unwrap() += h;
                *minus.weights[l].iter_mut().nth(idx).unwrap() -= h;
                let d = (loss_of(&plus, input) - loss_of(&minus, input)) / (2.0 * h);
                *g.weights[l].iter_mut().nth(idx).unwrap() = d;
            }
            for idx in 0..net.biases[l].len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.biases[l][idx] += h;
                minus.biases[l][idx] -= h;
                let d = (loss_of(&plus, input) - loss_of(&minus, input)) / (2.0 * h);
                g.biases[l][idx] = d;
            }
        }
        for idx in 0..input.len() {
            let mut plus = input.clone();
            let mut minus = input.clone();
            *plus.iter_mut().nth(idx).unwrap() += h;
            *minus.iter_mut().nth(idx).unwrap() -= h;
            let d = (loss_of(net, &plus) - loss_of(net, &minus)) / (2.0 * h);
            *g.input.iter_mut().nth(idx).unwrap() = d;
        }
        g
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale < 1e-8 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    }

    fn assert_grads_close(analytic: &Gradients, numeric: &Gradients, tol: f64) {
        for (wa, wn) in analytic.weights.iter().zip(&numeric.weights) {
            for (&a, &n) in wa.iter().zip(wn.iter()) {
                assert!(rel_err(a, n) < tol, "weight grad {a} vs fd {n}");
            }
        }
        for (ba, bn) in analytic.biases.iter().zip(&numeric.biases) {
            for (&a, &n) in ba.iter().zip(bn.iter()) {
                assert!(rel_err(a, n) < tol, "bias grad {a} vs fd {n}");
            }
        }
        for (&a, &n) in analytic.input.iter().zip(numeric.input.iter()) {
            assert!(rel_err(a, n) < tol, "input grad {a} vs fd {n}");
        }
    }

    fn random_targets(rows: usize, cols: usize, seed_v: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed_v);
        Array2::from_shape_fn((rows, cols), |_| f64::from(rng.gen::<bool>()))
    }

    fn random_input(rows: usize, cols: usize, seed_v: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed_v);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_network_outputs_one_half() {
        let net = DenseNetwork::zeros(&[3, 4, 2]).unwrap();
        let out = net.forward(&random_input(5, 3, 1)).unwrap();
        for &v in out.iter() {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn sigmoid_saturates_with_large_bias() {
        let net = DenseNetwork::from_params(
            vec![1, 1],
            vec![array![[0.0]]],
            vec![array![30.0]],
        )
        .unwrap();
        let out = net.forward(&array![[0.7]]).unwrap();
        assert!(out[(0, 0)] > 1.0 - 1e-12);
    }

    #[test]
    fn forward_is_pure() {
        let net = DenseNetwork::glorot(&[4, 8, 2], 3).unwrap();
        let x = random_input(6, 4, 4);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let net = DenseNetwork::glorot(&[4, 2], 3).unwrap();
        assert!(matches!(
            net.forward(&random_input(2, 3, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let net_a = DenseNetwork::glorot(&[4, 8, 2], 3).unwrap();
        let net_b = DenseNetwork::glorot(&[4, 5, 2], 3).unwrap();
        let x = random_input(2, 4, 1);
        let (out, trace) = net_a.forward_trace(&x).unwrap();
        assert!(matches!(
            net_b.backward(&trace, &out),
            Err(Error::Usage(_))
        ));
        let bad_upstream = Array2::zeros((3, 2));
        assert!(matches!(
            net_a.backward(&trace, &bad_upstream),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        // One, two and three weight layers; ReLU hidden + sigmoid output.
        for (sizes, sd) in [
            (vec![4usize, 2], 11u64),
            (vec![4, 8, 2], 12),
            (vec![4, 6, 5, 2], 13),
        ] {
            let net = DenseNetwork::glorot(&sizes, sd).unwrap();
            let x = random_input(5, sizes[0], sd + 100);
            let y = random_targets(5, *sizes.last().unwrap(), sd + 200);
            let loss_of = |n: &DenseNetwork, inp: &Array2<f64>| {
                let out = n.forward(inp).unwrap();
                bce_loss(&out, &y).unwrap().0
            };
            let (out, trace) = net.forward_trace(&x).unwrap();
            let (_, up) = bce_loss(&out, &y).unwrap();
            let analytic = net.backward(&trace, &up).unwrap();
            let numeric = fd_grads(&net, &x, loss_of);
            assert_grads_close(&analytic, &numeric, 1e-4);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = DenseNetwork::glorot(&[4, 8, 2], 5).unwrap();
        let x = random_input(3, 4, 6);
        let (out, trace) = net.forward_trace(&x).unwrap();
        let grads = net.backward(&trace, &Array2::zeros(out.dim())).unwrap();
        assert!(grads.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(grads.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(grads.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_input_gradient_closed_form() {
        let (w, b, x) = (0.8, -0.3, 0.4);
        let net =
            DenseNetwork::from_params(vec![1, 1], vec![array![[w]]], vec![array![b]]).unwrap();
        let (out, trace) = net.forward_trace(&array![[x]]).unwrap();
        let grads = net.backward(&trace, &array![[1.0]]).unwrap();
        let s = out[(0, 0)];
        assert_abs_diff_eq!(grads.input[(0, 0)], s * (1.0 - s) * w, epsilon = 1e-12);
    }

    #[test]
    fn bce_examples() {
        let (l, _) = bce_loss(&array![[0.5]], &array![[1.0]]).unwrap();
        assert_abs_diff_eq!(l, 0.693147, epsilon = 1e-6);
        let (l, _) = bce_loss(&array![[0.5], [0.5]], &array![[0.0], [1.0]]).unwrap();
        assert_abs_diff_eq!(l, 0.693147, epsilon = 1e-6);
        let (l, _) = bce_loss(&array![[1.0 - PROB_EPSILON]], &array![[1.0]]).unwrap();
        assert!(l < 2.0 * PROB_EPSILON, "near-zero loss, got {l}");
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut net = DenseNetwork::zeros(&[1, 1]).unwrap();
        let mut adam = AdamState::new(&net, 0.001);
        let grads = Gradients {
            weights: vec![array![[0.37]]],
            biases: vec![array![-2.1]],
            input: Array2::zeros((0, 1)),
        };
        adam.update(&mut net, &grads).unwrap();
        assert_eq!(adam.step_count(), 1);
        let dw = net.weights[0][(0, 0)];
        let db = net.biases[0][0];
        assert!(dw < 0.0 && (dw.abs() - 0.001).abs() < 1e-7, "dw = {dw}");
        assert!(db > 0.0 && (db.abs() - 0.001).abs() < 1e-7, "db = {db}");
    }

    #[test]
    fn adam_zero_gradients_leave_parameters_unchanged() {
        let mut net = DenseNetwork::glorot(&[2, 3, 1], 8).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, 0.01);
        let grads = Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            input: Array2::zeros((0, 2)),
        };
        for _ in 0..5 {
            adam.update(&mut net, &grads).unwrap();
        }
        assert_eq!(net.weights, before.weights);
        assert_eq!(net.biases, before.biases);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut net = DenseNetwork::glorot(&[2, 16, 1], 42).unwrap();
            let x = random_input(64, 2, 1);
            let y = random_targets(64, 1, 2);
            fit_binary(
                &mut net,
                &x,
                &y,
                None,
                &FitConfig {
                    epochs: 3,
                    batch: 16,
                    learning_rate: 0.001,
                    seed: 9,
                    patience: None,
                },
            )
            .unwrap();
            net.params_digest()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        // y = 1 iff x0 + x1 > 0; 2-16-1 net, 200 full-batch steps.
        let mut rng = seed::rng(77);
        let x = Array2::from_shape_fn((128, 2), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((128, 1), |(r, _)| {
            f64::from(x[(r, 0)] + x[(r, 1)] > 0.0)
        });
        let mut net = DenseNetwork::glorot(&[2, 16, 1], 5).unwrap();
        let mut adam = AdamState::new(&net, 0.01);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (out, trace) = net.forward_trace(&x).unwrap();
            let (loss, grad) = bce_loss(&out, &y).unwrap();
            losses.push(loss);
            let grads = net.backward(&trace, &grad).unwrap();
            adam.update(&mut net, &grads).unwrap();
        }
        let window = 25;
        let smoothed: Vec<f64> = losses
            .chunks(window)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for pair in smoothed.windows(2) {
            assert!(
                pair[1] < pair[0],
                "smoothed loss must strictly decrease: {smoothed:?}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = DenseNetwork::glorot(&[3, 5, 2], 21).unwrap();
        let text = net.to_checkpoint_string();
        let back = DenseNetwork::from_checkpoint_string(&text).unwrap();
        assert_eq!(net.params_digest(), back.params_digest());
        assert_eq!(net.weights, back.weights);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        net.save(&p).unwrap();
        assert_eq!(DenseNetwork::load(&p).unwrap().params_digest(), net.params_digest());
    }
}
