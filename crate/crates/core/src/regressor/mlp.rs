//! Multilayer perceptron for Q-functions with a separate budget encoder.
//!
//! ```text
//!   β_a ──► [encoder, ReLU] ──┐
//!                             ├─► concat ─► [hidden, ReLU] ─► linear ─► (Q_r per action, Q_c per action)
//!   s ────────────────────────┘
//! ```

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::adam::Adam;
use super::{Normalizer, RegressorSpec, Samples};
use crate::error::{domain, Error, Result};
use crate::mdp::VectorSignal;
use crate::qfunc::BiQFunction;
use crate::rng::Rng;

/// Rows evaluated per forward call when predicting on large inputs.
pub const PREDICT_CHUNK: usize = 8192;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Glorot/Xavier uniform weights, zero bias.
    fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            w: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..a)),
            b: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient of the loss with respect to each layer, in `layers()` order.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }
}

struct Cache {
    /// Post-activation outputs of the encoder layers, starting with the raw
    /// budget column.
    enc: Vec<Array2<f64>>,
    /// Inputs to each trunk layer (post-activation of the previous one).
    trunk: Vec<Array2<f64>>,
    out: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    state_dim: usize,
    n_actions: usize,
    channels: usize,
    use_budget: bool,
    /// The budget enters the encoder as `(β - lo) / (hi - lo) * 2 - 1`.
    budget_range: [f64; 2],
    encoder: Vec<Dense>,
    /// Hidden layers followed by the linear output layer.
    trunk: Vec<Dense>,
    normalizer: Option<Normalizer>,
}

impl QNetwork {
    /// Two-channel network `(s, β_a) -> (Q_r, Q_c)` per action.
    pub fn new(
        state_dim: usize,
        n_actions: usize,
        spec: &RegressorSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(state_dim, n_actions, 2, true, spec, rng)
    }

    /// General constructor. `channels = 1, use_budget = false` gives a plain
    /// scalar Q-network.
    pub fn build(
        state_dim: usize,
        n_actions: usize,
        channels: usize,
        use_budget: bool,
        spec: &RegressorSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if n_actions == 0 || channels == 0 {
            return domain("network needs at least one action and one channel");
        }
        let mut encoder = Vec::new();
        let mut enc_width = if use_budget { 1 } else { 0 };
        if use_budget {
            for &w in &spec.budget_encoder_layers {
                let mut layer = Dense::xavier(enc_width, w, rng);
                // Start every unit active on the whole scaled input range
                // [-1, 1]; with zero bias half of them would never fire.
                for (j, b) in layer.b.iter_mut().enumerate() {
                    *b = layer.w.column(j).iter().map(|x| x.abs()).sum::<f64>();
                }
                encoder.push(layer);
                enc_width = w;
            }
        }
        let [lo, hi] = spec.budget_range;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return domain("budget range must be a non-empty interval");
        }
        let mut trunk = Vec::new();
        let mut width = state_dim + enc_width;
        if width == 0 {
            return domain("network has no inputs");
        }
        for &w in &spec.hidden_layers {
            trunk.push(Dense::xavier(width, w, rng));
            width = w;
        }
        trunk.push(Dense::xavier(width, channels * n_actions, rng));
        Ok(Self {
            state_dim,
            n_actions,
            channels,
            use_budget,
            budget_range: spec.budget_range,
            encoder,
            trunk,
            normalizer: None,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        state_dim: usize,
        n_actions: usize,
        channels: usize,
        use_budget: bool,
        budget_range: [f64; 2],
        encoder: Vec<Dense>,
        trunk: Vec<Dense>,
        normalizer: Option<Normalizer>,
    ) -> Self {
        Self {
            state_dim,
            n_actions,
            channels,
            use_budget,
            budget_range,
            encoder,
            trunk,
            normalizer,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn uses_budget(&self) -> bool {
        self.use_budget
    }
    pub fn budget_range(&self) -> [f64; 2] {
        self.budget_range
    }
    pub fn output_dim(&self) -> usize {
        self.channels * self.n_actions
    }
    pub fn normalizer(&self) -> Option<&Normalizer> {
        self.normalizer.as_ref()
    }
    pub fn encoder(&self) -> &[Dense] {
        &self.encoder
    }
    pub fn trunk(&self) -> &[Dense] {
        &self.trunk
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(self.trunk.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain(self.trunk.iter_mut())
    }

    pub fn n_parameters(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All weights and biases, layer by layer, each matrix row-major.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_parameters(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_parameters() {
            return domain("parameter vector has the wrong length");
        }
        let mut it = theta.iter();
        for l in self.layers_mut() {
            l.w.iter_mut()
                .chain(l.b.iter_mut())
                .for_each(|p| *p = *it.next().unwrap());
        }
        Ok(())
    }

    /// Sets the output layer to zero, so every prediction is the normalizer
    /// offset (zero when there is none).
    pub fn zero_output_layer(&mut self) {
        let out = self.trunk.last_mut().unwrap();
        out.w.fill(0.0);
        out.b.fill(0.0);
    }

    fn check_inputs(&self, states: &ArrayView2<f64>, budgets: &ArrayView1<f64>) -> Result<()> {
        if states.ncols() != self.state_dim {
            return domain(format!(
                "state dimension {} does not match network input {}",
                states.ncols(),
                self.state_dim
            ));
        }
        if self.use_budget && budgets.len() != states.nrows() {
            return domain("one budget per state row is required");
        }
        if budgets.iter().any(|b| !b.is_finite()) {
            return domain("budgets must be finite");
        }
        Ok(())
    }

    fn forward_cached(&self, states: &ArrayView2<f64>, budgets: &ArrayView1<f64>) -> Cache {
        let mut enc = Vec::with_capacity(self.encoder.len() + 1);
        let input = if self.use_budget {
            let [lo, hi] = self.budget_range;
            let mut e = budgets
                .mapv(|b| 2.0 * (b - lo) / (hi - lo) - 1.0)
                .insert_axis(Axis(1));
            enc.push(e.clone());
            for layer in &self.encoder {
                e = layer.apply(&e.view());
                relu_inplace(&mut e);
                enc.push(e.clone());
            }
            concatenate(Axis(1), &[states.view(), e.view()]).unwrap()
        } else {
            states.to_owned()
        };
        let mut trunk = Vec::with_capacity(self.trunk.len());
        let mut h = input;
        let last = self.trunk.len() - 1;
        for (i, layer) in self.trunk.iter().enumerate() {
            let mut next = layer.apply(&h.view());
            if i < last {
                relu_inplace(&mut next);
            }
            trunk.push(h);
            h = next;
        }
        Cache { enc, trunk, out: h }
    }

    /// Raw (normalised-space) outputs, one row per input.
    pub fn forward_raw(
        &self,
        states: ArrayView2<f64>,
        budgets: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_inputs(&states, &budgets)?;
        Ok(self.forward_cached(&states, &budgets).out)
    }

    /// Predictions in target units: column `c * n_actions + a` is channel `c`
    /// of action `a`. Large inputs are processed in chunks.
    pub fn predict(
        &self,
        states: ArrayView2<f64>,
        budgets: ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_inputs(&states, &budgets)?;
        let n = states.nrows();
        let mut out = Array2::zeros((n, self.output_dim()));
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let b = if self.use_budget {
                budgets.slice(s![start..end])
            } else {
                budgets.slice(s![0..0])
            };
            let chunk = self
                .forward_cached(&states.slice(s![start..end, ..]), &b)
                .out;
            out.slice_mut(s![start..end, ..]).assign(&chunk);
            start = end;
        }
        if let Some(norm) = &self.normalizer {
            for c in 0..self.channels {
                let mut block = out.slice_mut(s![.., c * self.n_actions..(c + 1) * self.n_actions]);
                block.mapv_inplace(|z| norm.decode(c, z));
            }
        }
        Ok(out)
    }

    /// Mean squared error on the selected heads plus `weight_decay * Σ‖W‖²`,
    /// and its gradient. Targets must already be in normalised units.
    pub fn loss_and_gradient(
        &self,
        states: ArrayView2<f64>,
        budgets: ArrayView1<f64>,
        actions: &[usize],
        targets: ArrayView2<f64>,
        weight_decay: f64,
    ) -> (f64, Gradients) {
        let cache = self.forward_cached(&states, &budgets);
        let n = states.nrows();
        let scale = 1.0 / (n * self.channels) as f64;
        let mut d_out = Array2::zeros(cache.out.raw_dim());
        let mut loss = 0.0;
        for (i, &a) in actions.iter().enumerate() {
            for c in 0..self.channels {
                let j = c * self.n_actions + a;
                let diff = cache.out[[i, j]] - targets[[i, c]];
                loss += diff * diff;
                d_out[[i, j]] = 2.0 * diff * scale;
            }
        }
        loss *= scale;
        loss += weight_decay
            * self
                .layers()
                .map(|l| l.w.iter().map(|w| w * w).sum::<f64>())
                .sum::<f64>();

        let mut trunk_grads = Vec::with_capacity(self.trunk.len());
        let mut delta = d_out;
        for (i, layer) in self.trunk.iter().enumerate().rev() {
            let input = &cache.trunk[i];
            let gw = input.t().dot(&delta) + &(2.0 * weight_decay * &layer.w);
            let gb = delta.sum_axis(Axis(0));
            trunk_grads.push((gw, gb));
            let mut back = delta.dot(&layer.w.t());
            if i > 0 {
                // Input of layer i is the ReLU output of layer i - 1.
                ndarray::Zip::from(&mut back).and(input).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = back;
        }
        trunk_grads.reverse();

        let mut enc_grads = Vec::with_capacity(self.encoder.len());
        if self.use_budget && !self.encoder.is_empty() {
            let mut delta = delta.slice(s![.., self.state_dim..]).to_owned();
            for (i, layer) in self.encoder.iter().enumerate().rev() {
                let post = &cache.enc[i + 1];
                ndarray::Zip::from(&mut delta).and(post).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                let input = &cache.enc[i];
                let gw = input.t().dot(&delta) + &(2.0 * weight_decay * &layer.w);
                let gb = delta.sum_axis(Axis(0));
                enc_grads.push((gw, gb));
                delta = delta.dot(&layer.w.t());
            }
            enc_grads.reverse();
        }
        enc_grads.extend(trunk_grads);
        (loss, Gradients { layers: enc_grads })
    }

    /// Rescales the output layer so that predictions are unchanged when the
    /// target normalisation switches from the current one to `next`.
    fn renormalize(&mut self, next: Normalizer) {
        if let Some(prev) = self.normalizer.take() {
            let na = self.n_actions;
            let out = self.trunk.last_mut().unwrap();
            for c in 0..self.channels {
                let ratio = prev.std[c] / next.std[c];
                let shift = (prev.mean[c] - next.mean[c]) / next.std[c];
                for j in c * na..(c + 1) * na {
                    out.w.column_mut(j).mapv_inplace(|w| w * ratio);
                    out.b[j] = out.b[j] * ratio + shift;
                }
            }
        }
        self.normalizer = Some(next);
    }

    /// Fits the selected-action heads to the sample targets with Adam.
    /// Returns the loss recorded at each epoch.
    pub fn fit(&mut self, data: &Samples, spec: &RegressorSpec, rng: &mut Rng) -> Result<Vec<f64>> {
        spec.validate()?;
        data.validate(self.n_actions, self.channels)?;
        let n = data.len();
        self.check_inputs(&data.states.view(), &data.budgets.view())?;

        let targets = if spec.normalize {
            let norm = Normalizer::from_targets(&data.targets.view());
            self.renormalize(norm.clone());
            norm.encode_all(&data.targets.view())
        } else {
            if self.normalizer.is_some() {
                self.renormalize(Normalizer::identity(self.channels));
            }
            self.normalizer = None;
            data.targets.clone()
        };

        let shapes: Vec<(usize, usize)> = self.layers().map(|l| l.w.dim()).collect();
        let mut adam = Adam::new(spec.adam, spec.learning_rate, &shapes);
        let batch = spec.batch_size.unwrap_or(n).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut trace = Vec::with_capacity(spec.epochs);
        let mut initial = f64::NAN;

        for epoch in 0..spec.epochs {
            if batch < n {
                order.shuffle(rng);
            }
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch) {
                let (loss, grads) = if batch == n {
                    self.loss_and_gradient(
                        data.states.view(),
                        data.budgets.view(),
                        &data.actions,
                        targets.view(),
                        spec.weight_decay,
                    )
                } else {
                    let st = data.states.select(Axis(0), chunk);
                    let bu = if self.use_budget {
                        data.budgets.select(Axis(0), chunk)
                    } else {
                        Array1::zeros(0)
                    };
                    let ac: Vec<usize> = chunk.iter().map(|&i| data.actions[i]).collect();
                    let ta = targets.select(Axis(0), chunk);
                    self.loss_and_gradient(st.view(), bu.view(), &ac, ta.view(), spec.weight_decay)
                };
                epoch_loss += loss * chunk.len() as f64 / n as f64;
                adam.step(
                    self.encoder
                        .iter_mut()
                        .chain(self.trunk.iter_mut())
                        .zip(grads.layers.iter())
                        .map(|(l, (gw, gb))| (&mut l.w, &mut l.b, gw, gb)),
                );
            }
            if epoch == 0 {
                initial = epoch_loss;
            }
            trace.push(epoch_loss);
            let blown = !epoch_loss.is_finite()
                || epoch_loss > spec.divergence_factor * initial.max(f64::MIN_POSITIVE);
            if blown {
                return Err(Error::Divergence {
                    epoch,
                    loss: epoch_loss,
                    initial,
                    trace,
                });
            }
        }
        Ok(trace)
    }
}

impl BiQFunction for QNetwork {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn evaluate(&self, state: &[f64], allocation: f64) -> Vec<VectorSignal> {
        self.evaluate_batch(&[state], &[allocation])
    }

    fn evaluate_batch(&self, states: &[&[f64]], allocations: &[f64]) -> Vec<VectorSignal> {
        assert_eq!(self.channels, 2, "a two-channel network is required");
        let n = states.len();
        let mut x = Array2::zeros((n, self.state_dim));
        for (i, s) in states.iter().enumerate() {
            x.row_mut(i).assign(&ArrayView1::from(*s));
        }
        let b = ArrayView1::from(allocations);
        let out = self
            .predict(x.view(), b)
            .expect("inputs checked by the caller");
        let na = self.n_actions;
        let mut values = Vec::with_capacity(n * na);
        for row in out.rows() {
            for a in 0..na {
                values.push(VectorSignal::new(row[a], row[na + a]));
            }
        }
        values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn spec() -> RegressorSpec {
        RegressorSpec {
            hidden_layers: vec![16, 8],
            budget_encoder_layers: vec![3],
            epochs: 10,
            ..RegressorSpec::default()
        }
    }

    fn random_samples(n: usize, d: usize, na: usize, ch: usize, rng: &mut Rng) -> Samples {
        Samples {
            states: Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0)),
            budgets: Array1::from_shape_simple_fn(n, || rng.random::<f64>()),
            actions: (0..n).map(|_| rng.random_range(0..na)).collect(),
            targets: Array2::from_shape_simple_fn((n, ch), || rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn output_has_two_heads_per_action() {
        let mut rng = seeded(0);
        for (hidden, enc) in [
            (vec![], vec![]),
            (vec![4], vec![2, 2]),
            (vec![5, 5, 5], vec![1]),
        ] {
            let s = RegressorSpec {
                hidden_layers: hidden,
                budget_encoder_layers: enc,
                ..spec()
            };
            let net = QNetwork::new(3, 4, &s, &mut rng).unwrap();
            let out = net
                .forward_raw(Array2::zeros((2, 3)).view(), Array1::zeros(2).view())
                .unwrap();
            assert_eq!(out.ncols(), 8);
        }
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let mut rng = seeded(1);
        let mut net = QNetwork::new(2, 3, &spec(), &mut rng).unwrap();
        net.zero_output_layer();
        let v = net.evaluate(&[0.3, -2.0], 0.7);
        assert!(v.iter().all(|x| *x == VectorSignal::ZERO));
    }

    #[test]
    fn batched_forward_matches_single_rows() {
        let mut rng = seeded(2);
        let net = QNetwork::new(4, 2, &spec(), &mut rng).unwrap();
        let data = random_samples(30, 4, 2, 2, &mut rng);
        let all = net
            .predict(data.states.view(), data.budgets.view())
            .unwrap();
        for i in 0..30 {
            let one = net
                .predict(
                    data.states.slice(s![i..i + 1, ..]),
                    data.budgets.slice(s![i..i + 1]),
                )
                .unwrap();
            for j in 0..4 {
                assert!((one[[0, j]] - all[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_a_domain_error() {
        let mut rng = seeded(3);
        let net = QNetwork::new(4, 2, &spec(), &mut rng).unwrap();
        assert!(matches!(
            net.predict(Array2::zeros((1, 3)).view(), Array1::zeros(1).view()),
            Err(Error::Domain(_))
        ));
    }

    fn finite_difference_check(net: &mut QNetwork, data: &Samples, wd: f64) {
        let (_, grads) = net.loss_and_gradient(
            data.states.view(),
            data.budgets.view(),
            &data.actions,
            data.targets.view(),
            wd,
        );
        let analytic = grads.flatten();
        let theta = net.parameters();
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut t = theta.clone();
            t[k] += h;
            net.set_parameters(&t).unwrap();
            let (lp, _) = net.loss_and_gradient(
                data.states.view(),
                data.budgets.view(),
                &data.actions,
                data.targets.view(),
                wd,
            );
            t[k] -= 2.0 * h;
            net.set_parameters(&t).unwrap();
            let (lm, _) = net.loss_and_gradient(
                data.states.view(),
                data.budgets.view(),
                &data.actions,
                data.targets.view(),
                wd,
            );
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-7);
            assert!(
                (analytic[k] - numeric).abs() / denom < 1e-4,
                "parameter {k}: analytic {} numeric {}",
                analytic[k],
                numeric
            );
        }
        net.set_parameters(&theta).unwrap();
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(4);
        let mut net = QNetwork::new(3, 2, &spec(), &mut rng).unwrap();
        let data = random_samples(10, 3, 2, 2, &mut rng);
        finite_difference_check(&mut net, &data, 0.0);
        finite_difference_check(&mut net, &data, 1e-3);
        let mut scalar = QNetwork::build(3, 2, 1, false, &spec(), &mut rng).unwrap();
        let data = random_samples(10, 3, 2, 1, &mut rng);
        finite_difference_check(&mut scalar, &data, 1e-3);
    }

    #[test]
    fn fits_a_constant() {
        let mut rng = seeded(5);
        let s = RegressorSpec {
            epochs: 400,
            learning_rate: 0.01,
            ..spec()
        };
        let mut net = QNetwork::new(2, 2, &s, &mut rng).unwrap();
        let mut data = random_samples(50, 2, 2, 2, &mut rng);
        data.targets.column_mut(0).fill(0.7);
        data.targets.column_mut(1).fill(-0.2);
        net.fit(&data, &s, &mut rng).unwrap();
        let p = net
            .predict(data.states.view(), data.budgets.view())
            .unwrap();
        for (i, &a) in data.actions.iter().enumerate() {
            assert!((p[[i, a]] - 0.7).abs() < 1e-3);
            assert!((p[[i, 2 + a]] + 0.2).abs() < 1e-3);
        }
    }

    #[test]
    fn fits_a_linear_target() {
        let mut rng = seeded(6);
        let s = RegressorSpec {
            hidden_layers: vec![32],
            epochs: 2000,
            learning_rate: 0.01,
            normalize: false,
            weight_decay: 0.0,
            ..spec()
        };
        let mut net = QNetwork::new(2, 1, &s, &mut rng).unwrap();
        let mut data = random_samples(200, 2, 1, 2, &mut rng);
        for i in 0..200 {
            let (x, y, b) = (data.states[[i, 0]], data.states[[i, 1]], data.budgets[i]);
            data.targets[[i, 0]] = 0.5 * x - 0.3 * y + 0.2 * b + 0.1;
            data.targets[[i, 1]] = -0.2 * x + 0.4 * b;
        }
        let trace = net.fit(&data, &s, &mut rng).unwrap();
        let p = net
            .predict(data.states.view(), data.budgets.view())
            .unwrap();
        let mse = (0..200)
            .map(|i| {
                (p[[i, 0]] - data.targets[[i, 0]]).powi(2)
                    + (p[[i, 1]] - data.targets[[i, 1]]).powi(2)
            })
            .sum::<f64>()
            / 400.0;
        assert!(mse < 1e-3, "training mse {mse}");
        let windows: Vec<f64> = trace
            .chunks(50)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        // Non-increasing over 50-epoch windows, up to optimizer noise at 1e-3
        // of the starting loss.
        let noise = 1e-3 * windows[0];
        assert!(
            windows.windows(2).all(|w| w[1] <= w[0] + noise),
            "{windows:?}"
        );
    }

    #[test]
    fn minibatch_fit_also_converges() {
        let mut rng = seeded(7);
        let s = RegressorSpec {
            epochs: 200,
            batch_size: Some(16),
            learning_rate: 0.01,
            ..spec()
        };
        let mut net = QNetwork::new(2, 2, &s, &mut rng).unwrap();
        let mut data = random_samples(64, 2, 2, 2, &mut rng);
        data.targets.fill(0.5);
        let trace = net.fit(&data, &s, &mut rng).unwrap();
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn warm_start_renormalisation_preserves_predictions() {
        let mut rng = seeded(8);
        let s = spec();
        let mut net = QNetwork::new(2, 2, &s, &mut rng).unwrap();
        let data = random_samples(40, 2, 2, 2, &mut rng);
        net.fit(&data, &s, &mut rng).unwrap();
        let before = net
            .predict(data.states.view(), data.budgets.view())
            .unwrap();
        let mut shifted = data.targets.clone();
        shifted.mapv_inplace(|t| 3.0 * t + 5.0);
        net.renormalize(Normalizer::from_targets(&shifted.view()));
        let after = net
            .predict(data.states.view(), data.budgets.view())
            .unwrap();
        assert!((&before - &after).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let run = || {
            let mut rng = seeded(9);
            let s = RegressorSpec {
                batch_size: Some(7),
                ..spec()
            };
            let mut net = QNetwork::new(2, 2, &s, &mut rng).unwrap();
            let data = random_samples(20, 2, 2, 2, &mut rng);
            net.fit(&data, &s, &mut rng).unwrap();
            net.parameters()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn divergence_is_reported_with_its_trace() {
        let mut rng = seeded(10);
        let s = RegressorSpec {
            learning_rate: 1e3,
            epochs: 200,
            normalize: false,
            divergence_factor: 10.0,
            ..spec()
        };
        let mut net = QNetwork::new(2, 2, &s, &mut rng).unwrap();
        let mut data = random_samples(20, 2, 2, 2, &mut rng);
        data.targets.mapv_inplace(|t| t * 100.0);
        match net.fit(&data, &s, &mut rng) {
            Err(Error::Divergence { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
