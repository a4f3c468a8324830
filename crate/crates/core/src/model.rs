//! Reference classifier: a fully connected network with `tanh` hidden units,
//! softmax cross-entropy loss, hand-written backpropagation, and SGD with
//! momentum and weight decay.
//!
//! Parameters live in one flat vector so that aggregation, momentum and
//! proximal terms are plain vector arithmetic. For every layer the weight
//! matrix (`fan_in x fan_out`, row-major) is stored first, followed by its
//! bias vector; layers follow each other in order.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Number of scalars needed by a stack of dense layers.
pub fn param_count(layer_shapes: &[(usize, usize)]) -> usize {
    layer_shapes.iter().map(|&(i, o)| i * o + o).sum()
}

/// Flat parameter vector plus the layer shapes that give it meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layer_shapes: Vec<(usize, usize)>,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(layer_shapes: Vec<(usize, usize)>, values: Vec<f64>) -> Result<Self> {
        check_shapes(&layer_shapes)?;
        let expected = param_count(&layer_shapes);
        if values.len() != expected {
            return Err(Error::config(format!(
                "parameter vector has {} entries, layer shapes require {expected}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("parameter {i} is not finite")));
        }
        Ok(Self { layer_shapes, values })
    }

    pub fn zeros(layer_shapes: Vec<(usize, usize)>) -> Result<Self> {
        check_shapes(&layer_shapes)?;
        let n = param_count(&layer_shapes);
        Ok(Self {
            layer_shapes,
            values: vec![0.0; n],
        })
    }

    /// Uniform Glorot initialisation of every weight, zero biases.
    pub fn glorot<R: Rng + ?Sized>(layer_shapes: Vec<(usize, usize)>, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(layer_shapes)?;
        for l in 0..params.layer_shapes.len() {
            let (fan_in, fan_out) = params.layer_shapes[l];
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = params.layer_ranges(l);
            for v in &mut params.values[w] {
                *v = rng.random_range(-limit..=limit);
            }
        }
        Ok(params)
    }

    /// Shapes of an MLP `input -> hidden[0] -> ... -> classes`.
    pub fn mlp_shapes(input: usize, hidden: &[usize], classes: usize) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.layer_shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_shapes[0].0
    }

    pub fn num_classes(&self) -> usize {
        self.layer_shapes[self.layer_shapes.len() - 1].1
    }

    /// Same shapes, new values. The caller guarantees the length.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            layer_shapes: self.layer_shapes.clone(),
            values,
        }
    }

    pub(crate) fn same_shape(&self, other: &ModelParams) -> bool {
        self.layer_shapes == other.layer_shapes
    }

    fn layer_ranges(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let offset: usize = param_count(&self.layer_shapes[..layer]);
        let (fan_in, fan_out) = self.layer_shapes[layer];
        let w_end = offset + fan_in * fan_out;
        (offset..w_end, w_end..w_end + fan_out)
    }

    fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fan_in, fan_out) = self.layer_shapes[layer];
        let (w, b) = self.layer_ranges(layer);
        let weights = ArrayView2::from_shape((fan_in, fan_out), &self.values[w])
            .expect("layer slice matches its shape");
        (weights, ArrayView1::from(&self.values[b]))
    }
}

fn check_shapes(layer_shapes: &[(usize, usize)]) -> Result<()> {
    if layer_shapes.is_empty() {
        return Err(Error::config("model needs at least one layer"));
    }
    if layer_shapes.iter().any(|&(i, o)| i == 0 || o == 0) {
        return Err(Error::config("layer widths must be positive"));
    }
    for pair in layer_shapes.windows(2) {
        if pair[0].1 != pair[1].0 {
            return Err(Error::config(format!(
                "layer output width {} does not feed next layer input width {}",
                pair[0].1, pair[1].0
            )));
        }
    }
    Ok(())
}

/// A mini-batch of feature rows with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::input(format!(
                "batch has {} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::input("batch must contain at least one sample"));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<'a> {
    input: ArrayView2<'a, f64>,
    hidden: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl ForwardPass<'_> {
    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.logits.view()
    }
}

pub fn forward_pass<'a>(params: &ModelParams, features: ArrayView2<'a, f64>) -> Result<ForwardPass<'a>> {
    if features.ncols() != params.input_dim() {
        return Err(Error::config(format!(
            "features have dimension {}, model expects {}",
            features.ncols(),
            params.input_dim()
        )));
    }
    let depth = params.layer_shapes.len();
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(depth - 1);
    let mut logits = Array2::zeros((0, 0));
    for l in 0..depth {
        let (w, b) = params.layer(l);
        let mut z = if l == 0 {
            features.dot(&w)
        } else {
            hidden[l - 1].dot(&w)
        };
        z += &b;
        if l + 1 < depth {
            z.mapv_inplace(f64::tanh);
            hidden.push(z);
        } else {
            logits = z;
        }
    }
    Ok(ForwardPass {
        input: features,
        hidden,
        logits,
    })
}

/// Logits for a batch, one row per sample.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<Array2<f64>> {
    Ok(forward_pass(params, batch.features())?.logits)
}

/// Row-wise `log(sum(exp(row)))`, stable for large entries.
pub(crate) fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let (argmax, max) = row_argmax(row);
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != argmax)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Index and value of the largest entry; ties resolve to the lowest index.
pub(crate) fn row_argmax(row: ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (k, &z) in row.iter().enumerate().skip(1) {
        if z > best.1 {
            best = (k, z);
        }
    }
    best
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&y| y >= classes) {
        Some(i) => Err(Error::input(format!(
            "label {} of sample {i} is outside [0, {classes})",
            labels[i]
        ))),
        None => Ok(()),
    }
}

/// Softmax cross-entropy `-log p(y | logits)` for every row.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Vec<f64>> {
    if logits.nrows() != labels.len() {
        return Err(Error::input("logit rows and labels differ in length"));
    }
    check_labels(labels, logits.ncols())?;
    Ok(logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| {
            // lse - z_y, split so that a dominant true class yields ln_1p(tiny)
            // instead of cancelling to zero.
            let (argmax, max) = row_argmax(row);
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != argmax)
                .map(|(_, &z)| (z - max).exp())
                .sum();
            (max - row[y]) + rest.ln_1p()
        })
        .collect())
}

pub fn per_sample_loss(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    let logits = forward(params, batch)?;
    cross_entropy(logits.view(), batch.labels())
}

fn check_weights(weights: &[f64], batch_len: usize) -> Result<()> {
    if weights.len() != batch_len {
        return Err(Error::input(format!(
            "{} sample weights for a batch of {batch_len}",
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::input(format!(
            "sample weight {i} is {}, weights must be finite and non-negative",
            weights[i]
        )));
    }
    Ok(())
}

/// Gradient of `(1/B) * sum_i w_i * loss_i` with respect to every parameter.
pub fn weighted_grad(params: &ModelParams, batch: &Batch, weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(weights, batch.len())?;
    check_labels(batch.labels(), params.num_classes())?;
    let pass = forward_pass(params, batch.features())?;
    Ok(backward(params, &pass, batch.labels(), weights))
}

/// Backpropagation through a pass produced by [`forward_pass`].
///
/// Labels and weights must already be validated against the pass.
pub(crate) fn backward(
    params: &ModelParams,
    pass: &ForwardPass<'_>,
    labels: &[usize],
    weights: &[f64],
) -> Vec<f64> {
    let batch = labels.len() as f64;
    let mut grad = vec![0.0; params.len()];

    // dL/dz for the logits: w_i / B * (softmax - onehot)
    let mut delta = pass.logits.clone();
    for ((mut row, &y), &w) in delta.outer_iter_mut().zip(labels).zip(weights) {
        let lse = log_sum_exp(row.view());
        let scale = w / batch;
        row.mapv_inplace(|z| (z - lse).exp() * scale);
        row[y] -= scale;
    }

    for l in (0..params.layer_shapes.len()).rev() {
        let input = if l == 0 {
            pass.input
        } else {
            pass.hidden[l - 1].view()
        };
        let (w_range, b_range) = params.layer_ranges(l);
        let grad_w = input.t().dot(&delta);
        // `dot` may hand back a column-major array; iter() walks logical order.
        for (g, v) in grad[w_range].iter_mut().zip(grad_w.iter()) {
            *g = *v;
        }
        for (g, v) in grad[b_range].iter_mut().zip(delta.sum_axis(Axis(0)).iter()) {
            *g = *v;
        }
        if l > 0 {
            let (w, _) = params.layer(l);
            let mut upstream = delta.dot(&w.t());
            upstream.zip_mut_with(&input, |d, &h| *d *= 1.0 - h * h);
            delta = upstream;
        }
    }
    grad
}

/// Class predictions, ties broken toward the lowest class index.
pub fn predict(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits.outer_iter().map(|row| row_argmax(row).0).collect()
}

/// SGD hyperparameters plus the momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum_buffer: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
}

impl OptimizerState {
    /// Fresh state with a zeroed momentum buffer.
    pub fn new(param_len: usize, lr: f64, momentum: f64, weight_decay: f64, lr_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay must be non-negative, got {weight_decay}"
            )));
        }
        if !(lr_decay > 0.0 && lr_decay <= 1.0) {
            return Err(Error::config(format!(
                "lr_decay must lie in (0, 1], got {lr_decay}"
            )));
        }
        Ok(Self {
            momentum_buffer: vec![0.0; param_len],
            lr,
            momentum,
            weight_decay,
            lr_decay,
        })
    }
}

/// One SGD step. The learning rate is left untouched; decay is the server's job.
pub fn sgd_step(
    params: &ModelParams,
    gradient: &[f64],
    state: OptimizerState,
) -> Result<(ModelParams, OptimizerState)> {
    let mut params = params.clone();
    let mut state = state;
    sgd_step_in_place(&mut params, gradient, &mut state)?;
    Ok((params, state))
}

pub fn sgd_step_in_place(
    params: &mut ModelParams,
    gradient: &[f64],
    state: &mut OptimizerState,
) -> Result<()> {
    if gradient.len() != params.len() || state.momentum_buffer.len() != params.len() {
        return Err(Error::input(format!(
            "sgd_step length mismatch: params {}, gradient {}, buffer {}",
            params.len(),
            gradient.len(),
            state.momentum_buffer.len()
        )));
    }
    let (lr, momentum, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((p, &g), b) in params
        .values
        .iter_mut()
        .zip(gradient)
        .zip(state.momentum_buffer.iter_mut())
    {
        *b = momentum * *b + (g + wd * *p);
        *p -= lr * *b;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(bias: &[f64], dim: usize) -> ModelParams {
        let k = bias.len();
        let mut values = vec![0.0; dim * k];
        values.extend_from_slice(bias);
        ModelParams::new(vec![(dim, k)], values).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let params = ModelParams::zeros(ModelParams::mlp_shapes(3, &[5], 4)).unwrap();
        let batch = Batch::new(array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]], vec![0, 1]).unwrap();
        let logits = forward(&params, &batch).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn identity_layer_passes_unit_rows_plus_bias() {
        let d = 4;
        let mut values = vec![0.0; d * d];
        for i in 0..d {
            values[i * d + i] = 1.0;
        }
        let bias = [0.5, -1.0, 2.0, 0.0];
        values.extend_from_slice(&bias);
        let params = ModelParams::new(vec![(d, d)], values).unwrap();
        for j in 0..d {
            let mut row = Array2::zeros((1, d));
            row[[0, j]] = 1.0;
            let logits = forward(&params, &Batch::new(row, vec![0]).unwrap()).unwrap();
            for k in 0..d {
                let e = if k == j { 1.0 } else { 0.0 };
                assert_eq!(logits[[0, k]], e + bias[k]);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let params = ModelParams::zeros(vec![(3, 2)]).unwrap();
        let batch = Batch::new(Array2::zeros((1, 4)), vec![0]).unwrap();
        assert!(matches!(forward(&params, &batch), Err(Error::Config(_))));
        assert!(ModelParams::new(vec![(3, 2)], vec![0.0; 7]).is_err());
        assert!(ModelParams::zeros(vec![(3, 2), (3, 1)]).is_err());
    }

    #[test]
    fn batch_rejects_mismatched_rows() {
        assert!(Batch::new(Array2::zeros((2, 3)), vec![0]).is_err());
        assert!(Batch::new(Array2::zeros((0, 3)), vec![]).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let params = linear(&[0.0; 10], 2);
        let batch = Batch::new(array![[0.3, -0.7], [1.0, 2.0]], vec![3, 9]).unwrap();
        for l in per_sample_loss(&params, &batch).unwrap() {
            assert!((l - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_loss() {
        let params = linear(&[2.0, 1.0, 0.0], 1);
        let batch = Batch::new(array![[0.0]], vec![1]).unwrap();
        let loss = per_sample_loss(&params, &batch).unwrap()[0];
        // ln(e^2 + e + 1) - 1
        assert!((loss - 1.407_605_964_444_380_1).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn confident_true_class_loss_vanishes_monotonically() {
        let mut last = f64::INFINITY;
        for z in [0.0, 1.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0] {
            let mut bias = vec![0.0; 10];
            bias[4] = z;
            let params = linear(&bias, 1);
            let loss = per_sample_loss(&params, &Batch::new(array![[0.0]], vec![4]).unwrap()).unwrap()[0];
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-20 && last > 0.0, "{last}");
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let params = linear(&[0.0; 3], 1);
        let batch = Batch::new(array![[0.0]], vec![3]).unwrap();
        assert!(matches!(per_sample_loss(&params, &batch), Err(Error::Input(_))));
        assert!(matches!(
            weighted_grad(&params, &batch, &[1.0]),
            Err(Error::Input(_))
        ));
    }

    fn random_case(seed: u64) -> (ModelParams, Batch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::glorot(ModelParams::mlp_shapes(4, &[6], 3), &mut rng).unwrap();
        let feats = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let labels = (0..5).map(|_| rng.random_range(0..3)).collect();
        (params, Batch::new(feats, labels).unwrap())
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let (params, batch) = random_case(1);
        let g = weighted_grad(&params, &batch, &[0.0; 5]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_weight_rejected() {
        let (params, batch) = random_case(2);
        let err = weighted_grad(&params, &batch, &[1.0, 1.0, -0.5, 1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(weighted_grad(&params, &batch, &[1.0; 4]).is_err());
    }

    #[test]
    fn unit_weights_match_mean_loss_gradient() {
        // mean loss gradient via finite differences of the unweighted mean
        let (params, batch) = random_case(3);
        let g = weighted_grad(&params, &batch, &[1.0; 5]).unwrap();
        let mean = |p: &ModelParams| {
            let l = per_sample_loss(p, &batch).unwrap();
            l.iter().sum::<f64>() / l.len() as f64
        };
        let h = 1e-6;
        for i in 0..params.len() {
            let mut plus = params.values.clone();
            plus[i] += h;
            let mut minus = params.values.clone();
            minus[i] -= h;
            let fd = (mean(&params.with_values(plus)) - mean(&params.with_values(minus))) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn sgd_plain_step() {
        let params = ModelParams::new(vec![(1, 2)], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let state = OptimizerState::new(4, 0.1, 0.0, 0.0, 1.0).unwrap();
        let (p, s) = sgd_step(&params, &[1.0, -1.0, 0.5, 0.0], state).unwrap();
        assert_eq!(p.values(), &[1.0 - 0.1, 2.0 + 0.1, 3.0 - 0.05, 4.0]);
        assert_eq!(s.lr, 0.1);
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let params = ModelParams::new(vec![(1, 1)], vec![0.25, -3.0]).unwrap();
        let state = OptimizerState::new(2, 0.5, 0.9, 0.0, 0.998).unwrap();
        let (p, _) = sgd_step(&params, &[0.0, 0.0], state).unwrap();
        assert_eq!(p, params);
    }

    #[test]
    fn momentum_second_step_is_one_point_nine() {
        let lr = 0.01;
        let g = [0.3, -1.2];
        let params = ModelParams::new(vec![(1, 1)], vec![0.0, 0.0]).unwrap();
        let state = OptimizerState::new(2, lr, 0.9, 0.0, 1.0).unwrap();
        let (p1, s1) = sgd_step(&params, &g, state).unwrap();
        let (p2, _) = sgd_step(&p1, &g, s1).unwrap();
        for ((a, b), g) in p1.values().iter().zip(p2.values()).zip(g) {
            assert!((a - b - lr * 1.9 * g).abs() < 1e-15);
        }
    }

    #[test]
    fn optimizer_domain_checks() {
        assert!(OptimizerState::new(1, 0.0, 0.9, 0.0, 1.0).is_err());
        assert!(OptimizerState::new(1, 0.1, 1.0, 0.0, 1.0).is_err());
        assert!(OptimizerState::new(1, 0.1, 0.9, -1.0, 1.0).is_err());
        assert!(OptimizerState::new(1, 0.1, 0.9, 0.0, 0.0).is_err());
        let params = ModelParams::zeros(vec![(1, 1)]).unwrap();
        let state = OptimizerState::new(3, 0.1, 0.9, 0.0, 1.0).unwrap();
        assert!(sgd_step(&params, &[0.0, 0.0], state).is_err());
    }

    #[test]
    fn glorot_respects_limits_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shapes = ModelParams::mlp_shapes(16, &[64], 8);
        let params = ModelParams::glorot(shapes, &mut rng).unwrap();
        let lim1 = (6.0f64 / 80.0).sqrt();
        assert!(params.values()[..16 * 64].iter().all(|v| v.abs() <= lim1));
        assert!(params.values()[16 * 64..16 * 64 + 64].iter().all(|&v| v == 0.0));
        assert_eq!(params.len(), 16 * 64 + 64 + 64 * 8 + 8);
    }

    #[test]
    fn ties_predict_lowest_class() {
        assert_eq!(
            predict(array![[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]].view()),
            vec![0, 1]
        );
    }
}
