//! Server-side round loop: client sampling, confidence-guided aggregation,
//! optional server momentum, learning-rate decay and evaluation.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_update, ClientConfig, ClientUpdate};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{cross_entropy, forward_pass, predict, ModelParams};
use crate::partition::IndexPartition;
use crate::seeds::{stream_rng, Stream};

/// Offset added to shifted confidences so every client keeps a positive share.
pub const CONFIDENCE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Data volume blended with client confidence via `alpha`.
    FLoodWeights,
    /// `n_c / sum n`.
    DataVolume,
    /// Data-volume averaging followed by a server momentum step.
    FedAvgM { rho: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub total_clients: usize,
    pub per_round: usize,
    pub rounds: u32,
    pub alpha: f64,
    pub aggregation: Aggregation,
    /// Multiplier applied to the client learning rate after every round.
    pub lr_decay: f64,
    pub eval_every: u32,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    /// Store elapsed milliseconds in the metrics; off keeps outputs reproducible.
    pub record_wall_time: bool,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 || self.per_round == 0 || self.per_round > self.total_clients {
            return Err(Error::config(format!(
                "need 1 <= per_round <= total_clients, got per_round = {}, total_clients = {}",
                self.per_round, self.total_clients
            )));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if let Aggregation::FedAvgM { rho } = self.aggregation {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::config(format!(
                    "server momentum rho must lie in [0, 1), got {rho}"
                )));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }
}

/// Convex weights over the clients of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::input("no aggregation weights"));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::input(
                "aggregation weights must be finite and non-negative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!("aggregation weights sum to {total}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `M` distinct clients out of `N`, ascending.
pub fn select_clients<R: Rng + ?Sized>(total: usize, per_round: usize, rng: &mut R) -> Result<Vec<usize>> {
    if per_round == 0 || per_round > total {
        return Err(Error::config(format!(
            "cannot select {per_round} of {total} clients"
        )));
    }
    let mut chosen = rand::seq::index::sample(rng, total, per_round).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

fn normalize(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    values.iter().map(|v| v / total).collect()
}

/// `n_c / sum n`.
pub fn data_volume_weights(updates: &[ClientUpdate]) -> Result<AggregationWeights> {
    if updates.is_empty() {
        return Err(Error::input("no client updates to weight"));
    }
    if updates.iter().any(|u| u.n == 0) {
        return Err(Error::input("client update with zero samples"));
    }
    let n: Vec<f64> = updates.iter().map(|u| u.n as f64).collect();
    Ok(AggregationWeights(normalize(&n)))
}

/// `Norm(Norm(n) + alpha * Norm(phi'))` with sum normalisation over the cohort.
///
/// `phi'` is the confidence shifted so the cohort minimum sits at
/// [`CONFIDENCE_FLOOR`]: scorers such as energy or max-logit can go negative,
/// and the shift keeps every share positive without changing the ordering.
/// `alpha = 0` returns the data-volume weights exactly.
pub fn compute_agg_weights(updates: &[ClientUpdate], alpha: f64) -> Result<AggregationWeights> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be non-negative, got {alpha}")));
    }
    if let Some(i) = updates.iter().position(|u| !u.phi.is_finite()) {
        return Err(Error::input(format!(
            "client {i} reported a non-finite confidence"
        )));
    }
    let volume = data_volume_weights(updates)?;
    if alpha == 0.0 {
        return Ok(volume);
    }
    let min = updates.iter().map(|u| u.phi).fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = updates.iter().map(|u| u.phi - min + CONFIDENCE_FLOOR).collect();
    let confidence = normalize(&shifted);
    let raw: Vec<f64> = volume
        .0
        .iter()
        .zip(&confidence)
        .map(|(v, c)| v + alpha * c)
        .collect();
    Ok(AggregationWeights(normalize(&raw)))
}

/// `sum_c p_c theta_c`, accumulated in client order.
pub fn aggregate(updates: &[ClientUpdate], weights: &AggregationWeights) -> Result<ModelParams> {
    if updates.is_empty() || updates.len() != weights.0.len() {
        return Err(Error::input(format!(
            "{} updates for {} weights",
            updates.len(),
            weights.0.len()
        )));
    }
    let first = &updates[0].params;
    if updates.iter().any(|u| !u.params.same_shape(first)) {
        return Err(Error::input("client models differ in shape"));
    }
    let mut acc = vec![0.0; first.len()];
    for (u, &p) in updates.iter().zip(&weights.0) {
        for (a, &v) in acc.iter_mut().zip(u.params.values()) {
            *a += p * v;
        }
    }
    Ok(first.with_values(acc))
}

/// Server momentum in the `delta = global - aggregated` convention.
///
/// `velocity <- rho * velocity + delta`, `global <- global - velocity`. The new
/// global is evaluated as `aggregated - rho * velocity_old`, which is the same
/// quantity and returns `aggregated` bit-for-bit when `rho = 0`.
pub fn server_momentum_step(
    global: &ModelParams,
    aggregated: &ModelParams,
    velocity: &[f64],
    rho: f64,
) -> Result<(ModelParams, Vec<f64>)> {
    if !global.same_shape(aggregated) || velocity.len() != global.len() {
        return Err(Error::input("server momentum operands differ in length"));
    }
    let mut next = Vec::with_capacity(global.len());
    let mut new_velocity = Vec::with_capacity(global.len());
    for ((&g, &a), &v) in global.values().iter().zip(aggregated.values()).zip(velocity) {
        new_velocity.push(rho * v + (g - a));
        next.push(a - rho * v);
    }
    Ok((global.with_values(next), new_velocity))
}

/// Rows evaluated per forward pass.
const EVAL_CHUNK: usize = 512;

/// Test accuracy (argmax, ties to the lowest class) and mean cross-entropy.
pub fn evaluate(params: &ModelParams, test_set: &Dataset) -> Result<(f64, f64)> {
    if test_set.is_empty() {
        return Err(Error::input("test set is empty"));
    }
    let features = test_set.features();
    let labels = test_set.labels();
    let (mut correct, mut loss) = (0usize, 0.0);
    let mut start = 0;
    while start < test_set.len() {
        let end = (start + EVAL_CHUNK).min(test_set.len());
        let pass = forward_pass(params, features.slice(ndarray::s![start..end, ..]))?;
        let batch_labels = &labels[start..end];
        correct += predict(pass.logits())
            .iter()
            .zip(batch_labels)
            .filter(|(p, y)| p == y)
            .count();
        loss += cross_entropy(pass.logits(), batch_labels)?.iter().sum::<f64>();
        start = end;
    }
    let n = test_set.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSeries {
    /// One record per evaluation round.
    pub records: Vec<MetricsRecord>,
    /// `||theta^{t+1} - theta^t|| / lr_t` for every round.
    pub update_norms: Vec<f64>,
    pub final_params: ModelParams,
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Runs the full federated loop.
///
/// All randomness is derived from `seed`: initialisation, per-round client
/// sampling, and one stream per (round, client) for local training. Client
/// updates run in parallel and are reduced in ascending client order, so the
/// result does not depend on thread scheduling.
pub fn run_experiment(
    server: &ServerConfig,
    client: &ClientConfig,
    partition: &IndexPartition,
    dataset: &Dataset,
    test_set: &Dataset,
    seed: u64,
) -> Result<MetricsSeries> {
    server.validate()?;
    client.validate()?;
    if partition.num_clients() != server.total_clients {
        return Err(Error::config(format!(
            "partition has {} clients, server expects {}",
            partition.num_clients(),
            server.total_clients
        )));
    }
    if test_set.dim() != dataset.dim() {
        return Err(Error::config(
            "test set and training set differ in feature dimension",
        ));
    }
    let classes = dataset.num_classes().max(test_set.num_classes());
    let shapes = ModelParams::mlp_shapes(dataset.dim(), &server.hidden, classes);
    let mut global = ModelParams::glorot(shapes, &mut stream_rng(seed, Stream::Init, 0, 0))?;
    let local_data: Vec<Dataset> = partition
        .clients()
        .iter()
        .map(|set| dataset.subset(set))
        .collect::<Result<_>>()?;

    let started = Instant::now();
    let mut velocity = vec![0.0; global.len()];
    let mut records = Vec::new();
    let mut update_norms = Vec::with_capacity(server.rounds as usize);

    for t in 0..server.rounds {
        let lr = client.lr * server.lr_decay.powi(t as i32);
        let selected = select_clients(
            server.total_clients,
            server.per_round,
            &mut stream_rng(seed, Stream::Select, t.into(), 0),
        )?;
        let updates: Vec<ClientUpdate> = selected
            .par_iter()
            .map(|&c| {
                let mut rng = stream_rng(seed, Stream::Client, t.into(), c as u64);
                local_update(&global, t, lr, &local_data[c], client, &mut rng)
            })
            .collect::<Result<_>>()?;

        let next = match server.aggregation {
            Aggregation::FLoodWeights => aggregate(&updates, &compute_agg_weights(&updates, server.alpha)?)?,
            Aggregation::DataVolume => aggregate(&updates, &data_volume_weights(&updates)?)?,
            Aggregation::FedAvgM { rho } => {
                let averaged = aggregate(&updates, &data_volume_weights(&updates)?)?;
                let (next, v) = server_momentum_step(&global, &averaged, &velocity, rho)?;
                velocity = v;
                next
            }
        };
        let update_norm = l2_distance(next.values(), global.values()) / lr;
        update_norms.push(update_norm);
        global = next;

        let round = t + 1;
        if round % server.eval_every == 0 || round == server.rounds {
            let (accuracy, loss) = evaluate(&global, test_set)?;
            let mean_phi = updates.iter().map(|u| u.phi).sum::<f64>() / updates.len() as f64;
            records.push(MetricsRecord {
                round,
                test_accuracy: accuracy,
                test_loss: loss,
                mean_phi,
                mean_lambda: client.effective_lambda(t),
                update_norm,
                wall_ms: if server.record_wall_time {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            });
        }
    }
    Ok(MetricsSeries {
        records,
        update_norms,
        final_params: global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(values: &[f64], n: usize, phi: f64) -> ClientUpdate {
        ClientUpdate {
            params: ModelParams::new(vec![(values.len() - 1, 1)], values.to_vec()).unwrap(),
            n,
            phi,
        }
    }

    #[test]
    fn equal_clients_equal_weights() {
        for c in [-3.0, 0.0, 0.4, 12.0] {
            let u = [flat(&[0.0, 0.0], 50, c), flat(&[0.0, 0.0], 50, c)];
            let w = compute_agg_weights(&u, 0.5).unwrap();
            assert!((w.as_slice()[0] - 0.5).abs() < 1e-15);
            assert!((w.as_slice()[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_zero_is_data_volume() {
        let u = [flat(&[0.0, 0.0], 30, 5.0), flat(&[0.0, 0.0], 70, -1.0)];
        assert_eq!(compute_agg_weights(&u, 0.0).unwrap().as_slice(), &[0.3, 0.7]);
    }

    #[test]
    fn confidence_pipeline_hand_example() {
        let u = [flat(&[0.0, 0.0], 50, 0.0), flat(&[0.0, 0.0], 50, 1.0)];
        let w = compute_agg_weights(&u, 0.5).unwrap();
        assert!((w.as_slice()[0] - 1.0 / 3.0).abs() < 1e-9);
        assert!((w.as_slice()[1] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn agg_weight_errors() {
        let u = [flat(&[0.0, 0.0], 50, f64::NAN)];
        assert!(matches!(compute_agg_weights(&u, 0.5), Err(Error::Input(_))));
        assert!(compute_agg_weights(&[], 0.5).is_err());
        let u = [flat(&[0.0, 0.0], 50, 1.0)];
        assert!(matches!(compute_agg_weights(&u, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn aggregate_examples() {
        let a = flat(&[0.0, 0.0, 0.0], 1, 0.0);
        let b = flat(&[1.0, 1.0, 1.0], 1, 0.0);
        let w = AggregationWeights::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(
            aggregate(&[a.clone(), b.clone()], &w).unwrap().values(),
            &[0.75; 3]
        );
        let hot = AggregationWeights::new(vec![0.0, 1.0]).unwrap();
        let c = flat(&[0.1, -7.3, 2.2], 1, 0.0);
        assert_eq!(aggregate(&[a.clone(), c.clone()], &hot).unwrap(), c.params);
        let same = AggregationWeights::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(aggregate(&[c.clone(), c.clone()], &same).unwrap(), c.params);
        let short = flat(&[0.0, 0.0], 1, 0.0);
        assert!(aggregate(&[a, short], &w).is_err());
        assert!(aggregate(&[c], &w).is_err());
    }

    #[test]
    fn server_momentum_examples() {
        let g = flat(&[1.0, 2.0], 1, 0.0).params;
        let a = flat(&[0.5, 2.5], 1, 0.0).params;
        let (next, v) = server_momentum_step(&g, &a, &[0.3, -0.2], 0.0).unwrap();
        assert_eq!(next, a);
        assert_eq!(v, vec![0.5, -0.5]);
        let (same, v) = server_momentum_step(&g, &g, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!((same, v), (g.clone(), vec![0.0, 0.0]));

        let d = [0.2, -0.4];
        let shift = |p: &ModelParams| p.with_values(p.values().iter().zip(d).map(|(x, d)| x - d).collect());
        let (g1, v1) = server_momentum_step(&g, &shift(&g), &[0.0, 0.0], 0.1).unwrap();
        let (g2, _) = server_momentum_step(&g1, &shift(&g1), &v1, 0.1).unwrap();
        for ((a, b), d) in g1.values().iter().zip(g2.values()).zip(d) {
            assert!((a - b - 1.1 * d).abs() < 1e-12);
        }
    }

    #[test]
    fn select_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_clients(6, 6, &mut rng).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert!(matches!(select_clients(3, 4, &mut rng), Err(Error::Config(_))));
        assert!(select_clients(3, 0, &mut rng).is_err());
        let a = select_clients(50, 7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = select_clients(50, 7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
    }

    #[test]
    fn uniform_logits_accuracy_is_class_zero_frequency() {
        let labels = vec![0, 1, 2, 0, 1];
        let test = Dataset::new(ndarray::Array2::zeros((5, 2)), labels, 3).unwrap();
        let params = ModelParams::zeros(vec![(2, 3)]).unwrap();
        let (acc, loss) = evaluate(&params, &test).unwrap();
        assert_eq!(acc, 0.4);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }
}
