//! Label-skewed splits of a dataset across clients.
//!
//! * Dirichlet `Dir(beta)`: for every class, client proportions are drawn from
//!   a symmetric Dirichlet and the shuffled class indices are cut at the
//!   cumulative boundaries. Clients left empty steal one sample from the
//!   currently largest client.
//! * Pathological `Path(r)`: every client receives equal-sized shards from
//!   exactly `r` distinct classes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Disjoint, non-empty index sets into a parent dataset, one per client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexPartition {
    clients: Vec<Vec<usize>>,
}

impl IndexPartition {
    /// Validates disjointness, range and non-emptiness against a dataset of
    /// `parent_len` samples.
    pub fn new(clients: Vec<Vec<usize>>, parent_len: usize) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::input("partition needs at least one client"));
        }
        let mut seen = vec![false; parent_len];
        for (c, set) in clients.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::input(format!("client {c} has no samples")));
            }
            for &i in set {
                if i >= parent_len {
                    return Err(Error::input(format!("client {c} holds out-of-range index {i}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::input(format!("index {i} is assigned twice")));
                }
            }
        }
        Ok(Self { clients })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, c: usize) -> &[usize] {
        &self.clients[c]
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.clients
    }

    pub fn label_histograms(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|set| dataset.label_histogram(set))
            .collect()
    }
}

pub fn partition_dirichlet<R: Rng + ?Sized>(
    dataset: &Dataset,
    num_clients: usize,
    beta: f64,
    rng: &mut R,
) -> Result<IndexPartition> {
    if num_clients == 0 {
        return Err(Error::config("number of clients must be positive"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config(format!(
            "Dirichlet beta must be positive, got {beta}"
        )));
    }
    if dataset.len() < num_clients {
        return Err(Error::input(format!(
            "{} samples cannot cover {num_clients} clients",
            dataset.len()
        )));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];

    for mut indices in dataset.class_indices() {
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(rng);
        let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = props.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            // every draw underflowed; the whole class goes to one client
            let winner = rng.random_range(0..num_clients);
            props
                .iter_mut()
                .enumerate()
                .for_each(|(c, p)| *p = f64::from(c == winner));
        }
        let total: f64 = props.iter().sum();
        let n = indices.len();
        let mut start = 0;
        let mut cumulative = 0.0;
        for (c, p) in props.iter().enumerate() {
            cumulative += p / total;
            let end = if c + 1 == num_clients {
                n
            } else {
                ((cumulative * n as f64).round() as usize).clamp(start, n)
            };
            clients[c].extend_from_slice(&indices[start..end]);
            start = end;
        }
    }

    for c in 0..num_clients {
        if clients[c].is_empty() {
            let donor = (0..num_clients)
                .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
                .expect("at least one client");
            let moved = clients[donor].pop().expect("donor holds at least two samples");
            clients[c].push(moved);
        }
    }
    for set in &mut clients {
        set.sort_unstable();
    }
    IndexPartition::new(clients, dataset.len())
}

pub fn partition_pathological<R: Rng + ?Sized>(
    dataset: &Dataset,
    num_clients: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<IndexPartition> {
    let k = dataset.num_classes();
    let r = classes_per_client;
    if num_clients == 0 || r == 0 {
        return Err(Error::config("number of clients and r must be positive"));
    }
    if r > k {
        return Err(Error::config(format!(
            "r = {r} exceeds the {k} available classes"
        )));
    }
    if num_clients * r < k {
        return Err(Error::config(format!(
            "N * r = {} shard slots cannot place all {k} classes",
            num_clients * r
        )));
    }

    // Slot j of the p-th dealt client holds class perm[(p * r + j) mod K]:
    // consecutive residues are distinct because r <= K, and every class gets
    // at least one slot because N * r >= K.
    let mut class_perm: Vec<usize> = (0..k).collect();
    class_perm.shuffle(rng);
    let mut client_order: Vec<usize> = (0..num_clients).collect();
    client_order.shuffle(rng);
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (p, &client) in client_order.iter().enumerate() {
        for j in 0..r {
            holders[class_perm[(p * r + j) % k]].push(client);
        }
    }

    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (class, mut indices) in dataset.class_indices().into_iter().enumerate() {
        let owners = &holders[class];
        if indices.len() < owners.len() {
            return Err(Error::input(format!(
                "class {class} has {} samples but must fill {} shards",
                indices.len(),
                owners.len()
            )));
        }
        indices.shuffle(rng);
        let base = indices.len() / owners.len();
        let extra = indices.len() % owners.len();
        let mut start = 0;
        for (s, &owner) in owners.iter().enumerate() {
            let size = base + usize::from(s < extra);
            clients[owner].extend_from_slice(&indices[start..start + size]);
            start += size;
        }
    }
    for set in &mut clients {
        set.sort_unstable();
    }
    IndexPartition::new(clients, dataset.len())
}
