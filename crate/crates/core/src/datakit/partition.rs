//! Dirichlet non-IID partitioning and per-client train/test shards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::seeds;

const MAX_REDRAWS: usize = 16;
const MIN_SHARD: usize = 2;

/// Disjoint assignment of sample indices to clients.
///
/// For every class, the class's samples are spread across clients in
/// proportion to an independent Dir(alpha) draw, rounded by largest
/// remainder. Serializes to auditable JSON so a partition can be reused
/// across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
    pub assignment: Vec<Vec<u32>>,
}

impl PartitionPlan {
    /// Verifies the plan covers exactly the given dataset.
    pub fn validate_for(&self, ds: &Dataset) -> Result<(), DataError> {
        if self.assignment.len() != self.num_clients {
            return Err(DataError::PlanMismatch(format!(
                "{} assignment lists for {} clients",
                self.assignment.len(),
                self.num_clients
            )));
        }
        let total: usize = self.assignment.iter().map(Vec::len).sum();
        if total != ds.len() {
            return Err(DataError::PlanMismatch(format!(
                "plan covers {total} samples, dataset has {}",
                ds.len()
            )));
        }
        let mut seen = vec![false; ds.len()];
        for indices in &self.assignment {
            for &i in indices {
                let i = i as usize;
                if i >= ds.len() || seen[i] {
                    return Err(DataError::PlanMismatch(format!(
                        "sample index {i} out of range or assigned twice"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    /// Per-client class histograms against a dataset.
    pub fn class_histograms(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.assignment
            .iter()
            .map(|indices| {
                let mut h = vec![0usize; ds.num_classes];
                for &i in indices {
                    h[ds.labels[i as usize] as usize] += 1;
                }
                h
            })
            .collect()
    }
}

/// One client's train/test split. The split is 50/50 by sample count with
/// the odd sample going to the training side; the two sides never share a
/// sample index.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: u32,
    pub train: Dataset,
    pub test: Dataset,
}

fn dirichlet_proportions(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
        // all draws underflowed (extreme alpha); redraw from the same stream
    }
}

/// Largest-remainder rounding of `total * p` with deterministic tie-breaks
/// (larger fractional part first, then lower index).
fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = p.iter().map(|&q| (q * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = p[a] * total as f64 - counts[a] as f64;
        let fb = p[b] * total as f64 - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % p.len()]] += 1;
    }
    counts
}

/// Splits a dataset across `num_clients` by per-class Dir(alpha) draws.
/// Re-draws with a derived seed when some client ends up with fewer than
/// two samples, up to a bounded retry count.
pub fn dirichlet_partition(
    ds: &Dataset,
    alpha: f64,
    num_clients: usize,
    seed: u64,
) -> Result<PartitionPlan, DataError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(DataError::NonPositiveAlpha(alpha));
    }
    if num_clients == 0 {
        return Err(DataError::NoClients(num_clients));
    }

    // samples of each class in dataset order
    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); ds.num_classes];
    for (i, &label) in ds.labels.iter().enumerate() {
        by_class[label as usize].push(i as u32);
    }

    let mut last_worst = (0usize, 0usize);
    for attempt in 0..MAX_REDRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "dirichlet", attempt as u64));
        let mut assignment: Vec<Vec<u32>> = vec![Vec::new(); num_clients];
        for class_samples in &by_class {
            if class_samples.is_empty() {
                continue;
            }
            let p = dirichlet_proportions(alpha, num_clients, &mut rng);
            let counts = largest_remainder(&p, class_samples.len());
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                assignment[client].extend_from_slice(&class_samples[cursor..cursor + count]);
                cursor += count;
            }
        }
        match assignment.iter().position(|a| a.len() < MIN_SHARD) {
            None => {
                return Ok(PartitionPlan {
                    alpha,
                    num_clients,
                    seed,
                    assignment,
                })
            }
            Some(client) => last_worst = (client, assignment[client].len()),
        }
    }
    Err(DataError::ShardTooSmall {
        client: last_worst.0,
        samples: last_worst.1,
        retries: MAX_REDRAWS,
        num_clients,
    })
}

/// Materializes per-client shards with deterministic 50/50 train/test
/// splits (train takes the odd sample).
pub fn make_shards(ds: &Dataset, plan: &PartitionPlan, seed: u64) -> Result<Vec<ClientShard>, DataError> {
    plan.validate_for(ds)?;
    let mut shards = Vec::with_capacity(plan.num_clients);
    for (client, indices) in plan.assignment.iter().enumerate() {
        let mut order = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "split", client as u64));
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let n_train = order.len().div_ceil(2);
        let train = ds.subset(&order[..n_train]);
        let test = ds.subset(&order[n_train..]);
        shards.push(ClientShard {
            client_id: client as u32,
            train,
            test,
        });
    }
    Ok(shards)
}

/// Mean over clients of the Shannon entropy (nats) of each client's label
/// distribution. Higher means more uniform, i.e. less heterogeneous.
pub fn mean_label_entropy(ds: &Dataset, plan: &PartitionPlan) -> f64 {
    let histograms = plan.class_histograms(ds);
    let mut total = 0.0;
    for h in &histograms {
        let n: usize = h.iter().sum();
        if n == 0 {
            continue;
        }
        let mut entropy = 0.0;
        for &count in h {
            if count > 0 {
                let p = count as f64 / n as f64;
                entropy -= p * p.ln();
            }
        }
        total += entropy;
    }
    total / histograms.len() as f64
}
