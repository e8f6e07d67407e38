//! Round-synchronous protocol drivers.
//!
//! The two-phase strategy runs a selection phase (plain FedAvg plus layer
//! voting) followed by a federated phase (frozen per-client heads, bodies
//! recombined with similarity weights and broadcast per client). FedAvg,
//! local-only and fixed-last-layer-head baselines share the same round
//! loop machinery and accounting.
//!
//! Sampled client updates run in parallel; every reduction happens after
//! results are collected in client order, so runs are bit-reproducible
//! regardless of the worker-thread count.

mod config;
mod report;

pub use config::{
    resolve_model, AggregationCfg, ConfigError, DatasetSource, IdxCfg, OutputCfg, RunConfig,
    Seeds, Strategy, SyntheticCfg,
};
pub use report::{
    cumulative_bytes, ClassAccuracy, CommForecast, CommReport, Phase, RoundRecord, RunReport,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    build_similarity, fedavg, weighted_body_update, AggError, SimilarityMatrix, SplitMode,
};
use crate::datakit::{make_shards, ClientShard, DataError, Dataset, PartitionPlan};
use crate::featdist::{
    fit_input_summary, fit_label_summary, FeatError, GaussianSummary, StreamingScorer,
};
use crate::nn::{Model, NnError, ParamPartition};
use crate::seeds;
use crate::selection::{client_vote, LayerOrder, SelectionError, VoteLedger};

pub type ClientId = u32;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Aggregation(#[from] AggError),
    #[error(transparent)]
    FeatDist(#[from] FeatError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::nn::CheckpointError),
    #[error("failed to build worker pool: {0}")]
    ThreadPool(String),
}

impl RunError {
    /// True when the failure is numeric (NaN/Inf gradients), as opposed to
    /// configuration or input validation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, RunError::Nn(NnError::NonFiniteGradient { .. }))
    }
}

/// One simulated edge client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: ClientId,
    pub shard: ClientShard,
    pub model: Model<f32>,
    /// The frozen personalized layer, set once selection concluded.
    pub head_layer: Option<String>,
    pub seed: u64,
}

impl ClientState {
    /// Body/head view of the current parameters, when a head is fixed.
    pub fn head_partition(&self) -> Option<ParamPartition<f32>> {
        self.head_layer
            .as_deref()
            .map(|l| self.model.split_params(l).expect("head layer is valid"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ServerToClient,
    ClientToServer,
}

/// Audit record of one simulated transfer: which layers the payload held
/// and how many parameters it carried.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub round: u32,
    pub direction: Direction,
    pub client: ClientId,
    pub layers: Vec<String>,
    pub params: u64,
}

/// Execution knobs that do not affect results (except the test hooks).
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for client updates and evaluation; 0 picks the rayon
    /// default. Results are identical for any value.
    pub threads: usize,
    /// Record every simulated transfer for invariant checks.
    pub record_messages: bool,
    /// Test hook: replace the similarity matrix with the identity.
    pub force_identity_similarity: bool,
    /// Dump the per-round similarity matrix as CSV text.
    pub dump_similarity_csv: bool,
    /// Save model checkpoints every N rounds into the given directory:
    /// the global model when one exists, sampled clients' models otherwise.
    pub checkpoint: Option<(u32, std::path::PathBuf)>,
}

/// Report plus optional audit artifacts.
#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub messages: Option<Vec<MessageRecord>>,
    /// (round, csv) similarity dumps when requested.
    pub similarity_csv: Option<Vec<(u32, String)>>,
}

/// Materializes the configured dataset source. Synthetic data is seeded
/// from the data seed, so the same config always yields the same dataset.
pub fn load_dataset(source: &DatasetSource, data_seed: u64) -> Result<Dataset, DataError> {
    match source {
        DatasetSource::Synthetic(c) => crate::datakit::generate_synthetic(
            c.classes,
            c.samples_per_class,
            &c.input_shape,
            c.separation,
            seeds::derive(data_seed, "synthetic", 0),
        ),
        DatasetSource::Idx(c) => crate::datakit::load_idx(&c.images, &c.labels),
    }
}

/// The partition a run derives when no explicit plan file is given.
pub fn default_plan(cfg: &RunConfig, dataset: &Dataset) -> Result<PartitionPlan, DataError> {
    crate::datakit::dirichlet_partition(dataset, cfg.alpha, cfg.num_clients, cfg.seeds.data)
}

/// Distinct sampled client ids for a round, sorted ascending and
/// deterministic in `(seed, round)`.
pub fn sample_clients(round: u32, gamma: f64, num_clients: usize, seed: u64) -> Vec<ClientId> {
    let m = config::sampled_count(gamma, num_clients);
    let mut ids: Vec<ClientId> = (0..num_clients as ClientId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "round", round as u64));
    ids.partial_shuffle(&mut rng, m);
    let mut sampled = ids[..m].to_vec();
    sampled.sort_unstable();
    sampled
}

/// Replaces the client's parameters with `incoming` (when given) and runs
/// `local_epochs` of SGD on its train shard. Returns the mean of the
/// per-epoch mean losses. Shuffles are seeded per (client, round, epoch).
pub fn client_update(
    state: &mut ClientState,
    incoming: Option<Vec<Vec<f32>>>,
    local_epochs: u32,
    lr: f64,
    batch_size: usize,
    round: u32,
) -> Result<f64, NnError> {
    if let Some(params) = incoming {
        state.model.set_params(params)?;
    }
    let mut loss_sum = 0.0;
    for epoch in 1..=local_epochs {
        let stream = round as u64 * 10_000 + epoch as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(state.seed, "shuffle", stream));
        let stats = state.model.sgd_epoch(
            &state.shard.train.inputs,
            &state.shard.train.labels,
            lr,
            batch_size,
            &mut rng,
        )?;
        loss_sum += stats.mean_loss;
    }
    Ok(loss_sum / local_epochs as f64)
}

/// Per-client test accuracy plus pooled per-class tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub per_client: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub per_class_correct: Vec<u64>,
    pub per_class_total: Vec<u64>,
}

impl EvalOutcome {
    pub fn class_accuracies(&self) -> Vec<ClassAccuracy> {
        self.per_class_correct
            .iter()
            .zip(&self.per_class_total)
            .enumerate()
            .map(|(class, (&correct, &total))| ClassAccuracy {
                class: class as u32,
                correct,
                total,
                accuracy: if total > 0 {
                    correct as f64 / total as f64
                } else {
                    0.0
                },
            })
            .collect()
    }
}

/// Evaluates every client's test shard. With `global` set, the single
/// global model stands in for every client (FedAvg semantics); otherwise
/// each client is scored with its own current model.
pub fn evaluate_all(
    states: &[ClientState],
    global: Option<&Model<f32>>,
) -> Result<EvalOutcome, NnError> {
    let num_classes = states
        .first()
        .map(|s| s.shard.test.num_classes)
        .unwrap_or(0);
    let per: Vec<(f64, Vec<u64>, Vec<u64>)> = states
        .par_iter()
        .map(|s| {
            let model = global.unwrap_or(&s.model);
            let pred = model.predict(&s.shard.test.inputs, 256)?;
            let mut correct_by_class = vec![0u64; num_classes];
            let mut total_by_class = vec![0u64; num_classes];
            let mut correct = 0u64;
            for (p, &t) in pred.iter().zip(&s.shard.test.labels) {
                total_by_class[t as usize] += 1;
                if *p == t {
                    correct += 1;
                    correct_by_class[t as usize] += 1;
                }
            }
            Ok((
                correct as f64 / s.shard.test.len() as f64,
                correct_by_class,
                total_by_class,
            ))
        })
        .collect::<Result<_, NnError>>()?;

    let per_client: Vec<f64> = per.iter().map(|(a, _, _)| *a).collect();
    let mean = per_client.iter().sum::<f64>() / per_client.len().max(1) as f64;
    let var = per_client
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / per_client.len().max(1) as f64;
    let mut per_class_correct = vec![0u64; num_classes];
    let mut per_class_total = vec![0u64; num_classes];
    for (_, c, t) in &per {
        for i in 0..num_classes {
            per_class_correct[i] += c[i];
            per_class_total[i] += t[i];
        }
    }
    Ok(EvalOutcome {
        per_client,
        mean,
        std: var.sqrt(),
        per_class_correct,
        per_class_total,
    })
}

/// Runs one experiment end to end.
pub fn run(
    cfg: &RunConfig,
    dataset: &Dataset,
    plan: &PartitionPlan,
    opts: &RunOptions,
) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    if plan.num_clients != cfg.num_clients {
        return Err(DataError::PlanMismatch(format!(
            "plan has {} clients, config expects {}",
            plan.num_clients, cfg.num_clients
        ))
        .into());
    }
    let shards = make_shards(dataset, plan, cfg.seeds.data)?;
    let spec = resolve_model(&cfg.model, dataset.sample_shape(), dataset.num_classes)?;
    let global = Model::<f32>::build(&spec, seeds::derive(cfg.seeds.master, "init", 0))?;
    let states: Vec<ClientState> = shards
        .into_iter()
        .map(|shard| {
            let id = shard.client_id;
            ClientState {
                id,
                shard,
                model: global.clone(),
                head_layer: None,
                seed: seeds::derive(cfg.seeds.master, "client", id as u64),
            }
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| RunError::ThreadPool(e.to_string()))?;

    let runner = Runner {
        cfg,
        opts,
        pool,
        states,
        global,
        records: Vec::new(),
        messages: opts.record_messages.then(Vec::new),
        sim_dumps: opts.dump_similarity_csv.then(Vec::new),
    };
    runner.execute()
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    opts: &'a RunOptions,
    pool: rayon::ThreadPool,
    states: Vec<ClientState>,
    global: Model<f32>,
    records: Vec<RoundRecord>,
    messages: Option<Vec<MessageRecord>>,
    sim_dumps: Option<Vec<(u32, String)>>,
}

impl<'a> Runner<'a> {
    fn execute(mut self) -> Result<RunOutput, RunError> {
        let model_params = self.global.param_count();
        let m = self.cfg.sampled_per_round() as u64;
        let k = self.cfg.rounds;

        let (selected, ledger, forecast, final_eval) = match self.cfg.strategy {
            Strategy::FedAvg => {
                for round in 1..=k {
                    self.fedavg_round(round, Phase::Federated, None)?;
                }
                let eval = self.evaluate(true)?;
                (None, None, CommForecast::new(model_params, 0, m, k as u64, k as u64), eval)
            }
            Strategy::LocalOnly => {
                for round in 1..=k {
                    self.local_round(round)?;
                }
                let eval = self.evaluate(false)?;
                (None, None, CommForecast::zero(model_params, k as u64), eval)
            }
            Strategy::FixedHead => {
                let head = self
                    .global
                    .eligible_layers()
                    .last()
                    .expect("model has at least one eligible layer")
                    .clone();
                for s in &mut self.states {
                    s.head_layer = Some(head.clone());
                }
                self.federated_phase(&head, 1, k)?;
                let head_params = self.global.param_vec(&head).unwrap().len() as u64;
                let eval = self.evaluate(false)?;
                (
                    Some(head),
                    None,
                    CommForecast::new(model_params, head_params, m, k as u64, 0),
                    eval,
                )
            }
            Strategy::FedCmd => {
                let k_p = self.cfg.selection_rounds();
                let order = LayerOrder::new(self.global.eligible_layers());
                let mut ledger = VoteLedger::new(order, k_p as usize);

                // z^x and z^y are fit once per client before the rounds
                let summaries: Vec<(GaussianSummary, GaussianSummary)> = self
                    .states
                    .iter()
                    .map(|s| {
                        (
                            fit_input_summary(&s.shard.train),
                            fit_label_summary(&s.shard.train.labels, s.shard.train.num_classes),
                        )
                    })
                    .collect();

                for round in 1..=k_p {
                    self.fedavg_round(round, Phase::Selection, Some((&mut ledger, &summaries)))?;
                }
                let l_star = ledger.finalize()?;

                // every client receives the phase-1 global model and fixes its head
                let params = self.global.params().to_vec();
                for s in &mut self.states {
                    s.model.set_params(params.clone())?;
                    s.head_layer = Some(l_star.clone());
                }
                self.assert_uniform_heads();

                self.federated_phase(&l_star, k_p + 1, k)?;
                let head_params = self.global.param_vec(&l_star).unwrap().len() as u64;
                let eval = self.evaluate(false)?;
                (
                    Some(l_star),
                    Some(ledger),
                    CommForecast::new(model_params, head_params, m, k as u64, k_p as u64),
                    eval,
                )
            }
        };

        let measured: u64 = self
            .records
            .iter()
            .map(|r| r.bytes_up + r.bytes_down)
            .sum();
        let report = RunReport {
            config: self.cfg.clone(),
            selected_layer: selected,
            vote_ledger: ledger,
            rounds: self.records,
            final_per_client_accuracy: final_eval.per_client.clone(),
            final_mean_accuracy: final_eval.mean,
            final_std_accuracy: final_eval.std,
            per_class_accuracy: final_eval.class_accuracies(),
            communication: CommReport {
                measured_total_bytes: measured,
                forecast,
            },
        };
        Ok(RunOutput {
            report,
            messages: self.messages,
            similarity_csv: self.sim_dumps,
        })
    }

    /// All clients share the same frozen head layer once selection is done.
    fn assert_uniform_heads(&self) {
        let mut heads = self.states.iter().map(|s| s.head_layer.as_deref());
        let first = heads.next().unwrap_or(None);
        assert!(
            heads.all(|h| h == first),
            "uniform-head invariant violated"
        );
    }

    fn eval_due(&self, round: u32) -> bool {
        round % self.cfg.eval_every == 0 || round == self.cfg.rounds
    }

    /// Saves checkpoints at the configured cadence: the global model for
    /// server-held phases, sampled clients' models otherwise.
    fn write_checkpoints(
        &self,
        round: u32,
        global: bool,
        sampled: &[ClientId],
    ) -> Result<(), RunError> {
        let Some((every, dir)) = &self.opts.checkpoint else {
            return Ok(());
        };
        if round % every != 0 {
            return Ok(());
        }
        let round_dir = dir.join(format!("round-{round:04}"));
        std::fs::create_dir_all(&round_dir)
            .map_err(|e| RunError::Checkpoint(crate::nn::CheckpointError::Io(e)))?;
        if global {
            crate::nn::save_checkpoint(&self.global, &round_dir.join("global.fckp"))?;
        } else {
            for &id in sampled {
                let path = round_dir.join(format!("client-{id:03}.fckp"));
                crate::nn::save_checkpoint(&self.states[id as usize].model, &path)?;
            }
        }
        Ok(())
    }

    /// Evaluates all clients, with the server model standing in for every
    /// client when `use_global` is set.
    fn evaluate(&self, use_global: bool) -> Result<EvalOutcome, RunError> {
        let g = use_global.then_some(&self.global);
        Ok(self.pool.install(|| evaluate_all(&self.states, g))?)
    }

    fn log_message(
        &mut self,
        round: u32,
        direction: Direction,
        client: ClientId,
        layers: Vec<String>,
        params: u64,
    ) {
        if let Some(log) = &mut self.messages {
            log.push(MessageRecord {
                round,
                direction,
                client,
                layers,
                params,
            });
        }
    }

    /// One FedAvg round over the sampled clients: broadcast the global
    /// model, train locally, aggregate sample-weighted. During the
    /// selection phase each client also votes for its best layer.
    fn fedavg_round(
        &mut self,
        round: u32,
        phase: Phase,
        selection: Option<(&mut VoteLedger, &[(GaussianSummary, GaussianSummary)])>,
    ) -> Result<(), RunError> {
        let sampled = sample_clients(
            round,
            self.cfg.gamma,
            self.cfg.num_clients,
            self.cfg.seeds.sampling,
        );
        let cfg = self.cfg;
        let global_params = self.global.params().to_vec();
        let voting = selection.is_some();
        let summaries = selection.as_ref().map(|(_, s)| *s);

        type FedAvgResult = (ClientId, Vec<Vec<f32>>, u64, f64, Option<String>);
        let results: Vec<FedAvgResult> = {
            let mut refs = sampled_refs(&mut self.states, &sampled);
            self.pool.install(|| {
                refs.par_iter_mut()
                    .map(|state| {
                        let loss = client_update(
                            state,
                            Some(global_params.clone()),
                            cfg.local_epochs,
                            cfg.lr,
                            cfg.batch_size,
                            round,
                        )?;
                        let vote = if voting {
                            let (z_x, z_y) = summaries.unwrap()[state.id as usize];
                            Some(score_and_vote(state, z_x, z_y, cfg.batch_size)?)
                        } else {
                            None
                        };
                        Ok((
                            state.id,
                            state.model.params().to_vec(),
                            state.shard.train.len() as u64,
                            loss,
                            vote,
                        ))
                    })
                    .collect::<Result<_, RunError>>()
            })?
        };

        let all_layers: Vec<String> = self.global.layer_names().map(String::from).collect();
        let theta = self.global.param_count();
        for (id, ..) in &results {
            self.log_message(round, Direction::ServerToClient, *id, all_layers.clone(), theta);
            self.log_message(round, Direction::ClientToServer, *id, all_layers.clone(), theta);
        }

        let winner = if let Some((ledger, _)) = selection {
            let votes: BTreeMap<ClientId, String> = results
                .iter()
                .map(|(id, _, _, _, vote)| (*id, vote.clone().expect("voting round")))
                .collect();
            Some(ledger.record_round(round, votes)?)
        } else {
            None
        };

        let flat: Vec<(Vec<f32>, u64)> = results
            .iter()
            .map(|(_, params, n, _, _)| (flatten_params(params), *n))
            .collect();
        let avg = fedavg(&flat)?;
        let new_params = unflatten_params(&self.global, &avg);
        self.global.set_params(new_params)?;

        self.write_checkpoints(round, true, &sampled)?;
        let mean_loss =
            results.iter().map(|(_, _, _, l, _)| *l).sum::<f64>() / results.len() as f64;
        let bytes = 4 * sampled.len() as u64 * theta;
        let eval = if self.eval_due(round) {
            Some(self.evaluate(true)?)
        } else {
            None
        };
        self.records.push(RoundRecord {
            round,
            phase,
            sampled,
            mean_train_loss: mean_loss,
            bytes_up: bytes,
            bytes_down: bytes,
            winner,
            mean_accuracy: eval.as_ref().map(|e| e.mean),
            std_accuracy: eval.as_ref().map(|e| e.std),
        });
        Ok(())
    }

    /// One local-only round: sampled clients train on their own models,
    /// nothing moves over the wire.
    fn local_round(&mut self, round: u32) -> Result<(), RunError> {
        let sampled = sample_clients(
            round,
            self.cfg.gamma,
            self.cfg.num_clients,
            self.cfg.seeds.sampling,
        );
        let cfg = self.cfg;
        let results: Vec<(ClientId, f64)> = {
            let mut refs = sampled_refs(&mut self.states, &sampled);
            self.pool.install(|| {
                refs.par_iter_mut()
                    .map(|state| {
                        let loss = client_update(
                            state,
                            None,
                            cfg.local_epochs,
                            cfg.lr,
                            cfg.batch_size,
                            round,
                        )?;
                        Ok((state.id, loss))
                    })
                    .collect::<Result<_, RunError>>()
            })?
        };
        self.write_checkpoints(round, false, &sampled)?;
        let mean_loss = results.iter().map(|(_, l)| *l).sum::<f64>() / results.len() as f64;
        let eval = if self.eval_due(round) {
            Some(self.evaluate(false)?)
        } else {
            None
        };
        self.records.push(RoundRecord {
            round,
            phase: Phase::Federated,
            sampled,
            mean_train_loss: mean_loss,
            bytes_up: 0,
            bytes_down: 0,
            winner: None,
            mean_accuracy: eval.as_ref().map(|e| e.mean),
            std_accuracy: eval.as_ref().map(|e| e.std),
        });
        Ok(())
    }

    /// Federated-phase rounds: sampled clients train from their stored
    /// body plus local head, upload both (the head is used only for the
    /// similarity matrix), and receive their own re-weighted body.
    fn federated_phase(&mut self, l_star: &str, from: u32, to: u32) -> Result<(), RunError> {
        let body_names: Vec<String> = self
            .global
            .parameterized_layers()
            .into_iter()
            .filter(|n| n != l_star)
            .collect();
        let head_pos = self
            .global
            .layer_names()
            .position(|n| n == l_star)
            .expect("head layer exists");
        let positions: BTreeMap<String, usize> = self
            .global
            .layer_names()
            .enumerate()
            .map(|(i, n)| (n.to_string(), i))
            .collect();
        // section A is FedAvg'd into one shared result, section B is
        // re-weighted per client
        let (section_a, section_b): (Vec<String>, Vec<String>) = match self.cfg.aggregation.split_mode
        {
            SplitMode::BeforeAfter => body_names
                .iter()
                .cloned()
                .partition(|n| positions[n] < head_pos),
            SplitMode::WholeBody => (Vec::new(), body_names.clone()),
        };
        let body_params: u64 = body_names
            .iter()
            .map(|n| self.global.param_vec(n).unwrap().len() as u64)
            .sum();
        let head_param_count = self.global.param_vec(l_star).unwrap().len() as u64;

        for round in from..=to {
            let sampled = sample_clients(
                round,
                self.cfg.gamma,
                self.cfg.num_clients,
                self.cfg.seeds.sampling,
            );
            let cfg = self.cfg;
            type FedResult = (ClientId, Vec<f32>, Vec<f32>, Vec<f32>, u64, f64);
            let results: Vec<FedResult> = {
                let sa = &section_a;
                let sb = &section_b;
                let mut refs = sampled_refs(&mut self.states, &sampled);
                self.pool.install(|| {
                    refs.par_iter_mut()
                        .map(|state| {
                            let loss = client_update(
                                state,
                                None,
                                cfg.local_epochs,
                                cfg.lr,
                                cfg.batch_size,
                                round,
                            )?;
                            let a = flatten_named(&state.model, sa);
                            let b = flatten_named(&state.model, sb);
                            let head = state.model.param_vec(l_star).unwrap().to_vec();
                            Ok((
                                state.id,
                                a,
                                b,
                                head,
                                state.shard.train.len() as u64,
                                loss,
                            ))
                        })
                        .collect::<Result<_, RunError>>()
                })?
            };

            // uploads carry body and head; the head feeds only the
            // similarity matrix and is excluded from byte accounting
            let mut up_layers = body_names.clone();
            up_layers.push(l_star.to_string());
            for (id, ..) in &results {
                self.log_message(
                    round,
                    Direction::ClientToServer,
                    *id,
                    up_layers.clone(),
                    body_params + head_param_count,
                );
            }

            let heads: Vec<(ClientId, Vec<f32>)> = results
                .iter()
                .map(|(id, _, _, head, _, _)| (*id, head.clone()))
                .collect();
            let phi = if self.opts.force_identity_similarity {
                SimilarityMatrix::identity(sampled.clone())
            } else {
                build_similarity(&heads, self.cfg.epsilon)?
            };
            if let Some(dumps) = &mut self.sim_dumps {
                dumps.push((round, phi.to_csv()));
            }

            let shared_a: Option<Vec<f32>> = if section_a.is_empty() {
                None
            } else {
                let a_bodies: Vec<(Vec<f32>, u64)> = results
                    .iter()
                    .map(|(_, a, _, _, n, _)| (a.clone(), *n))
                    .collect();
                Some(fedavg(&a_bodies)?)
            };
            let per_b: Option<Vec<(ClientId, Vec<f32>)>> = if section_b.is_empty() {
                None
            } else {
                let b_bodies: Vec<(ClientId, Vec<f32>)> = results
                    .iter()
                    .map(|(id, _, b, _, _, _)| (*id, b.clone()))
                    .collect();
                Some(weighted_body_update(&b_bodies, &phi)?)
            };

            // per-client broadcast of the new body; heads never leave the server
            for (i, (id, ..)) in results.iter().enumerate() {
                let state = &mut self.states[*id as usize];
                if let Some(a) = &shared_a {
                    write_named(&mut state.model, &section_a, a);
                }
                if let Some(b) = &per_b {
                    debug_assert_eq!(b[i].0, *id);
                    write_named(&mut state.model, &section_b, &b[i].1);
                }
                self.log_message(
                    round,
                    Direction::ServerToClient,
                    *id,
                    body_names.clone(),
                    body_params,
                );
            }

            self.write_checkpoints(round, false, &sampled)?;
            let mean_loss =
                results.iter().map(|(.., l)| *l).sum::<f64>() / results.len() as f64;
            let bytes = 4 * sampled.len() as u64 * body_params;
            let eval = if self.eval_due(round) {
                Some(self.evaluate(false)?)
            } else {
                None
            };
            self.records.push(RoundRecord {
                round,
                phase: Phase::Federated,
                sampled,
                mean_train_loss: mean_loss,
                bytes_up: bytes,
                bytes_down: bytes,
                winner: None,
                mean_accuracy: eval.as_ref().map(|e| e.mean),
                std_accuracy: eval.as_ref().map(|e| e.std),
            });
        }
        Ok(())
    }
}

/// Streams the client's train shard through the model and votes for the
/// layer with the minimal transfer score.
fn score_and_vote(
    state: &ClientState,
    z_x: GaussianSummary,
    z_y: GaussianSummary,
    batch_size: usize,
) -> Result<String, RunError> {
    let eligible = state.model.eligible_layers();
    let mut scorer = StreamingScorer::new(&eligible)?;
    let n = state.shard.train.len();
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<u32> = (start as u32..((start + batch_size).min(n)) as u32).collect();
        let batch = state.shard.train.subset(&idx);
        let (_, trace) = state.model.forward(&batch.inputs)?;
        scorer.absorb(&trace)?;
    }
    let scores = scorer.finish(z_x, z_y)?;
    Ok(client_vote(&scores)?.to_string())
}

fn sampled_refs<'s>(states: &'s mut [ClientState], sampled: &[ClientId]) -> Vec<&'s mut ClientState> {
    states
        .iter_mut()
        .filter(|s| sampled.binary_search(&s.id).is_ok())
        .collect()
}

pub(crate) fn flatten_params(params: &[Vec<f32>]) -> Vec<f32> {
    let total: usize = params.iter().map(Vec::len).sum();
    let mut flat = Vec::with_capacity(total);
    for p in params {
        flat.extend_from_slice(p);
    }
    flat
}

pub(crate) fn unflatten_params(model: &Model<f32>, flat: &[f32]) -> Vec<Vec<f32>> {
    let mut out = Vec::with_capacity(model.params().len());
    let mut cursor = 0;
    for p in model.params() {
        out.push(flat[cursor..cursor + p.len()].to_vec());
        cursor += p.len();
    }
    debug_assert_eq!(cursor, flat.len());
    out
}

/// Concatenates the named layers' parameters in the given order.
fn flatten_named(model: &Model<f32>, names: &[String]) -> Vec<f32> {
    let mut flat = Vec::new();
    for n in names {
        flat.extend_from_slice(model.param_vec(n).expect("layer exists"));
    }
    flat
}

/// Writes a concatenated buffer back into the named layers.
fn write_named(model: &mut Model<f32>, names: &[String], flat: &[f32]) {
    let mut cursor = 0;
    for n in names {
        let p = model.param_vec_mut(n).expect("layer exists");
        let len = p.len();
        p.copy_from_slice(&flat[cursor..cursor + len]);
        cursor += len;
    }
    debug_assert_eq!(cursor, flat.len());
}

#[cfg(test)]
mod tests;
