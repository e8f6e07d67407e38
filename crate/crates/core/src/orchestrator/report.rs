//! Per-round records, the run report and its CSV rendering.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::selection::VoteLedger;

pub type ClientId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Selection,
    Federated,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Selection => "selection",
            Phase::Federated => "federated",
        }
    }
}

/// Metrics of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub phase: Phase,
    pub sampled: Vec<ClientId>,
    /// Mean over sampled clients of their mean per-epoch training loss.
    pub mean_train_loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Selection-phase round winner.
    pub winner: Option<String>,
    /// Test accuracy over ALL clients, present on evaluation rounds.
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
}

/// Closed-form communication prediction, emitted next to the measured
/// bytes so the two can be compared exactly.
///
/// Heads are excluded from phase-2 byte accounting: the personalized layer
/// is gathered only to build the similarity matrix and is never
/// redistributed, matching the overhead methodology this simulator mirrors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommForecast {
    /// Total model parameters.
    pub model_params: u64,
    /// Parameters of the personalized layer (zero when nothing is frozen).
    pub head_params: u64,
    pub sampled_per_round: u64,
    pub rounds_total: u64,
    pub selection_rounds: u64,
    /// 4 bytes/param, up + down, per selection-phase round.
    pub bytes_per_selection_round: u64,
    /// 4 bytes/param, up + down, per federated-phase round.
    pub bytes_per_federated_round: u64,
    pub predicted_total_bytes: u64,
    /// The closed form with all constants substituted.
    pub formula: String,
}

impl CommForecast {
    /// Two-phase prediction: `4*K_p*m*2|theta| + 4*(K-K_p)*m*2(|theta|-|phi|)`.
    /// FedAvg is the K_p = K special case, local-only is all zeros, and
    /// fixed-head is K_p = 0 with the classifier as head.
    pub fn new(
        model_params: u64,
        head_params: u64,
        sampled_per_round: u64,
        rounds_total: u64,
        selection_rounds: u64,
    ) -> Self {
        let m = sampled_per_round;
        let per_sel = 4 * m * 2 * model_params;
        let per_fed = 4 * m * 2 * (model_params - head_params);
        let kp = selection_rounds;
        let kf = rounds_total - kp;
        let total = per_sel * kp + per_fed * kf;
        let formula = format!(
            "4*{kp}*{m}*2*{model_params} + 4*{kf}*{m}*2*({model_params}-{head_params}) = {total}"
        );
        CommForecast {
            model_params,
            head_params,
            sampled_per_round,
            rounds_total,
            selection_rounds,
            bytes_per_selection_round: per_sel,
            bytes_per_federated_round: per_fed,
            predicted_total_bytes: total,
            formula,
        }
    }

    pub fn zero(model_params: u64, rounds_total: u64) -> Self {
        CommForecast {
            model_params,
            head_params: 0,
            sampled_per_round: 0,
            rounds_total,
            selection_rounds: 0,
            bytes_per_selection_round: 0,
            bytes_per_federated_round: 0,
            predicted_total_bytes: 0,
            formula: "0 (no communication)".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommReport {
    pub measured_total_bytes: u64,
    pub forecast: CommForecast,
}

/// Running totals per round: `out[i]` is the sum of up+down bytes of
/// rounds `0..=i`.
pub fn cumulative_bytes(rounds: &[RoundRecord]) -> Vec<u64> {
    let mut acc = 0u64;
    rounds
        .iter()
        .map(|r| {
            acc += r.bytes_up + r.bytes_down;
            acc
        })
        .collect()
}

/// Accuracy of one class over all clients' test shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: u32,
    pub correct: u64,
    pub total: u64,
    pub accuracy: f64,
}

/// Full result of one run; serializes to the report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    /// The frozen personalized layer (fedcmd and fixed-head).
    pub selected_layer: Option<String>,
    pub vote_ledger: Option<VoteLedger>,
    pub rounds: Vec<RoundRecord>,
    pub final_per_client_accuracy: Vec<f64>,
    pub final_mean_accuracy: f64,
    pub final_std_accuracy: f64,
    pub per_class_accuracy: Vec<ClassAccuracy>,
    pub communication: CommReport,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat CSV of the round records, one row per round.
    pub fn rounds_csv(&self) -> String {
        let mut out = String::from(
            "round,phase,winner,n_sampled,mean_train_loss,mean_accuracy,std_accuracy,bytes_up,bytes_down,cumulative_bytes\n",
        );
        let cumulative = cumulative_bytes(&self.rounds);
        for (r, cum) in self.rounds.iter().zip(cumulative) {
            let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.round,
                r.phase.name(),
                r.winner.clone().unwrap_or_default(),
                r.sampled.len(),
                r.mean_train_loss,
                opt(&r.mean_accuracy),
                opt(&r.std_accuracy),
                r.bytes_up,
                r.bytes_down,
                cum,
            ));
        }
        out
    }
}
