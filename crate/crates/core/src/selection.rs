//! Personalized-layer election: per-client argmin votes, per-round modal
//! winners, and the cross-round final decision.
//!
//! Ties at every level break toward the earliest layer in model spec
//! order, so outcomes never depend on map iteration order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featdist::LayerScore;

pub type ClientId = u32;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no scores to vote on")]
    NoScores,
    #[error("no votes recorded for the round")]
    NoVotes,
    #[error("vote for layer `{0}` which is not an eligible layer")]
    UnknownLayer(String),
    #[error("finalize called after {seen} rounds, {required} required")]
    TooFewRounds { seen: usize, required: usize },
    #[error("round {0} already recorded")]
    DuplicateRound(u32),
}

/// Eligible layers in model spec order; the tie-break authority.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOrder(Vec<String>);

impl LayerOrder {
    pub fn new(layers: Vec<String>) -> Self {
        LayerOrder(layers)
    }

    pub fn layers(&self) -> &[String] {
        &self.0
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|l| l == name)
    }
}

/// The layer with the minimal transfer score; ties break to the earliest
/// position in the list (scores arrive in spec order).
pub fn client_vote(scores: &[LayerScore]) -> Result<&str, SelectionError> {
    let mut best: Option<&LayerScore> = None;
    for s in scores {
        match best {
            None => best = Some(s),
            Some(b) if s.score < b.score => best = Some(s),
            _ => {}
        }
    }
    best.map(|s| s.layer.as_str()).ok_or(SelectionError::NoScores)
}

/// The layer voted for most often this round; ties break to spec order.
pub fn round_vote(
    votes: &BTreeMap<ClientId, String>,
    order: &LayerOrder,
) -> Result<String, SelectionError> {
    if votes.is_empty() {
        return Err(SelectionError::NoVotes);
    }
    let mut counts = vec![0usize; order.layers().len()];
    for layer in votes.values() {
        let pos = order
            .position(layer)
            .ok_or_else(|| SelectionError::UnknownLayer(layer.clone()))?;
        counts[pos] += 1;
    }
    // strict inequality keeps the earliest layer on ties
    let mut best = 0usize;
    for i in 1..counts.len() {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    Ok(order.layers()[best].clone())
}

/// Raw votes and the modal winner of one selection round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundVotes {
    pub round: u32,
    pub votes: BTreeMap<ClientId, String>,
    pub winner: String,
}

/// Tallies per-round layer votes across the selection phase and fixes the
/// final personalized layer as the mode of the round winners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteLedger {
    order: LayerOrder,
    required_rounds: usize,
    rounds: Vec<RoundVotes>,
    #[serde(rename = "final")]
    final_choice: Option<String>,
}

impl VoteLedger {
    pub fn new(order: LayerOrder, required_rounds: usize) -> Self {
        VoteLedger {
            order,
            required_rounds,
            rounds: Vec::new(),
            final_choice: None,
        }
    }

    pub fn rounds(&self) -> &[RoundVotes] {
        &self.rounds
    }

    pub fn final_choice(&self) -> Option<&str> {
        self.final_choice.as_deref()
    }

    /// Records one round of client votes and returns the round winner.
    pub fn record_round(
        &mut self,
        round: u32,
        votes: BTreeMap<ClientId, String>,
    ) -> Result<String, SelectionError> {
        if self.rounds.iter().any(|r| r.round == round) {
            return Err(SelectionError::DuplicateRound(round));
        }
        let winner = round_vote(&votes, &self.order)?;
        self.rounds.push(RoundVotes {
            round,
            votes,
            winner: winner.clone(),
        });
        Ok(winner)
    }

    /// The mode of the per-round winners, available once all required
    /// rounds are in; ties break to spec order.
    pub fn finalize(&mut self) -> Result<String, SelectionError> {
        if self.rounds.len() < self.required_rounds {
            return Err(SelectionError::TooFewRounds {
                seen: self.rounds.len(),
                required: self.required_rounds,
            });
        }
        let winners: BTreeMap<ClientId, String> = self
            .rounds
            .iter()
            .enumerate()
            .map(|(i, r)| (i as ClientId, r.winner.clone()))
            .collect();
        let choice = round_vote(&winners, &self.order)?;
        self.final_choice = Some(choice.clone());
        Ok(choice)
    }
}
