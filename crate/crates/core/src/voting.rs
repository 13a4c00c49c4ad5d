//! Confidence-weighted majority vote over chain answers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::{normalize_answer, ChainResult};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VoteError {
    #[error("no surviving chains to vote on")]
    NoSurvivingChains,
    #[error("chain {0} has confidence outside [0,1]")]
    InvalidConfidence(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Normalized winning answer.
    pub answer: String,
    /// The winner as written by its most confident chain.
    pub display: String,
    /// Summed weight of the winning answer.
    pub winning_weight: f64,
    /// Sum of all chain weights.
    pub total_weight: f64,
    pub per_answer_weights: BTreeMap<String, f64>,
    pub contributing_chains: Vec<u32>,
}

/// Weighted vote with weights equal to chain confidences.
pub fn vote(candidates: &[ChainResult]) -> Result<Verdict, VoteError> {
    tally(candidates, |c| c.confidence)
}

/// Plain majority: every chain weighs 1. Ties still fall to the most confident chain.
pub fn vote_unweighted(candidates: &[ChainResult]) -> Result<Verdict, VoteError> {
    tally(candidates, |_| 1.0)
}

struct Group<'a> {
    weights: Vec<f64>,
    max_confidence: f64,
    best: &'a ChainResult,
}

fn tally(candidates: &[ChainResult], weight: impl Fn(&ChainResult) -> f64) -> Result<Verdict, VoteError> {
    if candidates.is_empty() {
        return Err(VoteError::NoSurvivingChains);
    }
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    for c in candidates {
        if !(0.0..=1.0).contains(&c.confidence) {
            return Err(VoteError::InvalidConfidence(c.chain_id));
        }
        let key = normalize_answer(&c.final_answer);
        let g = groups.entry(key).or_insert(Group {
            weights: Vec::new(),
            max_confidence: c.confidence,
            best: c,
        });
        g.weights.push(weight(c));
        let better = c.confidence > g.best.confidence
            || (c.confidence == g.best.confidence
                && (&c.raw_answer, c.chain_id) < (&g.best.raw_answer, g.best.chain_id));
        if better {
            g.best = c;
        }
        g.max_confidence = g.max_confidence.max(c.confidence);
    }

    // Sum in sorted order so the result is independent of candidate order.
    let per_answer_weights: BTreeMap<String, f64> = groups
        .iter_mut()
        .map(|(k, g)| {
            g.weights.sort_by(f64::total_cmp);
            (k.clone(), g.weights.iter().sum())
        })
        .collect();

    let (answer, group) = groups
        .iter()
        .max_by(|(ka, ga), (kb, gb)| {
            per_answer_weights[*ka]
                .total_cmp(&per_answer_weights[*kb])
                .then(ga.max_confidence.total_cmp(&gb.max_confidence))
                .then(kb.cmp(ka))
        })
        .expect("at least one group");

    let mut all: Vec<f64> = candidates.iter().map(&weight).collect();
    all.sort_by(f64::total_cmp);
    let mut chains: Vec<u32> = candidates.iter().map(|c| c.chain_id).collect();
    chains.sort_unstable();

    Ok(Verdict {
        answer: answer.clone(),
        display: group.best.raw_answer.clone(),
        winning_weight: per_answer_weights[answer],
        total_weight: all.iter().sum(),
        per_answer_weights,
        contributing_chains: chains,
    })
}
