//! Contribution scoring and the global, task-specific and overall reputation
//! scores, plus the reputation utility `H`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::LearnerId;

/// `(u + 1) ln(1 + T_max − T_comp − T_comm)`, with the log argument floored
/// at 1 so deadline misses score zero rather than negative.
pub fn contribution(u: f64, t_max: f64, t_comp: f64, t_comm: f64) -> f64 {
    let slack = (1.0 + t_max - t_comp - t_comm).max(1.0);
    (u.clamp(-1.0, 1.0) + 1.0) * slack.ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepParams {
    /// Reputation utility at the threshold.
    pub gamma: f64,
    pub r_th: f64,
}

impl RepParams {
    pub fn new(gamma: f64, r_th: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) || !(r_th > 0.0 && r_th < 1.0) {
            return Err(Error::InvalidParam(format!(
                "gamma and r_th must lie in (0, 1), got {gamma} and {r_th}"
            )));
        }
        Ok(Self { gamma, r_th })
    }
}

/// Reputation utility `H(r)` relative to the coalition maximum `r_bar`:
/// `γ e^(r − r_th)` below the threshold, `γ + (1 − γ) ln(1 + μ)` at or above
/// it, with `μ = (e − 1)(r − r_th)/(r_bar − r_th)` (zero when `r_bar = r_th`).
pub fn rep_utility(r: f64, r_bar: f64, params: &RepParams) -> f64 {
    let RepParams { gamma, r_th } = *params;
    if r < r_th {
        return gamma * (r - r_th).exp();
    }
    let span = r_bar - r_th;
    let mu = if span > 0.0 {
        (std::f64::consts::E - 1.0) * (r - r_th) / span
    } else {
        0.0
    };
    gamma + (1.0 - gamma) * (1.0 + mu).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u64,
    pub head: LearnerId,
    pub theta: f64,
}

/// Time-decayed contribution history per learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReputationStore {
    pub lambda: f64,
    pub phi: f64,
    history: BTreeMap<LearnerId, Vec<HistoryEntry>>,
}

impl ReputationStore {
    pub fn new(lambda: f64, phi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) || !(0.0..=1.0).contains(&phi) {
            return Err(Error::InvalidParam(format!(
                "lambda and phi must lie in [0, 1], got {lambda} and {phi}"
            )));
        }
        Ok(Self {
            lambda,
            phi,
            history: BTreeMap::new(),
        })
    }

    /// Appends a contribution. Rounds must strictly increase per
    /// (learner, head) pair and ϑ must be non-negative.
    pub fn record(&mut self, learner: LearnerId, head: LearnerId, round: u64, theta: f64) -> Result<()> {
        if !(theta >= 0.0) || !theta.is_finite() {
            return Err(Error::InvalidParam(format!(
                "contribution must be finite and ≥ 0, got {theta}"
            )));
        }
        let entries = self.history.entry(learner).or_default();
        if let Some(last) = entries.iter().rev().find(|e| e.head == head) {
            if round <= last.round {
                return Err(Error::InvalidParam(format!(
                    "round {round} not after {} for learner {learner} under head {head}",
                    last.round
                )));
            }
        }
        // Keep entries ordered by round.
        let pos = entries.partition_point(|e| e.round <= round);
        entries.insert(pos, HistoryEntry { round, head, theta });
        Ok(())
    }

    pub fn history(&self, learner: LearnerId) -> &[HistoryEntry] {
        self.history.get(&learner).map_or(&[], Vec::as_slice)
    }

    pub fn learners(&self) -> impl Iterator<Item = LearnerId> + '_ {
        self.history.keys().copied()
    }

    /// Entries paired with their decay weight λ^k, most recent first (k = 1).
    fn weighted(&self, learner: LearnerId) -> impl Iterator<Item = (f64, &HistoryEntry)> {
        let lambda = self.lambda;
        self.history(learner).iter().rev().scan(1.0, move |w, e| {
            *w *= lambda;
            Some((*w, e))
        })
    }

    /// `Σ_k λ^k ϑ^k` over every head.
    pub fn global_rep(&self, learner: LearnerId) -> f64 {
        self.weighted(learner).map(|(w, e)| w * e.theta).sum()
    }

    /// `Σ_k λ^k (ϑ^k if the head matches, else S(head, other) ϑ^k)`.
    pub fn task_rep(
        &self,
        learner: LearnerId,
        head: LearnerId,
        similarity: impl Fn(LearnerId, LearnerId) -> f64,
    ) -> f64 {
        self.weighted(learner)
            .map(|(w, e)| {
                let s = if e.head == head { 1.0 } else { similarity(head, e.head) };
                w * s * e.theta
            })
            .sum()
    }

    /// `φ R_global + (1 − φ) R_task`.
    pub fn overall_rep(
        &self,
        learner: LearnerId,
        head: LearnerId,
        similarity: impl Fn(LearnerId, LearnerId) -> f64,
    ) -> f64 {
        self.phi * self.global_rep(learner) + (1.0 - self.phi) * self.task_rep(learner, head, similarity)
    }
}
