//! Per-round metrics, the run summary, and the output files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coalition::FormationTrace;
use crate::error::{Error, Result};
use crate::ledger::Ledger;
use crate::LearnerId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoalitionMetrics {
    pub coalition: usize,
    pub head: LearnerId,
    pub members: Vec<LearnerId>,
    /// Members that trained this round.
    pub participants: Vec<LearnerId>,
    pub accuracy_before: f64,
    pub accuracy_after_personalization: f64,
    pub loss: f64,
    pub round_latency: f64,
    pub u_msp: f64,
    pub i_comp_star: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerStatus {
    Trained,
    /// Sat out the coalition game.
    Parked,
    /// In a coalition but infeasible or unprofitable at the equilibrium.
    Excluded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerMetrics {
    pub learner: LearnerId,
    pub coalition: Option<usize>,
    pub status: LearnerStatus,
    pub honest: bool,
    pub payoff: f64,
    pub reputation: f64,
    pub delta: Option<f64>,
    /// Active-constraint case 1..6; 0 when frequencies are not game-derived.
    pub kkt_case: u8,
    /// Contribution the reputation store received.
    pub theta_reported: Option<f64>,
    pub theta_actual: Option<f64>,
    pub personalized_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub coalitions: Vec<CoalitionMetrics>,
    /// Every active learner, ascending id.
    pub learners: Vec<LearnerMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassiveAccuracy {
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: String,
    pub seed: u64,
    pub rounds: usize,
    /// Mean over active learners of the final personalized test accuracy.
    pub mean_personalized_accuracy: f64,
    /// Same, with the un-personalized coalition model.
    pub mean_accuracy_before: f64,
    /// Mean per-round payoff over active learners (zero when not trained).
    pub mean_payoff: f64,
    pub mean_payoff_honest: Option<f64>,
    pub mean_payoff_dishonest: Option<f64>,
    pub mean_round_latency: f64,
    pub mean_msp_utility: f64,
    pub dishonest: Vec<LearnerId>,
    pub passive: Vec<PassiveAccuracy>,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub rounds: Vec<RoundMetrics>,
    pub summary: Summary,
    pub traces: Vec<FormationTrace>,
    pub ledger: Ledger,
}

/// One row of `metrics.csv`.
#[derive(Serialize)]
struct CsvRow {
    round: u64,
    coalition: usize,
    head: LearnerId,
    members: usize,
    participants: usize,
    accuracy_before: f64,
    accuracy_after_personalization: f64,
    loss: f64,
    round_latency: f64,
    u_msp: f64,
    i_comp_star: f64,
    mean_payoff: f64,
    mean_reputation: f64,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `metrics.csv`: one row per round per coalition.
pub fn metrics_csv(rounds: &[RoundMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rounds {
        for c in &r.coalitions {
            let of_members = |f: fn(&LearnerMetrics) -> f64| {
                mean(r.learners.iter().filter(|l| c.members.contains(&l.learner)).map(f))
            };
            w.serialize(CsvRow {
                round: r.round,
                coalition: c.coalition,
                head: c.head,
                members: c.members.len(),
                participants: c.participants.len(),
                accuracy_before: c.accuracy_before,
                accuracy_after_personalization: c.accuracy_after_personalization,
                loss: c.loss,
                round_latency: c.round_latency,
                u_msp: c.u_msp,
                i_comp_star: c.i_comp_star,
                mean_payoff: of_members(|l| l.payoff),
                mean_reputation: of_members(|l| l.reputation),
            })
            .map_err(|e| Error::InvalidParam(format!("metrics row: {e}")))?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::InvalidParam(format!("metrics buffer: {e}")))
}

impl ExperimentOutput {
    /// Writes `metrics.csv`, `summary.json`, `partition_trace.jsonl` and `ledger.bin`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        put("metrics.csv", &metrics_csv(&self.rounds)?)?;
        put("summary.json", serde_json::to_string_pretty(&self.summary)?.as_bytes())?;
        let mut trace = Vec::new();
        for t in &self.traces {
            writeln!(trace, "{}", t.to_json_line()?).expect("writing to a Vec");
        }
        put("partition_trace.jsonl", &trace)?;
        self.ledger.save(&dir.join("ledger.bin"))
    }
}

pub(crate) fn summarize(
    strategy: &str,
    seed: u64,
    rounds: &[RoundMetrics],
    dishonest: Vec<LearnerId>,
    passive: Vec<PassiveAccuracy>,
    final_accuracy: (f64, f64),
) -> Summary {
    let payoffs = |honest: Option<bool>| {
        let vals: Vec<f64> = rounds
            .iter()
            .flat_map(|r| &r.learners)
            .filter(|l| honest.is_none_or(|h| l.honest == h))
            .map(|l| l.payoff)
            .collect();
        (!vals.is_empty()).then(|| mean(vals))
    };
    let coalitions = || rounds.iter().flat_map(|r| &r.coalitions);
    Summary {
        strategy: strategy.to_string(),
        seed,
        rounds: rounds.len(),
        mean_personalized_accuracy: final_accuracy.1,
        mean_accuracy_before: final_accuracy.0,
        mean_payoff: payoffs(None).unwrap_or(0.0),
        mean_payoff_honest: payoffs(Some(true)),
        mean_payoff_dishonest: payoffs(Some(false)),
        mean_round_latency: mean(
            coalitions()
                .filter(|c| !c.participants.is_empty())
                .map(|c| c.round_latency),
        ),
        mean_msp_utility: mean(coalitions().map(|c| c.u_msp)),
        dishonest,
        passive,
    }
}
