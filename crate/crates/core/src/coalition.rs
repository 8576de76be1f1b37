//! Embedding similarity, the learner utility, head selection and the hedonic
//! coalition-formation game.
//!
//! Heads are pinned to their coalitions. Every other learner repeatedly takes
//! its best strictly improving unilateral move (another coalition, or parking
//! for the round at utility zero) until no such move exists. Each learner
//! keeps a history of configurations it has left and skips them while the
//! round's scan continues; once no move is left, a full unpruned stability
//! check either confirms the partition or clears the histories and resumes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::costmodel::DeviceCost;
use crate::error::{Error, Result};
use crate::reputation::{rep_utility, RepParams};
use crate::stackelberg::{follower_best_response, CoalitionGame, Follower};
use crate::LearnerId;

/// Cosine similarity; zero when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Static description of a learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmlProfile {
    pub id: LearnerId,
    /// Training samples held (size of the learner's shard).
    pub data_size: usize,
    pub t_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub cost: DeviceCost,
    pub honest: bool,
    pub active: bool,
}

impl MmlProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_min > 0.0 && self.delta_min < self.delta_max) || !(self.t_max > 0.0) {
            return Err(Error::InvalidParam(format!(
                "learner {}: bad frequency range or deadline",
                self.id
            )));
        }
        self.cost.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionState {
    /// Member ids per coalition, ascending.
    pub coalitions: Vec<Vec<LearnerId>>,
    pub heads: Vec<LearnerId>,
    /// Learners sitting out this round.
    pub parked: Vec<LearnerId>,
    pub round: u64,
}

impl PartitionState {
    pub fn new(mut coalitions: Vec<Vec<LearnerId>>, heads: Vec<LearnerId>, round: u64) -> Result<Self> {
        for c in &mut coalitions {
            c.sort_unstable();
        }
        let state = Self {
            coalitions,
            heads,
            parked: Vec::new(),
            round,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn num_coalitions(&self) -> usize {
        self.coalitions.len()
    }

    /// Coalition index of `learner`, `None` when parked or unknown.
    pub fn coalition_of(&self, learner: LearnerId) -> Option<usize> {
        self.coalitions.iter().position(|c| c.binary_search(&learner).is_ok())
    }

    /// Every learner placed in a coalition or parked, ascending.
    pub fn learners(&self) -> Vec<LearnerId> {
        let mut all: Vec<LearnerId> = self.coalitions.iter().flatten().chain(&self.parked).copied().collect();
        all.sort_unstable();
        all
    }

    /// Disjointness and head membership.
    pub fn validate(&self) -> Result<()> {
        if self.heads.len() != self.coalitions.len() {
            return Err(Error::InvalidParam(format!(
                "{} heads for {} coalitions",
                self.heads.len(),
                self.coalitions.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for &l in self.coalitions.iter().flatten().chain(&self.parked) {
            if !seen.insert(l) {
                return Err(Error::InvalidParam(format!("learner {l} placed twice")));
            }
        }
        for (j, (c, h)) in self.coalitions.iter().zip(&self.heads).enumerate() {
            if c.binary_search(h).is_err() {
                return Err(Error::InvalidParam(format!("head {h} not in coalition {j}")));
            }
        }
        Ok(())
    }

    fn remove(&mut self, learner: LearnerId, from: Option<usize>) {
        let list = match from {
            Some(j) => &mut self.coalitions[j],
            None => &mut self.parked,
        };
        if let Ok(pos) = list.binary_search(&learner) {
            list.remove(pos);
        }
    }

    fn insert(&mut self, learner: LearnerId, to: Option<usize>) {
        let list = match to {
            Some(j) => &mut self.coalitions[j],
            None => &mut self.parked,
        };
        if let Err(pos) = list.binary_search(&learner) {
            list.insert(pos, learner);
        }
    }
}

/// Inputs of the learner utility.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityInputs {
    pub similarity: f64,
    pub delta: f64,
    /// Coalition-wide minimum and maximum frequency bounds.
    pub delta_lo: f64,
    pub delta_hi: f64,
    pub data_size: usize,
    pub coalition_data_total: usize,
    /// Sum of `H(R)` over coalition members.
    pub rep_utility_sum: f64,
    pub coalition_size: usize,
    pub i_comp: f64,
    pub i_rep: f64,
    pub comp_energy: f64,
    pub comm_energy: f64,
}

/// Normalized position of `delta` in `[lo, hi]`; 1 when the range is degenerate.
pub fn frequency_share(delta: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (delta - lo) / (hi - lo)
    } else {
        1.0
    }
}

/// `(S + freq-share · data-share) I_comp + mean(H) I_rep − energies`.
pub fn mml_utility(inp: &UtilityInputs) -> f64 {
    let data_share = if inp.coalition_data_total == 0 {
        0.0
    } else {
        inp.data_size as f64 / inp.coalition_data_total as f64
    };
    let mean_h = if inp.coalition_size == 0 {
        0.0
    } else {
        inp.rep_utility_sum / inp.coalition_size as f64
    };
    let share = frequency_share(inp.delta, inp.delta_lo, inp.delta_hi);
    (inp.similarity + share * data_share) * inp.i_comp + mean_h * inp.i_rep - inp.comp_energy - inp.comm_energy
}

/// Picks per coalition the member maximizing
/// `R_global · (1 − (T_max − T̲)/(T̄ − T̲))`; ties go to the lowest id.
pub fn select_heads(
    partition: &PartitionState,
    global_rep: impl Fn(LearnerId) -> f64,
    t_max: impl Fn(LearnerId) -> f64,
) -> Result<Vec<LearnerId>> {
    partition
        .coalitions
        .iter()
        .map(|members| {
            let (lo, hi) = members
                .iter()
                .map(|&m| t_max(m))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
            let score = |m: LearnerId| {
                let factor = if hi > lo {
                    1.0 - (t_max(m) - lo) / (hi - lo)
                } else {
                    1.0
                };
                global_rep(m) * factor
            };
            let mut best: Option<(LearnerId, f64)> = None;
            let mut sorted = members.clone();
            sorted.sort_unstable();
            for m in sorted {
                let s = score(m);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((m, s));
                }
            }
            best.map(|(m, _)| m).ok_or(Error::EmptyCoalition)
        })
        .collect()
}

/// Utility a learner gets from a coalition.
pub trait CoalitionUtility {
    /// Utility of `learner` in coalition `coalition` whose full member list,
    /// including the learner, is `members`. `None` when the learner cannot
    /// take part (deadline unreachable).
    fn utility(&self, learner: LearnerId, coalition: usize, members: &[LearnerId]) -> Option<f64>;
}

impl<F> CoalitionUtility for F
where
    F: Fn(LearnerId, usize, &[LearnerId]) -> Option<f64>,
{
    fn utility(&self, learner: LearnerId, coalition: usize, members: &[LearnerId]) -> Option<f64> {
        self(learner, coalition, members)
    }
}

/// The game-theoretic utility: each learner at its best-response frequency
/// within the candidate coalition.
#[derive(Clone, Debug)]
pub struct UtilityModel<'a> {
    /// Indexed by learner id.
    pub profiles: &'a [MmlProfile],
    /// `similarity[j][i]`: similarity of learner `i` to the head of coalition `j`.
    pub similarity: Vec<Vec<f64>>,
    /// `reputation[j][i]`: overall reputation of learner `i` w.r.t. head `j`.
    pub reputation: Vec<Vec<f64>>,
    /// Competition incentive per coalition.
    pub incentives: Vec<f64>,
    /// Deadline per coalition.
    pub deadlines: Vec<f64>,
    pub i_rep: f64,
    pub rep_params: RepParams,
    pub tau: usize,
    pub batch: usize,
}

impl UtilityModel<'_> {
    /// Stackelberg game of coalition `j` with the given members.
    pub fn game(&self, j: usize, members: &[LearnerId]) -> CoalitionGame {
        let r_bar = members
            .iter()
            .map(|&m| self.reputation[j][m])
            .fold(f64::NEG_INFINITY, f64::max);
        let followers = members
            .iter()
            .map(|&m| {
                let p = &self.profiles[m];
                Follower {
                    id: m,
                    similarity: self.similarity[j][m],
                    data_size: p.data_size,
                    rep_utility: rep_utility(self.reputation[j][m], r_bar, &self.rep_params),
                    cost: p.cost,
                    tau: self.tau,
                    batch: self.batch,
                    delta_min: p.delta_min,
                    delta_max: p.delta_max,
                }
            })
            .collect();
        CoalitionGame {
            followers,
            deadline: self.deadlines[j],
            i_rep: self.i_rep,
        }
    }
}

impl CoalitionUtility for UtilityModel<'_> {
    fn utility(&self, learner: LearnerId, coalition: usize, members: &[LearnerId]) -> Option<f64> {
        let game = self.game(coalition, members);
        let idx = members.iter().position(|&m| m == learner)?;
        follower_best_response(&game, idx, self.incentives[coalition])
            .ok()
            .map(|br| br.utility)
    }
}

/// Strict improvement with a relative tolerance.
pub fn improves(new: f64, old: f64) -> bool {
    new > old + 1e-12 * (1.0 + old.abs())
}

/// A unilateral move; `None` denotes parking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Switch {
    pub learner: LearnerId,
    pub from: Option<usize>,
    pub to: Option<usize>,
    pub gain: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FormationTrace {
    pub round: u64,
    pub switches: Vec<Switch>,
    pub final_partition: PartitionState,
    /// False when the dynamics provably cycle; the partition is then the
    /// point where every learner's history forbade further moves.
    pub stable: bool,
}

impl FormationTrace {
    /// One JSON line with switches as `[learner, from, to, gain]` tuples.
    pub fn to_json_line(&self) -> Result<String> {
        let switches: Vec<(LearnerId, Option<usize>, Option<usize>, f64)> = self
            .switches
            .iter()
            .map(|s| (s.learner, s.from, s.to, s.gain))
            .collect();
        Ok(serde_json::to_string(&serde_json::json!({
            "round": self.round,
            "switches": switches,
            "final_partition": self.final_partition,
            "stable": self.stable,
        }))?)
    }
}

fn with_member(members: &[LearnerId], learner: LearnerId) -> Vec<LearnerId> {
    let mut out = members.to_vec();
    if let Err(pos) = out.binary_search(&learner) {
        out.insert(pos, learner);
    }
    out
}

/// Current utility of `learner` where it sits; parked learners get zero.
fn current_utility(state: &PartitionState, eval: &impl CoalitionUtility, learner: LearnerId) -> f64 {
    match state.coalition_of(learner) {
        Some(j) => eval
            .utility(learner, j, &state.coalitions[j])
            .unwrap_or(f64::NEG_INFINITY),
        None => 0.0,
    }
}

/// Best strictly improving move for `learner`, skipping configurations in
/// `visited`. Ties go to the lowest coalition index, then to parking.
fn best_move(
    state: &PartitionState,
    eval: &impl CoalitionUtility,
    learner: LearnerId,
    visited: Option<&BTreeSet<(usize, Vec<LearnerId>)>>,
) -> Option<(Option<usize>, f64, f64)> {
    let from = state.coalition_of(learner);
    let stay = current_utility(state, eval, learner);
    let mut best: Option<(Option<usize>, f64)> = None;
    for (j, members) in state.coalitions.iter().enumerate() {
        if Some(j) == from {
            continue;
        }
        let candidate = with_member(members, learner);
        if visited.is_some_and(|v| v.contains(&(j, candidate.clone()))) {
            continue;
        }
        if let Some(u) = eval.utility(learner, j, &candidate) {
            if u >= 0.0 && improves(u, stay) && best.is_none_or(|(_, b)| improves(u, b)) {
                best = Some((Some(j), u));
            }
        }
    }
    if from.is_some() && improves(0.0, stay) && best.is_none_or(|(_, b)| improves(0.0, b)) {
        best = Some((None, 0.0));
    }
    best.map(|(to, u)| (to, u, stay))
}

/// A profitable unilateral deviation, or `None` when the partition is
/// Nash-stable. Heads never deviate.
pub fn check_nash(state: &PartitionState, eval: &impl CoalitionUtility) -> Option<Switch> {
    state
        .learners()
        .into_iter()
        .filter(|l| !state.heads.contains(l))
        .find_map(|l| {
            best_move(state, eval, l, None).map(|(to, u, stay)| Switch {
                learner: l,
                from: state.coalition_of(l),
                to,
                gain: u - stay,
            })
        })
}

/// Runs switch dynamics from `prev` (whose heads must already be set) until
/// the partition is Nash-stable.
pub fn form_coalitions(
    prev: &PartitionState,
    eval: &impl CoalitionUtility,
    max_switches: usize,
) -> Result<FormationTrace> {
    prev.validate()?;
    if prev.coalitions.is_empty() {
        return Err(Error::InvalidParam("at least one coalition is required".into()));
    }
    let mut state = prev.clone();
    let movers: Vec<LearnerId> = state
        .learners()
        .into_iter()
        .filter(|l| !state.heads.contains(l))
        .collect();
    let mut history: Vec<BTreeSet<(usize, Vec<LearnerId>)>> = vec![BTreeSet::new(); movers.len()];
    let mut switches = Vec::new();
    // Partitions at which histories were cleared. With empty histories the
    // dynamics are a function of the partition alone, so a repeat is a cycle.
    let mut cleared_at: BTreeSet<Vec<Vec<LearnerId>>> = BTreeSet::new();
    let mut stable = true;

    loop {
        let mut moved = false;
        for (k, &learner) in movers.iter().enumerate() {
            let Some((to, u, stay)) = best_move(&state, eval, learner, Some(&history[k])) else {
                continue;
            };
            let from = state.coalition_of(learner);
            if let Some(j) = from {
                history[k].insert((j, state.coalitions[j].clone()));
            }
            state.remove(learner, from);
            state.insert(learner, to);
            debug_assert!(state.validate().is_ok());
            debug_assert!(improves(u, stay));
            switches.push(Switch {
                learner,
                from,
                to,
                gain: u - stay,
            });
            if switches.len() > max_switches {
                return Err(Error::NonConvergence(max_switches));
            }
            moved = true;
        }
        if !moved {
            if check_nash(&state, eval).is_none() {
                break;
            }
            let mut key = state.coalitions.clone();
            key.push(state.parked.clone());
            if !cleared_at.insert(key) {
                log::debug!("switch dynamics cycle; keeping the history-terminated partition");
                stable = false;
                break;
            }
            log::debug!(
                "history pruning stalled on an unstable partition after {} switches; clearing histories",
                switches.len()
            );
            history.iter_mut().for_each(BTreeSet::clear);
        }
    }
    Ok(FormationTrace {
        round: state.round,
        switches,
        final_partition: state,
        stable,
    })
}

/// Assigns each non-head learner to the coalition whose head it is most
/// similar to (`similarity[j][i]`), ties to the lowest index.
pub fn assign_by_similarity(
    learners: &[LearnerId],
    heads: &[LearnerId],
    similarity: &[Vec<f64>],
    round: u64,
) -> Result<PartitionState> {
    let mut coalitions: Vec<Vec<LearnerId>> = heads.iter().map(|&h| vec![h]).collect();
    for &l in learners {
        if heads.contains(&l) {
            continue;
        }
        let j = (0..heads.len())
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if similarity[b][l] >= similarity[j][l] => Some(b),
                _ => Some(j),
            })
            .ok_or(Error::EmptyCoalition)?;
        coalitions[j].push(l);
    }
    PartitionState::new(coalitions, heads.to_vec(), round)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimMismatch(1, 2))
        ));
    }

    fn inputs() -> UtilityInputs {
        UtilityInputs {
            similarity: 0.0,
            delta: 1e7,
            delta_lo: 1e7,
            delta_hi: 1e9,
            data_size: 10,
            coalition_data_total: 40,
            rep_utility_sum: 0.0,
            coalition_size: 4,
            i_comp: 15.0,
            i_rep: 5.0,
            comp_energy: 0.3,
            comm_energy: 0.2,
        }
    }

    #[test]
    fn utility_hand_values() {
        assert!((mml_utility(&inputs()) + 0.5).abs() < 1e-15);
        let solo = UtilityInputs {
            similarity: 1.0,
            delta: 1e9,
            data_size: 40,
            rep_utility_sum: 1.0,
            coalition_size: 1,
            comp_energy: 0.0,
            comm_energy: 0.0,
            ..inputs()
        };
        assert!((mml_utility(&solo) - 35.0).abs() < 1e-12);
        let mut prev = f64::NEG_INFINITY;
        for s in [-1.0, -0.3, 0.0, 0.4, 1.0] {
            let u = mml_utility(&UtilityInputs {
                similarity: s,
                ..inputs()
            });
            assert!(u > prev);
            prev = u;
        }
        // Degenerate range counts the full data share.
        let flat = UtilityInputs {
            delta_lo: 5e8,
            delta_hi: 5e8,
            delta: 5e8,
            comp_energy: 0.0,
            comm_energy: 0.0,
            ..inputs()
        };
        assert!((mml_utility(&flat) - 0.25 * 15.0).abs() < 1e-12);
    }

    #[test]
    fn head_selection() {
        let single = PartitionState::new(vec![vec![4]], vec![4], 0).unwrap();
        assert_eq!(select_heads(&single, |_| 0.0, |_| 10.0).unwrap(), vec![4]);

        let pair = PartitionState::new(vec![vec![0, 1]], vec![0], 0).unwrap();
        let t = |l: LearnerId| if l == 0 { 20.0 } else { 11.0 };
        assert_eq!(select_heads(&pair, |_| 1.0, t).unwrap(), vec![1]);

        let same = PartitionState::new(vec![vec![5, 2, 7]], vec![2], 0).unwrap();
        assert_eq!(select_heads(&same, |_| 1.0, |_| 12.0).unwrap(), vec![2]);

        let empty = PartitionState {
            coalitions: vec![vec![]],
            heads: vec![],
            parked: vec![],
            round: 0,
        };
        assert!(matches!(
            select_heads(&empty, |_| 1.0, |_| 1.0),
            Err(Error::EmptyCoalition)
        ));
    }

    #[test]
    fn grand_coalition_is_stable() {
        let state = PartitionState::new(vec![vec![0, 1, 2, 3]], vec![0], 0).unwrap();
        let eval = |_: LearnerId, _: usize, _: &[LearnerId]| Some(1.0);
        let trace = form_coalitions(&state, &eval, 100).unwrap();
        assert!(trace.switches.is_empty());
        assert_eq!(trace.final_partition, state);
        assert!(check_nash(&trace.final_partition, &eval).is_none());

        let lone = PartitionState::new(vec![vec![0]], vec![0], 0).unwrap();
        assert!(check_nash(&lone, &eval).is_none());
    }

    #[test]
    fn one_learner_prefers_other_coalition() {
        // Heads 0 (A) and 1 (B); learner 2 starts in A but values B more.
        let eval = |l: LearnerId, j: usize, _: &[LearnerId]| Some(if l == 2 && j == 1 { 3.0 } else { 1.0 });
        let start = PartitionState::new(vec![vec![0, 2], vec![1]], vec![0, 1], 0).unwrap();
        let trace = form_coalitions(&start, &eval, 100).unwrap();
        assert_eq!(trace.switches.len(), 1);
        assert_eq!(trace.switches[0].learner, 2);
        assert_eq!(trace.switches[0].to, Some(1));
        assert_eq!(trace.final_partition.coalitions, vec![vec![0], vec![1, 2]]);
        let line = trace.to_json_line().unwrap();
        assert!(line.contains("\"switches\":[[2,0,1,2.0]]"), "{line}");
    }

    #[test]
    fn negative_everywhere_parks() {
        let eval = |l: LearnerId, _: usize, _: &[LearnerId]| Some(if l == 2 { -1.0 } else { 1.0 });
        let start = PartitionState::new(vec![vec![0, 2], vec![1]], vec![0, 1], 0).unwrap();
        let trace = form_coalitions(&start, &eval, 100).unwrap();
        assert_eq!(trace.final_partition.parked, vec![2]);
        assert_eq!(trace.switches[0].to, None);
    }

    #[test]
    fn moved_learner_is_reported() {
        let eval = |l: LearnerId, j: usize, _: &[LearnerId]| Some(if l == 3 && j == 0 { 2.0 } else { 1.0 });
        let stable = PartitionState::new(vec![vec![0, 3], vec![1], vec![2]], vec![0, 1, 2], 0).unwrap();
        assert!(check_nash(&stable, &eval).is_none());
        let moved = PartitionState::new(vec![vec![0], vec![1], vec![2, 3]], vec![0, 1, 2], 0).unwrap();
        let w = check_nash(&moved, &eval).unwrap();
        assert_eq!((w.learner, w.to), (3, Some(0)));
    }

    #[test]
    fn similarity_assignment() {
        let sim = vec![vec![1.0, 0.2, 0.9, 0.1], vec![0.0, 1.0, 0.3, 0.5]];
        let p = assign_by_similarity(&[0, 1, 2, 3], &[0, 1], &sim, 0).unwrap();
        assert_eq!(p.coalitions, vec![vec![0, 2], vec![1, 3]]);
    }
}
