//! Single-leader, multi-follower incentive game inside one coalition.
//!
//! Followers pick a CPU frequency maximizing their utility subject to their
//! frequency bounds and the coalition deadline; the candidate points are the
//! KKT cases (interior stationary point, deadline-binding frequency, and the
//! two bounds). The leader picks the competition incentive that maximizes its
//! own utility with followers at best response.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coalition::{frequency_share, mml_utility, UtilityInputs};
use crate::costmodel::{comm_energy, comm_time, comp_energy, comp_time, DeviceCost};
use crate::error::{Error, Result};
use crate::LearnerId;

/// Floor applied to a member's completion-time slack inside the leader's log.
pub const SLACK_FLOOR: f64 = 1e-9;
const BISECTION_TOL: f64 = 1e-8;
const BISECTION_MAX_ITER: usize = 200;
const LEADER_GRID: usize = 64;
/// Relative tolerance for treating two frequencies as equal.
const FREQ_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderParams {
    /// Weight of completion-time gains in the leader's utility.
    pub eta: f64,
    pub i_rep: f64,
    pub i_comp_min: f64,
    pub i_comp_max: f64,
}

impl LeaderParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !(self.i_comp_min < self.i_comp_max) || !(self.i_comp_min >= 0.0) {
            return Err(Error::InvalidParam(format!("bad leader parameters {self:?}")));
        }
        Ok(())
    }
}

/// One follower's view of the coalition game.
#[derive(Clone, Debug, PartialEq)]
pub struct Follower {
    pub id: LearnerId,
    /// Embedding similarity to the coalition head.
    pub similarity: f64,
    pub data_size: usize,
    /// Reputation utility `H(R)` within this coalition.
    pub rep_utility: f64,
    pub cost: DeviceCost,
    pub tau: usize,
    pub batch: usize,
    pub delta_min: f64,
    pub delta_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoalitionGame {
    pub followers: Vec<Follower>,
    /// Completion deadline `T^j_max` set by the head.
    pub deadline: f64,
    pub i_rep: f64,
}

/// Active-constraint pattern of a follower's optimum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KktCase {
    /// No constraint active.
    Interior = 1,
    /// Deadline active.
    Deadline = 2,
    /// Upper frequency bound active.
    UpperBound = 3,
    /// Lower frequency bound active.
    LowerBound = 4,
    /// Deadline and upper bound both active.
    DeadlineUpper = 5,
    /// Deadline and lower bound both active.
    DeadlineLower = 6,
}

impl KktCase {
    pub fn id(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestResponse {
    pub delta: f64,
    pub case: KktCase,
    pub utility: f64,
}

/// KKT multipliers for (deadline, upper bound, lower bound) at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Multipliers {
    pub deadline: f64,
    pub upper: f64,
    pub lower: f64,
}

impl CoalitionGame {
    pub fn is_empty(&self) -> bool {
        self.followers.is_empty()
    }

    /// Coalition-wide `(min δ_min, max δ_max)`.
    pub fn delta_range(&self) -> (f64, f64) {
        self.followers
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
                (lo.min(f.delta_min), hi.max(f.delta_max))
            })
    }

    pub fn total_data(&self) -> usize {
        self.followers.iter().map(|f| f.data_size).sum()
    }

    pub fn rep_utility_sum(&self) -> f64 {
        self.followers.iter().map(|f| f.rep_utility).sum()
    }

    pub fn avg_rep_utility(&self) -> f64 {
        if self.followers.is_empty() {
            0.0
        } else {
            self.rep_utility_sum() / self.followers.len() as f64
        }
    }

    pub fn data_share(&self, idx: usize) -> f64 {
        let total = self.total_data();
        if total == 0 {
            0.0
        } else {
            self.followers[idx].data_size as f64 / total as f64
        }
    }

    /// Utility inputs for follower `idx` at frequency `delta`.
    pub fn utility_inputs(&self, idx: usize, delta: f64, i_comp: f64) -> Result<UtilityInputs> {
        let f = &self.followers[idx];
        let (lo, hi) = self.delta_range();
        Ok(UtilityInputs {
            similarity: f.similarity,
            delta,
            delta_lo: lo,
            delta_hi: hi,
            data_size: f.data_size,
            coalition_data_total: self.total_data(),
            rep_utility_sum: self.rep_utility_sum(),
            coalition_size: self.followers.len(),
            i_comp,
            i_rep: self.i_rep,
            comp_energy: comp_energy(&f.cost, f.tau, f.batch, delta)?,
            comm_energy: comm_energy(&f.cost, delta),
        })
    }

    pub fn follower_utility(&self, idx: usize, delta: f64, i_comp: f64) -> Result<f64> {
        Ok(mml_utility(&self.utility_inputs(idx, delta, i_comp)?))
    }

    /// `τ c |D| / (T_max − T_comm)`: the slowest frequency meeting the deadline.
    pub fn deadline_frequency(&self, idx: usize) -> Option<f64> {
        let f = &self.followers[idx];
        let room = self.deadline - comm_time(&f.cost);
        (room > 0.0).then(|| f.cost.round_cycles(f.tau, f.batch) / room)
    }

    /// Frequencies satisfying every follower constraint except positivity.
    pub fn feasible_interval(&self, idx: usize) -> Option<(f64, f64)> {
        let f = &self.followers[idx];
        let dl = self.deadline_frequency(idx)?;
        let lo = f.delta_min.max(dl);
        (lo <= f.delta_max * (1.0 + FREQ_TOL)).then(|| (lo.min(f.delta_max), f.delta_max))
    }

    /// `dU/dδ` of follower `idx`, without multipliers.
    pub fn utility_slope(&self, idx: usize, delta: f64, i_comp: f64) -> f64 {
        let f = &self.followers[idx];
        let (lo, hi) = self.delta_range();
        let linear = if hi > lo {
            self.data_share(idx) * i_comp / (hi - lo)
        } else {
            0.0
        };
        let k = f.cost.energy_coefficient(f.tau, f.batch);
        let loss = 1.0 - f.cost.eps_loss;
        linear - 2.0 * k * delta - 2.0 * f.cost.comm_a * delta / (loss * loss) - f.cost.comm_b / loss
    }

    /// Stationary point of the follower utility, if the utility is strictly concave.
    pub fn interior_frequency(&self, idx: usize, i_comp: f64) -> Option<f64> {
        let f = &self.followers[idx];
        let k = f.cost.energy_coefficient(f.tau, f.batch);
        let loss = 1.0 - f.cost.eps_loss;
        let curvature = 2.0 * k + 2.0 * f.cost.comm_a / (loss * loss);
        (curvature > 0.0).then(|| {
            // slope at δ = 0 over curvature
            self.utility_slope(idx, 0.0, i_comp) / curvature
        })
    }

    /// Completion time `T_comp + T_comm` at frequency `delta`.
    pub fn completion_time(&self, idx: usize, delta: f64) -> Result<f64> {
        let f = &self.followers[idx];
        Ok(comp_time(&f.cost, f.tau, f.batch, delta)? + comm_time(&f.cost))
    }

    /// Multipliers solving stationarity for the constraints active in `case`.
    pub fn multipliers(&self, idx: usize, delta: f64, i_comp: f64, case: KktCase) -> Multipliers {
        let f = &self.followers[idx];
        let slope = self.utility_slope(idx, delta, i_comp);
        // Stationarity of L = U − λ1 (T_comp + T_comm − T_max) − λ2 (δ − δ̄) − λ3 (δ̲ − δ):
        // U' + λ1 τc|D|/δ² − λ2 + λ3 = 0.
        let deadline_grad = f.cost.round_cycles(f.tau, f.batch) / (delta * delta);
        let zero = Multipliers {
            deadline: 0.0,
            upper: 0.0,
            lower: 0.0,
        };
        match case {
            KktCase::Interior => zero,
            KktCase::Deadline => Multipliers {
                deadline: -slope / deadline_grad,
                ..zero
            },
            KktCase::UpperBound => Multipliers { upper: slope, ..zero },
            KktCase::LowerBound => Multipliers { lower: -slope, ..zero },
            // Deadline and upper bound pull in opposite directions; any slope
            // sign is absorbed by one of them.
            KktCase::DeadlineUpper => {
                if slope >= 0.0 {
                    Multipliers { upper: slope, ..zero }
                } else {
                    Multipliers {
                        deadline: -slope / deadline_grad,
                        ..zero
                    }
                }
            }
            // Deadline and lower bound both push δ up; only a non-positive
            // slope can be balanced, split here onto the lower bound.
            KktCase::DeadlineLower => Multipliers { lower: -slope, ..zero },
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= FREQ_TOL * a.abs().max(b.abs())
}

/// Follower best response at incentive `i_comp`. Every KKT candidate is
/// checked for primal and dual feasibility and the feasible candidate with
/// the highest utility wins.
pub fn follower_best_response(game: &CoalitionGame, idx: usize, i_comp: f64) -> Result<BestResponse> {
    let f = &game.followers[idx];
    let deadline_freq = game
        .deadline_frequency(idx)
        .ok_or_else(|| Error::Infeasible(format!("learner {}: upload alone exceeds the deadline", f.id)))?;
    let (lo, hi) = game
        .feasible_interval(idx)
        .ok_or_else(|| Error::Infeasible(format!("learner {}: deadline needs {deadline_freq:.3e} Hz", f.id)))?;
    let tol = |x: f64| x * FREQ_TOL;
    let inside = |d: f64| d >= lo - tol(lo) && d <= hi + tol(hi);

    let mut candidates: Vec<(f64, KktCase)> = Vec::with_capacity(4);
    if let Some(d) = game.interior_frequency(idx, i_comp) {
        if d > lo + tol(lo) && d < hi - tol(hi) {
            candidates.push((d, KktCase::Interior));
        }
    }
    if inside(deadline_freq) {
        let case = if close(deadline_freq, f.delta_max) {
            KktCase::DeadlineUpper
        } else if close(deadline_freq, f.delta_min) {
            KktCase::DeadlineLower
        } else {
            KktCase::Deadline
        };
        candidates.push((deadline_freq.clamp(lo, hi), case));
    }
    if deadline_freq < f.delta_max && !close(deadline_freq, f.delta_max) {
        candidates.push((f.delta_max, KktCase::UpperBound));
    }
    if deadline_freq < f.delta_min && !close(deadline_freq, f.delta_min) {
        candidates.push((f.delta_min, KktCase::LowerBound));
    }

    let mut best: Option<BestResponse> = None;
    let mut fallback: Option<BestResponse> = None;
    for (delta, case) in candidates {
        let utility = game.follower_utility(idx, delta, i_comp)?;
        let br = BestResponse { delta, case, utility };
        let m = game.multipliers(idx, delta, i_comp, case);
        let dual_ok = [m.deadline, m.upper, m.lower]
            .iter()
            .all(|&x| x >= -1e-15 * (1.0 + x.abs()));
        let slot = if dual_ok { &mut best } else { &mut fallback };
        if slot.is_none_or(|b| utility > b.utility) {
            *slot = Some(br);
        }
    }
    best.or(fallback)
        .ok_or_else(|| Error::Infeasible(format!("learner {}: no feasible frequency", f.id)))
}

/// True when `br` satisfies primal feasibility, dual feasibility and
/// complementary slackness for its reported case.
pub fn satisfies_kkt(game: &CoalitionGame, idx: usize, i_comp: f64, br: &BestResponse) -> bool {
    let f = &game.followers[idx];
    let Ok(completion) = game.completion_time(idx, br.delta) else {
        return false;
    };
    let time_tol = 1e-9 * game.deadline.abs().max(1.0);
    let primal = br.delta >= f.delta_min * (1.0 - FREQ_TOL)
        && br.delta <= f.delta_max * (1.0 + FREQ_TOL)
        && completion <= game.deadline + time_tol;
    let deadline_active = (completion - game.deadline).abs() <= time_tol;
    let upper_active = close(br.delta, f.delta_max);
    let lower_active = close(br.delta, f.delta_min);
    let activity = match br.case {
        KktCase::Interior => !deadline_active && !upper_active && !lower_active,
        KktCase::Deadline => deadline_active,
        KktCase::UpperBound => upper_active && !deadline_active,
        KktCase::LowerBound => lower_active && !deadline_active,
        KktCase::DeadlineUpper => deadline_active && upper_active,
        KktCase::DeadlineLower => deadline_active && lower_active,
    };
    let m = game.multipliers(idx, br.delta, i_comp, br.case);
    let slope_scale = game.utility_slope(idx, 0.0, i_comp).abs().max(1e-30);
    let dual = [m.deadline, m.upper, m.lower]
        .iter()
        .all(|&x| x >= -1e-12 * slope_scale);
    let stationary =
        br.case != KktCase::Interior || game.utility_slope(idx, br.delta, i_comp).abs() <= 1e-9 * slope_scale;
    primal && activity && dual && stationary
}

/// Leader utility for fixed follower frequencies `deltas` (one per follower).
pub fn msp_utility(game: &CoalitionGame, eta: f64, i_comp: f64, deltas: &[f64]) -> f64 {
    if game.is_empty() {
        return 0.0;
    }
    let (lo, hi) = game.delta_range();
    let mut gain = 0.0;
    let mut reward = 0.0;
    for (idx, (f, &delta)) in game.followers.iter().zip(deltas).enumerate() {
        let completion = game.completion_time(idx, delta).unwrap_or(f64::INFINITY);
        let slack = (game.deadline - completion).max(SLACK_FLOOR);
        gain += slack.ln() * f.rep_utility;
        reward += f.similarity + frequency_share(delta, lo, hi) * game.data_share(idx);
    }
    eta * gain - reward * i_comp - game.avg_rep_utility() * game.i_rep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub i_comp_star: f64,
    pub deltas: BTreeMap<LearnerId, f64>,
    pub kkt_case: BTreeMap<LearnerId, u8>,
    pub u_msp: f64,
    pub u_mml: BTreeMap<LearnerId, f64>,
    /// Followers that cannot meet the deadline at any allowed frequency.
    pub infeasible: Vec<LearnerId>,
    /// Followers whose equilibrium utility is not positive.
    pub nonpositive: Vec<LearnerId>,
}

/// Splits out followers that cannot meet the deadline.
fn feasible_subgame(game: &CoalitionGame) -> (CoalitionGame, Vec<LearnerId>) {
    let mut infeasible = Vec::new();
    let followers = game
        .followers
        .iter()
        .enumerate()
        .filter_map(|(idx, f)| {
            if game.feasible_interval(idx).is_some() {
                Some(f.clone())
            } else {
                infeasible.push(f.id);
                None
            }
        })
        .collect();
    (
        CoalitionGame {
            followers,
            ..game.clone()
        },
        infeasible,
    )
}

fn responses(game: &CoalitionGame, i_comp: f64) -> Result<Vec<BestResponse>> {
    (0..game.followers.len())
        .map(|idx| follower_best_response(game, idx, i_comp))
        .collect()
}

/// Leader utility with every follower at best response to `i_comp`.
pub fn leader_objective(game: &CoalitionGame, eta: f64, i_comp: f64) -> Result<f64> {
    let deltas: Vec<f64> = responses(game, i_comp)?.iter().map(|b| b.delta).collect();
    Ok(msp_utility(game, eta, i_comp, &deltas))
}

/// Equilibrium bookkeeping for a given incentive.
fn settle(game: &CoalitionGame, eta: f64, i_comp: f64, infeasible: Vec<LearnerId>) -> Result<EquilibriumResult> {
    let brs = responses(game, i_comp)?;
    let deltas: Vec<f64> = brs.iter().map(|b| b.delta).collect();
    let mut result = EquilibriumResult {
        i_comp_star: i_comp,
        deltas: BTreeMap::new(),
        kkt_case: BTreeMap::new(),
        u_msp: msp_utility(game, eta, i_comp, &deltas),
        u_mml: BTreeMap::new(),
        infeasible,
        nonpositive: Vec::new(),
    };
    for (f, br) in game.followers.iter().zip(&brs) {
        result.deltas.insert(f.id, br.delta);
        result.kkt_case.insert(f.id, br.case.id());
        result.u_mml.insert(f.id, br.utility);
        if br.utility <= 0.0 {
            result.nonpositive.push(f.id);
        }
    }
    Ok(result)
}

/// Followers respond to a fixed incentive; the leader does not optimize.
pub fn fixed_incentive_solve(game: &CoalitionGame, eta: f64, i_comp: f64) -> Result<EquilibriumResult> {
    if game.is_empty() {
        return Err(Error::EmptyCoalition);
    }
    let (sub, infeasible) = feasible_subgame(game);
    settle(&sub, eta, i_comp, infeasible)
}

/// Central-difference derivative of the leader objective, one-sided at the
/// interval ends.
fn objective_slope(game: &CoalitionGame, leader: &LeaderParams, i: f64) -> Result<f64> {
    let h = 1e-4 * (1.0 + i.abs());
    let a = (i - h).max(leader.i_comp_min);
    let b = (i + h).min(leader.i_comp_max);
    Ok((leader_objective(game, leader.eta, b)? - leader_objective(game, leader.eta, a)?) / (b - a))
}

/// Bisection for a zero of the objective slope on `[a, b]`, assuming the
/// slope is positive at `a` and negative at `b`.
fn bisect(game: &CoalitionGame, leader: &LeaderParams, mut a: f64, mut b: f64) -> Result<f64> {
    for _ in 0..BISECTION_MAX_ITER {
        if b - a <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (a + b);
        if objective_slope(game, leader, mid)? > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Solves the coalition's leader problem: bisection on the numerically
/// differentiated leader utility, backed by a 64-point grid so a kinked or
/// monotone objective still returns its best point.
pub fn leader_solve(game: &CoalitionGame, leader: &LeaderParams) -> Result<EquilibriumResult> {
    leader.validate()?;
    if game.is_empty() {
        return Err(Error::EmptyCoalition);
    }
    let (sub, infeasible) = feasible_subgame(game);
    if sub.is_empty() {
        return settle(&sub, leader.eta, leader.i_comp_min, infeasible);
    }
    let (lo, hi) = (leader.i_comp_min, leader.i_comp_max);
    let eval = |i: f64| leader_objective(&sub, leader.eta, i);

    let mut candidates = vec![lo, hi];
    let slope_lo = objective_slope(&sub, leader, lo)?;
    let slope_hi = objective_slope(&sub, leader, hi)?;
    if slope_lo > 0.0 && slope_hi < 0.0 {
        candidates.push(bisect(&sub, leader, lo, hi)?);
    }

    let step = (hi - lo) / (LEADER_GRID - 1) as f64;
    let grid: Vec<f64> = (0..LEADER_GRID).map(|k| lo + step * k as f64).collect();
    let values = grid.iter().map(|&i| eval(i)).collect::<Result<Vec<_>>>()?;
    let best_k = (0..grid.len()).fold(0, |b, k| if values[k] > values[b] { k } else { b });
    candidates.push(grid[best_k]);
    let a = grid[best_k.saturating_sub(1)];
    let b = grid[(best_k + 1).min(grid.len() - 1)];
    if b > a && objective_slope(&sub, leader, a)? > 0.0 && objective_slope(&sub, leader, b)? < 0.0 {
        candidates.push(bisect(&sub, leader, a, b)?);
    }

    let mut best = (lo, eval(lo)?);
    for &i in &candidates[1..] {
        let v = eval(i)?;
        if v > best.1 {
            best = (i, v);
        }
    }
    settle(&sub, leader.eta, best.0, infeasible)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn table_follower(id: LearnerId, data_size: usize) -> Follower {
        Follower {
            id,
            similarity: 0.5,
            data_size,
            rep_utility: 0.8,
            cost: DeviceCost {
                rate: 1e7,
                ..DeviceCost::default()
            },
            tau: 10,
            batch: 40,
            delta_min: 1e7,
            delta_max: 1e9,
        }
    }

    fn table_game() -> CoalitionGame {
        CoalitionGame {
            followers: (0..4).map(|i| table_follower(i, 40)).collect(),
            deadline: 15.0,
            i_rep: 5.0,
        }
    }

    #[test]
    fn table_point_interior_exceeds_upper_bound() {
        let game = table_game();
        // s = 0.25, I = 15: δ = s I / (2 ρ τ c |D| ζ (δ̄ − δ̲)) by hand.
        let by_hand = 0.25 * 15.0 / (2.0 * 0.1 * 10.0 * 10.0 * 40.0 * 1e-27 * (1e9 - 1e7));
        let interior = game.interior_frequency(0, 15.0).unwrap();
        assert!((interior - by_hand).abs() / by_hand < 1e-12);
        assert!((interior - 4.7e15).abs() / 4.7e15 < 0.01);
        let br = follower_best_response(&game, 0, 15.0).unwrap();
        assert_eq!(br.case, KktCase::UpperBound);
        assert_eq!(br.delta, 1e9);
        assert!(satisfies_kkt(&game, 0, 15.0, &br));
    }

    #[test]
    fn deadline_exactly_at_upper_bound() {
        let mut game = table_game();
        // τ c |D| / (T − T_comm) = 1e9 with T_comm = 1 s.
        game.deadline = 1.0 + 4000.0 / 1e9;
        let br = follower_best_response(&game, 0, 15.0).unwrap();
        assert_eq!(br.case, KktCase::DeadlineUpper);
        assert!((br.delta - 1e9).abs() < 1.0);
        assert!(satisfies_kkt(&game, 0, 15.0, &br));
    }

    #[test]
    fn deadline_binds_from_below() {
        let mut game = table_game();
        for f in &mut game.followers {
            f.cost.zeta = 1e-20;
        }
        game.deadline = 1.0 + 4000.0 / 5e8;
        // Interior frequency is below the deadline frequency, so the deadline binds.
        assert!(game.interior_frequency(0, 5.0).unwrap() < 5e8);
        let br = follower_best_response(&game, 0, 5.0).unwrap();
        assert_eq!(br.case, KktCase::Deadline);
        assert!((br.delta - 5e8).abs() / 5e8 < 1e-9);
        assert!(satisfies_kkt(&game, 0, 5.0, &br));
    }

    #[test]
    fn unreachable_deadline_is_infeasible() {
        let mut game = table_game();
        game.deadline = 0.5;
        assert!(matches!(
            follower_best_response(&game, 0, 10.0),
            Err(Error::Infeasible(_))
        ));
        game.deadline = 1.0 + 4000.0 / 2e9;
        assert!(matches!(
            follower_best_response(&game, 0, 10.0),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn msp_utility_hand_values() {
        let empty = CoalitionGame {
            followers: vec![],
            deadline: 10.0,
            i_rep: 5.0,
        };
        assert_eq!(msp_utility(&empty, 25.0, 10.0, &[]), 0.0);

        let mut f = table_follower(0, 10);
        f.similarity = 0.0;
        f.rep_utility = 1.0;
        f.cost.model_bits = 0.0;
        f.delta_min = 1e9;
        f.delta_max = 1e9;
        let mut single = CoalitionGame {
            followers: vec![f],
            deadline: 0.0,
            i_rep: 0.0,
        };
        // Degenerate range: frequency share is 1, data share 1; zero I removes the reward.
        single.deadline = std::f64::consts::E + 4000.0 / 1e9;
        let v = msp_utility(&single, 25.0, 0.0, &[1e9]);
        assert!((v - 25.0).abs() < 1e-12);
    }

    #[test]
    fn msp_utility_decreases_in_incentive() {
        let game = table_game();
        let deltas = vec![5e8; 4];
        let mut prev = f64::INFINITY;
        for i in [5.0, 7.5, 10.0, 15.0] {
            let v = msp_utility(&game, 25.0, i, &deltas);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn boundary_followers_push_leader_to_minimum() {
        let game = table_game();
        let leader = LeaderParams {
            eta: 25.0,
            i_rep: 5.0,
            i_comp_min: 5.0,
            i_comp_max: 15.0,
        };
        let eq = leader_solve(&game, &leader).unwrap();
        assert_eq!(eq.i_comp_star, 5.0);
        assert!(eq.kkt_case.values().all(|&c| c == KktCase::UpperBound.id()));
        assert!(eq.nonpositive.is_empty());
    }

    #[test]
    fn empty_coalition() {
        let game = CoalitionGame {
            followers: vec![],
            deadline: 10.0,
            i_rep: 5.0,
        };
        let leader = LeaderParams {
            eta: 25.0,
            i_rep: 5.0,
            i_comp_min: 5.0,
            i_comp_max: 15.0,
        };
        assert!(matches!(leader_solve(&game, &leader), Err(Error::EmptyCoalition)));
    }

    #[test]
    fn infeasible_followers_are_reported() {
        let mut game = table_game();
        game.followers[2].cost.rate = 1e6; // 10 s upload against a 15 s deadline is fine
        game.followers[3].cost.rate = 5e5; // 20 s upload misses it
        let eq = fixed_incentive_solve(&game, 25.0, 15.0).unwrap();
        assert_eq!(eq.infeasible, vec![3]);
        assert_eq!(eq.deltas.len(), 3);
    }
}
