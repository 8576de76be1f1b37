//! Seeded instance generators and brute-force oracles shared by the
//! integration and acceptance suites.

#![allow(dead_code)]

use gfml::coalition::{improves, CoalitionUtility, FormationTrace, MmlProfile, PartitionState, UtilityModel};
use gfml::costmodel::DeviceCost;
use gfml::datasets::Dataset;
use gfml::metalearner::{loss, Architecture, MetaHyper, ModelParams};
use gfml::reputation::RepParams;
use gfml::stackelberg::{CoalitionGame, Follower};
use gfml::LearnerId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 2-feature, 3-class toy set with `n` samples.
pub fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let c = k % 3;
        let angle = c as f64 * 2.0 * std::f64::consts::PI / 3.0;
        features.push(angle.cos() + 0.5 * r.random_range(-1.0..1.0));
        features.push(angle.sin() + 0.5 * r.random_range(-1.0..1.0));
        labels.push(c);
    }
    Dataset::new(features, labels, 2, 3).unwrap()
}

pub fn toy_arch() -> Architecture {
    Architecture::new(2, &[6, 5], 3).unwrap()
}

/// `F(θ) = f(θ − β ∇f(θ))` on one batch, with `∇f` by central differences
/// of `f`, so it shares no gradient code with the library.
pub fn meta_objective(theta: &ModelParams, hyper: &MetaHyper, data: &Dataset, batch: &[usize]) -> f64 {
    let g = fd_gradient(theta, |p| loss(p, data, batch).unwrap(), 1e-6);
    let mut adapted = theta.clone();
    adapted.axpy(-hyper.beta, &g);
    loss(&adapted, data, batch).unwrap()
}

pub fn fd_gradient(theta: &ModelParams, f: impl Fn(&ModelParams) -> f64, h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|k| {
            let mut plus = theta.clone();
            plus.values_mut()[k] += h;
            let mut minus = theta.clone();
            minus.values_mut()[k] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

pub fn random_params(arch: Architecture, seed: u64, scale: f64) -> ModelParams {
    let mut r = rng(seed);
    let values = (0..arch.num_params())
        .map(|_| scale * r.random_range(-1.0..1.0))
        .collect();
    ModelParams::from_values(arch, values).unwrap()
}

pub fn table_cost(rate: f64) -> DeviceCost {
    DeviceCost {
        rate,
        ..DeviceCost::default()
    }
}

/// A follower game with the default parameter ranges. With `stressed`, the capacitance is
/// raised and the deadline drawn near the feasibility edge so that every
/// constraint case can bind.
pub fn follower_game(seed: u64, stressed: bool) -> CoalitionGame {
    let mut r = rng(seed);
    let n = r.random_range(1..=6);
    let followers: Vec<Follower> = (0..n)
        .map(|id| {
            let mut cost = table_cost(r.random_range(5e6..=1e7));
            if stressed {
                cost.zeta = 10f64.powf(r.random_range(-22.0..-18.0));
                cost.cycles_per_sample = 10f64.powf(r.random_range(1.0..6.0));
            }
            Follower {
                id,
                similarity: r.random_range(-1.0..=1.0),
                data_size: r.random_range(10..=300),
                rep_utility: r.random_range(0.0..=1.0),
                cost,
                tau: 10,
                batch: 40,
                delta_min: 1e7,
                delta_max: 1e9,
            }
        })
        .collect();
    let deadline = if stressed {
        // Between the time at full speed and at minimum speed of follower 0.
        let f = &followers[0];
        let cycles = f.cost.round_cycles(f.tau, f.batch);
        let comm = f.cost.model_bits / f.cost.rate;
        comm + cycles / r.random_range(5e6..2e9)
    } else {
        r.random_range(11.0..=20.0)
    };
    CoalitionGame {
        followers,
        deadline,
        i_rep: 5.0,
    }
}

/// A random coalition game over `n` learners and `m` coalitions: profiles,
/// similarities, reputations, incentives and deadlines drawn from the default
/// ranges, with the first `m` learners as heads of a round-robin partition.
pub struct GameInstance {
    pub profiles: Vec<MmlProfile>,
    pub similarity: Vec<Vec<f64>>,
    pub reputation: Vec<Vec<f64>>,
    pub incentives: Vec<f64>,
    pub deadlines: Vec<f64>,
    pub start: PartitionState,
}

impl GameInstance {
    pub fn new(seed: u64, n: usize, m: usize) -> Self {
        let mut r = rng(seed);
        let profiles = (0..n)
            .map(|id| MmlProfile {
                id,
                data_size: r.random_range(20..=200),
                t_max: r.random_range(11.0..=20.0),
                delta_min: 1e7,
                delta_max: 1e9,
                cost: table_cost(r.random_range(5e6..=1e7)),
                honest: true,
                active: true,
            })
            .collect();
        let similarity = (0..m)
            .map(|_| (0..n).map(|_| r.random_range(-1.0..=1.0)).collect())
            .collect();
        let reputation = (0..m)
            .map(|_| (0..n).map(|_| r.random_range(0.0..=3.0)).collect())
            .collect();
        let incentives = (0..m).map(|_| r.random_range(5.0..=15.0)).collect();
        let deadlines = (0..m).map(|_| r.random_range(11.0..=20.0)).collect();
        let mut coalitions: Vec<Vec<LearnerId>> = vec![Vec::new(); m];
        for l in 0..n {
            coalitions[l % m].push(l);
        }
        let start = PartitionState::new(coalitions, (0..m).collect(), 1).unwrap();
        Self {
            profiles,
            similarity,
            reputation,
            incentives,
            deadlines,
            start,
        }
    }

    pub fn model(&self) -> UtilityModel<'_> {
        UtilityModel {
            profiles: &self.profiles,
            similarity: self.similarity.clone(),
            reputation: self.reputation.clone(),
            incentives: self.incentives.clone(),
            deadlines: self.deadlines.clone(),
            i_rep: 5.0,
            rep_params: RepParams::new(0.5, 0.5).unwrap(),
            tau: 10,
            batch: 40,
        }
    }
}

/// Every assignment of non-heads to a coalition or to parking, heads pinned.
pub fn all_partitions(n: usize, heads: &[LearnerId]) -> Vec<PartitionState> {
    let m = heads.len();
    let movers: Vec<LearnerId> = (0..n).filter(|l| !heads.contains(l)).collect();
    let total = (m + 1).pow(movers.len() as u32);
    (0..total)
        .map(|mut code| {
            let mut coalitions: Vec<Vec<LearnerId>> = heads.iter().map(|&h| vec![h]).collect();
            let mut parked = Vec::new();
            for &l in &movers {
                let slot = code % (m + 1);
                code /= m + 1;
                if slot == m {
                    parked.push(l);
                } else {
                    coalitions[slot].push(l);
                }
            }
            let mut p = PartitionState::new(coalitions, heads.to_vec(), 1).unwrap();
            p.parked = parked;
            p
        })
        .collect()
}

/// Exhaustive stability test: no non-head learner can strictly gain by
/// moving to another coalition (at non-negative utility) or by parking.
pub fn brute_force_stable(p: &PartitionState, eval: &impl CoalitionUtility) -> bool {
    let strictly = |new: f64, old: f64| new > old + 1e-12 * (1.0 + old.abs());
    let n = p.learners().len();
    for l in 0..n {
        if p.heads.contains(&l) {
            continue;
        }
        let here = p.coalition_of(l);
        let stay = match here {
            Some(j) => eval.utility(l, j, &p.coalitions[j]).unwrap_or(f64::NEG_INFINITY),
            None => 0.0,
        };
        if here.is_some() && strictly(0.0, stay) {
            return false;
        }
        for (j, members) in p.coalitions.iter().enumerate() {
            if Some(j) == here {
                continue;
            }
            let mut joined = members.clone();
            joined.push(l);
            joined.sort_unstable();
            if let Some(u) = eval.utility(l, j, &joined) {
                if u >= 0.0 && strictly(u, stay) {
                    return false;
                }
            }
        }
    }
    true
}

/// Replays a trace from `start`, checking that each switch strictly raised
/// the mover's utility and kept the partition valid.
pub fn replay_is_strict(start: &PartitionState, trace: &FormationTrace, eval: &impl CoalitionUtility) -> bool {
    let mut p = start.clone();
    for s in &trace.switches {
        let before = match s.from {
            Some(j) => eval.utility(s.learner, j, &p.coalitions[j]).unwrap(),
            None => 0.0,
        };
        match s.from {
            Some(j) => p.coalitions[j].retain(|&l| l != s.learner),
            None => p.parked.retain(|&l| l != s.learner),
        }
        let after = match s.to {
            Some(j) => {
                p.coalitions[j].push(s.learner);
                p.coalitions[j].sort_unstable();
                eval.utility(s.learner, j, &p.coalitions[j]).unwrap()
            }
            None => {
                p.parked.push(s.learner);
                p.parked.sort_unstable();
                0.0
            }
        };
        if !improves(after, before) || p.validate().is_err() {
            return false;
        }
    }
    p.coalitions == trace.final_partition.coalitions && p.parked == trace.final_partition.parked
}
