//! The round driver: coalition formation, incentive allocation, local
//! meta-training, aggregation, reputation bookkeeping and metrics, for GFML
//! and the baseline schemes.

mod config;
mod metrics;

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::coalition::{
    assign_by_similarity, cosine_similarity, form_coalitions, select_heads, FormationTrace, MmlProfile, PartitionState,
    UtilityModel,
};
use crate::costmodel::{comm_time, comp_time, round_latency};
use crate::datasets::{load_idx, partition_quantity_label, synth_blobs, Dataset, Shard};
use crate::error::{Error, Result};
use crate::ledger::{Ledger, Record};
use crate::metalearner::{
    accuracy, aggregate, embedding, local_update, loss, norm, personalize, Architecture, MetaHyper, ModelParams,
    RoundContribution,
};
use crate::reputation::{contribution, ReputationStore};
use crate::stackelberg::{fixed_incentive_solve, leader_solve, msp_utility, CoalitionGame, EquilibriumResult};
use crate::LearnerId;

pub use config::{Allocation, DatasetSource, ExperimentConfig, Formation, HeadRule, Strategy};
pub use metrics::{
    metrics_csv, CoalitionMetrics, ExperimentOutput, LearnerMetrics, LearnerStatus, PassiveAccuracy, RoundMetrics,
    Summary,
};

/// Independent deterministic stream keyed by `(seed, label, a, b)`, so
/// results do not depend on evaluation order or thread scheduling.
pub fn seeded_rng(seed: u64, label: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Flags `⌊ratio · N_active⌋` active learners as dishonest, chosen uniformly
/// by `seed`. Returns the flagged ids, ascending.
pub fn inject_misbehavior(profiles: &mut [MmlProfile], ratio: f64, seed: u64) -> Result<Vec<LearnerId>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidParam(format!("misbehavior ratio {ratio} outside [0, 1]")));
    }
    let active: Vec<usize> = (0..profiles.len()).filter(|&k| profiles[k].active).collect();
    // The epsilon keeps products like 0.29 · 100 from flooring to 28.
    let count = ((ratio * active.len() as f64) + 1e-9).floor() as usize;
    let mut rng = seeded_rng(seed, "misbehavior", 0, 0);
    let mut chosen: Vec<LearnerId> = sample_indices(&mut rng, active.len(), count.min(active.len()))
        .into_iter()
        .map(|k| active[k])
        .collect();
    chosen.sort_unstable();
    for p in profiles.iter_mut() {
        p.honest = !chosen.contains(&p.id);
    }
    Ok(chosen.iter().map(|&k| profiles[k].id).collect())
}

pub fn build_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match config.dataset {
        DatasetSource::Synthetic => synth_blobs(
            config.synth_classes,
            config.synth_per_class,
            config.synth_dim,
            config.synth_sigma,
            config.seed,
        ),
        DatasetSource::Idx => {
            let ds = load_idx(config.idx_images.as_ref(), config.idx_labels.as_ref())?;
            if config.max_samples == 0 || config.max_samples >= ds.len() {
                return Ok(ds);
            }
            let mut rng = seeded_rng(config.seed, "subsample", 0, 0);
            let mut keep = sample_indices(&mut rng, ds.len(), config.max_samples).into_vec();
            keep.sort_unstable();
            Ok(ds.subset(&keep))
        }
    }
}

/// Mean test accuracy of passive learners after personalizing their assigned
/// model with the first `n` training samples (one step), for each `n`.
pub fn evaluate_passive(
    assigned: &[(&ModelParams, &Shard)],
    hyper: &MetaHyper,
    sample_counts: &[usize],
) -> Result<Vec<PassiveAccuracy>> {
    if assigned.is_empty() {
        return Ok(Vec::new());
    }
    sample_counts
        .iter()
        .map(|&n| {
            let accs = assigned
                .par_iter()
                .map(|(model, shard)| {
                    let support: Vec<usize> = (0..n.min(shard.train.len())).collect();
                    let steps = usize::from(!support.is_empty());
                    let tuned = personalize(model, hyper, &shard.train, &support, steps)?;
                    accuracy(&tuned, &shard.test)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(PassiveAccuracy {
                samples: n,
                accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            })
        })
        .collect()
}

/// What a coalition's allocation step decided.
#[derive(Clone, Debug)]
struct CoalitionPlan {
    eq: EquilibriumResult,
    /// Members that will not train this round.
    excluded: BTreeSet<LearnerId>,
}

/// Outcome of one learner's local training.
struct Trained {
    learner: LearnerId,
    coalition: usize,
    model: ModelParams,
    contribution: RoundContribution,
    t_comp: f64,
    t_comm: f64,
}

/// Full simulation state between rounds.
pub struct Simulation {
    config: ExperimentConfig,
    shards: Vec<Shard>,
    profiles: Vec<MmlProfile>,
    active: Vec<LearnerId>,
    passive: Vec<LearnerId>,
    dishonest: Vec<LearnerId>,
    init_model: ModelParams,
    models: Vec<ModelParams>,
    partition: PartitionState,
    i_comp: Vec<f64>,
    store: ReputationStore,
    ledger: Ledger,
    /// Fixed per-learner probe rows of the training split.
    probes: Vec<Vec<usize>>,
    /// Embedding of each learner's probe under the initial model.
    base_embeddings: Vec<Vec<f64>>,
    /// `embeddings[j][i]`: embedding change of learner `i` under model `j`.
    embeddings: Vec<Vec<Vec<f64>>>,
    last_accuracy: Vec<f64>,
    last_accuracy_before: Vec<f64>,
    round: u64,
    traces: Vec<FormationTrace>,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let ds = build_dataset(&config)?;
        let n = config.num_learners;
        let shards = partition_quantity_label(&ds, n, config.classes_per_device, config.dirichlet, seed)?;

        let mut rng = seeded_rng(seed, "profiles", 0, 0);
        let mut profiles: Vec<MmlProfile> = shards
            .iter()
            .enumerate()
            .map(|(i, s)| MmlProfile {
                id: i,
                data_size: s.train.len(),
                t_max: rng.random_range(config.t_max_min..=config.t_max_max),
                delta_min: config.delta_min,
                delta_max: config.delta_max,
                cost: config.device_cost(rng.random_range(config.rate_min..=config.rate_max)),
                honest: true,
                active: false,
            })
            .collect();
        let mut order: Vec<LearnerId> = (0..n).collect();
        order.shuffle(&mut seeded_rng(seed, "roles", 0, 0));
        let mut active = order[..config.num_active()].to_vec();
        let mut passive = order[config.num_active()..].to_vec();
        active.sort_unstable();
        passive.sort_unstable();
        for &i in &active {
            profiles[i].active = true;
        }
        let dishonest = inject_misbehavior(&mut profiles, config.misbehavior_ratio, seed)?;

        let arch = Architecture::standard(ds.feature_dim(), ds.num_classes())?;
        let init_model = ModelParams::glorot(arch, &mut seeded_rng(seed, "init", 0, 0));
        let probes: Vec<Vec<usize>> = shards
            .iter()
            .map(|s| (0..config.probe_size.min(s.train.len())).collect())
            .collect();
        let base_embeddings = shards
            .par_iter()
            .zip(&probes)
            .map(|(s, p)| embedding(&init_model, &s.train, p))
            .collect::<Result<Vec<_>>>()?;

        let m = match config.strategy.formation() {
            Formation::BestEffort => 1,
            _ => config.num_coalitions,
        };
        let mut sim = Self {
            store: ReputationStore::new(config.lambda, config.phi)?,
            ledger: Ledger::new(),
            models: vec![init_model.clone(); m],
            i_comp: vec![config.i_comp_max; m],
            partition: PartitionState::default(),
            last_accuracy: vec![0.0; n],
            last_accuracy_before: vec![0.0; n],
            embeddings: Vec::new(),
            round: 0,
            traces: Vec::new(),
            config,
            shards,
            profiles,
            active,
            passive,
            dishonest,
            init_model,
            probes,
            base_embeddings,
        };
        for i in 0..n {
            let acc = accuracy(&sim.init_model, &sim.shards[i].test)?;
            sim.last_accuracy[i] = acc;
            sim.last_accuracy_before[i] = acc;
        }
        sim.refresh_embeddings()?;
        sim.partition = sim.initial_partition()?;
        if sim.config.ledger_on {
            sim.ledger.append(
                0,
                &[Record::Recruitment {
                    r_th: sim.config.r_th,
                    i_comp_min: sim.config.i_comp_min,
                    i_comp_max: sim.config.i_comp_max,
                    i_rep: sim.config.i_rep,
                }],
            )?;
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn profiles(&self) -> &[MmlProfile] {
        &self.profiles
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn active(&self) -> &[LearnerId] {
        &self.active
    }

    pub fn passive(&self) -> &[LearnerId] {
        &self.passive
    }

    pub fn dishonest(&self) -> &[LearnerId] {
        &self.dishonest
    }

    pub fn partition(&self) -> &PartitionState {
        &self.partition
    }

    pub fn models(&self) -> &[ModelParams] {
        &self.models
    }

    pub fn reputation(&self) -> &ReputationStore {
        &self.store
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn traces(&self) -> &[FormationTrace] {
        &self.traces
    }

    fn num_models(&self) -> usize {
        self.models.len()
    }

    fn refresh_embeddings(&mut self) -> Result<()> {
        let n = self.shards.len();
        self.embeddings = self
            .models
            .iter()
            .map(|model| {
                (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let raw = embedding(model, &self.shards[i].train, &self.probes[i])?;
                        let delta: Vec<f64> = raw.iter().zip(&self.base_embeddings[i]).map(|(a, b)| a - b).collect();
                        // Before any training the change is zero; fall back to the raw embedding.
                        Ok(if norm(&delta) > 1e-12 { delta } else { raw })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Embedding similarity of learners `a` and `b` under model `j`.
    fn similarity(&self, j: usize, a: LearnerId, b: LearnerId) -> f64 {
        cosine_similarity(&self.embeddings[j][a], &self.embeddings[j][b]).unwrap_or(0.0)
    }

    /// Overall reputation toward coalition `j`'s head, or the global
    /// reputation for a learner outside every coalition.
    fn overall_rep(&self, heads: &[LearnerId], i: LearnerId, j: Option<usize>) -> f64 {
        match j {
            Some(j) => self.store.overall_rep(i, heads[j], |a, b| self.similarity(j, a, b)),
            None => self.store.global_rep(i),
        }
    }

    fn lowest_deadline(&self, members: &[LearnerId]) -> Option<LearnerId> {
        members.iter().copied().min_by(|&a, &b| {
            self.profiles[a]
                .t_max
                .total_cmp(&self.profiles[b].t_max)
                .then(a.cmp(&b))
        })
    }

    fn random_member(members: &[LearnerId], rng: &mut impl Rng) -> Option<LearnerId> {
        (!members.is_empty()).then(|| members[rng.random_range(0..members.len())])
    }

    /// Active learners shuffled and dealt round-robin into `m` coalitions.
    fn random_partition(&self, rng: &mut impl Rng) -> Vec<Vec<LearnerId>> {
        let mut order = self.active.clone();
        order.shuffle(rng);
        let m = self.num_models();
        let mut coalitions = vec![Vec::new(); m];
        for (k, l) in order.into_iter().enumerate() {
            coalitions[k % m].push(l);
        }
        coalitions
    }

    fn pick_heads(&self, coalitions: &[Vec<LearnerId>], rule: HeadRule, rng: &mut impl Rng) -> Result<Vec<LearnerId>> {
        coalitions
            .iter()
            .map(|c| {
                match rule {
                    HeadRule::Random => Self::random_member(c, rng),
                    HeadRule::LowestDeadline | HeadRule::Reputation => self.lowest_deadline(c),
                }
                .ok_or(Error::EmptyCoalition)
            })
            .collect()
    }

    fn initial_partition(&self) -> Result<PartitionState> {
        let mut rng = seeded_rng(self.config.seed, "partition", 0, 0);
        let strategy = self.config.strategy;
        match strategy.formation() {
            Formation::Game | Formation::Random => {
                let coalitions = self.random_partition(&mut rng);
                let heads = self.pick_heads(&coalitions, HeadRule::Random, &mut rng)?;
                PartitionState::new(coalitions, heads, 0)
            }
            Formation::BestEffort => {
                let coalitions = vec![self.active.clone()];
                let heads = self.pick_heads(&coalitions, strategy.head_rule(), &mut rng)?;
                PartitionState::new(coalitions, heads, 0)
            }
            Formation::Fixed => {
                let mut by_deadline = self.active.clone();
                by_deadline.sort_by(|&a, &b| {
                    self.profiles[a]
                        .t_max
                        .total_cmp(&self.profiles[b].t_max)
                        .then(a.cmp(&b))
                });
                let heads = by_deadline[..self.num_models()].to_vec();
                // All models equal the initial one here, so model 0 serves every head.
                let similarity: Vec<Vec<f64>> = heads
                    .iter()
                    .map(|&h| (0..self.shards.len()).map(|i| self.similarity(0, h, i)).collect())
                    .collect();
                assign_by_similarity(&self.active, &heads, &similarity, 0)
            }
        }
    }

    /// Similarity and reputation matrices relative to `heads`, with deadlines
    /// and incentives per coalition.
    fn utility_model(&self, heads: &[LearnerId], incentives: Vec<f64>) -> UtilityModel<'_> {
        let n = self.shards.len();
        let similarity: Vec<Vec<f64>> = heads
            .iter()
            .enumerate()
            .map(|(j, &h)| (0..n).map(|i| self.similarity(j, h, i)).collect())
            .collect();
        let reputation: Vec<Vec<f64>> = heads
            .iter()
            .enumerate()
            .map(|(j, &h)| {
                (0..n)
                    .map(|i| self.store.overall_rep(i, h, |a, b| self.similarity(j, a, b)))
                    .collect()
            })
            .collect();
        UtilityModel {
            profiles: &self.profiles,
            similarity,
            reputation,
            incentives,
            deadlines: heads.iter().map(|&h| self.profiles[h].t_max).collect(),
            i_rep: self.config.i_rep,
            rep_params: self.config.rep_params(),
            tau: self.config.tau,
            batch: self.config.batch,
        }
    }

    fn incentives(&self) -> Vec<f64> {
        match self.config.strategy.allocation() {
            Allocation::Stackelberg => self.i_comp.clone(),
            _ => vec![self.config.fixed_i_comp; self.num_models()],
        }
    }

    /// Step 2: this round's partition and its formation trace.
    fn form(&self, round: u64) -> Result<FormationTrace> {
        let strategy = self.config.strategy;
        let mut rng = seeded_rng(self.config.seed, "partition", round, 0);
        let fixed = |partition: PartitionState| FormationTrace {
            round,
            switches: Vec::new(),
            final_partition: partition,
            stable: true,
        };
        match strategy.formation() {
            Formation::Game => {
                let mut prev = self.partition.clone();
                prev.round = round;
                prev.heads = match strategy.head_rule() {
                    // The first round keeps the random initial heads.
                    HeadRule::Reputation if round == 1 => prev.heads.clone(),
                    HeadRule::Reputation => {
                        select_heads(&prev, |i| self.store.global_rep(i), |i| self.profiles[i].t_max)?
                    }
                    rule => self.pick_heads(&prev.coalitions, rule, &mut rng)?,
                };
                let model = self.utility_model(&prev.heads, self.incentives());
                match form_coalitions(&prev, &model, self.config.max_switches) {
                    Err(Error::NonConvergence(budget)) => {
                        warn!("round {round}: no stable partition within {budget} switches; keeping the previous one");
                        Ok(FormationTrace {
                            round,
                            switches: Vec::new(),
                            final_partition: prev,
                            stable: false,
                        })
                    }
                    other => other,
                }
            }
            Formation::Random => {
                let coalitions = self.random_partition(&mut rng);
                let heads = self.pick_heads(&coalitions, HeadRule::Random, &mut rng)?;
                Ok(fixed(PartitionState::new(coalitions, heads, round)?))
            }
            Formation::BestEffort => {
                let coalitions = vec![self.active.clone()];
                let heads = self.pick_heads(&coalitions, strategy.head_rule(), &mut rng)?;
                Ok(fixed(PartitionState::new(coalitions, heads, round)?))
            }
            Formation::Fixed => {
                let mut p = self.partition.clone();
                p.round = round;
                Ok(fixed(p))
            }
        }
    }

    /// Step 3 for one coalition.
    fn allocate(&self, round: u64, game: &CoalitionGame) -> Result<CoalitionPlan> {
        let c = &self.config;
        let eq = match c.strategy.allocation() {
            Allocation::Stackelberg => leader_solve(game, &c.leader())?,
            Allocation::FixedIncentive => fixed_incentive_solve(game, c.eta, c.fixed_i_comp)?,
            Allocation::RandomFrequency => {
                let mut eq = EquilibriumResult {
                    i_comp_star: c.fixed_i_comp,
                    deltas: BTreeMap::new(),
                    kkt_case: BTreeMap::new(),
                    u_msp: 0.0,
                    u_mml: BTreeMap::new(),
                    infeasible: Vec::new(),
                    nonpositive: Vec::new(),
                };
                let mut kept = Vec::new();
                for (idx, f) in game.followers.iter().enumerate() {
                    let mut rng = seeded_rng(c.seed, "frequency", round, f.id as u64);
                    let delta = rng.random_range(f.delta_min..=f.delta_max);
                    if game.completion_time(idx, delta)? > game.deadline {
                        eq.infeasible.push(f.id);
                        continue;
                    }
                    eq.deltas.insert(f.id, delta);
                    eq.kkt_case.insert(f.id, 0);
                    eq.u_mml
                        .insert(f.id, game.follower_utility(idx, delta, c.fixed_i_comp)?);
                    kept.push((f.clone(), delta));
                }
                let sub = CoalitionGame {
                    followers: kept.iter().map(|(f, _)| f.clone()).collect(),
                    ..game.clone()
                };
                let deltas: Vec<f64> = kept.iter().map(|(_, d)| *d).collect();
                eq.u_msp = msp_utility(&sub, c.eta, c.fixed_i_comp, &deltas);
                eq
            }
        };
        let excluded = eq.infeasible.iter().chain(&eq.nonpositive).copied().collect();
        Ok(CoalitionPlan { eq, excluded })
    }

    /// Runs one round and returns its metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        self.round += 1;
        let round = self.round;
        let c = self.config.clone();
        if (round - 1).is_multiple_of(c.chi as u64) {
            self.refresh_embeddings()?;
        }

        // Coalitions.
        let trace = self.form(round)?;
        let partition = trace.final_partition.clone();
        let model = self.utility_model(&partition.heads, self.incentives());

        // Incentives and frequencies.
        let plans = (0..partition.num_coalitions())
            .into_par_iter()
            .map(|j| self.allocate(round, &model.game(j, &partition.coalitions[j])))
            .collect::<Result<Vec<_>>>()?;
        drop(model);
        if c.strategy.allocation() == Allocation::Stackelberg {
            for (j, plan) in plans.iter().enumerate() {
                self.i_comp[j] = plan.eq.i_comp_star;
            }
        }

        // Local meta-training.
        let jobs: Vec<(usize, LearnerId, f64)> = plans
            .iter()
            .enumerate()
            .flat_map(|(j, plan)| {
                partition.coalitions[j]
                    .iter()
                    .filter(|i| !plan.excluded.contains(i))
                    .map(move |&i| (j, i, plan.eq.deltas[&i]))
            })
            .collect();
        let trained = jobs
            .par_iter()
            .map(|&(j, i, delta)| {
                let tau = if self.profiles[i].honest {
                    c.tau
                } else {
                    c.misbehavior_tau
                };
                let mut rng = seeded_rng(c.seed, "local", round, i as u64);
                let (model, contribution) =
                    local_update(&self.models[j], &c.meta_hyper(tau), &self.shards[i], &mut rng)?;
                let cost = &self.profiles[i].cost;
                Ok(Trained {
                    learner: i,
                    coalition: j,
                    model,
                    contribution,
                    t_comp: comp_time(cost, tau, c.batch, delta)?,
                    t_comm: comm_time(cost),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        // Aggregation.
        for j in 0..partition.num_coalitions() {
            let local: Vec<ModelParams> = trained
                .iter()
                .filter(|t| t.coalition == j)
                .map(|t| t.model.clone())
                .collect();
            if !local.is_empty() {
                self.models[j] = aggregate(&local)?;
            }
        }

        // Contributions and reputation.
        let deadline = |j: usize| self.profiles[partition.heads[j]].t_max;
        let actual: BTreeMap<LearnerId, f64> = trained
            .iter()
            .map(|t| {
                (
                    t.learner,
                    contribution(t.contribution.u, deadline(t.coalition), t.t_comp, t.t_comm),
                )
            })
            .collect();
        let best_honest = trained
            .iter()
            .filter(|t| self.profiles[t.learner].honest)
            .map(|t| actual[&t.learner])
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        let reported: BTreeMap<LearnerId, f64> = actual
            .iter()
            .map(|(&i, &theta)| {
                let honest = self.profiles[i].honest;
                // Without the ledger, dishonest learners claim at least the round's best honest score.
                let value = if c.ledger_on || honest {
                    theta
                } else {
                    best_honest.map_or(theta, |b| b.max(theta))
                };
                (i, value)
            })
            .collect();
        for t in &trained {
            self.store
                .record(t.learner, partition.heads[t.coalition], round, reported[&t.learner])?;
        }

        if c.ledger_on {
            let mut records = vec![Record::PartitionCommit {
                coalitions: partition.coalitions.clone(),
                heads: partition.heads.clone(),
                parked: partition.parked.clone(),
            }];
            for (j, plan) in plans.iter().enumerate() {
                records.push(Record::Equilibrium {
                    head: partition.heads[j],
                    i_comp: plan.eq.i_comp_star,
                    u_msp: plan.eq.u_msp,
                    deltas: plan.eq.deltas.iter().map(|(&i, &d)| (i, d)).collect(),
                });
            }
            for t in &trained {
                records.push(Record::Contribution {
                    learner: t.learner,
                    head: partition.heads[t.coalition],
                    theta: actual[&t.learner],
                    u: t.contribution.u,
                    t_comp: t.t_comp,
                    t_comm: t.t_comm,
                });
            }
            for t in &trained {
                records.push(Record::ReputationUpdate {
                    learner: t.learner,
                    head: partition.heads[t.coalition],
                    global: self.store.global_rep(t.learner),
                    overall: self.overall_rep(&partition.heads, t.learner, Some(t.coalition)),
                });
            }
            self.ledger.append(round, &records)?;
        }

        // Evaluation.
        let members: Vec<(usize, LearnerId)> = partition
            .coalitions
            .iter()
            .enumerate()
            .flat_map(|(j, m)| m.iter().map(move |&i| (j, i)))
            .collect();
        let hyper = c.meta_hyper(c.tau);
        let evals = members
            .par_iter()
            .map(|&(j, i)| {
                let shard = &self.shards[i];
                let model = &self.models[j];
                let support: Vec<usize> = (0..shard.train.len()).collect();
                let tuned = personalize(model, &hyper, &shard.train, &support, c.personalize_steps)?;
                let test: Vec<usize> = (0..shard.test.len()).collect();
                Ok((
                    i,
                    (
                        accuracy(model, &shard.test)?,
                        accuracy(&tuned, &shard.test)?,
                        loss(model, &shard.test, &test)?,
                    ),
                ))
            })
            .collect::<Result<BTreeMap<LearnerId, (f64, f64, f64)>>>()?;
        for (&i, &(before, after, _)) in &evals {
            self.last_accuracy_before[i] = before;
            self.last_accuracy[i] = after;
        }

        let mut coalitions = Vec::with_capacity(plans.len());
        for (j, plan) in plans.iter().enumerate() {
            let members = &partition.coalitions[j];
            let participants: Vec<LearnerId> = members.iter().copied().filter(|i| !plan.excluded.contains(i)).collect();
            let counted: Vec<LearnerId> = if c.exclude_inactive && !participants.is_empty() {
                participants.clone()
            } else {
                members.clone()
            };
            let avg = |f: fn(&(f64, f64, f64)) -> f64| {
                counted.iter().map(|i| f(&evals[i])).sum::<f64>() / counted.len() as f64
            };
            let times: Vec<(f64, f64)> = trained
                .iter()
                .filter(|t| t.coalition == j)
                .map(|t| (t.t_comp, t.t_comm))
                .collect();
            coalitions.push(CoalitionMetrics {
                coalition: j,
                head: partition.heads[j],
                members: members.clone(),
                participants,
                accuracy_before: avg(|e| e.0),
                accuracy_after_personalization: avg(|e| e.1),
                loss: avg(|e| e.2),
                round_latency: if times.is_empty() { 0.0 } else { round_latency(&times)? },
                u_msp: plan.eq.u_msp,
                i_comp_star: plan.eq.i_comp_star,
            });
        }

        let learners = self
            .active
            .iter()
            .map(|&i| {
                let j = partition.coalition_of(i);
                let plan = j.map(|j| &plans[j]);
                let trained_here = actual.contains_key(&i);
                let status = match j {
                    None => LearnerStatus::Parked,
                    Some(_) if trained_here => LearnerStatus::Trained,
                    Some(_) => LearnerStatus::Excluded,
                };
                LearnerMetrics {
                    learner: i,
                    coalition: j,
                    status,
                    honest: self.profiles[i].honest,
                    payoff: if trained_here {
                        plan.map_or(0.0, |p| p.eq.u_mml[&i])
                    } else {
                        0.0
                    },
                    reputation: self.overall_rep(&partition.heads, i, j),
                    delta: plan.and_then(|p| p.eq.deltas.get(&i).copied()),
                    kkt_case: plan.and_then(|p| p.eq.kkt_case.get(&i).copied()).unwrap_or(0),
                    theta_reported: reported.get(&i).copied(),
                    theta_actual: actual.get(&i).copied(),
                    personalized_accuracy: self.last_accuracy[i],
                }
            })
            .collect();

        info!(
            "round {round}: {} coalitions, {} trained, {} switches",
            partition.num_coalitions(),
            trained.len(),
            trace.switches.len()
        );
        self.partition = partition;
        self.traces.push(trace);
        Ok(RoundMetrics {
            round,
            coalitions,
            learners,
        })
    }

    /// Each passive learner paired with the coalition model whose head its
    /// embedding change is most similar to.
    pub fn passive_assignment(&self) -> Result<Vec<(usize, LearnerId)>> {
        self.passive
            .iter()
            .map(|&p| {
                let j = (0..self.num_models())
                    .map(|j| (j, self.similarity(j, p, self.partition.heads[j])))
                    .fold(None, |best: Option<(usize, f64)>, (j, s)| match best {
                        Some((_, b)) if b >= s => best,
                        _ => Some((j, s)),
                    })
                    .map(|(j, _)| j)
                    .ok_or(Error::EmptyCoalition)?;
                Ok((j, p))
            })
            .collect()
    }

    pub fn evaluate_passive(&mut self, sample_counts: &[usize]) -> Result<Vec<PassiveAccuracy>> {
        self.refresh_embeddings()?;
        let pairs = self.passive_assignment()?;
        let assigned: Vec<(&ModelParams, &Shard)> =
            pairs.iter().map(|&(j, p)| (&self.models[j], &self.shards[p])).collect();
        evaluate_passive(&assigned, &self.config.meta_hyper(self.config.tau), sample_counts)
    }

    /// Final accuracies averaged over active learners:
    /// `(before personalization, after personalization)`.
    pub fn final_accuracy(&self, rounds: &[RoundMetrics]) -> (f64, f64) {
        let counted: Vec<LearnerId> = match rounds.last() {
            Some(last) if self.config.exclude_inactive => last
                .learners
                .iter()
                .filter(|l| l.status == LearnerStatus::Trained)
                .map(|l| l.learner)
                .collect(),
            _ => self.active.clone(),
        };
        if counted.is_empty() {
            return (0.0, 0.0);
        }
        let avg = |v: &[f64]| counted.iter().map(|&i| v[i]).sum::<f64>() / counted.len() as f64;
        (avg(&self.last_accuracy_before), avg(&self.last_accuracy))
    }

    pub fn into_ledger(self) -> Ledger {
        self.ledger
    }
}

/// Runs `config.rounds` rounds and summarizes them. A run in which no
/// learner ever trains is reported as infeasible.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut sim = Simulation::new(config.clone())?;
    let rounds = (0..config.rounds)
        .map(|_| sim.run_round())
        .collect::<Result<Vec<_>>>()?;
    let trained = rounds
        .iter()
        .flat_map(|r| &r.learners)
        .any(|l| l.status == LearnerStatus::Trained);
    if config.rounds > 0 && !trained {
        return Err(Error::Infeasible(
            "no learner could meet a deadline in any round".into(),
        ));
    }
    let passive = sim.evaluate_passive(&config.passive_samples)?;
    let summary = metrics::summarize(
        config.strategy.id(),
        config.seed,
        &rounds,
        sim.dishonest.clone(),
        passive,
        sim.final_accuracy(&rounds),
    );
    Ok(ExperimentOutput {
        rounds,
        summary,
        traces: sim.traces.clone(),
        ledger: sim.into_ledger(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(strategy: Strategy) -> ExperimentConfig {
        ExperimentConfig {
            num_learners: 12,
            num_coalitions: 3,
            rounds: 3,
            synth_per_class: 40,
            strategy,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = seeded_rng(1, "x", 2, 3).random();
        let b: u64 = seeded_rng(1, "x", 2, 3).random();
        let c: u64 = seeded_rng(1, "x", 3, 2).random();
        let d: u64 = seeded_rng(1, "y", 2, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn misbehavior_count_is_floor_of_active_share() {
        let sim = Simulation::new(small(Strategy::Gfml)).unwrap();
        let mut profiles = sim.profiles().to_vec();
        let active = profiles.iter().filter(|p| p.active).count();
        let chosen = inject_misbehavior(&mut profiles, 0.3, 7).unwrap();
        assert_eq!(chosen.len(), (0.3 * active as f64 + 1e-9).floor() as usize);
        assert!(chosen.iter().all(|&i| profiles[i].active && !profiles[i].honest));
        assert_eq!(profiles.iter().filter(|p| !p.honest).count(), chosen.len());
        assert!(inject_misbehavior(&mut profiles, 1.5, 7).is_err());
    }

    #[test]
    fn every_active_learner_is_accounted_for_each_round() {
        for strategy in Strategy::ALL {
            let mut sim = Simulation::new(small(strategy)).unwrap();
            for _ in 0..2 {
                let r = sim.run_round().unwrap();
                assert_eq!(r.learners.len(), sim.active().len(), "{}", strategy.id());
                let p = sim.partition();
                p.validate().unwrap();
                let mut all = p.learners();
                all.sort_unstable();
                assert_eq!(all, sim.active());
                for l in &r.learners {
                    assert_eq!(l.coalition, p.coalition_of(l.learner));
                }
            }
        }
    }

    #[test]
    fn best_effort_runs_one_coalition() {
        let mut sim = Simulation::new(small(Strategy::BestEffortStackelberg)).unwrap();
        let r = sim.run_round().unwrap();
        assert_eq!(r.coalitions.len(), 1);
        assert_eq!(r.coalitions[0].members.len(), sim.active().len());
    }

    #[test]
    fn ledger_grows_one_block_per_round() {
        let mut sim = Simulation::new(small(Strategy::Gfml)).unwrap();
        sim.run_round().unwrap();
        sim.run_round().unwrap();
        assert_eq!(sim.ledger().len(), 3);
        sim.ledger().verify().unwrap();
        let off = ExperimentConfig {
            ledger_on: false,
            ..small(Strategy::Gfml)
        };
        let mut sim = Simulation::new(off).unwrap();
        sim.run_round().unwrap();
        assert!(sim.ledger().is_empty());
    }

    #[test]
    fn passive_table_covers_requested_counts() {
        let out = run_experiment(&small(Strategy::Gfml)).unwrap();
        let counts: Vec<usize> = out.summary.passive.iter().map(|p| p.samples).collect();
        assert_eq!(counts, vec![0, 1, 5, 20]);
        assert_eq!(out.rounds.len(), 3);
        assert_eq!(out.traces.len(), 3);
    }
}
