//! Experiment configuration and its `key=value` file format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::costmodel::DeviceCost;
use crate::error::{Error, Result};
use crate::metalearner::{HvpMode, MetaHyper};
use crate::reputation::RepParams;
use crate::stackelberg::LeaderParams;

/// The ten coordination schemes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Hedonic coalitions, reputation-based heads, Stackelberg incentives.
    #[default]
    Gfml,
    GfmlOptFreq,
    GfmlRandomFreq,
    RandomCoalitionRandom,
    RandomCoalitionStackelberg,
    RandomCoalitionOpt,
    BestEffortRandomHead,
    BestEffortStackelberg,
    BestEffortOpt,
    FixedCoalitionStackelberg,
    FixedCoalitionOpt,
}

/// How coalitions are formed each round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Formation {
    Game,
    Random,
    BestEffort,
    Fixed,
}

/// How frequencies and incentives are set inside a coalition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Allocation {
    Stackelberg,
    /// Followers optimize against a fixed competition incentive.
    FixedIncentive,
    RandomFrequency,
}

/// How heads are picked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRule {
    Reputation,
    LowestDeadline,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 11] = [
        Strategy::Gfml,
        Strategy::GfmlOptFreq,
        Strategy::GfmlRandomFreq,
        Strategy::RandomCoalitionRandom,
        Strategy::RandomCoalitionStackelberg,
        Strategy::RandomCoalitionOpt,
        Strategy::BestEffortRandomHead,
        Strategy::BestEffortStackelberg,
        Strategy::BestEffortOpt,
        Strategy::FixedCoalitionStackelberg,
        Strategy::FixedCoalitionOpt,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Strategy::Gfml => "gfml",
            Strategy::GfmlOptFreq => "gfml_opt_freq",
            Strategy::GfmlRandomFreq => "gfml_random_freq",
            Strategy::RandomCoalitionRandom => "random_coalition_random",
            Strategy::RandomCoalitionStackelberg => "random_coalition_stackelberg",
            Strategy::RandomCoalitionOpt => "random_coalition_opt",
            Strategy::BestEffortRandomHead => "best_effort_random_head",
            Strategy::BestEffortStackelberg => "best_effort_stackelberg",
            Strategy::BestEffortOpt => "best_effort_opt",
            Strategy::FixedCoalitionStackelberg => "fixed_coalition_stackelberg",
            Strategy::FixedCoalitionOpt => "fixed_coalition_opt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.id() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown strategy {s:?}")))
    }

    pub fn formation(self) -> Formation {
        use Strategy::*;
        match self {
            Gfml | GfmlOptFreq | GfmlRandomFreq => Formation::Game,
            RandomCoalitionRandom | RandomCoalitionStackelberg | RandomCoalitionOpt => Formation::Random,
            BestEffortRandomHead | BestEffortStackelberg | BestEffortOpt => Formation::BestEffort,
            FixedCoalitionStackelberg | FixedCoalitionOpt => Formation::Fixed,
        }
    }

    pub fn allocation(self) -> Allocation {
        use Strategy::*;
        match self {
            Gfml | RandomCoalitionStackelberg | BestEffortStackelberg | FixedCoalitionStackelberg => {
                Allocation::Stackelberg
            }
            GfmlOptFreq | RandomCoalitionOpt | BestEffortOpt | FixedCoalitionOpt => Allocation::FixedIncentive,
            GfmlRandomFreq | RandomCoalitionRandom | BestEffortRandomHead => Allocation::RandomFrequency,
        }
    }

    pub fn head_rule(self) -> HeadRule {
        use Strategy::*;
        match self {
            Gfml => HeadRule::Reputation,
            GfmlOptFreq | BestEffortStackelberg | BestEffortOpt | FixedCoalitionStackelberg | FixedCoalitionOpt => {
                HeadRule::LowestDeadline
            }
            GfmlRandomFreq
            | RandomCoalitionRandom
            | RandomCoalitionStackelberg
            | RandomCoalitionOpt
            | BestEffortRandomHead => HeadRule::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Gaussian blobs from `synth_*`.
    #[default]
    Synthetic,
    /// IDX image/label pair from `idx_images` and `idx_labels`.
    Idx,
}

/// All experiment knobs. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_learners: usize,
    pub num_coalitions: usize,
    /// Model size in bits.
    pub model_bits: f64,
    pub alpha: f64,
    pub beta: f64,
    pub batch: usize,
    pub tau: usize,
    pub rho: f64,
    pub zeta: f64,
    pub cycles_per_sample: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    /// Uplink rate range in bits/s.
    pub rate_min: f64,
    pub rate_max: f64,
    /// Deadline range in seconds.
    pub t_max_min: f64,
    pub t_max_max: f64,
    pub lambda: f64,
    pub phi: f64,
    /// Embeddings are refreshed every `chi` rounds.
    pub chi: usize,
    pub i_comp_min: f64,
    pub i_comp_max: f64,
    pub i_rep: f64,
    pub gamma: f64,
    pub r_th: f64,
    pub eta: f64,

    pub rounds: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub misbehavior_ratio: f64,
    /// Local steps actually run by dishonest learners.
    pub misbehavior_tau: usize,
    pub ledger_on: bool,
    pub active_fraction: f64,
    pub dataset: DatasetSource,
    pub idx_images: String,
    pub idx_labels: String,
    /// Cap on IDX samples used (0 keeps all).
    pub max_samples: usize,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_dim: usize,
    pub synth_sigma: f64,
    pub classes_per_device: usize,
    pub dirichlet: f64,

    pub comm_a: f64,
    pub comm_b: f64,
    pub comm_z: f64,
    pub eps_loss: f64,
    pub probe_size: usize,
    pub personalize_steps: usize,
    pub hvp: HvpMode,
    /// Competition incentive used by the fixed-incentive and random-frequency schemes.
    pub fixed_i_comp: f64,
    /// Safety bound on switches per coalition-formation run.
    pub max_switches: usize,
    /// Leave excluded and parked learners out of accuracy averages.
    pub exclude_inactive: bool,
    /// Support-set sizes for the passive-learner evaluation.
    pub passive_samples: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_learners: 40,
            num_coalitions: 4,
            model_bits: 1e7,
            alpha: 1e-3,
            beta: 1e-2,
            batch: 40,
            tau: 10,
            rho: 0.1,
            zeta: 1e-27,
            cycles_per_sample: 10.0,
            delta_min: 1e7,
            delta_max: 1e9,
            rate_min: 5e6,
            rate_max: 1e7,
            t_max_min: 11.0,
            t_max_max: 20.0,
            lambda: 0.7,
            phi: 0.2,
            chi: 1,
            i_comp_min: 5.0,
            i_comp_max: 15.0,
            i_rep: 5.0,
            gamma: 0.5,
            r_th: 0.5,
            eta: 25.0,
            rounds: 30,
            seed: 0,
            strategy: Strategy::Gfml,
            misbehavior_ratio: 0.0,
            misbehavior_tau: 2,
            ledger_on: true,
            active_fraction: 0.9,
            dataset: DatasetSource::Synthetic,
            idx_images: String::new(),
            idx_labels: String::new(),
            max_samples: 0,
            synth_classes: 10,
            synth_per_class: 200,
            synth_dim: 20,
            synth_sigma: 1.0,
            classes_per_device: 2,
            dirichlet: 0.5,
            comm_a: 0.0,
            comm_b: 0.0,
            comm_z: 1e-10,
            eps_loss: 0.01,
            probe_size: 16,
            personalize_steps: 1,
            hvp: HvpMode::Exact,
            fixed_i_comp: 15.0,
            max_switches: 100_000,
            exclude_inactive: false,
            passive_samples: vec![0, 1, 5, 20],
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

/// Parses `raw` into the JSON type of `template`.
fn parse_value(key: &str, raw: &str, template: &Value) -> Result<Value> {
    let bad = || invalid(format!("{key}: cannot parse {raw:?}"));
    Ok(match template {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            Value::Number(Number::from_f64(v).ok_or_else(bad)?)
        }
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u64>().map(Value::from).map_err(|_| bad()))
                .collect::<Result<_>>()?,
        ),
        _ => Value::String(raw.to_string()),
    })
}

impl ExperimentConfig {
    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map: Map<String, Value> = match serde_json::to_value(Self::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key=value", no + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            let template = map
                .get(key)
                .ok_or_else(|| invalid(format!("line {}: unknown key {key:?}", no + 1)))?;
            let value = parse_value(key, raw, template)?;
            map.insert(key.to_string(), value);
        }
        let config: Self = serde_json::from_value(Value::Object(map)).map_err(|e| invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes to the `key=value` format accepted by [`ExperimentConfig::parse`].
    pub fn to_key_values(&self) -> Result<String> {
        let Value::Object(map) = serde_json::to_value(self)? else {
            unreachable!("config serializes to an object")
        };
        let mut out = String::new();
        for (k, v) in map {
            let text = match v {
                Value::String(s) => s,
                Value::Array(items) => items.iter().map(Value::to_string).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            out.push_str(&format!("{k}={text}\n"));
        }
        Ok(out)
    }

    /// Number of active learners.
    pub fn num_active(&self) -> usize {
        ((self.active_fraction * self.num_learners as f64).round() as usize).min(self.num_learners)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        let checks: [(bool, &str); 24] = [
            (self.num_learners >= 1, "num_learners must be at least 1"),
            (self.num_coalitions >= 1, "num_coalitions must be at least 1"),
            (
                self.num_active() >= self.num_coalitions,
                "need at least one active learner per coalition",
            ),
            (self.alpha > 0.0 && self.beta > 0.0, "alpha and beta must be positive"),
            (self.tau >= 1 && self.batch >= 1, "tau and batch must be at least 1"),
            (self.misbehavior_tau <= self.tau, "misbehavior_tau cannot exceed tau"),
            (self.rho >= 0.0 && self.zeta >= 0.0, "rho and zeta must be non-negative"),
            (self.cycles_per_sample > 0.0, "cycles_per_sample must be positive"),
            (
                self.delta_min > 0.0 && self.delta_min < self.delta_max,
                "need 0 < delta_min < delta_max",
            ),
            (
                self.rate_min > 0.0 && self.rate_min <= self.rate_max,
                "need 0 < rate_min <= rate_max",
            ),
            (
                self.t_max_min > 0.0 && self.t_max_min <= self.t_max_max,
                "need 0 < t_max_min <= t_max_max",
            ),
            (unit(self.lambda) && unit(self.phi), "lambda and phi must lie in [0, 1]"),
            (self.chi >= 1, "chi must be at least 1"),
            (
                self.i_comp_min >= 0.0 && self.i_comp_min < self.i_comp_max,
                "need 0 <= i_comp_min < i_comp_max",
            ),
            (
                self.i_rep >= 0.0 && self.fixed_i_comp >= 0.0,
                "incentives must be non-negative",
            ),
            (
                open_unit(self.gamma) && open_unit(self.r_th),
                "gamma and r_th must lie in (0, 1)",
            ),
            (self.eta > 0.0, "eta must be positive"),
            (unit(self.misbehavior_ratio), "misbehavior_ratio must lie in [0, 1]"),
            (
                self.active_fraction > 0.0 && self.active_fraction <= 1.0,
                "active_fraction must lie in (0, 1]",
            ),
            (
                self.classes_per_device >= 1 && self.dirichlet > 0.0,
                "classes_per_device must be at least 1 and dirichlet positive",
            ),
            (
                self.synth_classes >= 2 && self.synth_per_class >= 1 && self.synth_dim >= 1 && self.synth_sigma > 0.0,
                "synthetic dataset parameters out of range",
            ),
            (
                self.comm_a >= 0.0 && self.comm_b >= 0.0 && self.comm_z >= 0.0 && (0.0..1.0).contains(&self.eps_loss),
                "communication cost parameters out of range",
            ),
            (self.probe_size >= 1, "probe_size must be at least 1"),
            (
                self.dataset != DatasetSource::Idx || (!self.idx_images.is_empty() && !self.idx_labels.is_empty()),
                "idx dataset needs idx_images and idx_labels",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(invalid(*msg)),
            None => Ok(()),
        }
    }

    pub fn meta_hyper(&self, tau: usize) -> MetaHyper {
        MetaHyper {
            alpha: self.alpha,
            beta: self.beta,
            tau,
            batch_size: self.batch,
            hvp: self.hvp,
        }
    }

    pub fn leader(&self) -> LeaderParams {
        LeaderParams {
            eta: self.eta,
            i_rep: self.i_rep,
            i_comp_min: self.i_comp_min,
            i_comp_max: self.i_comp_max,
        }
    }

    pub fn rep_params(&self) -> RepParams {
        RepParams {
            gamma: self.gamma,
            r_th: self.r_th,
        }
    }

    /// Device cost for a learner with uplink rate `rate`.
    pub fn device_cost(&self, rate: f64) -> DeviceCost {
        DeviceCost {
            rho: self.rho,
            zeta: self.zeta,
            cycles_per_sample: self.cycles_per_sample,
            comm_a: self.comm_a,
            comm_b: self.comm_b,
            comm_z: self.comm_z,
            eps_loss: self.eps_loss,
            model_bits: self.model_bits,
            rate,
        }
    }
}
