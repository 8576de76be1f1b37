use std::collections::BTreeSet;

use gfml::coalition::MmlProfile;
use gfml::costmodel::DeviceCost;
use gfml::metalearner::accuracy;
use gfml::orchestrator::*;

fn small(strategy: Strategy) -> ExperimentConfig {
    ExperimentConfig {
        num_learners: 12,
        num_coalitions: 3,
        rounds: 4,
        synth_per_class: 40,
        strategy,
        ..ExperimentConfig::default()
    }
}

#[test]
fn metrics_are_a_pure_function_of_the_config() {
    let config = small(Strategy::Gfml);
    let a = run_experiment(&config).unwrap();
    let b = run_experiment(&config).unwrap();
    assert_eq!(metrics_csv(&a.rounds).unwrap(), metrics_csv(&b.rounds).unwrap());
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.ledger.to_bytes(), b.ledger.to_bytes());
    let c = run_experiment(&ExperimentConfig { seed: 1, ..config }).unwrap();
    assert_ne!(metrics_csv(&a.rounds).unwrap(), metrics_csv(&c.rounds).unwrap());
}

#[test]
fn single_coalition_runs() {
    let out = run_experiment(&ExperimentConfig {
        num_coalitions: 1,
        ..small(Strategy::Gfml)
    })
    .unwrap();
    for r in &out.rounds {
        assert_eq!(r.coalitions.len(), 1);
    }
}

#[test]
fn honest_runs_ignore_the_ledger_switch() {
    let on = run_experiment(&small(Strategy::Gfml)).unwrap();
    let off = run_experiment(&ExperimentConfig {
        ledger_on: false,
        ..small(Strategy::Gfml)
    })
    .unwrap();
    let partitions = |o: &ExperimentOutput| o.traces.iter().map(|t| t.final_partition.clone()).collect::<Vec<_>>();
    assert_eq!(partitions(&on), partitions(&off));
    assert_eq!(on.rounds, off.rounds);
    assert!(off.ledger.is_empty());
}

#[test]
fn every_active_learner_is_trained_parked_or_excluded() {
    for strategy in Strategy::ALL {
        let config = ExperimentConfig {
            misbehavior_ratio: 0.5,
            ..small(strategy)
        };
        let mut sim = Simulation::new(config.clone()).unwrap();
        let active: BTreeSet<usize> = sim.active().iter().copied().collect();
        for _ in 0..config.rounds {
            let r = sim.run_round().unwrap();
            let seen: BTreeSet<usize> = r.learners.iter().map(|l| l.learner).collect();
            assert_eq!(seen, active, "{}", strategy.id());
            assert_eq!(r.learners.len(), active.len());
            for l in &r.learners {
                match l.status {
                    LearnerStatus::Parked => assert!(l.coalition.is_none()),
                    LearnerStatus::Trained => assert!(l.theta_actual.is_some() && l.delta.is_some()),
                    LearnerStatus::Excluded => assert!(l.theta_actual.is_none()),
                }
            }
        }
    }
}

#[test]
fn strategies_follow_their_rules() {
    let fixed = run_experiment(&small(Strategy::FixedCoalitionStackelberg)).unwrap();
    let first = &fixed.traces[0].final_partition;
    assert!(fixed
        .traces
        .iter()
        .all(|t| t.final_partition.coalitions == first.coalitions));

    for strategy in [
        Strategy::GfmlOptFreq,
        Strategy::RandomCoalitionOpt,
        Strategy::BestEffortOpt,
        Strategy::FixedCoalitionOpt,
    ] {
        let out = run_experiment(&small(strategy)).unwrap();
        assert!(
            out.rounds
                .iter()
                .flat_map(|r| &r.coalitions)
                .all(|c| c.i_comp_star == 15.0),
            "{}",
            strategy.id()
        );
    }

    let random = run_experiment(&small(Strategy::GfmlRandomFreq)).unwrap();
    assert!(random.rounds.iter().flat_map(|r| &r.learners).all(|l| l.kkt_case == 0));

    let game = run_experiment(&small(Strategy::Gfml)).unwrap();
    for l in game.rounds.iter().flat_map(|r| &r.learners) {
        if l.status == LearnerStatus::Trained {
            assert!((1..=6).contains(&l.kkt_case));
            assert!((1e7..=1e9).contains(&l.delta.unwrap()));
        }
    }
    for c in game.rounds.iter().flat_map(|r| &r.coalitions) {
        assert!((5.0..=15.0).contains(&c.i_comp_star));
    }

    for strategy in [
        Strategy::BestEffortRandomHead,
        Strategy::BestEffortStackelberg,
        Strategy::BestEffortOpt,
    ] {
        let out = run_experiment(&small(strategy)).unwrap();
        assert!(out.rounds.iter().all(|r| r.coalitions.len() == 1));
    }

    let shuffled = run_experiment(&ExperimentConfig {
        rounds: 6,
        ..small(Strategy::RandomCoalitionRandom)
    })
    .unwrap();
    let distinct: BTreeSet<Vec<Vec<usize>>> = shuffled
        .traces
        .iter()
        .map(|t| t.final_partition.coalitions.clone())
        .collect();
    assert!(distinct.len() > 1);
}

#[test]
fn personalization_does_not_hurt_on_average() {
    let out = run_experiment(&ExperimentConfig {
        rounds: 6,
        ..small(Strategy::Gfml)
    })
    .unwrap();
    for r in &out.rounds {
        let n = r.coalitions.len() as f64;
        let before: f64 = r.coalitions.iter().map(|c| c.accuracy_before).sum::<f64>() / n;
        let after: f64 = r
            .coalitions
            .iter()
            .map(|c| c.accuracy_after_personalization)
            .sum::<f64>()
            / n;
        assert!(after >= before - 0.02, "round {}: {before} -> {after}", r.round);
        for c in &r.coalitions {
            assert!((0.0..=1.0).contains(&c.accuracy_before));
            assert!((0.0..=1.0).contains(&c.accuracy_after_personalization));
            assert!(c.round_latency >= 0.0);
        }
    }
}

#[test]
fn passive_without_samples_is_the_plain_model_accuracy() {
    let mut sim = Simulation::new(small(Strategy::Gfml)).unwrap();
    sim.run_round().unwrap();
    let table = sim.evaluate_passive(&[0]).unwrap();
    let pairs = sim.passive_assignment().unwrap();
    let plain: f64 = pairs
        .iter()
        .map(|&(j, p)| accuracy(&sim.models()[j], &sim.shards()[p].test).unwrap())
        .sum::<f64>()
        / pairs.len() as f64;
    assert_eq!(table[0].samples, 0);
    assert!((table[0].accuracy - plain).abs() < 1e-12);
    let hyper = sim.config().meta_hyper(10);
    assert!(evaluate_passive(&[], &hyper, &[0, 1, 5]).unwrap().is_empty());
}

fn profiles(active: usize, total: usize) -> Vec<MmlProfile> {
    (0..total)
        .map(|id| MmlProfile {
            id,
            data_size: 10,
            t_max: 15.0,
            delta_min: 1e7,
            delta_max: 1e9,
            cost: DeviceCost::default(),
            honest: true,
            active: id < active,
        })
        .collect()
}

#[test]
fn misbehavior_injection_counts() {
    let mut p = profiles(36, 40);
    assert!(inject_misbehavior(&mut p, 0.0, 1).unwrap().is_empty());
    assert!(p.iter().all(|x| x.honest));
    assert_eq!(inject_misbehavior(&mut p, 1.0, 1).unwrap().len(), 36);
    assert!(p[36..].iter().all(|x| x.honest));
    let half = inject_misbehavior(&mut p, 0.5, 1).unwrap();
    assert_eq!(half.len(), 18);
    assert_eq!(half, inject_misbehavior(&mut p, 0.5, 1).unwrap());
    assert_ne!(half, inject_misbehavior(&mut p, 0.5, 2).unwrap());
}

#[test]
fn outputs_are_written() {
    let out = run_experiment(&ExperimentConfig {
        rounds: 2,
        ..small(Strategy::Gfml)
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("round,coalition,head,members,participants,accuracy_before"));
    assert_eq!(
        lines.count(),
        out.rounds.iter().map(|r| r.coalitions.len()).sum::<usize>()
    );
    let trace = std::fs::read_to_string(dir.path().join("partition_trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["strategy"], "gfml");
    let ledger = gfml::ledger::Ledger::load(&dir.path().join("ledger.bin")).unwrap();
    assert_eq!(ledger, out.ledger);
}

#[test]
fn config_files_parse_and_reject() {
    let c = ExperimentConfig::parse("num_learners=20\nstrategy=fixed_coalition_opt\n# comment\n").unwrap();
    assert_eq!(c.num_learners, 20);
    assert_eq!(c.strategy, Strategy::FixedCoalitionOpt);
    for bad in [
        "nonsense=1",
        "alpha=abc",
        "strategy=unknown",
        "num_coalitions=0",
        "no equals sign",
    ] {
        assert!(
            matches!(ExperimentConfig::parse(bad), Err(gfml::Error::ConfigInvalid(_))),
            "{bad}"
        );
    }
}
