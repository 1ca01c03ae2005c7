//! End-to-end runs through the public API: long-tailed data generation,
//! schedule construction, sequential training, and the recorded metrics.

use std::time::Instant;

use gradcil_core::datagen::{make_profile_counts, make_synthetic_gaussian_with_test, ImbalanceProfile};
use gradcil_core::memory::{ExemplarStore, MemoryRegime};
use gradcil_core::protocol::{build_schedule, ClassOrder, Protocol};
use gradcil_core::trainer::{ExperimentRun, Method, MethodSpec, TrainConfig};

fn desk_run(method: Method, seed: u64, protocol: Protocol, regime: MemoryRegime) -> ExperimentRun {
    let profile = ImbalanceProfile {
        rho: 100.0,
        n_max: 200,
        num_classes: 10,
    };
    let counts = make_profile_counts(&profile).unwrap();
    let (train, test) = make_synthetic_gaussian_with_test(10, 12, &counts, 8.0, 40, seed).unwrap();
    let n_tasks = 5;
    let schedule = build_schedule(10, protocol, n_tasks, ClassOrder::Shuffled, &[], seed).unwrap();
    let config = TrainConfig {
        epochs_per_phase: 6,
        batch_size: 64,
        lr_drops: vec![(4, 10.0)],
        method,
        seed,
        ..TrainConfig::desk_default()
    };
    let spec = MethodSpec::from_config(&config);
    let mut run = ExperimentRun::new(config, spec, schedule, train, test, regime).unwrap();
    run.run().unwrap();
    run
}

#[test]
fn long_tail_equal_split_run_is_deterministic() {
    let started = Instant::now();
    let a = desk_run(
        Method::Ours,
        42,
        Protocol::EqualSplits,
        MemoryRegime::Growing { n_eps: 5 },
    );
    let b = desk_run(
        Method::Ours,
        42,
        Protocol::EqualSplits,
        MemoryRegime::Growing { n_eps: 5 },
    );
    assert_eq!(a.metrics().to_csv(), b.metrics().to_csv());
    assert_eq!(a.learner().w, b.learner().w);
    assert_eq!(a.metrics().num_phases(), 5);
    assert!(
        started.elapsed().as_secs() < 120,
        "two desk-scale runs must finish well inside two minutes"
    );
}

#[test]
fn half_first_protocol_with_fixed_budget_completes() {
    let run = desk_run(
        Method::Ours,
        7,
        Protocol::HalfThenSplits,
        MemoryRegime::Fixed { budget: 60 },
    );
    assert_eq!(run.metrics().num_phases(), 6);
    assert!(run.store().total_stored() <= 60);
    assert_eq!(run.store().num_classes(), 10);
    let final_seen = run.metrics().phase(5).unwrap().seen_acc;
    assert!(
        final_seen > 0.4,
        "well-separated clusters should stay largely classifiable, got {final_seen}"
    );
}

#[test]
fn methods_produce_genuinely_different_runs() {
    let ours = desk_run(
        Method::Ours,
        13,
        Protocol::EqualSplits,
        MemoryRegime::Growing { n_eps: 5 },
    );
    let finetune = desk_run(
        Method::Finetune,
        13,
        Protocol::EqualSplits,
        MemoryRegime::Growing { n_eps: 5 },
    );
    assert_ne!(ours.learner().w, finetune.learner().w);
    assert_ne!(ours.metrics().to_csv(), finetune.metrics().to_csv());
}

#[test]
fn store_checkpoint_survives_a_training_phase() {
    let profile = ImbalanceProfile {
        rho: 50.0,
        n_max: 60,
        num_classes: 6,
    };
    let counts = make_profile_counts(&profile).unwrap();
    let (train, test) = make_synthetic_gaussian_with_test(6, 8, &counts, 8.0, 20, 3).unwrap();
    let schedule = build_schedule(6, Protocol::EqualSplits, 3, ClassOrder::Shuffled, &[], 3).unwrap();
    let config = TrainConfig {
        epochs_per_phase: 3,
        batch_size: 32,
        lr_drops: vec![],
        seed: 3,
        ..TrainConfig::desk_default()
    };
    let spec = MethodSpec::from_config(&config);
    let mut run = ExperimentRun::new(
        config,
        spec,
        schedule,
        train.clone(),
        test,
        MemoryRegime::Growing { n_eps: 4 },
    )
    .unwrap();
    run.run_phase(0).unwrap();
    run.run_phase(1).unwrap();

    let json = run.store().to_checkpoint_json().unwrap();
    let rebuilt = ExemplarStore::from_checkpoint_json(&json, &train).unwrap();
    assert_eq!(
        rebuilt.as_dataset(6, 8).unwrap().features(),
        run.store().as_dataset(6, 8).unwrap().features()
    );
    assert_eq!(rebuilt.total_stored(), run.store().total_stored());
}
