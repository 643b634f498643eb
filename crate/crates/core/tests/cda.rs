use cdafed::data::{
    planar_benchmark, sample_stream, strip_tags, BenchmarkSpec, DriftSchedule, LabeledInstance,
};
use cdafed::drift::DetectorConfig;
use cdafed::fed::{run_cda, CdaConfig, ClientAgent, ConceptScope, Mode, Observation, ServerState, TestSet};
use cdafed::model::{init_params, Activation, ModelArch, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(concepts: usize) -> BenchmarkSpec {
    BenchmarkSpec {
        concepts,
        radius: 5.0,
        segment_length: 2000,
        ..Default::default()
    }
}

fn arch(concepts: usize) -> ModelArch {
    ModelArch::new(vec![2 * concepts, 32, 7], Activation::Relu).unwrap()
}

fn train() -> TrainConfig {
    TrainConfig {
        batch_size: 100,
        epochs: 10,
        learning_rate: 0.5,
        rounds_per_concept: 5,
        min_train_data: 280,
    }
}

fn detector() -> DetectorConfig {
    DetectorConfig::new(0.05, 100, 1000).unwrap()
}

fn stationary(concepts: usize) -> DriftSchedule {
    let full = planar_benchmark(&spec(concepts)).unwrap();
    DriftSchedule::stationary(full.entries[0].concept.clone())
}

/// Drives a lone agent through its first concept against a one-client server.
fn trained_agent(seed: u64) -> (ClientAgent, ServerState, Vec<LabeledInstance>) {
    let stream = strip_tags(&sample_stream(&stationary(3), seed, 4000).unwrap());
    let mut server = ServerState::new(init_params(&arch(3), seed).unwrap());
    let mut agent = ClientAgent::new(0, server.broadcast(1), detector(), train(), seed, None).unwrap();
    let mut rest = stream.into_iter().enumerate();
    for (t, inst) in rest.by_ref() {
        if agent.observe(t, inst).unwrap() == Observation::ConceptComplete {
            break;
        }
    }
    while agent.pending_rounds() > 0 {
        let (params, n) = agent.train_round().unwrap();
        server.receive(0, params, n).unwrap();
        server.aggregate().unwrap();
        let g = server.broadcast(1);
        agent.receive_broadcast(&g);
    }
    assert_eq!(agent.mode(), Mode::Monitoring);
    (agent, server, rest.map(|(_, x)| x).collect())
}

#[test]
fn stationary_monitoring_rarely_changes_mode() {
    let mut quiet = 0;
    for seed in 0..100 {
        let (mut agent, _, rest) = trained_agent(seed);
        for (t, inst) in rest.into_iter().take(500).enumerate() {
            agent.observe(t, inst).unwrap();
        }
        if agent.mode() == Mode::Monitoring {
            quiet += 1;
        }
    }
    assert!(quiet >= 90, "only {quiet}/100 stayed in monitoring");
}

#[test]
fn first_training_starts_when_quota_completes() {
    let a = ModelArch::new(vec![2, 7], Activation::Relu).unwrap();
    let cfg = TrainConfig { min_train_data: 1400, ..train() };
    let mut labels: Vec<usize> = (0..7).flat_map(|c| std::iter::repeat_n(c, 200)).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    // independent count of the first index at which every class reached 100
    let mut counts = [0usize; 7];
    let mut expected = None;
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        if expected.is_none() && counts.iter().all(|&c| c >= 100) {
            expected = Some(i);
        }
    }
    let expected = expected.unwrap();

    let mut agent = ClientAgent::new(0, init_params(&a, 1).unwrap(), detector(), cfg, 1, None).unwrap();
    assert_eq!(agent.memory().quota_per_class(), 100);
    for (i, &y) in labels.iter().enumerate() {
        let obs = agent
            .observe(i, LabeledInstance { features: vec![y as f64, 0.0], label: y })
            .unwrap();
        if i < expected {
            assert_eq!(obs, Observation::Collected, "index {i}");
        } else if i == expected {
            assert_eq!(obs, Observation::ConceptComplete);
        } else {
            assert_eq!(obs, Observation::Ignored);
        }
    }
    assert_eq!(agent.pending_rounds(), 5);
}

#[test]
fn detection_empties_the_window() {
    let (mut agent, _, _) = trained_agent(11);
    let drifted = strip_tags(&sample_stream(&planar_benchmark(&spec(3)).unwrap(), 12, 4000).unwrap());
    let mut detected = false;
    for (t, inst) in drifted.into_iter().enumerate() {
        if agent.observe(t, inst).unwrap() == Observation::DriftDetected {
            assert_eq!(agent.window().len(), 0);
            assert_eq!(agent.mode(), Mode::Adapting);
            assert_eq!(agent.memory().stores().len(), 2);
            assert!(agent.memory().open_store().is_some());
            detected = true;
            break;
        }
    }
    assert!(detected);
}

#[test]
fn adaptation_sends_one_update_per_round() {
    let (agent, server, _) = trained_agent(5);
    assert_eq!(agent.updates_sent(), 5);
    assert_eq!(server.comms_received(), 5);
    assert_eq!(server.round(), 5);
    // the server's copy is the last round's parameters, which it also broadcast
    assert_eq!(&server.latest_update(0).unwrap().params, server.global());
    assert_eq!(agent.local_params(), server.global());
    assert_eq!(server.latest_update(0).unwrap().samples, agent.memory().len());
}

fn run(concepts: usize, clients: usize, drift: bool, seed: u64) -> (cdafed::fed::RunReport, TestSet) {
    let schedule = if drift { planar_benchmark(&spec(concepts)).unwrap() } else { stationary(concepts) };
    let len = concepts * 2000;
    let streams: Vec<_> = (0..clients)
        .map(|j| strip_tags(&sample_stream(&schedule, 100 + j as u64, len).unwrap()))
        .collect();
    let test = TestSet::from_tagged(&sample_stream(&schedule, 99, len).unwrap()).unwrap();
    let cfg = CdaConfig {
        arch: arch(concepts),
        train: train(),
        detector: detector(),
        seed,
        tick_budget: None,
        eval_every: Some(250),
        max_collect: None,
    };
    (run_cda(&cfg, &streams, &test).unwrap(), test)
}

#[test]
fn zero_drift_trains_once_per_client() {
    let (report, _) = run(3, 4, false, 1);
    assert_eq!(report.adaptations, vec![1; 4]);
    assert_eq!(report.total_updates(), 5 * 4);
    assert!(report.detections.iter().all(Vec::is_empty));
    assert_eq!(report.comms_received, 20);
    // initial broadcast plus one per aggregation, each to four clients
    assert_eq!(report.comms_sent, 4 * (1 + 20));
}

#[test]
fn four_drifts_stay_within_the_round_budget() {
    let (report, _) = run(5, 3, true, 2);
    let adaptations: usize = report.adaptations.iter().sum();
    assert_eq!(report.total_updates(), 5 * adaptations);
    assert!(report.total_updates() <= 25 * 3, "{} updates", report.total_updates());
    for d in &report.detections {
        assert_eq!(d.len(), 4, "detections {d:?}");
    }
    let last = report.log.final_accuracy(ConceptScope::Overall).unwrap();
    assert!(last > 0.9, "final accuracy {last}");
}

#[test]
fn reruns_are_byte_identical() {
    let (a, _) = run(2, 2, true, 7);
    let (b, _) = run(2, 2, true, 7);
    assert_eq!(a.log.to_csv_string(), b.log.to_csv_string());
    assert_eq!(a.trace, b.trace);
    let (c, _) = run(2, 2, true, 8);
    assert_ne!(a.log.to_csv_string(), c.log.to_csv_string());
}

#[test]
fn log_ticks_never_decrease() {
    let (report, test) = run(2, 2, true, 3);
    let ticks: Vec<_> = report.log.records().iter().map(|r| r.tick).collect();
    assert!(ticks.windows(2).all(|w| w[0] <= w[1]));
    let concepts = report
        .log
        .global_series(ConceptScope::Concept(1))
        .count();
    assert_eq!(concepts, report.log.global_series(ConceptScope::Overall).count());
    assert_eq!(test.concepts.len(), 2);
}
