//! Synchronous federated averaging baseline.

use serde::{Deserialize, Serialize};

use super::metrics::{Algorithm, ClientScope, ConceptScope, MetricRecord, MetricsLog};
use super::server::ServerState;
use super::{EventKind, RunReport, TestSet, TraceEntry};
use crate::data::LabeledInstance;
use crate::error::{Error, Result};
use crate::model::{init_params, local_train, ModelArch, ParameterVector, TrainConfig};
use crate::seed;

pub(crate) const INIT_LABEL: u64 = 0x1A17;

/// Which part of its stream a client trains on in each round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataWindow {
    /// Only the instances that arrived since the previous round.
    #[default]
    Recent,
    /// Everything received so far.
    Prefix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgConfig {
    pub arch: ModelArch,
    pub train: TrainConfig,
    /// Total number of rounds `R`.
    pub rounds: usize,
    pub window: DataWindow,
    pub seed: u64,
    /// Stream length spread evenly over the rounds; defaults to the longest stream.
    pub tick_budget: Option<usize>,
}

impl FedAvgConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate(self.arch.class_count())?;
        if self.rounds == 0 {
            return Err(Error::Config("FedAvg needs at least one round".into()));
        }
        if self.tick_budget == Some(0) {
            return Err(Error::Config("tick budget must be positive".into()));
        }
        Ok(())
    }
}

/// Tick at which round `r` (1-based) closes.
fn round_end(r: usize, rounds: usize, budget: usize) -> usize {
    r * budget / rounds
}

/// Runs `cfg.rounds` synchronous rounds in which every client with data trains
/// from the current global model and the server averages the results.
pub fn run_fedavg(cfg: &FedAvgConfig, streams: &[Vec<LabeledInstance>], test: &TestSet) -> Result<RunReport> {
    cfg.validate()?;
    if streams.is_empty() {
        return Err(Error::Config("FedAvg needs at least one client".into()));
    }
    let clients = streams.len();
    let budget = cfg
        .tick_budget
        .unwrap_or_else(|| streams.iter().map(Vec::len).max().unwrap_or(0));
    if budget == 0 {
        return Err(Error::Config("client streams are empty".into()));
    }
    let first_end = round_end(1, cfg.rounds, budget);
    if let Some(j) = streams.iter().position(|s| s.len().min(first_end) == 0) {
        return Err(Error::Config(format!("client {j} has no data for the first round")));
    }

    let init = init_params(&cfg.arch, seed::derive(cfg.seed, INIT_LABEL))?;
    let mut server = ServerState::new(init);
    let mut log = MetricsLog::new();
    let mut trace = Vec::new();
    let mut updates_sent = vec![0usize; clients];

    for r in 1..=cfg.rounds {
        let start = match cfg.window {
            DataWindow::Recent => round_end(r - 1, cfg.rounds, budget),
            DataWindow::Prefix => 0,
        };
        let end = round_end(r, cfg.rounds, budget);
        let global = server.broadcast(clients);
        trace.push(TraceEntry { tick: start, kind: EventKind::Broadcast, client: None });
        server.clear_updates();

        let round_seed = seed::derive(cfg.seed, r as u64);
        for (j, stream) in streams.iter().enumerate() {
            let data = &stream[start.min(stream.len())..end.min(stream.len())];
            if data.is_empty() {
                continue;
            }
            let local = local_train(&global, data, &cfg.train, seed::derive(round_seed, j as u64))?;
            log.push(client_record(&local, test, r, end, j, &server)?);
            server.receive(j, local, data.len())?;
            updates_sent[j] += 1;
            trace.push(TraceEntry { tick: end, kind: EventKind::ClientUpdate, client: Some(j) });
        }
        server.aggregate()?;
        push_global(&mut log, server.global(), test, end, &server)?;
    }

    Ok(RunReport {
        log,
        final_params: server.global().clone(),
        detections: vec![Vec::new(); clients],
        detector_runs: vec![0; clients],
        adaptations: vec![0; clients],
        updates_sent,
        comms_sent: server.comms_sent(),
        comms_received: server.comms_received(),
        trace,
        failures: Vec::new(),
    })
}

fn client_record(
    params: &ParameterVector,
    test: &TestSet,
    round: usize,
    tick: usize,
    client: usize,
    server: &ServerState,
) -> Result<MetricRecord> {
    Ok(MetricRecord {
        tick,
        round,
        algorithm: Algorithm::Fedavg,
        client: ClientScope::Client(client),
        concept: ConceptScope::Overall,
        accuracy: test.overall(params)?,
        comms_sent: server.comms_sent(),
        comms_received: server.comms_received(),
        detections: 0,
    })
}

fn push_global(
    log: &mut MetricsLog,
    params: &ParameterVector,
    test: &TestSet,
    tick: usize,
    server: &ServerState,
) -> Result<()> {
    let scores = test.score(params)?;
    let base = MetricRecord {
        tick,
        round: server.round(),
        algorithm: Algorithm::Fedavg,
        client: ClientScope::Global,
        concept: ConceptScope::Overall,
        accuracy: scores.overall,
        comms_sent: server.comms_sent(),
        comms_received: server.comms_received(),
        detections: 0,
    };
    for (&id, &acc) in &scores.per_concept {
        log.push(MetricRecord {
            concept: ConceptScope::Concept(id),
            accuracy: acc,
            ..base.clone()
        });
    }
    log.push(base);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_stream, strip_tags, ClassCluster, ConceptSpec, DriftSchedule};
    use crate::model::Activation;

    fn schedule() -> DriftSchedule {
        DriftSchedule::stationary(ConceptSpec {
            concept_id: 0,
            classes: vec![
                ClassCluster { mean: vec![2.0, 0.0], std: 0.5 },
                ClassCluster { mean: vec![-2.0, 0.0], std: 0.5 },
            ],
            priors: None,
            rotation: None,
            translation: None,
        })
    }

    fn config(rounds: usize) -> FedAvgConfig {
        FedAvgConfig {
            arch: ModelArch::new(vec![2, 2], Activation::Relu).unwrap(),
            train: TrainConfig {
                batch_size: 10,
                epochs: 2,
                learning_rate: 0.1,
                rounds_per_concept: 1,
                min_train_data: 4,
            },
            rounds,
            window: DataWindow::Recent,
            seed: 9,
            tick_budget: None,
        }
    }

    fn test_set() -> TestSet {
        TestSet::from_tagged(&sample_stream(&schedule(), 999, 200).unwrap()).unwrap()
    }

    fn streams(n: usize, len: usize) -> Vec<Vec<LabeledInstance>> {
        (0..n)
            .map(|j| strip_tags(&sample_stream(&schedule(), j as u64, len).unwrap()))
            .collect()
    }

    #[test]
    fn single_client_single_round_is_local_training() {
        let cfg = config(1);
        let s = streams(1, 60);
        let report = run_fedavg(&cfg, &s, &test_set()).unwrap();
        let init = init_params(&cfg.arch, seed::derive(cfg.seed, INIT_LABEL)).unwrap();
        let local = local_train(&init, &s[0], &cfg.train, seed::derive(seed::derive(cfg.seed, 1), 0)).unwrap();
        assert_eq!(report.final_params, local);
    }

    #[test]
    fn identical_clients_aggregate_to_either() {
        let cfg = config(1);
        let one = streams(1, 60).remove(0);
        let s = vec![one.clone(), one];
        let report = run_fedavg(&cfg, &s, &test_set()).unwrap();
        // same data but different shuffles, so compare against a run with matching seeds
        let init = init_params(&cfg.arch, seed::derive(cfg.seed, INIT_LABEL)).unwrap();
        let round = seed::derive(cfg.seed, 1);
        let a = local_train(&init, &s[0], &cfg.train, seed::derive(round, 0)).unwrap();
        let b = local_train(&init, &s[1], &cfg.train, seed::derive(round, 1)).unwrap();
        let want = crate::fed::weighted_average(&[(&a, 60), (&b, 60)]).unwrap();
        assert_eq!(report.final_params, want);
    }

    #[test]
    fn communication_count() {
        let report = run_fedavg(&config(25), &streams(9, 250), &test_set()).unwrap();
        assert_eq!(report.comms_sent + report.comms_received, 450);
        assert_eq!(report.total_updates(), 225);
    }

    #[test]
    fn learns_separable_data() {
        let report = run_fedavg(&config(5), &streams(3, 200), &test_set()).unwrap();
        assert!(report.log.final_accuracy(ConceptScope::Overall).unwrap() > 0.95);
        let globals = report.log.global_series(ConceptScope::Overall).count();
        assert_eq!(globals, 5);
    }

    #[test]
    fn prefix_window_sees_more_data() {
        let mut cfg = config(2);
        cfg.window = DataWindow::Prefix;
        let report = run_fedavg(&cfg, &streams(1, 100), &test_set()).unwrap();
        assert_eq!(report.total_updates(), 2);
    }

    #[test]
    fn empty_first_round_is_a_config_error() {
        let mut s = streams(2, 100);
        s[1].clear();
        assert!(matches!(run_fedavg(&config(2), &s, &test_set()), Err(Error::Config(_))));
        assert!(matches!(run_fedavg(&config(0), &streams(1, 10), &test_set()), Err(Error::Config(_))));
    }

    #[test]
    fn reruns_are_identical() {
        let s = streams(3, 120);
        let a = run_fedavg(&config(4), &s, &test_set()).unwrap();
        let b = run_fedavg(&config(4), &s, &test_set()).unwrap();
        assert_eq!(a.log.to_csv_string(), b.log.to_csv_string());
        assert_eq!(a.trace, b.trace);
    }
}
