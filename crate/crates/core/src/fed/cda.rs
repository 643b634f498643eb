//! Asynchronous drift-aware federated averaging.
//!
//! Each client monitors the confidence of the current global model on its
//! incoming stream. A detected drift opens a new concept in the client's
//! long-term memory; once the concept holds enough samples of every class
//! the client runs `R` rehearsal rounds over all stored concepts, sending an
//! update after each. The server aggregates after every update and
//! broadcasts the result to everyone.
//!
//! The simulation is a single-threaded event loop ordered by
//! `(tick, kind, client, sequence)`. Each tick delivers one instance to
//! every client whose stream is long enough; a rehearsal round started at
//! tick `t` is followed by the next one at `t + 1`, after the broadcast of
//! the previous round has reached every client.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::fedavg::INIT_LABEL;
use super::metrics::{Algorithm, ClientScope, ConceptScope, MetricRecord, MetricsLog};
use super::server::ServerState;
use super::{EventKind, RunReport, TestSet, TraceEntry};
use crate::data::LabeledInstance;
use crate::drift::{detect, should_check, ConfidenceWindow, DetectorConfig};
use crate::error::{Error, Result};
use crate::memory::LongTermMemory;
use crate::model::{init_params, local_train, predict, ModelArch, ParameterVector, TrainConfig};
use crate::seed;

const GATE_LABEL: u64 = 0x6A7E;
const TRAIN_LABEL: u64 = 0x7EA1;

#[derive(Debug, Clone, PartialEq)]
pub struct CdaConfig {
    pub arch: ModelArch,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub seed: u64,
    /// Number of ticks during which instances are delivered; defaults to the
    /// longest stream. Rounds still in flight afterwards are completed.
    pub tick_budget: Option<usize>,
    /// Emit a global evaluation every this many ticks.
    pub eval_every: Option<usize>,
    /// Give up waiting for missing classes after this many collected
    /// samples and train on what the concept holds. Defaults to `10 * L`.
    pub max_collect: Option<usize>,
}

impl CdaConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate(self.arch.class_count())?;
        self.detector.validate()?;
        if self.eval_every == Some(0) || self.tick_budget == Some(0) || self.max_collect == Some(0) {
            return Err(Error::Config(
                "eval_every, tick_budget and max_collect must be positive when set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Filling the first concept store before any training.
    CollectingInitial,
    /// Predicting and watching the confidence stream for drift.
    Monitoring,
    /// Filling the store of a newly detected concept.
    Adapting,
}

/// What happened to one observed instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    /// Arrived while rehearsal rounds were pending and was discarded.
    Ignored,
    Monitored { checked: bool },
    DriftDetected,
    Collected,
    /// The open concept just closed; rehearsal rounds are now pending.
    ConceptComplete,
}

#[derive(Debug, Clone)]
pub struct ClientAgent {
    id: usize,
    local_params: ParameterVector,
    window: ConfidenceWindow,
    memory: LongTermMemory,
    detector: DetectorConfig,
    train: TrainConfig,
    mode: Mode,
    gate_rng: ChaCha8Rng,
    train_seed: u64,
    rounds_left: usize,
    rounds_trained: u64,
    collected: usize,
    max_collect: usize,
    pushes: usize,
    detections: Vec<usize>,
    detector_runs: usize,
    updates_sent: usize,
    adaptations: usize,
}

impl ClientAgent {
    pub fn new(
        id: usize,
        initial: ParameterVector,
        detector: DetectorConfig,
        train: TrainConfig,
        seed: u64,
        max_collect: Option<usize>,
    ) -> Result<Self> {
        detector.validate()?;
        let classes = initial.arch().class_count();
        train.validate(classes)?;
        let mut memory = LongTermMemory::new(train.min_train_data, classes)?;
        memory.open_concept()?;
        let window = ConfidenceWindow::new(detector.max_window)?;
        let agent_seed = seed::derive(seed, id as u64);
        Ok(Self {
            id,
            local_params: initial,
            window,
            memory,
            max_collect: max_collect.unwrap_or(10 * train.min_train_data),
            detector,
            train,
            mode: Mode::CollectingInitial,
            gate_rng: seed::rng(seed::derive(agent_seed, GATE_LABEL)),
            train_seed: seed::derive(agent_seed, TRAIN_LABEL),
            rounds_left: 0,
            rounds_trained: 0,
            collected: 0,
            pushes: 0,
            detections: Vec::new(),
            detector_runs: 0,
            updates_sent: 0,
            adaptations: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn local_params(&self) -> &ParameterVector {
        &self.local_params
    }

    pub fn window(&self) -> &ConfidenceWindow {
        &self.window
    }

    pub fn memory(&self) -> &LongTermMemory {
        &self.memory
    }

    /// Rehearsal rounds still to run for the concept that just closed.
    pub fn pending_rounds(&self) -> usize {
        self.rounds_left
    }

    pub fn detections(&self) -> &[usize] {
        &self.detections
    }

    pub fn detector_runs(&self) -> usize {
        self.detector_runs
    }

    pub fn updates_sent(&self) -> usize {
        self.updates_sent
    }

    pub fn adaptations(&self) -> usize {
        self.adaptations
    }

    /// Replaces the local mirror with the server's latest model.
    pub fn receive_broadcast(&mut self, params: &ParameterVector) {
        self.local_params.clone_from(params);
    }

    /// Processes one instance of the client's stream at `tick`.
    pub fn observe(&mut self, tick: usize, inst: LabeledInstance) -> Result<Observation> {
        if self.rounds_left > 0 {
            return Ok(Observation::Ignored);
        }
        match self.mode {
            Mode::Monitoring => self.monitor(tick, &inst),
            Mode::CollectingInitial | Mode::Adapting => self.collect(inst),
        }
    }

    fn monitor(&mut self, tick: usize, inst: &LabeledInstance) -> Result<Observation> {
        let q = predict(&self.local_params, &inst.features)?.confidence;
        self.window.push(q)?;
        self.pushes += 1;
        let checked = match self.detector.check_every {
            Some(n) => self.pushes % n == 0,
            None => should_check(q, self.gate_rng.random::<f64>()),
        };
        if !checked {
            return Ok(Observation::Monitored { checked });
        }
        self.detector_runs += 1;
        if !detect(&self.window, &self.detector).detected {
            return Ok(Observation::Monitored { checked });
        }
        log::debug!("client {} detected drift at tick {tick}", self.id);
        self.window.clear();
        self.pushes = 0;
        self.detections.push(tick);
        self.memory.open_concept()?;
        self.collected = 0;
        self.mode = Mode::Adapting;
        Ok(Observation::DriftDetected)
    }

    fn collect(&mut self, inst: LabeledInstance) -> Result<Observation> {
        self.memory.add_sample(inst)?;
        self.collected += 1;
        let complete = self.memory.concept_complete()?;
        if !complete && self.collected < self.max_collect {
            return Ok(Observation::Collected);
        }
        if !complete {
            log::warn!(
                "client {} closed a concept after {} samples without filling every class quota",
                self.id,
                self.collected
            );
        }
        self.memory.close_concept()?;
        self.rounds_left = self.train.rounds_per_concept;
        self.adaptations += 1;
        Ok(Observation::ConceptComplete)
    }

    /// One rehearsal round: trains the current mirror on a fresh shuffle of
    /// every stored concept and returns `(params, n)` for the server, where
    /// `n` is the memory size. Returns to monitoring after the last round.
    ///
    /// On a numerical failure the remaining rounds are abandoned.
    pub fn train_round(&mut self) -> Result<(ParameterVector, usize)> {
        if self.rounds_left == 0 {
            return Err(Error::State(format!("client {} has no pending rounds", self.id)));
        }
        let round_seed = seed::derive(self.train_seed, self.rounds_trained);
        self.rounds_trained += 1;
        self.rounds_left -= 1;
        let result = self
            .memory
            .rehearsal_dataset(round_seed)
            .and_then(|data| local_train(&self.local_params, &data, &self.train, seed::derive(round_seed, 1)));
        match result {
            Ok(params) => {
                if self.rounds_left == 0 {
                    self.mode = Mode::Monitoring;
                }
                self.updates_sent += 1;
                Ok((params, self.memory.len()))
            }
            Err(e) => {
                self.rounds_left = 0;
                self.mode = Mode::Monitoring;
                Err(e)
            }
        }
    }
}

enum Payload {
    Arrival(usize),
    Round,
    Update(ParameterVector, usize),
    Broadcast(ParameterVector),
}

struct Event {
    tick: usize,
    kind: EventKind,
    client: usize,
    seq: u64,
    payload: Payload,
}

impl Event {
    fn key(&self) -> (usize, EventKind, usize, u64) {
        (self.tick, self.kind, self.client, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

struct Queue {
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, tick: usize, client: usize, payload: Payload) {
        let kind = match payload {
            Payload::Arrival(_) => EventKind::InstanceArrival,
            Payload::Round => EventKind::LocalRound,
            Payload::Update(..) => EventKind::ClientUpdate,
            Payload::Broadcast(_) => EventKind::Broadcast,
        };
        self.seq += 1;
        self.heap.push(Reverse(Event { tick, kind, client, seq: self.seq, payload }));
    }

    fn pop_until(&mut self, tick: usize) -> Option<Event> {
        match self.heap.peek() {
            Some(Reverse(e)) if e.tick <= tick => self.heap.pop().map(|Reverse(e)| e),
            _ => None,
        }
    }
}

struct Sim<'a> {
    agents: Vec<ClientAgent>,
    server: ServerState,
    queue: Queue,
    log: MetricsLog,
    trace: Vec<TraceEntry>,
    failures: Vec<String>,
    test: &'a TestSet,
    streams: &'a [Vec<LabeledInstance>],
}

impl Sim<'_> {
    fn total_detections(&self) -> usize {
        self.agents.iter().map(|a| a.detections.len()).sum()
    }

    fn record(&self, tick: usize, client: ClientScope, concept: ConceptScope, accuracy: f64, detections: usize) -> MetricRecord {
        MetricRecord {
            tick,
            round: self.server.round(),
            algorithm: Algorithm::CdaFedavg,
            client,
            concept,
            accuracy,
            comms_sent: self.server.comms_sent(),
            comms_received: self.server.comms_received(),
            detections,
        }
    }

    fn log_global(&mut self, tick: usize) -> Result<()> {
        let scores = self.test.score(self.server.global())?;
        let detections = self.total_detections();
        for (&id, &acc) in &scores.per_concept {
            let r = self.record(tick, ClientScope::Global, ConceptScope::Concept(id), acc, detections);
            self.log.push(r);
        }
        let r = self.record(tick, ClientScope::Global, ConceptScope::Overall, scores.overall, detections);
        self.log.push(r);
        Ok(())
    }

    fn log_client(&mut self, tick: usize, client: usize, params: &ParameterVector) -> Result<()> {
        let acc = self.test.overall(params)?;
        let d = self.agents[client].detections.len();
        let r = self.record(tick, ClientScope::Client(client), ConceptScope::Overall, acc, d);
        self.log.push(r);
        Ok(())
    }

    fn handle(&mut self, e: Event) -> Result<()> {
        let Event { tick, kind, client, payload, .. } = e;
        self.trace.push(TraceEntry { tick, kind, client: Some(client) });
        match payload {
            Payload::Arrival(idx) => {
                let inst = self.streams[client][idx].clone();
                match self.agents[client].observe(tick, inst)? {
                    Observation::DriftDetected => {
                        let params = self.agents[client].local_params.clone();
                        self.log_client(tick, client, &params)?;
                    }
                    Observation::ConceptComplete => self.queue.push(tick, client, Payload::Round),
                    _ => {}
                }
            }
            Payload::Round => match self.agents[client].train_round() {
                Ok((params, n)) => self.queue.push(tick, client, Payload::Update(params, n)),
                Err(Error::Numerical { batch }) => {
                    let msg = format!("client {client} abandoned adaptation at tick {tick}: divergence in batch {batch}");
                    log::warn!("{msg}");
                    self.failures.push(msg);
                    let d = self.agents[client].detections.len();
                    let r = self.record(tick, ClientScope::Client(client), ConceptScope::Overall, f64::NAN, d);
                    self.log.push(r);
                }
                Err(other) => return Err(other),
            },
            Payload::Update(params, n) => {
                self.log_client(tick, client, &params)?;
                self.server.receive(client, params, n)?;
                self.server.aggregate()?;
                self.log_global(tick)?;
                let global = self.server.broadcast(self.agents.len());
                self.queue.push(tick, client, Payload::Broadcast(global));
            }
            Payload::Broadcast(params) => {
                for agent in &mut self.agents {
                    agent.receive_broadcast(&params);
                }
                if self.agents[client].rounds_left > 0 {
                    self.queue.push(tick + 1, client, Payload::Round);
                }
            }
        }
        Ok(())
    }
}

/// Runs the asynchronous protocol over pre-partitioned client streams.
pub fn run_cda(cfg: &CdaConfig, streams: &[Vec<LabeledInstance>], test: &TestSet) -> Result<RunReport> {
    cfg.validate()?;
    if streams.is_empty() {
        return Err(Error::Config("CDA-FedAvg needs at least one client".into()));
    }
    let budget = cfg
        .tick_budget
        .unwrap_or_else(|| streams.iter().map(Vec::len).max().unwrap_or(0));
    let init = init_params(&cfg.arch, seed::derive(cfg.seed, INIT_LABEL))?;
    let mut server = ServerState::new(init);
    let initial = server.broadcast(streams.len());
    let agents = (0..streams.len())
        .map(|j| {
            ClientAgent::new(
                j,
                initial.clone(),
                cfg.detector.clone(),
                cfg.train.clone(),
                cfg.seed,
                cfg.max_collect,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sim = Sim {
        agents,
        server,
        queue: Queue { heap: BinaryHeap::new(), seq: 0 },
        log: MetricsLog::new(),
        trace: vec![TraceEntry { tick: 0, kind: EventKind::Broadcast, client: None }],
        failures: Vec::new(),
        test,
        streams,
    };

    let mut last_tick = 0;
    for tick in 0..budget {
        if let Some(every) = cfg.eval_every {
            if tick > 0 && tick % every == 0 {
                sim.log_global(tick)?;
            }
        }
        for (j, stream) in streams.iter().enumerate() {
            if tick < stream.len() {
                sim.queue.push(tick, j, Payload::Arrival(tick));
            }
        }
        while let Some(e) = sim.queue.pop_until(tick) {
            sim.handle(e)?;
        }
        last_tick = tick;
    }
    // finish rehearsal rounds that were still running when the stream ended
    while let Some(Reverse(e)) = sim.queue.heap.pop() {
        last_tick = last_tick.max(e.tick);
        sim.handle(e)?;
    }
    sim.log_global(budget.max(last_tick + 1))?;

    let Sim { agents, server, log, trace, failures, .. } = sim;
    Ok(RunReport {
        log,
        final_params: server.global().clone(),
        detections: agents.iter().map(|a| a.detections.clone()).collect(),
        detector_runs: agents.iter().map(|a| a.detector_runs).collect(),
        updates_sent: agents.iter().map(|a| a.updates_sent).collect(),
        adaptations: agents.iter().map(|a| a.adaptations).collect(),
        comms_sent: server.comms_sent(),
        comms_received: server.comms_received(),
        trace,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn agent(min_train_data: usize) -> ClientAgent {
        let arch = ModelArch::new(vec![1, 2], Activation::Relu).unwrap();
        let train = TrainConfig {
            batch_size: 4,
            epochs: 1,
            learning_rate: 0.1,
            rounds_per_concept: 2,
            min_train_data,
        };
        let det = DetectorConfig::new(0.05, 2, 8).unwrap();
        ClientAgent::new(3, init_params(&arch, 0).unwrap(), det, train, 0, Some(6)).unwrap()
    }

    fn inst(label: usize) -> LabeledInstance {
        LabeledInstance { features: vec![label as f64], label }
    }

    #[test]
    fn no_rounds_without_a_closed_concept() {
        let mut a = agent(4);
        assert_eq!(a.mode(), Mode::CollectingInitial);
        assert!(matches!(a.train_round(), Err(Error::State(_))));
    }

    #[test]
    fn pending_rounds_discard_instances() {
        let mut a = agent(4);
        assert_eq!(a.observe(0, inst(0)).unwrap(), Observation::Collected);
        assert_eq!(a.observe(1, inst(1)).unwrap(), Observation::ConceptComplete);
        assert_eq!(a.observe(2, inst(1)).unwrap(), Observation::Ignored);
        assert_eq!(a.memory().len(), 2);
        a.train_round().unwrap();
        assert_eq!(a.mode(), Mode::CollectingInitial);
        let (_, n) = a.train_round().unwrap();
        assert_eq!(n, 2);
        assert_eq!(a.mode(), Mode::Monitoring);
        assert_eq!(a.updates_sent(), 2);
        assert!(matches!(a.observe(3, inst(0)).unwrap(), Observation::Monitored { .. }));
        assert_eq!(a.window().len(), 1);
    }

    #[test]
    fn collection_timeout_closes_the_store() {
        // class 1 never shows up; max_collect is 6
        let mut a = agent(20);
        for t in 0..5 {
            assert_eq!(a.observe(t, inst(0)).unwrap(), Observation::Collected);
        }
        assert_eq!(a.observe(5, inst(0)).unwrap(), Observation::ConceptComplete);
        assert_eq!(a.pending_rounds(), 2);
    }

    #[test]
    fn events_order_by_tick_then_kind_then_client() {
        let mut q = Queue { heap: BinaryHeap::new(), seq: 0 };
        let p = init_params(&ModelArch::new(vec![1, 2], Activation::Relu).unwrap(), 0).unwrap();
        q.push(1, 0, Payload::Arrival(1));
        q.push(0, 2, Payload::Broadcast(p.clone()));
        q.push(0, 1, Payload::Update(p, 1));
        q.push(0, 0, Payload::Round);
        q.push(0, 1, Payload::Arrival(0));
        q.push(0, 0, Payload::Arrival(0));
        let order: Vec<_> = std::iter::from_fn(|| q.pop_until(5)).map(|e| (e.tick, e.kind, e.client)).collect();
        assert_eq!(
            order,
            [
                (0, EventKind::InstanceArrival, 0),
                (0, EventKind::InstanceArrival, 1),
                (0, EventKind::LocalRound, 0),
                (0, EventKind::ClientUpdate, 1),
                (0, EventKind::Broadcast, 2),
                (1, EventKind::InstanceArrival, 0),
            ]
        );
    }
}
