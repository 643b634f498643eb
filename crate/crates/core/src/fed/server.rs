//! Aggregation server state.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParameterVector;

/// Sample-count weighted mean of parameter vectors.
///
/// Accumulated as a running mean, `acc += (w - acc) * n / (seen + n)`, so
/// that identical inputs come back bit for bit and a lone input is returned
/// unchanged.
pub fn weighted_average(updates: &[(&ParameterVector, usize)]) -> Result<ParameterVector> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::Precondition("no updates to aggregate".into()));
    };
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Precondition("aggregation weights sum to zero".into()));
    }
    let arch = first.arch();
    let mut acc = vec![0.0; first.len()];
    let mut seen = 0usize;
    for (params, n) in updates {
        if params.arch() != arch {
            return Err(Error::Input("updates disagree on model architecture".into()));
        }
        if *n == 0 {
            continue;
        }
        seen += n;
        let frac = *n as f64 / seen as f64;
        for (a, &w) in acc.iter_mut().zip(params.values()) {
            *a += (w - *a) * frac;
        }
    }
    ParameterVector::new(arch.clone(), acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub params: ParameterVector,
    pub samples: usize,
}

/// Global model plus the most recent contribution of every client.
#[derive(Debug, Clone)]
pub struct ServerState {
    global: ParameterVector,
    latest: BTreeMap<usize, ClientUpdate>,
    round: usize,
    comms_sent: u64,
    comms_received: u64,
}

impl ServerState {
    pub fn new(global: ParameterVector) -> Self {
        Self {
            global,
            latest: BTreeMap::new(),
            round: 0,
            comms_sent: 0,
            comms_received: 0,
        }
    }

    pub fn global(&self) -> &ParameterVector {
        &self.global
    }

    pub fn latest_update(&self, client: usize) -> Option<&ClientUpdate> {
        self.latest.get(&client)
    }

    pub fn known_clients(&self) -> impl Iterator<Item = usize> + '_ {
        self.latest.keys().copied()
    }

    /// Number of aggregations performed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn comms_sent(&self) -> u64 {
        self.comms_sent
    }

    pub fn comms_received(&self) -> u64 {
        self.comms_received
    }

    /// Stores a client's update, replacing whatever it sent before.
    pub fn receive(&mut self, client: usize, params: ParameterVector, samples: usize) -> Result<()> {
        if params.arch() != self.global.arch() {
            return Err(Error::Input(format!(
                "client {client} sent parameters for a different architecture"
            )));
        }
        self.comms_received += 1;
        self.latest.insert(client, ClientUpdate { params, samples });
        Ok(())
    }

    /// Forgets all stored updates (the synchronous baseline starts each round afresh).
    pub fn clear_updates(&mut self) {
        self.latest.clear();
    }

    /// `(client, n_j / N)` for every client holding an update.
    pub fn aggregation_weights(&self) -> Result<Vec<(usize, f64)>> {
        let total: usize = self.latest.values().map(|u| u.samples).sum();
        if total == 0 {
            return Err(Error::Precondition("no client has reported any samples".into()));
        }
        Ok(self
            .latest
            .iter()
            .map(|(&id, u)| (id, u.samples as f64 / total as f64))
            .collect())
    }

    /// Replaces the global model with the weighted mean of the stored updates.
    pub fn aggregate(&mut self) -> Result<&ParameterVector> {
        let updates: Vec<(&ParameterVector, usize)> =
            self.latest.values().map(|u| (&u.params, u.samples)).collect();
        self.global = weighted_average(&updates)?;
        self.round += 1;
        Ok(&self.global)
    }

    /// Copy of the global model for `client_count` recipients.
    pub fn broadcast(&mut self, client_count: usize) -> ParameterVector {
        self.comms_sent += client_count as u64;
        self.global.clone()
    }
}
