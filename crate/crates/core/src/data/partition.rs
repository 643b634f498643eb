use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TaggedInstance;
use crate::error::{Error, Result};
use crate::seed;

/// Order in which each client observes its own data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamOrder {
    /// Uniformly shuffled, so the stream is stationary in time.
    IidShuffled,
    /// Grouped by ascending concept id, shuffled within each concept.
    ConceptSorted,
    /// Exactly as the source produced it.
    AsGenerated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// One training stream per client.
    pub clients: Vec<Vec<TaggedInstance>>,
    /// Held-out data of the test source.
    pub test: Vec<TaggedInstance>,
    pub test_source: usize,
    /// Source index behind each client stream.
    pub client_sources: Vec<usize>,
    /// Sources left out because there were more than `client_count + 1`.
    pub unused_sources: Vec<usize>,
}

/// Leave-one-source-out split.
///
/// `sources[test_source]` becomes the test split; the `client_count` sources
/// that follow it (cyclically) become client streams ordered per `order`.
pub fn partition(
    sources: Vec<Vec<TaggedInstance>>,
    client_count: usize,
    test_source: usize,
    order: StreamOrder,
    seed: u64,
) -> Result<Partition> {
    if client_count == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if sources.len() < client_count + 1 {
        return Err(Error::Config(format!(
            "{client_count} clients plus a test source need {} sources, only {} available",
            client_count + 1,
            sources.len()
        )));
    }
    if test_source >= sources.len() {
        return Err(Error::Config(format!(
            "test source {test_source} out of range for {} sources",
            sources.len()
        )));
    }
    let n = sources.len();
    let mut slots: Vec<Option<Vec<TaggedInstance>>> = sources.into_iter().map(Some).collect();
    let test = slots[test_source].take().expect("present");
    let client_sources: Vec<usize> = (1..=client_count).map(|i| (test_source + i) % n).collect();
    let unused_sources: Vec<usize> = (client_count + 1..n).map(|i| (test_source + i) % n).collect();

    let clients = client_sources
        .iter()
        .map(|&s| {
            let mut stream = slots[s].take().expect("each source used once");
            let mut rng = seed::rng(seed::derive(seed, s as u64));
            match order {
                StreamOrder::IidShuffled => stream.shuffle(&mut rng),
                StreamOrder::ConceptSorted => {
                    stream.shuffle(&mut rng);
                    stream.sort_by_key(|t| t.origin_concept);
                }
                StreamOrder::AsGenerated => {}
            }
            stream
        })
        .collect();
    Ok(Partition {
        clients,
        test,
        test_source,
        client_sources,
        unused_sources,
    })
}
