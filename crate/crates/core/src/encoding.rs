//! Local observation of a router and its `N × 3` indicator encoding.

use thiserror::Error;

use crate::topology::{NodeId, Topology};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("node {index} out of range for {node_count} nodes")]
pub struct EncodingError {
    pub index: usize,
    pub node_count: usize,
}

/// What router `current` sees when deciding on its head-of-line packet.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    pub current: NodeId,
    pub neighbors: Vec<NodeId>,
    pub destination: NodeId,
}

impl Observation {
    pub fn at(topology: &Topology, current: NodeId, destination: NodeId) -> Self {
        Self {
            current,
            neighbors: topology.neighbor_vec(current),
            destination,
        }
    }
}

/// Row `j` is `[is_current(j), is_neighbor(j), is_destination(j)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: Vec<[f64; 3]>,
}

impl FeatureMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            rows: vec![[0.0; 3]; n],
        }
    }

    pub fn node_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, j: usize) -> &[f64; 3] {
        &self.rows[j]
    }

    pub fn rows(&self) -> &[[f64; 3]] {
        &self.rows
    }

    /// Row-major `N·3` copy.
    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| r.iter().copied()).collect()
    }

    pub fn column_sums(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for r in &self.rows {
            for c in 0..3 {
                s[c] += r[c];
            }
        }
        s
    }
}

pub fn encode(obs: &Observation, n: usize) -> Result<FeatureMatrix, EncodingError> {
    let check = |id: NodeId| {
        if id.0 < n {
            Ok(id.0)
        } else {
            Err(EncodingError {
                index: id.0,
                node_count: n,
            })
        }
    };
    let mut x = FeatureMatrix::zeros(n);
    x.rows[check(obs.current)?][0] = 1.0;
    for &j in &obs.neighbors {
        x.rows[check(j)?][1] = 1.0;
    }
    x.rows[check(obs.destination)?][2] = 1.0;
    Ok(x)
}
