//! Network graph: routers, links and the derived neighborhood structures.
//!
//! Links are stored directed but every link loaded from a topology file or
//! produced by a generator is materialized in both directions with the same
//! transmission delay.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

/// Index of a router in `[0, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Hop distance used for nodes that cannot reach the destination.
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate link {u}-{v}")]
    DuplicateLink { line: usize, u: usize, v: usize },
    #[error("node index {index} out of range for {node_count} nodes")]
    NodeOutOfRange { index: usize, node_count: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("transmission delay must be positive and finite, got {0}")]
    BadDelay(f64),
    #[error("link {0}-{1} is not a grid edge")]
    NotAGridEdge(usize, usize),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("empty topology")]
    Empty,
}

/// Immutable directed graph of routers with per-link transmission delays.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    node_count: usize,
    /// Sorted neighbor lists with the delay of the outgoing link.
    adjacency: Vec<Vec<(NodeId, f64)>>,
    /// Closed neighborhoods `{i} ∪ neighbors(i)`, sorted.
    closed: Vec<Vec<NodeId>>,
}

impl Topology {
    /// Builds a topology from undirected links; each link is expanded into
    /// both directions.
    pub fn from_undirected(
        node_count: usize,
        links: &[(usize, usize, f64)],
    ) -> Result<Self, TopologyError> {
        let mut builder = Builder::new(node_count)?;
        for (k, &(u, v, g)) in links.iter().enumerate() {
            builder.add(u, v, g, k + 1)?;
        }
        Ok(builder.finish())
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.node_count).map(NodeId)
    }

    /// Open neighborhood of `i`, sorted by index.
    pub fn neighbors(&self, i: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency[i.0].iter().map(|&(j, _)| j)
    }

    pub fn neighbor_vec(&self, i: NodeId) -> Vec<NodeId> {
        self.neighbors(i).collect()
    }

    pub fn degree(&self, i: NodeId) -> usize {
        self.adjacency[i.0].len()
    }

    pub fn is_link(&self, u: NodeId, v: NodeId) -> bool {
        self.delay(u, v).is_some()
    }

    /// Transmission delay of the directed link `u -> v`, if present.
    pub fn delay(&self, u: NodeId, v: NodeId) -> Option<f64> {
        let row = &self.adjacency[u.0];
        row.binary_search_by(|(j, _)| j.cmp(&v))
            .ok()
            .map(|k| row[k].1)
    }

    /// Number of directed links.
    pub fn directed_link_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Undirected links `(u, v, g)` with `u < v`.
    pub fn undirected_links(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (u, row) in self.adjacency.iter().enumerate() {
            for &(v, g) in row {
                if u < v.0 {
                    out.push((u, v.0, g));
                }
            }
        }
        out
    }

    /// `{i} ∪ neighbors(i)`, sorted.
    pub fn closed_neighborhood(&self, i: NodeId) -> &[NodeId] {
        &self.closed[i.0]
    }

    /// Breadth-first hop distances from every node to `dst`, following
    /// directed links towards `dst`. Unreachable nodes get [`UNREACHABLE`].
    pub fn shortest_hops(&self, dst: NodeId) -> Vec<u32> {
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); self.node_count];
        for (u, row) in self.adjacency.iter().enumerate() {
            for &(v, _) in row {
                reverse[v.0].push(u);
            }
        }
        let mut hops = vec![UNREACHABLE; self.node_count];
        let mut queue = VecDeque::new();
        hops[dst.0] = 0;
        queue.push_back(dst.0);
        while let Some(v) = queue.pop_front() {
            for &u in &reverse[v] {
                if hops[u] == UNREACHABLE {
                    hops[u] = hops[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        hops
    }

    /// Hop tables for every destination: `table[dst][node]`.
    pub fn all_pairs_hops(&self) -> Vec<Vec<u32>> {
        self.nodes().map(|d| self.shortest_hops(d)).collect()
    }

    pub fn is_connected(&self) -> bool {
        self.node_count <= 1 || self.shortest_hops(NodeId(0)).iter().all(|&h| h != UNREACHABLE)
    }

    /// Row-stochastic consensus weights `D⁻¹A` where `A` carries self-loops.
    pub fn consensus_matrix(&self) -> ConsensusMatrix {
        let n = self.node_count;
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            let hood = &self.closed[i];
            let w = 1.0 / hood.len() as f64;
            for j in hood {
                weights[i * n + j.0] = w;
            }
        }
        ConsensusMatrix { n, weights }
    }

    /// Parses the plain-text topology format: first non-comment line is the
    /// node count, every further line is `u v delay`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut builder: Option<Builder> = None;
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match builder.as_mut() {
                None => {
                    if fields.len() != 1 {
                        return Err(parse_err(line_no, "expected node count"));
                    }
                    let n: usize = fields[0]
                        .parse()
                        .map_err(|_| parse_err(line_no, "invalid node count"))?;
                    builder = Some(Builder::new(n)?);
                }
                Some(b) => {
                    if fields.len() != 3 {
                        return Err(parse_err(line_no, "expected `u v delay`"));
                    }
                    let u: usize = fields[0]
                        .parse()
                        .map_err(|_| parse_err(line_no, "invalid node index"))?;
                    let v: usize = fields[1]
                        .parse()
                        .map_err(|_| parse_err(line_no, "invalid node index"))?;
                    let g: f64 = fields[2]
                        .parse()
                        .map_err(|_| parse_err(line_no, "invalid delay"))?;
                    b.add(u, v, g, line_no)?;
                }
            }
        }
        builder.map(Builder::finish).ok_or(TopologyError::Empty)
    }

    /// Serializes into the text format accepted by [`Topology::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.node_count);
        for (u, v, g) in self.undirected_links() {
            out.push_str(&format!("{u} {v} {g}\n"));
        }
        out
    }

    /// A `rows × cols` 4-connected grid with unit delays, minus the given
    /// undirected links. Node `(r, c)` has index `r * cols + c`.
    pub fn grid(rows: usize, cols: usize, removed: &[(usize, usize)]) -> Result<Self, TopologyError> {
        let n = rows * cols;
        let mut links: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for r in 0..rows {
            for c in 0..cols {
                let u = r * cols + c;
                if c + 1 < cols {
                    links.insert((u, u + 1), 1.0);
                }
                if r + 1 < rows {
                    links.insert((u, u + cols), 1.0);
                }
            }
        }
        for &(a, b) in removed {
            let key = (a.min(b), a.max(b));
            if links.remove(&key).is_none() {
                return Err(TopologyError::NotAGridEdge(a, b));
            }
        }
        let links: Vec<_> = links.into_iter().map(|((u, v), g)| (u, v, g)).collect();
        let t = Self::from_undirected(n, &links)?;
        if !t.is_connected() {
            return Err(TopologyError::Disconnected);
        }
        Ok(t)
    }

    /// Irregular 6×6 grid shipped as the default sample: two 3-column halves
    /// joined by two bridges, which creates a shared bottleneck for
    /// hop-minimal routes.
    pub fn irregular_6x6() -> Self {
        Self::parse(IRREGULAR_6X6).expect("bundled topology is valid")
    }
}

/// Text of the bundled irregular 6×6 topology.
pub const IRREGULAR_6X6: &str = include_str!("../data/irregular6x6.topo");

fn parse_err(line: usize, msg: &str) -> TopologyError {
    TopologyError::Parse {
        line,
        msg: msg.to_string(),
    }
}

struct Builder {
    node_count: usize,
    adjacency: Vec<BTreeMap<usize, f64>>,
}

impl Builder {
    fn new(node_count: usize) -> Result<Self, TopologyError> {
        if node_count == 0 {
            return Err(TopologyError::Empty);
        }
        Ok(Self {
            node_count,
            adjacency: vec![BTreeMap::new(); node_count],
        })
    }

    fn add(&mut self, u: usize, v: usize, g: f64, line: usize) -> Result<(), TopologyError> {
        for idx in [u, v] {
            if idx >= self.node_count {
                return Err(TopologyError::NodeOutOfRange {
                    index: idx,
                    node_count: self.node_count,
                });
            }
        }
        if u == v {
            return Err(TopologyError::SelfLoop(u));
        }
        if !(g.is_finite() && g > 0.0) {
            return Err(TopologyError::BadDelay(g));
        }
        if self.adjacency[u].contains_key(&v) {
            return Err(TopologyError::DuplicateLink { line, u, v });
        }
        self.adjacency[u].insert(v, g);
        self.adjacency[v].insert(u, g);
        Ok(())
    }

    fn finish(self) -> Topology {
        let adjacency: Vec<Vec<(NodeId, f64)>> = self
            .adjacency
            .into_iter()
            .map(|row| row.into_iter().map(|(j, g)| (NodeId(j), g)).collect())
            .collect();
        let closed = adjacency
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut hood: Vec<NodeId> = row.iter().map(|&(j, _)| j).collect();
                hood.push(NodeId(i));
                hood.sort();
                hood
            })
            .collect();
        Topology {
            node_count: self.node_count,
            adjacency,
            closed,
        }
    }
}

/// Dense `N × N` row-stochastic weight matrix used for neighborhood
/// parameter averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrix {
    n: usize,
    weights: Vec<f64>,
}

impl ConsensusMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    /// Nonzero entries `(j, W[i][j])` of row `i`.
    pub fn row_support(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(j, &w)| (j, w))
    }

    /// `y = W x` for a vector of per-node scalars.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row_support(i).map(|(j, w)| w * x[j]).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[usize]) -> Vec<NodeId> {
        ids.iter().copied().map(NodeId).collect()
    }

    #[test]
    fn parse_grid_corner() {
        let t = Topology::parse("# corner\n36\n0 1 1.0\n0 6 1.0\n").unwrap();
        assert_eq!(t.neighbor_vec(NodeId(0)), set(&[1, 6]));
        assert_eq!(t.neighbor_vec(NodeId(6)), set(&[0]));
        assert_eq!(t.delay(NodeId(6), NodeId(0)), Some(1.0));
    }

    #[test]
    fn parse_single_node() {
        let t = Topology::parse("1\n").unwrap();
        assert_eq!(t.node_count(), 1);
        assert_eq!(t.degree(NodeId(0)), 0);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(Topology::parse("2\n0 0 1.0"), Err(TopologyError::SelfLoop(0)));
        assert_eq!(
            Topology::parse("2\n0 1 1.0\n1 0 2.0\n"),
            Err(TopologyError::DuplicateLink { line: 3, u: 1, v: 0 })
        );
        assert_eq!(
            Topology::parse("2\n0 5 1.0"),
            Err(TopologyError::NodeOutOfRange { index: 5, node_count: 2 })
        );
        assert!(matches!(
            Topology::parse("3\n0 1\n"),
            Err(TopologyError::Parse { line: 2, .. })
        ));
        assert!(matches!(Topology::parse("3\n0 1 -1"), Err(TopologyError::BadDelay(_))));
        assert_eq!(Topology::parse("# nothing\n"), Err(TopologyError::Empty));
    }

    #[test]
    fn text_roundtrip() {
        let t = Topology::parse("4\n0 1 1.5\n1 2 1\n2 3 0.25 # slow\n").unwrap();
        assert_eq!(Topology::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn closed_neighborhoods() {
        let grid = Topology::grid(6, 6, &[]).unwrap();
        assert_eq!(grid.closed_neighborhood(NodeId(0)), set(&[0, 1, 6]).as_slice());
        let iso = Topology::parse("3\n0 1 1\n").unwrap();
        assert_eq!(iso.closed_neighborhood(NodeId(2)), set(&[2]).as_slice());
        let k3 = Topology::parse("3\n0 1 1\n1 2 1\n0 2 1\n").unwrap();
        assert_eq!(k3.closed_neighborhood(NodeId(1)), set(&[0, 1, 2]).as_slice());
    }

    #[test]
    fn hops() {
        let grid = Topology::grid(6, 6, &[]).unwrap();
        let h = grid.shortest_hops(NodeId(35));
        assert_eq!(h[0], 10);
        assert_eq!(h[35], 0);
        let line = Topology::parse("2\n0 1 1\n").unwrap();
        assert_eq!(line.shortest_hops(NodeId(1)), vec![1, 0]);
        let split = Topology::parse("3\n0 1 1\n").unwrap();
        assert_eq!(split.shortest_hops(NodeId(0))[2], UNREACHABLE);
    }

    #[test]
    fn consensus_rows() {
        let grid = Topology::grid(6, 6, &[]).unwrap();
        let w = grid.consensus_matrix();
        let third = 1.0 / 3.0;
        for j in 0..36 {
            let expected = if [0, 1, 6].contains(&j) { third } else { 0.0 };
            assert_eq!(w.get(0, j), expected);
        }
        let iso = Topology::parse("2\n").unwrap();
        assert_eq!(iso.consensus_matrix().get(1, 1), 1.0);
    }

    #[test]
    fn grids() {
        let g = Topology::grid(6, 6, &[]).unwrap();
        assert_eq!(g.node_count(), 36);
        assert_eq!(g.undirected_links().len(), 60);
        let g = Topology::grid(2, 2, &[]).unwrap();
        assert_eq!(g.neighbor_vec(NodeId(0)), set(&[1, 2]));
        let g = Topology::grid(6, 6, &[(0, 1)]).unwrap();
        assert_eq!(g.neighbor_vec(NodeId(0)), set(&[6]));
        assert_eq!(Topology::grid(2, 2, &[(0, 3)]), Err(TopologyError::NotAGridEdge(0, 3)));
        assert_eq!(
            Topology::grid(1, 3, &[(0, 1)]),
            Err(TopologyError::Disconnected)
        );
    }

    #[test]
    fn bundled_irregular_grid() {
        let t = Topology::irregular_6x6();
        assert_eq!(t.node_count(), 36);
        assert_eq!(t.neighbor_vec(NodeId(0)), set(&[1, 6]));
        assert!(t.is_connected());
    }
}
