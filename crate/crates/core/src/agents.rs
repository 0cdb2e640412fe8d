//! Routing agents: the neural Q-routing agent and the baselines.
//!
//! Every policy here implements [`RoutingPolicy`] for all routers at once;
//! the router making a decision is `obs.current`. Learners additionally
//! implement [`Learner`], which the harness calls with each step's
//! feedback.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoding::{encode, FeatureMatrix, Observation};
use crate::qnet::{max_allowed, select_action, ParamSet, QModel, QNetError};
use crate::sim::{DeliveryFeedback, NetworkView, RoutingPolicy};
use crate::topology::{NodeId, Topology, UNREACHABLE};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("batch size {batch} exceeds memory capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },
    #[error("destination {dst} unreachable from {from}")]
    Unreachable { from: NodeId, dst: NodeId },
    #[error(transparent)]
    QNet(#[from] QNetError),
}

/// One experience tuple `(s, a, r, s̃, f)` with the optional logged next
/// action and the next hop's reported target value.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Observation,
    pub action: NodeId,
    pub reward: f64,
    pub next_state: Observation,
    pub terminal: bool,
    pub next_action: Option<NodeId>,
    pub next_hop_target_value: f64,
}

impl From<&DeliveryFeedback> for Transition {
    fn from(fb: &DeliveryFeedback) -> Self {
        Self {
            state: fb.state.clone(),
            action: fb.action,
            reward: fb.reward,
            next_state: fb.next_state.clone(),
            terminal: fb.terminal,
            next_action: fb.next_action,
            next_hop_target_value: fb.next_hop_target_value,
        }
    }
}

impl Transition {
    /// `a ∈ neighbors(s.current)` and `f = 1 ⇒ a = s.destination`.
    pub fn is_consistent(&self) -> bool {
        self.state.neighbors.contains(&self.action)
            && (!self.terminal || self.action == self.state.destination)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    /// Overwrites the oldest entry once full; sampled on demand.
    Ring,
    /// Yields one batch as soon as it is full, then empties.
    FillAndClear,
}

#[derive(Debug, Clone)]
pub struct ReplayMemory {
    buffer: Vec<Transition>,
    capacity: usize,
    mode: MemoryMode,
    next_slot: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize, mode: MemoryMode) -> Self {
        Self {
            buffer: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            mode,
            next_slot: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mode(&self) -> MemoryMode {
        self.mode
    }

    pub fn entries(&self) -> &[Transition] {
        &self.buffer
    }

    pub fn clear(&mut self) {
        self.buffer.clear();
        self.next_slot = 0;
    }

    pub fn store(&mut self, t: Transition) {
        if self.buffer.len() < self.capacity {
            self.buffer.push(t);
        } else {
            self.buffer[self.next_slot] = t;
        }
        self.next_slot = (self.next_slot + 1) % self.capacity;
    }

    /// Uniform batch of `n` distinct entries, or `None` while fewer than `n`
    /// are stored.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Option<Vec<Transition>>, AgentError> {
        if n > self.capacity {
            return Err(AgentError::BatchTooLarge {
                batch: n,
                capacity: self.capacity,
            });
        }
        if self.buffer.len() < n {
            return Ok(None);
        }
        let picks = index::sample(rng, self.buffer.len(), n);
        Ok(Some(picks.iter().map(|k| self.buffer[k].clone()).collect()))
    }

    /// Stores `t`. In fill-and-clear mode a full memory yields a batch of
    /// `n` and is emptied; ring memories never sample here.
    pub fn store_and_sample<R: Rng + ?Sized>(
        &mut self,
        t: Transition,
        n: usize,
        rng: &mut R,
    ) -> Result<Option<Vec<Transition>>, AgentError> {
        if n > self.capacity {
            return Err(AgentError::BatchTooLarge {
                batch: n,
                capacity: self.capacity,
            });
        }
        self.store(t);
        if self.mode == MemoryMode::FillAndClear && self.buffer.len() == self.capacity {
            let batch = self.sample(n, rng)?;
            self.clear();
            return Ok(batch);
        }
        Ok(None)
    }
}

/// Something that adapts from per-step delivery feedback.
pub trait Learner: RoutingPolicy {
    fn learn(&mut self, feedbacks: &[DeliveryFeedback]);

    /// Freezes or unfreezes learning; acting is unaffected.
    fn set_learning(&mut self, _enabled: bool) {}
}

/// Routes along precomputed hop-minimal paths, smallest index on ties.
#[derive(Debug, Clone)]
pub struct ShortestPath {
    hops: Vec<Vec<u32>>,
}

impl ShortestPath {
    pub fn new(topology: &Topology) -> Self {
        Self {
            hops: topology.all_pairs_hops(),
        }
    }

    pub fn act(&self, obs: &Observation) -> Result<NodeId, AgentError> {
        let table = &self.hops[obs.destination.0];
        obs.neighbors
            .iter()
            .filter(|j| table[j.0] != UNREACHABLE)
            .min_by_key(|j| (table[j.0], j.0))
            .copied()
            .ok_or(AgentError::Unreachable {
                from: obs.current,
                dst: obs.destination,
            })
    }
}

impl RoutingPolicy for ShortestPath {
    fn next_hop(&mut self, _: &NetworkView<'_>, obs: &Observation) -> NodeId {
        self.act(obs).expect("destination reachable")
    }
}

impl Learner for ShortestPath {
    fn learn(&mut self, _: &[DeliveryFeedback]) {}
}

/// Queue-aware reference router. At every dispatch it runs Dijkstra over
/// the current network state: each hop costs `service_time + g` and every
/// intermediate router adds its backlog times the service time. The packet
/// takes the first hop of the cheapest path. This is a heuristic stand-in
/// for an instantaneous optimal controller, not an exact one.
#[derive(Debug, Clone, Default)]
pub struct GlobalRouting;

impl GlobalRouting {
    pub fn new() -> Self {
        Self
    }

    /// Cost-to-go from being queued at each node to reaching `dst`.
    pub fn cost_to_go(view: &NetworkView<'_>, dst: NodeId) -> Vec<f64> {
        let t = view.topology;
        let n = t.node_count();
        let mut cost = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        cost[dst.0] = 0.0;
        heap.push(Reverse((OrdF64(0.0), dst.0)));
        while let Some(Reverse((OrdF64(c), w))) = heap.pop() {
            if done[w] {
                continue;
            }
            done[w] = true;
            // Links are symmetric, so predecessors of w are its neighbors.
            for v in t.neighbors(NodeId(w)) {
                if done[v.0] {
                    continue;
                }
                let g = t.delay(v, NodeId(w)).expect("symmetric link");
                let through = view.estimated_queue_delay(v) + view.service_time + g + c;
                if through < cost[v.0] {
                    cost[v.0] = through;
                    heap.push(Reverse((OrdF64(through), v.0)));
                }
            }
        }
        cost
    }

    pub fn act(&self, view: &NetworkView<'_>, obs: &Observation) -> Result<NodeId, AgentError> {
        let cost = Self::cost_to_go(view, obs.destination);
        let t = view.topology;
        let mut best: Option<(f64, NodeId)> = None;
        for &v in &obs.neighbors {
            if !cost[v.0].is_finite() {
                continue;
            }
            let total = view.service_time + t.delay(obs.current, v).expect("neighbor") + cost[v.0];
            if best.map_or(true, |(b, _)| total < b) {
                best = Some((total, v));
            }
        }
        best.map(|(_, v)| v).ok_or(AgentError::Unreachable {
            from: obs.current,
            dst: obs.destination,
        })
    }
}

impl RoutingPolicy for GlobalRouting {
    fn next_hop(&mut self, view: &NetworkView<'_>, obs: &Observation) -> NodeId {
        self.act(view, obs).expect("destination reachable")
    }
}

impl Learner for GlobalRouting {
    fn learn(&mut self, _: &[DeliveryFeedback]) {}
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Tabular `Q[x][d][y]` over the neighbors `y` of each router `x`. Values
/// are negative delivery-time estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n: usize,
    neighbors: Vec<Vec<NodeId>>,
    /// `values[x][d * deg(x) + k]` for the `k`-th neighbor of `x`.
    values: Vec<Vec<f64>>,
}

impl QTable {
    pub fn new(topology: &Topology, init: f64) -> Self {
        let n = topology.node_count();
        let neighbors: Vec<Vec<NodeId>> = topology.nodes().map(|x| topology.neighbor_vec(x)).collect();
        let values = neighbors.iter().map(|nb| vec![init; n * nb.len()]).collect();
        Self { n, neighbors, values }
    }

    fn slot(&self, x: NodeId, y: NodeId) -> usize {
        self.neighbors[x.0]
            .binary_search(&y)
            .unwrap_or_else(|_| panic!("{y} is not a neighbor of {x}"))
    }

    pub fn get(&self, x: NodeId, d: NodeId, y: NodeId) -> f64 {
        let deg = self.neighbors[x.0].len();
        self.values[x.0][d.0 * deg + self.slot(x, y)]
    }

    pub fn set(&mut self, x: NodeId, d: NodeId, y: NodeId, v: f64) {
        let deg = self.neighbors[x.0].len();
        let k = self.slot(x, y);
        self.values[x.0][d.0 * deg + k] = v;
    }

    fn row(&self, x: NodeId, d: NodeId) -> &[f64] {
        let deg = self.neighbors[x.0].len();
        &self.values[x.0][d.0 * deg..(d.0 + 1) * deg]
    }

    /// `max_y Q[x][d][y]`, or `None` for an isolated router.
    pub fn best_value(&self, x: NodeId, d: NodeId) -> Option<f64> {
        self.row(x, d).iter().copied().reduce(f64::max)
    }

    /// Greedy neighbor, ties to the smallest index.
    pub fn greedy(&self, x: NodeId, d: NodeId) -> Option<NodeId> {
        let row = self.row(x, d);
        let mut best: Option<usize> = None;
        for (k, &v) in row.iter().enumerate() {
            if best.map_or(true, |b| v > row[b]) {
                best = Some(k);
            }
        }
        best.map(|k| self.neighbors[x.0][k])
    }

    /// Greedy next hop for every `(x, d)` with `x != d`, row-major.
    pub fn greedy_snapshot(&self) -> Vec<Option<NodeId>> {
        let mut out = Vec::with_capacity(self.n * self.n);
        for x in 0..self.n {
            for d in 0..self.n {
                out.push(if x == d {
                    None
                } else {
                    self.greedy(NodeId(x), NodeId(d))
                });
            }
        }
        out
    }
}

/// One Q-routing update:
/// `Q[x][d][y] += η·(−(q + g) + γ·next − Q[x][d][y])` where `next` is
/// `max_y' Q[y][d][y']`, or 0 on the terminal hop (`next_value = None`).
#[allow(clippy::too_many_arguments)]
pub fn qrouting_update(
    table: &mut QTable,
    x: NodeId,
    d: NodeId,
    y: NodeId,
    q: f64,
    g: f64,
    next_value: Option<f64>,
    eta: f64,
    gamma: f64,
) {
    let reward = -(q + g);
    let old = table.get(x, d, y);
    let target = reward + gamma * next_value.unwrap_or(0.0);
    table.set(x, d, y, old + eta * (target - old));
}

/// Boyan–Littman style Q-routing with the reward sign of the rest of the
/// crate.
#[derive(Debug, Clone)]
pub struct QRouting {
    pub table: QTable,
    pub eta: f64,
    pub gamma: f64,
    learning: bool,
}

impl QRouting {
    pub const DEFAULT_ETA: f64 = 0.7;

    pub fn new(topology: &Topology, eta: f64, gamma: f64) -> Self {
        Self {
            table: QTable::new(topology, 0.0),
            eta,
            gamma,
            learning: true,
        }
    }

    pub fn learn_from(&mut self, fb: &DeliveryFeedback) {
        let old = self.table.get(fb.sender, fb.state.destination, fb.action);
        let next = if fb.terminal {
            0.0
        } else {
            fb.next_hop_target_value
        };
        let target = fb.reward + self.gamma * next;
        self.table.set(
            fb.sender,
            fb.state.destination,
            fb.action,
            old + self.eta * (target - old),
        );
    }
}

impl RoutingPolicy for QRouting {
    fn next_hop(&mut self, _: &NetworkView<'_>, obs: &Observation) -> NodeId {
        self.table
            .greedy(obs.current, obs.destination)
            .expect("router has neighbors")
    }

    fn next_hop_value(&mut self, obs: &Observation) -> f64 {
        self.table.best_value(obs.current, obs.destination).unwrap_or(0.0)
    }

    fn next_action_hint(&mut self, obs: &Observation) -> Option<NodeId> {
        self.table.greedy(obs.current, obs.destination)
    }
}

impl Learner for QRouting {
    fn learn(&mut self, feedbacks: &[DeliveryFeedback]) {
        if self.learning {
            for fb in feedbacks {
                self.learn_from(fb);
            }
        }
    }

    fn set_learning(&mut self, enabled: bool) {
        self.learning = enabled;
    }
}

/// Memoized Q-vectors per `(current, destination)`. The observation of a
/// router is fully determined by that pair, so the cache is exact until the
/// parameters change.
#[derive(Debug, Clone)]
pub struct QCache {
    n: usize,
    entries: Vec<Option<Box<[f64]>>>,
}

impl QCache {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: vec![None; n * n],
        }
    }

    pub fn invalidate(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
    }

    pub fn get_or_insert_with(
        &mut self,
        obs: &Observation,
        compute: impl FnOnce() -> Vec<f64>,
    ) -> &[f64] {
        let key = obs.current.0 * self.n + obs.destination.0;
        self.entries[key].get_or_insert_with(|| compute().into_boxed_slice())
    }
}

/// A neural Q-routing agent: main and target parameters of a shared model
/// architecture, with memoized greedy evaluation.
#[derive(Debug, Clone)]
pub struct NeuralAgent<M: QModel> {
    model: Arc<M>,
    params: ParamSet,
    target: ParamSet,
    q_cache: QCache,
    target_cache: QCache,
}

impl<M: QModel> NeuralAgent<M> {
    pub fn new(model: Arc<M>, params: ParamSet) -> Self {
        let n = model.node_count();
        Self {
            model,
            target: params.clone(),
            params,
            q_cache: QCache::new(n),
            target_cache: QCache::new(n),
        }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn target(&self) -> &ParamSet {
        &self.target
    }

    pub fn set_params(&mut self, p: ParamSet) {
        self.params = p;
        self.q_cache.invalidate();
    }

    pub fn set_target(&mut self, p: ParamSet) {
        self.target = p;
        self.target_cache.invalidate();
    }

    pub fn features(&self, obs: &Observation) -> FeatureMatrix {
        encode(obs, self.model.node_count()).expect("observation within topology")
    }

    pub fn q_values(&mut self, obs: &Observation) -> &[f64] {
        let (model, params) = (&self.model, &self.params);
        let n = model.node_count();
        self.q_cache.get_or_insert_with(obs, || {
            model.q_values(params, &encode(obs, n).expect("observation within topology"))
        })
    }

    pub fn target_q_values(&mut self, obs: &Observation) -> &[f64] {
        let (model, target) = (&self.model, &self.target);
        let n = model.node_count();
        self.target_cache.get_or_insert_with(obs, || {
            model.q_values(target, &encode(obs, n).expect("observation within topology"))
        })
    }

    /// Greedy next hop over `neighbors(current)`.
    pub fn act(&mut self, obs: &Observation) -> Result<NodeId, AgentError> {
        let neighbors = obs.neighbors.clone();
        let q = self.q_values(obs);
        Ok(select_action(q, &neighbors)?)
    }

    /// `max_a' Q(obs, a'; w_target)` over `neighbors(current)`.
    pub fn target_max(&mut self, obs: &Observation) -> f64 {
        let neighbors = obs.neighbors.clone();
        let q = self.target_q_values(obs);
        max_allowed(q, &neighbors).unwrap_or(0.0)
    }

    /// `Q(obs, a; w_target)`.
    pub fn target_value_of(&mut self, obs: &Observation, a: NodeId) -> f64 {
        self.target_q_values(obs)[a.0]
    }
}

/// ε-greedy wrapper shared by the neural paradigms: explores with
/// probability `epsilon`, otherwise defers to the greedy choice.
pub fn epsilon_greedy(
    rng: &mut ChaCha8Rng,
    epsilon: f64,
    obs: &Observation,
    greedy: impl FnOnce() -> NodeId,
) -> NodeId {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        obs.neighbors[rng.gen_range(0..obs.neighbors.len())]
    } else {
        greedy()
    }
}
