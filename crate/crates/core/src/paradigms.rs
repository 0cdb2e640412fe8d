//! Training paradigms for the neural routers.
//!
//! - [`Centralized`]: one model, one shared ring replay memory, targets
//!   from the shared target network, one gradient step every `train_period`
//!   simulation steps.
//! - [`Federated`]: per-router fill-and-clear memories; each local gradient
//!   is applied to the global model as soon as it is uploaded, in the order
//!   the simulator delivers feedback, and the uploading router resyncs to
//!   the global model.
//! - [`Cooperated`]: per-router models that take local gradient steps into
//!   an auxiliary copy and then average the latest auxiliary copies of their
//!   closed neighborhood with the consensus weights, every step.
//!
//! Decentralized targets use the next hop's reported value carried in the
//! feedback, never the next hop's parameters.

use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{epsilon_greedy, Learner, MemoryMode, NeuralAgent, ReplayMemory, Transition};
use crate::encoding::{encode, Observation};
use crate::qnet::{backward, soft_update, td_target, Gradient, Hyperparams, ParamSet, QModel, TrainItem};
use crate::sim::{DeliveryFeedback, NetworkView, RoutingPolicy};
use crate::topology::{ConsensusMatrix, NodeId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Centralized,
    Federated,
    Cooperated,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [Paradigm::Centralized, Paradigm::Federated, Paradigm::Cooperated];

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Centralized => "centralized",
            Paradigm::Federated => "federated",
            Paradigm::Cooperated => "cooperated",
        }
    }
}

impl FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centralized" => Ok(Paradigm::Centralized),
            "federated" => Ok(Paradigm::Federated),
            "cooperated" => Ok(Paradigm::Cooperated),
            other => Err(format!("unknown paradigm `{other}`")),
        }
    }
}

/// Settings shared by all paradigms.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub hyper: Hyperparams,
    /// Centralized ring memory capacity.
    pub central_memory: usize,
    /// Centralized: simulation steps between gradient steps.
    pub train_period: usize,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn new(hyper: Hyperparams, seed: u64) -> Self {
        Self {
            hyper,
            central_memory: 10_000,
            train_period: 4,
            seed,
        }
    }
}

fn items_for(model: &impl QModel, batch: &[Transition], targets: &[f64]) -> Vec<TrainItem> {
    let n = model.node_count();
    batch
        .iter()
        .zip(targets)
        .map(|(t, &y)| TrainItem {
            features: encode(&t.state, n).expect("observation within topology"),
            action: t.action,
            target: y,
        })
        .collect()
}

/// Gradient of the TD loss on `batch` against precomputed `targets`.
pub fn batch_gradient<M: QModel>(
    model: &M,
    params: &ParamSet,
    batch: &[Transition],
    targets: &[f64],
) -> (f64, Gradient) {
    backward(model, params, &items_for(model, batch, targets))
}

/// Decentralized target: `r + γ·(reported next-hop value)`, or `r` on the
/// terminal hop.
pub fn feedback_target(t: &Transition, gamma: f64) -> f64 {
    td_target(t.reward, t.next_hop_target_value, t.terminal, gamma)
}

/// Single shared model trained from a central memory.
#[derive(Debug, Clone)]
pub struct Centralized<M: QModel> {
    agent: NeuralAgent<M>,
    memory: ReplayMemory,
    cfg: TrainingConfig,
    rng: ChaCha8Rng,
    steps: u64,
    updates: u64,
    learning: bool,
}

impl<M: QModel> Centralized<M> {
    pub fn new(model: Arc<M>, params: ParamSet, cfg: TrainingConfig) -> Self {
        Self {
            agent: NeuralAgent::new(model, params),
            memory: ReplayMemory::new(cfg.central_memory, MemoryMode::Ring),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC3A7),
            cfg,
            steps: 0,
            updates: 0,
            learning: true,
        }
    }

    pub fn agent(&self) -> &NeuralAgent<M> {
        &self.agent
    }

    pub fn agent_mut(&mut self) -> &mut NeuralAgent<M> {
        &mut self.agent
    }

    pub fn memory(&self) -> &ReplayMemory {
        &self.memory
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// One gradient step on `batch` with the given targets, followed by the
    /// soft target update.
    pub fn apply_batch(&mut self, batch: &[Transition], targets: &[f64]) -> f64 {
        let (loss, grad) = batch_gradient(self.agent.model(), self.agent.params(), batch, targets);
        let mut p = self.agent.params().clone();
        p.add_scaled(&grad, -self.cfg.hyper.step_size).expect("same layout");
        let target = soft_update(self.agent.target(), &p, self.cfg.hyper.tau).expect("same layout");
        self.agent.set_params(p);
        self.agent.set_target(target);
        self.updates += 1;
        loss
    }

    /// Targets `r + γ·max_a' Q(s̃, a'; w_target)·(1 − f)` with the shared
    /// target network.
    pub fn bellman_targets(&mut self, batch: &[Transition]) -> Vec<f64> {
        let gamma = self.cfg.hyper.gamma;
        batch
            .iter()
            .map(|t| {
                let next = if t.terminal {
                    0.0
                } else {
                    self.agent.target_max(&t.next_state)
                };
                td_target(t.reward, next, t.terminal, gamma)
            })
            .collect()
    }

    /// Samples a batch from the central memory and trains on it. Returns the
    /// loss, or `None` when the memory holds fewer than a batch.
    pub fn train_once(&mut self) -> Option<f64> {
        let batch = self
            .memory
            .sample(self.cfg.hyper.batch_size, &mut self.rng)
            .expect("batch fits the memory")?;
        let targets = self.bellman_targets(&batch);
        Some(self.apply_batch(&batch, &targets))
    }

    pub fn store(&mut self, t: Transition) {
        self.memory.store(t);
    }
}

impl<M: QModel> RoutingPolicy for Centralized<M> {
    fn next_hop(&mut self, _: &NetworkView<'_>, obs: &Observation) -> NodeId {
        let eps = if self.learning { self.cfg.hyper.epsilon } else { 0.0 };
        let agent = &mut self.agent;
        epsilon_greedy(&mut self.rng, eps, obs, || agent.act(obs).expect("router has neighbors"))
    }

    fn next_hop_value(&mut self, obs: &Observation) -> f64 {
        self.agent.target_max(obs)
    }
}

impl<M: QModel> Learner for Centralized<M> {
    fn learn(&mut self, feedbacks: &[DeliveryFeedback]) {
        if !self.learning {
            return;
        }
        for fb in feedbacks {
            self.memory.store(Transition::from(fb));
        }
        self.steps += 1;
        if self.steps % self.cfg.train_period.max(1) as u64 == 0 {
            self.train_once();
        }
    }

    fn set_learning(&mut self, enabled: bool) {
        self.learning = enabled;
    }
}

/// Local models synchronized through a global model that applies uploaded
/// gradients one at a time.
#[derive(Debug, Clone)]
pub struct Federated<M: QModel> {
    global: ParamSet,
    agents: Vec<NeuralAgent<M>>,
    memories: Vec<ReplayMemory>,
    cfg: TrainingConfig,
    rng: ChaCha8Rng,
    updates: u64,
    learning: bool,
}

impl<M: QModel> Federated<M> {
    pub fn new(model: Arc<M>, params: ParamSet, cfg: TrainingConfig) -> Self {
        let n = model.node_count();
        let agents = (0..n).map(|_| NeuralAgent::new(model.clone(), params.clone())).collect();
        let memories = (0..n)
            .map(|_| ReplayMemory::new(cfg.hyper.memory_capacity, MemoryMode::FillAndClear))
            .collect();
        Self {
            global: params,
            agents,
            memories,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xFEDE),
            cfg,
            updates: 0,
            learning: true,
        }
    }

    pub fn global(&self) -> &ParamSet {
        &self.global
    }

    pub fn agent(&self, i: NodeId) -> &NeuralAgent<M> {
        &self.agents[i.0]
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Stores one transition of router `i`; when its memory fills, the local
    /// gradient updates the global model and router `i` resyncs.
    pub fn observe(&mut self, i: NodeId, t: Transition) {
        let n = self.cfg.hyper.batch_size;
        let batch = self.memories[i.0]
            .store_and_sample(t, n, &mut self.rng)
            .expect("batch fits the memory");
        if let Some(batch) = batch {
            self.upload(i, &batch);
        }
    }

    /// Applies router `i`'s gradient on `batch` to the global model.
    pub fn upload(&mut self, i: NodeId, batch: &[Transition]) {
        let gamma = self.cfg.hyper.gamma;
        let targets: Vec<f64> = batch.iter().map(|t| feedback_target(t, gamma)).collect();
        let agent = &mut self.agents[i.0];
        let fresh = std::env::var("FED_FRESH").is_ok();
        let at = if fresh { &self.global } else { agent.params() };
        let (_, grad) = batch_gradient(agent.model(), at, batch, &targets);
        let a: f64 = std::env::var("FED_ALPHA").ok().and_then(|v| v.parse().ok()).unwrap_or(self.cfg.hyper.step_size);
        self.global
            .add_scaled(&grad, -a)
            .expect("same layout");
        agent.set_params(self.global.clone());
        let target = soft_update(agent.target(), agent.params(), self.cfg.hyper.tau).expect("same layout");
        agent.set_target(target);
        self.updates += 1;
    }
}

impl<M: QModel> RoutingPolicy for Federated<M> {
    fn next_hop(&mut self, _: &NetworkView<'_>, obs: &Observation) -> NodeId {
        let eps = if self.learning { self.cfg.hyper.epsilon } else { 0.0 };
        let agent = &mut self.agents[obs.current.0];
        epsilon_greedy(&mut self.rng, eps, obs, || agent.act(obs).expect("router has neighbors"))
    }

    fn next_hop_value(&mut self, obs: &Observation) -> f64 {
        self.agents[obs.current.0].target_max(obs)
    }
}

impl<M: QModel> Learner for Federated<M> {
    fn learn(&mut self, feedbacks: &[DeliveryFeedback]) {
        if !self.learning {
            return;
        }
        for fb in feedbacks {
            self.observe(fb.sender, Transition::from(fb));
        }
    }

    fn set_learning(&mut self, enabled: bool) {
        self.learning = enabled;
    }
}

/// Neighborhood-averaged local models.
#[derive(Debug, Clone)]
pub struct Cooperated<M: QModel> {
    agents: Vec<NeuralAgent<M>>,
    memories: Vec<ReplayMemory>,
    /// Latest auxiliary parameters `w̃_j` shared by each router.
    aux: Vec<ParamSet>,
    /// Routers whose `w̃` changed since the last consensus.
    fresh: Vec<bool>,
    /// Whether any consensus has run; the first one touches every router.
    synced: bool,
    weights: ConsensusMatrix,
    cfg: TrainingConfig,
    rng: ChaCha8Rng,
    updates: u64,
    learning: bool,
}

impl<M: QModel> Cooperated<M> {
    /// All routers start from the same parameters.
    pub fn new(model: Arc<M>, topology: &Topology, params: ParamSet, cfg: TrainingConfig) -> Self {
        let n = model.node_count();
        Self::with_initial(model, topology, vec![params; n], cfg)
    }

    /// Routers start from individual parameters `w_i(0)`.
    pub fn with_initial(
        model: Arc<M>,
        topology: &Topology,
        initial: Vec<ParamSet>,
        cfg: TrainingConfig,
    ) -> Self {
        assert_eq!(initial.len(), model.node_count());
        let agents = initial
            .iter()
            .map(|p| NeuralAgent::new(model.clone(), p.clone()))
            .collect();
        let memories = (0..initial.len())
            .map(|_| ReplayMemory::new(cfg.hyper.memory_capacity, MemoryMode::FillAndClear))
            .collect();
        Self {
            agents,
            memories,
            fresh: vec![false; initial.len()],
            aux: initial,
            synced: false,
            weights: topology.consensus_matrix(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC00B),
            cfg,
            updates: 0,
            learning: true,
        }
    }

    pub fn agent(&self, i: NodeId) -> &NeuralAgent<M> {
        &self.agents[i.0]
    }

    pub fn params(&self, i: NodeId) -> &ParamSet {
        self.agents[i.0].params()
    }

    pub fn auxiliary(&self, i: NodeId) -> &ParamSet {
        &self.aux[i.0]
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Stores one transition of router `i`; a full memory triggers the local
    /// auxiliary step `w̃_i = w_i − α∇L(w_i)` and the target update.
    pub fn observe(&mut self, i: NodeId, t: Transition) {
        let n = self.cfg.hyper.batch_size;
        let batch = self.memories[i.0]
            .store_and_sample(t, n, &mut self.rng)
            .expect("batch fits the memory");
        if let Some(batch) = batch {
            let gamma = self.cfg.hyper.gamma;
            let targets: Vec<f64> = batch.iter().map(|t| feedback_target(t, gamma)).collect();
            let agent = &self.agents[i.0];
            let (_, grad) = batch_gradient(agent.model(), agent.params(), &batch, &targets);
            self.local_step(i, &grad);
        }
    }

    /// `w̃_i = w_i − α·grad`, shared with the neighbors; the target network
    /// moves towards `w̃_i`.
    pub fn local_step(&mut self, i: NodeId, grad: &Gradient) {
        let mut aux = self.agents[i.0].params().clone();
        aux.add_scaled(grad, -self.cfg.hyper.step_size).expect("same layout");
        let agent = &mut self.agents[i.0];
        let target = soft_update(agent.target(), &aux, self.cfg.hyper.tau).expect("same layout");
        agent.set_target(target);
        self.aux[i.0] = aux;
        self.fresh[i.0] = true;
        self.updates += 1;
    }

    /// `w_i ← Σ_{j ∈ 𝒩_i} W_ij w̃_j` for every router.
    pub fn consensus(&mut self) {
        let n = self.agents.len();
        let touched: Vec<bool> = (0..n)
            .map(|i| !self.synced || self.weights.row_support(i).any(|(j, _)| self.fresh[j]))
            .collect();
        for (i, &touch) in touched.iter().enumerate() {
            if !touch {
                continue;
            }
            let first = &self.aux[i];
            let w = if self.weights.row_support(i).all(|(j, _)| &self.aux[j] == first) {
                // Rows sum to one; skipping the arithmetic keeps this exact.
                first.clone()
            } else {
                let mut w = first.zeros_like();
                for (j, wij) in self.weights.row_support(i) {
                    w.add_scaled(&self.aux[j], wij).expect("same layout");
                }
                w
            };
            if &w != self.agents[i].params() {
                self.agents[i].set_params(w);
            }
        }
        self.fresh.iter_mut().for_each(|f| *f = false);
        self.synced = true;
    }
}

impl<M: QModel> RoutingPolicy for Cooperated<M> {
    fn next_hop(&mut self, _: &NetworkView<'_>, obs: &Observation) -> NodeId {
        let eps = if self.learning { self.cfg.hyper.epsilon } else { 0.0 };
        let agent = &mut self.agents[obs.current.0];
        epsilon_greedy(&mut self.rng, eps, obs, || agent.act(obs).expect("router has neighbors"))
    }

    fn next_hop_value(&mut self, obs: &Observation) -> f64 {
        self.agents[obs.current.0].target_max(obs)
    }
}

impl<M: QModel> Learner for Cooperated<M> {
    fn learn(&mut self, feedbacks: &[DeliveryFeedback]) {
        if !self.learning {
            return;
        }
        for fb in feedbacks {
            self.observe(fb.sender, Transition::from(fb));
        }
        self.consensus();
    }

    fn set_learning(&mut self, enabled: bool) {
        self.learning = enabled;
    }
}
