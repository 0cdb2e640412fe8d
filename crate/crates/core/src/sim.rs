//! Discrete-time packet network simulator.
//!
//! Every call to [`Simulator::step`] advances the clock by one time unit:
//!
//! 1. packets whose arrival time has come are delivered (when the hop was
//!    their destination) or appended to the receiving router's FIFO queue,
//!    and the sender gets a [`DeliveryFeedback`];
//! 2. `Poisson(λ)` new packets are injected at uniformly drawn
//!    `(src, dst)` pairs with `src != dst`;
//! 3. every idle router with a nonempty queue pops its head packet, asks the
//!    policy for a next hop and becomes busy for `service_time`; the packet
//!    reaches the next hop `service_time + g` later.
//!
//! With unit service and unit delays an unloaded hop costs 2 time units.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::encoding::Observation;
use crate::topology::{NodeId, Topology};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("router {node} chose {action}, which is not one of its neighbors")]
    InvalidAction { node: NodeId, action: NodeId },
    #[error("router {0} holds a packet but has no outgoing links")]
    Isolated(NodeId),
    #[error("invalid traffic configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficConfig {
    /// Mean packets injected per time unit.
    pub load: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub id: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub birth_time: f64,
    pub current_node: NodeId,
    pub enqueue_time: f64,
    pub hops: u32,
}

#[derive(Debug, Clone, Default)]
pub struct RouterState {
    pub queue: VecDeque<Packet>,
    pub busy_until: f64,
}

/// What the sender learns once its packet reaches the next hop.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryFeedback {
    pub sender: NodeId,
    pub packet_id: u64,
    pub state: Observation,
    pub action: NodeId,
    /// `−(q + g)`.
    pub reward: f64,
    /// The packet as seen by the next hop.
    pub next_state: Observation,
    /// The next hop is the packet's destination.
    pub terminal: bool,
    /// `max_a' Q(s̃, a')` reported by the next hop, times `(1 − f)`.
    pub next_hop_target_value: f64,
    /// Action the next hop would take on `next_state`, if its policy
    /// exposes one.
    pub next_action: Option<NodeId>,
    pub time: f64,
}

/// Read-only network state handed to routing policies.
#[derive(Clone, Copy)]
pub struct NetworkView<'a> {
    pub topology: &'a Topology,
    pub routers: &'a [RouterState],
    pub now: f64,
    pub service_time: f64,
}

impl NetworkView<'_> {
    /// Packets queued at `node`, plus one if it is serving a packet.
    pub fn backlog(&self, node: NodeId) -> usize {
        let r = &self.routers[node.0];
        r.queue.len() + usize::from(r.busy_until > self.now)
    }

    pub fn estimated_queue_delay(&self, node: NodeId) -> f64 {
        self.backlog(node) as f64 * self.service_time
    }
}

/// A per-router decision rule. One object answers for every router; the
/// router is `obs.current`.
pub trait RoutingPolicy {
    fn next_hop(&mut self, view: &NetworkView<'_>, obs: &Observation) -> NodeId;

    /// Value the router `obs.current` reports back to the sender of a packet
    /// that just reached it: `max_a' Q(obs, a')` under its target estimate.
    fn next_hop_value(&mut self, _obs: &Observation) -> f64 {
        0.0
    }

    /// Action the router would currently pick for `obs`, for logging.
    fn next_action_hint(&mut self, _obs: &Observation) -> Option<NodeId> {
        None
    }
}

/// Cumulative and windowed delivery statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub injected: u64,
    pub delivered: u64,
    pub total_delay: f64,
    pub total_hops: u64,
    pub window: WindowStats,
}

/// Deliveries of packets born at or after `start`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowStats {
    pub start: f64,
    pub delivered: u64,
    pub total_delay: f64,
    /// Packets in the system sampled after each step of the window.
    pub in_flight: Vec<usize>,
}

impl WindowStats {
    pub fn average_delay(&self) -> Option<f64> {
        (self.delivered > 0).then(|| self.total_delay / self.delivered as f64)
    }
}

impl Metrics {
    pub fn average_delay(&self) -> Option<f64> {
        (self.delivered > 0).then(|| self.total_delay / self.delivered as f64)
    }
}

pub fn record_delivery(metrics: &mut Metrics, packet: &Packet, time: f64) {
    let delay = time - packet.birth_time;
    metrics.delivered += 1;
    metrics.total_delay += delay;
    metrics.total_hops += u64::from(packet.hops);
    if packet.birth_time >= metrics.window.start {
        metrics.window.delivered += 1;
        metrics.window.total_delay += delay;
    }
}

#[derive(Debug, Clone)]
struct Transit {
    arrival: f64,
    packet: Packet,
    sender: NodeId,
    state: Observation,
    action: NodeId,
    reward: f64,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    topology: Topology,
    routers: Vec<RouterState>,
    transit: Vec<Transit>,
    now: f64,
    service_time: f64,
    load: f64,
    rng: ChaCha8Rng,
    next_id: u64,
    metrics: Metrics,
}

impl Simulator {
    pub fn new(topology: Topology, traffic: TrafficConfig) -> Result<Self, SimError> {
        Self::with_service_time(topology, traffic, 1.0)
    }

    pub fn with_service_time(
        topology: Topology,
        traffic: TrafficConfig,
        service_time: f64,
    ) -> Result<Self, SimError> {
        if !(service_time > 0.0 && service_time.is_finite()) {
            return Err(SimError::Config("service_time must be positive".into()));
        }
        let n = topology.node_count();
        let mut sim = Self {
            topology,
            routers: vec![RouterState::default(); n],
            transit: Vec::new(),
            now: 0.0,
            service_time,
            load: 0.0,
            rng: ChaCha8Rng::seed_from_u64(traffic.seed),
            next_id: 0,
            metrics: Metrics::default(),
        };
        sim.set_load(traffic.load)?;
        Ok(sim)
    }

    pub fn set_load(&mut self, load: f64) -> Result<(), SimError> {
        if !(load >= 0.0 && load.is_finite()) {
            return Err(SimError::Config(format!("load must be >= 0, got {load}")));
        }
        self.load = load;
        Ok(())
    }

    pub fn load(&self) -> f64 {
        self.load
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn service_time(&self) -> f64 {
        self.service_time
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn routers(&self) -> &[RouterState] {
        &self.routers
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn view(&self) -> NetworkView<'_> {
        NetworkView {
            topology: &self.topology,
            routers: &self.routers,
            now: self.now,
            service_time: self.service_time,
        }
    }

    pub fn estimated_queue_delay(&self, node: NodeId) -> f64 {
        self.view().estimated_queue_delay(node)
    }

    /// Packets queued at routers or travelling on links.
    pub fn in_flight(&self) -> usize {
        self.routers.iter().map(|r| r.queue.len()).sum::<usize>() + self.transit.len()
    }

    pub fn packets_in_system(&self) -> impl Iterator<Item = &Packet> {
        self.routers
            .iter()
            .flat_map(|r| r.queue.iter())
            .chain(self.transit.iter().map(|t| &t.packet))
    }

    /// Starts a fresh measurement window at the current time.
    pub fn begin_window(&mut self) {
        self.metrics.window = WindowStats {
            start: self.now,
            ..WindowStats::default()
        };
    }

    /// Places a packet at the tail of `src`'s queue at the current time.
    pub fn inject(&mut self, src: NodeId, dst: NodeId) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.routers[src.0].queue.push_back(Packet {
            id,
            src,
            dst,
            birth_time: self.now,
            current_node: src,
            enqueue_time: self.now,
            hops: 0,
        });
        self.metrics.injected += 1;
        id
    }

    fn inject_random(&mut self) {
        let n = self.topology.node_count();
        if self.load <= 0.0 || n < 2 {
            return;
        }
        let count = Poisson::new(self.load)
            .expect("positive load")
            .sample(&mut self.rng) as u64;
        for _ in 0..count {
            let src = self.rng.gen_range(0..n);
            let dst = loop {
                let d = self.rng.gen_range(0..n);
                if d != src {
                    break d;
                }
            };
            self.inject(NodeId(src), NodeId(dst));
        }
    }

    /// Advances the clock by one time unit and returns the feedback of
    /// every hop that completed during this step.
    pub fn step(&mut self, policy: &mut dyn RoutingPolicy) -> Result<Vec<DeliveryFeedback>, SimError> {
        let feedbacks = self.process_arrivals(policy);
        self.inject_random();
        self.dispatch(policy)?;
        self.now += 1.0;
        let in_flight = self.in_flight();
        self.metrics.window.in_flight.push(in_flight);
        Ok(feedbacks)
    }

    fn process_arrivals(&mut self, policy: &mut dyn RoutingPolicy) -> Vec<DeliveryFeedback> {
        let now = self.now;
        if !self.transit.iter().any(|t| t.arrival <= now) {
            return Vec::new();
        }
        let (mut due, rest): (Vec<Transit>, Vec<Transit>) =
            std::mem::take(&mut self.transit).into_iter().partition(|t| t.arrival <= now);
        self.transit = rest;
        due.sort_by(|a, b| {
            a.arrival
                .total_cmp(&b.arrival)
                .then(a.packet.id.cmp(&b.packet.id))
        });
        let mut feedbacks = Vec::with_capacity(due.len());
        for t in due {
            let Transit {
                arrival,
                mut packet,
                sender,
                state,
                action,
                reward,
            } = t;
            let terminal = action == packet.dst;
            let next_state = Observation::at(&self.topology, action, packet.dst);
            let (value, next_action) = if terminal {
                (0.0, None)
            } else {
                (policy.next_hop_value(&next_state), policy.next_action_hint(&next_state))
            };
            if terminal {
                record_delivery(&mut self.metrics, &packet, arrival);
            } else {
                packet.current_node = action;
                packet.enqueue_time = arrival;
                self.routers[action.0].queue.push_back(packet.clone());
            }
            feedbacks.push(DeliveryFeedback {
                sender,
                packet_id: packet.id,
                state,
                action,
                reward,
                next_state,
                terminal,
                next_hop_target_value: value,
                next_action,
                time: arrival,
            });
        }
        feedbacks
    }

    fn dispatch(&mut self, policy: &mut dyn RoutingPolicy) -> Result<(), SimError> {
        let now = self.now;
        for i in 0..self.routers.len() {
            let router = &self.routers[i];
            if router.busy_until > now || router.queue.is_empty() {
                continue;
            }
            let node = NodeId(i);
            if self.topology.degree(node) == 0 {
                return Err(SimError::Isolated(node));
            }
            let dst = router.queue[0].dst;
            let state = Observation::at(&self.topology, node, dst);
            let view = NetworkView {
                topology: &self.topology,
                routers: &self.routers,
                now,
                service_time: self.service_time,
            };
            let action = policy.next_hop(&view, &state);
            let g = self
                .topology
                .delay(node, action)
                .ok_or(SimError::InvalidAction { node, action })?;
            let q = if action == dst {
                0.0
            } else {
                view.estimated_queue_delay(action)
            };
            let router = &mut self.routers[i];
            let mut packet = router.queue.pop_front().expect("nonempty queue");
            router.busy_until = now + self.service_time;
            packet.hops += 1;
            self.transit.push(Transit {
                arrival: now + self.service_time + g,
                packet,
                sender: node,
                state,
                action,
                reward: -(q + g),
            });
        }
        Ok(())
    }
}
