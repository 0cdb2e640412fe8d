//! Packet-routing simulation with graph-attention multi-agent Q-learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`topology`]: routers, links, neighborhoods, hop tables and the
//!   consensus weight matrix.
//! - [`sim`]: discrete-time simulator with Poisson injection, FIFO
//!   queues and one-packet-per-step routers.
//! - [`encoding`]: local observations and their `N × 3` indicator matrix.
//! - [`qnet`]: the graph-attention Q-network and the fully connected
//!   baseline network, with exact backpropagation.
//! - [`agents`]: replay memory, Q-routing tables and the baseline routing
//!   policies.
//! - [`paradigms`]: centralized, federated and cooperated training of the
//!   neural routers.
//! - [`harness`]: experiment configs, pre-training, load sweeps and
//!   algorithm comparison.

pub mod agents;
pub mod encoding;
pub mod harness;
pub mod paradigms;
pub mod qnet;
pub mod sim;
pub mod topology;

pub use encoding::{encode, FeatureMatrix, Observation};
pub use qnet::{GatQNet, Hyperparams, MlpQNet, ParamSet, QModel};
pub use sim::{DeliveryFeedback, Simulator, TrafficConfig};
pub use topology::{NodeId, Topology};
