//! Offline-to-online reinforcement learning with conservative and calibrated
//! Q-learning, over exact tables and small neural networks.

pub mod data;
pub mod env;
pub mod nn;
pub mod agents;
pub mod replay;
pub mod metrics;
pub mod theory;
pub mod harness;
