//! LoRaWAN single-gateway simulator with a demodulator-accurate receiver,
//! an MDP facade over it, and an actor-critic resource allocator with a
//! shared transformer encoder, pretrained offline and refined online.

pub mod baselines;
pub mod config;
pub mod gateway;
pub mod heat_agent;
pub mod mdp_env;
pub mod neural;
pub mod node_mac;
pub mod phy_link;
pub mod runner;
pub mod sim_engine;
