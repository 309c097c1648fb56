//! Deterministic simulator of blockchain-assisted decentralized federated
//! learning.
//!
//! Every client trains a local model and also mines blocks. A round runs
//! local training, gossips the (optionally noised and watermarked) model
//! deltas, aggregates them in each node's own pool, mines a proof-of-work
//! block that carries the aggregate, verifies competing blocks, and settles
//! rewards through a replicated contract state machine.
//!
//! Module map:
//!
//! - [`mlcore`]: datasets, the trainable model, local SGD, evaluation, FedAvg.
//! - [`privacy`]: clipping, noise calibration and the adaptive decay rule.
//! - [`watermark`]: m-sequence generation, embedding and correlation detection.
//! - [`ledger`]: blocks, PoW, verification, fork choice and the contract.
//! - [`network`]: seeded discrete-event gossip.
//! - [`node`]: per-client round behaviour and compute budgeting.
//! - [`sim`]: configuration, end-to-end runs, sweeps and file formats.

pub mod ledger;
pub mod mlcore;
pub mod network;
pub mod node;
pub mod privacy;
pub mod rng;
pub mod sim;
pub mod watermark;

pub use mlcore::{Dataset, LocalUpdate, ModelKind, ModelSpec, ParamVector};
pub use sim::{MetricsReport, SimConfig, SimError, Simulation};

