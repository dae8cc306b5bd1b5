//! Deterministic RDMA fabric simulator with a kernel-managed, virtualized
//! queue-pair control plane on top.

pub mod addr;
pub mod batch;
pub mod bgd;
pub mod config;
#[cfg(feature = "conformance")]
pub mod conformance;
pub mod exec;
pub mod meta;
pub mod nic;
pub mod simcore;
pub mod vplane;
pub mod world;

pub use addr::{Gid, NodeId};
pub use config::CostModel;
pub use exec::Sim;
pub use world::{World, WorldConfig};
