//! Organizational multi-agent orchestration for document question answering.

pub mod agents;
pub mod backend;
pub mod bench;
pub mod domain;
pub mod exchange;
pub mod metrics;
pub mod org_flat;
pub mod org_hier;
pub mod policy;
pub mod runner;
