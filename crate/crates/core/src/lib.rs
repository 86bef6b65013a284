//! Multi-turn tutoring episodes between a student and a teacher that holds
//! privileged information, with answer verification, leakage auditing,
//! trajectory storage, metrics and a tabular meta-RL lab.

pub mod agents;
pub mod dialogue;
pub mod lab;
pub mod leakage;
pub mod metrics;
pub mod orchestrator;
pub mod store;
pub mod verify;
