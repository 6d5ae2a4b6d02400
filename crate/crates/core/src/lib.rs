//! Bulk email campaign engine: a serverless-style pipeline (gateway,
//! preprocessor, FIFO batch queue, rate-limited senders, delivery events,
//! bounce store and suppression list) that runs as a local service or as a
//! deterministic virtual-clock simulation.

pub mod bounce;
pub mod config;
pub mod cost;
pub mod dispatch;
pub mod domain;
pub mod gateway;
pub mod ingest;
pub mod observe;
pub mod queue;
pub mod runtime;
pub mod sim;
pub mod store;
pub mod system;
pub mod transport;
