//! Proximity-aware notes: presence detection, triggers, an offline-first
//! store with sync, and the push broker.

pub mod broker;
pub mod device;
pub mod feedback;
pub mod logfmt;
pub mod model;
pub mod presence;
pub mod store;
pub mod sync;
pub mod triggers;
pub mod wire;
