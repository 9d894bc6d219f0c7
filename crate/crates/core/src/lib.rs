//! Deterministic simulation of federated knowledge alignment: source-domain
//! clients train locally, align their features with an unlabeled target
//! domain through the server, and the server refines the aggregate by
//! majority-vote pseudo-labels.

pub mod config;
pub mod data;
pub mod experiment;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod seeds;
