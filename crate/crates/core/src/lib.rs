//! A small utility-computing marketplace.
//!
//! Clusters run a front-end that prices jobs and runs them on a simulated
//! batch queue. A broker collects sealed quotes and picks the cheapest
//! cluster, users pay through escrow held at a bank, and a harness drives
//! the whole market in virtual time.
//!
//! Every service speaks line-delimited canonical JSON over TCP ([`wire`]).

pub mod bank;
pub mod broker;
pub mod client;
pub mod clock;
pub mod domain;
pub mod frontend;
pub mod harness;
pub mod wire;

pub use domain::{
    canonical_encode, validate_jobspec, Bid, ClusterDescriptor, JobSpec, JobState, JobStatus,
    Money, QosClass, RawJobSpec, ValidationError,
};
