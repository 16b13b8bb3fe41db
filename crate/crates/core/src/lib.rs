//! Orchestration of software-testing work over exclusively leased Testing
//! Clouds.
//!
//! A Service Manager validates a consumer's request, negotiates one Testing
//! Cloud per requested technique, sizes each cloud with clone services from a
//! workload estimate, distributes tasks, and folds the services' partial
//! reports (EPTRs) into per-cloud reports (ETRs) and a final product report.
//! [`simnet`] runs the whole protocol on a deterministic discrete-event
//! network with failure injection.

pub mod aggregation;
pub mod allocation;
pub mod execution;
pub mod fault;
pub mod format;
pub mod model;
pub mod scheduler;
pub mod simnet;
