//! Search-log mining: session events to behavior features, implicit
//! relevance feedback models, weak labels, and two-stage training of a
//! question-passage relevance model.

pub mod cli;
pub mod config;
pub mod features;
pub mod feedback;
pub mod metrics;
pub mod qa;
pub mod session;
pub mod sim;
pub mod weak;
pub mod workflow;
