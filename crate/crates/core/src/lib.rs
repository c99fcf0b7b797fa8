//! Micro-op level transient-execution simulator for microcode branch
//! misprediction attacks, with a select-based hardening pass.

pub mod channel;
pub mod corpus;
pub mod machine;
pub mod pipeline;
pub mod report;
pub mod uasm;
pub mod uisa;
pub mod uslh;
