//! Property suites for the runtime: a brute-force reference matcher with a
//! scenario generator, a deterministic termination simulator, and seeded
//! ordering runs on the loopback transport.

pub mod ordering;
pub mod reference;
pub mod scenarios;
pub mod termination;
