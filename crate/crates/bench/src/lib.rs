//! Benchmarks and demos for the edat runtime: a level-synchronous BFS with
//! oracle validation, barrier and reduction demos, and the CLI behind the
//! `edat-bench` binary.

pub mod bfs;
pub mod cli;
pub mod demos;
pub mod graph;
pub mod validate;
