//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use edat::runtime::RuntimeConfig;
use edat::scheduler::ProgressMode;
use edat::transport::{RankRoster, TransportKind};
use edat_conformance::{ordering, scenarios, termination};

use crate::bfs::bfs_run;
use crate::demos::{barrier_demo, reduce_demo, simple_example};
use crate::graph::{generate_graph, DistributedGraph};
use crate::validate::{check_bfs, sequential_bfs};

#[derive(Debug, Parser)]
#[command(name = "edat-bench", about = "Benchmarks and demos for the edat runtime")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Level-synchronous BFS on a random graph, validated against a sequential oracle.
    Bfs {
        #[arg(long, default_value_t = 10)]
        scale: u32,
        #[arg(long, default_value_t = 16)]
        edge_factor: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Start vertex; defaults to a seeded choice among vertices with edges.
        #[arg(long)]
        root: Option<u64>,
        #[command(flatten)]
        world: WorldArgs,
        /// Print metrics as one JSON object.
        #[arg(long)]
        json: bool,
    },
    /// Every rank fires to all and waits on an ALL-source barrier.
    BarrierDemo {
        #[command(flatten)]
        world: WorldArgs,
    },
    /// Sums rank ids on rank 0 with an ALL-source reduction.
    ReduceDemo {
        #[command(flatten)]
        world: WorldArgs,
    },
    /// The two-rank, three-task example; the final task prints the sum.
    SimpleExample {
        #[command(flatten)]
        world: WorldArgs,
    },
    /// Property suites: matcher against a reference, termination simulation, ordering.
    Conformance {
        #[arg(long, default_value_t = 10_000)]
        cases: usize,
        #[arg(long, default_value_t = 1_000)]
        seeds: usize,
        #[arg(long, default_value_t = 100)]
        ordering_runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct WorldArgs {
    /// Ranks in the world; taken from the roster for TCP.
    #[arg(long)]
    pub ranks: Option<usize>,
    /// Workers per rank.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_parser = parse_transport)]
    pub transport: Option<TransportKind>,
    /// Roster file, one `rank host port` line per rank.
    #[arg(long)]
    pub roster: Option<PathBuf>,
    /// Run only this rank in this process (TCP).
    #[arg(long)]
    pub rank: Option<usize>,
    /// Seeded delivery order on the loopback transport.
    #[arg(long)]
    pub det_seed: Option<u64>,
    #[arg(long, value_parser = parse_progress)]
    pub progress: Option<ProgressMode>,
}

fn parse_transport(s: &str) -> Result<TransportKind, String> {
    s.parse()
}

fn parse_progress(s: &str) -> Result<ProgressMode, String> {
    s.parse()
}

impl WorldArgs {
    /// Environment first, then flags. Defaults: 2 ranks, 1 worker, loopback.
    pub fn config(&self, default_ranks: usize) -> Result<RuntimeConfig, String> {
        let mut config = RuntimeConfig::loopback(default_ranks).workers(1);
        config = config.apply_env().map_err(|e| e.to_string())?;
        if let Some(t) = self.transport {
            config.transport = t;
        }
        if let Some(path) = &self.roster {
            config.roster = Some(RankRoster::from_file(path).map_err(|e| e.to_string())?);
        }
        if let Some(p) = self.ranks {
            config.world_size = p;
        }
        if config.transport == TransportKind::Tcp {
            let roster = match config.roster.take() {
                Some(r) => r,
                None if self.rank.is_some() || config.rank.is_some() => {
                    return Err("--rank needs a --roster shared by all processes".into())
                }
                None => RankRoster::free_localhost(config.world_size).map_err(|e| e.to_string())?,
            };
            if self.ranks.is_some_and(|p| p != roster.world_size()) {
                return Err(format!("--ranks disagrees with the roster's {} ranks", roster.world_size()));
            }
            config.world_size = roster.world_size();
            config.roster = Some(roster);
        }
        if let Some(w) = self.workers {
            config.workers_per_rank = w;
        }
        if let Some(r) = self.rank {
            config.rank = Some(r);
        }
        if let Some(s) = self.det_seed {
            config.deterministic_seed = Some(s);
        }
        if let Some(m) = self.progress {
            config.progress_mode = m;
        }
        Ok(config)
    }

    fn hosts_rank(config: &RuntimeConfig, rank: usize) -> bool {
        config.rank.map_or(true, |r| r == rank)
    }
}

#[derive(Debug, Serialize)]
struct BfsMetrics {
    scale: u32,
    edge_factor: usize,
    seed: u64,
    root: u64,
    ranks: usize,
    workers: usize,
    transport: String,
    levels: u32,
    reached: usize,
    traversed_edges: u64,
    oracle_traversed_edges: u64,
    elapsed_s: f64,
    teps: f64,
    valid: bool,
    error: Option<String>,
}

/// A vertex with at least one edge, chosen from `seed`; 0 if there is none.
pub fn choose_root(graph: &DistributedGraph, seed: u64) -> u64 {
    let n = graph.vertex_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_b0f5);
    for _ in 0..64 {
        let v = rng.gen_range(0..n);
        if !graph.neighbors(v).is_empty() {
            return v;
        }
    }
    (0..n).find(|&v| !graph.neighbors(v).is_empty()).unwrap_or(0)
}

fn run_bfs(scale: u32, edge_factor: usize, seed: u64, root: Option<u64>, world: &WorldArgs, json: bool) -> Result<bool, String> {
    if scale == 0 || scale > 30 {
        return Err("--scale must be between 1 and 30".into());
    }
    let config = world.config(1)?;
    let transport = config.transport.to_string();
    let (ranks, workers) = (config.world_size, config.workers_per_rank);
    let graph = Arc::new(generate_graph(scale, edge_factor, seed, ranks));
    let root = root.unwrap_or_else(|| choose_root(&graph, seed));
    if root >= graph.vertex_count() {
        return Err(format!("--root {root} is not a vertex"));
    }
    let hosts_zero = WorldArgs::hosts_rank(&config, 0);
    let run = bfs_run(graph.clone(), root, config).map_err(|e| e.to_string())?;
    let Some(outcome) = run.outcome else {
        if hosts_zero {
            return Err("rank 0 finished without assembling a tree".into());
        }
        println!("rank {} done", run.diagnostics.first().map_or(0, |d| d.rank));
        return Ok(true);
    };
    let started = Instant::now();
    let oracle = sequential_bfs(&graph, root);
    let check = check_bfs(&graph, &outcome.parents, root);
    let edges_match = outcome.traversed_edges == oracle.examined_edges;
    let valid = check.is_ok() && edges_match;
    let error = match (&check, edges_match) {
        (Err(e), _) => Some(e.to_string()),
        (Ok(()), false) => Some(format!(
            "traversed {} edges, oracle examined {}",
            outcome.traversed_edges, oracle.examined_edges
        )),
        _ => None,
    };
    let metrics = BfsMetrics {
        scale,
        edge_factor,
        seed,
        root,
        ranks,
        workers,
        transport,
        levels: outcome.levels,
        reached: outcome.parents.iter().filter(|p| p.is_some()).count(),
        traversed_edges: outcome.traversed_edges,
        oracle_traversed_edges: oracle.examined_edges,
        elapsed_s: outcome.elapsed.as_secs_f64(),
        teps: outcome.teps(),
        valid,
        error,
    };
    if json {
        println!("{}", serde_json::to_string(&metrics).map_err(|e| e.to_string())?);
    } else {
        println!(
            "root={} levels={} reached={} traversed_edges={} elapsed_s={:.6} validation_s={:.3}",
            metrics.root,
            metrics.levels,
            metrics.reached,
            metrics.traversed_edges,
            metrics.elapsed_s,
            started.elapsed().as_secs_f64()
        );
        println!("TEPS={:.1}", metrics.teps);
        match &metrics.error {
            None => println!("VALID"),
            Some(e) => println!("INVALID: {e}"),
        }
    }
    Ok(valid)
}

fn run_command(command: Command) -> Result<bool, String> {
    match command {
        Command::Bfs {
            scale,
            edge_factor,
            seed,
            root,
            world,
            json,
        } => run_bfs(scale, edge_factor, seed, root, &world, json),
        Command::BarrierDemo { world } => {
            let report = barrier_demo(world.config(2)?).map_err(|e| e.to_string())?;
            if report.passed() {
                println!("barrier task ran once per rank after all fires");
            } else {
                println!("barrier check failed: {report:?}");
            }
            Ok(report.passed())
        }
        Command::ReduceDemo { world } => {
            let config = world.config(2)?;
            let p = config.world_size as i64;
            match reduce_demo(config).map_err(|e| e.to_string())? {
                Some(sum) => {
                    println!("{sum}");
                    Ok(sum == p * (p - 1) / 2)
                }
                None => Ok(true),
            }
        }
        Command::SimpleExample { world } => {
            let config = world.config(2)?;
            let hosts_one = WorldArgs::hosts_rank(&config, 1);
            let sums = simple_example(config).map_err(|e| e.to_string())?;
            for s in &sums {
                println!("sum={s}");
            }
            Ok(if hosts_one { sums == [133] } else { sums.is_empty() })
        }
        Command::Conformance {
            cases,
            seeds,
            ordering_runs,
            seed,
        } => {
            let m = scenarios::run(seed, cases);
            println!("matcher: {} cases, {} activations, {} failures", m.cases, m.activations, m.failures.len());
            let t = termination::run(seed, seeds);
            println!(
                "termination: {} seeds, {} verdicts, {} deceptive rounds, at most {} rounds after quiescence, {} failures",
                t.seeds,
                t.terminated,
                t.deceptive_rounds,
                t.max_rounds_after_quiescence,
                t.failures.len()
            );
            let o = ordering::run_loopback(seed, ordering_runs, 20);
            println!("ordering: {} runs, {} checks, {} failures", o.runs, o.checks, o.failures.len());
            for f in m.failures.iter().chain(&t.failures).chain(&o.failures).take(10) {
                println!("  {f}");
            }
            Ok(m.failures.is_empty() && t.failures.is_empty() && o.failures.is_empty())
        }
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(msg) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
