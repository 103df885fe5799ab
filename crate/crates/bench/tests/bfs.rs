use std::sync::Arc;
use std::time::Duration;

use edat::runtime::RuntimeConfig;
use edat::transport::RankRoster;
use edat_bench::bfs::bfs_run;
use edat_bench::graph::{generate_graph, DistributedGraph};
use edat_bench::validate::{check_bfs, reached_set, sequential_bfs, validate_bfs, InvalidTree};

fn cfg(p: usize) -> RuntimeConfig {
    RuntimeConfig::loopback(p)
        .workers(1)
        .finalise_timeout(Duration::from_secs(60))
}

fn run(graph: DistributedGraph, root: u64, config: RuntimeConfig) -> edat_bench::bfs::BfsOutcome {
    bfs_run(Arc::new(graph), root, config)
        .expect("bfs run")
        .outcome
        .expect("rank 0 hosted here")
}

#[test]
fn path_graph_on_two_ranks() {
    let g = DistributedGraph::from_edges(2, 1, 2, &[(0, 1), (1, 2), (2, 3)]);
    let out = run(g.clone(), 0, cfg(2));
    assert_eq!(out.parents, vec![Some(0), Some(0), Some(1), Some(2)]);
    let tree_edges = out.parents.iter().enumerate().filter(|(v, p)| p.is_some_and(|p| p != *v as u64)).count();
    assert_eq!(tree_edges, 3);
    assert_eq!(out.levels, 4);
    assert_eq!(out.traversed_edges, 6);
    assert!(validate_bfs(&g, &out.parents, 0));
}

#[test]
fn isolated_root_and_disconnected_vertex() {
    let g = DistributedGraph::from_edges(2, 1, 2, &[(1, 2)]);
    let out = run(g.clone(), 0, cfg(2));
    assert_eq!(out.parents, vec![Some(0), None, None, None]);
    assert_eq!(out.levels, 1);
    assert_eq!(out.traversed_edges, 0);
    assert!(validate_bfs(&g, &out.parents, 0));
    let out = run(g.clone(), 1, cfg(2));
    assert_eq!(out.parents, vec![None, Some(1), Some(1), None]);
    assert!(validate_bfs(&g, &out.parents, 1));
}

#[test]
fn validation_rejects_corrupt_trees() {
    let g = generate_graph(6, 4, 2, 1);
    let good = sequential_bfs(&g, 0).parents;
    assert_eq!(check_bfs(&g, &good, 0), Ok(()));
    let leaf = (1..64u64).find(|&v| good[v as usize].is_some()).unwrap();
    let non_neighbor = (0..64u64).find(|&w| w != leaf && !g.has_edge(leaf, w)).unwrap();
    let mut bad = good.clone();
    bad[leaf as usize] = Some(non_neighbor);
    assert!(!validate_bfs(&g, &bad, 0));
    let mut bad = good.clone();
    bad[0] = None;
    assert_eq!(check_bfs(&g, &bad, 0), Err(InvalidTree::RootParent(0)));
    let mut bad = good.clone();
    bad[leaf as usize] = None;
    assert!(!validate_bfs(&g, &bad, 0));
}

#[test]
fn validation_rejects_a_tree_that_is_not_breadth_first() {
    // 0-1-2-3 plus 0-3: a depth-first tree through 1 and 2 is a valid
    // spanning tree but puts 3 at level 3 next to the root.
    let g = DistributedGraph::from_edges(2, 2, 1, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
    let dfs = vec![Some(0), Some(0), Some(1), Some(2)];
    assert!(matches!(check_bfs(&g, &dfs, 0), Err(InvalidTree::EdgeLevels { .. })));
}

#[test]
fn random_instances_match_the_oracle() {
    for (i, p) in [1, 2, 4, 8].into_iter().enumerate() {
        for seed in 0..3u64 {
            let g = generate_graph(9, 16, seed * 10 + i as u64, p);
            let root = seed * 37 % g.vertex_count();
            let oracle = sequential_bfs(&g, root);
            let out = run(g.clone(), root, cfg(p).workers(1 + seed as usize % 3).deterministic(seed));
            assert_eq!(check_bfs(&g, &out.parents, root), Ok(()), "P={p} seed={seed}");
            assert_eq!(reached_set(&out.parents), reached_set(&oracle.parents));
            assert_eq!(out.traversed_edges, oracle.examined_edges);
        }
    }
}

#[test]
fn sparse_graph_with_many_components() {
    let g = generate_graph(10, 1, 4, 4);
    let oracle = sequential_bfs(&g, 5);
    let out = run(g.clone(), 5, cfg(4).workers(2));
    assert!(validate_bfs(&g, &out.parents, 5));
    assert_eq!(reached_set(&out.parents), reached_set(&oracle.parents));
    assert!(reached_set(&out.parents).len() < 1024);
}

#[test]
fn bfs_over_tcp() {
    let g = generate_graph(8, 16, 7, 4);
    let roster = RankRoster::free_localhost(4).unwrap();
    let config = RuntimeConfig::tcp(roster)
        .workers(1)
        .finalise_timeout(Duration::from_secs(60));
    let out = run(g.clone(), 3, config);
    assert!(validate_bfs(&g, &out.parents, 3));
    assert_eq!(out.traversed_edges, sequential_bfs(&g, 3).examined_edges);
}

#[test]
fn same_instance_same_reached_set_everywhere() {
    let reference = reached_set(&sequential_bfs(&generate_graph(8, 2, 3, 1), 9).parents);
    for (p, w, seed) in [(1, 1, 0), (2, 2, 1), (3, 1, 2), (8, 2, 3)] {
        let g = generate_graph(8, 2, 3, p);
        let out = run(g, 9, cfg(p).workers(w).deterministic(seed));
        assert_eq!(reached_set(&out.parents), reference, "P={p} W={w}");
    }
}
