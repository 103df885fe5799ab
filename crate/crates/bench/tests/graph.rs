use edat_bench::graph::{generate_edges, generate_graph, DistributedGraph};

fn adjacency_multiset(g: &DistributedGraph) -> Vec<(u64, u64)> {
    let mut all: Vec<(u64, u64)> = (0..g.vertex_count())
        .flat_map(|v| g.neighbors(v).iter().map(move |&w| (v, w)))
        .collect();
    all.sort_unstable();
    all
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(generate_edges(4, 2, 1), generate_edges(4, 2, 1));
    assert_ne!(generate_edges(6, 4, 1), generate_edges(6, 4, 2));
    assert_eq!(generate_graph(6, 4, 9, 3), generate_graph(6, 4, 9, 3));
}

#[test]
fn edge_count_is_bounded_and_loop_free() {
    for seed in 0..10 {
        let edges = generate_edges(5, 3, seed);
        assert!(edges.len() <= 3 * 32);
        assert!(edges.iter().all(|(u, v)| u != v && *u < 32 && *v < 32));
    }
}

#[test]
fn partitioning_preserves_the_edge_multiset() {
    let one = generate_graph(7, 8, 3, 1);
    let four = generate_graph(7, 8, 3, 4);
    assert_eq!(adjacency_multiset(&one), adjacency_multiset(&four));
    assert_eq!(one.adjacency_len(), 2 * generate_edges(7, 8, 3).len());
}

#[test]
fn adjacency_is_symmetric_and_owned_mod_p() {
    let g = generate_graph(6, 4, 5, 3);
    let mut forward = adjacency_multiset(&g);
    let mut backward: Vec<(u64, u64)> = forward.iter().map(|&(u, v)| (v, u)).collect();
    forward.sort_unstable();
    backward.sort_unstable();
    assert_eq!(forward, backward);
    for r in 0..3 {
        let part = g.part(r);
        for local in 0..part.vertex_count() {
            let v = g.global_id(r, local);
            assert_eq!(g.owner(v), r);
            assert_eq!(g.local_index(v), local);
        }
    }
    let total: usize = (0..3).map(|r| g.part(r).vertex_count()).sum();
    assert_eq!(total as u64, g.vertex_count());
}
