//! Random undirected multigraphs partitioned by `owner(v) = v mod P`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One rank's share of the graph: compressed adjacency over its local
/// vertices, where local index `i` is global vertex `i * P + rank`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalAdjacency {
    pub rank: usize,
    offsets: Vec<usize>,
    neighbors: Vec<u64>,
}

impl LocalAdjacency {
    pub fn vertex_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, local: usize) -> &[u64] {
        &self.neighbors[self.offsets[local]..self.offsets[local + 1]]
    }

    pub fn degree(&self, local: usize) -> usize {
        self.offsets[local + 1] - self.offsets[local]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistributedGraph {
    pub scale: u32,
    pub edge_factor: usize,
    pub world_size: usize,
    parts: Vec<LocalAdjacency>,
}

/// Undirected edge list: `edge_factor * 2^scale` uniform endpoint pairs with
/// self-loops dropped. Duplicates are kept.
pub fn generate_edges(scale: u32, edge_factor: usize, seed: u64) -> Vec<(u64, u64)> {
    assert!(scale >= 1 && scale < 40, "scale out of range");
    let n = 1u64 << scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..edge_factor as u64 * n)
        .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
        .filter(|(u, v)| u != v)
        .collect()
}

pub fn generate_graph(scale: u32, edge_factor: usize, seed: u64, world_size: usize) -> DistributedGraph {
    DistributedGraph::from_edges(scale, edge_factor, world_size, &generate_edges(scale, edge_factor, seed))
}

impl DistributedGraph {
    pub fn from_edges(scale: u32, edge_factor: usize, world_size: usize, edges: &[(u64, u64)]) -> Self {
        assert!(world_size >= 1, "a world needs at least one rank");
        let n = 1u64 << scale;
        let p = world_size as u64;
        let local_count = |r: u64| ((n + p - 1 - r) / p) as usize;
        let mut degree: Vec<Vec<usize>> = (0..p).map(|r| vec![0; local_count(r)]).collect();
        for &(u, v) in edges {
            assert!(u < n && v < n, "edge endpoint out of range");
            degree[(u % p) as usize][(u / p) as usize] += 1;
            degree[(v % p) as usize][(v / p) as usize] += 1;
        }
        let mut parts: Vec<LocalAdjacency> = degree
            .iter()
            .enumerate()
            .map(|(rank, d)| {
                let mut offsets = Vec::with_capacity(d.len() + 1);
                offsets.push(0);
                for x in d {
                    offsets.push(offsets.last().expect("non-empty") + x);
                }
                let total = *offsets.last().expect("non-empty");
                LocalAdjacency {
                    rank,
                    offsets,
                    neighbors: vec![0; total],
                }
            })
            .collect();
        let mut fill: Vec<Vec<usize>> = parts.iter().map(|a| a.offsets[..a.vertex_count()].to_vec()).collect();
        let mut put = |from: u64, to: u64| {
            let (r, i) = ((from % p) as usize, (from / p) as usize);
            parts[r].neighbors[fill[r][i]] = to;
            fill[r][i] += 1;
        };
        for &(u, v) in edges {
            put(u, v);
            put(v, u);
        }
        DistributedGraph {
            scale,
            edge_factor,
            world_size,
            parts,
        }
    }

    pub fn vertex_count(&self) -> u64 {
        1 << self.scale
    }

    pub fn owner(&self, v: u64) -> usize {
        (v % self.world_size as u64) as usize
    }

    pub fn local_index(&self, v: u64) -> usize {
        (v / self.world_size as u64) as usize
    }

    pub fn global_id(&self, rank: usize, local: usize) -> u64 {
        (local * self.world_size + rank) as u64
    }

    pub fn part(&self, rank: usize) -> &LocalAdjacency {
        &self.parts[rank]
    }

    pub fn neighbors(&self, v: u64) -> &[u64] {
        self.parts[self.owner(v)].neighbors(self.local_index(v))
    }

    /// Adjacency entries; each undirected edge counts twice.
    pub fn adjacency_len(&self) -> usize {
        self.parts.iter().map(|a| a.neighbors.len()).sum()
    }

    pub fn has_edge(&self, u: u64, v: u64) -> bool {
        self.neighbors(u).contains(&v)
    }
}
