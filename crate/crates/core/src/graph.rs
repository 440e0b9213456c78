//! Graph container, normalized adjacency, partition plans and per-partition
//! halo bookkeeping.

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, DenseMatrix};
use crate::rng::{RngStream, StreamKey, StreamKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    None,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::None => 0,
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Split> {
        match c {
            0 => Some(Split::None),
            1 => Some(Split::Train),
            2 => Some(Split::Val),
            3 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Node-classification graph. Undirected inputs carry both edge directions.
///
/// Train/val/test membership is stored as one [`Split`] per node, which keeps
/// the three masks disjoint by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Vec<Split>,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let g = Graph { num_nodes, edges, features, labels, num_classes, splits };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&(s, d)) = self.edges.iter().find(|&&(s, d)| s >= self.num_nodes || d >= self.num_nodes) {
            return Err(Error::shape(format!(
                "edge ({s}, {d}) has an endpoint outside {} nodes",
                self.num_nodes
            )));
        }
        if self.features.rows() != self.num_nodes {
            return Err(Error::shape(format!(
                "{} feature rows for {} nodes",
                self.features.rows(),
                self.num_nodes
            )));
        }
        if self.labels.len() != self.num_nodes || self.splits.len() != self.num_nodes {
            return Err(Error::shape("labels and splits must have one entry per node"));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::shape(format!("label {y} outside {} classes", self.num_classes)));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn mask(&self, split: Split) -> Vec<bool> {
        self.splits.iter().map(|&s| s == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Sorted, deduplicated in-neighbor lists with self-loops removed.
    pub fn in_neighbors(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![BTreeSet::new(); self.num_nodes];
        for &(s, d) in &self.edges {
            if s != d {
                sets[d].insert(s);
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormalizeOptions {
    /// Take degrees from `A + I` (standard GCN) instead of `A`.
    pub degree_with_self_loops: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        NormalizeOptions { degree_with_self_loops: true }
    }
}

/// `D^-1/2 (A + I) D^-1/2` where row `v` aggregates from the in-neighbors of
/// `v`. Duplicate edges and input self-loops collapse into one entry.
pub fn normalize_adjacency(g: &Graph) -> CsrMatrix {
    normalize_adjacency_with(g, NormalizeOptions::default())
}

pub fn normalize_adjacency_with(g: &Graph, opts: NormalizeOptions) -> CsrMatrix {
    let nbrs = g.in_neighbors();
    let deg: Vec<f64> = nbrs
        .iter()
        .map(|n| {
            let d = n.len() + usize::from(opts.degree_with_self_loops);
            d.max(1) as f64
        })
        .collect();
    let rows = nbrs
        .iter()
        .enumerate()
        .map(|(v, n)| {
            let mut entries: Vec<(usize, f64)> =
                n.iter().map(|&u| (u, 1.0 / (deg[v] * deg[u]).sqrt())).collect();
            entries.push((v, 1.0 / deg[v]));
            entries
        })
        .collect();
    CsrMatrix::from_row_entries(g.num_nodes, rows).expect("well-formed adjacency")
}

/// Row-mean of in-neighbors without self-loop; isolated nodes get an empty
/// row. Used by the mean-aggregation SAGE variant.
pub fn mean_adjacency(g: &Graph) -> CsrMatrix {
    let rows = g
        .in_neighbors()
        .into_iter()
        .map(|n| {
            let w = 1.0 / n.len().max(1) as f64;
            n.into_iter().map(|u| (u, w)).collect()
        })
        .collect();
    CsrMatrix::from_row_entries(g.num_nodes, rows).expect("well-formed adjacency")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Contiguous,
    #[serde(rename = "bfs")]
    BfsBlocks,
    Hash,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contiguous" => Ok(Strategy::Contiguous),
            "bfs" | "bfs_blocks" => Ok(Strategy::BfsBlocks),
            "hash" => Ok(Strategy::Hash),
            other => Err(Error::Config(format!("unknown partition strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    num_partitions: usize,
    assignment: Vec<usize>,
}

impl PartitionPlan {
    /// Validates that every id is below `num_partitions` and no partition is
    /// empty.
    pub fn from_assignment(num_partitions: usize, assignment: Vec<usize>) -> Result<Self> {
        if num_partitions == 0 {
            return Err(Error::Config("need at least one partition".into()));
        }
        let mut sizes = vec![0usize; num_partitions];
        for (v, &p) in assignment.iter().enumerate() {
            if p >= num_partitions {
                return Err(Error::Config(format!("node {v} assigned to partition {p}")));
            }
            sizes[p] += 1;
        }
        if let Some(p) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("partition {p} is empty")));
        }
        Ok(PartitionPlan { num_partitions, assignment })
    }

    pub fn num_partitions(&self) -> usize {
        self.num_partitions
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn owner(&self, v: usize) -> usize {
        self.assignment[v]
    }

    /// Sorted node ids of partition `n`.
    pub fn members(&self, n: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&v| self.assignment[v] == n).collect()
    }
}

/// Cuts `order` into `n` consecutive ranges whose sizes differ by at most one.
fn equal_ranges(order: &[usize], n: usize, num_nodes: usize) -> Vec<usize> {
    let mut assignment = vec![0; num_nodes];
    let (base, extra) = (order.len() / n, order.len() % n);
    let mut pos = 0;
    for p in 0..n {
        let len = base + usize::from(p < extra);
        for &v in &order[pos..pos + len] {
            assignment[v] = p;
        }
        pos += len;
    }
    assignment
}

pub fn partition_nodes(g: &Graph, n: usize, strategy: Strategy, seed: u64) -> Result<PartitionPlan> {
    if n == 0 || n > g.num_nodes {
        return Err(Error::Config(format!(
            "cannot split {} nodes into {n} partitions",
            g.num_nodes
        )));
    }
    let assignment = match strategy {
        Strategy::Contiguous => {
            let order: Vec<usize> = (0..g.num_nodes).collect();
            equal_ranges(&order, n, g.num_nodes)
        }
        Strategy::BfsBlocks => {
            let start = (seed % g.num_nodes as u64) as usize;
            let order = bfs_order(g, start);
            equal_ranges(&order, n, g.num_nodes)
        }
        Strategy::Hash => {
            // Hash each id, then deal the sorted hashes round-robin so no
            // partition ends up empty.
            let key = StreamKey::new(seed, StreamKind::Partition);
            let mut keyed: Vec<(u64, usize)> = (0..g.num_nodes)
                .map(|v| (rand::RngCore::next_u64(&mut RngStream::at(key, v as u64)), v))
                .collect();
            keyed.sort_unstable();
            let mut assignment = vec![0; g.num_nodes];
            for (i, &(_, v)) in keyed.iter().enumerate() {
                assignment[v] = i % n;
            }
            assignment
        }
    };
    PartitionPlan::from_assignment(n, assignment)
}

/// BFS over the undirected view from `start`, visiting neighbors in id order;
/// unreached components follow in id order of their smallest node.
fn bfs_order(g: &Graph, start: usize) -> Vec<usize> {
    let mut adj = vec![BTreeSet::new(); g.num_nodes];
    for &(s, d) in &g.edges {
        if s != d {
            adj[s].insert(d);
            adj[d].insert(s);
        }
    }
    let mut seen = vec![false; g.num_nodes];
    let mut order = Vec::with_capacity(g.num_nodes);
    let roots = std::iter::once(start).chain(0..g.num_nodes);
    for root in roots {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    order
}

/// One worker's slice of the graph.
///
/// `adj_block` has one row per local node and columns `[local.., halo..]`,
/// each group in ascending global id; received halo rows are written into
/// halo slots in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub id: usize,
    pub num_partitions: usize,
    pub local_nodes: Vec<usize>,
    pub halo_nodes: Vec<usize>,
    /// `send_sets[k]`: local row indices whose data peer `k` needs.
    pub send_sets: Vec<Vec<usize>>,
    /// `recv_sets[k]`: halo slot indices owned by peer `k`.
    pub recv_sets: Vec<Vec<usize>>,
    pub adj_block: CsrMatrix,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Partition {
    pub fn num_local(&self) -> usize {
        self.local_nodes.len()
    }

    pub fn num_halo(&self) -> usize {
        self.halo_nodes.len()
    }

    pub fn mask(&self, split: Split) -> Vec<bool> {
        self.splits.iter().map(|&s| s == split).collect()
    }

    /// Global ids of the nodes sent to peer `k`.
    pub fn send_globals(&self, k: usize) -> Vec<usize> {
        self.send_sets[k].iter().map(|&i| self.local_nodes[i]).collect()
    }

    /// Global ids of the halo nodes received from peer `k`.
    pub fn recv_globals(&self, k: usize) -> Vec<usize> {
        self.recv_sets[k].iter().map(|&s| self.halo_nodes[s]).collect()
    }
}

/// Non-local columns referenced by the rows of `members`, sorted.
fn halo_of(adj: &CsrMatrix, plan: &PartitionPlan, n: usize, members: &[usize]) -> Vec<usize> {
    let mut halo = BTreeSet::new();
    for &v in members {
        for (u, _) in adj.row(v) {
            if plan.owner(u) != n {
                halo.insert(u);
            }
        }
    }
    halo.into_iter().collect()
}

/// Builds partition `n` from the already-normalized `adj` (degrees are
/// global, so an edge has the same weight on every partition).
pub fn build_partition(g: &Graph, adj: &CsrMatrix, plan: &PartitionPlan, n: usize) -> Result<Partition> {
    let parts = plan.num_partitions();
    if n >= parts {
        return Err(Error::Config(format!("partition {n} out of {parts}")));
    }
    if adj.rows() != g.num_nodes || adj.cols() != g.num_nodes || plan.assignment().len() != g.num_nodes {
        return Err(Error::shape("adjacency, plan and graph disagree on node count"));
    }
    let members: Vec<Vec<usize>> = (0..parts).map(|p| plan.members(p)).collect();
    let local = members[n].clone();
    let halo = halo_of(adj, plan, n, &local);

    let mut column = vec![usize::MAX; g.num_nodes];
    for (i, &v) in local.iter().enumerate() {
        column[v] = i;
    }
    for (s, &v) in halo.iter().enumerate() {
        column[v] = local.len() + s;
    }

    let mut send_sets = vec![Vec::new(); parts];
    let mut recv_sets = vec![Vec::new(); parts];
    for k in 0..parts {
        if k == n {
            continue;
        }
        let peer_halo = halo_of(adj, plan, k, &members[k]);
        send_sets[k] = peer_halo
            .into_iter()
            .filter(|&v| plan.owner(v) == n)
            .map(|v| column[v])
            .collect();
    }
    for (s, &v) in halo.iter().enumerate() {
        recv_sets[plan.owner(v)].push(s);
    }

    let rows = local
        .iter()
        .map(|&v| adj.row(v).map(|(u, w)| (column[u], w)).collect())
        .collect();
    let adj_block = CsrMatrix::from_row_entries(local.len() + halo.len(), rows)?;

    Ok(Partition {
        id: n,
        num_partitions: parts,
        features: g.features.gather_rows(&local),
        labels: local.iter().map(|&v| g.labels[v]).collect(),
        splits: local.iter().map(|&v| g.splits[v]).collect(),
        local_nodes: local,
        halo_nodes: halo,
        send_sets,
        recv_sets,
        adj_block,
    })
}

pub fn build_partitions(g: &Graph, adj: &CsrMatrix, plan: &PartitionPlan) -> Result<Vec<Partition>> {
    (0..plan.num_partitions()).map(|n| build_partition(g, adj, plan, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn plain_graph(n: usize, undirected: &[(usize, usize)]) -> Graph {
        let mut edges = Vec::new();
        for &(a, b) in undirected {
            edges.push((a, b));
            edges.push((b, a));
        }
        Graph::new(
            n,
            edges,
            DenseMatrix::zeros(n, 1),
            vec![0; n],
            1,
            vec![Split::Train; n],
        )
        .unwrap()
    }

    #[test]
    fn single_node_self_loop() {
        let a = normalize_adjacency(&plain_graph(1, &[]));
        assert_eq!(a.to_dense(), DenseMatrix::from_rows(&[[1.0]]));
    }

    #[test]
    fn two_node_edge() {
        let a = normalize_adjacency(&plain_graph(2, &[(0, 1)]));
        assert_eq!(a.to_dense(), DenseMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));
    }

    #[test]
    fn cycle_rows_sum_to_one() {
        let a = normalize_adjacency(&plain_graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]));
        for r in 0..4 {
            let s: f64 = a.row(r).map(|(_, v)| v).sum();
            assert!((s - 1.0).abs() < 1e-15);
            assert!(a.row(r).all(|(_, v)| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn duplicates_and_self_loops_collapse() {
        let mut g = plain_graph(2, &[(0, 1), (0, 1)]);
        g.edges.push((1, 1));
        g.edges.push((0, 0));
        let a = normalize_adjacency(&g);
        assert_eq!(a.nnz(), 4);
        assert_eq!(a.to_dense(), DenseMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));
    }

    #[test]
    fn degree_without_self_loops() {
        let g = plain_graph(3, &[(0, 1)]);
        let a = normalize_adjacency_with(&g, NormalizeOptions { degree_with_self_loops: false });
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(a.get(2, 2), 1.0);
    }

    #[test]
    fn contiguous_split() {
        let g = plain_graph(10, &[]);
        let plan = partition_nodes(&g, 2, Strategy::Contiguous, 0).unwrap();
        assert_eq!(plan.members(0), (0..5).collect::<Vec<_>>());
        assert_eq!(plan.members(1), (5..10).collect::<Vec<_>>());
        assert!(partition_nodes(&g, 11, Strategy::Contiguous, 0).is_err());
        assert!(partition_nodes(&g, 0, Strategy::Hash, 0).is_err());
    }

    #[test]
    fn bfs_on_path_follows_node_order() {
        let path: Vec<(usize, usize)> = (0..7).map(|i| (i, i + 1)).collect();
        let g = plain_graph(8, &path);
        let plan = partition_nodes(&g, 2, Strategy::BfsBlocks, 0).unwrap();
        assert_eq!(plan.members(0), vec![0, 1, 2, 3]);
        assert_eq!(plan.members(1), vec![4, 5, 6, 7]);
    }

    #[test]
    fn every_strategy_with_one_partition() {
        let g = plain_graph(6, &[(0, 1), (2, 3), (4, 5), (1, 2)]);
        let adj = normalize_adjacency(&g);
        for s in [Strategy::Contiguous, Strategy::BfsBlocks, Strategy::Hash] {
            let plan = partition_nodes(&g, 1, s, 3).unwrap();
            assert!(plan.assignment().iter().all(|&p| p == 0));
            let p = build_partition(&g, &adj, &plan, 0).unwrap();
            assert!(p.halo_nodes.is_empty());
            assert_eq!(p.adj_block, adj);
        }
    }

    #[test]
    fn hash_is_deterministic_and_balanced() {
        let g = plain_graph(50, &[]);
        let a = partition_nodes(&g, 4, Strategy::Hash, 9).unwrap();
        let b = partition_nodes(&g, 4, Strategy::Hash, 9).unwrap();
        let c = partition_nodes(&g, 4, Strategy::Hash, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in 0..4 {
            assert!((12..=13).contains(&a.members(p).len()));
        }
    }

    /// Three-worker topology: worker 1 owns {4, 5, 6}; node 4 links to node 7
    /// on worker 0 and node 1 on worker 2.
    #[test]
    fn three_worker_halo_example() {
        let g = plain_graph(
            9,
            &[(4, 7), (4, 1), (4, 5), (5, 6), (5, 8), (6, 2), (0, 1), (1, 2), (2, 3), (7, 8)],
        );
        let assignment = vec![2, 2, 2, 2, 1, 1, 1, 0, 0];
        let plan = PartitionPlan::from_assignment(3, assignment).unwrap();
        let adj = normalize_adjacency(&g);
        let parts = build_partitions(&g, &adj, &plan).unwrap();
        let p1 = &parts[1];
        assert_eq!(p1.local_nodes, vec![4, 5, 6]);
        assert_eq!(p1.halo_nodes, vec![1, 2, 7, 8]);
        assert_eq!(p1.recv_globals(0), vec![7, 8]);
        assert_eq!(p1.recv_globals(2), vec![1, 2]);
        let row4: Vec<usize> = p1.adj_block.row(0).map(|(c, _)| c).collect();
        // local 4,5 then halo slots for 1 and 7
        assert_eq!(row4, vec![0, 1, 3, 5]);
        // nodes 4, 5, 6 are all needed elsewhere
        let mut sent: Vec<usize> = (0..3).flat_map(|k| p1.send_globals(k)).collect();
        sent.sort();
        sent.dedup();
        assert_eq!(sent, vec![4, 5, 6]);
    }
}
