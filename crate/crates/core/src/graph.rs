//! Consistency-intersection patient graphs.
//!
//! Edges are directed `(src, dst)` pairs; `knn_edges` emits `(i, j)` for
//! every nearest neighbour `j` of `i`, and message passing aggregates at
//! `dst` over its in-neighbours.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use ndarray::Axis;

use crate::error::{CmglError, Result};
use crate::tape::{Mat, SparseRows};

pub const NORM_EPS: f64 = 1e-12;

/// A directed edge set over nodes `0..n_nodes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    pub edges: BTreeSet<(usize, usize)>,
    pub n_nodes: usize,
    /// Neighbour count the set was built with (0 when not k-NN derived).
    pub k: usize,
    /// Modality name, or `"intersection"`.
    pub source: String,
}

impl EdgeSet {
    pub fn new(n_nodes: usize, k: usize, source: impl Into<String>, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            edges: edges.into_iter().collect(),
            n_nodes,
            k,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, src: usize, dst: usize) -> bool {
        self.edges.contains(&(src, dst))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("src\tdst\n");
        for (a, b) in &self.edges {
            s.push_str(&format!("{a}\t{b}\n"));
        }
        s
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| CmglError::io(path, e))
    }
}

/// Neighbour lists sorted by cosine distance, ties by index.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    lists: Vec<Vec<usize>>,
}

impl KnnIndex {
    /// Keeps up to `max_k` neighbours for every row of `x`.
    pub fn build(x: &Mat, max_k: usize) -> Result<Self> {
        let n = x.nrows();
        if max_k == 0 || max_k >= n {
            return Err(CmglError::Domain(format!("k = {max_k} needs 1 <= k <= N - 1 with N = {n}")));
        }
        let mut unit = x.clone();
        for mut row in unit.rows_mut() {
            let norm = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| v / norm);
        }
        let sim = unit.dot(&unit.t());
        let mut lists = Vec::with_capacity(n);
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
        for (i, row) in sim.axis_iter(Axis(0)).enumerate() {
            cand.clear();
            cand.extend(row.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, &s)| (1.0 - s, j)));
            let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if max_k < cand.len() {
                cand.select_nth_unstable_by(max_k - 1, by);
                cand.truncate(max_k);
            }
            cand.sort_unstable_by(by);
            lists.push(cand.iter().map(|&(_, j)| j).collect());
        }
        Ok(Self { lists })
    }

    pub fn n_nodes(&self) -> usize {
        self.lists.len()
    }

    pub fn max_k(&self) -> usize {
        self.lists.first().map_or(0, Vec::len)
    }

    pub fn edges(&self, k: usize, source: &str) -> Result<EdgeSet> {
        if k == 0 || k > self.max_k() {
            return Err(CmglError::Domain(format!("k = {k} outside 1..={}", self.max_k())));
        }
        let edges = self
            .lists
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l[..k].iter().map(move |&j| (i, j)));
        Ok(EdgeSet::new(self.n_nodes(), k, source, edges))
    }
}

/// Directed k-NN edges under cosine distance `1 - cos(x_i, x_j)`.
pub fn knn_edges(x: &Mat, k: usize) -> Result<EdgeSet> {
    KnnIndex::build(x, k)?.edges(k, "knn")
}

/// Edges present in every input set.
pub fn intersect(sets: &[EdgeSet]) -> Result<EdgeSet> {
    let (first, rest) = sets
        .split_first()
        .ok_or_else(|| CmglError::Domain("intersection of zero edge sets".into()))?;
    if let Some(bad) = rest.iter().find(|s| s.n_nodes != first.n_nodes) {
        return Err(CmglError::Domain(format!(
            "edge sets over {} and {} nodes",
            first.n_nodes, bad.n_nodes
        )));
    }
    let edges = first
        .edges
        .iter()
        .filter(|e| rest.iter().all(|s| s.edges.contains(e)))
        .copied();
    Ok(EdgeSet::new(first.n_nodes, first.k, "intersection", edges))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleMask(pub Vec<Role>);

impl RoleMask {
    /// First `n_train` nodes train, the remaining `n_eval` evaluation.
    pub fn split(n_train: usize, n_eval: usize) -> Self {
        let mut roles = vec![Role::Train; n_train];
        roles.extend(std::iter::repeat_n(Role::Eval, n_eval));
        Self(roles)
    }
}

/// Keeps train→train and train→eval edges; drops anything leaving an
/// evaluation node.
pub fn apply_edge_policy(edges: &EdgeSet, roles: &RoleMask) -> EdgeSet {
    assert_eq!(roles.0.len(), edges.n_nodes, "role mask size");
    let kept = edges
        .edges
        .iter()
        .filter(|&&(src, _)| roles.0[src] == Role::Train)
        .copied();
    EdgeSet {
        edges: kept.collect(),
        ..edges.clone()
    }
}

pub fn add_self_loops(edges: &EdgeSet) -> EdgeSet {
    let mut out = edges.clone();
    out.edges.extend((0..edges.n_nodes).map(|i| (i, i)));
    out
}

/// Mean-over-in-neighbours aggregation matrix: row `dst` averages all
/// `src` with `(src, dst)` in the set.
pub fn mean_aggregator(edges: &EdgeSet) -> Result<SparseRows> {
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); edges.n_nodes];
    for &(src, dst) in &edges.edges {
        if src >= edges.n_nodes || dst >= edges.n_nodes {
            return Err(CmglError::Structural(format!(
                "edge ({src}, {dst}) outside {} nodes",
                edges.n_nodes
            )));
        }
        rows[dst].push((src, 1.0));
    }
    for (i, row) in rows.iter_mut().enumerate() {
        if row.is_empty() {
            return Err(CmglError::Structural(format!("node {i} has no incoming edges")));
        }
        let w = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|e| e.1 = w);
    }
    Ok(SparseRows::from_rows(edges.n_nodes, &rows))
}

/// A graph over a subset of dataset rows, with local node indices.
#[derive(Debug, Clone)]
pub struct NodeGraph {
    /// Dataset row of each local node; training nodes first.
    pub nodes: Vec<usize>,
    pub n_train: usize,
    pub edges: EdgeSet,
    pub adjacency: Rc<SparseRows>,
}

impl NodeGraph {
    pub fn eval_positions(&self) -> std::ops::Range<usize> {
        self.n_train..self.nodes.len()
    }
}

/// Per-modality neighbour lists over a fixed node subset, reusable across
/// neighbour counts.
pub struct ModalityIndex {
    nodes: Vec<usize>,
    n_train: usize,
    per_modality: Vec<KnnIndex>,
}

impl ModalityIndex {
    pub fn build(matrices: &[Mat], train: &[usize], eval: &[usize], max_k: usize) -> Result<Self> {
        let nodes: Vec<usize> = train.iter().chain(eval).copied().collect();
        let per_modality = matrices
            .iter()
            .map(|m| KnnIndex::build(&m.select(Axis(0), &nodes), max_k))
            .collect::<Result<_>>()?;
        Ok(Self {
            nodes,
            n_train: train.len(),
            per_modality,
        })
    }

    /// Intersection graph for `k`, edge policy, then self-loops.
    pub fn graph(&self, k: usize) -> Result<NodeGraph> {
        let sets = self
            .per_modality
            .iter()
            .enumerate()
            .map(|(m, idx)| idx.edges(k, &format!("modality{m}")))
            .collect::<Result<Vec<_>>>()?;
        let inter = intersect(&sets)?;
        let roles = RoleMask::split(self.n_train, self.nodes.len() - self.n_train);
        let edges = add_self_loops(&apply_edge_policy(&inter, &roles));
        let adjacency = Rc::new(mean_aggregator(&edges)?);
        Ok(NodeGraph {
            nodes: self.nodes.clone(),
            n_train: self.n_train,
            edges,
            adjacency,
        })
    }
}

/// Graph over `train ∪ eval` (or train only when `eval` is empty).
pub fn consistency_graph(matrices: &[Mat], train: &[usize], eval: &[usize], k: usize) -> Result<NodeGraph> {
    ModalityIndex::build(matrices, train, eval, k)?.graph(k)
}

/// Intersection graph with self-loops over every row and no edge policy,
/// used for frozen inference on a whole cohort.
pub fn inference_graph(matrices: &[Mat], k: usize) -> Result<NodeGraph> {
    let n = matrices[0].nrows();
    let all: Vec<usize> = (0..n).collect();
    ModalityIndex::build(matrices, &all, &[], k)?.graph(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(n: usize, e: &[(usize, usize)]) -> EdgeSet {
        EdgeSet::new(n, 1, "t", e.iter().copied())
    }

    #[test]
    fn identical_rows_tie_break_to_smallest_index() {
        let x = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let e = knn_edges(&x, 1).unwrap();
        assert_eq!(e.edges, set(3, &[(0, 1), (1, 0), (2, 0)]).edges);
    }

    #[test]
    fn diagonal_tie_example() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let e = knn_edges(&x, 1).unwrap();
        assert_eq!(e.edges, set(3, &[(0, 2), (1, 2), (2, 0)]).edges);
    }

    #[test]
    fn k_bounds() {
        let x = array![[1.0], [2.0], [3.0]];
        assert!(knn_edges(&x, 3).is_err());
        assert!(knn_edges(&x, 0).is_err());
        assert_eq!(knn_edges(&x, 2).unwrap().len(), 6);
    }

    #[test]
    fn zero_rows_are_handled() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let e = knn_edges(&x, 1).unwrap();
        assert_eq!(e.len(), 3);
        // the zero row is at distance 1 from both others
        assert!(e.contains(0, 1));
    }

    #[test]
    fn intersection_cases() {
        let a = set(3, &[(0, 1), (1, 2), (2, 0)]);
        let b = set(3, &[(0, 1), (2, 0), (1, 0)]);
        assert_eq!(intersect(&[a.clone(), b]).unwrap().edges, set(3, &[(0, 1), (2, 0)]).edges);
        assert_eq!(intersect(&[a.clone(), a.clone()]).unwrap().edges, a.edges);
        let c = set(3, &[(1, 0)]);
        assert!(intersect(&[a, c]).unwrap().is_empty());
        assert!(intersect(&[]).is_err());
    }

    #[test]
    fn policy_orientation() {
        let e = set(4, &[(0, 1), (1, 0), (0, 2), (2, 0), (2, 3), (3, 2)]);
        let all_train = RoleMask(vec![Role::Train; 4]);
        assert_eq!(apply_edge_policy(&e, &all_train), e);
        let roles = RoleMask::split(2, 2);
        let kept = apply_edge_policy(&e, &roles);
        assert_eq!(kept.edges, set(4, &[(0, 1), (1, 0), (0, 2)]).edges);
    }

    #[test]
    fn self_loops() {
        let empty = set(3, &[]);
        let looped = add_self_loops(&empty);
        assert_eq!(looped.edges, set(3, &[(0, 0), (1, 1), (2, 2)]).edges);
        assert_eq!(add_self_loops(&looped), looped);
        let e = set(3, &[(0, 1), (2, 1)]);
        assert_eq!(add_self_loops(&e).len(), e.len() + 3);
    }

    #[test]
    fn aggregator_needs_in_edges() {
        let e = set(3, &[(0, 1), (2, 1), (1, 0)]);
        assert!(matches!(mean_aggregator(&e), Err(CmglError::Structural(_))));
        let a = mean_aggregator(&add_self_loops(&e)).unwrap();
        let row: Vec<_> = a.row(1).collect();
        assert_eq!(row, vec![(0, 1.0 / 3.0), (1, 1.0 / 3.0), (2, 1.0 / 3.0)]);
    }

    #[test]
    fn fold_graph_has_no_eval_sources() {
        let mut rng = crate::rng::stream(1, "t", 0);
        let ms = vec![crate::nn::normal(&mut rng, 30, 4, 1.0), crate::nn::normal(&mut rng, 30, 3, 1.0)];
        let train: Vec<usize> = (0..20).collect();
        let eval: Vec<usize> = (20..30).collect();
        let g = consistency_graph(&ms, &train, &eval, 5).unwrap();
        for &(src, dst) in &g.edges.edges {
            assert!(src < g.n_train || src == dst);
        }
        assert_eq!(g.nodes.len(), 30);
    }
}
