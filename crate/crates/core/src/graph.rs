//! Skeleton graphs and their partitioned, normalized adjacency matrices.

use std::fmt;

use thiserror::Error;

/// Joints per body.
pub const JOINTS: usize = 25;
/// Spatial kernels: root, centripetal, centrifugal.
pub const KERNELS: usize = 3;
/// Added to every degree before normalization so empty rows stay finite.
pub const BETA_NORM: f64 = 0.001;

/// Kinematic tree as (child, parent) pairs in 1-based dataset numbering.
const BONES_1BASED: [(usize, usize); 24] = [
    (1, 2),
    (2, 21),
    (3, 21),
    (4, 3),
    (5, 21),
    (6, 5),
    (7, 6),
    (8, 7),
    (9, 21),
    (10, 9),
    (11, 10),
    (12, 11),
    (13, 1),
    (14, 13),
    (15, 14),
    (16, 15),
    (17, 1),
    (18, 17),
    (19, 18),
    (20, 19),
    (22, 23),
    (23, 8),
    (24, 25),
    (25, 12),
];

/// 0-based index of the spine-shoulder joint, the root of the tree.
pub const ROOT_JOINT: usize = 20;

/// Head, torso, left hand, right hand, left foot, right foot (0-based).
pub const REPRESENTATIVE_JOINTS: [usize; 6] = [3, 1, 7, 11, 15, 19];
pub const REPRESENTATIVE_NAMES: [&str; 6] = ["head", "torso", "left_hand", "right_hand", "left_foot", "right_foot"];

/// Parent of each joint in the kinematic tree; `None` for the root.
pub fn parent_of(joint: usize) -> Option<usize> {
    BONES_1BASED
        .iter()
        .find(|&&(c, _)| c - 1 == joint)
        .map(|&(_, p)| p - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GraphKind {
    Intra,
    Inter,
}

impl GraphKind {
    pub fn node_count(self) -> usize {
        match self {
            GraphKind::Intra => JOINTS,
            GraphKind::Inter => 2 * JOINTS,
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::Intra => "intra",
            GraphKind::Inter => "inter",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("reference pose has {got} nodes, graph has {want}")]
    PoseSize { got: usize, want: usize },
    #[error("reference pose has a non-finite coordinate at node {0}")]
    NonFinitePose(usize),
    #[error("beta_norm must be positive, got {0}")]
    BadBeta(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyGraph {
    pub kind: GraphKind,
    pub node_count: usize,
    /// Undirected edges stored with the smaller index first.
    pub edges: Vec<(usize, usize)>,
    /// Body-local representative joint indices (empty for the intra kind).
    pub representative_joints: Vec<usize>,
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn tree_edges(offset: usize) -> impl Iterator<Item = (usize, usize)> {
    BONES_1BASED
        .iter()
        .map(move |&(c, p)| ordered(c - 1 + offset, p - 1 + offset))
}

pub fn build_intra_graph() -> BodyGraph {
    BodyGraph {
        kind: GraphKind::Intra,
        node_count: JOINTS,
        edges: tree_edges(0).collect(),
        representative_joints: Vec::new(),
    }
}

/// Two kinematic trees plus a virtual edge between every pair of
/// representative joints across the bodies. Body two occupies nodes 25..50.
pub fn build_inter_graph() -> BodyGraph {
    let mut edges: Vec<_> = tree_edges(0).chain(tree_edges(JOINTS)).collect();
    for &a in &REPRESENTATIVE_JOINTS {
        for &b in &REPRESENTATIVE_JOINTS {
            edges.push(ordered(a, JOINTS + b));
        }
    }
    BodyGraph {
        kind: GraphKind::Inter,
        node_count: 2 * JOINTS,
        edges,
        representative_joints: REPRESENTATIVE_JOINTS.to_vec(),
    }
}

pub fn build_graph(kind: GraphKind) -> BodyGraph {
    match kind {
        GraphKind::Intra => build_intra_graph(),
        GraphKind::Inter => build_inter_graph(),
    }
}

impl BodyGraph {
    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&ordered(a, b))
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == node || b == node).count()
    }

    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| match (a == node, b == node) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect()
    }

    /// Edges joining the two bodies.
    pub fn virtual_edges(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .copied()
            .filter(|&(a, b)| (a < JOINTS) != (b < JOINTS))
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for m in self.neighbors(n) {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Square matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        (0..n).for_each(|i| m.set(i, i, 1.0));
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.data[i * self.n..(i + 1) * self.n].iter().sum()
    }

    pub fn nonzeros(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// Whitespace-separated rows, for inspection dumps.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.data.chunks(self.n) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Distances closer than this count as equal when partitioning.
const TIE_TOLERANCE: f64 = 1e-9;

/// Binary neighbourhood subsets before normalization. Entry `(i, j)` is set
/// when node `j` belongs to subset `k` of node `i`'s neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPartition {
    pub subsets: [Matrix; KERNELS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedAdjacency {
    pub binary: [Matrix; KERNELS],
    pub normalized: [Matrix; KERNELS],
    /// Diagonal of each degree matrix.
    pub degrees: [Vec<f64>; KERNELS],
    pub beta_norm: f64,
}

impl PartitionedAdjacency {
    pub fn node_count(&self) -> usize {
        self.normalized[0].n
    }

    /// The normalized matrices stacked as a `(K, V, V)` buffer.
    pub fn stacked(&self) -> Vec<f64> {
        self.normalized.iter().flat_map(|m| m.data.iter().copied()).collect()
    }
}

/// Splits every neighbourhood into root, centripetal, and centrifugal
/// subsets by distance to the mean of all reference-pose nodes.
pub fn partition_spatial(graph: &BodyGraph, reference_pose: &[[f64; 3]]) -> Result<BinaryPartition, GraphError> {
    let v = graph.node_count;
    if reference_pose.len() != v {
        return Err(GraphError::PoseSize {
            got: reference_pose.len(),
            want: v,
        });
    }
    if let Some(i) = reference_pose.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(GraphError::NonFinitePose(i));
    }
    let mut centre = [0.0; 3];
    for p in reference_pose {
        (0..3).for_each(|d| centre[d] += p[d] / v as f64);
    }
    let dist: Vec<f64> = reference_pose
        .iter()
        .map(|p| (0..3).map(|d| (p[d] - centre[d]).powi(2)).sum::<f64>().sqrt())
        .collect();
    if dist.iter().all(|&d| d < 1e-12) {
        log::warn!("degenerate reference pose: every neighbour assigned to the centrifugal subset");
    }
    let mut subsets = [Matrix::identity(v), Matrix::zeros(v), Matrix::zeros(v)];
    for &(a, b) in &graph.edges {
        for (i, j) in [(a, b), (b, a)] {
            let k = if dist[j] < dist[i] - TIE_TOLERANCE { 1 } else { 2 };
            subsets[k].set(i, j, 1.0);
        }
    }
    Ok(BinaryPartition { subsets })
}

/// `A_k = Λ_k^{-1/2} Ā_k Λ_k^{-1/2}` with `Λ_k` the row sums of `Ā_k` plus `beta_norm`.
pub fn normalize_adjacency(binary: &BinaryPartition, beta_norm: f64) -> Result<PartitionedAdjacency, GraphError> {
    if !(beta_norm > 0.0) {
        return Err(GraphError::BadBeta(beta_norm));
    }
    let mut normalized = binary.subsets.clone();
    let mut degrees: [Vec<f64>; KERNELS] = Default::default();
    for (k, bin) in binary.subsets.iter().enumerate() {
        let deg: Vec<f64> = (0..bin.n).map(|i| bin.row_sum(i) + beta_norm).collect();
        for i in 0..bin.n {
            for j in 0..bin.n {
                normalized[k].set(i, j, bin.get(i, j) / (deg[i] * deg[j]).sqrt());
            }
        }
        degrees[k] = deg;
    }
    Ok(PartitionedAdjacency {
        binary: binary.subsets.clone(),
        normalized,
        degrees,
        beta_norm,
    })
}

/// A standing pose with arms lowered, facing +z, feet on the floor.
pub fn rest_pose() -> [[f64; 3]; JOINTS] {
    [
        [0.0, 0.95, 0.0],
        [0.0, 1.20, 0.0],
        [0.0, 1.50, 0.0],
        [0.0, 1.65, 0.0],
        [-0.18, 1.40, 0.0],
        [-0.22, 1.15, 0.0],
        [-0.24, 0.92, 0.0],
        [-0.25, 0.85, 0.0],
        [0.18, 1.40, 0.0],
        [0.22, 1.15, 0.0],
        [0.24, 0.92, 0.0],
        [0.25, 0.85, 0.0],
        [-0.09, 0.92, 0.0],
        [-0.10, 0.50, 0.0],
        [-0.10, 0.08, 0.0],
        [-0.10, 0.03, 0.10],
        [0.09, 0.92, 0.0],
        [0.10, 0.50, 0.0],
        [0.10, 0.08, 0.0],
        [0.10, 0.03, 0.10],
        [0.0, 1.42, 0.0],
        [-0.26, 0.78, 0.0],
        [-0.22, 0.83, 0.03],
        [0.26, 0.78, 0.0],
        [0.22, 0.83, 0.03],
    ]
}

/// Two rest poses 1.5 m apart along z, facing each other.
pub fn rest_pair_pose() -> Vec<[f64; 3]> {
    let one = rest_pose();
    let mut pose: Vec<[f64; 3]> = one.to_vec();
    pose.extend(one.iter().map(|p| [-p[0], p[1], 1.5 - p[2]]));
    pose
}

pub fn default_reference_pose(kind: GraphKind) -> Vec<[f64; 3]> {
    match kind {
        GraphKind::Intra => rest_pose().to_vec(),
        GraphKind::Inter => rest_pair_pose(),
    }
}

/// Partitioned, normalized adjacency for one graph kind.
pub fn adjacency_for(kind: GraphKind, reference_pose: &[[f64; 3]]) -> Result<PartitionedAdjacency, GraphError> {
    let graph = build_graph(kind);
    normalize_adjacency(&partition_spatial(&graph, reference_pose)?, BETA_NORM)
}
