//! Neighbor sets over an `H × W` patch grid.
//!
//! Node `(r, c)` has id `r · width + c`. Two policies are provided: the static
//! criss-cross SVGA pattern and dynamic feature-space kNN.

use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grid spacing between SVGA neighbors.
pub const SVGA_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphPolicy {
    Svga,
    Knn { k: usize },
}

impl std::fmt::Display for GraphPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphPolicy::Svga => write!(f, "svga"),
            GraphPolicy::Knn { k } => write!(f, "knn({k})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGraph {
    height: usize,
    width: usize,
    neighbors: Vec<Vec<usize>>,
    policy: GraphPolicy,
}

/// Neighbors of every node at even offsets along its row and column.
pub fn build_svga(height: usize, width: usize) -> Result<PatchGraph> {
    if height == 0 || width == 0 {
        return Err(Error::config(format!(
            "SVGA grid must be at least 1x1, got {height}x{width}"
        )));
    }
    let mut neighbors = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let mut list: Vec<usize> = (0..height)
                .filter(|&rr| rr != r && rr.abs_diff(r) % SVGA_STRIDE == 0)
                .map(|rr| rr * width + c)
                .chain(
                    (0..width)
                        .filter(|&cc| cc != c && cc.abs_diff(c) % SVGA_STRIDE == 0)
                        .map(|cc| r * width + cc),
                )
                .collect();
            list.sort_unstable();
            neighbors.push(list);
        }
    }
    Ok(PatchGraph {
        height,
        width,
        neighbors,
        policy: GraphPolicy::Svga,
    })
}

/// SVGA degree of `(r, c)` in closed form.
pub fn svga_degree(height: usize, width: usize, r: usize, c: usize) -> usize {
    r / 2 + (height - 1 - r) / 2 + c / 2 + (width - 1 - c) / 2
}

/// `k` nearest nodes by Euclidean distance on the rows of `features`,
/// self excluded, ties to the lower index. Nodes are laid out as a `1 × N` grid.
pub fn build_knn(features: &Tensor, k: usize) -> Result<PatchGraph> {
    let n = features.shape().first().copied().unwrap_or(0);
    build_knn_grid(features, 1, n, k)
}

/// [`build_knn`] with nodes interpreted as a `height × width` grid.
pub fn build_knn_grid(features: &Tensor, height: usize, width: usize, k: usize) -> Result<PatchGraph> {
    if features.rank() != 2 || features.shape()[0] != height * width {
        return Err(Error::Dimension {
            op: "build_knn",
            lhs: features.shape().to_vec(),
            rhs: vec![height, width],
        });
    }
    let n = height * width;
    if k >= n {
        return Err(Error::config(format!(
            "kNN needs k < node count, got k={k} with {n} nodes"
        )));
    }
    let mut neighbors = Vec::with_capacity(n);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dists.clear();
        let xi = features.row(i);
        for j in (0..n).filter(|&j| j != i) {
            let d: f64 = xi
                .iter()
                .zip(features.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push((d, j));
        }
        if k < dists.len() {
            dists.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            dists.truncate(k);
        }
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        neighbors.push(dists.iter().map(|&(_, j)| j).collect());
    }
    Ok(PatchGraph {
        height,
        width,
        neighbors,
        policy: GraphPolicy::Knn { k },
    })
}

impl PatchGraph {
    pub fn build(policy: GraphPolicy, height: usize, width: usize, features: Option<&Tensor>) -> Result<Self> {
        match policy {
            GraphPolicy::Svga => build_svga(height, width),
            GraphPolicy::Knn { k } => {
                let features = features.ok_or_else(|| {
                    Error::config("kNN graph construction needs node features")
                })?;
                build_knn_grid(features, height, width, k)
            }
        }
    }

    /// A graph from explicit neighbor lists, validated against the invariants.
    pub fn from_lists(height: usize, width: usize, neighbors: Vec<Vec<usize>>, policy: GraphPolicy) -> Result<Self> {
        let graph = PatchGraph {
            height,
            width,
            neighbors,
            policy,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if self.neighbors.len() != n {
            return Err(Error::format(
                "patch graph",
                format!("{} neighbor lists for {n} nodes", self.neighbors.len()),
            ));
        }
        for (i, list) in self.neighbors.iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            for &j in list {
                if j >= n {
                    return Err(Error::format("patch graph", format!("node {i}: neighbor {j} out of range")));
                }
                if j == i {
                    return Err(Error::format("patch graph", format!("node {i}: self-loop")));
                }
                if !seen.insert(j) {
                    return Err(Error::format("patch graph", format!("node {i}: duplicate neighbor {j}")));
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn policy(&self) -> GraphPolicy {
        self.policy
    }

    pub fn node_count(&self) -> usize {
        self.height * self.width
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(i, list)| list.iter().all(|&j| self.neighbors[j].contains(&i)))
    }

    /// Nodes reachable from `start` in at most `hops` steps (including itself).
    pub fn reachable_within(&self, start: usize, hops: usize) -> Vec<bool> {
        let mut seen = vec![false; self.node_count()];
        seen[start] = true;
        let mut frontier = vec![start];
        for _ in 0..hops {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in &self.neighbors[u] {
                    if !seen[v] {
                        seen[v] = true;
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        seen
    }

    pub fn adjacency(&self) -> Adjacency {
        Adjacency::from_lists(&self.neighbors)
    }

    /// Block-diagonal adjacency for `batch` copies of the graph, image-major.
    pub fn adjacency_batched(&self, batch: usize) -> Adjacency {
        let n = self.node_count();
        let lists: Vec<Vec<usize>> = (0..batch)
            .flat_map(|b| {
                self.neighbors
                    .iter()
                    .map(move |list| list.iter().map(|&j| j + b * n).collect())
            })
            .collect();
        Adjacency::from_lists(&lists)
    }

    /// One line per node: `node_id: n1 n2 ...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            write!(out, "{i}:").unwrap();
            for j in list {
                write!(out, " {j}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`PatchGraph::to_text`] output for a known grid.
    pub fn from_text(text: &str, height: usize, width: usize, policy: GraphPolicy) -> Result<Self> {
        let mut neighbors = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::format("graph dump", format!("line {}: missing ':'", line_no + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::format("graph dump", format!("line {}: bad node id", line_no + 1)))?;
            if id != neighbors.len() {
                return Err(Error::format(
                    "graph dump",
                    format!("line {}: expected node {}, got {id}", line_no + 1, neighbors.len()),
                ));
            }
            let list = rest
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format("graph dump", format!("line {}: bad neighbor id", line_no + 1)))?;
            neighbors.push(list);
        }
        Self::from_lists(height, width, neighbors, policy)
    }
}

/// Compressed edge list used by the aggregators. Edge `e` in segment `i`
/// carries a message from `neighbors[e]` into `centers[e] == i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Rc<[usize]>,
    neighbors: Rc<[usize]>,
    centers: Rc<[usize]>,
}

impl Adjacency {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut neighbors = Vec::new();
        let mut centers = Vec::new();
        offsets.push(0);
        for (i, list) in lists.iter().enumerate() {
            neighbors.extend_from_slice(list);
            centers.extend(std::iter::repeat_n(i, list.len()));
            offsets.push(neighbors.len());
        }
        Adjacency {
            offsets: offsets.into(),
            neighbors: neighbors.into(),
            centers: centers.into(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn neighbors_of(&self, node: usize) -> &[usize] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn offsets(&self) -> Rc<[usize]> {
        Rc::clone(&self.offsets)
    }

    pub fn neighbors(&self) -> Rc<[usize]> {
        Rc::clone(&self.neighbors)
    }

    pub fn centers(&self) -> Rc<[usize]> {
        Rc::clone(&self.centers)
    }

    /// `1 / degree` per edge row, the scale for neighbor-count normalization.
    pub fn inverse_degree_per_edge(&self) -> Rc<[f64]> {
        (0..self.node_count())
            .flat_map(|i| {
                let d = self.degree(i);
                std::iter::repeat_n(1.0 / d.max(1) as f64, d)
            })
            .collect()
    }

    pub fn to_lists(&self) -> Vec<Vec<usize>> {
        (0..self.node_count()).map(|i| self.neighbors_of(i).to_vec()).collect()
    }
}
