//! Joint adjacency, walk-count powers, and the neighbour partition used by
//! the graph convolution.

use crate::error::{Result, ScdError};
use ndarray::Array2;
use std::collections::VecDeque;

/// Joints in the NTU RGB+D body layout.
pub const NTU_JOINTS: usize = 25;

/// Undirected bones of the NTU 25-joint body, zero-based.
pub const NTU_EDGES: [(usize, usize); 24] = [
    (0, 1),
    (1, 20),
    (2, 20),
    (3, 2),
    (4, 20),
    (5, 4),
    (6, 5),
    (7, 6),
    (8, 20),
    (9, 8),
    (10, 9),
    (11, 10),
    (12, 0),
    (13, 12),
    (14, 13),
    (15, 14),
    (16, 0),
    (17, 16),
    (18, 17),
    (19, 18),
    (21, 22),
    (22, 7),
    (23, 24),
    (24, 11),
];

/// Spine base; root of the bone tree.
pub const NTU_ROOT: usize = 0;

/// Spine shoulder; gravity centre for the spatial partition.
pub const NTU_CENTER: usize = 20;

/// Left/right mirrored joint pairs.
pub const NTU_FLIP_PAIRS: [(usize, usize); 10] = [
    (4, 8),
    (5, 9),
    (6, 10),
    (7, 11),
    (12, 16),
    (13, 17),
    (14, 18),
    (15, 19),
    (21, 23),
    (22, 24),
];

/// How the neighbourhood of a joint is split into weight subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionStrategy {
    /// Every neighbour, self included, shares one weight.
    Uniform,
    /// Self, centripetal and centrifugal subsets by hop distance to `center`.
    /// Neighbours at the same distance as the joint join the self subset.
    Spatial { center: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    adjacency: Array2<i64>,
    partition: Array2<i8>,
    num_subsets: usize,
    root: usize,
    flip_pairs: Vec<(usize, usize)>,
}

fn check_binary_symmetric(p: &Array2<i64>) -> Result<()> {
    let (r, c) = p.dim();
    if r != c {
        return Err(ScdError::InvalidGraph(format!("adjacency is {r}x{c}, not square")));
    }
    for i in 0..r {
        for j in 0..c {
            let v = p[[i, j]];
            if v != 0 && v != 1 {
                return Err(ScdError::InvalidGraph(format!("entry ({i},{j}) = {v} is not binary")));
            }
            if v != p[[j, i]] {
                return Err(ScdError::InvalidGraph(format!("entry ({i},{j}) breaks symmetry")));
            }
        }
    }
    Ok(())
}

/// `P^n`: entry `(i, j)` counts the length-`n` walks from `i` to `j`.
pub fn power_adjacency(p: &Array2<i64>, n: u32) -> Result<Array2<i64>> {
    check_binary_symmetric(p)?;
    if n == 0 {
        return Err(ScdError::InvalidGraph("exponent must be >= 1".into()));
    }
    let mut d = p.clone();
    for _ in 1..n {
        d = d.dot(p);
    }
    Ok(d)
}

fn hop_distances(adj: &Array2<i64>, from: usize) -> Vec<Option<usize>> {
    let v = adj.nrows();
    let mut dist = vec![None; v];
    dist[from] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(i) = queue.pop_front() {
        let di = dist[i].unwrap();
        for j in 0..v {
            if adj[[i, j]] == 1 && dist[j].is_none() {
                dist[j] = Some(di + 1);
                queue.push_back(j);
            }
        }
    }
    dist
}

impl SkeletonGraph {
    /// Builds a graph from undirected edges over `joints` nodes.
    pub fn from_edges(
        joints: usize,
        edges: &[(usize, usize)],
        strategy: PartitionStrategy,
        root: usize,
    ) -> Result<Self> {
        if joints == 0 {
            return Err(ScdError::InvalidGraph("graph needs at least one joint".into()));
        }
        let mut adj = Array2::<i64>::zeros((joints, joints));
        for &(a, b) in edges {
            if a >= joints || b >= joints {
                return Err(ScdError::InvalidGraph(format!("edge ({a},{b}) out of range")));
            }
            if a == b {
                return Err(ScdError::InvalidGraph(format!("self-loop at {a}")));
            }
            adj[[a, b]] = 1;
            adj[[b, a]] = 1;
        }
        Self::from_adjacency(adj, strategy, root)
    }

    pub fn from_adjacency(adj: Array2<i64>, strategy: PartitionStrategy, root: usize) -> Result<Self> {
        check_binary_symmetric(&adj)?;
        let v = adj.nrows();
        if (0..v).any(|i| adj[[i, i]] != 0) {
            return Err(ScdError::InvalidGraph("adjacency must not contain self-loops".into()));
        }
        if root >= v {
            return Err(ScdError::InvalidGraph(format!("root {root} out of range")));
        }
        let mut partition = Array2::<i8>::from_elem((v, v), -1);
        let num_subsets = match strategy {
            PartitionStrategy::Uniform => {
                for i in 0..v {
                    partition[[i, i]] = 0;
                    for j in 0..v {
                        if adj[[i, j]] == 1 {
                            partition[[i, j]] = 0;
                        }
                    }
                }
                1
            }
            PartitionStrategy::Spatial { center } => {
                if center >= v {
                    return Err(ScdError::InvalidGraph(format!("center {center} out of range")));
                }
                let hop = hop_distances(&adj, center);
                let far = usize::MAX;
                for i in 0..v {
                    partition[[i, i]] = 0;
                    let hi = hop[i].unwrap_or(far);
                    for j in 0..v {
                        if adj[[i, j]] != 1 {
                            continue;
                        }
                        let hj = hop[j].unwrap_or(far);
                        partition[[i, j]] = match hj.cmp(&hi) {
                            std::cmp::Ordering::Equal => 0,
                            std::cmp::Ordering::Less => 1,
                            std::cmp::Ordering::Greater => 2,
                        };
                    }
                }
                3
            }
        };
        Ok(SkeletonGraph {
            adjacency: adj,
            partition,
            num_subsets,
            root,
            flip_pairs: Vec::new(),
        })
    }

    /// The NTU 25-joint body with the spatial partition.
    pub fn ntu() -> Self {
        let mut g = Self::from_edges(
            NTU_JOINTS,
            &NTU_EDGES,
            PartitionStrategy::Spatial { center: NTU_CENTER },
            NTU_ROOT,
        )
        .expect("NTU topology is valid");
        g.flip_pairs = NTU_FLIP_PAIRS.to_vec();
        g
    }

    pub fn with_flip_pairs(mut self, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let v = self.num_joints();
        if pairs.iter().any(|&(a, b)| a >= v || b >= v || a == b) {
            return Err(ScdError::InvalidGraph("flip pair out of range".into()));
        }
        self.flip_pairs = pairs;
        Ok(self)
    }

    pub fn num_joints(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &Array2<i64> {
        &self.adjacency
    }

    pub fn num_subsets(&self) -> usize {
        self.num_subsets
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn flip_pairs(&self) -> &[(usize, usize)] {
        &self.flip_pairs
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.row(i).iter().filter(|&&x| x == 1).count()
    }

    /// Subset index of neighbour `j` in the kernel of joint `i`, if any.
    pub fn subset(&self, i: usize, j: usize) -> Option<usize> {
        let s = self.partition[[i, j]];
        (s >= 0).then_some(s as usize)
    }

    pub fn power(&self, n: u32) -> Result<Array2<i64>> {
        power_adjacency(&self.adjacency, n)
    }

    /// Per-subset aggregation matrices `A_k[i, j] = 1 / |B(i)|` when `j` is
    /// in subset `k` of joint `i`'s neighbourhood, so that summing over all
    /// subsets with equal weights gives the neighbourhood average.
    pub fn subset_matrices(&self) -> Vec<Array2<f64>> {
        let v = self.num_joints();
        let mut mats = vec![Array2::<f64>::zeros((v, v)); self.num_subsets];
        for i in 0..v {
            let size = (self.degree(i) + 1) as f64;
            for j in 0..v {
                if let Some(k) = self.subset(i, j) {
                    mats[k][[i, j]] = 1.0 / size;
                }
            }
        }
        mats
    }

    /// Parent of each joint in the BFS tree rooted at [`Self::root`];
    /// `None` for the root and unreachable joints.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let v = self.num_joints();
        let mut parent = vec![None; v];
        let mut seen = vec![false; v];
        seen[self.root] = true;
        let mut queue = VecDeque::from([self.root]);
        while let Some(i) = queue.pop_front() {
            for j in 0..v {
                if self.adjacency[[i, j]] == 1 && !seen[j] {
                    seen[j] = true;
                    parent[j] = Some(i);
                    queue.push_back(j);
                }
            }
        }
        parent
    }
}
