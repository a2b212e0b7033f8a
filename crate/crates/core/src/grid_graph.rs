//! Urban flow graph over an `H × W` region grid and the spectral operators
//! derived from it.
//!
//! Nodes are numbered row-major (`row * W + col`). The adjacency is binary,
//! symmetric and has no self-loops.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    Four,
    #[default]
    Eight,
}

impl std::str::FromStr for Neighborhood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four" | "4" => Ok(Self::Four),
            "eight" | "8" => Ok(Self::Eight),
            other => Err(Error::config(format!("unknown neighborhood `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UrbanGraph {
    height: usize,
    width: usize,
    /// `None` when the adjacency was loaded from a file.
    neighborhood: Option<Neighborhood>,
    adjacency: Tensor<f64>,
    row_normalized: Tensor<f64>,
}

impl UrbanGraph {
    /// Lattice graph connecting each cell to its 4 or 8 neighbors.
    pub fn grid(height: usize, width: usize, neighborhood: Neighborhood) -> Result<Self> {
        if height == 0 || width == 0 || height * width < 2 {
            return Err(Error::Graph(format!(
                "grid {height}x{width} has fewer than two regions"
            )));
        }
        let m = height * width;
        let mut adj = vec![0.0; m * m];
        let offsets: &[(isize, isize)] = match neighborhood {
            Neighborhood::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Neighborhood::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        };
        for r in 0..height {
            for c in 0..width {
                for &(dr, dc) in offsets {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    adj[(r * width + c) * m + nr as usize * width + nc as usize] = 1.0;
                }
            }
        }
        Self::assemble(height, width, Some(neighborhood), adj)
    }

    /// Wraps an explicit adjacency for non-lattice topologies.
    pub fn from_adjacency(height: usize, width: usize, adjacency: Vec<f64>) -> Result<Self> {
        let m = height * width;
        if m < 2 {
            return Err(Error::Graph("need at least two regions".into()));
        }
        if adjacency.len() != m * m {
            return Err(Error::Graph(format!(
                "adjacency has {} entries, expected {m}x{m}",
                adjacency.len()
            )));
        }
        for i in 0..m {
            if adjacency[i * m + i] != 0.0 {
                return Err(Error::Graph(format!("self-loop at node {i}")));
            }
            for j in 0..m {
                let v = adjacency[i * m + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Graph(format!(
                        "entry ({i},{j}) = {v} is not a non-negative weight"
                    )));
                }
                if (v - adjacency[j * m + i]).abs() > 1e-9 {
                    return Err(Error::Graph(format!(
                        "adjacency is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Self::assemble(height, width, None, adjacency)
    }

    /// Reads a dense `M × M` little-endian float32 matrix.
    pub fn load_adjacency(path: &Path, height: usize, width: usize) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let m = height * width;
        if bytes.len() != m * m * 4 {
            return Err(Error::load(
                path.display().to_string(),
                format!(
                    "{} bytes, expected {} for {m}x{m} float32",
                    bytes.len(),
                    m * m * 4
                ),
            ));
        }
        let adj = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::from_adjacency(height, width, adj)
    }

    fn assemble(
        height: usize,
        width: usize,
        neighborhood: Option<Neighborhood>,
        adj: Vec<f64>,
    ) -> Result<Self> {
        let m = height * width;
        let mut norm = adj.clone();
        for row in norm.chunks_mut(m) {
            let deg: f64 = row.iter().sum();
            if deg > 0.0 {
                row.iter_mut().for_each(|v| *v /= deg);
            }
        }
        Ok(Self {
            height,
            width,
            neighborhood,
            adjacency: Tensor::new(vec![m, m], adj),
            row_normalized: Tensor::new(vec![m, m], norm),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn neighborhood(&self) -> Option<Neighborhood> {
        self.neighborhood
    }

    pub fn adjacency(&self) -> &Tensor<f64> {
        &self.adjacency
    }

    pub fn row_normalized_adjacency(&self) -> &Tensor<f64> {
        &self.row_normalized
    }

    pub fn degree(&self, node: usize) -> f64 {
        let m = self.num_nodes();
        self.adjacency.data()[node * m..(node + 1) * m].iter().sum()
    }

    /// Undirected edge count (nonzero pairs above the diagonal).
    pub fn edge_count(&self) -> usize {
        let m = self.num_nodes();
        let a = self.adjacency.data();
        (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .filter(|&(i, j)| a[i * m + j] != 0.0)
            .count()
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.num_nodes();
        check_permutation(perm, m)?;
        let a = self.adjacency.data();
        let adj = (0..m * m)
            .map(|idx| a[perm[idx / m] * m + perm[idx % m]])
            .collect();
        let mut g = Self::assemble(self.height, self.width, None, adj)?;
        g.neighborhood = self.neighborhood;
        Ok(g)
    }

    /// `Δx = Σ_j A_ij (x_j − x_i)`, the (non-positive) graph Laplacian applied to a node field.
    pub fn laplacian_apply(&self, x: &[f64]) -> Vec<f64> {
        let m = self.num_nodes();
        assert_eq!(x.len(), m);
        let a = self.adjacency.data();
        (0..m)
            .map(|i| (0..m).map(|j| a[i * m + j] * (x[j] - x[i])).sum())
            .collect()
    }

    /// Dense `M × M` little-endian float32 bytes of the adjacency.
    pub fn adjacency_bytes(&self) -> Vec<u8> {
        self.adjacency
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }
}

pub(crate) fn check_permutation(perm: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    if perm.len() != m {
        return Err(Error::Graph(format!(
            "permutation length {} != {m}",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= m || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Graph("not a permutation".into()));
        }
    }
    Ok(())
}

/// How the spectral radius of the normalized Laplacian is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMax {
    /// The upper bound 2 of the normalized Laplacian spectrum.
    #[default]
    Bound,
    PowerIteration,
}

/// Rescaled Laplacian `L̃ = 2L/λ_max − I` with `L = I − D^{-1/2} A D^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphOperator {
    scaled_laplacian: Tensor<f64>,
    chebyshev_order: usize,
    lambda_max: f64,
}

impl GraphOperator {
    pub fn new(graph: &UrbanGraph, chebyshev_order: usize, lambda: LambdaMax) -> Result<Self> {
        if chebyshev_order == 0 {
            return Err(Error::config("chebyshev_order must be at least 1"));
        }
        let m = graph.num_nodes();
        let a = graph.adjacency().data();
        let mut inv_sqrt = Vec::with_capacity(m);
        for i in 0..m {
            let d = graph.degree(i);
            if d <= 0.0 {
                return Err(Error::Graph(format!("node {i} is isolated (degree 0)")));
            }
            inv_sqrt.push(1.0 / d.sqrt());
        }
        let mut lap = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let ident = if i == j { 1.0 } else { 0.0 };
                lap[i * m + j] = ident - inv_sqrt[i] * a[i * m + j] * inv_sqrt[j];
            }
        }
        let lambda_max = match lambda {
            LambdaMax::Bound => 2.0,
            LambdaMax::PowerIteration => power_iteration(&lap, m),
        };
        let scaled = (0..m * m)
            .map(|idx| {
                let ident = if idx / m == idx % m { 1.0 } else { 0.0 };
                2.0 * lap[idx] / lambda_max - ident
            })
            .collect();
        Ok(Self {
            scaled_laplacian: Tensor::new(vec![m, m], scaled),
            chebyshev_order,
            lambda_max,
        })
    }

    pub fn scaled_laplacian(&self) -> &Tensor<f64> {
        &self.scaled_laplacian
    }

    pub fn chebyshev_order(&self) -> usize {
        self.chebyshev_order
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn num_nodes(&self) -> usize {
        self.scaled_laplacian.shape()[0]
    }
}

/// Convenience wrapper matching the graph-operator construction entry point.
pub fn scaled_laplacian(graph: &UrbanGraph, chebyshev_order: usize) -> Result<GraphOperator> {
    GraphOperator::new(graph, chebyshev_order, LambdaMax::Bound)
}

fn power_iteration(mat: &[f64], m: usize) -> f64 {
    // deterministic, non-constant start so the zero mode is not the only component
    let mut v: Vec<f64> = (0..m)
        .map(|i| 1.0 + (i as f64 * 0.618_034).fract())
        .collect();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = (0..m)
            .map(|i| (0..m).map(|j| mat[i * m + j] * v[j]).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 2.0;
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        lambda = next
            .iter()
            .enumerate()
            .map(|(i, vi)| vi * (0..m).map(|j| mat[i * m + j] * next[j]).sum::<f64>())
            .sum();
        v = next;
    }
    lambda.clamp(1e-6, 2.0)
}
