//! Dense symmetric 0/1 adjacency over grid regions.

use serde::{Deserialize, Serialize};

/// Which grid cells count as spatially adjacent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// Edge-sharing neighbours (von Neumann).
    Four,
    /// Edge- or corner-sharing neighbours (Moore).
    Eight,
}

/// Symmetric 0/1 matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    n: usize,
    a: Vec<f64>,
}

impl Adjacency {
    /// Build from a dense matrix; panics unless it is symmetric, zero on the
    /// diagonal, and 0/1-valued.
    pub fn from_dense(n: usize, a: Vec<f64>) -> Self {
        assert_eq!(a.len(), n * n);
        for i in 0..n {
            assert_eq!(a[i * n + i], 0.0, "diagonal must be zero");
            for j in 0..n {
                let v = a[i * n + j];
                assert!(v == 0.0 || v == 1.0, "entries must be 0/1");
                assert_eq!(v, a[j * n + i], "matrix must be symmetric");
            }
        }
        Adjacency { n, a }
    }

    pub fn empty(n: usize) -> Self {
        Adjacency {
            n,
            a: vec![0.0; n * n],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn dense(&self) -> &[f64] {
        &self.a
    }

    pub fn is_edge(&self, m: usize, n: usize) -> bool {
        self.a[m * self.n + n] == 1.0
    }

    pub fn degree(&self, m: usize) -> usize {
        self.a[m * self.n..(m + 1) * self.n]
            .iter()
            .filter(|&&v| v == 1.0)
            .count()
    }

    /// Undirected edges as `(m, n)` with `m < n`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for m in 0..self.n {
            for n in (m + 1)..self.n {
                if self.is_edge(m, n) {
                    out.push((m, n));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }

    /// Rebuild from an undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut a = vec![0.0; n * n];
        for &(m, k) in edges {
            assert!(m != k, "self-loops not allowed");
            a[m * n + k] = 1.0;
            a[k * n + m] = 1.0;
        }
        Adjacency { n, a }
    }
}

/// Adjacency of an `rows × cols` grid in row-major region order.
pub fn build_grid_adjacency(rows: usize, cols: usize, neighborhood: Neighborhood) -> Adjacency {
    assert!(rows >= 1 && cols >= 1);
    let n = rows * cols;
    let mut a = vec![0.0; n * n];
    let offsets: &[(i64, i64)] = match neighborhood {
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
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            let idx = (r * cols as i64 + c) as usize;
            for (dr, dc) in offsets {
                let (nr, nc) = (r + dr, c + dc);
                if nr >= 0 && nr < rows as i64 && nc >= 0 && nc < cols as i64 {
                    let nidx = (nr * cols as i64 + nc) as usize;
                    a[idx * n + nidx] = 1.0;
                }
            }
        }
    }
    Adjacency { n, a }
}
