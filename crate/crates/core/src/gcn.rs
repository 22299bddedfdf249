//! LightGCN propagation: symmetric degree-normalized neighbour aggregation,
//! no weights, no self-loops, mean-pooled over layers `0..=J`.
//!
//! The layer operator `Â` is symmetric (coefficient `1/√(deg u · deg i)` on
//! both directions of an edge, identity on isolated nodes), so the pooled map
//! `(1/(J+1)) Σ Âˡ` is self-adjoint and the backward pass reuses the forward
//! aggregation on the incoming gradients.

use crate::data::ModalGraph;
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub users: Matrix,
    pub items: Matrix,
    pub train_users: bool,
    pub train_items: bool,
}

impl EmbeddingTable {
    pub fn new(users: Matrix, items: Matrix) -> Result<Self> {
        if users.cols() != items.cols() {
            return Err(Error::Shape(format!(
                "user width {} differs from item width {}",
                users.cols(),
                items.cols()
            )));
        }
        Ok(EmbeddingTable {
            users,
            items,
            train_users: true,
            train_items: true,
        })
    }

    pub fn zeros_like(&self) -> Self {
        EmbeddingTable {
            users: Matrix::zeros(self.users.rows(), self.users.cols()),
            items: Matrix::zeros(self.items.rows(), self.items.cols()),
            train_users: self.train_users,
            train_items: self.train_items,
        }
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite()
    }
}

/// Normalized edge lists for one graph and a fixed layer count.
#[derive(Debug, Clone)]
pub struct PropagationPlan {
    layers: usize,
    user_edges: Vec<Vec<(u32, f64)>>,
    item_edges: Vec<Vec<(u32, f64)>>,
}

impl PropagationPlan {
    pub fn new(graph: &ModalGraph, layers: usize) -> Self {
        let coef = |du: usize, di: usize| 1.0 / ((du as f64) * (di as f64)).sqrt();
        let user_edges = graph
            .user_adj
            .iter()
            .enumerate()
            .map(|(u, items)| {
                items
                    .iter()
                    .map(|&i| (i, coef(graph.user_degree(u), graph.item_degree(i as usize))))
                    .collect()
            })
            .collect();
        let item_edges = graph
            .item_adj
            .iter()
            .enumerate()
            .map(|(i, users)| {
                users
                    .iter()
                    .map(|&u| (u, coef(graph.user_degree(u as usize), graph.item_degree(i))))
                    .collect()
            })
            .collect();
        PropagationPlan {
            layers,
            user_edges,
            item_edges,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn user_count(&self) -> usize {
        self.user_edges.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_edges.len()
    }

    fn check(&self, t: &EmbeddingTable) -> Result<()> {
        if t.users.rows() != self.user_count() || t.items.rows() != self.item_count() {
            return Err(Error::Shape(format!(
                "table has {}x{} rows, graph has {} users and {} items",
                t.users.rows(),
                t.items.rows(),
                self.user_count(),
                self.item_count()
            )));
        }
        if t.users.cols() != t.items.cols() {
            return Err(Error::Shape("user and item widths differ".into()));
        }
        Ok(())
    }

    fn aggregate(edges: &[Vec<(u32, f64)>], own: &Matrix, other: &Matrix) -> Matrix {
        let dim = own.cols();
        let mut out = Matrix::zeros(own.rows(), dim);
        par::for_each_row_mut(out.as_mut_slice(), dim, |r, row| {
            let nbrs = &edges[r];
            if nbrs.is_empty() {
                row.copy_from_slice(own.row(r));
            } else {
                for &(n, c) in nbrs {
                    axpy(c, other.row(n as usize), row);
                }
            }
        });
        out
    }

    fn apply(&self, input: &EmbeddingTable) -> EmbeddingTable {
        let mut users = input.users.clone();
        let mut items = input.items.clone();
        let mut acc_u = input.users.clone();
        let mut acc_i = input.items.clone();
        for _ in 0..self.layers {
            let next_u = Self::aggregate(&self.user_edges, &users, &items);
            let next_i = Self::aggregate(&self.item_edges, &items, &users);
            axpy(1.0, next_u.as_slice(), acc_u.as_mut_slice());
            axpy(1.0, next_i.as_slice(), acc_i.as_mut_slice());
            users = next_u;
            items = next_i;
        }
        if self.layers > 0 {
            let scale = 1.0 / (self.layers as f64 + 1.0);
            acc_u.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
            acc_i.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        }
        EmbeddingTable {
            users: acc_u,
            items: acc_i,
            train_users: input.train_users,
            train_items: input.train_items,
        }
    }

    /// Final pooled embeddings for every user and item.
    pub fn forward(&self, base: &EmbeddingTable) -> Result<EmbeddingTable> {
        self.check(base)?;
        Ok(self.apply(base))
    }

    /// Gradient with respect to the base table given the gradient with
    /// respect to the pooled output.
    pub fn backward(&self, grad_final: &EmbeddingTable) -> Result<EmbeddingTable> {
        self.check(grad_final)?;
        Ok(self.apply(grad_final))
    }
}

pub fn propagate(graph: &ModalGraph, base: &EmbeddingTable, layers: usize) -> Result<EmbeddingTable> {
    PropagationPlan::new(graph, layers).forward(base)
}

pub fn propagate_backward(
    graph: &ModalGraph,
    grad_final: &EmbeddingTable,
    layers: usize,
) -> Result<EmbeddingTable> {
    PropagationPlan::new(graph, layers).backward(grad_final)
}
