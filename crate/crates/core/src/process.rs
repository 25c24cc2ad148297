//! Dense per-path grid processes.

use alloc::vec;
use alloc::vec::Vec;

use crate::measures::EmpiricalMeasure;

/// Values `paths x nodes x dim`, stored node-major so that one node of all
/// paths is contiguous (the backward sweep visits nodes in turn).
#[derive(Debug, Clone, PartialEq)]
pub struct GridProcess {
    paths: usize,
    nodes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl GridProcess {
    pub fn zeros(paths: usize, nodes: usize, dim: usize) -> Self {
        Self { paths, nodes, dim, data: vec![0.0; paths * nodes * dim] }
    }

    /// From path-major values `data[(path * nodes + node) * dim + i]`.
    pub fn from_vec(paths: usize, nodes: usize, dim: usize, data: Vec<f64>) -> Option<Self> {
        if data.len() != paths * nodes * dim {
            return None;
        }
        let mut g = Self::zeros(paths, nodes, dim);
        for p in 0..paths {
            for n in 0..nodes {
                let o = (p * nodes + n) * dim;
                g.at_mut(p, n).copy_from_slice(&data[o..o + dim]);
            }
        }
        Some(g)
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Raw storage (node-major).
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, path: usize, node: usize) -> &[f64] {
        let o = (node * self.paths + path) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn at_mut(&mut self, path: usize, node: usize) -> &mut [f64] {
        let o = (node * self.paths + path) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// All paths at one node, `paths x dim`.
    pub fn node(&self, node: usize) -> &[f64] {
        let len = self.paths * self.dim;
        &self.data[node * len..(node + 1) * len]
    }

    /// One path over all nodes, `nodes x dim`.
    pub fn path(&self, path: usize) -> Vec<f64> {
        (0..self.nodes).flat_map(|n| self.at(path, n).iter().copied()).collect()
    }

    pub fn same_shape(&self, other: &GridProcess) -> bool {
        self.paths == other.paths && self.nodes == other.nodes && self.dim == other.dim
    }

    /// `self - other`, elementwise.
    pub fn minus(&self, other: &GridProcess) -> GridProcess {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { data, ..*self }
    }

    pub fn scaled(&self, c: f64) -> GridProcess {
        Self { data: self.data.iter().map(|v| c * v).collect(), ..*self }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Arguments of a coefficient evaluation at one time point of one path.
///
/// `env` is the environment in force on the current step (for every
/// interior time of the step this is `mu_{s-}`); `masses` are the kernel
/// masses `K(t, slot)` frozen over the step; `regime` holds the state of each
/// regime channel. `y`, `z` and `u` are empty when the coefficient is used
/// without coupling. `z` is `n x k` row-major and `u` is slot-major
/// (`n` entries per slot).
#[derive(Debug, Clone, Copy)]
pub struct EvalPoint<'a> {
    pub t: f64,
    pub path: usize,
    pub step: usize,
    pub env: &'a EmpiricalMeasure,
    pub masses: &'a [f64],
    pub regime: &'a [usize],
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub u: &'a [f64],
}

impl<'a> EvalPoint<'a> {
    pub fn with_args(&self, x: &'a [f64], y: &'a [f64], z: &'a [f64], u: &'a [f64]) -> EvalPoint<'a> {
        EvalPoint { x, y, z, u, ..*self }
    }
}
