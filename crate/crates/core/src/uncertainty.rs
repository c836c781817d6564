//! Polyhedral set machinery: construction, Cartesian products, vertex
//! enumeration for small sets, support functions via LP.
//!
//! A [`Polyhedron`] is `{v : W v >= w}`. These carry the per-agent disturbance
//! sets Ξ_i and the primitive sets S_i that parameterize forecast sets.

use crate::lp::{self, Backend, LinearProgram, RowKind, SolveOpts, Status};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points closer than this in max-norm are the same vertex.
pub const DEDUP_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SetError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("lower bound exceeds upper bound at coordinate {0}")]
    BoundsReversed(usize),
    #[error("polyhedron is unbounded")]
    Unbounded,
    #[error("polyhedron is empty")]
    Empty,
    #[error("vertex enumeration exceeded cap of {0}")]
    CapExceeded(usize),
}

/// `{v : W v >= w}` in `dim` ambient dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polyhedron {
    pub w_mat: DMatrix<f64>,
    pub w_vec: DVector<f64>,
    pub dim: usize,
}

impl Polyhedron {
    pub fn new(w_mat: DMatrix<f64>, w_vec: DVector<f64>) -> Result<Self, SetError> {
        if w_mat.nrows() != w_vec.len() {
            return Err(SetError::DimensionMismatch(format!(
                "W has {} rows but w has {} entries",
                w_mat.nrows(),
                w_vec.len()
            )));
        }
        let dim = w_mat.ncols();
        Ok(Polyhedron { w_mat, w_vec, dim })
    }

    /// The box ∏ [lb_k, ub_k].
    pub fn box_set(lb: &[f64], ub: &[f64]) -> Result<Self, SetError> {
        if lb.len() != ub.len() {
            return Err(SetError::DimensionMismatch(format!(
                "lb has {} entries, ub has {}",
                lb.len(),
                ub.len()
            )));
        }
        for (k, (&l, &u)) in lb.iter().zip(ub).enumerate() {
            if l > u {
                return Err(SetError::BoundsReversed(k));
            }
        }
        let d = lb.len();
        let mut w_mat = DMatrix::zeros(2 * d, d);
        let mut w_vec = DVector::zeros(2 * d);
        for k in 0..d {
            w_mat[(2 * k, k)] = 1.0;
            w_vec[2 * k] = lb[k];
            w_mat[(2 * k + 1, k)] = -1.0;
            w_vec[2 * k + 1] = -ub[k];
        }
        Ok(Polyhedron { w_mat, w_vec, dim: d })
    }

    /// `[-r, r]^d`.
    pub fn unit_box(d: usize, r: f64) -> Self {
        Self::box_set(&vec![-r; d], &vec![r; d]).expect("symmetric box is well formed")
    }

    pub fn singleton(point: &[f64]) -> Self {
        Self::box_set(point, point).expect("degenerate box is well formed")
    }

    /// Cartesian product: block-diagonal W, concatenated w.
    pub fn product(ps: &[Polyhedron]) -> Self {
        let dim: usize = ps.iter().map(|p| p.dim).sum();
        let rows: usize = ps.iter().map(|p| p.w_mat.nrows()).sum();
        let mut w_mat = DMatrix::zeros(rows, dim);
        let mut w_vec = DVector::zeros(rows);
        let (mut r0, mut c0) = (0, 0);
        for p in ps {
            w_mat.view_mut((r0, c0), (p.w_mat.nrows(), p.dim)).copy_from(&p.w_mat);
            w_vec.rows_mut(r0, p.w_mat.nrows()).copy_from(&p.w_vec);
            r0 += p.w_mat.nrows();
            c0 += p.dim;
        }
        Polyhedron { w_mat, w_vec, dim }
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        assert_eq!(v.len(), self.dim);
        let x = DVector::from_column_slice(v);
        let slack = &self.w_mat * x - &self.w_vec;
        slack.iter().all(|&s| s >= -tol)
    }

    /// max_{v in self} h.v, solved as an LP.
    pub fn support(&self, h: &[f64]) -> Result<f64, SetError> {
        if h.len() != self.dim {
            return Err(SetError::DimensionMismatch(format!(
                "direction has {} entries, set has dimension {}",
                h.len(),
                self.dim
            )));
        }
        if self.dim == 0 {
            return Ok(0.0);
        }
        let mut prog = LinearProgram::new();
        for (k, &hk) in h.iter().enumerate() {
            prog.add_col(format!("v{k}"), -hk, f64::NEG_INFINITY, f64::INFINITY);
        }
        for i in 0..self.w_mat.nrows() {
            let coeffs: Vec<(usize, f64)> = (0..self.dim)
                .filter(|&k| self.w_mat[(i, k)] != 0.0)
                .map(|k| (k, -self.w_mat[(i, k)]))
                .collect();
            prog.add_row(RowKind::Le, coeffs, -self.w_vec[i]);
        }
        let sol = lp::solve(&prog, &SolveOpts { backend: Backend::Auto, ..Default::default() });
        match sol.status {
            Status::Optimal => Ok(-sol.objective),
            Status::Infeasible => Err(SetError::Empty),
            Status::Unbounded => Err(SetError::Unbounded),
            Status::IterLimit => Err(SetError::Unbounded),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self.support(&vec![0.0; self.dim]), Err(SetError::Empty))
    }

    pub fn is_bounded(&self) -> bool {
        for k in 0..self.dim {
            let mut h = vec![0.0; self.dim];
            h[k] = 1.0;
            if self.support(&h) == Err(SetError::Unbounded) {
                return false;
            }
            h[k] = -1.0;
            if self.support(&h) == Err(SetError::Unbounded) {
                return false;
            }
        }
        true
    }

    /// Exact extreme points by basis enumeration with feasibility filtering.
    /// Intended for small sets (oracles, extreme-point expansions).
    pub fn vertices(&self, cap: usize) -> Result<Vec<DVector<f64>>, SetError> {
        if self.dim == 0 {
            return Ok(vec![DVector::zeros(0)]);
        }
        let m = self.w_mat.nrows();
        if m < self.dim {
            return Err(SetError::Unbounded);
        }
        // Guard against combinatorial blowup before iterating.
        let mut combos: f64 = 1.0;
        for k in 0..self.dim {
            combos *= (m - k) as f64 / (k + 1) as f64;
        }
        if combos > 5e6 {
            return Err(SetError::CapExceeded(cap));
        }
        let mut out: Vec<DVector<f64>> = Vec::new();
        let mut any_feasible = false;
        for combo in itertools::Itertools::combinations(0..m, self.dim) {
            let mut a = DMatrix::zeros(self.dim, self.dim);
            let mut b = DVector::zeros(self.dim);
            for (r, &i) in combo.iter().enumerate() {
                a.row_mut(r).copy_from(&self.w_mat.row(i));
                b[r] = self.w_vec[i];
            }
            let lu = a.lu();
            let Some(v) = lu.solve(&b) else { continue };
            let slack = &self.w_mat * &v - &self.w_vec;
            if slack.iter().all(|&s| s >= -FEAS_TOL) {
                any_feasible = true;
                if !out.iter().any(|u| (u - &v).amax() <= DEDUP_TOL) {
                    out.push(v);
                    if out.len() > cap {
                        return Err(SetError::CapExceeded(cap));
                    }
                }
            }
        }
        if !any_feasible {
            return if self.is_empty() { Err(SetError::Empty) } else { Err(SetError::Unbounded) };
        }
        if !self.is_bounded() {
            return Err(SetError::Unbounded);
        }
        // Deterministic order regardless of row ordering.
        out.sort_by(|a, b| {
            for k in 0..self.dim {
                match a[k].partial_cmp(&b[k]).unwrap() {
                    std::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
            std::cmp::Ordering::Equal
        });
        Ok(out)
    }
}
