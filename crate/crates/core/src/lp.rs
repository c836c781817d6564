//! Linear/quadratic program solving and export.
//!
//! Two backends sit behind [`solve`]: a dense revised simplex (exact vertex
//! solutions, Bland's rule engaged after a degeneracy streak, big-M-free
//! phase 1) for desk-scale programs, and Clarabel's interior-point method for
//! the large compilations the robust reformulation produces. Both are
//! deterministic. [`solve_qp`] handles the proximal subproblems of consensus
//! ADMM (diagonal quadratic term over selected columns).

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;

const INF: f64 = f64::INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    /// coeffs . x <= rhs
    Le,
    /// coeffs . x == rhs
    Eq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Row {
    pub kind: RowKind,
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// A deterministic linear program in sparse row form.
///
/// Variables carry bounds and registry names mapping compiled columns back to
/// their origin (agent, block, index).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub obj_offset: f64,
    pub rows: Vec<Row>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub names: Vec<String>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_cols(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Adds a column and returns its index. `lower`/`upper` may be infinite.
    pub fn add_col(&mut self, name: impl Into<String>, obj: f64, lower: f64, upper: f64) -> usize {
        let j = self.objective.len();
        self.objective.push(obj);
        self.lower.push(lower);
        self.upper.push(upper);
        self.names.push(name.into());
        j
    }

    pub fn add_row(&mut self, kind: RowKind, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.rows.push(Row { kind, coeffs, rhs });
    }

    /// Largest violation of rows and bounds at `x`.
    pub fn feasibility_residual(&self, x: &[f64]) -> f64 {
        let mut res: f64 = 0.0;
        for row in &self.rows {
            let lhs: f64 = row.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
            match row.kind {
                RowKind::Le => res = res.max(lhs - row.rhs),
                RowKind::Eq => res = res.max((lhs - row.rhs).abs()),
            }
        }
        for j in 0..x.len() {
            res = res.max(self.lower[j] - x[j]);
            res = res.max(x[j] - self.upper[j]);
        }
        res.max(0.0)
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.obj_offset + self.objective.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Solution {
    pub status: Status,
    pub objective: f64,
    /// Objective of the dual program; equals `objective` at optimality.
    pub dual_objective: f64,
    pub primal: Vec<f64>,
    /// One multiplier per row: >= 0 on `Le` rows, free on `Eq` rows, with the
    /// stationarity convention c + A^T dual = 0 over active rows/bounds.
    pub dual: Vec<f64>,
    pub iterations: usize,
}

impl Solution {
    fn failed(status: Status, nrows: usize, ncols: usize, iterations: usize) -> Self {
        Solution {
            status,
            objective: f64::NAN,
            dual_objective: f64::NAN,
            primal: vec![0.0; ncols],
            dual: vec![0.0; nrows],
            iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Dense simplex for desk-scale programs, interior point beyond.
    Auto,
    Simplex,
    InteriorPoint,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOpts {
    pub tol: f64,
    pub max_iters: usize,
    pub backend: Backend,
}

impl Default for SolveOpts {
    fn default() -> Self {
        SolveOpts { tol: 1e-9, max_iters: 50_000, backend: Backend::Auto }
    }
}

/// Solves `lp`, routing to the configured backend.
pub fn solve(lp: &LinearProgram, opts: &SolveOpts) -> Solution {
    let std = Standardized::build(lp);
    let backend = match opts.backend {
        Backend::Auto => {
            if std.m <= 700 && std.n <= 6000 {
                Backend::Simplex
            } else {
                Backend::InteriorPoint
            }
        }
        b => b,
    };
    match backend {
        Backend::Simplex => simplex_solve(lp, std, opts),
        Backend::InteriorPoint => ipm_solve(lp, &[], opts),
        Backend::Auto => unreachable!(),
    }
}

/// Solves min 0.5 x'diag(q)x + c'x over the rows/bounds of `lp`.
/// `quad` is a per-column diagonal (zeros allowed). Interior-point backend.
pub fn solve_qp(lp: &LinearProgram, quad: &[f64], opts: &SolveOpts) -> Solution {
    assert_eq!(quad.len(), lp.num_cols());
    ipm_solve(lp, quad, opts)
}

// ---------------------------------------------------------------------------
// Standard form: min c.x  s.t.  A x = b, x >= 0.
// ---------------------------------------------------------------------------

enum VarMap {
    /// x_orig = lb + x[col]
    Shift { col: usize, lb: f64 },
    /// x_orig = ub - x[col]
    Mirror { col: usize, ub: f64 },
    /// x_orig = x[pos] - x[neg]
    Split { pos: usize, neg: usize },
}

struct Standardized {
    m: usize,
    n: usize,
    /// column-major sparse matrix
    cols: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    c: Vec<f64>,
    offset: f64,
    map: Vec<VarMap>,
}

impl Standardized {
    fn build(lp: &LinearProgram) -> Self {
        let nv = lp.num_cols();
        let mut cols: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut c: Vec<f64> = Vec::new();
        let mut map = Vec::with_capacity(nv);
        let mut offset = lp.obj_offset;
        // rhs adjustments accumulated per original row
        let mut rhs_adj = vec![0.0; lp.rows.len()];
        // extra bound rows: (std column, rhs) meaning x[col] <= rhs
        let mut bound_rows: Vec<(usize, f64)> = Vec::new();

        // Pre-scan column usage so shifts can adjust row rhs.
        let mut col_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nv];
        for (i, row) in lp.rows.iter().enumerate() {
            for &(j, a) in &row.coeffs {
                col_rows[j].push((i, a));
            }
        }

        for j in 0..nv {
            let (lb, ub) = (lp.lower[j], lp.upper[j]);
            if lb.is_finite() {
                let col = cols.len();
                cols.push(col_rows[j].clone());
                c.push(lp.objective[j]);
                offset += lp.objective[j] * lb;
                for &(i, a) in &col_rows[j] {
                    rhs_adj[i] += a * lb;
                }
                if ub.is_finite() {
                    bound_rows.push((col, ub - lb));
                }
                map.push(VarMap::Shift { col, lb });
            } else if ub.is_finite() {
                let col = cols.len();
                cols.push(col_rows[j].iter().map(|&(i, a)| (i, -a)).collect());
                c.push(-lp.objective[j]);
                offset += lp.objective[j] * ub;
                for &(i, a) in &col_rows[j] {
                    rhs_adj[i] += a * ub;
                }
                map.push(VarMap::Mirror { col, ub });
            } else {
                let pos = cols.len();
                cols.push(col_rows[j].clone());
                c.push(lp.objective[j]);
                let neg = cols.len();
                cols.push(col_rows[j].iter().map(|&(i, a)| (i, -a)).collect());
                c.push(-lp.objective[j]);
                map.push(VarMap::Split { pos, neg });
            }
        }

        let n_orig_rows = lp.rows.len();
        let m = n_orig_rows + bound_rows.len();
        let mut b = vec![0.0; m];
        for (i, row) in lp.rows.iter().enumerate() {
            b[i] = row.rhs - rhs_adj[i];
            if row.kind == RowKind::Le {
                cols.push(vec![(i, 1.0)]);
                c.push(0.0);
            }
        }
        for (k, &(col, rhs)) in bound_rows.iter().enumerate() {
            let i = n_orig_rows + k;
            cols[col].push((i, 1.0));
            b[i] = rhs;
            cols.push(vec![(i, 1.0)]);
            c.push(0.0);
        }
        let n = cols.len();
        Standardized { m, n, cols, b, c, offset, map }
    }

    fn recover_primal(&self, x: &[f64], nv: usize) -> Vec<f64> {
        let mut out = vec![0.0; nv];
        for (j, vm) in self.map.iter().enumerate() {
            out[j] = match *vm {
                VarMap::Shift { col, lb } => lb + x[col],
                VarMap::Mirror { col, ub } => ub - x[col],
                VarMap::Split { pos, neg } => x[pos] - x[neg],
            };
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Dense revised simplex.
// ---------------------------------------------------------------------------

const PIVOT_TOL: f64 = 1e-9;
const DEGEN_STREAK_LIMIT: usize = 40;
const REFACTOR_PERIOD: usize = 100;

struct SimplexState {
    m: usize,
    /// basis entries: < n are structural columns, >= n encode artificial for row (idx - n)
    basis: Vec<usize>,
    binv: Vec<Vec<f64>>,
    xb: Vec<f64>,
    art_sign: Vec<f64>,
    pivots_since_refactor: usize,
}

impl SimplexState {
    fn column(&self, std: &Standardized, idx: usize) -> Vec<(usize, f64)> {
        if idx < std.n {
            std.cols[idx].clone()
        } else {
            vec![(idx - std.n, self.art_sign[idx - std.n])]
        }
    }

    fn ftran(&self, col: &[(usize, f64)]) -> Vec<f64> {
        let mut w = vec![0.0; self.m];
        for k in 0..self.m {
            let mut s = 0.0;
            for &(i, a) in col {
                s += self.binv[k][i] * a;
            }
            w[k] = s;
        }
        w
    }

    /// y = Binv^T cb
    fn btran(&self, cb: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.m];
        for k in 0..self.m {
            if cb[k] != 0.0 {
                for i in 0..self.m {
                    y[i] += cb[k] * self.binv[k][i];
                }
            }
        }
        y
    }

    fn refactor(&mut self, std: &Standardized) -> bool {
        use nalgebra::DMatrix;
        let m = self.m;
        let mut bmat = DMatrix::<f64>::zeros(m, m);
        for (k, &idx) in self.basis.iter().enumerate() {
            for (i, a) in self.column(std, idx) {
                bmat[(i, k)] = a;
            }
        }
        match bmat.lu().try_inverse() {
            Some(inv) => {
                for k in 0..m {
                    for i in 0..m {
                        self.binv[k][i] = inv[(k, i)];
                    }
                }
                for k in 0..m {
                    let mut s = 0.0;
                    for i in 0..m {
                        s += self.binv[k][i] * std.b[i];
                    }
                    self.xb[k] = s;
                }
                self.pivots_since_refactor = 0;
                true
            }
            None => false,
        }
    }

    fn pivot(&mut self, r: usize, entering: usize, w: &[f64]) {
        let wr = w[r];
        let theta = self.xb[r] / wr;
        for k in 0..self.m {
            if k != r {
                self.xb[k] -= theta * w[k];
                if self.xb[k].abs() < 1e-12 {
                    self.xb[k] = 0.0;
                }
            }
        }
        self.xb[r] = theta;
        let m = self.m;
        let pivot_row: Vec<f64> = self.binv[r].iter().map(|v| v / wr).collect();
        for k in 0..m {
            if k != r {
                let f = w[k];
                if f != 0.0 {
                    for i in 0..m {
                        self.binv[k][i] -= f * pivot_row[i];
                    }
                }
            }
        }
        self.binv[r] = pivot_row;
        self.basis[r] = entering;
        self.pivots_since_refactor += 1;
    }
}

enum PhaseOutcome {
    Done,
    Unbounded,
    IterLimit,
}

/// One simplex phase: minimize `cost` over the current basis. `allow_enter`
/// filters candidate entering columns.
fn run_phase(
    state: &mut SimplexState,
    std: &Standardized,
    cost: &dyn Fn(usize) -> f64,
    allow_enter: &dyn Fn(usize) -> bool,
    tol: f64,
    iter_budget: &mut usize,
    total_iters: &mut usize,
) -> PhaseOutcome {
    let mut degen_streak = 0usize;
    let mut bland = false;
    loop {
        if *iter_budget == 0 {
            return PhaseOutcome::IterLimit;
        }
        *iter_budget -= 1;
        *total_iters += 1;
        if state.pivots_since_refactor >= REFACTOR_PERIOD {
            state.refactor(std);
        }
        let cb: Vec<f64> = state.basis.iter().map(|&idx| cost(idx)).collect();
        let y = state.btran(&cb);
        // price
        let mut entering: Option<(usize, f64)> = None;
        let mut in_basis = vec![false; std.n + state.m];
        for &idx in &state.basis {
            in_basis[idx] = true;
        }
        for j in 0..std.n {
            if in_basis[j] || !allow_enter(j) {
                continue;
            }
            let mut d = cost(j);
            for &(i, a) in &std.cols[j] {
                d -= y[i] * a;
            }
            if d < -tol {
                if bland {
                    entering = Some((j, d));
                    break;
                }
                match entering {
                    Some((_, best)) if best <= d => {}
                    _ => entering = Some((j, d)),
                }
            }
        }
        let Some((e, _)) = entering else {
            return PhaseOutcome::Done;
        };
        let w = state.ftran(&std.cols[e]);
        // ratio test; prefer kicking artificials on ties
        let mut leave: Option<(usize, f64)> = None;
        for k in 0..state.m {
            if w[k] > PIVOT_TOL {
                let ratio = (state.xb[k].max(0.0)) / w[k];
                let better = match leave {
                    None => true,
                    Some((kr, r)) => {
                        ratio < r - 1e-12
                            || (ratio < r + 1e-12
                                && ((state.basis[k] >= std.n && state.basis[kr] < std.n)
                                    || (state.basis[k] >= std.n) == (state.basis[kr] >= std.n)
                                        && state.basis[k] < state.basis[kr]))
                    }
                };
                if better {
                    leave = Some((k, ratio));
                }
            }
        }
        let Some((r, ratio)) = leave else {
            return PhaseOutcome::Unbounded;
        };
        if ratio <= 1e-12 {
            degen_streak += 1;
            if degen_streak > DEGEN_STREAK_LIMIT {
                bland = true;
            }
        } else {
            degen_streak = 0;
            bland = false;
        }
        state.pivot(r, e, &w);
    }
}

fn simplex_solve(lp: &LinearProgram, std: Standardized, opts: &SolveOpts) -> Solution {
    let m = std.m;
    let nv = lp.num_cols();
    if m == 0 {
        // Only bounds: optimum is attained at a bound or the problem is unbounded.
        let mut x = vec![0.0; std.n];
        let mut obj = std.offset;
        for j in 0..std.n {
            if std.c[j] < 0.0 {
                return Solution::failed(Status::Unbounded, lp.num_rows(), nv, 0);
            }
            x[j] = 0.0;
            obj += 0.0;
        }
        let primal = std.recover_primal(&x, nv);
        return Solution {
            status: Status::Optimal,
            objective: obj,
            dual_objective: obj,
            primal,
            dual: vec![],
            iterations: 0,
        };
    }

    let art_sign: Vec<f64> = std.b.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    let mut state = SimplexState {
        m,
        basis: (0..m).map(|i| std.n + i).collect(),
        binv: (0..m)
            .map(|k| {
                let mut row = vec![0.0; m];
                row[k] = art_sign[k];
                row
            })
            .collect(),
        xb: std.b.iter().map(|v| v.abs()).collect(),
        art_sign,
        pivots_since_refactor: 0,
    };

    let mut iters = 0usize;
    let mut budget = opts.max_iters;
    let n = std.n;
    // Phase 1: minimize the sum of artificial values.
    let phase1_cost = |idx: usize| if idx >= n { 1.0 } else { 0.0 };
    match run_phase(&mut state, &std, &phase1_cost, &|_| true, opts.tol.max(1e-10), &mut budget, &mut iters) {
        PhaseOutcome::Done => {}
        PhaseOutcome::Unbounded => unreachable!("phase 1 objective is bounded below"),
        PhaseOutcome::IterLimit => return Solution::failed(Status::IterLimit, lp.num_rows(), nv, iters),
    }
    let infeas: f64 = state
        .basis
        .iter()
        .zip(&state.xb)
        .filter(|&(&idx, _)| idx >= n)
        .map(|(_, &v)| v.max(0.0))
        .sum();
    if infeas > 1e-7 {
        return Solution::failed(Status::Infeasible, lp.num_rows(), nv, iters);
    }

    // Drive zero-level artificials out of the basis: left in, a blocked
    // direction through their row can masquerade as an unbounded ray in
    // phase 2. Rows with no structural pivot left are dependent, and their
    // artificial can never move again.
    for k in 0..m {
        if state.basis[k] < n {
            continue;
        }
        let mut in_basis = vec![false; std.n + m];
        for &idx in &state.basis {
            in_basis[idx] = true;
        }
        for j in 0..n {
            if in_basis[j] {
                continue;
            }
            let w = state.ftran(&std.cols[j]);
            if w[k].abs() > PIVOT_TOL {
                state.pivot(k, j, &w);
                break;
            }
        }
    }

    // Phase 2 over structural columns; lingering artificials stay pinned at zero.
    let c2 = std.c.clone();
    let phase2_cost = move |idx: usize| if idx >= n { 0.0 } else { c2[idx] };
    match run_phase(&mut state, &std, &phase2_cost, &|j| j < n, opts.tol, &mut budget, &mut iters) {
        PhaseOutcome::Done => {}
        PhaseOutcome::Unbounded => return Solution::failed(Status::Unbounded, lp.num_rows(), nv, iters),
        PhaseOutcome::IterLimit => return Solution::failed(Status::IterLimit, lp.num_rows(), nv, iters),
    }

    // Clean solve of the final basis for accuracy.
    state.refactor(&std);

    let mut x = vec![0.0; std.n];
    for (k, &idx) in state.basis.iter().enumerate() {
        if idx < std.n {
            x[idx] = state.xb[k].max(0.0);
        }
    }
    let cb: Vec<f64> = state.basis.iter().map(|&idx| if idx >= n { 0.0 } else { std.c[idx] }).collect();
    let y = state.btran(&cb);
    let obj = std.offset + std.c.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>();
    let dual_obj = std.offset + y.iter().zip(&std.b).map(|(yi, bi)| yi * bi).sum::<f64>();
    let dual: Vec<f64> = (0..lp.num_rows()).map(|i| -y[i]).collect();
    Solution {
        status: Status::Optimal,
        objective: obj,
        dual_objective: dual_obj,
        primal: std.recover_primal(&x, nv),
        dual,
        iterations: iters,
    }
}

// ---------------------------------------------------------------------------
// Interior-point backend (Clarabel).
// ---------------------------------------------------------------------------

fn ipm_solve(lp: &LinearProgram, quad: &[f64], opts: &SolveOpts) -> Solution {
    use clarabel::algebra::CscMatrix;
    use clarabel::solver::*;

    let n = lp.num_cols();
    // Row order: equalities, then <= rows, then bound rows.
    let mut eq_rows: Vec<usize> = Vec::new();
    let mut le_rows: Vec<usize> = Vec::new();
    for (i, row) in lp.rows.iter().enumerate() {
        match row.kind {
            RowKind::Eq => eq_rows.push(i),
            RowKind::Le => le_rows.push(i),
        }
    }
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut b: Vec<f64> = Vec::new();
    let mut row_pos = vec![usize::MAX; lp.num_rows()];
    for &i in eq_rows.iter().chain(le_rows.iter()) {
        let pos = b.len();
        row_pos[i] = pos;
        for &(j, a) in &lp.rows[i].coeffs {
            cols[j].push((pos, a));
        }
        b.push(lp.rows[i].rhs);
    }
    let mut n_bound = 0usize;
    for j in 0..n {
        if lp.upper[j].is_finite() {
            cols[j].push((b.len(), 1.0));
            b.push(lp.upper[j]);
            n_bound += 1;
        }
        if lp.lower[j].is_finite() {
            cols[j].push((b.len(), -1.0));
            b.push(-lp.lower[j]);
            n_bound += 1;
        }
    }
    let nrows = b.len();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..n {
        let mut entries = std::mem::take(&mut cols[j]);
        entries.sort_by_key(|&(i, _)| i);
        // merge duplicates defensively
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (i, a) in entries {
            if let Some(last) = merged.last_mut() {
                if last.0 == i {
                    last.1 += a;
                    continue;
                }
            }
            merged.push((i, a));
        }
        for (i, a) in merged {
            rowval.push(i);
            nzval.push(a);
        }
        colptr.push(rowval.len());
    }
    let a = CscMatrix::new(nrows, n, colptr, rowval, nzval);

    let p = if quad.iter().any(|&v| v != 0.0) {
        let mut pp = Vec::with_capacity(n + 1);
        let mut pr = Vec::new();
        let mut pv = Vec::new();
        pp.push(0);
        for j in 0..n {
            if quad[j] != 0.0 {
                pr.push(j);
                pv.push(quad[j]);
            }
            pp.push(pr.len());
        }
        CscMatrix::new(n, n, pp, pr, pv)
    } else {
        CscMatrix::zeros((n, n))
    };

    let cones = [ZeroConeT(eq_rows.len()), NonnegativeConeT(le_rows.len() + n_bound)];
    let mut settings = DefaultSettings::default();
    settings.verbose = false;
    let tight = opts.tol.clamp(1e-12, 1e-8);
    settings.tol_gap_abs = tight;
    settings.tol_gap_rel = tight;
    settings.tol_feas = tight;
    settings.tol_infeas_abs = 1e-10;
    settings.max_iter = 200;
    let mut solver = match DefaultSolver::new(&p, &lp.objective, &a, &b, &cones, settings) {
        Ok(s) => s,
        Err(_) => return Solution::failed(Status::IterLimit, lp.num_rows(), n, 0),
    };
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => Status::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Status::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Status::Unbounded,
        _ => Status::IterLimit,
    };
    if status != Status::Optimal {
        return Solution::failed(status, lp.num_rows(), n, sol.iterations as usize);
    }
    let mut dual = vec![0.0; lp.num_rows()];
    for i in 0..lp.num_rows() {
        dual[i] = sol.z[row_pos[i]];
    }
    let primal = sol.x.clone();
    let quad_part: f64 = 0.5 * quad.iter().zip(&primal).map(|(q, x)| q * x * x).sum::<f64>();
    let objective = lp.objective_at(&primal) + quad_part;
    let dual_objective =
        lp.obj_offset - b.iter().zip(&sol.z).map(|(bi, zi)| bi * zi).sum::<f64>() - quad_part;
    Solution {
        status,
        objective,
        dual_objective,
        primal,
        dual,
        iterations: sol.iterations as usize,
    }
}

// ---------------------------------------------------------------------------
// LP-format export / import.
// ---------------------------------------------------------------------------

fn sanitize(name: &str, j: usize, seen: &mut HashMap<String, usize>) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '_' })
        .collect();
    if s.is_empty() || !s.chars().next().unwrap().is_ascii_alphabetic() {
        s = format!("x{j}_{s}");
    }
    match seen.entry(s.clone()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            *e.get_mut() += 1;
            format!("{s}__{}", e.get())
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(0);
            s
        }
    }
}

fn write_terms(out: &mut String, coeffs: &[(usize, f64)], names: &[String]) {
    let mut first = true;
    for &(j, a) in coeffs {
        if a == 0.0 {
            continue;
        }
        if first {
            if a < 0.0 {
                let _ = write!(out, "- ");
            }
            first = false;
        } else if a < 0.0 {
            let _ = write!(out, " - ");
        } else {
            let _ = write!(out, " + ");
        }
        let _ = write!(out, "{:.17} {}", a.abs(), names[j]);
    }
    if first {
        let _ = write!(out, "0 {}", names.first().map(String::as_str).unwrap_or("x0_"));
    }
}

/// Serializes `lp` in the industry-standard LP interchange text format.
/// Registry names are sanitized deterministically; [`import`] reads the result
/// back for round-trip checks.
pub fn export(lp: &LinearProgram, path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, to_lp_format(lp))
}

pub fn to_lp_format(lp: &LinearProgram) -> String {
    let mut seen = HashMap::new();
    let names: Vec<String> =
        lp.names.iter().enumerate().map(|(j, n)| sanitize(n, j, &mut seen)).collect();
    let mut out = String::new();
    out.push_str("\\ generated by policynet\nMinimize\n obj: ");
    let obj_terms: Vec<(usize, f64)> =
        lp.objective.iter().enumerate().filter(|&(_, &c)| c != 0.0).map(|(j, &c)| (j, c)).collect();
    write_terms(&mut out, &obj_terms, &names);
    if lp.obj_offset != 0.0 {
        let _ = write!(
            &mut out,
            " {} {:.17}",
            if lp.obj_offset < 0.0 { "-" } else { "+" },
            lp.obj_offset.abs()
        );
    }
    out.push_str("\nSubject To\n");
    for (i, row) in lp.rows.iter().enumerate() {
        let _ = write!(&mut out, " r{i}: ");
        write_terms(&mut out, &row.coeffs, &names);
        let op = match row.kind {
            RowKind::Le => "<=",
            RowKind::Eq => "=",
        };
        let _ = writeln!(&mut out, " {op} {:.17}", row.rhs);
    }
    out.push_str("Bounds\n");
    for j in 0..lp.num_cols() {
        let (lb, ub) = (lp.lower[j], lp.upper[j]);
        if lb == -INF && ub == INF {
            let _ = writeln!(&mut out, " {} free", names[j]);
        } else if lb == -INF {
            let _ = writeln!(&mut out, " -inf <= {} <= {:.17}", names[j], ub);
        } else if ub == INF {
            let _ = writeln!(&mut out, " {:.17} <= {} <= +inf", lb, names[j]);
        } else {
            let _ = writeln!(&mut out, " {:.17} <= {} <= {:.17}", lb, names[j], ub);
        }
    }
    out.push_str("End\n");
    out
}

/// Minimal LP-format reader covering the dialect [`to_lp_format`] emits.
pub fn import(text: &str) -> Result<LinearProgram, String> {
    #[derive(PartialEq)]
    enum Section {
        Preamble,
        Objective,
        Rows,
        Bounds,
        Done,
    }
    let mut lp = LinearProgram::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut sec = Section::Preamble;
    let mut obj_buf = String::new();
    let mut row_buf: Vec<String> = Vec::new();
    let mut bound_buf: Vec<String> = Vec::new();
    for raw in text.lines() {
        let line = raw.split('\\').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lower = line.to_ascii_lowercase();
        if lower == "minimize" || lower == "min" {
            sec = Section::Objective;
            continue;
        } else if lower == "subject to" || lower == "st" || lower == "s.t." {
            sec = Section::Rows;
            continue;
        } else if lower == "bounds" {
            sec = Section::Bounds;
            continue;
        } else if lower == "end" {
            sec = Section::Done;
            continue;
        }
        match sec {
            Section::Objective => {
                obj_buf.push(' ');
                obj_buf.push_str(line);
            }
            Section::Rows => row_buf.push(line.to_string()),
            Section::Bounds => bound_buf.push(line.to_string()),
            _ => {}
        }
    }
    // objective
    let obj = obj_buf.trim();
    let obj = obj.strip_prefix("obj:").unwrap_or(obj).trim();
    let (terms, constant) = parse_terms(obj, &mut lp, &mut index)?;
    for (j, a) in terms {
        lp.objective[j] += a;
    }
    lp.obj_offset = constant;
    for line in row_buf {
        let body = match line.split_once(':') {
            Some((_, b)) => b.trim(),
            None => line.as_str(),
        };
        let (lhs, op, rhs) = if let Some(k) = body.find("<=") {
            (&body[..k], RowKind::Le, &body[k + 2..])
        } else if let Some(k) = body.find('=') {
            (&body[..k], RowKind::Eq, &body[k + 1..])
        } else {
            return Err(format!("row without relation: {line}"));
        };
        let (coeffs, cst) = parse_terms(lhs.trim(), &mut lp, &mut index)?;
        let rhs: f64 = rhs.trim().parse().map_err(|_| format!("bad rhs in: {line}"))?;
        lp.add_row(op, coeffs, rhs - cst);
    }
    for line in bound_buf {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() == 2 && toks[1].eq_ignore_ascii_case("free") {
            let j =
                *index.get(toks[0]).ok_or_else(|| format!("unknown variable {}", toks[0]))?;
            lp.lower[j] = -INF;
            lp.upper[j] = INF;
        } else if toks.len() == 5 && toks[1] == "<=" && toks[3] == "<=" {
            let j =
                *index.get(toks[2]).ok_or_else(|| format!("unknown variable {}", toks[2]))?;
            lp.lower[j] = parse_bound(toks[0])?;
            lp.upper[j] = parse_bound(toks[4])?;
        } else {
            return Err(format!("unsupported bound line: {line}"));
        }
    }
    Ok(lp)
}

fn parse_bound(tok: &str) -> Result<f64, String> {
    match tok {
        "-inf" | "-infinity" => Ok(-INF),
        "+inf" | "inf" | "+infinity" => Ok(INF),
        _ => tok.parse().map_err(|_| format!("bad bound {tok}")),
    }
}

fn parse_terms(
    s: &str,
    lp: &mut LinearProgram,
    index: &mut HashMap<String, usize>,
) -> Result<(Vec<(usize, f64)>, f64), String> {
    let mut coeffs: Vec<(usize, f64)> = Vec::new();
    let mut constant = 0.0;
    let mut sign = 1.0;
    let mut pending: Option<f64> = None;
    for tok in s.split_whitespace() {
        match tok {
            "+" => sign = 1.0,
            "-" => sign = -1.0,
            _ => {
                if let Ok(v) = tok.parse::<f64>() {
                    if let Some(p) = pending.take() {
                        constant += p;
                    }
                    pending = Some(sign * v);
                    sign = 1.0;
                } else {
                    let coef = pending.take().unwrap_or(sign);
                    sign = 1.0;
                    let j = *index.entry(tok.to_string()).or_insert_with(|| {
                        lp.add_col(tok.to_string(), 0.0, 0.0, INF)
                    });
                    coeffs.push((j, coef));
                }
            }
        }
    }
    if let Some(p) = pending {
        constant += p;
    }
    Ok((coeffs, constant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn simplex_opts() -> SolveOpts {
        SolveOpts { backend: Backend::Simplex, ..Default::default() }
    }

    #[test]
    fn degenerate_equality_point_is_not_unbounded() {
        // v pinned to -4 by two opposing rows; a zero-level artificial left
        // in the basis after phase 1 used to make this look like a ray.
        let mut lp = LinearProgram::new();
        lp.add_col("v", -1.0, f64::NEG_INFINITY, f64::INFINITY);
        lp.add_row(RowKind::Le, vec![(0, -1.0)], 4.0);
        lp.add_row(RowKind::Le, vec![(0, 1.0)], -4.0);
        let sol = solve(&lp, &simplex_opts());
        assert_eq!(sol.status, Status::Optimal);
        assert!((sol.objective - 4.0).abs() < 1e-9);
    }

    #[test]
    fn min_x_above_one() {
        let mut lp = LinearProgram::new();
        let x = lp.add_col("x", 1.0, -INF, INF);
        lp.add_row(RowKind::Le, vec![(x, -1.0)], -1.0); // x >= 1
        let sol = solve(&lp, &simplex_opts());
        assert_eq!(sol.status, Status::Optimal);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.dual_objective, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_detected() {
        let mut lp = LinearProgram::new();
        let x = lp.add_col("x", 0.0, 0.0, INF);
        lp.add_row(RowKind::Le, vec![(x, 1.0)], -1.0); // x <= -1 with x >= 0
        assert_eq!(solve(&lp, &simplex_opts()).status, Status::Infeasible);
        assert_eq!(
            solve(&lp, &SolveOpts { backend: Backend::InteriorPoint, ..Default::default() }).status,
            Status::Infeasible
        );
    }

    #[test]
    fn unbounded_detected() {
        let mut lp = LinearProgram::new();
        let x = lp.add_col("x", -1.0, 0.0, INF);
        lp.add_row(RowKind::Le, vec![(x, -1.0)], 0.0);
        assert_eq!(solve(&lp, &simplex_opts()).status, Status::Unbounded);
    }

    #[test]
    fn bounded_box_lp() {
        // min -x1 - 2 x2 s.t. x1 + x2 <= 4, 0 <= x1 <= 3, 0 <= x2 <= 3
        let mut lp = LinearProgram::new();
        let x1 = lp.add_col("x1", -1.0, 0.0, 3.0);
        let x2 = lp.add_col("x2", -2.0, 0.0, 3.0);
        lp.add_row(RowKind::Le, vec![(x1, 1.0), (x2, 1.0)], 4.0);
        for backend in [Backend::Simplex, Backend::InteriorPoint] {
            let sol = solve(&lp, &SolveOpts { backend, ..Default::default() });
            assert_eq!(sol.status, Status::Optimal);
            assert_abs_diff_eq!(sol.objective, -7.0, epsilon = 1e-7);
            assert_abs_diff_eq!(sol.primal[0], 1.0, epsilon = 1e-6);
            assert_abs_diff_eq!(sol.primal[1], 3.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn equality_and_free_vars() {
        // min |x| style: min t s.t. t >= x, t >= -x, x = -2.5
        let mut lp = LinearProgram::new();
        let x = lp.add_col("x", 0.0, -INF, INF);
        let t = lp.add_col("t", 1.0, -INF, INF);
        lp.add_row(RowKind::Eq, vec![(x, 1.0)], -2.5);
        lp.add_row(RowKind::Le, vec![(x, 1.0), (t, -1.0)], 0.0);
        lp.add_row(RowKind::Le, vec![(x, -1.0), (t, -1.0)], 0.0);
        let sol = solve(&lp, &simplex_opts());
        assert_eq!(sol.status, Status::Optimal);
        assert_abs_diff_eq!(sol.objective, 2.5, epsilon = 1e-9);
    }

    /// Brute-force oracle: enumerate all bases of the standardized program.
    fn basis_enumeration_optimum(lp: &LinearProgram) -> Option<f64> {
        use itertools::Itertools;
        use nalgebra::{DMatrix, DVector};
        let std = Standardized::build(lp);
        let m = std.m;
        let mut best: Option<f64> = None;
        for combo in (0..std.n).combinations(m) {
            let mut bmat = DMatrix::<f64>::zeros(m, m);
            for (k, &j) in combo.iter().enumerate() {
                for &(i, a) in &std.cols[j] {
                    bmat[(i, k)] = a;
                }
            }
            let Some(inv) = bmat.lu().try_inverse() else { continue };
            let xb = &inv * DVector::from_column_slice(&std.b);
            if xb.iter().all(|&v| v >= -1e-9) {
                let obj: f64 =
                    std.offset + combo.iter().enumerate().map(|(k, &j)| std.c[j] * xb[k]).sum::<f64>();
                best = Some(best.map_or(obj, |b: f64| b.min(obj)));
            }
        }
        best
    }

    #[test]
    fn random_lps_match_basis_enumeration() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..30 {
            let n = rng.gen_range(2..5usize);
            let m = rng.gen_range(1..4usize);
            let mut lp = LinearProgram::new();
            for j in 0..n {
                lp.add_col(format!("x{j}"), rng.gen_range(-2.0..2.0), 0.0, 4.0);
            }
            for _ in 0..m {
                let coeffs: Vec<(usize, f64)> =
                    (0..n).map(|j| (j, rng.gen_range(-1.0..1.0))).collect();
                lp.add_row(RowKind::Le, coeffs, rng.gen_range(0.5..3.0));
            }
            let sol = solve(&lp, &simplex_opts());
            assert_eq!(sol.status, Status::Optimal, "trial {trial}");
            let oracle = basis_enumeration_optimum(&lp).expect("oracle found no feasible basis");
            assert_abs_diff_eq!(sol.objective, oracle, epsilon = 1e-7);
            assert_abs_diff_eq!(sol.dual_objective, sol.objective, epsilon = 1e-6);
            assert!(lp.feasibility_residual(&sol.primal) <= 1e-7, "trial {trial}");
        }
    }

    #[test]
    fn backends_agree() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = rng.gen_range(3..8usize);
            let mut lp = LinearProgram::new();
            for j in 0..n {
                lp.add_col(format!("x{j}"), rng.gen_range(-1.0..1.0), -1.0, 3.0);
            }
            for _ in 0..n {
                let coeffs: Vec<(usize, f64)> =
                    (0..n).map(|j| (j, rng.gen_range(-1.0..1.0))).collect();
                lp.add_row(RowKind::Le, coeffs, rng.gen_range(1.0..3.0));
            }
            let a = solve(&lp, &simplex_opts());
            let b = solve(&lp, &SolveOpts { backend: Backend::InteriorPoint, ..Default::default() });
            assert_eq!(a.status, Status::Optimal);
            assert_eq!(b.status, Status::Optimal);
            assert_abs_diff_eq!(a.objective, b.objective, epsilon = 1e-6);
        }
    }

    #[test]
    fn qp_prox_of_point() {
        // min 0.5||x - p||^2 with x free: optimum at p.
        let mut lp = LinearProgram::new();
        let x1 = lp.add_col("x1", -1.5, -INF, INF); // linear term -p
        let x2 = lp.add_col("x2", 2.0, -INF, INF);
        let sol = solve_qp(&lp, &[1.0, 1.0], &SolveOpts::default());
        assert_eq!(sol.status, Status::Optimal);
        assert_abs_diff_eq!(sol.primal[0], 1.5, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.primal[1], -2.0, epsilon = 1e-7);
        let _ = (x1, x2);
    }

    #[test]
    fn qp_matches_lp_on_linear_instances() {
        let mut lp = LinearProgram::new();
        let x1 = lp.add_col("x1", 1.0, 0.0, INF);
        let x2 = lp.add_col("x2", 2.0, 0.0, INF);
        lp.add_row(RowKind::Le, vec![(x1, -1.0), (x2, -1.0)], -2.0); // x1 + x2 >= 2
        let qp = solve_qp(&lp, &[0.0, 0.0], &SolveOpts::default());
        let ls = solve(&lp, &simplex_opts());
        assert_abs_diff_eq!(qp.objective, ls.objective, epsilon = 1e-7);
    }

    #[test]
    fn export_import_round_trip() {
        let mut lp = LinearProgram::new();
        let x = lp.add_col("ag0.pol[0]", 2.0, -INF, INF);
        let y = lp.add_col("ag1.y[0]", -1.0, 0.0, 5.0);
        lp.obj_offset = 3.0;
        lp.add_row(RowKind::Le, vec![(x, 1.0), (y, -2.0)], 1.5);
        lp.add_row(RowKind::Eq, vec![(x, 1.0), (y, 1.0)], 2.0);
        let text = to_lp_format(&lp);
        let lp2 = import(&text).unwrap();
        let a = solve(&lp, &simplex_opts());
        let b = solve(&lp2, &simplex_opts());
        assert_eq!(a.status, Status::Optimal);
        assert_abs_diff_eq!(a.objective, b.objective, epsilon = 1e-9);
    }

    #[test]
    fn export_is_deterministic() {
        let build = || {
            let mut lp = LinearProgram::new();
            let x = lp.add_col("x", 1.0, 0.0, INF);
            lp.add_row(RowKind::Le, vec![(x, -1.0)], -1.0);
            lp
        };
        assert_eq!(to_lp_format(&build()), to_lp_format(&build()));
    }

    #[test]
    fn solutions_bitwise_deterministic() {
        let mut lp = LinearProgram::new();
        for j in 0..6 {
            lp.add_col(format!("x{j}"), (j as f64) - 2.5, -1.0, 2.0);
        }
        lp.add_row(RowKind::Le, (0..6).map(|j| (j, 1.0)).collect(), 3.0);
        let a = solve(&lp, &simplex_opts());
        let b = solve(&lp, &simplex_opts());
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        for (p, q) in a.primal.iter().zip(&b.primal) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }
}
