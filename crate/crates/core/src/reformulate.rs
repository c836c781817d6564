//! Compilation of the four design problems into deterministic LPs.
//!
//! The pipeline is: roll the network dynamics out symbolically into
//! [`AffineExpr`]s that are affine in the decision blocks and in the
//! uncertainty factors (disturbances ξ and forecast primitives s), linearize
//! the norm objectives through epigraph auxiliaries, and turn every robust
//! inequality into deterministic rows — either by dualizing over the factor
//! polyhedra or by expanding at their vertices. Local modes robustify each
//! agent only over its own (Ξ_i, S_{N_i}) product; the monolithic Ξ_M never
//! appears, which is what keeps the compiled problems loosely coupled.
//!
//! Bilinear terms are restricted by construction to (decision block) ×
//! (uncertainty factor); there is no API for multiplying two decision blocks,
//! so products like policy-coefficient × contract-parameter cannot be formed.
//! The decision-dependent forecast sets are handled by [`bcd_flexible`],
//! which alternates between the fixed-Y LP and a vertex-expanded LP in Y.

use crate::lp::{self, LinearProgram, RowKind, Solution, SolveOpts, Status};
use crate::model::{self, Arc, Committed, DesignConfig, Mode, NetworkSpec};
use crate::policy::{self, AffinePolicy, ForecastSetParam, InfoSource, SourceKind};
use crate::uncertainty::{Polyhedron, SetError};
use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use std::collections::{BTreeMap, BTreeSet};

/// One uncertainty factor of the compiled problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Unc {
    /// Agent's stage disturbance ξ_{agent, t} (0-based stage).
    Xi { agent: usize, t: usize },
    /// Forecast primitive of an arc's contract. Rectangular contracts carry
    /// one unit-box factor per committed index; flexible contracts use a
    /// single static factor at `tau = 0`.
    S { arc: usize, tau: usize },
}

/// One decision block of the compiled problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dec {
    /// Policy coefficient of agent `agent`, stage `t`, on `source` index `tau`.
    PolCoef { agent: usize, t: usize, source: usize, tau: usize },
    /// Policy constant term at stage `t`.
    PolConst { agent: usize, t: usize },
    /// Per-agent worst-case objective epigraph ℓ_i (the only costed columns).
    Ell { agent: usize },
    /// Adaptive epigraph auxiliary: constant part.
    Aux { agent: usize, id: usize },
    /// Adaptive epigraph auxiliary: coefficient on factor `unc`.
    AuxCoef { agent: usize, id: usize, unc: Unc },
    /// Rectangle half-widths (y ≥ 0) at committed index `tau`.
    YRect { arc: usize, tau: usize },
    /// Contract center z at committed index `tau`.
    ZContract { arc: usize, tau: usize },
    /// Flexible-membership certificate s̃: constant part.
    CertConst { arc: usize },
    /// Flexible-membership certificate s̃: coefficient on factor `unc`.
    CertCoef { arc: usize, unc: Unc },
    /// Free contract matrix Y (only present in the BCD Y-step).
    YFlex { arc: usize },
}

fn unc_tag(u: &Unc) -> String {
    match u {
        Unc::Xi { agent, t } => format!("xi{agent}t{t}"),
        Unc::S { arc, tau } => format!("s{arc}t{tau}"),
    }
}

fn dec_name(d: &Dec) -> String {
    match d {
        Dec::PolCoef { agent, t, source, tau } => format!("ag{agent}_K_t{t}_s{source}_i{tau}"),
        Dec::PolConst { agent, t } => format!("ag{agent}_k_t{t}"),
        Dec::Ell { agent } => format!("ag{agent}_ell"),
        Dec::Aux { agent, id } => format!("ag{agent}_w{id}"),
        Dec::AuxCoef { agent, id, unc } => format!("ag{agent}_w{id}_{}", unc_tag(unc)),
        Dec::YRect { arc, tau } => format!("arc{arc}_y_t{tau}"),
        Dec::ZContract { arc, tau } => format!("arc{arc}_z_t{tau}"),
        Dec::CertConst { arc } => format!("arc{arc}_cert"),
        Dec::CertCoef { arc, unc } => format!("arc{arc}_cert_{}", unc_tag(unc)),
        Dec::YFlex { arc } => format!("arc{arc}_Y"),
    }
}

/// A bilinear (decision × uncertainty) entry.
#[derive(Debug, Clone)]
pub enum Bilin {
    /// Contributes `left · X · right · u` where `X` is the decision block
    /// (shape `left.ncols() × right.nrows()`) and `u` the factor vector.
    Full { left: DMatrix<f64>, right: DMatrix<f64> },
    /// Contributes `m · diag(x) · u` for a vector-shaped decision `x` and a
    /// factor `u` of the same dimension (rectangular contracts y ∘ s).
    Diag { m: DMatrix<f64> },
}

/// A vector expression affine in the decision blocks and affine in the
/// uncertainty factors, with bilinear decision × uncertainty cross terms.
///
/// Linear decision coefficients act on the column-major flattening of the
/// block; `shapes` records each referenced block's (rows, cols).
#[derive(Debug, Clone)]
pub struct AffineExpr {
    pub dim: usize,
    pub cst: DVector<f64>,
    pub dec: BTreeMap<Dec, DMatrix<f64>>,
    pub unc: BTreeMap<Unc, DMatrix<f64>>,
    pub bil: Vec<(Dec, Unc, Bilin)>,
    pub shapes: BTreeMap<Dec, (usize, usize)>,
}

impl AffineExpr {
    pub fn zeros(dim: usize) -> Self {
        AffineExpr {
            dim,
            cst: DVector::zeros(dim),
            dec: BTreeMap::new(),
            unc: BTreeMap::new(),
            bil: Vec::new(),
            shapes: BTreeMap::new(),
        }
    }

    pub fn constant(v: DVector<f64>) -> Self {
        let mut e = AffineExpr::zeros(v.len());
        e.cst = v;
        e
    }

    fn note_shape(&mut self, dec: Dec, shape: (usize, usize)) {
        let prev = self.shapes.insert(dec, shape);
        if let Some(p) = prev {
            assert_eq!(p, shape, "inconsistent shape for decision block {dec:?}");
        }
    }

    /// Add `coef · vec(X)` where `X` is the block `dec` of shape `shape`.
    pub fn push_dec(&mut self, dec: Dec, coef: DMatrix<f64>, shape: (usize, usize)) {
        assert_eq!(coef.nrows(), self.dim);
        assert_eq!(coef.ncols(), shape.0 * shape.1);
        self.note_shape(dec, shape);
        match self.dec.get_mut(&dec) {
            Some(c) => *c += coef,
            None => {
                self.dec.insert(dec, coef);
            }
        }
    }

    /// Add `coef · u` for the factor `unc`.
    pub fn push_unc(&mut self, unc: Unc, coef: DMatrix<f64>) {
        assert_eq!(coef.nrows(), self.dim);
        match self.unc.get_mut(&unc) {
            Some(c) => *c += coef,
            None => {
                self.unc.insert(unc, coef);
            }
        }
    }

    pub fn push_bil(&mut self, dec: Dec, unc: Unc, b: Bilin) {
        let shape = match &b {
            Bilin::Full { left, right } => {
                assert_eq!(left.nrows(), self.dim);
                (left.ncols(), right.nrows())
            }
            Bilin::Diag { m } => {
                assert_eq!(m.nrows(), self.dim);
                (m.ncols(), 1)
            }
        };
        self.note_shape(dec, shape);
        self.bil.push((dec, unc, b));
    }

    /// In-place left multiplication by `m`; the result has `m.nrows()` rows.
    pub fn premul(&mut self, m: &DMatrix<f64>) {
        assert_eq!(m.ncols(), self.dim);
        self.dim = m.nrows();
        self.cst = m * &self.cst;
        for c in self.dec.values_mut() {
            *c = m * &*c;
        }
        for c in self.unc.values_mut() {
            *c = m * &*c;
        }
        for (_, _, b) in self.bil.iter_mut() {
            match b {
                Bilin::Full { left, .. } => *left = m * &*left,
                Bilin::Diag { m: d } => *d = m * &*d,
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.cst *= s;
        for c in self.dec.values_mut() {
            *c *= s;
        }
        for c in self.unc.values_mut() {
            *c *= s;
        }
        for (_, _, b) in self.bil.iter_mut() {
            match b {
                Bilin::Full { left, .. } => *left *= s,
                Bilin::Diag { m } => *m *= s,
            }
        }
    }

    /// self += s · other.
    pub fn axpy(&mut self, s: f64, other: &AffineExpr) {
        assert_eq!(self.dim, other.dim, "dimension mismatch in expression sum");
        self.cst += &other.cst * s;
        for (dec, coef) in &other.dec {
            let shape = other.shapes[dec];
            self.push_dec(*dec, coef * s, shape);
        }
        for (unc, coef) in &other.unc {
            self.push_unc(*unc, coef * s);
        }
        for (dec, unc, b) in &other.bil {
            let mut b = b.clone();
            match &mut b {
                Bilin::Full { left, .. } => *left *= s,
                Bilin::Diag { m } => *m *= s,
            }
            self.push_bil(*dec, *unc, b);
        }
    }

    pub fn vstack(parts: &[AffineExpr]) -> AffineExpr {
        let total = parts.iter().map(|p| p.dim).sum();
        let mut out = AffineExpr::zeros(total);
        let mut off = 0;
        for p in parts {
            out.cst.rows_mut(off, p.dim).copy_from(&p.cst);
            for (dec, coef) in &p.dec {
                let shape = p.shapes[dec];
                let mut pad = DMatrix::zeros(total, coef.ncols());
                pad.rows_mut(off, p.dim).copy_from(coef);
                out.push_dec(*dec, pad, shape);
            }
            for (unc, coef) in &p.unc {
                let mut pad = DMatrix::zeros(total, coef.ncols());
                pad.rows_mut(off, p.dim).copy_from(coef);
                out.push_unc(*unc, pad);
            }
            for (dec, unc, b) in &p.bil {
                let b = match b {
                    Bilin::Full { left, right } => {
                        let mut pad = DMatrix::zeros(total, left.ncols());
                        pad.rows_mut(off, p.dim).copy_from(left);
                        Bilin::Full { left: pad, right: right.clone() }
                    }
                    Bilin::Diag { m } => {
                        let mut pad = DMatrix::zeros(total, m.ncols());
                        pad.rows_mut(off, p.dim).copy_from(m);
                        Bilin::Diag { m: pad }
                    }
                };
                out.push_bil(*dec, *unc, b);
            }
            off += p.dim;
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> AffineExpr {
        let sel = DMatrix::from_fn(rows.len(), self.dim, |r, c| {
            if rows[r] == c {
                1.0
            } else {
                0.0
            }
        });
        let mut e = self.clone();
        e.premul(&sel);
        e
    }

    /// All uncertainty factors the expression touches.
    pub fn factors(&self) -> BTreeSet<Unc> {
        let mut s: BTreeSet<Unc> = self.unc.keys().copied().collect();
        s.extend(self.bil.iter().map(|(_, u, _)| *u));
        s
    }

    /// Numeric value at the given decision blocks (missing → zero) and factor
    /// realizations (missing → zero).
    pub fn eval(
        &self,
        dec_vals: &BTreeMap<Dec, DMatrix<f64>>,
        unc_vals: &BTreeMap<Unc, DVector<f64>>,
    ) -> DVector<f64> {
        let mut v = self.cst.clone();
        for (dec, coef) in &self.dec {
            if let Some(x) = dec_vals.get(dec) {
                assert_eq!(coef.ncols(), x.len(), "decision block {dec:?} has wrong shape");
                for (c, xv) in x.as_slice().iter().enumerate() {
                    if *xv != 0.0 {
                        v += *xv * coef.column(c);
                    }
                }
            }
        }
        for (unc, coef) in &self.unc {
            if let Some(u) = unc_vals.get(unc) {
                v += coef * u;
            }
        }
        for (dec, unc, b) in &self.bil {
            let (Some(x), Some(u)) = (dec_vals.get(dec), unc_vals.get(unc)) else {
                continue;
            };
            match b {
                Bilin::Full { left, right } => v += left * x * (right * u),
                Bilin::Diag { m } => {
                    let xu = DVector::from_fn(u.len(), |j, _| x[(j, 0)] * u[j]);
                    v += m * xu;
                }
            }
        }
        v
    }

    /// ∂(expr)/∂u for factor `unc` (dimension `d`) at fixed decision values.
    pub fn unc_jacobian(
        &self,
        unc: Unc,
        d: usize,
        dec_vals: &BTreeMap<Dec, DMatrix<f64>>,
    ) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.dim, d);
        if let Some(coef) = self.unc.get(&unc) {
            jac += coef;
        }
        for (dec, u, b) in &self.bil {
            if *u != unc {
                continue;
            }
            let Some(x) = dec_vals.get(dec) else { continue };
            match b {
                Bilin::Full { left, right } => jac += left * x * right,
                Bilin::Diag { m } => {
                    for j in 0..d {
                        for r in 0..self.dim {
                            jac[(r, j)] += m[(r, j)] * x[(j, 0)];
                        }
                    }
                }
            }
        }
        jac
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("agent {agent}: {msg}")]
    Agent { agent: usize, msg: String },
    #[error(transparent)]
    Set(#[from] SetError),
    #[error("{phase} solve failed with status {status:?}")]
    Solve { phase: &'static str, status: Status },
}

#[derive(Debug, Clone, Copy)]
struct BlockLoc {
    start: usize,
    rows: usize,
    cols: usize,
}

struct Fac {
    cst: DVector<f64>,
    /// (column, factor coordinate) → weight: decision-affine part of the
    /// factor coefficient.
    dec: BTreeMap<(usize, usize), f64>,
}

struct RowData {
    cst: f64,
    dec: BTreeMap<usize, f64>,
    fac: BTreeMap<Unc, Fac>,
}

/// Emits deterministic LP rows for affine expressions, robust inequalities,
/// and identity (coefficient-matching) equalities.
pub struct Compiler {
    pub lp: LinearProgram,
    blocks: BTreeMap<Dec, BlockLoc>,
    unc_info: BTreeMap<Unc, Polyhedron>,
    vert_cache: BTreeMap<Unc, Vec<DVector<f64>>>,
    /// Decision blocks folded to constants (BCD steps, oracles).
    pub fix: BTreeMap<Dec, DMatrix<f64>>,
    /// Factors handled by vertex expansion instead of dualization.
    pub expand: BTreeSet<Unc>,
    vertex_cap: usize,
    dual_count: usize,
}

impl Compiler {
    pub fn new(vertex_cap: usize) -> Self {
        Compiler {
            lp: LinearProgram::new(),
            blocks: BTreeMap::new(),
            unc_info: BTreeMap::new(),
            vert_cache: BTreeMap::new(),
            fix: BTreeMap::new(),
            expand: BTreeSet::new(),
            vertex_cap,
            dual_count: 0,
        }
    }

    /// Register a factor's polyhedron; must be nonempty and bounded.
    pub fn register_unc(&mut self, unc: Unc, poly: Polyhedron) -> Result<(), BuildError> {
        if poly.dim > 0 {
            if poly.is_empty() {
                return Err(SetError::Empty.into());
            }
            if !poly.is_bounded() {
                return Err(SetError::Unbounded.into());
            }
        }
        self.unc_info.insert(unc, poly);
        Ok(())
    }

    pub fn unc_dim(&self, unc: &Unc) -> usize {
        self.unc_info[unc].dim
    }

    fn vertices(&mut self, unc: &Unc) -> Result<Vec<DVector<f64>>, BuildError> {
        if let Some(v) = self.vert_cache.get(unc) {
            return Ok(v.clone());
        }
        let v = self.unc_info[unc].vertices(self.vertex_cap)?;
        self.vert_cache.insert(*unc, v.clone());
        Ok(v)
    }

    fn ensure_block(&mut self, dec: Dec, rows: usize, cols: usize) -> usize {
        if let Some(b) = self.blocks.get(&dec) {
            assert_eq!((b.rows, b.cols), (rows, cols), "block {dec:?} reused with new shape");
            return b.start;
        }
        let (obj, lb) = match dec {
            Dec::Ell { .. } => (1.0, f64::NEG_INFINITY),
            Dec::YRect { .. } => (0.0, 0.0),
            _ => (0.0, f64::NEG_INFINITY),
        };
        let base = dec_name(&dec);
        let mut start = 0;
        for k in 0..rows * cols {
            let col = self.lp.add_col(format!("{base}_{k}"), obj, lb, f64::INFINITY);
            if k == 0 {
                start = col;
            }
        }
        if rows * cols == 0 {
            start = self.lp.num_cols();
        }
        self.blocks.insert(dec, BlockLoc { start, rows, cols });
        start
    }

    /// Fold fixed decision blocks into constants / factor coefficients.
    fn resolve(&self, e: &AffineExpr) -> AffineExpr {
        let mut out = AffineExpr::zeros(e.dim);
        out.cst = e.cst.clone();
        for (dec, coef) in &e.dec {
            match self.fix.get(dec) {
                Some(x) => {
                    for (c, xv) in x.as_slice().iter().enumerate() {
                        if *xv != 0.0 {
                            out.cst += *xv * coef.column(c);
                        }
                    }
                }
                None => out.push_dec(*dec, coef.clone(), e.shapes[dec]),
            }
        }
        for (unc, coef) in &e.unc {
            out.push_unc(*unc, coef.clone());
        }
        for (dec, unc, b) in &e.bil {
            match self.fix.get(dec) {
                Some(x) => {
                    let folded = match b {
                        Bilin::Full { left, right } => left * x * right,
                        Bilin::Diag { m } => {
                            let mut f = m.clone();
                            for j in 0..f.ncols() {
                                let s = x[(j, 0)];
                                f.column_mut(j).scale_mut(s);
                            }
                            f
                        }
                    };
                    out.push_unc(*unc, folded);
                }
                None => out.push_bil(*dec, *unc, b.clone()),
            }
        }
        out
    }

    fn gather_row(&mut self, e: &AffineExpr, r: usize) -> RowData {
        let mut rd = RowData { cst: e.cst[r], dec: BTreeMap::new(), fac: BTreeMap::new() };
        for (dec, coef) in &e.dec {
            let (p, q) = e.shapes[dec];
            let start = self.ensure_block(*dec, p, q);
            for c in 0..coef.ncols() {
                let v = coef[(r, c)];
                if v != 0.0 {
                    *rd.dec.entry(start + c).or_insert(0.0) += v;
                }
            }
        }
        for (unc, coef) in &e.unc {
            let d = self.unc_dim(unc);
            let fac = rd
                .fac
                .entry(*unc)
                .or_insert_with(|| Fac { cst: DVector::zeros(d), dec: BTreeMap::new() });
            for j in 0..d {
                fac.cst[j] += coef[(r, j)];
            }
        }
        for (dec, unc, b) in &e.bil {
            let d = self.unc_dim(unc);
            match b {
                Bilin::Full { left, right } => {
                    let p = left.ncols();
                    let q = right.nrows();
                    let start = self.ensure_block(*dec, p, q);
                    let fac = rd
                        .fac
                        .entry(*unc)
                        .or_insert_with(|| Fac { cst: DVector::zeros(d), dec: BTreeMap::new() });
                    for a in 0..p {
                        let la = left[(r, a)];
                        if la == 0.0 {
                            continue;
                        }
                        for b_ in 0..q {
                            for j in 0..d {
                                let w = la * right[(b_, j)];
                                if w != 0.0 {
                                    *fac.dec.entry((start + b_ * p + a, j)).or_insert(0.0) += w;
                                }
                            }
                        }
                    }
                }
                Bilin::Diag { m } => {
                    let start = self.ensure_block(*dec, d, 1);
                    let fac = rd
                        .fac
                        .entry(*unc)
                        .or_insert_with(|| Fac { cst: DVector::zeros(d), dec: BTreeMap::new() });
                    for j in 0..d {
                        let w = m[(r, j)];
                        if w != 0.0 {
                            *fac.dec.entry((start + j, j)).or_insert(0.0) += w;
                        }
                    }
                }
            }
        }
        rd.fac.retain(|_, f| !f.dec.is_empty() || f.cst.iter().any(|v| *v != 0.0));
        rd
    }

    /// Emit `expr ≤ 0` for every realization of its uncertainty factors.
    pub fn emit_robust_le(&mut self, e: &AffineExpr) -> Result<(), BuildError> {
        let e = self.resolve(e);
        for r in 0..e.dim {
            let rd = self.gather_row(&e, r);
            self.emit_row_le(rd)?;
        }
        Ok(())
    }

    fn emit_row_le(&mut self, rd: RowData) -> Result<(), BuildError> {
        let mut expand: Vec<(Unc, Fac)> = Vec::new();
        let mut dualize: Vec<(Unc, Fac)> = Vec::new();
        for (unc, fac) in rd.fac {
            if self.expand.contains(&unc) {
                expand.push((unc, fac));
            } else {
                dualize.push((unc, fac));
            }
        }
        if expand.is_empty() {
            return self.emit_dualized(rd.cst, rd.dec, &dualize);
        }
        let mut vert_lists = Vec::with_capacity(expand.len());
        for (unc, _) in &expand {
            vert_lists.push(self.vertices(unc)?);
        }
        for combo in vert_lists.iter().map(|vs| vs.iter()).multi_cartesian_product() {
            let mut cst = rd.cst;
            let mut dec = rd.dec.clone();
            for (k, (_, fac)) in expand.iter().enumerate() {
                let v = combo[k];
                cst += fac.cst.dot(v);
                for ((col, j), w) in &fac.dec {
                    *dec.entry(*col).or_insert(0.0) += w * v[*j];
                }
            }
            self.emit_dualized(cst, dec, &dualize)?;
        }
        Ok(())
    }

    /// One worst-case row: cst + decᵀθ + Σ_f c_f(θ)ᵀ u_f ≤ 0 over u_f ∈ P_f,
    /// via one multiplier vector λ_f ≥ 0 per factor with Wᵀλ_f = −c_f(θ).
    fn emit_dualized(
        &mut self,
        cst: f64,
        dec: BTreeMap<usize, f64>,
        facs: &[(Unc, Fac)],
    ) -> Result<(), BuildError> {
        let mut coeffs: Vec<(usize, f64)> = dec.into_iter().collect();
        for (unc, fac) in facs {
            let poly = self.unc_info[unc].clone();
            let m = poly.w_mat.nrows();
            let tag = self.dual_count;
            self.dual_count += 1;
            let mut lam0 = self.lp.num_cols();
            for l in 0..m {
                let col = self.lp.add_col(format!("dual{tag}_{l}"), 0.0, 0.0, f64::INFINITY);
                if l == 0 {
                    lam0 = col;
                }
            }
            for j in 0..poly.dim {
                let mut row: Vec<(usize, f64)> = Vec::new();
                for l in 0..m {
                    let w = poly.w_mat[(l, j)];
                    if w != 0.0 {
                        row.push((lam0 + l, w));
                    }
                }
                for ((col, jj), w) in &fac.dec {
                    if *jj == j {
                        row.push((*col, *w));
                    }
                }
                self.lp.add_row(RowKind::Eq, row, -fac.cst[j]);
            }
            for l in 0..m {
                let w = poly.w_vec[l];
                if w != 0.0 {
                    coeffs.push((lam0 + l, -w));
                }
            }
        }
        self.lp.add_row(RowKind::Le, coeffs, -cst);
        Ok(())
    }

    /// Emit `expr ≡ 0` identically in the uncertainty: the decision part and
    /// every factor coefficient are matched to zero (no multipliers).
    pub fn emit_eq(&mut self, e: &AffineExpr) {
        let e = self.resolve(e);
        for r in 0..e.dim {
            let rd = self.gather_row(&e, r);
            let coeffs: Vec<(usize, f64)> = rd.dec.into_iter().collect();
            if !coeffs.is_empty() || rd.cst.abs() > 1e-12 {
                self.lp.add_row(RowKind::Eq, coeffs, -rd.cst);
            }
            for (unc, fac) in rd.fac {
                let d = self.unc_dim(&unc);
                for j in 0..d {
                    let row: Vec<(usize, f64)> = fac
                        .dec
                        .iter()
                        .filter(|((_, jj), _)| *jj == j)
                        .map(|((col, _), w)| (*col, *w))
                        .collect();
                    let rhs = -fac.cst[j];
                    if row.is_empty() && rhs.abs() < 1e-12 {
                        continue;
                    }
                    self.lp.add_row(RowKind::Eq, row, rhs);
                }
            }
        }
    }
}

/// Fixed forecast parameters of one flexible contract.
#[derive(Debug, Clone)]
pub struct FlexArc {
    /// Y: (committed dim · horizon) × dim(S).
    pub y_mat: DMatrix<f64>,
    pub s_set: Polyhedron,
}

/// Knobs of [`build`]; the defaults compile the plain design problem.
#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Per-arc flexible contract parameters (required in LocalFlexible mode).
    pub flex: BTreeMap<usize, FlexArc>,
    /// Optional orthogonal rotation applied per committed index before the
    /// rectangle membership (rotated-rectangle forecast sets).
    pub rect_rotation: BTreeMap<usize, DMatrix<f64>>,
    /// Decision blocks pinned to constants.
    pub fix_dec: BTreeMap<Dec, DMatrix<f64>>,
    /// Treat Y of every flexible contract as a decision block (BCD Y-step);
    /// requires the membership certificates in `fix_dec`.
    pub flex_y_decision: bool,
    /// Vertex-expand every factor instead of dualizing (exactness oracle).
    pub expand_all: bool,
    /// Vertex-expand only the forecast primitives S.
    pub expand_s: bool,
    pub vertex_cap: usize,
    /// Restrict row emission to these agents (consensus subproblems); columns
    /// of shared contract blocks are still allocated on use.
    pub agents: Option<Vec<usize>>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            flex: BTreeMap::new(),
            rect_rotation: BTreeMap::new(),
            fix_dec: BTreeMap::new(),
            flex_y_decision: false,
            expand_all: false,
            expand_s: false,
            vertex_cap: 4096,
            agents: None,
        }
    }
}

/// Symbolic rollout of the whole network.
pub struct NetworkExprs {
    /// u[i][t]: input at stage t.
    pub u: Vec<Vec<AffineExpr>>,
    /// x[i][t]: post-transition state x_{i,t+2} in 1-based stage indexing,
    /// i.e. the state reached after stage t.
    pub x: Vec<Vec<AffineExpr>>,
    /// committed[a][tau]: arc a's committed trajectory entry.
    pub committed: Vec<Vec<AffineExpr>>,
    /// Per-agent information layout used for the policy blocks.
    pub sources: Vec<Vec<InfoSource>>,
    /// Per-agent robustification domain: the factors its expressions touch.
    pub domains: Vec<Vec<Unc>>,
}

fn arcs_into_idx(net: &NetworkSpec, i: usize) -> Vec<(usize, &Arc)> {
    let mut v: Vec<(usize, &Arc)> =
        net.arcs.iter().enumerate().filter(|(_, a)| a.dst == i).collect();
    v.sort_by_key(|(_, a)| a.src);
    v
}

fn topo_order(net: &NetworkSpec) -> Vec<usize> {
    let m = net.agents.len();
    let mut indeg = vec![0usize; m];
    for a in &net.arcs {
        if a.src != a.dst {
            indeg[a.dst] += 1;
        }
    }
    let mut ready: BTreeSet<usize> = (0..m).filter(|i| indeg[*i] == 0).collect();
    let mut order = Vec::with_capacity(m);
    while let Some(&v) = ready.iter().next() {
        ready.remove(&v);
        order.push(v);
        for a in &net.arcs {
            if a.src == v && a.src != a.dst {
                indeg[a.dst] -= 1;
                if indeg[a.dst] == 0 {
                    ready.insert(a.dst);
                }
            }
        }
    }
    if order.len() < m {
        // Cyclic (only legal with pre-coupling): natural order works because
        // every cross reference then points to an earlier stage.
        return (0..m).collect();
    }
    order
}

fn is_local(mode: Mode) -> bool {
    matches!(mode, Mode::LocalRect | Mode::LocalFlexible)
}

/// Belief expression ζ_{a,tau} for the destination of arc `a`.
fn belief_expr(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    opts: &BuildOptions,
    a: usize,
    arc: &Arc,
    tau_idx: isize,
) -> AffineExpr {
    let dc = model::committed_dim(net, cfg, arc);
    if tau_idx < 0 {
        return match cfg.committed_variable {
            Committed::State => AffineExpr::constant(net.agents[arc.src].x_init.clone()),
            Committed::Input => AffineExpr::zeros(dc),
        };
    }
    let tau = tau_idx as usize;
    let mut e = AffineExpr::zeros(dc);
    match cfg.mode {
        Mode::LocalRect => {
            let rot = opts
                .rect_rotation
                .get(&a)
                .cloned()
                .unwrap_or_else(|| DMatrix::identity(dc, dc));
            e.push_dec(Dec::ZContract { arc: a, tau }, rot.clone(), (dc, 1));
            e.push_bil(
                Dec::YRect { arc: a, tau },
                Unc::S { arc: a, tau },
                Bilin::Diag { m: rot },
            );
        }
        Mode::LocalFlexible => {
            e.push_dec(Dec::ZContract { arc: a, tau }, DMatrix::identity(dc, dc), (dc, 1));
            let fx = &opts.flex[&a];
            let dim_s = fx.s_set.dim;
            if opts.flex_y_decision {
                let t_src = net.agents[arc.src].horizon;
                let total = dc * t_src;
                let sel = DMatrix::from_fn(dc, total, |r, c| {
                    if c == tau * dc + r {
                        1.0
                    } else {
                        0.0
                    }
                });
                e.push_bil(
                    Dec::YFlex { arc: a },
                    Unc::S { arc: a, tau: 0 },
                    Bilin::Full { left: sel, right: DMatrix::identity(dim_s, dim_s) },
                );
            } else {
                e.push_unc(Unc::S { arc: a, tau: 0 }, fx.y_mat.rows(tau * dc, dc).into_owned());
            }
        }
        _ => unreachable!("belief expressions only exist in local modes"),
    }
    e
}

/// Roll the dynamics of every agent out into symbolic expressions under the
/// configured information structure.
pub fn rollout_network(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    opts: &BuildOptions,
    comp: &mut Compiler,
) -> Result<NetworkExprs, BuildError> {
    let m = net.agents.len();
    let horizon = net.agents.first().map_or(0, |a| a.horizon);
    let shift = cfg.coupling_shift(net);
    let local = is_local(cfg.mode);

    // Register every uncertainty factor up front.
    for (i, ag) in net.agents.iter().enumerate() {
        for t in 0..ag.horizon {
            comp.register_unc(Unc::Xi { agent: i, t }, ag.xi_stages[t].clone())?;
        }
    }
    if local {
        for (a, arc) in net.arcs.iter().enumerate() {
            let dc = model::committed_dim(net, cfg, arc);
            match cfg.mode {
                Mode::LocalRect => {
                    for tau in 0..net.agents[arc.src].horizon {
                        comp.register_unc(Unc::S { arc: a, tau }, Polyhedron::unit_box(dc, 1.0))?;
                    }
                }
                Mode::LocalFlexible => {
                    let fx = opts.flex.get(&a).ok_or_else(|| {
                        BuildError::Invalid(format!("arc {a}: missing flexible contract data"))
                    })?;
                    let t_src = net.agents[arc.src].horizon;
                    if fx.y_mat.nrows() != dc * t_src || fx.y_mat.ncols() != fx.s_set.dim {
                        return Err(BuildError::Invalid(format!(
                            "arc {a}: Y must be {}x{}, got {}x{}",
                            dc * t_src,
                            fx.s_set.dim,
                            fx.y_mat.nrows(),
                            fx.y_mat.ncols()
                        )));
                    }
                    comp.register_unc(Unc::S { arc: a, tau: 0 }, fx.s_set.clone())?;
                }
                _ => {}
            }
        }
    }

    // Information layouts (and the arc behind each local source).
    let mut sources = Vec::with_capacity(m);
    let mut source_arc: Vec<Vec<Option<usize>>> = Vec::with_capacity(m);
    for i in 0..m {
        let ins = arcs_into_idx(net, i);
        let s_dims: Vec<usize> = ins
            .iter()
            .map(|(a, _)| if cfg.mode == Mode::LocalFlexible { opts.flex[a].s_set.dim } else { 0 })
            .collect();
        let layout = policy::layout(net, cfg, i, &s_dims);
        let mut arcs_of = vec![None; layout.len()];
        if local {
            // layout = own ξ followed by one source per in-arc, same order.
            for (k, (a, _)) in ins.iter().enumerate() {
                arcs_of[k + 1] = Some(*a);
            }
        }
        sources.push(layout);
        source_arc.push(arcs_of);
    }

    let mut u: Vec<Vec<AffineExpr>> = vec![Vec::with_capacity(horizon); m];
    let mut x: Vec<Vec<AffineExpr>> = vec![Vec::with_capacity(horizon); m];
    let order = topo_order(net);

    for t0 in 0..horizon {
        for i in 0..m {
            let n_u = net.agents[i].n_u();
            let mut e = AffineExpr::zeros(n_u);
            if n_u > 0 {
                e.push_dec(
                    Dec::PolConst { agent: i, t: t0 },
                    DMatrix::identity(n_u, n_u),
                    (n_u, 1),
                );
                for (si, src) in sources[i].iter().enumerate() {
                    for tau in 0..policy::observable_len(src, t0) {
                        let d = src.stage_dims[tau];
                        if d == 0 {
                            continue;
                        }
                        let unc = match src.kind {
                            SourceKind::OwnXi => Unc::Xi { agent: i, t: tau },
                            SourceKind::ForeignXi(j) => Unc::Xi { agent: j, t: tau },
                            SourceKind::Belief(_) => {
                                Unc::S { arc: source_arc[i][si].unwrap(), tau }
                            }
                            SourceKind::Auxiliary(_) => {
                                Unc::S { arc: source_arc[i][si].unwrap(), tau: 0 }
                            }
                        };
                        e.push_bil(
                            Dec::PolCoef { agent: i, t: t0, source: si, tau },
                            unc,
                            Bilin::Full {
                                left: DMatrix::identity(n_u, n_u),
                                right: DMatrix::identity(d, d),
                            },
                        );
                    }
                }
            }
            u[i].push(e);
        }
        for &i in &order {
            let ag = &net.agents[i];
            let mut e = if t0 == 0 {
                AffineExpr::constant(&ag.a[0] * &ag.x_init)
            } else {
                let mut p = x[i][t0 - 1].clone();
                p.premul(&ag.a[t0]);
                p
            };
            let mut col = 0;
            for (a, arc) in arcs_into_idx(net, i) {
                let dc = model::committed_dim(net, cfg, arc);
                if dc > 0 {
                    let bblk = ag.b[t0].columns(col, dc).into_owned();
                    let idx = t0 as isize - shift as isize;
                    let mut ce = if local {
                        belief_expr(net, cfg, opts, a, arc, idx)
                    } else if idx < 0 {
                        match cfg.committed_variable {
                            Committed::State => {
                                AffineExpr::constant(net.agents[arc.src].x_init.clone())
                            }
                            Committed::Input => AffineExpr::zeros(dc),
                        }
                    } else {
                        match cfg.committed_variable {
                            Committed::State => x[arc.src][idx as usize].clone(),
                            Committed::Input => {
                                u[arc.src][idx as usize].select_rows(&arc.input_rows)
                            }
                        }
                    };
                    ce.premul(&bblk);
                    e.axpy(1.0, &ce);
                }
                col += dc;
            }
            let mut du = u[i][t0].clone();
            du.premul(&ag.d[t0]);
            e.axpy(1.0, &du);
            if ag.n_xi() > 0 {
                e.push_unc(Unc::Xi { agent: i, t: t0 }, ag.e[t0].clone());
            }
            x[i].push(e);
        }
    }

    let mut committed: Vec<Vec<AffineExpr>> = Vec::with_capacity(net.arcs.len());
    for arc in &net.arcs {
        let mut cs = Vec::with_capacity(horizon);
        for tau in 0..net.agents[arc.src].horizon {
            cs.push(match cfg.committed_variable {
                Committed::State => x[arc.src][tau].clone(),
                Committed::Input => u[arc.src][tau].select_rows(&arc.input_rows),
            });
        }
        committed.push(cs);
    }

    let mut domains = Vec::with_capacity(m);
    for i in 0..m {
        let mut set = BTreeSet::new();
        for e in u[i].iter().chain(x[i].iter()) {
            set.extend(e.factors());
        }
        domains.push(set.into_iter().collect::<Vec<Unc>>());
    }

    Ok(NetworkExprs { u, x, committed, sources, domains })
}

/// Scalar epigraph auxiliary, adaptive over the agent's factor domain:
/// w(u) = w₀ + Σ_f W_f u_f.
fn aux_expr(comp: &Compiler, agent: usize, id: usize, dom: &[Unc]) -> AffineExpr {
    let mut e = AffineExpr::zeros(1);
    e.push_dec(Dec::Aux { agent, id }, DMatrix::identity(1, 1), (1, 1));
    for f in dom {
        let d = comp.unc_dim(f);
        if d == 0 {
            continue;
        }
        e.push_bil(
            Dec::AuxCoef { agent, id, unc: *f },
            *f,
            Bilin::Full { left: DMatrix::identity(1, 1), right: DMatrix::identity(d, d) },
        );
    }
    e
}

/// ±expr_k ≤ w for all rows k, robustly; the epigraph of the ∞-norm when the
/// caller also puts w into the cost contribution.
fn emit_abs_rows(comp: &mut Compiler, e: &AffineExpr, w: &AffineExpr) -> Result<(), BuildError> {
    let k = e.dim;
    let ones = DMatrix::from_element(k, 1, 1.0);
    let mut wb = w.clone();
    wb.premul(&ones);
    let mut pos = e.clone();
    pos.axpy(-1.0, &wb);
    comp.emit_robust_le(&pos)?;
    let mut neg = e.clone();
    neg.scale(-1.0);
    neg.axpy(-1.0, &wb);
    comp.emit_robust_le(&neg)
}

fn compile_agent(
    comp: &mut Compiler,
    net: &NetworkSpec,
    cfg: &DesignConfig,
    opts: &BuildOptions,
    ex: &NetworkExprs,
    i: usize,
) -> Result<(), BuildError> {
    let ag = &net.agents[i];
    let horizon = ag.horizon;
    let dom = ex.domains[i].clone();

    // Operational constraints Hx x + Hu u ≤ h.
    if ag.h.len() > 0 {
        let mut e = AffineExpr::vstack(&ex.x[i]);
        e.premul(&ag.hx);
        let mut eu = AffineExpr::vstack(&ex.u[i]);
        eu.premul(&ag.hu);
        e.axpy(1.0, &eu);
        e.axpy(1.0, &AffineExpr::constant(-ag.h.clone()));
        comp.emit_robust_le(&e)?;
    }

    // Contract membership for every out-arc (local modes).
    if is_local(cfg.mode) {
        for (a, arc) in net.arcs.iter().enumerate() {
            if arc.src != i {
                continue;
            }
            let dc = model::committed_dim(net, cfg, arc);
            if dc == 0 {
                continue;
            }
            match cfg.mode {
                Mode::LocalRect => {
                    let rot = opts
                        .rect_rotation
                        .get(&a)
                        .cloned()
                        .unwrap_or_else(|| DMatrix::identity(dc, dc));
                    let rot_t = rot.transpose();
                    let eye = DMatrix::identity(dc, dc);
                    for tau in 0..horizon {
                        for sign in [1.0, -1.0] {
                            let mut e = ex.committed[a][tau].clone();
                            e.premul(&rot_t);
                            e.scale(sign);
                            e.push_dec(Dec::ZContract { arc: a, tau }, &eye * -sign, (dc, 1));
                            e.push_dec(Dec::YRect { arc: a, tau }, -eye.clone(), (dc, 1));
                            comp.emit_robust_le(&e)?;
                        }
                    }
                }
                Mode::LocalFlexible => {
                    let fx = &opts.flex[&a];
                    let dim_s = fx.s_set.dim;
                    // Certificate s̃ as an adaptive rule over the agent's domain.
                    let mut s_expr = AffineExpr::zeros(dim_s);
                    s_expr.push_dec(
                        Dec::CertConst { arc: a },
                        DMatrix::identity(dim_s, dim_s),
                        (dim_s, 1),
                    );
                    for f in &dom {
                        let d = comp.unc_dim(f);
                        if d == 0 {
                            continue;
                        }
                        s_expr.push_bil(
                            Dec::CertCoef { arc: a, unc: *f },
                            *f,
                            Bilin::Full {
                                left: DMatrix::identity(dim_s, dim_s),
                                right: DMatrix::identity(d, d),
                            },
                        );
                    }
                    // s̃ ∈ S robustly: w − W s̃ ≤ 0.
                    let mut ms = s_expr.clone();
                    ms.premul(&(-fx.s_set.w_mat.clone()));
                    ms.axpy(1.0, &AffineExpr::constant(fx.s_set.w_vec.clone()));
                    comp.emit_robust_le(&ms)?;
                    // Identity matching: c − Y s̃ − z ≡ 0.
                    let mut e = AffineExpr::vstack(&ex.committed[a]);
                    let total = dc * horizon;
                    if opts.flex_y_decision {
                        // Y is a decision and s̃ is pinned: read its numbers.
                        let s_cst = opts
                            .fix_dec
                            .get(&Dec::CertConst { arc: a })
                            .cloned()
                            .unwrap_or_else(|| DMatrix::zeros(dim_s, 1));
                        let mut ylin = DMatrix::zeros(total, total * dim_s);
                        for rr in 0..total {
                            for b in 0..dim_s {
                                ylin[(rr, b * total + rr)] = -s_cst[(b, 0)];
                            }
                        }
                        e.push_dec(Dec::YFlex { arc: a }, ylin, (total, dim_s));
                        for f in &dom {
                            let d = comp.unc_dim(f);
                            if d == 0 {
                                continue;
                            }
                            let sf = opts
                                .fix_dec
                                .get(&Dec::CertCoef { arc: a, unc: *f })
                                .cloned()
                                .unwrap_or_else(|| DMatrix::zeros(dim_s, d));
                            e.push_bil(
                                Dec::YFlex { arc: a },
                                *f,
                                Bilin::Full { left: -DMatrix::identity(total, total), right: sf },
                            );
                        }
                    } else {
                        let mut ys = s_expr.clone();
                        ys.premul(&fx.y_mat);
                        e.axpy(-1.0, &ys);
                    }
                    for tau in 0..horizon {
                        let mut zc = DMatrix::zeros(total, dc);
                        for r in 0..dc {
                            zc[(tau * dc + r, r)] = -1.0;
                        }
                        e.push_dec(Dec::ZContract { arc: a, tau }, zc, (dc, 1));
                    }
                    comp.emit_eq(&e);
                }
                _ => unreachable!(),
            }
        }
    }

    // Objective: per-stage epigraphs summed into the worst-case scalar ℓ_i.
    let mut contrib = AffineExpr::zeros(1);
    let mut aux_id = 0usize;
    let ob = &ag.objective;
    for t in 0..horizon {
        for (mat, traj) in [(&ob.q[t], &ex.x[i][t]), (&ob.r[t], &ex.u[i][t])] {
            if mat.nrows() == 0 || mat.iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut me = traj.clone();
            me.premul(mat);
            match ob.q_norm {
                model::QNorm::Inf => {
                    let w = aux_expr(comp, i, aux_id, &dom);
                    aux_id += 1;
                    emit_abs_rows(comp, &me, &w)?;
                    contrib.axpy(1.0, &w);
                }
                model::QNorm::One => {
                    for r in 0..me.dim {
                        let w = aux_expr(comp, i, aux_id, &dom);
                        aux_id += 1;
                        emit_abs_rows(comp, &me.select_rows(&[r]), &w)?;
                        contrib.axpy(1.0, &w);
                    }
                }
            }
        }
        if let Some(pp) = &ob.pos_part {
            for k in 0..ag.n_x() {
                let (h, b) = (pp.hold[k], pp.backlog[k]);
                if h == 0.0 && b == 0.0 {
                    continue;
                }
                let w = aux_expr(comp, i, aux_id, &dom);
                aux_id += 1;
                let xk = ex.x[i][t].select_rows(&[k]);
                let mut r1 = xk.clone();
                r1.scale(h);
                r1.axpy(-1.0, &w);
                comp.emit_robust_le(&r1)?;
                let mut r2 = xk;
                r2.scale(-b);
                r2.axpy(-1.0, &w);
                comp.emit_robust_le(&r2)?;
                contrib.axpy(1.0, &w);
            }
        }
        let lx = &ob.linear_x[t];
        if lx.iter().any(|v| *v != 0.0) {
            let mut e = ex.x[i][t].clone();
            e.premul(&DMatrix::from_row_slice(1, lx.len(), lx.as_slice()));
            contrib.axpy(1.0, &e);
        }
        let lu = &ob.linear_u[t];
        if lu.iter().any(|v| *v != 0.0) {
            let mut e = ex.u[i][t].clone();
            e.premul(&DMatrix::from_row_slice(1, lu.len(), lu.as_slice()));
            contrib.axpy(1.0, &e);
        }
    }
    contrib.push_dec(Dec::Ell { agent: i }, -DMatrix::identity(1, 1), (1, 1));
    comp.emit_robust_le(&contrib)
}

/// The compiled design problem plus the bookkeeping needed to read decisions
/// back out of a solution.
pub struct Compiled {
    pub lp: LinearProgram,
    blocks: BTreeMap<Dec, BlockLoc>,
    fix: BTreeMap<Dec, DMatrix<f64>>,
    pub exprs: NetworkExprs,
    pub n_u: Vec<usize>,
    pub horizon: usize,
    /// (src, dst, committed dim) per arc.
    pub arcs: Vec<(usize, usize, usize)>,
}

/// Compile the configured design problem to a deterministic LP.
pub fn build(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    opts: &BuildOptions,
) -> Result<Compiled, BuildError> {
    let errors: Vec<String> = model::validate(net, cfg)
        .into_iter()
        .filter(|d| d.severity == model::Severity::Error)
        .map(|d| d.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(BuildError::Invalid(errors.join("; ")));
    }
    let mut comp = Compiler::new(opts.vertex_cap);
    comp.fix = opts.fix_dec.clone();
    let ex = rollout_network(net, cfg, opts, &mut comp)?;
    if opts.expand_all {
        comp.expand = comp.unc_info.keys().copied().collect();
    } else if opts.expand_s {
        comp.expand =
            comp.unc_info.keys().copied().filter(|u| matches!(u, Unc::S { .. })).collect();
    }
    let mut agent_list: Vec<usize> =
        opts.agents.clone().unwrap_or_else(|| (0..net.agents.len()).collect());
    agent_list.sort_unstable();
    agent_list.dedup();
    for &i in &agent_list {
        if i >= net.agents.len() {
            return Err(BuildError::Invalid(format!("unknown agent id {i}")));
        }
        compile_agent(&mut comp, net, cfg, opts, &ex, i)?;
    }
    Ok(Compiled {
        lp: comp.lp,
        blocks: comp.blocks,
        fix: comp.fix,
        exprs: ex,
        n_u: net.agents.iter().map(|a| a.n_u()).collect(),
        horizon: net.agents.first().map_or(0, |a| a.horizon),
        arcs: net
            .arcs
            .iter()
            .map(|a| (a.src, a.dst, model::committed_dim(net, cfg, a)))
            .collect(),
    })
}

impl Compiled {
    pub fn solve(&self, opts: &SolveOpts) -> Result<Solution, BuildError> {
        let sol = lp::solve(&self.lp, opts);
        match sol.status {
            Status::Optimal => Ok(sol),
            s => Err(BuildError::Solve { phase: "design", status: s }),
        }
    }

    /// The numeric value of a decision block (pinned, solved, or absent → None).
    pub fn block_value(&self, sol: &Solution, dec: &Dec) -> Option<DMatrix<f64>> {
        if let Some(m) = self.fix.get(dec) {
            return Some(m.clone());
        }
        let b = self.blocks.get(dec)?;
        Some(DMatrix::from_column_slice(
            b.rows,
            b.cols,
            &sol.primal[b.start..b.start + b.rows * b.cols],
        ))
    }

    /// Column range (start, length) of a decision block, if it was allocated.
    pub fn block_cols(&self, dec: &Dec) -> Option<(usize, usize)> {
        self.blocks.get(dec).map(|b| (b.start, b.rows * b.cols))
    }

    /// All decision blocks as numbers.
    pub fn dec_values(&self, sol: &Solution) -> BTreeMap<Dec, DMatrix<f64>> {
        let mut out = self.fix.clone();
        for (dec, b) in &self.blocks {
            out.insert(
                *dec,
                DMatrix::from_column_slice(
                    b.rows,
                    b.cols,
                    &sol.primal[b.start..b.start + b.rows * b.cols],
                ),
            );
        }
        out
    }

    /// Agent i's policy; in local modes this is the rule over primitive
    /// variables (translate with the contracts for the belief-space rule).
    pub fn policy(&self, sol: &Solution, i: usize) -> AffinePolicy {
        let mut pol = AffinePolicy::zeros(self.n_u[i], self.horizon, self.exprs.sources[i].clone());
        for b in &mut pol.blocks {
            if let Some(v) = self.block_value(
                sol,
                &Dec::PolCoef { agent: i, t: b.t, source: b.source, tau: b.tau },
            ) {
                b.mat = v;
            }
        }
        for t in 0..self.horizon {
            if let Some(v) = self.block_value(sol, &Dec::PolConst { agent: i, t }) {
                pol.constants[t] = DVector::from_column_slice(v.as_slice());
            }
        }
        pol
    }

    /// Worst-case objective certificate ℓ_i.
    pub fn ell(&self, sol: &Solution, i: usize) -> f64 {
        self.block_value(sol, &Dec::Ell { agent: i }).map_or(0.0, |m| m[(0, 0)])
    }

    /// Rectangular contracts keyed by arc index, stacked over the committed
    /// trajectory (ready for the belief-space translation).
    pub fn rect_contracts(&self, sol: &Solution) -> BTreeMap<usize, ForecastSetParam> {
        let mut out = BTreeMap::new();
        for (a, (_src, _dst, dc)) in self.arcs.iter().enumerate() {
            if *dc == 0 {
                continue;
            }
            let mut y = DVector::zeros(dc * self.horizon);
            let mut z = DVector::zeros(dc * self.horizon);
            for tau in 0..self.horizon {
                if let Some(v) = self.block_value(sol, &Dec::YRect { arc: a, tau }) {
                    y.rows_mut(tau * dc, *dc)
                        .copy_from(&DVector::from_column_slice(v.as_slice()));
                }
                if let Some(v) = self.block_value(sol, &Dec::ZContract { arc: a, tau }) {
                    z.rows_mut(tau * dc, *dc)
                        .copy_from(&DVector::from_column_slice(v.as_slice()));
                }
            }
            out.insert(a, ForecastSetParam::Rect { y, z });
        }
        out
    }

    /// Flexible contract centers z, stacked per arc.
    pub fn contract_centers(&self, sol: &Solution) -> BTreeMap<usize, DVector<f64>> {
        let mut out = BTreeMap::new();
        for (a, (_src, _dst, dc)) in self.arcs.iter().enumerate() {
            if *dc == 0 {
                continue;
            }
            let mut z = DVector::zeros(dc * self.horizon);
            for tau in 0..self.horizon {
                if let Some(v) = self.block_value(sol, &Dec::ZContract { arc: a, tau }) {
                    z.rows_mut(tau * dc, *dc)
                        .copy_from(&DVector::from_column_slice(v.as_slice()));
                }
            }
            out.insert(a, z);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BcdOptions {
    pub max_sweeps: usize,
    pub tol: f64,
    /// Per-arc initial Y; defaults to the warm start from the partially
    /// nested solution (requires dim(S_a) = horizon · n_ξ of the source).
    pub y_init: Option<BTreeMap<usize, DMatrix<f64>>>,
    pub solve: SolveOpts,
}

impl Default for BcdOptions {
    fn default() -> Self {
        BcdOptions { max_sweeps: 30, tol: 1e-7, y_init: None, solve: SolveOpts::default() }
    }
}

pub struct BcdOutcome {
    pub objective: f64,
    pub y: BTreeMap<usize, DMatrix<f64>>,
    pub z: BTreeMap<usize, DVector<f64>>,
    pub compiled: Compiled,
    pub solution: Solution,
    /// Objective after every solved LP, alternating fixed-Y / free-Y steps;
    /// nonincreasing.
    pub log: Vec<f64>,
}

fn flex_opts(
    y: &BTreeMap<usize, DMatrix<f64>>,
    s_sets: &BTreeMap<usize, Polyhedron>,
) -> BTreeMap<usize, FlexArc> {
    y.iter()
        .map(|(a, ym)| (*a, FlexArc { y_mat: ym.clone(), s_set: s_sets[a].clone() }))
        .collect()
}

/// Warm-start Y from the partially nested design: per arc, the sensitivity of
/// the committed trajectory to the source's own disturbances, and implicitly
/// z = its disturbance-free value (recovered by the first fixed-Y solve).
fn pn_warm_start(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    s_sets: &BTreeMap<usize, Polyhedron>,
    solve: &SolveOpts,
) -> Result<BTreeMap<usize, DMatrix<f64>>, BuildError> {
    let mut pn_cfg = *cfg;
    pn_cfg.mode = Mode::PartiallyNested;
    let compiled = build(net, &pn_cfg, &BuildOptions::default())?;
    let sol = compiled.solve(solve)?;
    let dv = compiled.dec_values(&sol);
    let mut out = BTreeMap::new();
    for (a, (src, _dst, dc)) in compiled.arcs.iter().enumerate() {
        let t = compiled.horizon;
        let nxi = net.agents[*src].n_xi();
        let dim_s = s_sets
            .get(&a)
            .ok_or_else(|| BuildError::Invalid(format!("arc {a}: missing primitive set")))?
            .dim;
        if dim_s != t * nxi {
            return Err(BuildError::Invalid(format!(
                "arc {a}: warm start needs dim(S) = {} (horizon × n_xi of source), got {dim_s}; \
                 pass y_init explicitly",
                t * nxi
            )));
        }
        let stacked = AffineExpr::vstack(&compiled.exprs.committed[a]);
        let mut ymat = DMatrix::zeros(dc * t, dim_s);
        for tt in 0..t {
            let jac = stacked.unc_jacobian(Unc::Xi { agent: *src, t: tt }, nxi, &dv);
            ymat.columns_mut(tt * nxi, nxi).copy_from(&jac);
        }
        out.insert(a, ymat);
    }
    Ok(out)
}

/// Block-coordinate descent on (Y, policies) for decision-dependent forecast
/// sets: step (i) solves the fixed-Y design, step (ii) re-optimizes Y with
/// policies, centers, and certificates pinned, enforcing the robust rows at
/// the vertices of every S (each row is affine in Y there).
pub fn bcd_flexible(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    s_sets: &BTreeMap<usize, Polyhedron>,
    opts: &BcdOptions,
) -> Result<BcdOutcome, BuildError> {
    if cfg.mode != Mode::LocalFlexible {
        return Err(BuildError::Invalid("bcd_flexible needs the flexible local mode".into()));
    }
    let mut y = match &opts.y_init {
        Some(y0) => y0.clone(),
        None => pn_warm_start(net, cfg, s_sets, &opts.solve)?,
    };
    let mut log = Vec::new();
    let mut prev = f64::INFINITY;

    let step_i = |y: &BTreeMap<usize, DMatrix<f64>>| -> Result<(Compiled, Solution), BuildError> {
        let o = BuildOptions { flex: flex_opts(y, s_sets), ..BuildOptions::default() };
        let compiled = build(net, cfg, &o)?;
        let sol = compiled.solve(&opts.solve)?;
        Ok((compiled, sol))
    };

    for _sweep in 0..opts.max_sweeps {
        let (compiled, sol) = step_i(&y)?;
        let obj_i = sol.objective;
        log.push(obj_i);
        if prev - obj_i < opts.tol {
            let z = compiled.contract_centers(&sol);
            return Ok(BcdOutcome { objective: obj_i, y, z, compiled, solution: sol, log });
        }
        prev = obj_i;

        // Step (ii): pin everything but Y, the epigraph auxiliaries, and ℓ.
        let mut fix = compiled.dec_values(&sol);
        fix.retain(|k, _| {
            !matches!(k, Dec::Aux { .. } | Dec::AuxCoef { .. } | Dec::Ell { .. })
        });
        let o2 = BuildOptions {
            flex: flex_opts(&y, s_sets),
            fix_dec: fix,
            flex_y_decision: true,
            expand_s: true,
            ..BuildOptions::default()
        };
        let compiled2 = build(net, cfg, &o2)?;
        let sol2 = lp::solve(&compiled2.lp, &opts.solve);
        if sol2.status != Status::Optimal {
            // The Y-step can stall numerically; the fixed-Y solution stands.
            let z = compiled.contract_centers(&sol);
            return Ok(BcdOutcome { objective: obj_i, y, z, compiled, solution: sol, log });
        }
        let obj_ii = sol2.objective;
        log.push(obj_ii);
        if prev - obj_ii < opts.tol {
            let z = compiled.contract_centers(&sol);
            return Ok(BcdOutcome { objective: obj_i, y, z, compiled, solution: sol, log });
        }
        for (a, ym) in y.iter_mut() {
            if let Some(v) = compiled2.block_value(&sol2, &Dec::YFlex { arc: *a }) {
                *ym = v;
            }
        }
        prev = obj_ii;
    }

    let (compiled, sol) = step_i(&y)?;
    log.push(sol.objective);
    let z = compiled.contract_centers(&sol);
    Ok(BcdOutcome { objective: sol.objective, y, z, compiled, solution: sol, log })
}
