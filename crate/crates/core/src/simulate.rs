//! Closed-loop evaluation: uncertainty sampling, trajectory simulation under
//! realized disturbances, exact worst-case certification on small instances,
//! and shrinking-horizon rolling re-optimization.
//!
//! Simulation expects *belief-space* policies: in the local modes the design
//! produces rules over primitive variables, which [`belief_space_policies`]
//! translates so that neighbor commitments can be read directly. Same-stage
//! commitment coupling (input commitments with zero belief lag, or concurrent
//! state coupling) is resolved by a stage-wise linear solve over all inputs.

use crate::lp::{SolveOpts, Solution, Status};
use crate::model::{
    self, Committed, DesignConfig, Mode, NetworkSpec, Objective, QNorm,
};
use crate::policy::{translate_gamma_to_psi, AffinePolicy, ForecastSetParam, SourceKind};
use crate::reformulate::{build, BuildError, BuildOptions, Compiled, Unc};
use crate::uncertainty::{Polyhedron, SetError};
use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("stage {stage}: mid-roll design solve failed ({status:?})")]
    Stage { stage: usize, status: Status },
    #[error("unsupported closed-loop structure: {0}")]
    Unsupported(String),
}

/// An operational-constraint row exceeded at the realized trajectory; reported,
/// never clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub agent: usize,
    pub row: usize,
    pub amount: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// states[i][k]: x_{i,k+1} in 1-based stage indexing; index 0 is the initial state.
    pub states: Vec<Vec<DVector<f64>>>,
    /// inputs[i][t]: u_{i,t+1}.
    pub inputs: Vec<Vec<DVector<f64>>>,
    /// xi[i][t]: realized ξ_{i,t+1}.
    pub xi: Vec<Vec<DVector<f64>>>,
    pub costs: Vec<f64>,
    pub total_cost: f64,
    pub violations: Vec<Violation>,
}

impl Trajectory {
    /// Max-norm residual of the dynamics recursion over all agents and stages.
    pub fn dynamics_residual(&self, net: &NetworkSpec, cfg: &DesignConfig) -> f64 {
        let shift = cfg.coupling_shift(net) as isize;
        let mut worst: f64 = 0.0;
        for (i, ag) in net.agents.iter().enumerate() {
            for t in 0..ag.horizon {
                let mut pred = &ag.a[t] * &self.states[i][t];
                let mut col = 0;
                for arc in model::arcs_into(net, i) {
                    let dc = model::committed_dim(net, cfg, arc);
                    if dc > 0 {
                        let idx = t as isize - shift;
                        let c = committed_value(
                            net,
                            cfg,
                            arc,
                            idx,
                            &self.states,
                            &self.inputs,
                        );
                        pred += ag.b[t].columns(col, dc) * c;
                    }
                    col += dc;
                }
                pred += &ag.d[t] * &self.inputs[i][t];
                pred += &ag.e[t] * &self.xi[i][t];
                let diff = &self.states[i][t + 1] - pred;
                if diff.len() > 0 {
                    worst = worst.max(diff.amax());
                }
            }
        }
        worst
    }
}

fn committed_value(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    arc: &model::Arc,
    idx: isize,
    states: &[Vec<DVector<f64>>],
    inputs: &[Vec<DVector<f64>>],
) -> DVector<f64> {
    let dc = model::committed_dim(net, cfg, arc);
    match cfg.committed_variable {
        Committed::State => {
            if idx < 0 {
                net.agents[arc.src].x_init.clone()
            } else {
                states[arc.src][idx as usize + 1].clone()
            }
        }
        Committed::Input => {
            if idx < 0 {
                DVector::zeros(dc)
            } else {
                let u = &inputs[arc.src][idx as usize];
                DVector::from_fn(dc, |k, _| u[arc.input_rows[k]])
            }
        }
    }
}

fn norm_cost(m: &DMatrix<f64>, v: &DVector<f64>, q: QNorm) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let w = m * v;
    match q {
        QNorm::Inf => w.amax(),
        QNorm::One => w.iter().map(|a| a.abs()).sum(),
    }
}

/// Realized cost of one agent's trajectory under its stage objective;
/// `x_post[t]` is the state reached after stage t.
pub fn realized_cost(obj: &Objective, x_post: &[DVector<f64>], u: &[DVector<f64>]) -> f64 {
    let mut c = 0.0;
    for t in 0..x_post.len() {
        c += norm_cost(&obj.q[t], &x_post[t], obj.q_norm);
        c += norm_cost(&obj.r[t], &u[t], obj.q_norm);
        c += obj.linear_x[t].dot(&x_post[t]);
        c += obj.linear_u[t].dot(&u[t]);
        if let Some(pp) = &obj.pos_part {
            for k in 0..x_post[t].len() {
                c += pp.hold[k] * x_post[t][k].max(0.0);
                c += pp.backlog[k] * (-x_post[t][k]).max(0.0);
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Per-coordinate bounds when every row of W touches a single coordinate.
fn axis_bounds(p: &Polyhedron) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut lb = vec![f64::NEG_INFINITY; p.dim];
    let mut ub = vec![f64::INFINITY; p.dim];
    for i in 0..p.w_mat.nrows() {
        let nz: Vec<usize> = (0..p.dim).filter(|&k| p.w_mat[(i, k)] != 0.0).collect();
        match nz.len() {
            0 => {
                if p.w_vec[i] > 0.0 {
                    // 0 >= w > 0: empty, flagged through the bound check below.
                    lb[0] = f64::INFINITY;
                }
            }
            1 => {
                let k = nz[0];
                let a = p.w_mat[(i, k)];
                let bound = p.w_vec[i] / a;
                if a > 0.0 {
                    lb[k] = lb[k].max(bound);
                } else {
                    ub[k] = ub[k].min(bound);
                }
            }
            _ => return None,
        }
    }
    Some((lb, ub))
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const HIT_AND_RUN_BURN_IN: usize = 100;

/// Draw a point from `p`: uniform per-coordinate on boxes, hit-and-run with a
/// fixed burn-in on general polyhedra. Deterministic for a given rng state.
pub fn sample<R: Rng>(p: &Polyhedron, rng: &mut R) -> Result<DVector<f64>, SetError> {
    if p.dim == 0 {
        return Ok(DVector::zeros(0));
    }
    if let Some((lb, ub)) = axis_bounds(p) {
        for k in 0..p.dim {
            if lb[k] > ub[k] {
                return Err(SetError::Empty);
            }
            if !lb[k].is_finite() || !ub[k].is_finite() {
                return Err(SetError::Unbounded);
            }
        }
        return Ok(DVector::from_fn(p.dim, |k, _| {
            if ub[k] > lb[k] {
                rng.gen_range(lb[k]..=ub[k])
            } else {
                lb[k]
            }
        }));
    }

    let mut v = chebyshev_center(p)?;
    let steps = HIT_AND_RUN_BURN_IN + 10 * p.dim;
    for _ in 0..steps {
        let mut d = DVector::from_fn(p.dim, |_, _| gaussian(rng));
        let n = d.norm();
        if n < 1e-12 {
            continue;
        }
        d /= n;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..p.w_mat.nrows() {
            let a = p.w_mat.row(i) * &d;
            let a = a[0];
            let slack = (p.w_mat.row(i) * &v)[0] - p.w_vec[i];
            if a.abs() < 1e-12 {
                continue;
            }
            // W_i (v + t d) >= w_i  ⇔  t·a >= −slack.
            if a > 0.0 {
                lo = lo.max(-slack / a);
            } else {
                hi = hi.min(slack / a);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(SetError::Unbounded);
        }
        if hi > lo {
            let t = rng.gen_range(lo..=hi);
            v += d * t;
        }
    }
    Ok(v)
}

fn chebyshev_center(p: &Polyhedron) -> Result<DVector<f64>, SetError> {
    use crate::lp::{self, LinearProgram, RowKind};
    let mut prog = LinearProgram::new();
    for k in 0..p.dim {
        prog.add_col(format!("v{k}"), 0.0, f64::NEG_INFINITY, f64::INFINITY);
    }
    let r = prog.add_col("r", -1.0, 0.0, f64::INFINITY);
    for i in 0..p.w_mat.nrows() {
        let norm = p.w_mat.row(i).norm();
        let mut coeffs: Vec<(usize, f64)> = (0..p.dim)
            .filter(|&k| p.w_mat[(i, k)] != 0.0)
            .map(|k| (k, -p.w_mat[(i, k)]))
            .collect();
        coeffs.push((r, norm));
        prog.add_row(RowKind::Le, coeffs, -p.w_vec[i]);
    }
    let sol = lp::solve(&prog, &SolveOpts::default());
    match sol.status {
        Status::Optimal => {
            Ok(DVector::from_column_slice(&sol.primal[..p.dim]))
        }
        Status::Infeasible => Err(SetError::Empty),
        _ => Err(SetError::Unbounded),
    }
}

// ---------------------------------------------------------------------------
// Closed-loop stepping
// ---------------------------------------------------------------------------

/// Translate design policies (rules over primitive variables in the local
/// modes) to rules over realized neighbor commitments; pass-through when a
/// policy reads no beliefs.
pub fn belief_space_policies(
    policies: &[AffinePolicy],
    arcs: &[(usize, usize, usize)],
    contracts: &BTreeMap<usize, ForecastSetParam>,
) -> Result<Vec<AffinePolicy>, SimError> {
    policies
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let reads_beliefs = p.sources.iter().any(|s| {
                matches!(s.kind, SourceKind::Belief(_) | SourceKind::Auxiliary(_))
            });
            if !reads_beliefs {
                return Ok(p.clone());
            }
            // A source commits per destination, so resolve each in-arc of
            // agent i to its own contract.
            let params: BTreeMap<usize, ForecastSetParam> = arcs
                .iter()
                .enumerate()
                .filter(|(a, (_, dst, _))| *dst == i && contracts.contains_key(a))
                .map(|(a, (src, _, _))| (*src, contracts[&a].clone()))
                .collect();
            translate_gamma_to_psi(p, &params)
                .map(|(q, _)| q)
                .map_err(SimError::Unsupported)
        })
        .collect()
}

struct ClosedLoop<'a> {
    net: &'a NetworkSpec,
    cfg: &'a DesignConfig,
    policies: &'a [AffinePolicy],
    states: Vec<Vec<DVector<f64>>>,
    inputs: Vec<Vec<DVector<f64>>>,
    xi: Vec<Vec<DVector<f64>>>,
    off: Vec<usize>,
    nu_total: usize,
    order: Vec<usize>,
}

impl<'a> ClosedLoop<'a> {
    fn new(
        net: &'a NetworkSpec,
        cfg: &'a DesignConfig,
        policies: &'a [AffinePolicy],
    ) -> Self {
        let m = net.agents.len();
        let mut off = Vec::with_capacity(m);
        let mut nu_total = 0;
        for ag in &net.agents {
            off.push(nu_total);
            nu_total += ag.n_u();
        }
        ClosedLoop {
            net,
            cfg,
            policies,
            states: net.agents.iter().map(|a| vec![a.x_init.clone()]).collect(),
            inputs: vec![Vec::new(); m],
            xi: vec![Vec::new(); m],
            off,
            nu_total,
            order: topo_order(net),
        }
    }

    /// Affine representation (constant, coefficient over the stacked stage-t
    /// input vector) of arc `a`'s committed value at trajectory index `tau`.
    fn committed_rep(
        &self,
        a: usize,
        tau: isize,
        t: usize,
        xi_t: &[DVector<f64>],
        visiting: &mut Vec<usize>,
    ) -> Result<(DVector<f64>, DMatrix<f64>), SimError> {
        let arc = &self.net.arcs[a];
        let dc = model::committed_dim(self.net, self.cfg, arc);
        let zero = DMatrix::zeros(dc, self.nu_total);
        if tau < 0 || (tau as usize) < t {
            let v = committed_value(self.net, self.cfg, arc, tau, &self.states, &self.inputs);
            return Ok((v, zero));
        }
        if tau as usize > t {
            return Err(SimError::Unsupported(format!(
                "commitment index {tau} read before stage {t} produced it"
            )));
        }
        let src = arc.src;
        match self.cfg.committed_variable {
            Committed::Input => {
                let mut mat = zero;
                for (k, &row) in arc.input_rows.iter().enumerate() {
                    mat[(k, self.off[src] + row)] = 1.0;
                }
                Ok((DVector::zeros(dc), mat))
            }
            Committed::State => {
                if visiting.contains(&src) {
                    return Err(SimError::Unsupported(
                        "cyclic concurrent state coupling".into(),
                    ));
                }
                visiting.push(src);
                let ag = &self.net.agents[src];
                let mut cst = &ag.a[t] * &self.states[src][t] + &ag.e[t] * &xi_t[src];
                let mut mat = DMatrix::zeros(ag.n_x(), self.nu_total);
                for c in 0..ag.n_u() {
                    mat.column_mut(self.off[src] + c).copy_from(&ag.d[t].column(c));
                }
                let shift = self.cfg.coupling_shift(self.net) as isize;
                let mut col = 0;
                for (a2, arc2) in arcs_into_idx(self.net, src) {
                    let dc2 = model::committed_dim(self.net, self.cfg, arc2);
                    if dc2 > 0 {
                        let (c2, m2) =
                            self.committed_rep(a2, t as isize - shift, t, xi_t, visiting)?;
                        let blk = ag.b[t].columns(col, dc2);
                        cst += blk * c2;
                        mat += ag.b[t].columns(col, dc2) * m2;
                    }
                    col += dc2;
                }
                visiting.pop();
                Ok((cst, mat))
            }
        }
    }

    fn step(&mut self, t: usize, xi_t: &[DVector<f64>]) -> Result<(), SimError> {
        let m = self.net.agents.len();
        let shift = self.cfg.coupling_shift(self.net) as isize;
        // Record the stage disturbances up front: a lag-0 policy reads its own
        // ξ at τ = t.
        for i in 0..m {
            self.xi[i].push(xi_t[i].clone());
        }
        let mut kvec = DVector::zeros(self.nu_total);
        let mut mmat = DMatrix::zeros(self.nu_total, self.nu_total);
        for i in 0..m {
            let pol = &self.policies[i];
            let n_u = self.net.agents[i].n_u();
            if n_u == 0 {
                continue;
            }
            let mut base = pol.constants[t].clone();
            for b in pol.blocks.iter().filter(|b| b.t == t) {
                match pol.sources[b.source].kind {
                    SourceKind::OwnXi => base += &b.mat * &self.xi[i][b.tau],
                    SourceKind::ForeignXi(j) => base += &b.mat * &self.xi[j][b.tau],
                    SourceKind::Belief(j) | SourceKind::Auxiliary(j) => {
                        let a = self
                            .net
                            .arcs
                            .iter()
                            .position(|arc| arc.src == j && arc.dst == i)
                            .ok_or_else(|| {
                                SimError::Unsupported(format!("no arc {j} -> {i} behind belief"))
                            })?;
                        let src_dims = &pol.sources[b.source].stage_dims;
                        let dc = model::committed_dim(self.net, self.cfg, &self.net.arcs[a]);
                        if src_dims[b.tau] != dc {
                            return Err(SimError::Unsupported(
                                "stacked flexible beliefs need a single-stage horizon".into(),
                            ));
                        }
                        let mut visiting = Vec::new();
                        let (cst, mat) =
                            self.committed_rep(a, b.tau as isize, t, xi_t, &mut visiting)?;
                        base += &b.mat * cst;
                        let contrib = &b.mat * mat;
                        for r in 0..n_u {
                            for c in 0..self.nu_total {
                                mmat[(self.off[i] + r, c)] += contrib[(r, c)];
                            }
                        }
                    }
                }
            }
            kvec.rows_mut(self.off[i], n_u).copy_from(&base);
        }

        let system = DMatrix::identity(self.nu_total, self.nu_total) - &mmat;
        let u_all = system.lu().solve(&kvec).ok_or_else(|| {
            SimError::Unsupported("singular same-stage commitment coupling".into())
        })?;
        for i in 0..m {
            self.inputs[i].push(u_all.rows(self.off[i], self.net.agents[i].n_u()).into_owned());
        }
        for &i in &self.order {
            let ag = &self.net.agents[i];
            let mut x = &ag.a[t] * &self.states[i][t];
            let mut col = 0;
            for arc in model::arcs_into(self.net, i) {
                let dc = model::committed_dim(self.net, self.cfg, arc);
                if dc > 0 {
                    let idx = t as isize - shift;
                    if self.cfg.committed_variable == Committed::State
                        && idx >= 0
                        && self.states[arc.src].len() <= idx as usize + 1
                    {
                        return Err(SimError::Unsupported(
                            "cyclic concurrent state coupling".into(),
                        ));
                    }
                    let c = committed_value(self.net, self.cfg, arc, idx, &self.states, &self.inputs);
                    x += ag.b[t].columns(col, dc) * c;
                }
                col += dc;
            }
            x += &ag.d[t] * &self.inputs[i][t];
            x += &ag.e[t] * &self.xi[i][t];
            self.states[i].push(x);
        }
        Ok(())
    }
}

/// Kahn order over the arc graph; cyclic parts fall back to natural order.
fn topo_order(net: &NetworkSpec) -> Vec<usize> {
    let m = net.agents.len();
    let mut indeg = vec![0usize; m];
    for arc in &net.arcs {
        if arc.src != arc.dst {
            indeg[arc.dst] += 1;
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..m).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(m);
    let mut seen = vec![false; m];
    while let Some(&i) = ready.iter().next() {
        ready.remove(&i);
        seen[i] = true;
        order.push(i);
        for arc in &net.arcs {
            if arc.src == i && !seen[arc.dst] {
                indeg[arc.dst] -= 1;
                if indeg[arc.dst] == 0 {
                    ready.insert(arc.dst);
                }
            }
        }
    }
    for i in 0..m {
        if !seen[i] {
            order.push(i);
        }
    }
    order
}

fn check_violations(net: &NetworkSpec, traj: &mut Trajectory) {
    for (i, ag) in net.agents.iter().enumerate() {
        if ag.h.len() == 0 {
            continue;
        }
        let t = ag.horizon;
        let mut xs = DVector::zeros(ag.n_x() * t);
        let mut us = DVector::zeros(ag.n_u() * t);
        for k in 0..t {
            xs.rows_mut(k * ag.n_x(), ag.n_x()).copy_from(&traj.states[i][k + 1]);
            us.rows_mut(k * ag.n_u(), ag.n_u()).copy_from(&traj.inputs[i][k]);
        }
        let slack = &ag.hx * xs + &ag.hu * us - &ag.h;
        for r in 0..slack.len() {
            if slack[r] > 1e-7 {
                traj.violations.push(Violation { agent: i, row: r, amount: slack[r] });
            }
        }
    }
}

/// Simulate the network under `policies` and the realized disturbances
/// `xi[i][t]`. Policies must be belief-space rules in the local modes.
pub fn simulate(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    policies: &[AffinePolicy],
    xi: &[Vec<DVector<f64>>],
) -> Result<Trajectory, SimError> {
    let horizon = net.agents.first().map_or(0, |a| a.horizon);
    let mut cl = ClosedLoop::new(net, cfg, policies);
    for t in 0..horizon {
        let xi_t: Vec<DVector<f64>> = (0..net.agents.len()).map(|i| xi[i][t].clone()).collect();
        cl.step(t, &xi_t)?;
    }
    let mut traj = Trajectory {
        states: cl.states,
        inputs: cl.inputs,
        xi: cl.xi,
        costs: Vec::new(),
        total_cost: 0.0,
        violations: Vec::new(),
    };
    for (i, ag) in net.agents.iter().enumerate() {
        let c = realized_cost(&ag.objective, &traj.states[i][1..], &traj.inputs[i]);
        traj.costs.push(c);
        traj.total_cost += c;
    }
    check_violations(net, &mut traj);
    Ok(traj)
}

/// Draw one realization of every agent's disturbance trajectory.
pub fn sample_xi<R: Rng>(
    net: &NetworkSpec,
    rng: &mut R,
) -> Result<Vec<Vec<DVector<f64>>>, SetError> {
    net.agents
        .iter()
        .map(|ag| ag.xi_stages.iter().map(|p| sample(p, rng)).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Worst-case certification
// ---------------------------------------------------------------------------

/// Exact per-agent worst case of J_i over the extreme points of its quantified
/// domain (its own Ξ factors plus in-contract primitive sets). The cost is
/// convex in the factors, so the vertex maximum is the true maximum.
pub fn certify_worst_case(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    opts: &BuildOptions,
    compiled: &Compiled,
    sol: &Solution,
    cap: usize,
) -> Result<Vec<f64>, SimError> {
    let dec_vals = compiled.dec_values(sol);
    let mut out = Vec::with_capacity(net.agents.len());
    for (i, ag) in net.agents.iter().enumerate() {
        let dom = &compiled.exprs.domains[i];
        let mut verts: Vec<Vec<DVector<f64>>> = Vec::with_capacity(dom.len());
        let mut combos = 1f64;
        for f in dom {
            let set = match *f {
                Unc::Xi { agent, t } => net.agents[agent].xi_stages[t].clone(),
                Unc::S { arc, .. } => match cfg.mode {
                    Mode::LocalFlexible => opts
                        .flex
                        .get(&arc)
                        .ok_or_else(|| {
                            SimError::Unsupported(format!("arc {arc}: missing primitive set"))
                        })?
                        .s_set
                        .clone(),
                    _ => Polyhedron::unit_box(compiled.arcs[arc].2, 1.0),
                },
            };
            let v = set.vertices(cap)?;
            combos *= v.len() as f64;
            if combos > cap as f64 {
                return Err(SetError::CapExceeded(cap).into());
            }
            verts.push(v);
        }
        let eval_at = |unc_vals: &BTreeMap<Unc, DVector<f64>>| {
            let x: Vec<DVector<f64>> =
                compiled.exprs.x[i].iter().map(|e| e.eval(&dec_vals, unc_vals)).collect();
            let u: Vec<DVector<f64>> =
                compiled.exprs.u[i].iter().map(|e| e.eval(&dec_vals, unc_vals)).collect();
            realized_cost(&ag.objective, &x, &u)
        };
        let worst = if dom.is_empty() {
            eval_at(&BTreeMap::new())
        } else {
            let mut worst = f64::NEG_INFINITY;
            for combo in verts.iter().map(|v| v.iter()).multi_cartesian_product() {
                let unc_vals: BTreeMap<Unc, DVector<f64>> =
                    dom.iter().copied().zip(combo.into_iter().cloned()).collect();
                worst = worst.max(eval_at(&unc_vals));
            }
            worst
        };
        out.push(worst);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rolling horizon
// ---------------------------------------------------------------------------

/// The remaining problem from stage `from`, with realized history folded into
/// the initial states and the operational-constraint right-hand sides. Rows
/// whose future coefficients vanish are dropped (they are already decided).
pub fn truncate(
    net: &NetworkSpec,
    from: usize,
    states: &[Vec<DVector<f64>>],
    inputs: &[Vec<DVector<f64>>],
) -> NetworkSpec {
    if from == 0 {
        return net.clone();
    }
    let mut agents = Vec::with_capacity(net.agents.len());
    for (i, ag) in net.agents.iter().enumerate() {
        let t_new = ag.horizon - from;
        let (n_x, n_u) = (ag.n_x(), ag.n_u());
        let mut past_x = DVector::zeros(n_x * from);
        let mut past_u = DVector::zeros(n_u * from);
        for k in 0..from {
            past_x.rows_mut(k * n_x, n_x).copy_from(&states[i][k + 1]);
            past_u.rows_mut(k * n_u, n_u).copy_from(&inputs[i][k]);
        }
        let hx_fut = ag.hx.columns(from * n_x, t_new * n_x);
        let hu_fut = ag.hu.columns(from * n_u, t_new * n_u);
        let rhs = &ag.h
            - ag.hx.columns(0, from * n_x) * &past_x
            - ag.hu.columns(0, from * n_u) * &past_u;
        let keep: Vec<usize> = (0..ag.h.len())
            .filter(|&r| hx_fut.row(r).amax() > 0.0 || hu_fut.row(r).amax() > 0.0)
            .collect();
        let obj = &ag.objective;
        agents.push(model::AgentSpec {
            id: ag.id,
            horizon: t_new,
            a: ag.a[from..].to_vec(),
            b: ag.b[from..].to_vec(),
            d: ag.d[from..].to_vec(),
            e: ag.e[from..].to_vec(),
            x_init: states[i][from].clone(),
            hx: hx_fut.into_owned().select_rows(&keep),
            hu: hu_fut.into_owned().select_rows(&keep),
            h: DVector::from_fn(keep.len(), |r, _| rhs[keep[r]]),
            objective: Objective {
                q: obj.q[from..].to_vec(),
                r: obj.r[from..].to_vec(),
                q_norm: obj.q_norm,
                linear_x: obj.linear_x[from..].to_vec(),
                linear_u: obj.linear_u[from..].to_vec(),
                pos_part: obj.pos_part.clone(),
            },
            xi_stages: ag.xi_stages[from..].to_vec(),
        });
    }
    NetworkSpec { agents, arcs: net.arcs.clone(), coupling: net.coupling }
}

#[derive(Debug, Clone)]
pub struct RollOutcome {
    pub trajectory: Trajectory,
    /// Worst-case objective of each shrinking-horizon design solve.
    pub stage_objectives: Vec<f64>,
}

/// Shrinking-horizon protocol: at each stage re-solve the design from the
/// current state, apply the realized first-stage inputs, draw the stage
/// disturbance, and step the dynamics.
pub fn roll(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    build_opts: &BuildOptions,
    solve: &SolveOpts,
    seed: u64,
) -> Result<RollOutcome, SimError> {
    if cfg.mode == Mode::LocalFlexible {
        return Err(SimError::Unsupported(
            "rolling horizon over flexible contracts".into(),
        ));
    }
    let m = net.agents.len();
    let horizon = net.agents.first().map_or(0, |a| a.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states: Vec<Vec<DVector<f64>>> =
        net.agents.iter().map(|a| vec![a.x_init.clone()]).collect();
    let mut inputs: Vec<Vec<DVector<f64>>> = vec![Vec::new(); m];
    let mut xi_real: Vec<Vec<DVector<f64>>> = vec![Vec::new(); m];
    let mut stage_objectives = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let sub = truncate(net, t, &states, &inputs);
        let compiled = build(&sub, cfg, build_opts)?;
        let sol = match compiled.solve(solve) {
            Ok(s) => s,
            Err(BuildError::Solve { status, .. }) => {
                return Err(SimError::Stage { stage: t, status })
            }
            Err(e) => return Err(e.into()),
        };
        stage_objectives.push(sol.objective);
        let pols: Vec<AffinePolicy> = (0..m).map(|i| compiled.policy(&sol, i)).collect();
        let pols = if cfg.mode == Mode::LocalRect {
            belief_space_policies(&pols, &compiled.arcs, &compiled.rect_contracts(&sol))?
        } else {
            pols
        };
        let xi_t: Vec<DVector<f64>> = net
            .agents
            .iter()
            .map(|ag| sample(&ag.xi_stages[t], &mut rng))
            .collect::<Result<_, _>>()?;
        let mut cl = ClosedLoop::new(&sub, cfg, &pols);
        cl.step(0, &xi_t)?;
        for i in 0..m {
            inputs[i].push(cl.inputs[i][0].clone());
            states[i].push(cl.states[i][1].clone());
            xi_real[i].push(xi_t[i].clone());
        }
    }

    let mut traj = Trajectory {
        states,
        inputs,
        xi: xi_real,
        costs: Vec::new(),
        total_cost: 0.0,
        violations: Vec::new(),
    };
    for (i, ag) in net.agents.iter().enumerate() {
        let c = realized_cost(&ag.objective, &traj.states[i][1..], &traj.inputs[i]);
        traj.costs.push(c);
        traj.total_cost += c;
    }
    check_violations(net, &mut traj);
    Ok(RollOutcome { trajectory: traj, stage_objectives })
}

fn arcs_into_idx<'a>(net: &'a NetworkSpec, i: usize) -> Vec<(usize, &'a model::Arc)> {
    let mut out: Vec<(usize, &model::Arc)> =
        net.arcs.iter().enumerate().filter(|(_, a)| a.dst == i).collect();
    out.sort_by_key(|(_, a)| a.src);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentSpec, Arc, QNorm};
    use crate::reformulate::{build, BuildOptions};
    use approx::assert_relative_eq;

    fn mat(r: usize, c: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, data)
    }

    fn pair_net(horizon: usize, xi: Polyhedron) -> NetworkSpec {
        let obj = Objective {
            q: vec![DMatrix::identity(1, 1); horizon],
            r: vec![DMatrix::zeros(0, 1); horizon],
            q_norm: QNorm::Inf,
            linear_x: vec![DVector::zeros(1); horizon],
            linear_u: vec![DVector::zeros(1); horizon],
            pos_part: None,
        };
        let a0 = AgentSpec::time_invariant(
            0,
            horizon,
            mat(1, 1, &[0.5]),
            DMatrix::zeros(1, 0),
            mat(1, 1, &[1.0]),
            mat(1, 1, &[1.0]),
            DVector::from_element(1, 0.0),
            xi.clone(),
            obj.clone(),
        );
        let mut a1 = a0.clone();
        a1.id = 1;
        a1.a = vec![mat(1, 1, &[0.3]); horizon];
        a1.b = vec![mat(1, 1, &[1.0]); horizon];
        a1.e = vec![mat(1, 1, &[0.5]); horizon];
        NetworkSpec {
            agents: vec![a0, a1],
            arcs: vec![Arc { src: 0, dst: 1, input_rows: vec![] }],
            coupling: Default::default(),
        }
    }

    #[test]
    fn sampling_is_deterministic_and_respects_sets() {
        let point = Polyhedron::singleton(&[0.7, -0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = sample(&point, &mut rng).unwrap();
        assert_relative_eq!(v[0], 0.7, epsilon = 1e-12);
        assert_relative_eq!(v[1], -0.2, epsilon = 1e-12);

        let bx = Polyhedron::box_set(&[-1.0, 2.0], &[3.0, 2.5]).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(sample(&bx, &mut r1).unwrap(), sample(&bx, &mut r2).unwrap());
    }

    #[test]
    fn box_sample_means_concentrate_at_the_center() {
        let bx = Polyhedron::box_set(&[-1.0, 0.0], &[1.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mean = DVector::zeros(2);
        let n = 1000;
        for _ in 0..n {
            let v = sample(&bx, &mut rng).unwrap();
            assert!(bx.contains(v.as_slice(), 1e-9));
            mean += v;
        }
        mean /= n as f64;
        assert!((mean[0] - 0.0).abs() < 0.05, "mean {mean}");
        assert!((mean[1] - 2.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn hit_and_run_stays_inside_a_simplex() {
        // v >= 0, v_1 + v_2 <= 1: not axis-aligned, so the general path runs.
        let simplex = Polyhedron::new(
            mat(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]),
            DVector::from_column_slice(&[0.0, 0.0, -1.0]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mean = DVector::zeros(2);
        let n = 200;
        for _ in 0..n {
            let v = sample(&simplex, &mut rng).unwrap();
            assert!(simplex.contains(v.as_slice(), 1e-7), "escaped: {v}");
            mean += v;
        }
        mean /= n as f64;
        // Uniform centroid is (1/3, 1/3); hit-and-run should be in the bulk.
        assert!((mean[0] - 1.0 / 3.0).abs() < 0.15, "mean {mean}");
        assert!((mean[1] - 1.0 / 3.0).abs() < 0.15, "mean {mean}");
    }

    #[test]
    fn closed_loop_matches_direct_policy_evaluation() {
        let net = pair_net(3, Polyhedron::unit_box(1, 1.0));
        let cfg = DesignConfig::new(Mode::PartiallyNested);
        let compiled = build(&net, &cfg, &BuildOptions::default()).unwrap();
        let sol = compiled.solve(&SolveOpts::default()).unwrap();
        let pols: Vec<AffinePolicy> = (0..2).map(|i| compiled.policy(&sol, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xi = sample_xi(&net, &mut rng).unwrap();
        let traj = simulate(&net, &cfg, &pols, &xi).unwrap();
        assert!(traj.dynamics_residual(&net, &cfg) <= 1e-9);

        // Oracle: evaluate each policy on the full disturbance record, then
        // replay the recursion by hand.
        for i in 0..2 {
            let realization: Vec<Vec<DVector<f64>>> = pols[i]
                .sources
                .iter()
                .map(|s| match s.kind {
                    SourceKind::OwnXi => xi[i].clone(),
                    SourceKind::ForeignXi(j) => xi[j].clone(),
                    _ => unreachable!(),
                })
                .collect();
            let u = pols[i].evaluate(&realization);
            for t in 0..3 {
                assert_relative_eq!(u[t][0], traj.inputs[i][t][0], epsilon = 1e-10);
            }
        }
        let mut x0 = net.agents[0].x_init[0];
        let mut x1 = net.agents[1].x_init[0];
        for t in 0..3 {
            let nx0 = 0.5 * x0 + traj.inputs[0][t][0] + xi[0][t][0];
            // Pre coupling: agent 1 reads agent 0's state at the stage start.
            let nx1 = 0.3 * x1 + x0 + traj.inputs[1][t][0] + 0.5 * xi[1][t][0];
            x0 = nx0;
            x1 = nx1;
            assert_relative_eq!(traj.states[0][t + 1][0], x0, epsilon = 1e-10);
            assert_relative_eq!(traj.states[1][t + 1][0], x1, epsilon = 1e-10);
        }
    }

    #[test]
    fn local_rect_realizations_never_exceed_the_certificates() {
        let net = pair_net(2, Polyhedron::unit_box(1, 1.0));
        let cfg = DesignConfig::new(Mode::LocalRect);
        let compiled = build(&net, &cfg, &BuildOptions::default()).unwrap();
        let sol = compiled.solve(&SolveOpts::default()).unwrap();
        let gamma: Vec<AffinePolicy> = (0..2).map(|i| compiled.policy(&sol, i)).collect();
        let psi = belief_space_policies(&gamma, &compiled.arcs, &compiled.rect_contracts(&sol)).unwrap();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xi = sample_xi(&net, &mut rng).unwrap();
            let traj = simulate(&net, &cfg, &psi, &xi).unwrap();
            assert!(traj.dynamics_residual(&net, &cfg) <= 1e-9);
            for i in 0..2 {
                let ell = compiled.ell(&sol, i);
                assert!(
                    traj.costs[i] <= ell + 1e-6,
                    "seed {seed} agent {i}: realized {} > certificate {ell}",
                    traj.costs[i]
                );
            }
        }
    }

    #[test]
    fn certificates_match_the_design_epigraph_values() {
        let net = pair_net(2, Polyhedron::unit_box(1, 1.0));
        for mode in [Mode::Centralized, Mode::PartiallyNested, Mode::LocalRect] {
            let cfg = DesignConfig::new(mode);
            let opts = BuildOptions::default();
            let compiled = build(&net, &cfg, &opts).unwrap();
            let sol = compiled.solve(&SolveOpts::default()).unwrap();
            let certs = certify_worst_case(&net, &cfg, &opts, &compiled, &sol, 4096).unwrap();
            for i in 0..2 {
                assert_relative_eq!(certs[i], compiled.ell(&sol, i), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn zero_uncertainty_certificate_equals_the_nominal_cost() {
        let net = pair_net(2, Polyhedron::singleton(&[0.3]));
        let cfg = DesignConfig::new(Mode::Centralized);
        let opts = BuildOptions::default();
        let compiled = build(&net, &cfg, &opts).unwrap();
        let sol = compiled.solve(&SolveOpts::default()).unwrap();
        let certs = certify_worst_case(&net, &cfg, &opts, &compiled, &sol, 4096).unwrap();
        let pols: Vec<AffinePolicy> = (0..2).map(|i| compiled.policy(&sol, i)).collect();
        let xi = vec![vec![DVector::from_element(1, 0.3); 2]; 2];
        let traj = simulate(&net, &cfg, &pols, &xi).unwrap();
        for i in 0..2 {
            assert_relative_eq!(certs[i], traj.costs[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn frozen_uncertainty_roll_is_seed_independent_and_nominal_optimal() {
        let net = pair_net(3, Polyhedron::singleton(&[0.0]));
        let cfg = DesignConfig::new(Mode::Centralized);
        let out1 = roll(&net, &cfg, &BuildOptions::default(), &SolveOpts::default(), 1).unwrap();
        let out2 = roll(&net, &cfg, &BuildOptions::default(), &SolveOpts::default(), 2).unwrap();
        for i in 0..2 {
            for t in 0..3 {
                assert_relative_eq!(
                    out1.trajectory.inputs[i][t][0],
                    out2.trajectory.inputs[i][t][0],
                    epsilon = 1e-12
                );
            }
        }
        assert_relative_eq!(
            out1.trajectory.total_cost,
            out1.stage_objectives[0],
            epsilon = 1e-6
        );
        assert!(out1.trajectory.dynamics_residual(&net, &cfg) <= 1e-9);
    }

    #[test]
    fn truncation_folds_past_rows_into_the_rhs() {
        let horizon = 2;
        let mut ag = AgentSpec::time_invariant(
            0,
            horizon,
            mat(1, 1, &[1.0]),
            DMatrix::zeros(1, 0),
            mat(1, 1, &[1.0]),
            mat(1, 1, &[0.0]),
            DVector::from_element(1, 0.0),
            Polyhedron::singleton(&[0.0]),
            Objective::zero(horizon, 1, 1),
        );
        // x_2 + x_3 <= 3, plus a past-only row x_2 <= 1 that must be dropped.
        ag.hx = mat(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        ag.hu = DMatrix::zeros(2, 2);
        ag.h = DVector::from_column_slice(&[3.0, 1.0]);
        let net = NetworkSpec { agents: vec![ag], arcs: vec![], coupling: Default::default() };
        let states = vec![vec![
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 0.7),
        ]];
        let inputs = vec![vec![DVector::from_element(1, 0.7)]];
        let sub = truncate(&net, 1, &states, &inputs);
        assert_eq!(sub.agents[0].horizon, 1);
        assert_relative_eq!(sub.agents[0].x_init[0], 0.7, epsilon = 1e-12);
        assert_eq!(sub.agents[0].h.len(), 1);
        assert_relative_eq!(sub.agents[0].h[0], 3.0 - 0.7, epsilon = 1e-12);
        assert_relative_eq!(sub.agents[0].hx[(0, 0)], 1.0, epsilon = 1e-12);
    }
}
