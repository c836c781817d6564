//! Network, agent, and design-problem description, plus the graph-theoretic
//! structure derived from it (neighbors, precedent sets, topology class).
//!
//! Dynamics per agent (stage t = 1..T):
//!   x_{i,t+1} = A_{i,t} x_{i,t} + B_{i,t} c_{N_i, t-shift} + D_{i,t} u_{i,t} + E_{i,t} ξ_{i,t}
//! where c_j is neighbor j's *committed trajectory* — its post-transition
//! states or a row selection of its inputs, depending on
//! [`DesignConfig::committed_variable`] — and `shift` is the coupling timing
//! (see [`DesignConfig::coupling_shift`]). In the local information modes the
//! same B blocks multiply belief trajectories ζ instead of realized ones.

use crate::uncertainty::Polyhedron;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QNorm {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "inf")]
    Inf,
}

/// Positive-part inventory costs: Σ_t Σ_k hold_k [x_k]_+ + backlog_k [−x_k]_+.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosPartCost {
    pub hold: DVector<f64>,
    pub backlog: DVector<f64>,
}

/// Per-agent stage cost, summed over the horizon:
/// ‖Q_t x_{t+1}‖_q + ‖R_t u_t‖_q + linear_x_t · x_{t+1} + linear_u_t · u_t
/// plus optional positive-part terms on the post-transition state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Objective {
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub q_norm: QNorm,
    pub linear_x: Vec<DVector<f64>>,
    pub linear_u: Vec<DVector<f64>>,
    pub pos_part: Option<PosPartCost>,
}

impl Objective {
    /// No cost at all (useful for pure feasibility agents and tests).
    pub fn zero(horizon: usize, n_x: usize, n_u: usize) -> Self {
        Objective {
            q: vec![DMatrix::zeros(0, n_x); horizon],
            r: vec![DMatrix::zeros(0, n_u); horizon],
            q_norm: QNorm::Inf,
            linear_x: vec![DVector::zeros(n_x); horizon],
            linear_u: vec![DVector::zeros(n_u); horizon],
            pos_part: None,
        }
    }
}

/// One agent's data over the design horizon T.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: usize,
    pub horizon: usize,
    /// A_{i,t}, t = 1..T (index 0..T-1), each n_x × n_x.
    pub a: Vec<DMatrix<f64>>,
    /// B_{i,t}: n_x × Σ_{j ∈ N_i} (committed dim of j), blocks ordered by
    /// ascending neighbor id.
    pub b: Vec<DMatrix<f64>>,
    /// D_{i,t}: n_x × n_u.
    pub d: Vec<DMatrix<f64>>,
    /// E_{i,t}: n_x × n_ξ.
    pub e: Vec<DMatrix<f64>>,
    pub x_init: DVector<f64>,
    /// Operational constraints Hx · [x_2 … x_{T+1}] + Hu · [u_1 … u_T] ≤ h.
    pub hx: DMatrix<f64>,
    pub hu: DMatrix<f64>,
    pub h: DVector<f64>,
    pub objective: Objective,
    /// Ξ_i factored per stage; the full set is their Cartesian product.
    pub xi_stages: Vec<Polyhedron>,
}

impl AgentSpec {
    pub fn n_x(&self) -> usize {
        self.x_init.len()
    }
    pub fn n_u(&self) -> usize {
        self.d.first().map_or(0, |m| m.ncols())
    }
    pub fn n_xi(&self) -> usize {
        self.e.first().map_or(0, |m| m.ncols())
    }
    /// The full Ξ_i over the stacked trajectory.
    pub fn xi(&self) -> Polyhedron {
        Polyhedron::product(&self.xi_stages)
    }

    /// An agent with time-invariant matrices, box disturbances, and no
    /// operational constraints.
    pub fn time_invariant(
        id: usize,
        horizon: usize,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
        x_init: DVector<f64>,
        xi_stage: Polyhedron,
        objective: Objective,
    ) -> Self {
        let n_x = x_init.len();
        let n_u = d.ncols();
        AgentSpec {
            id,
            horizon,
            a: vec![a; horizon],
            b: vec![b; horizon],
            d: vec![d; horizon],
            e: vec![e; horizon],
            x_init,
            hx: DMatrix::zeros(0, n_x * horizon),
            hu: DMatrix::zeros(0, n_u * horizon),
            h: DVector::zeros(0),
            objective,
            xi_stages: vec![xi_stage; horizon],
        }
    }
}

/// Directed arc src → dst: src ∈ N_dst, i.e. src's committed trajectory enters
/// dst's dynamics. `input_rows` selects the committed rows of u_src when the
/// committed variable is the input (must be empty for state commitment).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Arc {
    pub src: usize,
    pub dst: usize,
    #[serde(default)]
    pub input_rows: Vec<usize>,
}

/// Coupling timing for state commitment: `Pre` couples x_{j,t} (the classic
/// recursion), `Post` couples x_{j,t+1} (concurrent coupling; requires an
/// acyclic network).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    #[default]
    Pre,
    Post,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub agents: Vec<AgentSpec>,
    pub arcs: Vec<Arc>,
    #[serde(default)]
    pub coupling: Coupling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Centralized,
    PartiallyNested,
    LocalRect,
    LocalFlexible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Committed {
    #[default]
    State,
    Input,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DesignConfig {
    pub mode: Mode,
    /// Stages of delay before ξ becomes observable (1 = strictly causal).
    #[serde(default = "default_xi_lag")]
    pub xi_lag: usize,
    /// Stages of delay before beliefs/commitments become observable
    /// (0 = causal; 1 for the delayed supply-chain variant).
    #[serde(default)]
    pub belief_lag: usize,
    #[serde(default)]
    pub committed_variable: Committed,
}

fn default_xi_lag() -> usize {
    1
}

impl DesignConfig {
    pub fn new(mode: Mode) -> Self {
        DesignConfig { mode, xi_lag: 1, belief_lag: 0, committed_variable: Committed::State }
    }

    /// Stage offset between a dynamics stage t and the committed-trajectory
    /// index it couples to: the term at stage t reads c_{j, t - shift}
    /// (indices < 1 resolve to known initial data).
    pub fn coupling_shift(&self, net: &NetworkSpec) -> usize {
        match self.committed_variable {
            Committed::State => match net.coupling {
                Coupling::Pre => 1,
                Coupling::Post => 0,
            },
            // Orders placed at stage t are consumed within stage t; an
            // observation delay (belief_lag) does not move the dynamics.
            Committed::Input => 0,
        }
    }
}

/// Committed dimension per stage carried by `arc` under `cfg`.
pub fn committed_dim(net: &NetworkSpec, cfg: &DesignConfig, arc: &Arc) -> usize {
    match cfg.committed_variable {
        Committed::State => net.agents[arc.src].n_x(),
        Committed::Input => arc.input_rows.len(),
    }
}

/// Sources of arcs into `i`, ascending (the order of B's column blocks).
pub fn neighbors(net: &NetworkSpec, i: usize) -> Vec<usize> {
    assert!(i < net.agents.len(), "unknown agent id {i}");
    let mut out: Vec<usize> =
        net.arcs.iter().filter(|a| a.dst == i).map(|a| a.src).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Arcs into `i`, ordered by ascending source id.
pub fn arcs_into<'a>(net: &'a NetworkSpec, i: usize) -> Vec<&'a Arc> {
    let mut out: Vec<&Arc> = net.arcs.iter().filter(|a| a.dst == i).collect();
    out.sort_by_key(|a| a.src);
    out
}

/// Arcs out of `i`, ordered by ascending destination id.
pub fn arcs_from<'a>(net: &'a NetworkSpec, i: usize) -> Vec<&'a Arc> {
    let mut out: Vec<&Arc> = net.arcs.iter().filter(|a| a.src == i).collect();
    out.sort_by_key(|a| a.dst);
    out
}

/// N̄_i: agent i plus all its graph ancestors (backward reachability).
pub fn precedent_set(net: &NetworkSpec, i: usize) -> BTreeSet<usize> {
    assert!(i < net.agents.len(), "unknown agent id {i}");
    let mut set = BTreeSet::new();
    let mut stack = vec![i];
    while let Some(v) = stack.pop() {
        if set.insert(v) {
            for a in &net.arcs {
                if a.dst == v {
                    stack.push(a.src);
                }
            }
        }
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    Arborescence,
    BipartiteDag,
    General,
}

/// True iff the arc relation has no directed cycle.
pub fn is_dag(net: &NetworkSpec) -> bool {
    let m = net.agents.len();
    let mut indeg = vec![0usize; m];
    for a in &net.arcs {
        indeg[a.dst] += 1;
    }
    let mut queue: Vec<usize> = (0..m).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = queue.pop() {
        seen += 1;
        for a in &net.arcs {
            if a.src == v {
                indeg[a.dst] -= 1;
                if indeg[a.dst] == 0 {
                    queue.push(a.dst);
                }
            }
        }
    }
    seen == m
}

pub fn classify_topology(net: &NetworkSpec) -> Topology {
    let m = net.agents.len();
    let mut indeg = vec![0usize; m];
    let mut outdeg = vec![0usize; m];
    for a in &net.arcs {
        indeg[a.dst] += 1;
        outdeg[a.src] += 1;
    }
    // Arborescence: unique root, every other node in-degree exactly 1,
    // acyclic, all nodes reachable from the root.
    let roots: Vec<usize> = (0..m).filter(|&v| indeg[v] == 0).collect();
    if roots.len() == 1 && (0..m).all(|v| v == roots[0] || indeg[v] == 1) && is_dag(net) {
        return Topology::Arborescence;
    }
    // Depth-1 DAG: no node has both incoming and outgoing arcs.
    if is_dag(net) && (0..m).all(|v| indeg[v] == 0 || outdeg[v] == 0) {
        return Topology::BipartiteDag;
    }
    Topology::General
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    /// Violates a modeling assumption but still compiles to a valid program.
    Warning,
    /// Structurally inconsistent data; compilation is refused.
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub agent: Option<usize>,
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match self.agent {
            Some(i) => write!(f, "{tag}: agent {i}, {}: {}", self.field, self.message),
            None => write!(f, "{tag}: {}: {}", self.field, self.message),
        }
    }
}

fn full_column_rank(m: &DMatrix<f64>) -> bool {
    if m.ncols() == 0 {
        return true;
    }
    if m.nrows() < m.ncols() {
        return false;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    max > 0.0 && sv.min() > 1e-8 * max
}

/// Checks every type invariant; returns one diagnostic per violation.
pub fn validate(net: &NetworkSpec, cfg: &DesignConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let m = net.agents.len();
    let diag = |agent, field: &str, message: String| Diagnostic {
        severity: Severity::Error,
        agent,
        field: field.to_string(),
        message,
    };
    let warn = |agent, field: &str, message: String| Diagnostic {
        severity: Severity::Warning,
        agent,
        field: field.to_string(),
        message,
    };

    for a in &net.arcs {
        if a.src >= m || a.dst >= m {
            out.push(diag(None, "arcs", format!("arc {}->{} references unknown agent", a.src, a.dst)));
            continue;
        }
        if a.src == a.dst {
            out.push(diag(None, "arcs", format!("self-arc on agent {}", a.src)));
        }
        match cfg.committed_variable {
            Committed::State => {
                if !a.input_rows.is_empty() {
                    out.push(diag(None, "arcs", format!(
                        "arc {}->{} selects input rows under state commitment",
                        a.src, a.dst
                    )));
                }
            }
            Committed::Input => {
                if a.input_rows.is_empty() {
                    out.push(diag(None, "arcs", format!(
                        "arc {}->{} commits inputs but selects no rows",
                        a.src, a.dst
                    )));
                }
                for &r in &a.input_rows {
                    if r >= net.agents[a.src].n_u() {
                        out.push(diag(Some(a.src), "arcs", format!(
                            "arc {}->{} selects input row {r} out of range",
                            a.src, a.dst
                        )));
                    }
                }
            }
        }
    }
    if net.arcs.iter().any(|a| a.src >= m || a.dst >= m) {
        return out;
    }

    if net.coupling == Coupling::Post
        && cfg.committed_variable == Committed::State
        && !is_dag(net)
    {
        out.push(diag(None, "coupling", "post-timing state coupling requires an acyclic network".into()));
    }

    for (idx, ag) in net.agents.iter().enumerate() {
        let t_h = ag.horizon;
        if ag.id != idx {
            out.push(diag(Some(idx), "id", format!("id {} does not match position {idx}", ag.id)));
        }
        let n_x = ag.n_x();
        let n_u = ag.n_u();
        let n_xi = ag.n_xi();
        for (name, mats, rows, cols) in [
            ("A", &ag.a, n_x, n_x),
            ("D", &ag.d, n_x, n_u),
            ("E", &ag.e, n_x, n_xi),
        ] {
            if mats.len() != t_h {
                out.push(diag(Some(idx), name, format!("{} stage matrices, expected {t_h}", mats.len())));
                continue;
            }
            for (t, mt) in mats.iter().enumerate() {
                if mt.nrows() != rows || mt.ncols() != cols {
                    out.push(diag(Some(idx), name, format!(
                        "stage {}: {}x{}, expected {rows}x{cols}",
                        t + 1, mt.nrows(), mt.ncols()
                    )));
                }
            }
        }
        let b_cols: usize =
            arcs_into(net, idx).iter().map(|a| committed_dim(net, cfg, a)).sum();
        if ag.b.len() != t_h {
            out.push(diag(Some(idx), "B", format!("{} stage matrices, expected {t_h}", ag.b.len())));
        } else {
            for (t, bt) in ag.b.iter().enumerate() {
                if bt.nrows() != n_x || bt.ncols() != b_cols {
                    out.push(diag(Some(idx), "B", format!(
                        "stage {}: {}x{}, expected {n_x}x{b_cols} (neighbor blocks)",
                        t + 1, bt.nrows(), bt.ncols()
                    )));
                }
            }
        }
        for (t, (dt, et)) in ag.d.iter().zip(&ag.e).enumerate() {
            if dt.ncols() > 0 && !full_column_rank(dt) {
                out.push(warn(Some(idx), "D", format!("stage {}: not of full column rank", t + 1)));
            }
            if et.ncols() > 0 && !full_column_rank(et) {
                out.push(warn(Some(idx), "E", format!("stage {}: not of full column rank", t + 1)));
            }
        }
        if ag.hx.nrows() != ag.h.len() || ag.hu.nrows() != ag.h.len() {
            out.push(diag(Some(idx), "constraints", format!(
                "Hx/{} Hu/{} rows vs h/{} entries",
                ag.hx.nrows(), ag.hu.nrows(), ag.h.len()
            )));
        }
        if ag.hx.ncols() != n_x * t_h {
            out.push(diag(Some(idx), "Hx", format!("{} columns, expected {}", ag.hx.ncols(), n_x * t_h)));
        }
        if ag.hu.ncols() != n_u * t_h {
            out.push(diag(Some(idx), "Hu", format!("{} columns, expected {}", ag.hu.ncols(), n_u * t_h)));
        }
        if ag.xi_stages.len() != t_h {
            out.push(diag(Some(idx), "Xi", format!("{} stage factors, expected {t_h}", ag.xi_stages.len())));
        }
        for (t, p) in ag.xi_stages.iter().enumerate() {
            if p.dim != n_xi {
                out.push(diag(Some(idx), "Xi", format!(
                    "stage {}: dimension {} but E has {} columns", t + 1, p.dim, n_xi
                )));
            } else if p.is_empty() {
                out.push(diag(Some(idx), "Xi", format!("stage {}: empty set", t + 1)));
            } else if !p.is_bounded() {
                out.push(diag(Some(idx), "Xi", format!("stage {}: unbounded set", t + 1)));
            }
        }
        let obj = &ag.objective;
        for (name, len) in [
            ("Q", obj.q.len()),
            ("R", obj.r.len()),
            ("linear_x", obj.linear_x.len()),
            ("linear_u", obj.linear_u.len()),
        ] {
            if len != t_h {
                out.push(diag(Some(idx), name, format!("{len} stage entries, expected {t_h}")));
            }
        }
        for (t, qt) in obj.q.iter().enumerate() {
            if qt.ncols() != n_x {
                out.push(diag(Some(idx), "Q", format!("stage {}: {} columns, expected {n_x}", t + 1, qt.ncols())));
            }
        }
        for (t, rt) in obj.r.iter().enumerate() {
            if rt.ncols() != n_u {
                out.push(diag(Some(idx), "R", format!("stage {}: {} columns, expected {n_u}", t + 1, rt.ncols())));
            }
        }
    }

    let horizon = net.agents.first().map_or(0, |a| a.horizon);
    if net.agents.iter().any(|a| a.horizon != horizon) {
        out.push(diag(None, "horizon", "agents disagree on the horizon".into()));
    }
    if cfg.xi_lag > horizon || cfg.belief_lag > horizon {
        out.push(diag(None, "lags", format!(
            "lags (xi {}, belief {}) must not exceed the horizon {horizon}",
            cfg.xi_lag, cfg.belief_lag
        )));
    }
    out
}

// ---------------------------------------------------------------------------
// Config file loading (matrices as row-major nested arrays).
// ---------------------------------------------------------------------------

mod file {
    use super::*;

    #[derive(Deserialize)]
    pub struct MatrixRows(pub Vec<Vec<f64>>);

    impl MatrixRows {
        pub fn to_mat(&self, what: &str) -> Result<DMatrix<f64>, String> {
            let rows = self.0.len();
            let cols = self.0.first().map_or(0, Vec::len);
            if self.0.iter().any(|r| r.len() != cols) {
                return Err(format!("{what}: ragged rows"));
            }
            Ok(DMatrix::from_fn(rows, cols, |i, j| self.0[i][j]))
        }
    }

    fn stages<T, U>(
        list: &[T],
        horizon: usize,
        what: &str,
        f: impl Fn(&T) -> Result<U, String>,
    ) -> Result<Vec<U>, String>
    where
        U: Clone,
    {
        if list.len() == 1 && horizon > 1 {
            let v = f(&list[0])?;
            return Ok(vec![v; horizon]);
        }
        if list.len() != horizon {
            return Err(format!("{what}: {} stage entries, expected {horizon} (or 1 to repeat)", list.len()));
        }
        list.iter().map(f).collect()
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct XiFile {
        pub lb: Option<Vec<f64>>,
        pub ub: Option<Vec<f64>>,
        pub w_mat: Option<MatrixRows>,
        pub w_vec: Option<Vec<f64>>,
    }

    impl XiFile {
        fn to_poly(&self) -> Result<Polyhedron, String> {
            match (&self.lb, &self.ub, &self.w_mat, &self.w_vec) {
                (Some(lb), Some(ub), None, None) => {
                    Polyhedron::box_set(lb, ub).map_err(|e| format!("xi: {e}"))
                }
                (None, None, Some(w), Some(v)) => Polyhedron::new(
                    w.to_mat("xi.w_mat")?,
                    DVector::from_column_slice(v),
                )
                .map_err(|e| format!("xi: {e}")),
                _ => Err("xi: give either lb/ub or w_mat/w_vec".into()),
            }
        }
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ObjectiveFile {
        #[serde(default)]
        pub q: Vec<MatrixRows>,
        #[serde(default)]
        pub r: Vec<MatrixRows>,
        #[serde(default = "default_norm")]
        pub q_norm: String,
        #[serde(default)]
        pub linear_x: Vec<Vec<f64>>,
        #[serde(default)]
        pub linear_u: Vec<Vec<f64>>,
        pub hold: Option<Vec<f64>>,
        pub backlog: Option<Vec<f64>>,
    }

    fn default_norm() -> String {
        "inf".into()
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct AgentFile {
        pub a: Vec<MatrixRows>,
        #[serde(default)]
        pub b: Vec<MatrixRows>,
        pub d: Vec<MatrixRows>,
        pub e: Vec<MatrixRows>,
        pub x_init: Vec<f64>,
        pub xi: Vec<XiFile>,
        pub hx: Option<MatrixRows>,
        pub hu: Option<MatrixRows>,
        #[serde(default)]
        pub h: Vec<f64>,
        pub objective: Option<ObjectiveFile>,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct NetworkFile {
        pub horizon: usize,
        pub mode: Mode,
        #[serde(default = "super::default_xi_lag")]
        pub xi_lag: usize,
        #[serde(default)]
        pub belief_lag: usize,
        #[serde(default)]
        pub committed_variable: Committed,
        #[serde(default)]
        pub coupling: Coupling,
        pub agents: Vec<AgentFile>,
        #[serde(default)]
        pub arcs: Vec<Arc>,
    }

    pub fn convert(nf: NetworkFile) -> Result<(NetworkSpec, DesignConfig), String> {
        let horizon = nf.horizon;
        let mut agents = Vec::with_capacity(nf.agents.len());
        for (id, af) in nf.agents.iter().enumerate() {
            let ctx = |f: &str| format!("agents[{id}].{f}");
            let a = stages(&af.a, horizon, &ctx("a"), |m| m.to_mat(&ctx("a")))?;
            let d = stages(&af.d, horizon, &ctx("d"), |m| m.to_mat(&ctx("d")))?;
            let e = stages(&af.e, horizon, &ctx("e"), |m| m.to_mat(&ctx("e")))?;
            let n_x = af.x_init.len();
            let b = if af.b.is_empty() {
                vec![DMatrix::zeros(n_x, 0); horizon]
            } else {
                stages(&af.b, horizon, &ctx("b"), |m| m.to_mat(&ctx("b")))?
            };
            let xi_stages = stages(&af.xi, horizon, &ctx("xi"), XiFile::to_poly)?;
            let n_u = d.first().map_or(0, |m| m.ncols());
            let objective = match &af.objective {
                None => Objective::zero(horizon, n_x, n_u),
                Some(of) => {
                    let q = if of.q.is_empty() {
                        vec![DMatrix::zeros(0, n_x); horizon]
                    } else {
                        stages(&of.q, horizon, &ctx("objective.q"), |m| m.to_mat("q"))?
                    };
                    let r = if of.r.is_empty() {
                        vec![DMatrix::zeros(0, n_u); horizon]
                    } else {
                        stages(&of.r, horizon, &ctx("objective.r"), |m| m.to_mat("r"))?
                    };
                    let linear_x = if of.linear_x.is_empty() {
                        vec![DVector::zeros(n_x); horizon]
                    } else {
                        stages(&of.linear_x, horizon, &ctx("objective.linear_x"), |v| {
                            Ok(DVector::from_column_slice(v))
                        })?
                    };
                    let linear_u = if of.linear_u.is_empty() {
                        vec![DVector::zeros(n_u); horizon]
                    } else {
                        stages(&of.linear_u, horizon, &ctx("objective.linear_u"), |v| {
                            Ok(DVector::from_column_slice(v))
                        })?
                    };
                    let q_norm = match of.q_norm.as_str() {
                        "1" => QNorm::One,
                        "inf" => QNorm::Inf,
                        other => return Err(format!("{}: unknown norm {other:?}", ctx("objective.q_norm"))),
                    };
                    let pos_part = match (&of.hold, &of.backlog) {
                        (None, None) => None,
                        (Some(hd), Some(bk)) => Some(PosPartCost {
                            hold: DVector::from_column_slice(hd),
                            backlog: DVector::from_column_slice(bk),
                        }),
                        _ => return Err(format!("{}: hold and backlog must come together", ctx("objective"))),
                    };
                    Objective { q, r, q_norm, linear_x, linear_u, pos_part }
                }
            };
            agents.push(AgentSpec {
                id,
                horizon,
                a,
                b,
                d,
                e,
                x_init: DVector::from_column_slice(&af.x_init),
                hx: match &af.hx {
                    Some(m) => m.to_mat(&ctx("hx"))?,
                    None => DMatrix::zeros(0, n_x * horizon),
                },
                hu: match &af.hu {
                    Some(m) => m.to_mat(&ctx("hu"))?,
                    None => DMatrix::zeros(0, n_u * horizon),
                },
                h: DVector::from_column_slice(&af.h),
                objective,
                xi_stages,
            });
        }
        let net = NetworkSpec { agents, arcs: nf.arcs, coupling: nf.coupling };
        let cfg = DesignConfig {
            mode: nf.mode,
            xi_lag: nf.xi_lag,
            belief_lag: nf.belief_lag,
            committed_variable: nf.committed_variable,
        };
        Ok((net, cfg))
    }
}

/// Loads a network + design config from a TOML or JSON file (by extension).
pub fn load_config(path: &std::path::Path) -> Result<(NetworkSpec, DesignConfig), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let nf: file::NetworkFile = match path.extension().and_then(|s| s.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?,
        _ => toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?,
    };
    let (net, cfg) = file::convert(nf)?;
    let errors: Vec<String> = validate(&net, &cfg)
        .iter()
        .filter(|d| d.severity == Severity::Error)
        .map(ToString::to_string)
        .collect();
    if errors.is_empty() {
        Ok((net, cfg))
    } else {
        Err(errors.join("; "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub_agent(id: usize, horizon: usize, n_x: usize, b_cols: usize) -> AgentSpec {
        AgentSpec::time_invariant(
            id,
            horizon,
            DMatrix::identity(n_x, n_x),
            DMatrix::zeros(n_x, b_cols),
            DMatrix::identity(n_x, n_x),
            DMatrix::identity(n_x, n_x),
            DVector::zeros(n_x),
            Polyhedron::unit_box(n_x, 1.0),
            Objective::zero(horizon, n_x, n_x),
        )
    }

    /// arcs as (src, dst); committed variable = state, pre-timing.
    fn net_from_arcs(m: usize, arcs: &[(usize, usize)]) -> NetworkSpec {
        let mut indeg = vec![0usize; m];
        for &(_, d) in arcs {
            indeg[d] += 1;
        }
        let agents = (0..m).map(|i| stub_agent(i, 2, 1, indeg[i])).collect();
        NetworkSpec {
            agents,
            arcs: arcs.iter().map(|&(src, dst)| Arc { src, dst, input_rows: vec![] }).collect(),
            coupling: Coupling::Pre,
        }
    }

    /// The running 5-agent example: N_2={1}, N_3={2,5}, N_4={3}.
    fn working_example() -> NetworkSpec {
        net_from_arcs(5, &[(0, 1), (1, 2), (4, 2), (2, 3)])
    }

    #[test]
    fn neighbors_match_hand_check() {
        let net = working_example();
        assert_eq!(neighbors(&net, 2), vec![1, 4]);
        assert_eq!(neighbors(&net, 0), Vec::<usize>::new());
        let arcless = net_from_arcs(3, &[]);
        assert_eq!(neighbors(&arcless, 1), Vec::<usize>::new());
    }

    #[test]
    fn precedent_sets_match_hand_check() {
        let net = working_example();
        assert_eq!(precedent_set(&net, 3), BTreeSet::from([0, 1, 2, 3, 4]));
        let arcless = net_from_arcs(3, &[]);
        assert_eq!(precedent_set(&arcless, 2), BTreeSet::from([2]));
        // depth-1 graph: sinks see exactly their parents and themselves
        let bip = net_from_arcs(5, &[(0, 3), (0, 4), (1, 4), (2, 4)]);
        assert_eq!(precedent_set(&bip, 4), BTreeSet::from([0, 1, 2, 4]));
    }

    #[test]
    fn topology_classification() {
        assert_eq!(classify_topology(&working_example()), Topology::General);
        let chain = net_from_arcs(3, &[(0, 1), (1, 2)]);
        assert_eq!(classify_topology(&chain), Topology::Arborescence);
        let bip = net_from_arcs(5, &[(0, 3), (0, 4), (1, 4), (2, 4)]);
        assert_eq!(classify_topology(&bip), Topology::BipartiteDag);
        let cyc = net_from_arcs(2, &[(0, 1), (1, 0)]);
        assert_eq!(classify_topology(&cyc), Topology::General);
    }

    #[test]
    fn validate_consistent_network_is_clean() {
        let net = working_example();
        let cfg = DesignConfig::new(Mode::Centralized);
        assert_eq!(validate(&net, &cfg), vec![]);
    }

    #[test]
    fn validate_flags_bad_b_and_rank() {
        let mut net = working_example();
        let cfg = DesignConfig::new(Mode::Centralized);
        net.agents[2].b = vec![DMatrix::zeros(1, 5); 2]; // N_3 = {2,5} needs 2 columns
        let diags = validate(&net, &cfg);
        assert!(diags.iter().any(|d| d.agent == Some(2) && d.field == "B"), "{diags:?}");

        let mut net = working_example();
        net.agents[0].e = vec![DMatrix::zeros(1, 1); 2];
        let diags = validate(&net, &cfg);
        assert!(diags.iter().any(|d| d.agent == Some(0) && d.field == "E"), "{diags:?}");
    }

    #[test]
    fn validate_flags_unbounded_xi_and_self_arc() {
        let cfg = DesignConfig::new(Mode::Centralized);
        let mut net = net_from_arcs(2, &[(0, 1)]);
        net.agents[0].xi_stages = vec![
            Polyhedron::new(DMatrix::from_row_slice(1, 1, &[1.0]), DVector::from_column_slice(&[0.0]))
                .unwrap();
            2
        ];
        let diags = validate(&net, &cfg);
        assert!(diags.iter().any(|d| d.field == "Xi" && d.message.contains("unbounded")), "{diags:?}");

        let mut net = net_from_arcs(2, &[(0, 1)]);
        net.arcs.push(Arc { src: 1, dst: 1, input_rows: vec![] });
        net.agents[1].b = vec![DMatrix::zeros(1, 2); 2];
        let diags = validate(&net, &cfg);
        assert!(diags.iter().any(|d| d.message.contains("self-arc")), "{diags:?}");
    }

    #[test]
    fn coupling_shift_conventions() {
        let mut net = net_from_arcs(2, &[(0, 1)]);
        let mut cfg = DesignConfig::new(Mode::LocalRect);
        assert_eq!(cfg.coupling_shift(&net), 1);
        net.coupling = Coupling::Post;
        assert_eq!(cfg.coupling_shift(&net), 0);
        cfg.committed_variable = Committed::Input;
        assert_eq!(cfg.coupling_shift(&net), 0);
        // An observation delay leaves the dynamics untouched for input commits.
        cfg.belief_lag = 1;
        assert_eq!(cfg.coupling_shift(&net), 0);
    }

    proptest::proptest! {
        #[test]
        fn precedent_contains_neighbors_and_is_transitive(
            arcs in proptest::collection::vec((0usize..6, 0usize..6), 0..12)
        ) {
            let arcs: Vec<(usize, usize)> = arcs.into_iter().filter(|(s, d)| s != d).collect();
            let net = net_from_arcs(6, &arcs);
            for i in 0..6 {
                let p = precedent_set(&net, i);
                proptest::prop_assert!(p.contains(&i));
                for j in neighbors(&net, i) {
                    proptest::prop_assert!(p.contains(&j));
                }
                for &j in &p {
                    for &k in &precedent_set(&net, j) {
                        proptest::prop_assert!(p.contains(&k));
                    }
                }
            }
            // monotone under arc addition
            let mut bigger = arcs.clone();
            bigger.push((0, 5));
            let net2 = net_from_arcs(6, &bigger);
            for i in 0..6 {
                let p1 = precedent_set(&net, i);
                let p2 = precedent_set(&net2, i);
                proptest::prop_assert!(p1.is_subset(&p2));
            }
        }

        #[test]
        fn classification_is_relabel_invariant(
            arcs in proptest::collection::vec((0usize..5, 0usize..5), 0..8),
            perm_seed in 0u64..1000,
        ) {
            use rand::prelude::*;
            let arcs: Vec<(usize, usize)> = arcs.into_iter().filter(|(s, d)| s != d).collect();
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let relabeled: Vec<(usize, usize)> =
                arcs.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
            let a = classify_topology(&net_from_arcs(5, &arcs));
            let b = classify_topology(&net_from_arcs(5, &relabeled));
            proptest::prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn config_file_round_trip() {
        let toml_text = r#"
horizon = 2
mode = "partially-nested"
xi_lag = 1

[[agents]]
a = [[[1.0]]]
d = [[[1.0]]]
e = [[[1.0]]]
x_init = [0.0]
[[agents.xi]]
lb = [-1.0]
ub = [1.0]

[[agents]]
a = [[[1.0]]]
b = [[[0.5]]]
d = [[[1.0]]]
e = [[[1.0]]]
x_init = [0.0]
[[agents.xi]]
lb = [-1.0]
ub = [1.0]
[agents.objective]
q = [[[1.0]]]
q_norm = "inf"

[[arcs]]
src = 0
dst = 1
"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.toml");
        std::fs::write(&path, toml_text).unwrap();
        let (net, cfg) = load_config(&path).unwrap();
        assert_eq!(net.agents.len(), 2);
        assert_eq!(cfg.mode, Mode::PartiallyNested);
        assert_eq!(neighbors(&net, 1), vec![0]);
        assert_eq!(net.agents[1].objective.q[0][(0, 0)], 1.0);
        // single-stage shorthand repeated over the horizon
        assert_eq!(net.agents[0].a.len(), 2);
    }
}
