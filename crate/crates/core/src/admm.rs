//! Consensus ADMM over agent subproblems for the local designs.
//!
//! The shared variables are the contract parameters of every arc (half-widths
//! and centers for rectangular contracts, centers for flexible ones), stacked
//! arc-major into a global vector α. Each agent's chunk α̃_i covers the arcs
//! it touches, so chunks overlap and the global update is a *local* average:
//! α_g = mean over the agents whose chunk contains g of (β_{i,g} + γ_{i,g}/ρ).
//!
//! Each local update is an exact prox step: the agent's compiled robust LP
//! (its objective epigraph ℓ_i plus its own rows only) is solved with the
//! linear consensus correction and a diagonal ρ-quadratic on the contract
//! columns. The coordinator only ever sees (β_i, γ_i, α̃_i); agent data stays
//! inside [`AgentSubproblem`].

use crate::lp::{self, SolveOpts, Status};
use crate::model::{self, DesignConfig, Mode, NetworkSpec};
use crate::policy::AffinePolicy;
use crate::reformulate::{build, BuildError, BuildOptions, Compiled, Dec};
use nalgebra::DVector;

/// One contract block inside the global consensus vector.
#[derive(Debug, Clone)]
pub struct ConsensusEntry {
    pub dec: Dec,
    pub arc: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ConsensusLayout {
    pub entries: Vec<ConsensusEntry>,
    pub total: usize,
    /// Global indices per agent, ascending: the arcs incident to it.
    pub chunks: Vec<Vec<usize>>,
    pub rho: f64,
}

/// Stack the shared contract parameters of every arc; rectangular contracts
/// contribute [y; z] per arc, flexible ones just z.
pub fn consensus_layout(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    rho: f64,
) -> Result<ConsensusLayout, BuildError> {
    if !matches!(cfg.mode, Mode::LocalRect | Mode::LocalFlexible) {
        return Err(BuildError::Invalid(
            "consensus decomposition applies to the local modes only".into(),
        ));
    }
    let mut entries = Vec::new();
    let mut total = 0usize;
    for (a, arc) in net.arcs.iter().enumerate() {
        let dc = model::committed_dim(net, cfg, arc);
        if dc == 0 {
            continue;
        }
        let horizon = net.agents[arc.src].horizon;
        if cfg.mode == Mode::LocalRect {
            for tau in 0..horizon {
                entries.push(ConsensusEntry {
                    dec: Dec::YRect { arc: a, tau },
                    arc: a,
                    offset: total,
                    len: dc,
                });
                total += dc;
            }
        }
        for tau in 0..horizon {
            entries.push(ConsensusEntry {
                dec: Dec::ZContract { arc: a, tau },
                arc: a,
                offset: total,
                len: dc,
            });
            total += dc;
        }
    }
    let mut chunks = Vec::with_capacity(net.agents.len());
    for i in 0..net.agents.len() {
        let mut idx = Vec::new();
        for e in &entries {
            let arc = &net.arcs[e.arc];
            if arc.src == i || arc.dst == i {
                idx.extend(e.offset..e.offset + e.len);
            }
        }
        idx.sort_unstable();
        chunks.push(idx);
    }
    Ok(ConsensusLayout { entries, total, chunks, rho })
}

/// Exact prox on a cloned LP: minimize obj(x) + Σ_k γ_k x_{c_k} +
/// (ρ/2) Σ_k (x_{c_k} − α̃_k)², returning the chunk coordinates. Columns
/// marked `None` do not appear in the LP; their prox is the analytic
/// bound-respecting minimizer of the quadratic alone.
pub fn prox_step(
    lp_in: &lp::LinearProgram,
    cols: &[Option<usize>],
    lower: &[f64],
    gamma: &DVector<f64>,
    alpha_tilde: &DVector<f64>,
    rho: f64,
    solve: &SolveOpts,
) -> Result<DVector<f64>, BuildError> {
    assert_eq!(cols.len(), gamma.len());
    assert_eq!(cols.len(), alpha_tilde.len());
    let mut prog = lp_in.clone();
    let mut quad = vec![0.0; prog.num_cols()];
    for (k, c) in cols.iter().enumerate() {
        if let Some(col) = c {
            prog.objective[*col] += gamma[k] - rho * alpha_tilde[k];
            quad[*col] += rho;
        }
    }
    let mut beta = DVector::zeros(cols.len());
    let needs_solve = cols.iter().any(Option::is_some);
    let sol = if needs_solve {
        let sol = lp::solve_qp(&prog, &quad, solve);
        if sol.status != Status::Optimal {
            return Err(BuildError::Solve { phase: "local prox", status: sol.status });
        }
        Some(sol)
    } else {
        None
    };
    for (k, c) in cols.iter().enumerate() {
        beta[k] = match c {
            Some(col) => sol.as_ref().expect("solved above").primal[*col],
            None => (alpha_tilde[k] - gamma[k] / rho).max(lower[k]),
        };
    }
    Ok(beta)
}

/// One agent's compiled subproblem plus its view of the consensus vector.
pub struct AgentSubproblem {
    pub agent: usize,
    compiled: Compiled,
    /// Per chunk coordinate: the LP column carrying it, if any.
    cols: Vec<Option<usize>>,
    /// Per chunk coordinate: the variable's own lower bound (0 for widths).
    lower: Vec<f64>,
    chunk: Vec<usize>,
}

impl AgentSubproblem {
    pub fn new(
        net: &NetworkSpec,
        cfg: &DesignConfig,
        base: &BuildOptions,
        layout: &ConsensusLayout,
        agent: usize,
    ) -> Result<Self, BuildError> {
        let opts = BuildOptions { agents: Some(vec![agent]), ..base.clone() };
        let compiled = build(net, cfg, &opts)?;
        let chunk = layout.chunks[agent].clone();
        let mut cols = vec![None; chunk.len()];
        let mut lower = vec![f64::NEG_INFINITY; chunk.len()];
        for e in &layout.entries {
            let loc = compiled.block_cols(&e.dec);
            for k in 0..e.len {
                let g = e.offset + k;
                let Ok(pos) = chunk.binary_search(&g) else { continue };
                if let Some((start, len)) = loc {
                    assert_eq!(len, e.len, "contract block size disagrees with layout");
                    cols[pos] = Some(start + k);
                    lower[pos] = compiled.lp.lower[start + k];
                } else if matches!(e.dec, Dec::YRect { .. }) {
                    lower[pos] = 0.0;
                }
            }
        }
        Ok(AgentSubproblem { agent, compiled, cols, lower, chunk })
    }

    pub fn chunk(&self) -> &[usize] {
        &self.chunk
    }

    /// β_i ← argmin J_i(β) + γᵀβ + (ρ/2)‖β − α̃‖².
    pub fn prox(
        &self,
        gamma: &DVector<f64>,
        alpha_tilde: &DVector<f64>,
        rho: f64,
        solve: &SolveOpts,
    ) -> Result<DVector<f64>, BuildError> {
        prox_step(&self.compiled.lp, &self.cols, &self.lower, gamma, alpha_tilde, rho, solve)
    }

    /// J_i with the contract columns clamped to the consensus values
    /// (respecting their own bounds); infeasible clamps report +∞.
    pub fn value_at(
        &self,
        alpha_tilde: &DVector<f64>,
        solve: &SolveOpts,
    ) -> (f64, Option<lp::Solution>) {
        let mut prog = self.compiled.lp.clone();
        for (k, c) in self.cols.iter().enumerate() {
            if let Some(col) = c {
                let v = alpha_tilde[k].max(prog.lower[*col]);
                prog.lower[*col] = v;
                prog.upper[*col] = v;
            }
        }
        let sol = lp::solve(&prog, solve);
        match sol.status {
            Status::Optimal => (sol.objective, Some(sol)),
            _ => (f64::INFINITY, None),
        }
    }

    pub fn policy(&self, sol: &lp::Solution) -> AffinePolicy {
        self.compiled.policy(sol, self.agent)
    }
}

/// Local-averaging consensus update: α_g = mean over the chunks containing g
/// of (β_{i,g} + γ_{i,g}/ρ); the closed-form argmin of the augmented
/// Lagrangian in α.
pub fn global_update(
    betas: &[DVector<f64>],
    gammas: &[DVector<f64>],
    layout: &ConsensusLayout,
) -> DVector<f64> {
    let mut sum = DVector::zeros(layout.total);
    let mut count = vec![0usize; layout.total];
    for (i, chunk) in layout.chunks.iter().enumerate() {
        for (k, &g) in chunk.iter().enumerate() {
            sum[g] += betas[i][k] + gammas[i][k] / layout.rho;
            count[g] += 1;
        }
    }
    for g in 0..layout.total {
        if count[g] > 0 {
            sum[g] /= count[g] as f64;
        }
    }
    sum
}

#[derive(Debug, Clone)]
pub struct AdmmOptions {
    pub rho: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Local updates per iteration are independent; values > 1 run them on
    /// scoped threads (results are bitwise identical either way).
    pub threads: usize,
    pub solve: SolveOpts,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        AdmmOptions {
            rho: 0.1,
            tol: 1e-6,
            max_iters: 200,
            threads: 1,
            solve: SolveOpts::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterLog {
    pub iter: usize,
    pub objective: f64,
    pub primal_res: f64,
    pub dual_res: f64,
}

pub struct AdmmOutcome {
    pub converged: bool,
    pub iterations: usize,
    /// Σ_i J_i at the final consensus contracts.
    pub objective: f64,
    pub alpha: DVector<f64>,
    pub layout: ConsensusLayout,
    pub policies: Vec<AffinePolicy>,
    pub log: Vec<IterLog>,
}

fn gather(alpha: &DVector<f64>, chunk: &[usize]) -> DVector<f64> {
    DVector::from_fn(chunk.len(), |k, _| alpha[chunk[k]])
}

/// Run consensus ADMM on the local design. Everything initializes at zero;
/// stops when max(‖β − α̃‖_∞ over agents, ρ‖α⁺ − α‖_∞) ≤ tol.
pub fn run(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    base: &BuildOptions,
    opts: &AdmmOptions,
) -> Result<AdmmOutcome, BuildError> {
    let layout = consensus_layout(net, cfg, opts.rho)?;
    let m = net.agents.len();
    let mut subs = Vec::with_capacity(m);
    for i in 0..m {
        subs.push(AgentSubproblem::new(net, cfg, base, &layout, i)?);
    }
    let rho = opts.rho;
    let mut alpha = DVector::zeros(layout.total);
    let mut gammas: Vec<DVector<f64>> =
        layout.chunks.iter().map(|c| DVector::zeros(c.len())).collect();
    let mut betas: Vec<DVector<f64>> = gammas.clone();
    let mut log = Vec::new();
    let mut converged = false;
    let mut iters = 0;

    for iter in 1..=opts.max_iters {
        iters = iter;
        let tilde: Vec<DVector<f64>> =
            (0..m).map(|i| gather(&alpha, &layout.chunks[i])).collect();
        let results = run_local_updates(&subs, &gammas, &tilde, rho, opts);
        for (i, r) in results.into_iter().enumerate() {
            betas[i] = r?;
        }
        let alpha_new = global_update(&betas, &gammas, &layout);
        let mut primal: f64 = 0.0;
        for i in 0..m {
            let t = gather(&alpha_new, &layout.chunks[i]);
            let diff = &betas[i] - &t;
            primal = primal.max(diff.amax());
            gammas[i] += diff * rho;
        }
        let dual = rho * (&alpha_new - &alpha).amax();
        alpha = alpha_new;
        let objective: f64 = (0..m)
            .map(|i| subs[i].value_at(&gather(&alpha, &layout.chunks[i]), &opts.solve).0)
            .sum();
        log.push(IterLog { iter, objective, primal_res: primal, dual_res: dual });
        if primal.max(dual) <= opts.tol {
            converged = true;
            break;
        }
    }

    // Final clamped solves at consensus: objective certificate and policies.
    let mut objective = 0.0;
    let mut policies = Vec::with_capacity(m);
    for (i, sub) in subs.iter().enumerate() {
        let (v, sol) = sub.value_at(&gather(&alpha, &layout.chunks[i]), &opts.solve);
        let sol = sol.ok_or(BuildError::Solve {
            phase: "consensus evaluation",
            status: Status::Infeasible,
        })?;
        objective += v;
        policies.push(sub.policy(&sol));
    }
    Ok(AdmmOutcome { converged, iterations: iters, objective, alpha, layout, policies, log })
}

fn run_local_updates(
    subs: &[AgentSubproblem],
    gammas: &[DVector<f64>],
    tilde: &[DVector<f64>],
    rho: f64,
    opts: &AdmmOptions,
) -> Vec<Result<DVector<f64>, BuildError>> {
    let m = subs.len();
    if opts.threads <= 1 || m <= 1 {
        return (0..m).map(|i| subs[i].prox(&gammas[i], &tilde[i], rho, &opts.solve)).collect();
    }
    let mut results: Vec<Option<Result<DVector<f64>, BuildError>>> = (0..m).map(|_| None).collect();
    let threads = opts.threads.min(m);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        let chunk_size = m.div_ceil(threads);
        for (w, chunk) in results.chunks_mut(chunk_size).enumerate() {
            let lo = w * chunk_size;
            let solve = opts.solve;
            handles.push(scope.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    let i = lo + off;
                    *slot = Some(subs[i].prox(&gammas[i], &tilde[i], rho, &solve));
                }
            }));
        }
        for h in handles {
            h.join().expect("local update worker panicked");
        }
    });
    results.into_iter().map(|r| r.expect("all agents updated")).collect()
}
