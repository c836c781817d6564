//! Affine decision rules with information-structure causality masks, and the
//! Γ→Ψ translation between policies over primitive variables and policies
//! over belief trajectories.
//!
//! Stage and trajectory indices are 0-based in code; a source with lag L is
//! observable at stage `t` for trajectory indices `tau <= t - L`. The mask is
//! structural: forbidden blocks simply do not exist, so the compiled LP never
//! sees them.

use crate::model::{self, DesignConfig, Mode, NetworkSpec};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceKind {
    /// The agent's own disturbance trajectory ξ_i.
    OwnXi,
    /// Another agent's disturbance trajectory ξ_j (centralized / partially
    /// nested information).
    ForeignXi(usize),
    /// Neighbor j's belief trajectory ζ_j (committed-variable indices).
    Belief(usize),
    /// Neighbor j's primitive variable s_j (static, flexible mode).
    Auxiliary(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoSource {
    pub kind: SourceKind,
    /// Dimension of each trajectory index (a single entry for static sources).
    pub stage_dims: Vec<usize>,
    /// Stages of delay before an index becomes observable.
    pub lag: usize,
}

impl InfoSource {
    pub fn total_dim(&self) -> usize {
        self.stage_dims.iter().sum()
    }
}

/// One coefficient block: u at stage `t` reads source `source` at trajectory
/// index `tau` through `mat` (n_u × stage_dims[tau]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyBlock {
    pub t: usize,
    pub source: usize,
    pub tau: usize,
    pub mat: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffinePolicy {
    pub n_u: usize,
    pub horizon: usize,
    pub sources: Vec<InfoSource>,
    pub blocks: Vec<PolicyBlock>,
    /// γ_t, one per stage.
    pub constants: Vec<DVector<f64>>,
}

impl AffinePolicy {
    /// The fully masked zero policy: every causally legal block present, zero.
    pub fn zeros(n_u: usize, horizon: usize, sources: Vec<InfoSource>) -> Self {
        let mut blocks = Vec::new();
        for t in 0..horizon {
            for (si, src) in sources.iter().enumerate() {
                for tau in 0..observable_len(src, t) {
                    blocks.push(PolicyBlock {
                        t,
                        source: si,
                        tau,
                        mat: DMatrix::zeros(n_u, src.stage_dims[tau]),
                    });
                }
            }
        }
        AffinePolicy {
            n_u,
            horizon,
            sources,
            blocks,
            constants: vec![DVector::zeros(n_u); horizon],
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.mat.len()).sum::<usize>() + self.n_u * self.horizon
    }

    /// u_t for every stage; `realization[source][tau]` must cover each block.
    pub fn evaluate(&self, realization: &[Vec<DVector<f64>>]) -> Vec<DVector<f64>> {
        let mut u: Vec<DVector<f64>> = self.constants.clone();
        for b in &self.blocks {
            let val = &realization[b.source][b.tau];
            assert_eq!(
                val.len(),
                b.mat.ncols(),
                "realization for source {} index {} has wrong dimension",
                b.source,
                b.tau
            );
            u[b.t] += &b.mat * val;
        }
        u
    }

    pub fn block(&self, t: usize, source: usize, tau: usize) -> Option<&DMatrix<f64>> {
        self.blocks.iter().find(|b| b.t == t && b.source == source && b.tau == tau).map(|b| &b.mat)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}

/// Number of observable trajectory indices of `src` at 0-based stage `t`.
pub fn observable_len(src: &InfoSource, t: usize) -> usize {
    let horizon_cap = src.stage_dims.len();
    // tau (0-based) is observable iff tau <= t - lag.
    if t + 1 <= src.lag { 0 } else { (t + 1 - src.lag).min(horizon_cap) }
}

/// Deterministic block layout for agent `i` under the configured information
/// structure. For flexible mode, `s_dims[k]` gives dim(S_j) for the k-th arc
/// into `i` (ascending source id); ignored otherwise.
pub fn layout(net: &NetworkSpec, cfg: &DesignConfig, i: usize, s_dims: &[usize]) -> Vec<InfoSource> {
    let horizon = net.agents[i].horizon;
    let mut sources = Vec::new();
    let xi_of = |j: usize| InfoSource {
        kind: if j == i { SourceKind::OwnXi } else { SourceKind::ForeignXi(j) },
        stage_dims: vec![net.agents[j].n_xi(); horizon],
        lag: cfg.xi_lag,
    };
    match cfg.mode {
        Mode::Centralized => {
            for j in 0..net.agents.len() {
                sources.push(xi_of(j));
            }
        }
        Mode::PartiallyNested => {
            for j in model::precedent_set(net, i) {
                sources.push(xi_of(j));
            }
        }
        Mode::LocalRect | Mode::LocalFlexible => {
            sources.push(xi_of(i));
            let shift = cfg.coupling_shift(net);
            for (k, arc) in model::arcs_into(net, i).iter().enumerate() {
                if cfg.mode == Mode::LocalFlexible {
                    sources.push(InfoSource {
                        kind: SourceKind::Auxiliary(arc.src),
                        stage_dims: vec![s_dims[k]],
                        lag: cfg.belief_lag,
                    });
                } else {
                    sources.push(InfoSource {
                        kind: SourceKind::Belief(arc.src),
                        stage_dims: vec![model::committed_dim(net, cfg, arc); horizon],
                        lag: shift + cfg.belief_lag,
                    });
                }
            }
        }
    }
    sources
}

/// Per-arc forecast-set parameterization X = {Y s + z : s ∈ S}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ForecastSetParam {
    /// Per-coordinate intervals [z_k − y_k, z_k + y_k] over the committed
    /// trajectory; the primitive set is the unit box.
    Rect { y: DVector<f64>, z: DVector<f64> },
    /// General affine image of a primitive polyhedron S.
    Flexible { y_mat: DMatrix<f64>, z: DVector<f64>, s_set: crate::uncertainty::Polyhedron },
}

impl ForecastSetParam {
    /// ζ = R(s): the forward map.
    pub fn forward(&self, s: &DVector<f64>) -> DVector<f64> {
        match self {
            ForecastSetParam::Rect { y, z } => z + y.component_mul(s),
            ForecastSetParam::Flexible { y_mat, z, .. } => z + y_mat * s,
        }
    }

    pub fn committed_dim(&self) -> usize {
        match self {
            ForecastSetParam::Rect { z, .. } => z.len(),
            ForecastSetParam::Flexible { z, .. } => z.len(),
        }
    }
}

/// A coordinate dropped during translation because its scaling was zero: the
/// belief carries no information there, so the coefficient is folded away.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedCoordinate {
    pub neighbor: usize,
    pub coordinate: usize,
}

/// Belief-space translation: composes a policy over primitive variables s with
/// the inverse forecast map s = L(ζ), producing a policy over beliefs ζ with
/// Ψ(ξ, Y s + z) = Γ(ξ, s) for all s.
///
/// `params` maps each Belief/Auxiliary source's neighbor id to its forecast
/// parameters. Rect sources stay trajectory-shaped (y, z stacked over the
/// committed trajectory); Flexible sources become a stacked-belief source.
pub fn translate_gamma_to_psi(
    pol: &AffinePolicy,
    params: &std::collections::BTreeMap<usize, ForecastSetParam>,
) -> Result<(AffinePolicy, Vec<DroppedCoordinate>), String> {
    let mut dropped = Vec::new();
    let mut sources = pol.sources.clone();
    let mut blocks: Vec<PolicyBlock> = Vec::new();
    let mut constants = pol.constants.clone();

    // Precompute flexible pseudo-inverses and rewrite source descriptors.
    let mut pinv: std::collections::BTreeMap<usize, DMatrix<f64>> = Default::default();
    for (si, src) in pol.sources.iter().enumerate() {
        let j = match src.kind {
            SourceKind::Belief(j) | SourceKind::Auxiliary(j) => j,
            _ => continue,
        };
        let param = params
            .get(&j)
            .ok_or_else(|| format!("no forecast parameters for neighbor {j}"))?;
        match param {
            ForecastSetParam::Rect { y, z } => {
                if y.len() != src.total_dim() || z.len() != src.total_dim() {
                    return Err(format!("neighbor {j}: rect parameters do not match source dims"));
                }
            }
            ForecastSetParam::Flexible { y_mat, .. } => {
                let gram = y_mat.transpose() * y_mat;
                let inv = gram.clone().try_inverse().ok_or_else(|| {
                    format!("neighbor {j}: Y is rank deficient; translation undefined")
                })?;
                pinv.insert(si, inv * y_mat.transpose());
                // Ψ reads the stacked belief vector instead of s.
                sources[si] = InfoSource {
                    kind: SourceKind::Belief(j),
                    stage_dims: vec![param.committed_dim()],
                    lag: src.lag,
                };
            }
        }
    }

    for b in &pol.blocks {
        let src = &pol.sources[b.source];
        let j = match src.kind {
            SourceKind::Belief(j) | SourceKind::Auxiliary(j) => j,
            _ => {
                blocks.push(b.clone());
                continue;
            }
        };
        match &params[&j] {
            ForecastSetParam::Rect { y, z } => {
                // Coordinate k of this trajectory index: s_k = (ζ_k − z_k)/y_k.
                let offset: usize = src.stage_dims[..b.tau].iter().sum();
                let mut mat = DMatrix::zeros(pol.n_u, b.mat.ncols());
                for k in 0..b.mat.ncols() {
                    let yk = y[offset + k];
                    let zk = z[offset + k];
                    let col = b.mat.column(k).clone_owned();
                    if yk == 0.0 {
                        if col.amax() > 0.0 {
                            dropped.push(DroppedCoordinate { neighbor: j, coordinate: offset + k });
                        }
                        // ζ_k ≡ z_k is constant: nothing to read; fold s_k := 0.
                        continue;
                    }
                    mat.set_column(k, &(col.clone() / yk));
                    constants[b.t] -= col * (zk / yk);
                }
                blocks.push(PolicyBlock { t: b.t, source: b.source, tau: b.tau, mat });
            }
            ForecastSetParam::Flexible { z, .. } => {
                // s = Y⁺(ζ − z); Γ coefficient C becomes C·Y⁺ on the stacked ζ.
                let yp = &pinv[&b.source];
                let mat = &b.mat * yp;
                constants[b.t] -= &mat * z;
                blocks.push(PolicyBlock { t: b.t, source: b.source, tau: 0, mat });
            }
        }
    }

    Ok((AffinePolicy { n_u: pol.n_u, horizon: pol.horizon, sources, blocks, constants }, dropped))
}
