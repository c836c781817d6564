//! Built-in scenario generators: the two-agent single-stage instance, the
//! cooperative energy hub, the quantity-flexibility supply chain, the working
//! and bipartite example graphs, and a random-network generator. CSV ingestion
//! turns prosumer measurements into hub data.

use crate::model::{
    AgentSpec, Arc, Committed, Coupling, DesignConfig, Mode, NetworkSpec, Objective,
    PosPartCost, QNorm,
};
use crate::uncertainty::Polyhedron;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario parameters: {0}")]
    Invalid(String),
    #[error("data ingestion failed: {0}")]
    Data(String),
}

fn mat(r: usize, c: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, data)
}

/// Counter-clockwise rotation by `theta` radians, for rotated rectangular
/// forecast sets.
pub fn rotation(theta: f64) -> DMatrix<f64> {
    mat(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
}

// ---------------------------------------------------------------------------
// Working example and illustrative instance
// ---------------------------------------------------------------------------

/// The five-agent coupling graph used throughout the exposition: arcs
/// 0→1, 1→2, 4→2, 2→3 with placeholder unit dynamics.
pub fn working_example() -> NetworkSpec {
    let horizon = 1;
    let agents = (0..5)
        .map(|i| {
            AgentSpec::time_invariant(
                i,
                horizon,
                DMatrix::identity(1, 1),
                DMatrix::from_element(1, arcs_into_count(i), 1.0),
                DMatrix::identity(1, 1),
                DMatrix::identity(1, 1),
                DVector::zeros(1),
                Polyhedron::unit_box(1, 1.0),
                Objective::zero(horizon, 1, 1),
            )
        })
        .collect();
    fn arcs_into_count(i: usize) -> usize {
        match i {
            1 | 3 => 1,
            2 => 2,
            _ => 0,
        }
    }
    NetworkSpec {
        agents,
        arcs: vec![
            Arc { src: 0, dst: 1, input_rows: vec![] },
            Arc { src: 1, dst: 2, input_rows: vec![] },
            Arc { src: 4, dst: 2, input_rows: vec![] },
            Arc { src: 2, dst: 3, input_rows: vec![] },
        ],
        coupling: Coupling::Pre,
    }
}

/// Two agents, one stage: agent 0's post-transition state is the commitment
/// read by agent 1 concurrently, both agents observe their own disturbance,
/// and the cost is c·x with box-bounded states.
pub fn illustrative() -> (NetworkSpec, DesignConfig) {
    let horizon = 1;
    let c = DVector::from_column_slice(&[1.0, -1.0]);
    let d = mat(2, 1, &[1.0, 0.8]);
    let e = mat(2, 2, &[1.0, -1.0, -1.0, 1.0]);
    let bound = 5.0;
    let hx = mat(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
    let h = DVector::from_element(4, bound);
    let obj = Objective {
        q: vec![DMatrix::zeros(0, 2)],
        r: vec![DMatrix::zeros(0, 1)],
        q_norm: QNorm::Inf,
        linear_x: vec![c],
        linear_u: vec![DVector::zeros(1)],
        pos_part: None,
    };
    let mut a0 = AgentSpec::time_invariant(
        0,
        horizon,
        DMatrix::zeros(2, 2),
        DMatrix::zeros(2, 0),
        d.clone(),
        e.clone(),
        DVector::zeros(2),
        Polyhedron::unit_box(2, 1.0),
        obj.clone(),
    );
    a0.hx = hx.clone();
    a0.hu = DMatrix::zeros(4, 1);
    a0.h = h.clone();
    let mut a1 = a0.clone();
    a1.id = 1;
    a1.b = vec![mat(2, 2, &[1.0, 0.0, 0.0, -2.0])];
    let net = NetworkSpec {
        agents: vec![a0, a1],
        arcs: vec![Arc { src: 0, dst: 1, input_rows: vec![] }],
        coupling: Coupling::Post,
    };
    let cfg = DesignConfig {
        mode: Mode::LocalRect,
        xi_lag: 0,
        belief_lag: 0,
        committed_variable: Committed::State,
    };
    (net, cfg)
}

// ---------------------------------------------------------------------------
// Energy hub
// ---------------------------------------------------------------------------

/// Average hourly electricity price, `t` in 1..=24.
pub fn hourly_price(t: f64) -> f64 {
    18.0 - t.tanh() + (t - 4.0).tanh() - 2.0 * (t - 6.0).tanh() + 4.0 * (t - 17.0).tanh()
        - 4.0 * (t - 24.0).tanh()
}

pub const HUB_HORIZON: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HubTopology {
    Serial,
    Complete,
}

#[derive(Debug, Clone)]
pub struct EnergyHubParams {
    pub m: usize,
    pub topology: HubTopology,
    /// Drop all sharing links (the decoupled baseline).
    pub decoupled: bool,
    /// Seed for the hourly price perturbations ε_t ∈ [−0.1, 0.1]; None keeps
    /// the average price.
    pub price_seed: Option<u64>,
    /// Override for the percentage deviation bound of demand and PV.
    pub deviation: Option<f64>,
    /// Scales synthetic PV output relative to demand (1.0 allows midday
    /// surplus; small values keep every prosumer in deficit).
    pub pv_scale: f64,
}

impl EnergyHubParams {
    pub fn new(m: usize, topology: HubTopology) -> Self {
        EnergyHubParams {
            m,
            topology,
            decoupled: false,
            price_seed: None,
            deviation: None,
            pv_scale: 1.0,
        }
    }
}

/// One prosumer's bi-hourly data: mean demand and PV energy per stage, the
/// percentage deviation bounds, and the battery capacity.
#[derive(Debug, Clone)]
pub struct ProsumerData {
    pub demand: Vec<f64>,
    pub pv: Vec<f64>,
    pub dev_demand: f64,
    pub dev_pv: f64,
    pub capacity: f64,
}

#[derive(Debug, Clone)]
pub enum HubData {
    /// Sinusoidal daily profiles with per-unit scales drawn from the seed.
    Synthetic { seed: u64 },
    /// One CSV per prosumer (`timestamp,load_kw,pv_kw`) with a `.capacity`
    /// sidecar; see the README for the schema.
    Csv { units: Vec<std::path::PathBuf> },
}

fn synthetic_prosumer(rng: &mut ChaCha8Rng, pv_scale: f64) -> ProsumerData {
    let base: f64 = rng.gen_range(1.5..3.5);
    let peak: f64 = base * pv_scale * rng.gen_range(0.8..1.6);
    let mut demand = Vec::with_capacity(HUB_HORIZON);
    let mut pv = Vec::with_capacity(HUB_HORIZON);
    for tau in 0..HUB_HORIZON {
        let mut d = 0.0;
        let mut r = 0.0;
        for h in [2 * tau, 2 * tau + 1] {
            let hour = h as f64;
            d += base * (1.0 + 0.35 * (std::f64::consts::TAU * (hour - 19.0) / 24.0).sin());
            let sun = (std::f64::consts::PI * (hour - 6.0) / 12.0).sin();
            r += peak * sun.max(0.0);
        }
        demand.push(d);
        pv.push(r);
    }
    ProsumerData {
        demand,
        pv,
        dev_demand: 0.25,
        dev_pv: 0.25,
        capacity: rng.gen_range(8.0..18.0),
    }
}

/// Read a prosumer CSV (`timestamp,load_kw,pv_kw`) plus its `.capacity`
/// sidecar, aggregating to bi-hourly means/deviations by hour-of-day.
pub fn read_prosumer_csv(path: &Path) -> Result<ProsumerData, ScenarioError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| ScenarioError::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| ScenarioError::Data(e.to_string()))?
        .clone();
    let expect = ["timestamp", "load_kw", "pv_kw"];
    if headers.iter().take(3).collect::<Vec<_>>() != expect {
        return Err(ScenarioError::Data(format!(
            "{}: header must be `timestamp,load_kw,pv_kw`",
            path.display()
        )));
    }
    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); HUB_HORIZON];
    let mut last_stamp = String::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ScenarioError::Data(e.to_string()))?;
        let stamp = rec.get(0).unwrap_or_default().to_string();
        if stamp < last_stamp {
            return Err(ScenarioError::Data(format!(
                "{}: timestamps must be nondecreasing",
                path.display()
            )));
        }
        let hour: usize = stamp
            .split(|c| c == ' ' || c == 'T')
            .nth(1)
            .and_then(|t| t.get(0..2))
            .and_then(|h| h.parse().ok())
            .ok_or_else(|| {
                ScenarioError::Data(format!("{}: bad timestamp `{stamp}`", path.display()))
            })?;
        let load: f64 = rec
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ScenarioError::Data(format!("{}: bad load value", path.display())))?;
        let pv: f64 = rec
            .get(2)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ScenarioError::Data(format!("{}: bad pv value", path.display())))?;
        if load < 0.0 || pv < 0.0 {
            return Err(ScenarioError::Data(format!(
                "{}: negative power reading",
                path.display()
            )));
        }
        buckets[(hour / 2).min(HUB_HORIZON - 1)].push((load, pv));
        last_stamp = stamp;
    }
    let mut demand = Vec::with_capacity(HUB_HORIZON);
    let mut pv = Vec::with_capacity(HUB_HORIZON);
    let (mut dev_d, mut dev_r): (f64, f64) = (0.0, 0.0);
    for b in &buckets {
        if b.is_empty() {
            return Err(ScenarioError::Data(format!(
                "{}: no samples for one of the 2-hour blocks",
                path.display()
            )));
        }
        let n = b.len() as f64;
        let (ml, mp) = b.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
        let (ml, mp) = (ml / n, mp / n);
        let (mut sl, mut sp) = (0.0, 0.0);
        for (l, p) in b {
            sl += (l - ml) * (l - ml);
            sp += (p - mp) * (p - mp);
        }
        let (sl, sp) = ((sl / n).sqrt(), (sp / n).sqrt());
        // Mean power over 2h × 2h = energy per stage.
        demand.push(ml * 2.0);
        pv.push(mp * 2.0);
        if ml > 1e-9 {
            dev_d = dev_d.max(sl / ml);
        }
        if mp > 1e-9 {
            dev_r = dev_r.max(sp / mp);
        }
    }
    let sidecar = path.with_extension("capacity");
    let capacity: f64 = std::fs::read_to_string(&sidecar)
        .map_err(|e| ScenarioError::Data(format!("{}: {e}", sidecar.display())))?
        .trim()
        .parse()
        .map_err(|_| ScenarioError::Data(format!("{}: bad capacity", sidecar.display())))?;
    if capacity <= 0.0 {
        return Err(ScenarioError::Data("capacity must be positive".into()));
    }
    Ok(ProsumerData { demand, pv, dev_demand: dev_d.min(1.0), dev_pv: dev_r.min(1.0), capacity })
}

fn hub_neighbors(m: usize, topology: HubTopology, decoupled: bool) -> Vec<Vec<usize>> {
    if decoupled {
        return vec![Vec::new(); m];
    }
    (0..m)
        .map(|i| match topology {
            HubTopology::Serial => {
                let mut n = Vec::new();
                if i > 0 {
                    n.push(i - 1);
                }
                if i + 1 < m {
                    n.push(i + 1);
                }
                n
            }
            HubTopology::Complete => (0..m).filter(|&j| j != i).collect(),
        })
        .collect()
}

/// The cooperative energy-management hub: battery states, grid trades, and
/// shared-electricity commitments as interval contracts on the sharing inputs.
pub fn energy_hub(
    params: &EnergyHubParams,
    data: &HubData,
) -> Result<(NetworkSpec, DesignConfig), ScenarioError> {
    if params.m < 2 && !params.decoupled {
        return Err(ScenarioError::Invalid("an energy hub needs at least 2 prosumers".into()));
    }
    let units: Vec<ProsumerData> = match data {
        HubData::Synthetic { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..params.m).map(|_| synthetic_prosumer(&mut rng, params.pv_scale)).collect()
        }
        HubData::Csv { units } => {
            if units.len() < params.m {
                return Err(ScenarioError::Invalid(format!(
                    "{} prosumers requested but only {} data units given",
                    params.m,
                    units.len()
                )));
            }
            units[..params.m]
                .iter()
                .map(|p| read_prosumer_csv(p))
                .collect::<Result<_, _>>()?
        }
    };

    // Bi-hourly prices: perturb hourly, then average each 2-hour block.
    let mut eps = vec![0.0; 24];
    if let Some(seed) = params.price_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &mut eps {
            *e = rng.gen_range(-0.1..0.1);
        }
    }
    let plus: Vec<f64> = (0..HUB_HORIZON)
        .map(|tau| {
            let a = (1.0 + eps[2 * tau]) * hourly_price(2.0 * tau as f64 + 1.0);
            let b = (1.0 + eps[2 * tau + 1]) * hourly_price(2.0 * tau as f64 + 2.0);
            (a + b) / 2.0
        })
        .collect();

    let neighbors = hub_neighbors(params.m, params.topology, params.decoupled);
    let horizon = HUB_HORIZON;
    let mut agents = Vec::with_capacity(params.m);
    let mut arcs = Vec::new();
    for (i, unit) in units.iter().enumerate() {
        let deg = neighbors[i].len();
        let n_u = 2 + deg;
        let dev_d = params.deviation.unwrap_or(unit.dev_demand);
        let dev_r = params.deviation.unwrap_or(unit.dev_pv);
        // State = [battery charge, 1]; the constant carries R_t − D_t.
        let mut a_t = Vec::with_capacity(horizon);
        let mut e_t = Vec::with_capacity(horizon);
        let mut xi_t = Vec::with_capacity(horizon);
        for tau in 0..horizon {
            a_t.push(mat(2, 2, &[1.0, unit.pv[tau] - unit.demand[tau], 0.0, 1.0]));
            e_t.push(mat(2, 2, &[-unit.demand[tau], unit.pv[tau], 0.0, 0.0]));
            xi_t.push(
                Polyhedron::box_set(&[-dev_d, -dev_r], &[dev_d, dev_r])
                    .expect("deviation box is well formed"),
            );
        }
        let mut d_row = vec![1.0, -1.0];
        d_row.extend(std::iter::repeat(1.0).take(deg));
        let mut d_mat = DMatrix::zeros(2, n_u);
        for (c, v) in d_row.iter().enumerate() {
            d_mat[(0, c)] = *v;
        }
        // In-arc from each neighbor j: j's draw U_{j,i} leaves this battery.
        let b_mat = {
            let mut b = DMatrix::zeros(2, deg);
            for c in 0..deg {
                b[(0, c)] = -1.0;
            }
            b
        };
        // 0 <= I <= B_i at every stage; all inputs nonnegative.
        let rows = 2 * horizon + horizon * n_u;
        let mut hx = DMatrix::zeros(rows, 2 * horizon);
        let mut hu = DMatrix::zeros(rows, n_u * horizon);
        let mut h = DVector::zeros(rows);
        for tau in 0..horizon {
            hx[(2 * tau, 2 * tau)] = 1.0;
            h[2 * tau] = unit.capacity;
            hx[(2 * tau + 1, 2 * tau)] = -1.0;
            for k in 0..n_u {
                hu[(2 * horizon + tau * n_u + k, tau * n_u + k)] = -1.0;
            }
        }
        let linear_u: Vec<DVector<f64>> = (0..horizon)
            .map(|tau| {
                let mut c = vec![plus[tau], 0.5 * plus[tau]];
                c.extend(std::iter::repeat(0.2 * plus[tau]).take(deg));
                DVector::from_column_slice(&c)
            })
            .collect();
        agents.push(AgentSpec {
            id: i,
            horizon,
            a: a_t,
            b: vec![b_mat; horizon],
            d: vec![d_mat; horizon],
            e: e_t,
            x_init: DVector::from_column_slice(&[0.0, 1.0]),
            hx,
            hu,
            h,
            objective: Objective {
                q: vec![DMatrix::zeros(0, 2); horizon],
                r: vec![DMatrix::zeros(0, n_u); horizon],
                q_norm: QNorm::Inf,
                linear_x: vec![DVector::zeros(2); horizon],
                linear_u,
                pos_part: None,
            },
            xi_stages: xi_t,
        });
        for (rank, &j) in neighbors[i].iter().enumerate() {
            // Agent i commits its draw U_{i,j} to neighbor j.
            arcs.push(Arc { src: i, dst: j, input_rows: vec![2 + rank] });
        }
    }
    let net = NetworkSpec { agents, arcs, coupling: Coupling::Pre };
    let cfg = DesignConfig {
        mode: Mode::LocalRect,
        xi_lag: 1,
        belief_lag: 0,
        committed_variable: Committed::Input,
    };
    Ok((net, cfg))
}

// ---------------------------------------------------------------------------
// Supply chain
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SupplyChainParams {
    /// Manufacturers between the supplier and the retailer.
    pub intermediates: usize,
    pub products: usize,
    pub horizon: usize,
    /// Demand-factor uncertainty level θ.
    pub theta: f64,
    /// Width of the production-loss band [−prod_band, 0].
    pub prod_band: f64,
    /// One-stage commitment observation delay.
    pub delay: bool,
    /// None keeps the fixed coefficients F_p^k = (−1)^k/2, c_B = c_H = 1,
    /// B_i = 1; a seed randomizes them over the stated ranges.
    pub seed: Option<u64>,
}

impl SupplyChainParams {
    pub fn new(intermediates: usize, products: usize, horizon: usize, theta: f64) -> Self {
        SupplyChainParams {
            intermediates,
            products,
            horizon,
            theta,
            prod_band: 0.1,
            delay: false,
            seed: None,
        }
    }
}

pub const SUPPLY_FACTORS: usize = 4;

/// Serial quantity-flexibility chain: supplier ← manufacturers ← retailer.
/// Each downstream agent commits its order trajectory to its upstream
/// neighbor; the retailer faces factor-model market demand.
pub fn supply_chain(
    params: &SupplyChainParams,
) -> Result<(NetworkSpec, DesignConfig), ScenarioError> {
    let p = params.products;
    let t_len = params.horizon;
    let k = SUPPLY_FACTORS;
    if p == 0 || t_len < 2 {
        return Err(ScenarioError::Invalid(
            "need at least one product and a horizon of two stages".into(),
        ));
    }
    if params.theta < 0.0 || params.prod_band < 0.0 {
        return Err(ScenarioError::Invalid("uncertainty levels must be nonnegative".into()));
    }
    let m = params.intermediates + 2;
    let mut rng = params.seed.map(ChaCha8Rng::seed_from_u64);
    let mut draw = |lo: f64, hi: f64, fixed: f64| match rng.as_mut() {
        Some(r) => r.gen_range(lo..hi),
        None => fixed,
    };
    // F[p][k]: factor loadings; fixed instance alternates ±1/2 over k.
    let f_load: Vec<Vec<f64>> = (0..p)
        .map(|_| {
            (0..k)
                .map(|kk| draw(-1.0, 1.0, if (kk + 1) % 2 == 0 { 0.5 } else { -0.5 }))
                .collect()
        })
        .collect();
    let c_h = draw(0.0, 1.0, 1.0);
    let c_b = draw(0.0, 1.0, 1.0);
    let blend: Vec<Vec<f64>> =
        (0..m).map(|_| (0..p).map(|_| draw(0.5, 1.0, 1.0)).collect()).collect();

    let mut agents = Vec::with_capacity(m);
    for i in 0..m {
        let retailer = i == m - 1;
        let n_x = if retailer { p + 1 } else { p };
        let n_xi = if retailer { p + k } else { p };
        let mut a_t = Vec::with_capacity(t_len);
        let mut e_t = Vec::with_capacity(t_len);
        for t0 in 0..t_len {
            let mut a = DMatrix::identity(n_x, n_x);
            let mut e = DMatrix::zeros(n_x, n_xi);
            for pp in 0..p {
                e[(pp, pp)] = 1.0;
            }
            if retailer {
                let t = (t0 + 1) as f64;
                let phase = std::f64::consts::TAU * t / (t_len as f64 - 1.0);
                for pp in 0..p {
                    // Deterministic demand rides on the constant coordinate.
                    let season = if (pp + 1) % 2 == 0 { phase.sin() } else { phase.cos() };
                    a[(pp, p)] = -(2.0 + season);
                    for kk in 0..k {
                        e[(pp, p + kk)] = -f_load[pp][kk] / k as f64;
                    }
                }
            }
            a_t.push(a);
            e_t.push(e);
        }
        let mut d_mat = DMatrix::zeros(n_x, p);
        for pp in 0..p {
            d_mat[(pp, pp)] = blend[i][pp];
        }
        let b_mat = if i == m - 1 {
            DMatrix::zeros(n_x, 0)
        } else {
            let mut b = DMatrix::zeros(n_x, p);
            for pp in 0..p {
                b[(pp, pp)] = -1.0;
            }
            b
        };
        let xi_stage = if retailer {
            let mut lb = vec![-params.prod_band; p];
            let mut ub = vec![0.0; p];
            lb.extend(std::iter::repeat(-params.theta).take(k));
            ub.extend(std::iter::repeat(params.theta).take(k));
            Polyhedron::box_set(&lb, &ub).expect("demand box is well formed")
        } else {
            Polyhedron::box_set(&vec![-params.prod_band; p], &vec![0.0; p])
                .expect("production box is well formed")
        };
        let mut x_init = DVector::zeros(n_x);
        let mut hold = DVector::from_element(n_x, c_h);
        let mut backlog = DVector::from_element(n_x, c_b);
        if retailer {
            x_init[p] = 1.0;
            hold[p] = 0.0;
            backlog[p] = 0.0;
        }
        agents.push(AgentSpec {
            id: i,
            horizon: t_len,
            a: a_t,
            b: vec![b_mat; t_len],
            d: vec![d_mat; t_len],
            e: e_t,
            x_init,
            hx: DMatrix::zeros(0, n_x * t_len),
            hu: DMatrix::zeros(0, p * t_len),
            h: DVector::zeros(0),
            objective: Objective {
                q: vec![DMatrix::zeros(0, n_x); t_len],
                r: vec![DMatrix::zeros(0, p); t_len],
                q_norm: QNorm::Inf,
                linear_x: vec![DVector::zeros(n_x); t_len],
                linear_u: vec![DVector::zeros(p); t_len],
                pos_part: Some(PosPartCost { hold, backlog }),
            },
            xi_stages: vec![xi_stage; t_len],
        });
    }
    // Each agent i+1 commits its order U_{i+1} to its upstream neighbor i.
    let arcs = (0..m - 1)
        .map(|i| Arc { src: i + 1, dst: i, input_rows: (0..p).collect() })
        .collect();
    let net = NetworkSpec { agents, arcs, coupling: Coupling::Pre };
    let cfg = DesignConfig {
        mode: Mode::LocalRect,
        xi_lag: 1,
        belief_lag: usize::from(params.delay),
        committed_variable: Committed::Input,
    };
    Ok((net, cfg))
}

// ---------------------------------------------------------------------------
// Random generators
// ---------------------------------------------------------------------------

/// Random scalar-agent network with an acyclic coupling graph, box
/// disturbances, and max-norm state costs; paired with the default
/// state-commitment configuration.
pub fn random_network(m: usize, horizon: usize, seed: u64) -> (NetworkSpec, DesignConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arcs = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if rng.gen_bool(0.4) {
                arcs.push(Arc { src: i, dst: j, input_rows: vec![] });
            }
        }
    }
    let mut agents = Vec::with_capacity(m);
    for i in 0..m {
        let deg = arcs.iter().filter(|a| a.dst == i).count();
        let b = DMatrix::from_fn(1, deg, |_, _| rng.gen_range(-1.0..1.0));
        agents.push(AgentSpec::time_invariant(
            i,
            horizon,
            mat(1, 1, &[rng.gen_range(-0.8..0.8)]),
            b,
            mat(1, 1, &[1.0]),
            mat(1, 1, &[rng.gen_range(0.3..1.0)]),
            DVector::from_element(1, rng.gen_range(-1.0..1.0)),
            Polyhedron::unit_box(1, 1.0),
            Objective {
                q: vec![DMatrix::identity(1, 1); horizon],
                r: vec![DMatrix::from_element(1, 1, 0.1); horizon],
                q_norm: QNorm::Inf,
                linear_x: vec![DVector::zeros(1); horizon],
                linear_u: vec![DVector::zeros(1); horizon],
                pos_part: None,
            },
        ));
    }
    (
        NetworkSpec { agents, arcs, coupling: Coupling::Pre },
        DesignConfig::new(Mode::LocalRect),
    )
}

/// Random depth-1 bipartite DAG (sources commit concurrently to sinks) with
/// one-dimensional primitive sets per arc, sized so the flexible design has
/// full degrees of freedom.
pub fn bipartite_example(
    n_src: usize,
    n_dst: usize,
    seed: u64,
) -> (NetworkSpec, DesignConfig, BTreeMap<usize, Polyhedron>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = n_src + n_dst;
    let horizon = 1;
    let mut arcs = Vec::new();
    for d in 0..n_dst {
        let dst = n_src + d;
        // At least one upstream source each, more with probability 1/2.
        let first = rng.gen_range(0..n_src);
        arcs.push(Arc { src: first, dst, input_rows: vec![] });
        for s in 0..n_src {
            if s != first && rng.gen_bool(0.5) {
                arcs.push(Arc { src: s, dst, input_rows: vec![] });
            }
        }
    }
    let mut agents = Vec::with_capacity(m);
    for i in 0..m {
        let deg = arcs.iter().filter(|a| a.dst == i).count();
        let b = DMatrix::from_fn(1, deg, |_, _| rng.gen_range(-1.0..1.0));
        agents.push(AgentSpec::time_invariant(
            i,
            horizon,
            mat(1, 1, &[rng.gen_range(-0.5..0.5)]),
            b,
            mat(1, 1, &[1.0]),
            mat(1, 1, &[rng.gen_range(0.5..1.5)]),
            DVector::from_element(1, rng.gen_range(-0.5..0.5)),
            Polyhedron::unit_box(1, 1.0),
            Objective {
                q: vec![DMatrix::identity(1, 1)],
                r: vec![DMatrix::from_element(1, 1, 0.2)],
                q_norm: QNorm::Inf,
                linear_x: vec![DVector::zeros(1)],
                linear_u: vec![DVector::zeros(1)],
                pos_part: None,
            },
        ));
    }
    let s_sets: BTreeMap<usize, Polyhedron> =
        (0..arcs.len()).map(|a| (a, Polyhedron::unit_box(1, 1.0))).collect();
    let net = NetworkSpec { agents, arcs, coupling: Coupling::Post };
    let cfg = DesignConfig {
        mode: Mode::LocalFlexible,
        xi_lag: 0,
        belief_lag: 0,
        committed_variable: Committed::State,
    };
    (net, cfg, s_sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::SolveOpts;
    use crate::model;
    use crate::reformulate::{build, BuildOptions};

    fn no_errors(net: &NetworkSpec, cfg: &DesignConfig) -> bool {
        model::validate(net, cfg).iter().all(|d| d.severity != model::Severity::Error)
    }

    fn solve_mode(net: &NetworkSpec, cfg: &DesignConfig, mode: Mode) -> f64 {
        let cfg = DesignConfig { mode, ..*cfg };
        let compiled = build(net, &cfg, &BuildOptions::default()).expect("build");
        compiled.solve(&SolveOpts::default()).expect("solve").objective
    }

    #[test]
    fn hourly_price_matches_the_direct_formula() {
        let expect = 18.0 - (12.0_f64).tanh() + (8.0_f64).tanh() - 2.0 * (6.0_f64).tanh()
            + 4.0 * (-5.0_f64).tanh()
            - 4.0 * (-12.0_f64).tanh();
        assert!((hourly_price(12.0) - expect).abs() < 1e-12);
        // Morning power is cheaper than the evening peak.
        assert!(hourly_price(4.0) < hourly_price(20.0));
    }

    #[test]
    fn working_example_matches_the_reference_graph() {
        let net = working_example();
        assert!(no_errors(&net, &DesignConfig::new(Mode::Centralized)));
        let into: Vec<usize> = model::arcs_into(&net, 2).iter().map(|a| a.src).collect();
        assert_eq!(into, vec![1, 4]);
        let prec: Vec<usize> = model::precedent_set(&net, 1).into_iter().collect();
        assert_eq!(prec, vec![0, 1]);
        assert_eq!(model::classify_topology(&net), model::Topology::General);
    }

    #[test]
    fn illustrative_orderings_hold_across_modes() {
        let (net, cfg) = illustrative();
        let central = solve_mode(&net, &cfg, Mode::Centralized);
        let pn = solve_mode(&net, &cfg, Mode::PartiallyNested);
        let rect = solve_mode(&net, &cfg, Mode::LocalRect);
        assert!(pn >= central - 1e-7, "pn {pn} vs central {central}");
        assert!(rect >= pn - 1e-7, "rect {rect} vs pn {pn}");
    }

    #[test]
    fn serial_hub_wires_bidirectional_neighbor_links() {
        let params = EnergyHubParams::new(4, HubTopology::Serial);
        let (net, cfg) = energy_hub(&params, &HubData::Synthetic { seed: 7 }).unwrap();
        let mut pairs: Vec<(usize, usize)> = net.arcs.iter().map(|a| (a.src, a.dst)).collect();
        pairs.sort_unstable();
        assert_eq!(pairs, vec![(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)]);
        assert!(no_errors(&net, &cfg));
        assert_eq!(net.agents[0].n_u(), 3);
        assert_eq!(net.agents[1].n_u(), 4);
    }

    #[test]
    fn zero_deviation_hub_leaves_no_information_gap() {
        let mut params = EnergyHubParams::new(2, HubTopology::Serial);
        params.deviation = Some(0.0);
        params.pv_scale = 0.2;
        let data = HubData::Synthetic { seed: 3 };
        let (net, cfg) = energy_hub(&params, &data).unwrap();
        let central = solve_mode(&net, &cfg, Mode::Centralized);
        let local = solve_mode(&net, &cfg, Mode::LocalRect);
        params.decoupled = true;
        let (dnet, dcfg) = energy_hub(&params, &data).unwrap();
        let dec = solve_mode(&dnet, &dcfg, Mode::Centralized);
        let scale = central.abs().max(1.0);
        // Without uncertainty, restricting information costs nothing; dropping
        // the sharing links still does (neighbor batteries extend storage).
        assert!((local - central).abs() / scale < 1e-5, "local {local} central {central}");
        assert!(dec >= central - 1e-6 * scale, "decoupled {dec} central {central}");
    }

    #[test]
    fn csv_ingestion_recovers_block_means_and_capacity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unit0.csv");
        let mut w = String::from("timestamp,load_kw,pv_kw\n");
        for day in 1..=2 {
            for h in 0..24 {
                // Alternating 2/3 kW load: block mean 2.5 kW, deviation 20%.
                let load = 2.0 + (h % 2) as f64;
                w.push_str(&format!("2026-07-{day:02} {h:02}:00,{load},1.0\n"));
            }
        }
        std::fs::write(&path, w).unwrap();
        std::fs::write(path.with_extension("capacity"), "9.5\n").unwrap();
        let unit = read_prosumer_csv(&path).unwrap();
        assert_eq!(unit.capacity, 9.5);
        for tau in 0..HUB_HORIZON {
            assert!((unit.demand[tau] - 5.0).abs() < 1e-9);
            assert!((unit.pv[tau] - 2.0).abs() < 1e-9);
        }
        assert!((unit.dev_demand - 0.2).abs() < 1e-9);
        assert!(unit.dev_pv.abs() < 1e-9);
    }

    #[test]
    fn retailer_demand_follows_the_seasonal_formula() {
        let p = SupplyChainParams::new(1, 2, 5, 0.5);
        let (net, _) = supply_chain(&p).unwrap();
        let retailer = &net.agents[2];
        for t0 in 0..5 {
            let phase = std::f64::consts::TAU * (t0 + 1) as f64 / 4.0;
            assert!((retailer.a[t0][(0, 2)] + 2.0 + phase.cos()).abs() < 1e-12);
            assert!((retailer.a[t0][(1, 2)] + 2.0 + phase.sin()).abs() < 1e-12);
            assert!((retailer.e[t0][(0, 2)] - 0.125).abs() < 1e-12);
            assert!((retailer.e[t0][(0, 3)] + 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_supply_chain_has_no_information_gap() {
        let mut p = SupplyChainParams::new(1, 1, 3, 0.0);
        p.prod_band = 0.0;
        let (net, cfg) = supply_chain(&p).unwrap();
        assert!(no_errors(&net, &cfg));
        let central = solve_mode(&net, &cfg, Mode::Centralized);
        let local = solve_mode(&net, &cfg, Mode::LocalRect);
        assert!(
            (local - central).abs() <= 1e-6 * central.abs().max(1.0),
            "local {local} central {central}"
        );
    }

    #[test]
    fn single_stage_supply_chains_are_rejected() {
        assert!(supply_chain(&SupplyChainParams::new(1, 1, 1, 0.5)).is_err());
    }

    #[test]
    fn bipartite_instances_classify_as_depth_one_dags() {
        for seed in 0..5 {
            let (net, cfg, s_sets) = bipartite_example(2, 2, seed);
            assert_eq!(model::classify_topology(&net), model::Topology::BipartiteDag);
            assert!(no_errors(&net, &cfg));
            assert_eq!(s_sets.len(), net.arcs.len());
        }
    }

    #[test]
    fn random_networks_validate_under_every_mode() {
        for seed in 0..5 {
            let (net, cfg) = random_network(4, 3, seed);
            assert!(model::is_dag(&net));
            for mode in [Mode::Centralized, Mode::PartiallyNested, Mode::LocalRect] {
                let cfg = DesignConfig { mode, ..cfg };
                assert!(no_errors(&net, &cfg));
            }
        }
    }
}
