//! Experiment runner for the policy-synthesis library: builds a scenario,
//! compiles the robust design, and emits machine-readable result files plus a
//! manifest that reproduces the run.

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use policynet::admm::{self, AdmmOptions};
use policynet::lp::{self, SolveOpts, Status};
use policynet::model::{self, DesignConfig, Mode, NetworkSpec};
use policynet::policy::ForecastSetParam;
use policynet::reformulate::{bcd_flexible, build, BcdOptions, BuildError, BuildOptions, Compiled};
use policynet::scenarios::{
    self, EnergyHubParams, HubData, HubTopology, SupplyChainParams,
};
use policynet::simulate;
use policynet::uncertainty::Polyhedron;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

const EXIT_CONFIG: i32 = 2;
const EXIT_INFEASIBLE: i32 = 3;
const EXIT_SOLVER: i32 = 4;

#[derive(Parser)]
#[command(name = "policynet", version, about = "Robust affine policy synthesis on agent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile and solve one design problem; write solution and policies.
    Solve(RunArgs),
    /// Solve several modes over a seed set; write a comparison CSV.
    Compare(CompareArgs),
    /// Solve the local design by consensus ADMM; write the iteration log.
    Admm(AdmmArgs),
    /// Shrinking-horizon rollout over sampled disturbances.
    Roll(RunArgs),
    /// Certify per-agent worst-case costs and check sampled realizations.
    Certify(RunArgs),
    /// Export the compiled LP in CPLEX LP text format.
    ExportLp(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Centralized,
    PartiallyNested,
    LocalRect,
    LocalFlexible,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Centralized => Mode::Centralized,
            ModeArg::PartiallyNested => Mode::PartiallyNested,
            ModeArg::LocalRect => Mode::LocalRect,
            ModeArg::LocalFlexible => Mode::LocalFlexible,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioArg {
    Illustrative,
    EnergyHub,
    SupplyChain,
    Random,
    Working,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TopologyArg {
    Serial,
    Complete,
}

#[derive(Parser, Debug, Clone, Serialize)]
struct ScenarioOpts {
    /// Built-in scenario family.
    #[arg(long, value_enum)]
    #[serde(with = "debug_string")]
    scenario: Option<ScenarioArg>,
    /// Network + design configuration file (TOML or JSON) instead of a
    /// built-in scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed (scenario data and disturbance sampling).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of agents / prosumers (energy-hub, random).
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Sharing topology of the energy hub.
    #[arg(long, value_enum, default_value_t = TopologyArg::Serial)]
    #[serde(with = "debug_string")]
    topology: TopologyArg,
    /// Drop the sharing links (energy-hub baseline).
    #[arg(long)]
    decoupled: bool,
    /// PV scale relative to demand (energy-hub).
    #[arg(long, default_value_t = 1.0)]
    pv_scale: f64,
    /// Override the percentage deviation bound (energy-hub).
    #[arg(long)]
    deviation: Option<f64>,
    /// Demand-factor uncertainty level θ (supply-chain).
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    /// Products per agent (supply-chain).
    #[arg(long, default_value_t = 1)]
    products: usize,
    /// Manufacturers between supplier and retailer (supply-chain).
    #[arg(long, default_value_t = 1)]
    intermediates: usize,
    /// Stage count (supply-chain, random).
    #[arg(long, default_value_t = 24)]
    horizon: usize,
    /// One-stage commitment observation delay (supply-chain).
    #[arg(long)]
    delay: bool,
    /// Randomize the supply-chain coefficients from the seed instead of the
    /// fixed reference instance.
    #[arg(long)]
    randomize: bool,
}

mod debug_string {
    pub fn serialize<T: std::fmt::Debug, S: serde::Serializer>(
        v: &T,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:?}"))
    }
}

#[derive(Parser, Debug, Clone, Serialize)]
struct SolverOpts {
    #[arg(long, default_value_t = 1e-9)]
    lp_tol: f64,
    #[arg(long, default_value_t = 50_000)]
    lp_max_iters: usize,
    #[arg(long, default_value_t = 0.1)]
    admm_rho: f64,
    #[arg(long, default_value_t = 1e-6)]
    admm_tol: f64,
    #[arg(long, default_value_t = 200)]
    admm_max_iters: usize,
}

impl SolverOpts {
    fn lp(&self) -> SolveOpts {
        SolveOpts { tol: self.lp_tol, max_iters: self.lp_max_iters, ..SolveOpts::default() }
    }
    fn admm(&self) -> AdmmOptions {
        AdmmOptions {
            rho: self.admm_rho,
            tol: self.admm_tol,
            max_iters: self.admm_max_iters,
            threads: threads(),
            solve: self.lp(),
        }
    }
}

#[derive(Parser, Debug)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioOpts,
    #[command(flatten)]
    solver: SolverOpts,
    /// Design mode.
    #[arg(long, value_enum, default_value_t = ModeArg::LocalRect)]
    mode: ModeArg,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed count for multi-seed subcommands (roll, certify sampling).
    #[arg(long, default_value_t = 10)]
    seeds: usize,
}

#[derive(Parser, Debug)]
struct CompareArgs {
    #[command(flatten)]
    scenario: ScenarioOpts,
    #[command(flatten)]
    solver: SolverOpts,
    /// Modes to compare.
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [ModeArg::Centralized, ModeArg::PartiallyNested, ModeArg::LocalRect])]
    modes: Vec<ModeArg>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of seeds (0..seeds).
    #[arg(long, default_value_t = 10)]
    seeds: usize,
}

#[derive(Parser, Debug)]
struct AdmmArgs {
    #[command(flatten)]
    scenario: ScenarioOpts,
    #[command(flatten)]
    solver: SolverOpts,
    #[arg(long, value_enum, default_value_t = ModeArg::LocalRect)]
    mode: ModeArg,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn threads() -> usize {
    std::env::var("POLICYNET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Instantiate the scenario; `seed` overrides the base seed for per-seed
/// experiment variation.
fn build_scenario(opts: &ScenarioOpts, seed: u64) -> Result<(NetworkSpec, DesignConfig)> {
    if let Some(path) = &opts.config {
        return model::load_config(path).map_err(|e| anyhow!(e));
    }
    match opts.scenario {
        None => Err(anyhow!("either --scenario or --config is required")),
        Some(ScenarioArg::Illustrative) => Ok(scenarios::illustrative()),
        Some(ScenarioArg::Working) => {
            Ok((scenarios::working_example(), DesignConfig::new(Mode::Centralized)))
        }
        Some(ScenarioArg::Random) => {
            Ok(scenarios::random_network(opts.m, opts.horizon.min(4), seed))
        }
        Some(ScenarioArg::EnergyHub) => {
            let params = EnergyHubParams {
                m: opts.m,
                topology: match opts.topology {
                    TopologyArg::Serial => HubTopology::Serial,
                    TopologyArg::Complete => HubTopology::Complete,
                },
                decoupled: opts.decoupled,
                price_seed: Some(seed),
                deviation: opts.deviation,
                pv_scale: opts.pv_scale,
            };
            // Prosumer profiles come from the base seed so every per-seed run
            // (price perturbations, disturbance draws) shares the same data.
            let data = HubData::Synthetic { seed: opts.seed };
            scenarios::energy_hub(&params, &data).map_err(|e| anyhow!(e))
        }
        Some(ScenarioArg::SupplyChain) => {
            let params = SupplyChainParams {
                intermediates: opts.intermediates,
                products: opts.products,
                horizon: opts.horizon,
                theta: opts.theta,
                prod_band: 0.1,
                delay: opts.delay,
                seed: opts.randomize.then_some(seed),
            };
            scenarios::supply_chain(&params).map_err(|e| anyhow!(e))
        }
    }
}

/// Flexible designs need the primitive sets S; only scenarios with a known
/// parameterization provide them.
fn flexible_s_sets(
    opts: &ScenarioOpts,
    net: &NetworkSpec,
) -> Result<BTreeMap<usize, Polyhedron>> {
    match opts.scenario {
        Some(ScenarioArg::Illustrative) => {
            let horizon = net.agents[0].horizon;
            let dim = horizon * net.agents[0].n_xi();
            Ok([(0usize, Polyhedron::unit_box(dim, 1.0))].into_iter().collect())
        }
        _ => Err(anyhow!("flexible mode needs a scenario with primitive sets (illustrative)")),
    }
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    subcommand: String,
    scenario: ScenarioOpts,
    modes: Vec<String>,
    seeds: Vec<u64>,
    solver: SolverOpts,
    threads: usize,
    timing_ms: BTreeMap<String, u128>,
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?)
        .with_context(|| path.display().to_string())?;
    Ok(())
}

fn contract_json(params: &BTreeMap<usize, ForecastSetParam>) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    for (arc, p) in params {
        let v = match p {
            ForecastSetParam::Rect { y, z } => serde_json::json!({
                "kind": "rect",
                "y": y.iter().copied().collect::<Vec<f64>>(),
                "z": z.iter().copied().collect::<Vec<f64>>(),
            }),
            ForecastSetParam::Flexible { y_mat, z, .. } => serde_json::json!({
                "kind": "flexible",
                "y_rows": y_mat.nrows(),
                "y": y_mat.iter().copied().collect::<Vec<f64>>(),
                "z": z.iter().copied().collect::<Vec<f64>>(),
            }),
        };
        out.insert(arc.to_string(), v);
    }
    serde_json::Value::Object(out)
}

struct Solved {
    compiled: Compiled,
    solution: lp::Solution,
    objective: f64,
    solve_ms: u128,
}

fn solve_design(
    net: &NetworkSpec,
    cfg: &DesignConfig,
    opts: &BuildOptions,
    solve: &SolveOpts,
) -> Result<Solved> {
    let t0 = Instant::now();
    let compiled = build(net, cfg, opts)?;
    let solution = compiled.solve(solve)?;
    let objective = solution.objective;
    Ok(Solved { compiled, solution, objective, solve_ms: t0.elapsed().as_millis() })
}

fn cmd_solve(args: &RunArgs) -> Result<()> {
    let (net, mut cfg) = build_scenario(&args.scenario, args.scenario.seed)?;
    cfg.mode = args.mode.into();
    std::fs::create_dir_all(&args.out)?;
    let mut timing = BTreeMap::new();
    let t0 = Instant::now();

    let (compiled, solution, contracts) = if cfg.mode == Mode::LocalFlexible {
        let s_sets = flexible_s_sets(&args.scenario, &net)?;
        let bcd = bcd_flexible(
            &net,
            &cfg,
            &s_sets,
            &BcdOptions { solve: args.solver.lp(), ..BcdOptions::default() },
        )?;
        let contracts = compiled_flex_contracts(&bcd.y, &bcd.z);
        (bcd.compiled, bcd.solution, contracts)
    } else {
        let solved = solve_design(&net, &cfg, &BuildOptions::default(), &args.solver.lp())?;
        let contracts = if cfg.mode == Mode::LocalRect {
            compiled_rect_contracts(&solved.compiled, &solved.solution)
        } else {
            serde_json::Value::Null
        };
        (solved.compiled, solved.solution, contracts)
    };
    timing.insert("solve".into(), t0.elapsed().as_millis());

    let m = net.agents.len();
    let ell: Vec<f64> = (0..m).map(|i| compiled.ell(&solution, i)).collect();
    let policies: Vec<serde_json::Value> = (0..m)
        .map(|i| serde_json::from_str(&compiled.policy(&solution, i).to_json()).unwrap())
        .collect();
    let report = serde_json::json!({
        "mode": format!("{:?}", cfg.mode),
        "objective": solution.objective,
        "agent_worst_case": ell,
        "contracts": contracts,
        "lp_columns": compiled.lp.num_cols(),
        "lp_rows": compiled.lp.num_rows(),
        "solve_ms": timing["solve"],
    });
    std::fs::write(args.out.join("solution.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(
        args.out.join("policies.json"),
        serde_json::to_string_pretty(&serde_json::Value::Array(policies))?,
    )?;
    write_manifest(
        &args.out,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "solve".into(),
            scenario: args.scenario.clone(),
            modes: vec![format!("{:?}", cfg.mode)],
            seeds: vec![args.scenario.seed],
            solver: args.solver.clone(),
            threads: threads(),
            timing_ms: timing,
        },
    )?;
    println!("objective {:.6}", solution.objective);
    Ok(())
}

fn compiled_rect_contracts(compiled: &Compiled, sol: &lp::Solution) -> serde_json::Value {
    contract_json(&compiled.rect_contracts(sol))
}

fn compiled_flex_contracts(
    y: &BTreeMap<usize, nalgebra::DMatrix<f64>>,
    z: &BTreeMap<usize, nalgebra::DVector<f64>>,
) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    for (arc, y_mat) in y {
        out.insert(
            arc.to_string(),
            serde_json::json!({
                "kind": "flexible",
                "y_rows": y_mat.nrows(),
                "y": y_mat.iter().copied().collect::<Vec<f64>>(),
                "z": z[arc].iter().copied().collect::<Vec<f64>>(),
            }),
        );
    }
    serde_json::Value::Object(out)
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(anyhow!("--seeds must be at least 1"));
    }
    if args.modes.is_empty() {
        return Err(anyhow!("--modes must name at least one mode"));
    }
    std::fs::create_dir_all(&args.out)?;
    let seeds: Vec<u64> = (0..args.seeds as u64).collect();
    let solve = args.solver.lp();

    // Seed-level parallelism with deterministic output ordering by seed.
    let mut rows: Vec<Vec<(u64, String, f64, u128)>> = vec![Vec::new(); seeds.len()];
    let workers = threads().min(seeds.len());
    let t0 = Instant::now();
    let errors: Vec<String> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, chunk) in rows.chunks_mut(seeds.len().div_ceil(workers)).enumerate() {
            let seeds = &seeds;
            let scenario = &args.scenario;
            let modes = &args.modes;
            let solve = &solve;
            handles.push(scope.spawn(move || -> Result<(), String> {
                let base = w * seeds.len().div_ceil(workers);
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let seed = seeds[base + k];
                    let (net, cfg) =
                        build_scenario(scenario, seed).map_err(|e| e.to_string())?;
                    for &mode in modes.iter() {
                        let cfg = DesignConfig { mode: mode.into(), ..cfg };
                        let solved =
                            solve_design(&net, &cfg, &BuildOptions::default(), solve)
                                .map_err(|e| e.to_string())?;
                        slot.push((
                            seed,
                            format!("{:?}", cfg.mode),
                            solved.objective,
                            solved.solve_ms,
                        ));
                    }
                }
                Ok(())
            }));
        }
        handles
            .into_iter()
            .filter_map(|h| h.join().expect("compare worker").err())
            .collect()
    });
    if let Some(e) = errors.first() {
        return Err(anyhow!(e.clone()));
    }

    let path = args.out.join("compare.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["seed", "mode", "objective", "solve_ms", "suboptimality_pct"])?;
    for per_seed in &rows {
        let central = per_seed
            .iter()
            .find(|(_, m, _, _)| m == "Centralized")
            .map(|&(_, _, obj, _)| obj);
        for (seed, mode, obj, ms) in per_seed {
            let subopt = match central {
                Some(c) if c.abs() > 1e-12 => format!("{:.6}", 100.0 * (obj - c) / c),
                _ => String::new(),
            };
            wtr.write_record([
                seed.to_string(),
                mode.clone(),
                format!("{obj:.9}"),
                ms.to_string(),
                subopt,
            ])?;
        }
    }
    wtr.flush()?;
    write_manifest(
        &args.out,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "compare".into(),
            scenario: args.scenario.clone(),
            modes: args.modes.iter().map(|m| format!("{m:?}")).collect(),
            seeds,
            solver: args.solver.clone(),
            threads: threads(),
            timing_ms: [("total".to_string(), t0.elapsed().as_millis())].into(),
        },
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_admm(args: &AdmmArgs) -> Result<()> {
    let (net, mut cfg) = build_scenario(&args.scenario, args.scenario.seed)?;
    cfg.mode = args.mode.into();
    if !matches!(cfg.mode, Mode::LocalRect | Mode::LocalFlexible) {
        return Err(anyhow!("consensus ADMM applies to the local modes"));
    }
    std::fs::create_dir_all(&args.out)?;
    let base = BuildOptions::default();
    let t0 = Instant::now();
    let outcome = admm::run(&net, &cfg, &base, &args.solver.admm())?;
    let admm_ms = t0.elapsed().as_millis();
    let t1 = Instant::now();
    let mono = solve_design(&net, &cfg, &base, &args.solver.lp())?;
    let mono_ms = t1.elapsed().as_millis();

    let path = args.out.join("admm_log.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["iter", "objective", "primal_res", "dual_res"])?;
    for row in &outcome.log {
        wtr.write_record([
            row.iter.to_string(),
            format!("{:.12}", row.objective),
            format!("{:.3e}", row.primal_res),
            format!("{:.3e}", row.dual_res),
        ])?;
    }
    wtr.flush()?;
    let last = outcome.log.last();
    let report = serde_json::json!({
        "converged": outcome.converged,
        "iterations": outcome.iterations,
        "objective": outcome.objective,
        "monolithic_objective": mono.objective,
        "objective_gap": (outcome.objective - mono.objective).abs(),
        "final_primal_res": last.map(|l| l.primal_res),
        "final_dual_res": last.map(|l| l.dual_res),
        "rho": args.solver.admm_rho,
        "admm_ms": admm_ms,
        "monolithic_ms": mono_ms,
    });
    std::fs::write(args.out.join("admm.json"), serde_json::to_string_pretty(&report)?)?;
    write_manifest(
        &args.out,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "admm".into(),
            scenario: args.scenario.clone(),
            modes: vec![format!("{:?}", cfg.mode)],
            seeds: vec![args.scenario.seed],
            solver: args.solver.clone(),
            threads: threads(),
            timing_ms: [("admm".to_string(), admm_ms), ("monolithic".to_string(), mono_ms)]
                .into(),
        },
    )?;
    println!(
        "converged {} in {} iterations; |gap| {:.3e}",
        outcome.converged,
        outcome.iterations,
        (outcome.objective - mono.objective).abs()
    );
    Ok(())
}

fn cmd_roll(args: &RunArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(anyhow!("--seeds must be at least 1"));
    }
    let (net, mut cfg) = build_scenario(&args.scenario, args.scenario.seed)?;
    cfg.mode = args.mode.into();
    std::fs::create_dir_all(&args.out)?;
    let solve = args.solver.lp();
    let base = BuildOptions::default();
    let t0 = Instant::now();

    let path = args.out.join("roll.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["seed", "realized_cost", "worst_case", "ratio", "violations"])?;
    let mut ratios = Vec::new();
    for seed in 0..args.seeds as u64 {
        let outcome = simulate::roll(&net, &cfg, &base, &solve, seed)?;
        let realized = outcome.trajectory.total_cost;
        let worst = outcome.stage_objectives[0];
        let ratio = realized / worst;
        ratios.push(ratio);
        wtr.write_record([
            seed.to_string(),
            format!("{realized:.9}"),
            format!("{worst:.9}"),
            format!("{ratio:.6}"),
            outcome.trajectory.violations.len().to_string(),
        ])?;
    }
    wtr.flush()?;
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let report = serde_json::json!({
        "seeds": args.seeds,
        "mean_ratio": mean,
        "min_ratio": ratios.iter().cloned().fold(f64::INFINITY, f64::min),
        "max_ratio": ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    });
    std::fs::write(args.out.join("roll.json"), serde_json::to_string_pretty(&report)?)?;
    write_manifest(
        &args.out,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "roll".into(),
            scenario: args.scenario.clone(),
            modes: vec![format!("{:?}", cfg.mode)],
            seeds: (0..args.seeds as u64).collect(),
            solver: args.solver.clone(),
            threads: threads(),
            timing_ms: [("total".to_string(), t0.elapsed().as_millis())].into(),
        },
    )?;
    println!("mean rolling/worst-case ratio {mean:.4}");
    Ok(())
}

fn cmd_certify(args: &RunArgs) -> Result<()> {
    let (net, mut cfg) = build_scenario(&args.scenario, args.scenario.seed)?;
    cfg.mode = args.mode.into();
    std::fs::create_dir_all(&args.out)?;
    let base = BuildOptions::default();
    let solved = solve_design(&net, &cfg, &base, &args.solver.lp())?;
    let m = net.agents.len();
    let ell: Vec<f64> = (0..m).map(|i| solved.compiled.ell(&solved.solution, i)).collect();
    // Exact vertex certification is exponential in the factor count; fall back
    // to the design epigraph (a sound worst-case bound) on larger instances.
    let (certificates, method) =
        match simulate::certify_worst_case(&net, &cfg, &base, &solved.compiled, &solved.solution, 1 << 20)
        {
            Ok(c) => (c, "vertex-exact"),
            Err(simulate::SimError::Set(
                policynet::uncertainty::SetError::CapExceeded(_),
            )) => (ell.clone(), "epigraph-bound"),
            Err(e) => return Err(e.into()),
        };

    // Spot-check: sampled realizations must stay below the certificates.
    let policies: Vec<_> = (0..m).map(|i| solved.compiled.policy(&solved.solution, i)).collect();
    let policies = match cfg.mode {
        Mode::LocalRect => simulate::belief_space_policies(
            &policies,
            &solved.compiled.arcs,
            &solved.compiled.rect_contracts(&solved.solution),
        )?,
        _ => policies,
    };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(args.scenario.seed);
    let mut max_sampled = vec![f64::NEG_INFINITY; m];
    for _ in 0..args.seeds.max(1) {
        let xi = simulate::sample_xi(&net, &mut rng)?;
        let traj = simulate::simulate(&net, &cfg, &policies, &xi)?;
        for i in 0..m {
            max_sampled[i] = max_sampled[i].max(traj.costs[i]);
        }
    }
    let ok = (0..m).all(|i| max_sampled[i] <= certificates[i] + 1e-6);
    let report = serde_json::json!({
        "objective": solved.objective,
        "agent_epigraph": ell,
        "agent_certificate": certificates,
        "certificate_method": method,
        "max_sampled_cost": max_sampled,
        "samples": args.seeds.max(1),
        "sampled_below_certificate": ok,
    });
    std::fs::write(args.out.join("certify.json"), serde_json::to_string_pretty(&report)?)?;
    write_manifest(
        &args.out,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "certify".into(),
            scenario: args.scenario.clone(),
            modes: vec![format!("{:?}", cfg.mode)],
            seeds: vec![args.scenario.seed],
            solver: args.solver.clone(),
            threads: threads(),
            timing_ms: [("solve".to_string(), solved.solve_ms)].into(),
        },
    )?;
    if !ok {
        return Err(anyhow!("a sampled realization exceeded its certificate"));
    }
    println!("certificates hold over {} samples", args.seeds.max(1));
    Ok(())
}

fn cmd_export_lp(args: &RunArgs) -> Result<()> {
    let (net, mut cfg) = build_scenario(&args.scenario, args.scenario.seed)?;
    cfg.mode = args.mode.into();
    std::fs::create_dir_all(&args.out)?;
    let compiled = build(&net, &cfg, &BuildOptions::default())?;
    let path = args.out.join("problem.lp");
    lp::export(&compiled.lp, &path)?;
    write_manifest(
        &args.out,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "export-lp".into(),
            scenario: args.scenario.clone(),
            modes: vec![format!("{:?}", cfg.mode)],
            seeds: vec![args.scenario.seed],
            solver: args.solver.clone(),
            threads: threads(),
            timing_ms: BTreeMap::new(),
        },
    )?;
    println!(
        "wrote {} ({} columns, {} rows)",
        path.display(),
        compiled.lp.num_cols(),
        compiled.lp.num_rows()
    );
    Ok(())
}

/// Map failures to the documented exit codes: 2 configuration, 3 infeasible,
/// 4 solver.
fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(b) = err.downcast_ref::<BuildError>() {
        return match b {
            BuildError::Solve { status: Status::Infeasible, .. } => EXIT_INFEASIBLE,
            BuildError::Solve { .. } => EXIT_SOLVER,
            _ => EXIT_CONFIG,
        };
    }
    if let Some(s) = err.downcast_ref::<simulate::SimError>() {
        return match s {
            simulate::SimError::Stage { status: Status::Infeasible, .. } => EXIT_INFEASIBLE,
            simulate::SimError::Stage { .. } => EXIT_SOLVER,
            _ => EXIT_CONFIG,
        };
    }
    EXIT_CONFIG
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Admm(args) => cmd_admm(args),
        Command::Roll(args) => cmd_roll(args),
        Command::Certify(args) => cmd_certify(args),
        Command::ExportLp(args) => cmd_export_lp(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
