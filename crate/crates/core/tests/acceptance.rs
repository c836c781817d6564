//! End-to-end acceptance checks, one test per criterion. Each test prints a
//! single PASS line with the measured quantities; the harness result line is
//! the pass/fail verdict.

use nalgebra::{DMatrix, DVector};
use policynet::lp::SolveOpts;
use policynet::model::{self, DesignConfig, Mode, NetworkSpec};
use policynet::policy::{self, AffinePolicy, ForecastSetParam, InfoSource, SourceKind};
use policynet::reformulate::{
    bcd_flexible, build, AffineExpr, BcdOptions, Bilin, BuildError, BuildOptions, Compiler, Dec,
    Unc,
};
use policynet::scenarios::{
    self, energy_hub, illustrative, random_network, supply_chain, EnergyHubParams, HubData,
    HubTopology, SupplyChainParams,
};
use policynet::simulate::{self, roll};
use policynet::uncertainty::Polyhedron;
use policynet::{admm, lp};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn solve_mode(net: &NetworkSpec, cfg: &DesignConfig, mode: Mode) -> f64 {
    let cfg = DesignConfig { mode, ..*cfg };
    let compiled = build(net, &cfg, &BuildOptions::default()).expect("build");
    compiled.solve(&SolveOpts::default()).expect("solve").objective
}

/// Objective under the given build options, or +inf when the design is
/// infeasible (used by the rotation sweep, where bad orientations cut off
/// every feasible contract).
fn solve_or_inf(net: &NetworkSpec, cfg: &DesignConfig, opts: &BuildOptions) -> f64 {
    let compiled = build(net, cfg, opts).expect("build");
    match compiled.solve(&SolveOpts::default()) {
        Ok(sol) => sol.objective,
        Err(BuildError::Solve { .. }) => f64::INFINITY,
        Err(e) => panic!("unexpected build failure: {e}"),
    }
}

/// Criterion 1: optimum(LocalRect) >= optimum(PartiallyNested) >=
/// optimum(Centralized) on 20 random networks.
#[test]
fn criterion_01_information_ordering_chain() {
    let mut worst_pn = f64::INFINITY;
    let mut worst_rect = f64::INFINITY;
    for seed in 0..20u64 {
        let m = 2 + (seed as usize % 4);
        let horizon = 2 + (seed as usize % 3);
        let (net, cfg) = random_network(m, horizon, seed);
        let central = solve_mode(&net, &cfg, Mode::Centralized);
        let pn = solve_mode(&net, &cfg, Mode::PartiallyNested);
        let rect = solve_mode(&net, &cfg, Mode::LocalRect);
        assert!(
            pn >= central - 1e-6,
            "seed {seed}: partially nested {pn} below centralized {central}"
        );
        assert!(rect >= pn - 1e-6, "seed {seed}: local rect {rect} below partially nested {pn}");
        worst_pn = worst_pn.min(pn - central);
        worst_rect = worst_rect.min(rect - pn);
    }
    println!(
        "criterion 1: PASS — rect >= nested >= centralized on 20 networks \
         (min gaps {worst_pn:.2e}, {worst_rect:.2e})"
    );
}

/// Criterion 2: dualized robust rows agree with explicit vertex enumeration on
/// 50 random rows x 50 decision points, and a fully vertex-expanded compile of
/// a random network reproduces the dualized optimum.
#[test]
fn criterion_02_dualization_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0usize;
    for row in 0..50 {
        let d = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=3);
        let poly = if rng.gen_bool(0.5) {
            let lb: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..0.0)).collect();
            let ub: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.5)).collect();
            Polyhedron::box_set(&lb, &ub).expect("box")
        } else {
            // Standard simplex {s >= 0, sum s <= 1}: W s >= w.
            let mut w_mat = DMatrix::zeros(d + 1, d);
            for k in 0..d {
                w_mat[(k, k)] = 1.0;
                w_mat[(d, k)] = -1.0;
            }
            let mut w_vec = DVector::zeros(d + 1);
            w_vec[d] = -1.0;
            Polyhedron::new(w_mat, w_vec).expect("simplex")
        };
        let cst: f64 = rng.gen_range(-1.5..1.5);
        let lin: DMatrix<f64> = DMatrix::from_fn(1, n, |_, _| rng.gen_range(-1.0..1.0));
        let g: DMatrix<f64> = DMatrix::from_fn(1, d, |_, _| rng.gen_range(-1.0..1.0));
        let bilins: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..2)
            .map(|_| {
                (
                    DMatrix::from_fn(1, n, |_, _| rng.gen_range(-1.0..1.0)),
                    DMatrix::from_fn(1, d, |_, _| rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        let dec = Dec::PolConst { agent: 0, t: 0 };
        let unc = Unc::Xi { agent: 0, t: 0 };
        let verts = poly.vertices(64).expect("vertices");

        for point in 0..50 {
            let x = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.5..1.5));
            // Oracle: worst case by direct maximization over extreme points.
            let worst = verts
                .iter()
                .map(|v| {
                    let mut val = cst + (&lin * &x)[(0, 0)] + (&g * v)[(0, 0)];
                    for (l, r) in &bilins {
                        val += (l * &x)[(0, 0)] * (r * v)[(0, 0)];
                    }
                    val
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if worst.abs() < 1e-7 {
                continue; // razor-edge row; either verdict is defensible
            }
            // Dualized: fix the decision and ask the compiled row for
            // multiplier feasibility.
            let mut comp = Compiler::new(64);
            comp.register_unc(unc, poly.clone()).expect("register");
            comp.fix.insert(dec, x.clone());
            let mut e = AffineExpr::zeros(1);
            e.cst[0] = cst;
            e.push_dec(dec, lin.clone(), (n, 1));
            e.push_unc(unc, g.clone());
            for (l, r) in &bilins {
                e.push_bil(dec, unc, Bilin::Full { left: l.clone(), right: r.clone() });
            }
            comp.emit_robust_le(&e).expect("emit");
            let sol = lp::solve(&comp.lp, &SolveOpts::default());
            let feasible = sol.status == lp::Status::Optimal;
            assert_eq!(
                feasible,
                worst <= 0.0,
                "row {row} point {point}: dualized verdict {feasible} vs vertex worst {worst}"
            );
            checked += 1;
        }
    }
    // Integration-level replica: vertex expansion of every factor reproduces
    // the dualized optimum on a couple of random networks.
    for seed in [3u64, 11] {
        let (net, cfg) = random_network(3, 2, seed);
        let dualized = solve_mode(&net, &cfg, Mode::LocalRect);
        let compiled =
            build(&net, &cfg, &BuildOptions { expand_all: true, ..BuildOptions::default() })
                .expect("build expanded");
        let expanded = compiled.solve(&SolveOpts::default()).expect("solve expanded").objective;
        assert!(
            (dualized - expanded).abs() <= 1e-6 * dualized.abs().max(1.0),
            "seed {seed}: dualized {dualized} vs expanded {expanded}"
        );
    }
    println!("criterion 2: PASS — {checked} robust-row verdicts match vertex enumeration");
}

/// Criterion 3: flexible BCD recovers the partially nested optimum on
/// depth-one bipartite DAGs.
#[test]
fn criterion_03_bipartite_flexible_matches_nested() {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let (net, cfg, s_sets) = scenarios::bipartite_example(2, 2, seed);
        let pn = solve_mode(&net, &cfg, Mode::PartiallyNested);
        let out = bcd_flexible(&net, &cfg, &s_sets, &BcdOptions::default()).expect("bcd");
        let rel = (out.objective - pn).abs() / pn.abs().max(1.0);
        assert!(rel <= 1e-4, "seed {seed}: flexible {} vs nested {pn} (rel {rel:.2e})", out.objective);
        worst = worst.max(rel);
    }
    println!("criterion 3: PASS — flexible equals nested on 10 bipartite DAGs (max rel {worst:.2e})");
}

/// Criterion 4: on the two-agent illustrative instance the flexible design
/// recovers the nested optimum, rectangles cost more, and the rotation sweep
/// bottoms out at the orientation aligned with the committed-state geometry.
#[test]
fn criterion_04_illustrative_flexible_recovery() {
    let (net, cfg) = illustrative();
    let central = solve_mode(&net, &cfg, Mode::Centralized);
    let pn = solve_mode(&net, &cfg, Mode::PartiallyNested);
    let rect = solve_mode(&net, &cfg, Mode::LocalRect);
    assert!((pn - central).abs() <= 1e-6, "nested {pn} vs centralized {central}");

    let s_sets: BTreeMap<usize, Polyhedron> =
        [(0usize, Polyhedron::unit_box(2, 1.0))].into_iter().collect();
    let flex_cfg = DesignConfig { mode: Mode::LocalFlexible, ..cfg };
    let flex = bcd_flexible(&net, &flex_cfg, &s_sets, &BcdOptions::default()).expect("bcd");
    assert!(
        (flex.objective - pn).abs() <= 1e-5,
        "flexible {} vs nested {pn}",
        flex.objective
    );
    assert!(rect >= pn - 1e-7, "rect {rect} below nested {pn}");

    // Aligned orientation: principal directions of the committed-state map
    // x_1 = (D Gamma + E) xi under the nested policy.
    let cfg_pn = DesignConfig { mode: Mode::PartiallyNested, ..cfg };
    let compiled = build(&net, &cfg_pn, &BuildOptions::default()).expect("build");
    let sol = compiled.solve(&SolveOpts::default()).expect("solve");
    let gamma = compiled
        .policy(&sol, 0)
        .block(0, 0, 0)
        .cloned()
        .expect("stage-0 coefficient");
    let generator = &net.agents[0].d[0] * gamma + &net.agents[0].e[0];
    let svd = generator.svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let aligned = u[(1, 0)].atan2(u[(0, 0)]);

    let rect_at = |theta: f64| {
        let mut opts = BuildOptions::default();
        opts.rect_rotation.insert(0, scenarios::rotation(theta));
        solve_or_inf(&net, &cfg, &opts)
    };
    let mut sweep_min = f64::INFINITY;
    let mut argmin = 0.0;
    for deg in 0..=180 {
        let cost = rect_at(f64::to_radians(deg as f64));
        if cost < sweep_min {
            sweep_min = cost;
            argmin = deg as f64;
        }
    }
    let at_aligned = rect_at(aligned);
    assert!(sweep_min.is_finite(), "every rotation infeasible");
    assert!(
        (sweep_min - at_aligned).abs() <= 1e-3,
        "sweep min {sweep_min} (at {argmin} deg) vs aligned-orientation cost {at_aligned} \
         (at {:.2} deg)",
        aligned.to_degrees()
    );
    println!(
        "criterion 4: PASS — flexible {:.6} = nested {pn:.6}; axis-aligned rect {rect:.4}; \
         sweep min {sweep_min:.6} at {argmin} deg matches aligned {at_aligned:.6}",
        flex.objective
    );
}

/// Criterion 5: energy hub orderings, mean local-vs-centralized gap, complete
/// vs serial topology, and LP column growth (linear local, superlinear
/// centralized).
#[test]
fn criterion_05_energy_hub_scalability() {
    let mut gaps = Vec::new();
    for m in [2usize, 3, 4] {
        for seed in 0..10u64 {
            let data = HubData::Synthetic { seed };
            let params = EnergyHubParams::new(m, HubTopology::Serial);
            let (net, cfg) = energy_hub(&params, &data).expect("hub");
            let central = solve_mode(&net, &cfg, Mode::Centralized);
            let local = solve_mode(&net, &cfg, Mode::LocalRect);
            let dec_params = EnergyHubParams { decoupled: true, ..params.clone() };
            let (dec_net, dec_cfg) = energy_hub(&dec_params, &data).expect("decoupled hub");
            let decoupled = solve_mode(&dec_net, &dec_cfg, Mode::LocalRect);
            let scale = central.abs().max(1.0);
            assert!(
                decoupled >= local - 1e-6 * scale,
                "m {m} seed {seed}: decoupled {decoupled} below local {local}"
            );
            assert!(
                local >= central - 1e-6 * scale,
                "m {m} seed {seed}: local {local} below centralized {central}"
            );
            gaps.push(100.0 * (local - central) / central);
        }
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(mean_gap <= 10.0, "mean local-vs-centralized gap {mean_gap:.2}% above 10%");

    for seed in 0..3u64 {
        let data = HubData::Synthetic { seed };
        let serial = {
            let (net, cfg) = energy_hub(&EnergyHubParams::new(3, HubTopology::Serial), &data)
                .expect("serial hub");
            solve_mode(&net, &cfg, Mode::LocalRect)
        };
        let complete = {
            let (net, cfg) = energy_hub(&EnergyHubParams::new(3, HubTopology::Complete), &data)
                .expect("complete hub");
            solve_mode(&net, &cfg, Mode::LocalRect)
        };
        assert!(
            complete <= serial + 1e-6 * serial.abs().max(1.0),
            "seed {seed}: complete topology {complete} above serial {serial}"
        );
    }

    // Column growth, build only: equal increments for the local design,
    // strictly growing increments for the centralized one.
    let cols = |mode: Mode| -> Vec<usize> {
        (2..=5usize)
            .map(|m| {
                let (net, cfg) =
                    energy_hub(&EnergyHubParams::new(m, HubTopology::Serial), &HubData::Synthetic {
                        seed: 0,
                    })
                    .expect("hub");
                let cfg = DesignConfig { mode, ..cfg };
                build(&net, &cfg, &BuildOptions::default()).expect("build").lp.num_cols()
            })
            .collect()
    };
    let local_cols = cols(Mode::LocalRect);
    let central_cols = cols(Mode::Centralized);
    let local_inc: Vec<isize> =
        local_cols.windows(2).map(|w| w[1] as isize - w[0] as isize).collect();
    let central_inc: Vec<isize> =
        central_cols.windows(2).map(|w| w[1] as isize - w[0] as isize).collect();
    assert!(
        local_inc.windows(2).all(|w| w[0] == w[1]),
        "local column increments not constant: {local_cols:?}"
    );
    assert!(
        central_inc.windows(2).all(|w| w[0] < w[1]),
        "centralized column increments not strictly growing: {central_cols:?}"
    );
    println!(
        "criterion 5: PASS — orderings hold on 30 hub instances, mean gap {mean_gap:.2}%, \
         columns local {local_cols:?} (linear) vs centralized {central_cols:?} (superlinear)"
    );
}

/// Criterion 6: zero suboptimality of the local supply-chain design without
/// delay; with a demand-side delay the suboptimality is nonnegative and its
/// growth over the horizon saturates.
#[test]
fn criterion_06_supply_chain_suboptimality() {
    for seed in 0..10u64 {
        let mut params = SupplyChainParams::new(1, 2, 5, 1.0);
        params.seed = Some(seed);
        let (net, cfg) = supply_chain(&params).expect("chain");
        let central = solve_mode(&net, &cfg, Mode::Centralized);
        let local = solve_mode(&net, &cfg, Mode::LocalRect);
        let rel = (local - central).abs() / central.abs().max(1.0);
        assert!(rel <= 1e-5, "seed {seed}: no-delay suboptimality {rel:.2e}");
    }

    let mut trend = Vec::new();
    for horizon in 3..=8usize {
        let mut params = SupplyChainParams::new(1, 1, horizon, 1.0);
        params.delay = true;
        let (net, cfg) = supply_chain(&params).expect("chain");
        let central = solve_mode(&net, &cfg, Mode::Centralized);
        let local = solve_mode(&net, &cfg, Mode::LocalRect);
        let subopt = 100.0 * (local - central) / central;
        assert!(subopt >= -1e-6, "horizon {horizon}: negative suboptimality {subopt}");
        trend.push(subopt);
    }
    // Saturation: successive increments shrink as the horizon grows.
    for w in trend.windows(3) {
        let (d1, d2) = (w[1] - w[0], w[2] - w[1]);
        assert!(d2 <= d1 + 1e-3, "delay suboptimality not saturating: {trend:?}");
    }
    let pretty: Vec<String> = trend.iter().map(|s| format!("{s:.1}%")).collect();
    println!(
        "criterion 6: PASS — no-delay suboptimality zero on 10 instances; \
         delay trend T=3..8 saturates: {}",
        pretty.join(", ")
    );
}

/// Criterion 7: consensus ADMM on the three-agent chain reaches the
/// monolithic optimum within the iteration budget.
#[test]
fn criterion_07_admm_matches_monolithic() {
    let params = SupplyChainParams::new(1, 1, 20, 1.0);
    let (net, cfg) = supply_chain(&params).expect("chain");
    let monolithic = solve_mode(&net, &cfg, Mode::LocalRect);
    let opts = admm::AdmmOptions { rho: 0.1, tol: 1e-6, max_iters: 50, ..Default::default() };
    let out = admm::run(&net, &cfg, &BuildOptions::default(), &opts).expect("admm");
    assert!(out.converged, "ADMM did not converge in {} iterations", out.iterations);
    let gap = (out.objective - monolithic).abs();
    assert!(gap <= 1e-6, "ADMM objective {} vs monolithic {monolithic}", out.objective);
    let last = out.log.last().expect("log");
    assert!(
        last.primal_res.max(last.dual_res) <= 1e-6,
        "final residuals {:.2e}/{:.2e}",
        last.primal_res,
        last.dual_res
    );
    println!(
        "criterion 7: PASS — converged in {} iterations, |gap| {gap:.2e}, residual {:.2e}",
        out.iterations,
        last.primal_res.max(last.dual_res)
    );
}

/// Criterion 8: the belief-space translation reproduces the primitive-space
/// policy exactly: Psi(xi, Y s + z) = Gamma(xi, s).
#[test]
fn criterion_08_policy_translation_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut max_err = 0.0f64;
    for _ in 0..10 {
        let horizon = rng.gen_range(2..=4);
        let d = rng.gen_range(1..=3);
        let n_u = rng.gen_range(1..=2);
        let sources = vec![
            InfoSource { kind: SourceKind::OwnXi, stage_dims: vec![2; horizon], lag: 0 },
            InfoSource { kind: SourceKind::Belief(9), stage_dims: vec![d; horizon], lag: 0 },
        ];
        let mut gamma = AffinePolicy::zeros(n_u, horizon, sources);
        for b in &mut gamma.blocks {
            b.mat = DMatrix::from_fn(b.mat.nrows(), b.mat.ncols(), |_, _| rng.gen_range(-2.0..2.0));
        }
        for c in &mut gamma.constants {
            *c = DVector::from_fn(n_u, |_, _| rng.gen_range(-1.0..1.0));
        }
        let y = DVector::from_fn(horizon * d, |_, _| rng.gen_range(0.2..2.0));
        let z = DVector::from_fn(horizon * d, |_, _| rng.gen_range(-1.0..1.0));
        let params: BTreeMap<usize, ForecastSetParam> =
            [(9usize, ForecastSetParam::Rect { y: y.clone(), z: z.clone() })].into_iter().collect();
        let (psi, dropped) = policy::translate_gamma_to_psi(&gamma, &params).expect("translate");
        assert!(dropped.is_empty(), "positive scalings must not drop coordinates");

        for _ in 0..10 {
            let xi: Vec<DVector<f64>> =
                (0..horizon).map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0))).collect();
            let s: Vec<DVector<f64>> =
                (0..horizon).map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))).collect();
            let zeta: Vec<DVector<f64>> = (0..horizon)
                .map(|tau| {
                    DVector::from_fn(d, |k, _| {
                        z[tau * d + k] + y[tau * d + k] * s[tau][k]
                    })
                })
                .collect();
            let u_gamma = gamma.evaluate(&[xi.clone(), s]);
            let u_psi = psi.evaluate(&[xi, zeta]);
            for (a, b) in u_gamma.iter().zip(&u_psi) {
                let err = (a - b).amax();
                assert!(err <= 1e-10, "translation mismatch {err:.2e}");
                max_err = max_err.max(err);
            }
        }
    }
    println!(
        "criterion 8: PASS — Psi(xi, Ys+z) = Gamma(xi, s) on 100 points (max error {max_err:.2e})"
    );
}

/// Criterion 9: shrinking-horizon rollout never exceeds the worst-case
/// certificate, and the realized/worst-case ratio sits around a half.
#[test]
fn criterion_09_rolling_horizon_ratio() {
    let mut ratios = Vec::new();
    for seed in 0..10u64 {
        let (net, cfg) = energy_hub(
            &EnergyHubParams::new(2, HubTopology::Serial),
            &HubData::Synthetic { seed },
        )
        .expect("hub");
        let out = roll(&net, &cfg, &BuildOptions::default(), &SolveOpts::default(), seed)
            .expect("roll");
        let worst = out.stage_objectives[0];
        let realized = out.trajectory.total_cost;
        assert!(
            realized <= worst + 1e-6 * worst.abs().max(1.0),
            "seed {seed}: realized {realized} above certificate {worst}"
        );
        // Boundary-riding interior-point solutions can overshoot capacity by
        // solver tolerance once stepped through the dynamics; only material
        // violations count.
        let worst_violation =
            out.trajectory.violations.iter().map(|v| v.amount).fold(0.0, f64::max);
        assert!(worst_violation <= 1e-3, "seed {seed}: constraint violation {worst_violation:.2e}");
        ratios.push(realized / worst);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(
        (0.3..=0.8).contains(&mean),
        "mean realized/worst-case ratio {mean:.3} outside [0.3, 0.8]"
    );
    println!("criterion 9: PASS — realized <= certificate on 10 seeds, mean ratio {mean:.3}");
}

/// Criterion 10: quantity-flexibility bound widths grow with demand
/// uncertainty, and upstream contracts are wider than downstream ones.
#[test]
fn criterion_10_contract_monotonicity() {
    // Arc 0: manufacturer -> supplier; arc 1: retailer -> manufacturer.
    let widths_at = |theta: f64| -> Vec<DVector<f64>> {
        let params = SupplyChainParams::new(1, 1, 24, theta);
        let (net, cfg) = supply_chain(&params).expect("chain");
        let compiled = build(&net, &cfg, &BuildOptions::default()).expect("build");
        let sol = compiled.solve(&SolveOpts::default()).expect("solve");
        let contracts = compiled.rect_contracts(&sol);
        (0..2)
            .map(|a| match &contracts[&a] {
                ForecastSetParam::Rect { y, .. } => 2.0 * y,
                ForecastSetParam::Flexible { .. } => unreachable!("rect design"),
            })
            .collect()
    };
    let thetas = [0.25, 0.5, 1.0];
    let widths: Vec<Vec<DVector<f64>>> = thetas.iter().map(|&t| widths_at(t)).collect();
    for pair in widths.windows(2) {
        for a in 0..2 {
            let (lo, hi) = (&pair[0][a], &pair[1][a]);
            for k in 0..lo.len() {
                assert!(
                    hi[k] >= lo[k] - 1e-6,
                    "arc {a} stage {k}: width shrank as theta grew ({} -> {})",
                    lo[k],
                    hi[k]
                );
            }
        }
    }
    let mut means = Vec::new();
    for w in &widths {
        let upstream = w[0].mean();
        let downstream = w[1].mean();
        assert!(
            upstream >= downstream - 1e-6,
            "manufacturer-supplier mean width {upstream} below retailer-manufacturer {downstream}"
        );
        means.push((upstream, downstream));
    }
    let shown: Vec<String> = thetas
        .iter()
        .zip(&means)
        .map(|(t, (u, d))| format!("theta {t}: {u:.3} >= {d:.3}"))
        .collect();
    println!(
        "criterion 10: PASS — widths nondecreasing in theta; upstream >= downstream ({})",
        shown.join("; ")
    );
}

/// The ordering chain also holds pointwise on the curated scenarios (sanity
/// companion to criterion 1; keeps the acceptance target self-contained).
#[test]
fn scenario_orderings_companion() {
    let (net, cfg) = illustrative();
    let central = solve_mode(&net, &cfg, Mode::Centralized);
    let rect = solve_mode(&net, &cfg, Mode::LocalRect);
    assert!(rect >= central - 1e-7);
    let diags = model::validate(&net, &cfg);
    assert!(diags.iter().all(|d| d.severity != model::Severity::Error), "{diags:?}");
    let _ = simulate::sample_xi(&net, &mut ChaCha8Rng::seed_from_u64(0)).expect("sample");
}
