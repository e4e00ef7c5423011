//! End-to-end verification suite over the bundled scenarios.
//!
//! Each check pins one headline property of the synthesis pipeline at a
//! fixed tolerance — analytic Riccati reproduction, the published blow-up
//! time, certificate agreement, consistency identities, oracle equivalence
//! of the worst-case drift, the two asymptotic rates, the infinite-horizon
//! cross-check, degenerate exactness, and the social-cost decomposition.
//! The `acceptance` test target runs every check, and
//! `mfgsoc verify-paper-example` prints one pass/fail line per check.

use crate::consistency::{
    consistency_residual, detect_z_blowup, solve_consistency_finite,
    solve_consistency_finite_shooting, solve_consistency_infinite,
};
use crate::control::{
    build_decentralized_law, build_worstcase_law, cost_decomposition_check, meanfield_error_sweep,
    simulate, SimConfig,
};
use crate::convexity::{check_a2prime_det, check_a2prime_riccati, Witness};
use crate::model::{
    blowup_example, reference_example, scalar_infinite_example, validate_params,
    zero_cost_example,
};
use crate::numerics::{TimeGrid, Vector};
use crate::oracle::{
    aggregate_stacked_are, bruteforce_worstcase_drift, drift_gateaux_derivative,
    optimality_gap_sweep,
};
use crate::riccati::{
    solve_bundle_finite, solve_bundle_infinite, solve_p_finite, solve_p_infinite, RiccatiBundle,
};
use std::time::Instant;

#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{}: {} ({}, {:.2}s)",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.seconds
        )
    }
}

fn grid2000() -> TimeGrid {
    TimeGrid::new(0.0, 1.0, 2000).unwrap()
}

fn outcome(name: &'static str, start: Instant, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Check 1: the drift Riccati matches its closed form on the reference
/// scenario to 1e-8 at 2000 steps, in under a second.
pub fn check_riccati_analytic() -> CheckOutcome {
    let start = Instant::now();
    let m = reference_example();
    let grid = grid2000();
    let p = match solve_p_finite(&m, grid) {
        Ok(p) => p,
        Err(e) => return outcome("riccati_analytic_reproduction", start, false, e.to_string()),
    };
    let mut err: f64 = 0.0;
    for k in 0..=grid.steps() {
        let t = grid.node(k);
        err = err.max((p.node(k)[(0, 0)] - (-1.0 / (t + 1.0) - 0.5)).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let passed = err <= 1e-8 && elapsed < 1.0;
    outcome(
        "riccati_analytic_reproduction",
        start,
        passed,
        format!("max |P - closed form| = {err:.3e} (tol 1e-8), runtime {elapsed:.3}s < 1s"),
    )
}

/// Check 2: the forward decoupling equation escapes at the published time
/// on the full window and survives the shortened one, in under 5 seconds.
pub fn check_z_blowup() -> CheckOutcome {
    let start = Instant::now();
    let m = reference_example();
    let grid = grid2000();
    let bundle = match solve_bundle_finite(&m, grid) {
        Ok(b) => b,
        Err(e) => return outcome("z_blowup_time", start, false, e.to_string()),
    };
    let full = match detect_z_blowup(&m, &bundle, grid) {
        Ok(t) => t,
        Err(e) => return outcome("z_blowup_time", start, false, e.to_string()),
    };
    let short_grid = TimeGrid::new(0.0, 0.7, 1400).unwrap();
    let short = match detect_z_blowup(&m, &bundle, short_grid) {
        Ok(t) => t,
        Err(e) => return outcome("z_blowup_time", start, false, e.to_string()),
    };
    let elapsed = start.elapsed().as_secs_f64();
    match (full, short) {
        (Some(t_star), None) => {
            let dev = (t_star - 0.758276).abs();
            let passed = dev <= 5e-3 && elapsed < 5.0;
            outcome(
                "z_blowup_time",
                start,
                passed,
                format!(
                    "escape at t = {t_star:.6} (|dev| = {dev:.2e} <= 5e-3), none on [0, 0.7], runtime {elapsed:.2}s < 5s"
                ),
            )
        }
        (None, _) => outcome("z_blowup_time", start, false, "no escape detected on [0, 1]".into()),
        (_, Some(t)) => {
            outcome("z_blowup_time", start, false, format!("unexpected escape at {t} on [0, 0.7]"))
        }
    }
}

/// Check 3: the determinant and Riccati-existence certificates agree on both
/// the reference scenario (hold) and the failing variant (fail, witnesses
/// within two grid steps).
pub fn check_certificate_agreement() -> CheckOutcome {
    let start = Instant::now();
    let grid = grid2000();
    let run = || -> Result<(bool, bool, f64), String> {
        let good = reference_example();
        let det_good = check_a2prime_det(&good, 1000).map_err(|e| e.to_string())?;
        let ric_good = check_a2prime_riccati(&good, grid).map_err(|e| e.to_string())?;
        let bad = blowup_example();
        let det_bad = check_a2prime_det(&bad, 1000).map_err(|e| e.to_string())?;
        let ric_bad = check_a2prime_riccati(&bad, grid).map_err(|e| e.to_string())?;
        let (Some(Witness::Time(t_det)), Some(Witness::Time(t_ric))) =
            (det_bad.witness.clone(), ric_bad.witness.clone())
        else {
            return Err("missing time witnesses on the failing scenario".into());
        };
        Ok((
            det_good.holds && ric_good.holds,
            !det_bad.holds && !ric_bad.holds,
            (t_det - t_ric).abs(),
        ))
    };
    match run() {
        Ok((both_hold, both_fail, witness_dev)) => {
            let passed = both_hold && both_fail && witness_dev <= 2.0 * grid.dt();
            outcome(
                "certificate_agreement",
                start,
                passed,
                format!(
                    "reference: both hold = {both_hold}; failing: both fail = {both_fail}, witness gap = {witness_dev:.2e} <= {:.1e}",
                    2.0 * grid.dt()
                ),
            )
        }
        Err(e) => outcome("certificate_agreement", start, false, e),
    }
}

/// Check 4: decoupling and shooting solutions agree to 1e-6, boundary
/// conditions hold to 1e-8, `v = K xbar + phi` to 1e-8, and the ODE residual
/// stays below 1e-5.
pub fn check_consistency_identities() -> CheckOutcome {
    let start = Instant::now();
    let m = reference_example();
    let grid = grid2000();
    let run = || -> Result<(f64, f64, f64, f64), String> {
        let bundle = solve_bundle_finite(&m, grid).map_err(|e| e.to_string())?;
        let (profile, _) = solve_consistency_finite(&m, &bundle, grid).map_err(|e| e.to_string())?;
        let shoot =
            solve_consistency_finite_shooting(&m, &bundle, grid).map_err(|e| e.to_string())?;
        let mut route_disc: f64 = 0.0;
        for k in 0..=grid.steps() {
            route_disc = route_disc.max((profile.state_at(k) - shoot.state_at(k)).amax());
        }
        let h_mat = &m.params().h;
        let bc = profile.sbar[grid.steps()]
            .norm()
            .max(profile.phi[grid.steps()].norm())
            .max((&profile.v[grid.steps()] - h_mat * &profile.xbar[grid.steps()]).norm())
            .max((profile.xbar[0][0] - 1.0).abs())
            .max(profile.l[0].norm());
        let mut v_dev: f64 = 0.0;
        if let RiccatiBundle::Finite { k: kpath, .. } = &bundle {
            for node in 0..=grid.steps() {
                let pred = kpath.node(node) * &profile.xbar[node] + &profile.phi[node];
                v_dev = v_dev.max((&profile.v[node] - pred).norm());
            }
        }
        let residual = consistency_residual(&profile, &m, &bundle);
        Ok((route_disc, bc, v_dev, residual))
    };
    match run() {
        Ok((route, bc, v_dev, residual)) => {
            let passed = route <= 1e-6 && bc <= 1e-8 && v_dev <= 1e-8 && residual <= 1e-5;
            outcome(
                "consistency_identities",
                start,
                passed,
                format!(
                    "routes {route:.2e} <= 1e-6, boundary {bc:.2e} <= 1e-8, v-identity {v_dev:.2e} <= 1e-8, residual {residual:.2e} <= 1e-5"
                ),
            )
        }
        Err(e) => outcome("consistency_identities", start, false, e),
    }
}

/// Check 5: the brute-force maximizer reproduces the Riccati drift law to
/// 1e-4 node-wise and the discrete objective is stationary (1e-6) along ten
/// seeded unit directions.
pub fn check_worstcase_oracle() -> CheckOutcome {
    let start = Instant::now();
    let m = reference_example();
    let run = || -> Result<(f64, f64), String> {
        let fine = grid2000();
        let bundle = solve_bundle_finite(&m, fine).map_err(|e| e.to_string())?;
        let (profile, _) = solve_consistency_finite(&m, &bundle, fine).map_err(|e| e.to_string())?;
        let law = build_decentralized_law(&m, &bundle, &profile).map_err(|e| e.to_string())?;
        let drift_law = build_worstcase_law(&m, &bundle, &profile).map_err(|e| e.to_string())?;

        let steps = 1000usize;
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let u_path: Vec<Vector> =
            (0..=steps).map(|k| law.eval(grid.node(k), &profile.xbar[2 * k])).collect();
        let profiles = vec![u_path; 4];
        let result = bruteforce_worstcase_drift(&m, &profiles, grid).map_err(|e| e.to_string())?;
        let mut drift_disc: f64 = 0.0;
        for k in 0..=steps {
            let expected = drift_law.deterministic(grid.node(k));
            drift_disc = drift_disc.max((&result.drift[k] - expected).norm());
        }

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        let h = grid.dt();
        let mut worst_gateaux: f64 = 0.0;
        for _ in 0..10 {
            let mut dir: Vec<Vector> =
                (0..=steps).map(|_| Vector::from_fn(1, |_, _| rng.gen_range(-1.0..1.0))).collect();
            let mut norm2 = 0.0;
            for (k, d) in dir.iter().enumerate() {
                let w = if k == 0 || k == steps { 0.5 * h } else { h };
                norm2 += w * d.norm_squared();
            }
            let scale = norm2.sqrt();
            for d in &mut dir {
                *d /= scale;
            }
            let gd = drift_gateaux_derivative(&m, &profiles, grid, &result.drift, &dir)
                .map_err(|e| e.to_string())?;
            worst_gateaux = worst_gateaux.max(gd.abs());
        }
        Ok((drift_disc, worst_gateaux))
    };
    match run() {
        Ok((disc, gateaux)) => {
            let passed = disc <= 1e-4 && gateaux <= 1e-6;
            outcome(
                "worstcase_oracle_equivalence",
                start,
                passed,
                format!("drift match {disc:.2e} <= 1e-4, max |Gateaux| {gateaux:.2e} <= 1e-6"),
            )
        }
        Err(e) => outcome("worstcase_oracle_equivalence", start, false, e),
    }
}

/// Check 6: Monte Carlo mean-field error over N in {8,...,128} with 512
/// replications has log-log slope in [-1.3, -0.7], in under two minutes.
pub fn check_meanfield_rate() -> CheckOutcome {
    let start = Instant::now();
    let m = reference_example();
    let run = || -> Result<f64, String> {
        let grid = grid2000();
        let bundle = solve_bundle_finite(&m, grid).map_err(|e| e.to_string())?;
        let (profile, _) = solve_consistency_finite(&m, &bundle, grid).map_err(|e| e.to_string())?;
        let law = build_decentralized_law(&m, &bundle, &profile).map_err(|e| e.to_string())?;
        let drift = build_worstcase_law(&m, &bundle, &profile).map_err(|e| e.to_string())?;
        let cfg = SimConfig::new(8, 512, 1.0 / 2000.0, 7_777);
        let report = meanfield_error_sweep(&m, &law, &drift, &profile, &[8, 16, 32, 64, 128], &cfg)
            .map_err(|e| e.to_string())?;
        report.slope.ok_or_else(|| "degenerate sweep".to_string())
    };
    match run() {
        Ok(slope) => {
            let elapsed = start.elapsed().as_secs_f64();
            let passed = (-1.3..=-0.7).contains(&slope) && elapsed < 120.0;
            outcome(
                "meanfield_rate",
                start,
                passed,
                format!("log-log slope {slope:.3} in [-1.3, -0.7], runtime {elapsed:.1}s < 120s"),
            )
        }
        Err(e) => outcome("meanfield_rate", start, false, e),
    }
}

/// Check 7: per-agent optimality gaps over N in {2, 4, 8} are nonnegative
/// (to -1e-8), nonincreasing, and `gap * sqrt(N)` varies by at most 3x.
pub fn check_optimality_gap() -> CheckOutcome {
    let start = Instant::now();
    let m = reference_example();
    let run = || -> Result<(bool, bool, f64, Vec<f64>), String> {
        let grid = grid2000();
        let bundle = solve_bundle_finite(&m, grid).map_err(|e| e.to_string())?;
        let (profile, _) = solve_consistency_finite(&m, &bundle, grid).map_err(|e| e.to_string())?;
        let table = optimality_gap_sweep(&m, &bundle, &profile, &[2, 4, 8], grid)
            .map_err(|e| e.to_string())?;
        Ok((
            table.ordering_ok,
            table.nonincreasing,
            table.sqrtn_ratio,
            table.rows.iter().map(|r| r.gap).collect(),
        ))
    };
    match run() {
        Ok((ordering, nonincreasing, ratio, gaps)) => {
            let passed = ordering && nonincreasing && ratio <= 3.0;
            outcome(
                "optimality_gap_rate",
                start,
                passed,
                format!(
                    "gaps {:?} >= -1e-8: {ordering}, nonincreasing: {nonincreasing}, sqrt-N ratio {ratio:.2} <= 3",
                    gaps.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>()
                ),
            )
        }
        Err(e) => outcome("optimality_gap_rate", start, false, e),
    }
}

/// Check 8: the scalar infinite-horizon drift equation returns -4 + sqrt(15)
/// with a tiny residual and Hurwitz closed loop, the stacked aggregate at
/// N = 5 matches, and the documented closed-form discrepancy is reported.
pub fn check_infinite_horizon() -> CheckOutcome {
    let start = Instant::now();
    let m = scalar_infinite_example();
    let run = || -> Result<(f64, f64, f64), String> {
        let p = solve_p_infinite(&m).map_err(|e| e.to_string())?;
        let expected = -4.0 + 15.0f64.sqrt();
        let root_dev = (p[(0, 0)] - expected).abs();
        // algebraic residual of the drift equation
        let atil = -1.0; // A + G - rho/2
        let residual = (2.0 * atil * p[(0, 0)] - p[(0, 0)] * p[(0, 0)] / 4.0 - 0.25).abs();
        let agg = aggregate_stacked_are(&m, 5).map_err(|e| e.to_string())?;
        let agg_dev = (agg[(0, 0)] - p[(0, 0)]).abs();
        if root_dev > 1e-10 {
            return Err(format!("root deviates by {root_dev:.2e}"));
        }
        Ok((residual, agg_dev, p[(0, 0)]))
    };
    match run() {
        Ok((residual, agg_dev, p_val)) => {
            // the printed closed form of the aggregate solves a different
            // quadratic; its value on this scenario is -1, not the ARE root
            let printed_closed_form = -1.0;
            let documented_gap = (p_val - printed_closed_form).abs();
            let passed = residual <= 1e-10 && agg_dev <= 1e-8;
            outcome(
                "infinite_horizon_cross_check",
                start,
                passed,
                format!(
                    "residual {residual:.2e} <= 1e-10, aggregate (N=5) dev {agg_dev:.2e} <= 1e-8; documented closed-form discrepancy {documented_gap:.3} (ARE route is authoritative)"
                ),
            )
        }
        Err(e) => outcome("infinite_horizon_cross_check", start, false, e),
    }
}

/// Check 9: the noise-free simulation tracks the deterministic mean to 1e-6,
/// and the zero-weight scenario produces identically zero laws, drift, and
/// cost.
pub fn check_degenerate_exactness() -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(f64, f64, f64, f64), String> {
        let m = reference_example();
        let grid = grid2000();
        let bundle = solve_bundle_finite(&m, grid).map_err(|e| e.to_string())?;
        let (profile, _) = solve_consistency_finite(&m, &bundle, grid).map_err(|e| e.to_string())?;
        let law = build_decentralized_law(&m, &bundle, &profile).map_err(|e| e.to_string())?;
        let drift = build_worstcase_law(&m, &bundle, &profile).map_err(|e| e.to_string())?;
        let mut params = m.params().clone();
        params.sigma = crate::numerics::Matrix::zeros(1, 1);
        params.init_spread = 0.0;
        let m0 = validate_params(params).map_err(|e| e.to_string())?;
        let cfg = SimConfig::new(4, 1, 1.0 / 2000.0, 5);
        let result = simulate(&m0, &law, &drift, &profile, &cfg).map_err(|e| e.to_string())?;
        let track_dev = result.mf_error_sup.sqrt();

        let z = zero_cost_example();
        let zbundle = solve_bundle_finite(&z, grid).map_err(|e| e.to_string())?;
        let (zprofile, _) =
            solve_consistency_finite(&z, &zbundle, grid).map_err(|e| e.to_string())?;
        let zlaw = build_decentralized_law(&z, &zbundle, &zprofile).map_err(|e| e.to_string())?;
        let zdrift = build_worstcase_law(&z, &zbundle, &zprofile).map_err(|e| e.to_string())?;
        let probe = Vector::from_element(1, 2.5);
        let law_norm = (0..=10)
            .map(|i| zlaw.eval(i as f64 / 10.0, &probe).norm())
            .fold(0.0f64, f64::max);
        let drift_norm = (0..=10)
            .map(|i| zdrift.eval(i as f64 / 10.0, &probe).norm())
            .fold(0.0f64, f64::max);
        let zcfg = SimConfig::new(8, 4, 1.0 / 2000.0, 9);
        let zres = simulate(&z, &zlaw, &zdrift, &zprofile, &zcfg).map_err(|e| e.to_string())?;
        Ok((track_dev, law_norm, drift_norm, zres.social_cost_mean.abs()))
    };
    match run() {
        Ok((track, law_n, drift_n, cost)) => {
            let passed = track <= 1e-6 && law_n == 0.0 && drift_n == 0.0 && cost == 0.0;
            outcome(
                "degenerate_exactness",
                start,
                passed,
                format!(
                    "mean tracking {track:.2e} <= 1e-6; zero scenario: law {law_n}, drift {drift_n}, cost {cost}"
                ),
            )
        }
        Err(e) => outcome("degenerate_exactness", start, false, e),
    }
}

/// Check 10: the social-cost decomposition identity holds to 1e-6 relative
/// on ten seeded perturbations with every total second-order term
/// nonnegative.
pub fn check_cost_decomposition() -> CheckOutcome {
    let start = Instant::now();
    let m = reference_example();
    let run = || -> Result<(f64, f64), String> {
        let grid = grid2000();
        let bundle = solve_bundle_finite(&m, grid).map_err(|e| e.to_string())?;
        let (profile, _) = solve_consistency_finite(&m, &bundle, grid).map_err(|e| e.to_string())?;
        let report = cost_decomposition_check(&m, &bundle, &profile, 2024, 4, 10)
            .map_err(|e| e.to_string())?;
        let worst_rel =
            report.rows.iter().map(|r| r.identity_rel_error).fold(0.0f64, f64::max);
        let min_total =
            report.rows.iter().map(|r| r.jtilde_total).fold(f64::INFINITY, f64::min);
        Ok((worst_rel, min_total))
    };
    match run() {
        Ok((rel, min_total)) => {
            let passed = rel <= 1e-6 && min_total >= -1e-10;
            outcome(
                "cost_decomposition",
                start,
                passed,
                format!(
                    "identity rel error {rel:.2e} <= 1e-6, min total second-order term {min_total:.3e} >= -1e-10"
                ),
            )
        }
        Err(e) => outcome("cost_decomposition", start, false, e),
    }
}

/// Extra smoke check for the infinite-horizon pipeline (not part of the
/// numbered suite): the consistency profile satisfies its equation.
pub fn check_infinite_pipeline() -> CheckOutcome {
    let start = Instant::now();
    let m = scalar_infinite_example();
    let run = || -> Result<f64, String> {
        let bundle = solve_bundle_infinite(&m).map_err(|e| e.to_string())?;
        let (profile, _) = solve_consistency_infinite(&m, &bundle).map_err(|e| e.to_string())?;
        Ok(consistency_residual(&profile, &m, &bundle))
    };
    match run() {
        Ok(res) => outcome(
            "infinite_pipeline_residual",
            start,
            res <= 1e-5,
            format!("consistency residual {res:.2e} <= 1e-5"),
        ),
        Err(e) => outcome("infinite_pipeline_residual", start, false, e),
    }
}

/// Run every check in order; the heavy Monte Carlo check runs last.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        check_riccati_analytic(),
        check_z_blowup(),
        check_certificate_agreement(),
        check_consistency_identities(),
        check_worstcase_oracle(),
        check_optimality_gap(),
        check_infinite_horizon(),
        check_degenerate_exactness(),
        check_cost_decomposition(),
        check_meanfield_rate(),
    ]
}
