//! Command-line driver: certificate checks, synthesis, simulation, rate
//! sweeps, and the bundled end-to-end verification suite. Every run writes a
//! manifest into its output directory; identical (scenario bytes, command,
//! seed, steps) produce bit-identical output trees.
//!
//! Exit codes: 0 on success, 1 when an assumption or run fails, 2 on usage
//! or parse errors.

use clap::{Args, Parser, Subcommand};
use mfgsoc::consistency::{
    detect_z_blowup, solve_consistency_finite, solve_consistency_infinite, solve_z_path,
    ConsistencyProfile,
};
use mfgsoc::control::{
    build_decentralized_law, build_worstcase_law, evaluate_social_cost, meanfield_error_sweep,
    simulate, SimConfig,
};
use mfgsoc::convexity::{
    check_a2prime_det, check_a2prime_riccati, check_infinite_convexity, probe_p2_convexity,
    ConvexityReport,
};
use mfgsoc::model::{self, fmt17, Horizon, ModelError, ValidatedModel};
use mfgsoc::numerics::{MatrixPath, TimeGrid};
use mfgsoc::oracle::optimality_gap_sweep;
use mfgsoc::riccati::{solve_bundle_finite, solve_bundle_infinite, RiccatiBundle};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mfgsoc", version, about = "Robust social-optimal control for mean-field LQG populations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Output directory for result files and the run manifest.
    #[arg(long, default_value = "mfgsoc-out")]
    out: PathBuf,
    /// Time-grid steps over the horizon (or its truncation).
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// RNG seed; falls back to the MFG_SEED environment variable, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Proceed past failed certificate checks (results carry a warning).
    #[arg(long, default_value_t = false)]
    force: bool,
    /// Replace the horizon length T (finite) or the discount rate rho
    /// (infinite) before validation.
    #[arg(long)]
    horizon_override: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the convexity certificates and write convexity.json.
    Check {
        scenario: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
        /// Determinant samples over the horizon.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Solve the Riccati equations and the consistency system; write the
    /// coefficient tables and law description.
    Synthesize {
        scenario: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
        /// Also run the forward blow-up detector and write z_blowup.json
        /// plus the surviving trajectory nodes.
        #[arg(long, default_value_t = false)]
        detect_z_blowup: bool,
    },
    /// Monte Carlo simulation of the closed loop; writes costs.csv and
    /// meanfield_error.csv.
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 64)]
        agents: usize,
        #[arg(long, default_value_t = 256)]
        replications: usize,
    },
    /// Mean-field error sweep plus the centralized optimality-gap table.
    Sweep {
        scenario: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
        /// Population sizes for the Monte Carlo rate estimate.
        #[arg(long, value_delimiter = ',', default_values_t = vec![8, 16, 32, 64, 128])]
        agents: Vec<usize>,
        /// Population sizes for the exact gap table.
        #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4, 8])]
        gap_agents: Vec<usize>,
        #[arg(long, default_value_t = 512)]
        replications: usize,
    },
    /// Run the end-to-end verification suite on the bundled reference
    /// scenarios, printing one pass/fail line per check.
    VerifyPaperExample {
        #[arg(long, default_value = "mfgsoc-out")]
        out: PathBuf,
    },
}

fn seed_of(common: &CommonOpts) -> u64 {
    common.seed.or_else(|| std::env::var("MFG_SEED").ok().and_then(|s| s.parse().ok())).unwrap_or(0)
}

#[derive(serde::Serialize)]
struct RunManifest {
    tool_version: &'static str,
    command: String,
    scenario_path: String,
    scenario_sha256: String,
    seed: u64,
    grid_steps: usize,
    output_directory: String,
}

fn write_manifest(
    out: &Path,
    command: &str,
    scenario: &Path,
    scenario_bytes: &[u8],
    seed: u64,
    steps: usize,
) -> std::io::Result<()> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        scenario_path: scenario.display().to_string(),
        scenario_sha256: format!("{:x}", Sha256::digest(scenario_bytes)),
        seed,
        grid_steps: steps,
        output_directory: out.display().to_string(),
    };
    std::fs::write(
        out.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )
}

fn load_model(path: &Path, horizon_override: Option<f64>) -> Result<(ValidatedModel, Vec<u8>), ExitCode> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return Err(ExitCode::from(2));
        }
    };
    let text = String::from_utf8_lossy(&bytes);
    let mut params = match model::scenario_from_json(&text) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return Err(ExitCode::from(2));
        }
    };
    if let Some(value) = horizon_override {
        params.horizon = match params.horizon {
            Horizon::Finite { .. } => Horizon::Finite { t: value },
            Horizon::Infinite { .. } => Horizon::Infinite { rho: value },
        };
    }
    match model::validate_params(params) {
        Ok(m) => Ok((m, bytes)),
        Err(e @ (ModelError::Parse { .. } | ModelError::SchemaViolation(_))) => {
            eprintln!("error: {e}");
            Err(ExitCode::from(2))
        }
        Err(e) => {
            eprintln!("error: invalid scenario: {e}");
            Err(ExitCode::from(1))
        }
    }
}

fn horizon_grid(m: &ValidatedModel, steps: usize) -> Result<TimeGrid, ExitCode> {
    let t1 = match m.horizon() {
        Horizon::Finite { t } => t,
        // the consistency solve picks its own truncation for infinite
        // horizons; this grid only covers finite-horizon paths
        Horizon::Infinite { .. } => 1.0,
    };
    TimeGrid::new(0.0, t1, steps).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

fn run_certificates(
    m: &ValidatedModel,
    grid: TimeGrid,
    samples: usize,
) -> Result<Vec<ConvexityReport>, String> {
    let mut reports = Vec::new();
    match m.horizon() {
        Horizon::Finite { .. } => {
            reports.push(check_a2prime_det(m, samples).map_err(|e| e.to_string())?);
            reports.push(check_a2prime_riccati(m, grid).map_err(|e| e.to_string())?);
            if let Ok(bundle) = solve_bundle_finite(m, grid) {
                reports.push(probe_p2_convexity(m, &bundle, 64, 5).map_err(|e| e.to_string())?);
            }
        }
        Horizon::Infinite { .. } => {
            reports.push(check_infinite_convexity(m).map_err(|e| e.to_string())?);
        }
    }
    Ok(reports)
}

fn matrix_path_csv(path: &MatrixPath, name: &str) -> String {
    let grid = path.grid();
    let (rows, cols) = {
        let sample = path.node(path.first_node());
        (sample.nrows(), sample.ncols())
    };
    let mut head = vec!["t".to_string()];
    for i in 0..rows {
        for j in 0..cols {
            head.push(format!("{name}_{i}_{j}"));
        }
    }
    let mut out = head.join(",") + "\n";
    for k in path.first_node()..=path.last_node() {
        let mut row = vec![fmt17(grid.node(k))];
        let mat = path.node(k);
        for i in 0..rows {
            for j in 0..cols {
                row.push(fmt17(mat[(i, j)]));
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

struct Synthesis {
    bundle: RiccatiBundle,
    profile: ConsistencyProfile,
}

fn synthesize_pipeline(m: &ValidatedModel, grid: TimeGrid) -> Result<Synthesis, String> {
    match m.horizon() {
        Horizon::Finite { .. } => {
            let bundle = solve_bundle_finite(m, grid).map_err(|e| e.to_string())?;
            let (profile, _) = solve_consistency_finite(m, &bundle, grid).map_err(|e| e.to_string())?;
            Ok(Synthesis { bundle, profile })
        }
        Horizon::Infinite { .. } => {
            let bundle = solve_bundle_infinite(m).map_err(|e| e.to_string())?;
            let (profile, _) = solve_consistency_infinite(m, &bundle).map_err(|e| e.to_string())?;
            Ok(Synthesis { bundle, profile })
        }
    }
}

fn write_synthesis(out: &Path, m: &ValidatedModel, syn: &Synthesis) -> std::io::Result<()> {
    let grid = syn.profile.grid;
    let (p_path, k_path, pt_path) = match &syn.bundle {
        RiccatiBundle::Finite { p, k, ptilde, .. } => (p.clone(), k.clone(), ptilde.clone()),
        RiccatiBundle::Infinite { p, k, ptilde, .. } => (
            MatrixPath::constant(grid, p.clone()),
            MatrixPath::constant(grid, k.clone()),
            ptilde.as_ref().map(|pt| MatrixPath::constant(grid, pt.clone())),
        ),
    };
    std::fs::write(out.join("riccati_P.csv"), matrix_path_csv(&p_path, "P"))?;
    std::fs::write(out.join("riccati_K.csv"), matrix_path_csv(&k_path, "K"))?;
    if let Some(pt) = &pt_path {
        std::fs::write(out.join("riccati_Ptilde.csv"), matrix_path_csv(pt, "Ptilde"))?;
    }
    std::fs::write(out.join("consistency.csv"), syn.profile.to_csv())?;

    let vecs = |v: &Vec<mfgsoc::Vector>| -> Vec<Vec<f64>> {
        v.iter().map(|x| x.iter().copied().collect()).collect()
    };
    let mats = |p: &MatrixPath| -> Vec<Vec<f64>> {
        (p.first_node()..=p.last_node()).map(|k| p.node(k).iter().copied().collect()).collect()
    };
    let law = serde_json::json!({
        "grid": {"t0": grid.t0(), "t1": grid.t1(), "steps": grid.steps()},
        "control": "u(t, x) = -R1^{-1} B^T (K(t) x - P(t) l(t) + phi(t))",
        "drift": "f(t, x_avg) = -R2^{-1} (P(t) x_avg + Ptilde(t) (x_avg - xbar(t)) + sbar(t))",
        "n": m.params().n,
        "K": mats(&k_path),
        "P": mats(&p_path),
        "Ptilde": pt_path.as_ref().map(mats),
        "l": vecs(&syn.profile.l),
        "phi": vecs(&syn.profile.phi),
        "xbar": vecs(&syn.profile.xbar),
        "sbar": vecs(&syn.profile.sbar),
    });
    std::fs::write(out.join("law.json"), serde_json::to_string_pretty(&law).unwrap() + "\n")
}

fn prepare_out(out: &Path) -> Result<(), ExitCode> {
    std::fs::create_dir_all(out).map_err(|e| {
        eprintln!("error: cannot create {}: {e}", out.display());
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Check { scenario, common, samples } => {
            let (m, bytes) = match load_model(&scenario, common.horizon_override) {
                Ok(v) => v,
                Err(code) => return code,
            };
            if prepare_out(&common.out).is_err() {
                return ExitCode::from(1);
            }
            let grid = match horizon_grid(&m, common.steps) {
                Ok(g) => g,
                Err(code) => return code,
            };
            let reports = match run_certificates(&m, grid, samples) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            std::fs::write(
                common.out.join("convexity.json"),
                serde_json::to_string_pretty(&reports).unwrap() + "\n",
            )
            .ok();
            write_manifest(&common.out, "check", &scenario, &bytes, seed_of(&common), common.steps)
                .ok();
            let all_hold = reports.iter().all(|r| r.holds);
            for r in &reports {
                println!("{:?}: {}", r.condition, if r.holds { "holds" } else { "fails" });
            }
            if all_hold {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }

        Command::Synthesize { scenario, common, detect_z_blowup: run_z } => {
            let (m, bytes) = match load_model(&scenario, common.horizon_override) {
                Ok(v) => v,
                Err(code) => return code,
            };
            if prepare_out(&common.out).is_err() {
                return ExitCode::from(1);
            }
            let grid = match horizon_grid(&m, common.steps) {
                Ok(g) => g,
                Err(code) => return code,
            };
            match run_certificates(&m, grid, 1000) {
                Ok(reports) if reports.iter().all(|r| r.holds) => {}
                Ok(_) if common.force => eprintln!("warning: proceeding past failed certificates"),
                Ok(reports) => {
                    for r in &reports {
                        if !r.holds {
                            eprintln!("certificate {:?} fails (detail {})", r.condition, r.detail);
                        }
                    }
                    eprintln!("error: certificates failed; rerun with --force to proceed");
                    return ExitCode::from(1);
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            let syn = match synthesize_pipeline(&m, grid) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            if write_synthesis(&common.out, &m, &syn).is_err() {
                eprintln!("error: cannot write synthesis outputs");
                return ExitCode::from(1);
            }
            if run_z {
                match (detect_z_blowup(&m, &syn.bundle, grid), solve_z_path(&m, &syn.bundle, grid)) {
                    (Ok(time), Ok(zpath)) => {
                        let report = serde_json::json!({
                            "window": [grid.t0(), grid.t1()],
                            "blowup_time": time,
                            "refinement_tolerance": 1e-3,
                        });
                        std::fs::write(
                            common.out.join("z_blowup.json"),
                            serde_json::to_string_pretty(&report).unwrap() + "\n",
                        )
                        .ok();
                        std::fs::write(common.out.join("z_path.csv"), matrix_path_csv(&zpath, "Z"))
                            .ok();
                    }
                    (Err(e), _) | (_, Err(e)) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(1);
                    }
                }
            }
            write_manifest(&common.out, "synthesize", &scenario, &bytes, seed_of(&common), common.steps)
                .ok();
            ExitCode::SUCCESS
        }

        Command::Simulate { scenario, common, agents, replications } => {
            let (m, bytes) = match load_model(&scenario, common.horizon_override) {
                Ok(v) => v,
                Err(code) => return code,
            };
            if prepare_out(&common.out).is_err() {
                return ExitCode::from(1);
            }
            let grid = match horizon_grid(&m, common.steps) {
                Ok(g) => g,
                Err(code) => return code,
            };
            if !common.force {
                if let Ok(reports) = run_certificates(&m, grid, 1000) {
                    if !reports.iter().all(|r| r.holds) {
                        eprintln!("error: certificates failed; rerun with --force to proceed");
                        return ExitCode::from(1);
                    }
                }
            }
            let seed = seed_of(&common);
            let run = || -> Result<(), String> {
                let syn = synthesize_pipeline(&m, grid)?;
                let law = build_decentralized_law(&m, &syn.bundle, &syn.profile)
                    .map_err(|e| e.to_string())?;
                let drift = build_worstcase_law(&m, &syn.bundle, &syn.profile)
                    .map_err(|e| e.to_string())?;
                let dt = (syn.profile.grid.t1() - syn.profile.grid.t0())
                    / syn.profile.grid.steps() as f64;
                let cfg = SimConfig::new(agents, replications, dt, seed);
                let result =
                    simulate(&m, &law, &drift, &syn.profile, &cfg).map_err(|e| e.to_string())?;

                let mut costs_csv = String::from("replication,agent,cost\n");
                for (rep, row) in result.costs.iter().enumerate() {
                    for (agent, cost) in row.iter().enumerate() {
                        costs_csv.push_str(&format!("{rep},{agent},{}\n", fmt17(*cost)));
                    }
                }
                std::fs::write(common.out.join("costs.csv"), costs_csv).map_err(|e| e.to_string())?;
                let mf_csv = format!(
                    "N,estimate,stderr\n{agents},{},{}\n",
                    fmt17(result.mf_error_sup),
                    fmt17(result.mf_error_sup_stderr)
                );
                std::fs::write(common.out.join("meanfield_error.csv"), mf_csv)
                    .map_err(|e| e.to_string())?;
                let stats = evaluate_social_cost(&result);
                std::fs::write(
                    common.out.join("cost_stats.json"),
                    serde_json::to_string_pretty(&stats).unwrap() + "\n",
                )
                .map_err(|e| e.to_string())?;
                Ok(())
            };
            if let Err(e) = run() {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            write_manifest(&common.out, "simulate", &scenario, &bytes, seed, common.steps).ok();
            ExitCode::SUCCESS
        }

        Command::Sweep { scenario, common, agents, gap_agents, replications } => {
            if agents.len() < 3 {
                eprintln!("error: the sweep needs at least three population sizes");
                return ExitCode::from(2);
            }
            let (m, bytes) = match load_model(&scenario, common.horizon_override) {
                Ok(v) => v,
                Err(code) => return code,
            };
            if prepare_out(&common.out).is_err() {
                return ExitCode::from(1);
            }
            let grid = match horizon_grid(&m, common.steps) {
                Ok(g) => g,
                Err(code) => return code,
            };
            let seed = seed_of(&common);
            let run = || -> Result<(bool, bool), String> {
                let syn = synthesize_pipeline(&m, grid)?;
                let law = build_decentralized_law(&m, &syn.bundle, &syn.profile)
                    .map_err(|e| e.to_string())?;
                let drift = build_worstcase_law(&m, &syn.bundle, &syn.profile)
                    .map_err(|e| e.to_string())?;
                let dt = (syn.profile.grid.t1() - syn.profile.grid.t0())
                    / syn.profile.grid.steps() as f64;
                let cfg = SimConfig::new(agents[0], replications, dt, seed);
                let report = meanfield_error_sweep(&m, &law, &drift, &syn.profile, &agents, &cfg)
                    .map_err(|e| e.to_string())?;
                std::fs::write(
                    common.out.join("sweep_report.json"),
                    serde_json::to_string_pretty(&report).unwrap() + "\n",
                )
                .map_err(|e| e.to_string())?;
                let slope_ok = report.slope.map(|s| (-1.3..=-0.7).contains(&s)).unwrap_or(false);

                let gap_ok = if m.horizon().is_finite() && !gap_agents.is_empty() {
                    let table = optimality_gap_sweep(&m, &syn.bundle, &syn.profile, &gap_agents, grid)
                        .map_err(|e| e.to_string())?;
                    std::fs::write(common.out.join("gap_table.csv"), table.to_csv())
                        .map_err(|e| e.to_string())?;
                    table.ordering_ok && table.sqrtn_ratio <= 3.0
                } else {
                    true
                };
                Ok((slope_ok, gap_ok))
            };
            match run() {
                Ok((slope_ok, gap_ok)) => {
                    write_manifest(&common.out, "sweep", &scenario, &bytes, seed, common.steps).ok();
                    println!("slope in band: {slope_ok}; gap behavior in band: {gap_ok}");
                    if slope_ok && gap_ok {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }

        Command::VerifyPaperExample { out } => {
            if prepare_out(&out).is_err() {
                return ExitCode::from(1);
            }
            let outcomes = mfgsoc::verification::run_all();
            for o in &outcomes {
                println!("{}", o.line());
            }
            std::fs::write(
                out.join("verification.json"),
                serde_json::to_string_pretty(&outcomes).unwrap() + "\n",
            )
            .ok();
            if outcomes.iter().all(|o| o.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
