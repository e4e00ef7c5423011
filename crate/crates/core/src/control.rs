//! Decentralized feedback law, realized worst-case drift, closed-loop Monte
//! Carlo simulation, and the empirical rate checks.
//!
//! The feedback map is `u(t, x) = -R1^{-1} B^T (K(t) x - P(t) l(t) + phi(t))`
//! and the realized adversarial drift along the closed loop is
//! `f(t, x_avg) = -R2^{-1} (P x_avg + Ptilde (x_avg - xbar) + sbar)`; both
//! are exact table lookups at grid nodes and linear interpolants between
//! them. The drift representation is exact only along the closed loop of the
//! synthesized law; worst-case evaluation for arbitrary controls lives in
//! the oracle module.
//!
//! Simulation advances the drift with a Heun predictor-corrector and adds
//! standard Euler-Maruyama noise increments (the noise is additive, so
//! strong order one is preserved; the second-order drift is what lets the
//! noise-free degenerate runs track the deterministic mean to 1e-6).
//! Replications and agents draw from counter-split ChaCha streams, making
//! runs bit-reproducible and agent-exchangeable.

use crate::consistency::ConsistencyProfile;
use crate::convexity::direction_profile;
use crate::model::{Horizon, ValidatedModel};
use crate::numerics::{self, Direction, Matrix, NumericsError, TimeGrid, Vector};
use crate::riccati::RiccatiBundle;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// State norms beyond this abort a simulation.
pub const STABILITY_LIMIT: f64 = 1e10;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("bundle and profile grids are incompatible")]
    GridMismatch,
    #[error("the mean-field-error Riccati solution is unavailable")]
    MissingPtilde,
    #[error("simulation became unstable at t = {time}")]
    UnstableSimulation { time: f64 },
    #[error("bad simulation config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn interp_mats(grid: &TimeGrid, table: &[Matrix], t: f64) -> Matrix {
    let x = ((t - grid.t0()) / grid.dt()).clamp(0.0, grid.steps() as f64);
    let k = (x.floor() as usize).min(grid.steps().saturating_sub(1));
    let w = x - k as f64;
    if w == 0.0 {
        table[k].clone()
    } else {
        &table[k] * (1.0 - w) + &table[k + 1] * w
    }
}

fn interp_vecs(grid: &TimeGrid, table: &[Vector], t: f64) -> Vector {
    let x = ((t - grid.t0()) / grid.dt()).clamp(0.0, grid.steps() as f64);
    let k = (x.floor() as usize).min(grid.steps().saturating_sub(1));
    let w = x - k as f64;
    if w == 0.0 {
        table[k].clone()
    } else {
        &table[k] * (1.0 - w) + &table[k + 1] * w
    }
}

/// Closed-form decentralized feedback law on a grid.
#[derive(Debug, Clone)]
pub struct ControlLaw {
    grid: TimeGrid,
    k: Vec<Matrix>,
    p: Vec<Matrix>,
    l: Vec<Vector>,
    phi: Vec<Vector>,
    r1_inv_bt: Matrix,
}

impl ControlLaw {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Feedback gain `-R1^{-1} B^T K(t)`.
    pub fn feedback_gain(&self, t: f64) -> Matrix {
        -&self.r1_inv_bt * interp_mats(&self.grid, &self.k, t)
    }

    /// Affine offset `R1^{-1} B^T (P(t) l(t) - phi(t))`.
    pub fn offset(&self, t: f64) -> Vector {
        let pl = interp_mats(&self.grid, &self.p, t) * interp_vecs(&self.grid, &self.l, t);
        &self.r1_inv_bt * (pl - interp_vecs(&self.grid, &self.phi, t))
    }

    /// `u(t, x) = -R1^{-1} B^T (K(t) x - P(t) l(t) + phi(t))`.
    pub fn eval(&self, t: f64, x: &Vector) -> Vector {
        self.feedback_gain(t) * x + self.offset(t)
    }

    /// Nodal tables of gain and offset on an arbitrary grid.
    fn tables_on(&self, grid: &TimeGrid) -> (Vec<Matrix>, Vec<Vector>) {
        let gains = (0..grid.num_nodes()).map(|k| self.feedback_gain(grid.node(k))).collect();
        let offs = (0..grid.num_nodes()).map(|k| self.offset(grid.node(k))).collect();
        (gains, offs)
    }
}

/// Realized worst-case drift law along the synthesized closed loop.
#[derive(Debug, Clone)]
pub struct DriftLaw {
    grid: TimeGrid,
    p: Vec<Matrix>,
    ptilde: Vec<Matrix>,
    xbar: Vec<Vector>,
    sbar: Vec<Vector>,
    r2_inv: Matrix,
}

impl DriftLaw {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `f(t, x_avg) = -R2^{-1} (P x_avg + Ptilde (x_avg - xbar(t)) + sbar(t))`.
    pub fn eval(&self, t: f64, x_avg: &Vector) -> Vector {
        let p = interp_mats(&self.grid, &self.p, t);
        let pt = interp_mats(&self.grid, &self.ptilde, t);
        let xbar = interp_vecs(&self.grid, &self.xbar, t);
        let sbar = interp_vecs(&self.grid, &self.sbar, t);
        -&self.r2_inv * (p * x_avg + pt * (x_avg - xbar) + sbar)
    }

    /// Deterministic branch `-R2^{-1} (P xbar + sbar)(t)`.
    pub fn deterministic(&self, t: f64) -> Vector {
        let p = interp_mats(&self.grid, &self.p, t);
        let xbar = interp_vecs(&self.grid, &self.xbar, t);
        let sbar = interp_vecs(&self.grid, &self.sbar, t);
        -&self.r2_inv * (p * xbar + sbar)
    }

    /// Gain/offset split at a time: `f = gain * x_avg + offset`.
    fn affine_at(&self, t: f64) -> (Matrix, Vector) {
        let p = interp_mats(&self.grid, &self.p, t);
        let pt = interp_mats(&self.grid, &self.ptilde, t);
        let xbar = interp_vecs(&self.grid, &self.xbar, t);
        let sbar = interp_vecs(&self.grid, &self.sbar, t);
        let gain = -&self.r2_inv * (p + &pt);
        let offset = &self.r2_inv * (pt * xbar - sbar);
        (gain, offset)
    }
}

fn bundle_tables(
    bundle: &RiccatiBundle,
    grid: TimeGrid,
) -> Result<(Vec<Matrix>, Vec<Matrix>, Option<Vec<Matrix>>), ControlError> {
    match bundle {
        RiccatiBundle::Finite { grid: bg, p, k, ptilde } => {
            if bg != &grid {
                return Err(ControlError::GridMismatch);
            }
            Ok((
                (0..grid.num_nodes()).map(|i| p.node(i).clone()).collect(),
                (0..grid.num_nodes()).map(|i| k.node(i).clone()).collect(),
                ptilde
                    .as_ref()
                    .map(|pt| (0..grid.num_nodes()).map(|i| pt.node(i).clone()).collect()),
            ))
        }
        RiccatiBundle::Infinite { p, k, ptilde, .. } => Ok((
            vec![p.clone(); grid.num_nodes()],
            vec![k.clone(); grid.num_nodes()],
            ptilde.as_ref().map(|pt| vec![pt.clone(); grid.num_nodes()]),
        )),
    }
}

/// Assemble the decentralized feedback law from the Riccati bundle and the
/// consistency profile (their grids must agree for a finite horizon).
pub fn build_decentralized_law(
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
    profile: &ConsistencyProfile,
) -> Result<ControlLaw, ControlError> {
    let grid = profile.grid;
    let (p, k, _) = bundle_tables(bundle, grid)?;
    Ok(ControlLaw {
        grid,
        k,
        p,
        l: profile.l.clone(),
        phi: profile.phi.clone(),
        r1_inv_bt: m.r1_inv() * m.params().b.transpose(),
    })
}

/// Assemble the realized worst-case drift law; requires the mean-field-error
/// Riccati solution.
pub fn build_worstcase_law(
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
    profile: &ConsistencyProfile,
) -> Result<DriftLaw, ControlError> {
    let grid = profile.grid;
    let (p, _, ptilde) = bundle_tables(bundle, grid)?;
    let ptilde = ptilde.ok_or(ControlError::MissingPtilde)?;
    Ok(DriftLaw {
        grid,
        p,
        ptilde,
        xbar: profile.xbar.clone(),
        sbar: profile.sbar.clone(),
        r2_inv: m.r2_inv(),
    })
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_agents: usize,
    pub replications: usize,
    pub dt: f64,
    pub seed: u64,
    pub record_paths: bool,
}

impl SimConfig {
    pub fn new(n_agents: usize, replications: usize, dt: f64, seed: u64) -> Self {
        Self { n_agents, replications, dt, seed, record_paths: false }
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub grid: TimeGrid,
    /// Per-replication, per-agent realized cost.
    pub costs: Vec<Vec<f64>>,
    /// Mean per-agent social cost across replications.
    pub social_cost_mean: f64,
    pub social_cost_stderr: f64,
    /// Mean realized adversarial penalty contribution (the subtracted term).
    pub penalty_mean: f64,
    /// Per-node mean of |x_avg - xbar|^2 + |s_hat - sbar|^2.
    pub mf_error_nodes: Vec<f64>,
    pub mf_error_sup: f64,
    pub mf_error_sup_stderr: f64,
    /// Realized drift along the first replication.
    pub drift_path: Vec<Vector>,
    /// First-replication agent trajectories when `record_paths` is set
    /// (`trajectories[node][agent]`).
    pub trajectories: Option<Vec<Vec<Vector>>>,
    /// Truncation tail bound added to the reported cost uncertainty
    /// (infinite horizon only).
    pub cost_uncertainty: f64,
}

/// Simulate the N-agent closed loop under the decentralized law and the
/// realized worst-case drift. Deterministic per configuration: identical
/// inputs give bit-identical results.
pub fn simulate(
    m: &ValidatedModel,
    law: &ControlLaw,
    drift: &DriftLaw,
    profile: &ConsistencyProfile,
    cfg: &SimConfig,
) -> Result<SimResult, ControlError> {
    let n_agents = cfg.n_agents;
    simulate_with_streams(m, law, drift, profile, cfg, &|rep, agent| {
        (rep * n_agents + agent) as u64 + 1
    })
}

/// Simulation core with an explicit (replication, agent) -> stream map;
/// permuting the agent streams permutes per-agent costs bit-exactly.
pub(crate) fn simulate_with_streams(
    m: &ValidatedModel,
    law: &ControlLaw,
    drift: &DriftLaw,
    profile: &ConsistencyProfile,
    cfg: &SimConfig,
    stream_of: &dyn Fn(usize, usize) -> u64,
) -> Result<SimResult, ControlError> {
    let prm = m.params();
    let n = prm.n;
    let n_agents = cfg.n_agents;
    if n_agents == 0 || cfg.replications == 0 {
        return Err(ControlError::BadConfig("need at least one agent and one replication".into()));
    }
    let span = profile.grid.t1() - profile.grid.t0();
    let steps_f = span / cfg.dt;
    let steps = steps_f.round() as usize;
    if steps == 0 || (steps_f - steps as f64).abs() > 1e-9 * steps_f.max(1.0) {
        return Err(ControlError::BadConfig(format!(
            "dt = {} does not divide the horizon span {span}",
            cfg.dt
        )));
    }
    let grid = TimeGrid::new(profile.grid.t0(), profile.grid.t1(), steps)?;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let rho = match m.horizon() {
        Horizon::Finite { .. } => 0.0,
        Horizon::Infinite { rho } => rho,
    };
    let finite = m.horizon().is_finite();

    // tables at simulation nodes
    let (ugain, uoff) = law.tables_on(&grid);
    let (fgain, foff): (Vec<Matrix>, Vec<Vector>) =
        (0..grid.num_nodes()).map(|k| drift.affine_at(grid.node(k))).unzip();
    let xbar_tab: Vec<Vector> =
        (0..grid.num_nodes()).map(|k| interp_vecs(&profile.grid, &profile.xbar, grid.node(k))).collect();
    let ptilde_tab: Vec<Matrix> =
        (0..grid.num_nodes()).map(|k| interp_mats(&drift.grid, &drift.ptilde, grid.node(k))).collect();

    let mut costs = vec![vec![0.0; n_agents]; cfg.replications];
    let mut penalty_acc = 0.0;
    let mut mf_mean = vec![0.0; grid.num_nodes()];
    let mut mf_m2 = vec![0.0; grid.num_nodes()];
    let mut drift_path: Vec<Vector> = Vec::new();
    let mut trajectories: Option<Vec<Vec<Vector>>> = None;
    let mut social_acc = Vec::with_capacity(cfg.replications);

    for rep in 0..cfg.replications {
        let mut rngs: Vec<ChaCha12Rng> = (0..n_agents)
            .map(|agent| {
                let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream_of(rep, agent));
                rng
            })
            .collect();
        let mut x: Vec<Vector> = rngs
            .iter_mut()
            .map(|rng| {
                let noise =
                    Vector::from_iterator(n, (0..n).map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z
                    }));
                &prm.xbar0 + noise * prm.init_spread
            })
            .collect();

        let mut rep_costs = vec![0.0; n_agents];
        let mut rep_penalty = 0.0;
        let record = rep == 0;
        if record && cfg.record_paths {
            trajectories = Some(Vec::with_capacity(grid.num_nodes()));
        }

        let mut d1: Vec<Vector> = vec![Vector::zeros(n); n_agents];
        for k in 0..=steps {
            let t = grid.node(k);
            let xavg = x.iter().fold(Vector::zeros(n), |acc, xi| acc + xi) / n_agents as f64;
            let f = &fgain[k] * &xavg + &foff[k];

            let xi_dev = &xavg - &xbar_tab[k];
            let err = xi_dev.norm_squared() + (&ptilde_tab[k] * &xi_dev).norm_squared();
            let delta = err - mf_mean[k];
            mf_mean[k] += delta / (rep + 1) as f64;
            mf_m2[k] += delta * (err - mf_mean[k]);

            let w = if k == 0 || k == steps { 0.5 * dt } else { dt };
            let disc = (-rho * t).exp();
            let fpen = f.dot(&(&prm.r2 * &f));
            for (i, xi_state) in x.iter().enumerate() {
                let u = &ugain[k] * xi_state + &uoff[k];
                let track = xi_state - &prm.gamma * &xavg - &prm.eta;
                let run = track.dot(&(&prm.q * &track)) + u.dot(&(&prm.r1 * &u)) - fpen;
                rep_costs[i] += 0.5 * w * disc * run;
            }
            rep_penalty += 0.5 * w * disc * fpen;

            if record {
                drift_path.push(f.clone());
                if let Some(tr) = trajectories.as_mut() {
                    tr.push(x.clone());
                }
            }
            if k == steps {
                break;
            }

            // Heun predictor-corrector for the drift part
            for (i, xi_state) in x.iter().enumerate() {
                let u = &ugain[k] * xi_state + &uoff[k];
                d1[i] = &prm.a * xi_state + &prm.b * u + &prm.g * &xavg + &f;
            }
            let xp: Vec<Vector> =
                x.iter().zip(&d1).map(|(xi_state, di)| xi_state + di * dt).collect();
            let xpavg = xp.iter().fold(Vector::zeros(n), |acc, v| acc + v) / n_agents as f64;
            let fp = &fgain[k + 1] * &xpavg + &foff[k + 1];
            for i in 0..n_agents {
                let up = &ugain[k + 1] * &xp[i] + &uoff[k + 1];
                let d2 = &prm.a * &xp[i] + &prm.b * up + &prm.g * &xpavg + &fp;
                let z = Vector::from_iterator(prm.d, (0..prm.d).map(|_| {
                    let s: f64 = StandardNormal.sample(&mut rngs[i]);
                    s
                }));
                x[i] += (&d1[i] + d2) * (0.5 * dt) + &prm.sigma * z * sqrt_dt;
                if !x[i].iter().all(|v| v.is_finite()) || x[i].norm() > STABILITY_LIMIT {
                    return Err(ControlError::UnstableSimulation { time: t });
                }
            }
        }

        if finite {
            for (i, xi_state) in x.iter().enumerate() {
                rep_costs[i] += 0.5 * xi_state.dot(&(&prm.h * xi_state));
            }
        }
        social_acc.push(rep_costs.iter().sum::<f64>() / n_agents as f64);
        penalty_acc += rep_penalty;
        costs[rep] = rep_costs;
    }

    let reps = cfg.replications as f64;
    let social_mean = social_acc.iter().sum::<f64>() / reps;
    let social_var = social_acc
        .iter()
        .map(|c| (c - social_mean) * (c - social_mean))
        .sum::<f64>()
        / (reps - 1.0).max(1.0);
    let (sup_idx, sup_val) = mf_mean
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let sup_stderr = if cfg.replications > 1 {
        (mf_m2[sup_idx] / (reps - 1.0)).sqrt() / reps.sqrt()
    } else {
        0.0
    };

    // crude truncation tail for infinite horizons: the discounted running
    // cost has decayed to the 1e-8 level by construction of the grid
    let cost_uncertainty = if finite {
        0.0
    } else {
        let level = social_mean.abs() * 1e-8;
        if rho > 0.0 {
            level / rho
        } else {
            level
        }
    };

    Ok(SimResult {
        grid,
        costs,
        social_cost_mean: social_mean,
        social_cost_stderr: (social_var / reps).sqrt(),
        penalty_mean: penalty_acc / reps,
        mf_error_nodes: mf_mean,
        mf_error_sup: sup_val,
        mf_error_sup_stderr: sup_stderr,
        drift_path,
        trajectories,
        cost_uncertainty,
    })
}

/// Per-agent cost statistics of a finished simulation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CostStats {
    pub mean: f64,
    pub stderr: f64,
    /// Realized adversarial penalty contribution.
    pub penalty_mean: f64,
    pub uncertainty: f64,
}

pub fn evaluate_social_cost(result: &SimResult) -> CostStats {
    CostStats {
        mean: result.social_cost_mean,
        stderr: result.social_cost_stderr,
        penalty_mean: result.penalty_mean,
        uncertainty: result.cost_uncertainty,
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub n_agents: usize,
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of log-estimate against log-N; `None` when the
    /// errors are identically zero (degenerate noise-free runs).
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

/// Monte Carlo estimate of the mean-field approximation error across
/// population sizes, with the log-log regression slope.
pub fn meanfield_error_sweep(
    m: &ValidatedModel,
    law: &ControlLaw,
    drift: &DriftLaw,
    profile: &ConsistencyProfile,
    ns: &[usize],
    cfg: &SimConfig,
) -> Result<SweepReport, ControlError> {
    if ns.len() < 3 {
        return Err(ControlError::BadConfig(
            "a sweep needs at least three population sizes".into(),
        ));
    }
    let mut rows = Vec::with_capacity(ns.len());
    for (i, &n_agents) in ns.iter().enumerate() {
        if n_agents < 8 {
            return Err(ControlError::BadConfig("sweep population sizes must be at least 8".into()));
        }
        let mut c = cfg.clone();
        c.n_agents = n_agents;
        c.record_paths = false;
        c.seed = cfg.seed.wrapping_add((i as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let result = simulate(m, law, drift, profile, &c)?;
        rows.push(SweepRow {
            n_agents,
            estimate: result.mf_error_sup,
            stderr: result.mf_error_sup_stderr,
        });
    }
    // noise-free runs still carry the squared integrator bias (~1e-15);
    // anything below 1e-12 is indistinguishable from zero error
    let degenerate = rows.iter().all(|r| r.estimate <= 1e-12);
    let (slope, intercept) = if degenerate {
        (None, None)
    } else {
        let pts: Vec<(f64, f64)> =
            rows.iter().map(|r| ((r.n_agents as f64).ln(), r.estimate.max(1e-300).ln())).collect();
        let nn = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (nn * sxy - sx * sy) / (nn * sxx - sx * sx);
        (Some(slope), Some((sy - slope * sx) / nn))
    };
    Ok(SweepReport { rows, slope, intercept })
}

// --- deterministic cost decomposition -------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct DecompositionRow {
    /// Relative error of `J_soc(u) = sum_i [J_i(uhat) + Jtilde_i + I_i]`.
    pub identity_rel_error: f64,
    /// Total second-order term (nonnegative under social convexity).
    pub jtilde_total: f64,
    /// Smallest per-agent second-order term (can be negative for bystander
    /// agents under a unilateral perturbation).
    pub jtilde_min_agent: f64,
    /// Second-order term of the perturbed agent.
    pub jtilde_perturbed: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DecompositionReport {
    pub rows: Vec<DecompositionRow>,
}

/// Exact quadratic decomposition of the deterministic social cost under a
/// unilateral perturbation of agent 0: evaluates the baseline, second-order,
/// and cross terms by quadrature and reports the identity error. Uses the
/// deterministic reduction (noise and initial spread play no role here).
pub fn cost_decomposition_check(
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
    profile: &ConsistencyProfile,
    seed: u64,
    n_agents: usize,
    trials: usize,
) -> Result<DecompositionReport, ControlError> {
    let grid = profile.grid;
    let prm = m.params();
    let n = prm.n;
    let r1_inv = m.r1_inv();
    let r2_inv = m.r2_inv();
    let nodes = grid.num_nodes();
    let h = grid.dt();
    let weight = |k: usize| if k == 0 || k == nodes - 1 { 0.5 * h } else { h };

    // baseline per-agent cost along the consistency path
    let ubar_at = |j: usize| -> Vector {
        let kx = bundle.k_at_half(j) * profile.xbar_half(j);
        let pl = bundle.p_at_half(j) * profile.l_half(j);
        -(&r1_inv * prm.b.transpose() * (kx - pl + profile.phi_half(j)))
    };
    let mut jhat = 0.0;
    for k in 0..nodes {
        let xbar = &profile.xbar[k];
        let ubar = ubar_at(2 * k);
        let track = xbar - &prm.gamma * xbar - &prm.eta;
        let pen = bundle.p_at_half(2 * k) * xbar + &profile.sbar[k];
        jhat += 0.5
            * weight(k)
            * (track.dot(&(&prm.q * &track)) + ubar.dot(&(&prm.r1 * &ubar))
                - pen.dot(&(&r2_inv * &pen)));
    }
    let xbar_t = profile.xbar[nodes - 1].clone();
    jhat += 0.5 * xbar_t.dot(&(&prm.h * &xbar_t));

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(trials);
    for _ in 0..trials {
        let dir = direction_profile(grid, prm.r, 9, &mut rng);
        let dir_half = |j: usize| -> Vector {
            if j % 2 == 0 {
                dir[j / 2].clone()
            } else {
                0.5 * (&dir[j / 2] + &dir[j / 2 + 1])
            }
        };

        // offset variation backward: s' = -[(A+Gbar)^T s + P B u_avg]
        let (mut s_vals, mut s_mids, _) = numerics::rk4_tab(
            |j, s| {
                let gbar = bundle.gbar_at_half(m, j);
                let du = dir_half(j) / n_agents as f64;
                let drive = bundle.p_at_half(j) * &prm.b * du;
                let drive_m = Matrix::from_column_slice(n, 1, drive.as_slice());
                -((&prm.a + gbar).transpose() * s + drive_m)
            },
            &Matrix::zeros(n, 1),
            grid,
            Direction::Backward,
            f64::INFINITY,
        );
        s_vals.reverse();
        s_mids.reverse();
        let s_half = |j: usize| -> Vector {
            let src = if j % 2 == 0 { &s_vals[j / 2] } else { &s_mids[j / 2] };
            Vector::from_column_slice(src.as_slice())
        };

        // joint state variation forward (agents as columns)
        let (x_vals, _, _) = numerics::rk4_tab(
            |j, xs| {
                let gbar = bundle.gbar_at_half(m, j);
                let avg = Vector::from_column_slice((xs.column_sum() / n_agents as f64).as_slice());
                let common = &gbar * &avg - &r2_inv * s_half(j);
                let bu = &prm.b * dir_half(j);
                let mut d = Matrix::zeros(n, n_agents);
                for c in 0..n_agents {
                    let xc = Vector::from_column_slice(xs.column(c).as_slice());
                    let mut dc = &prm.a * xc + &common;
                    if c == 0 {
                        dc += &bu;
                    }
                    d.set_column(c, &dc);
                }
                d
            },
            &Matrix::zeros(n, n_agents),
            grid,
            Direction::Forward,
            f64::INFINITY,
        );

        let mut jt = vec![0.0; n_agents];
        let mut cross = vec![0.0; n_agents];
        let mut jsoc = 0.0;
        for k in 0..nodes {
            let w = weight(k);
            let xt = &x_vals[k];
            let xt_avg = Vector::from_column_slice((xt.column_sum() / n_agents as f64).as_slice());
            let st = Vector::from_column_slice(s_vals[k].as_slice());
            let pen_var = bundle.p_at_half(2 * k) * &xt_avg + &st;
            let pen_base = bundle.p_at_half(2 * k) * &profile.xbar[k] + &profile.sbar[k];
            let track_base = &profile.xbar[k] - &prm.gamma * &profile.xbar[k] - &prm.eta;
            let ubar = ubar_at(2 * k);
            for i in 0..n_agents {
                let xti = Vector::from_column_slice(xt.column(i).as_slice());
                let ut_i: Vector = if i == 0 { dir[k].clone() } else { Vector::zeros(prm.r) };
                let track_var = &xti - &prm.gamma * &xt_avg;
                jt[i] += 0.5
                    * w
                    * (track_var.dot(&(&prm.q * &track_var)) + ut_i.dot(&(&prm.r1 * &ut_i))
                        - pen_var.dot(&(&r2_inv * &pen_var)));
                cross[i] += w
                    * (track_base.dot(&(&prm.q * &track_var)) + ubar.dot(&(&prm.r1 * &ut_i))
                        - pen_base.dot(&(&r2_inv * &pen_var)));
                let xi_full = &profile.xbar[k] + &xti;
                let u_full = &ubar + &ut_i;
                let xavg_full = &profile.xbar[k] + &xt_avg;
                let track_full = &xi_full - &prm.gamma * &xavg_full - &prm.eta;
                let pen_full = &pen_base + &pen_var;
                jsoc += 0.5
                    * w
                    * (track_full.dot(&(&prm.q * &track_full)) + u_full.dot(&(&prm.r1 * &u_full))
                        - pen_full.dot(&(&r2_inv * &pen_full)));
            }
        }
        let xt_last = &x_vals[nodes - 1];
        for i in 0..n_agents {
            let xti = Vector::from_column_slice(xt_last.column(i).as_slice());
            jt[i] += 0.5 * xti.dot(&(&prm.h * &xti));
            cross[i] += xbar_t.dot(&(&prm.h * &xti));
            let xi_full = &xbar_t + &xti;
            jsoc += 0.5 * xi_full.dot(&(&prm.h * &xi_full));
        }

        let jt_total: f64 = jt.iter().sum();
        let rhs = n_agents as f64 * jhat + jt_total + cross.iter().sum::<f64>();
        rows.push(DecompositionRow {
            identity_rel_error: (jsoc - rhs).abs() / jsoc.abs().max(1.0),
            jtilde_total: jt_total,
            jtilde_min_agent: jt.iter().copied().fold(f64::INFINITY, f64::min),
            jtilde_perturbed: jt[0],
        });
    }
    Ok(DecompositionReport { rows })
}

/// Exact (quadrature-level) per-agent worst-case social cost of the
/// synthesized laws for a population of `n_agents`, by mean-covariance
/// propagation of the stacked closed loop — no Monte Carlo noise. Includes
/// the initial-spread and diffusion contributions.
pub fn worstcase_social_cost_exact(
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
    profile: &ConsistencyProfile,
    n_agents: usize,
) -> Result<f64, ControlError> {
    let prm = m.params();
    let n = prm.n;
    let na = n_agents;
    let grid = profile.grid;
    if bundle.ptilde_at_half(0).is_none() {
        return Err(ControlError::MissingPtilde);
    }
    let r1_inv = m.r1_inv();
    let r2_inv = m.r2_inv();
    let s1 = m.control_gain_product();
    let rho = match m.horizon() {
        Horizon::Finite { .. } => 0.0,
        Horizon::Infinite { rho } => rho,
    };

    let coeffs = |j: usize| -> (Matrix, Vector) {
        let k = bundle.k_at_half(j);
        let p = bundle.p_at_half(j);
        let pt = bundle.ptilde_at_half(j).expect("checked above");
        let abar = &prm.a - &s1 * &k;
        let coupling = (&prm.g - &r2_inv * &p - &r2_inv * &pt) / na as f64;
        let mut amat = Matrix::zeros(n * na, n * na);
        for bi in 0..na {
            for bj in 0..na {
                let mut view = amat.view_mut((n * bi, n * bj), (n, n));
                view.copy_from(&coupling);
                if bi == bj {
                    view += &abar;
                }
            }
        }
        let drive = &s1 * (&p * profile.l_half(j) - profile.phi_half(j))
            + &r2_inv * (&pt * profile.xbar_half(j) - profile.sbar_half(j));
        let mut b = Vector::zeros(n * na);
        for bi in 0..na {
            b.rows_mut(n * bi, n).copy_from(&drive);
        }
        (amat, b)
    };

    let expect_quad = |c_row: &Matrix, d: &Vector, wmat: &Matrix, mu: &Vector, cov: &Matrix| -> f64 {
        let mean_part = c_row * mu + d;
        let trace_part = (c_row * cov * c_row.transpose() * wmat).trace();
        mean_part.dot(&(wmat * &mean_part)) + trace_part
    };

    let cost_node = |j: usize, mu: &Vector, cov: &Matrix| -> f64 {
        let k = bundle.k_at_half(j);
        let p = bundle.p_at_half(j);
        let pt = bundle.ptilde_at_half(j).expect("checked above");
        let mut total = 0.0;
        for i in 0..na {
            let mut c_track = Matrix::zeros(n, n * na);
            for bj in 0..na {
                let mut view = c_track.view_mut((0, n * bj), (n, n));
                view.copy_from(&(-(&prm.gamma) / na as f64));
                if bj == i {
                    view += Matrix::identity(n, n);
                }
            }
            total += expect_quad(&c_track, &(-prm.eta.clone()), &prm.q, mu, cov);

            let mut c_u = Matrix::zeros(prm.r, n * na);
            c_u.view_mut((0, n * i), (prm.r, n)).copy_from(&(-(&r1_inv * prm.b.transpose() * &k)));
            let du = &r1_inv * prm.b.transpose() * (&p * profile.l_half(j) - profile.phi_half(j));
            total += expect_quad(&c_u, &du, &prm.r1, mu, cov);
        }
        let mut c_f = Matrix::zeros(n, n * na);
        let f_gain = -(&r2_inv * (&p + &pt)) / na as f64;
        for bj in 0..na {
            c_f.view_mut((0, n * bj), (n, n)).copy_from(&f_gain);
        }
        let df = &r2_inv * (&pt * profile.xbar_half(j) - profile.sbar_half(j));
        total -= na as f64 * expect_quad(&c_f, &df, &prm.r2, mu, cov);
        0.5 * total
    };

    let mut mu = Vector::zeros(n * na);
    for bi in 0..na {
        mu.rows_mut(n * bi, n).copy_from(&prm.xbar0);
    }
    let mut cov = Matrix::identity(n * na, n * na) * (prm.init_spread * prm.init_spread);
    let sig2 = {
        let per_agent = &prm.sigma * prm.sigma.transpose();
        let mut big = Matrix::zeros(n * na, n * na);
        for bi in 0..na {
            big.view_mut((n * bi, n * bi), (n, n)).copy_from(&per_agent);
        }
        big
    };
    let h = grid.dt();
    let nodes = grid.num_nodes();
    let mut acc = 0.0;
    for k in 0..nodes {
        let w = if k == 0 || k == nodes - 1 { 0.5 * h } else { h };
        let disc = (-rho * grid.node(k)).exp();
        acc += w * disc * cost_node(2 * k, &mu, &cov);
        if k + 1 == nodes {
            break;
        }
        let (a0, b0) = coeffs(2 * k);
        let (a1, b1) = coeffs(2 * k + 1);
        let (a2, b2) = coeffs(2 * k + 2);
        let fcov = |a: &Matrix, c: &Matrix| a * c + c * a.transpose() + &sig2;
        let k1m = &a0 * &mu + &b0;
        let k1c = fcov(&a0, &cov);
        let k2m = &a1 * (&mu + &k1m * (0.5 * h)) + &b1;
        let k2c = fcov(&a1, &(&cov + &k1c * (0.5 * h)));
        let k3m = &a1 * (&mu + &k2m * (0.5 * h)) + &b1;
        let k3c = fcov(&a1, &(&cov + &k2c * (0.5 * h)));
        let k4m = &a2 * (&mu + &k3m * h) + &b2;
        let k4c = fcov(&a2, &(&cov + &k3c * h));
        mu += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
        cov += (k1c + k2c * 2.0 + k3c * 2.0 + k4c) * (h / 6.0);
    }
    if m.horizon().is_finite() {
        let mut term = 0.0;
        for i in 0..na {
            let mui = mu.rows(n * i, n).into_owned();
            let covi = cov.view((n * i, n * i), (n, n)).into_owned();
            term += mui.dot(&(&prm.h * &mui)) + (&prm.h * covi).trace();
        }
        acc += 0.5 * term;
    }
    Ok(acc / na as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::solve_consistency_finite;
    use crate::model::{reference_example, validate_params, zero_cost_example};
    use crate::riccati::solve_bundle_finite;

    fn grid2000() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 2000).unwrap()
    }

    fn reference_setup() -> (crate::model::ValidatedModel, RiccatiBundle, ConsistencyProfile, ControlLaw, DriftLaw)
    {
        let m = reference_example();
        let grid = grid2000();
        let bundle = solve_bundle_finite(&m, grid).unwrap();
        let (profile, _) = solve_consistency_finite(&m, &bundle, grid).unwrap();
        let law = build_decentralized_law(&m, &bundle, &profile).unwrap();
        let drift = build_worstcase_law(&m, &bundle, &profile).unwrap();
        (m, bundle, profile, law, drift)
    }

    #[test]
    fn zero_scenario_gives_zero_laws_and_costs() {
        let m = zero_cost_example();
        let grid = grid2000();
        let bundle = solve_bundle_finite(&m, grid).unwrap();
        let (profile, _) = solve_consistency_finite(&m, &bundle, grid).unwrap();
        let law = build_decentralized_law(&m, &bundle, &profile).unwrap();
        let drift = build_worstcase_law(&m, &bundle, &profile).unwrap();
        let x = Vector::from_element(1, 3.0);
        for t in [0.0, 0.37, 1.0] {
            assert_eq!(law.eval(t, &x).norm(), 0.0);
            assert_eq!(drift.eval(t, &x).norm(), 0.0);
        }
        // noisy simulation still produces exactly zero costs
        let cfg = SimConfig::new(8, 4, 1.0 / 2000.0, 42);
        let result = simulate(&m, &law, &drift, &profile, &cfg).unwrap();
        assert_eq!(result.social_cost_mean, 0.0);
        assert_eq!(result.penalty_mean, 0.0);
    }

    #[test]
    fn law_is_affine_with_feedback_gain() {
        let (m, bundle, _profile, law, _) = reference_setup();
        let x = Vector::from_element(1, 0.7);
        let y = Vector::from_element(1, -1.3);
        for t in [0.0, 0.41, 0.999] {
            let lhs = law.eval(t, &(&x + &y)) - law.eval(t, &x);
            let gain = law.feedback_gain(t) * &y;
            assert!((lhs - gain).norm() <= 1e-14);
        }
        // terminal-node values: K(T) = H = 1, P(T) = -H = -1
        let u_t = law.eval(1.0, &x);
        if let RiccatiBundle::Finite { .. } = bundle {
            let (profile, _) = solve_consistency_finite(&m, &bundle, grid2000()).unwrap();
            let expected = -(1.0 * x[0] - (-1.0) * profile.l[2000][0] + profile.phi[2000][0]);
            assert!((u_t[0] - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn drift_law_deterministic_branch() {
        let (_m, _bundle, profile, _law, drift) = reference_setup();
        for k in [0usize, 500, 2000] {
            let t = profile.grid.node(k);
            let on_path = drift.eval(t, &profile.xbar[k]);
            let det = drift.deterministic(t);
            assert!((on_path - det).norm() <= 1e-12);
        }
    }

    #[test]
    fn degenerate_simulation_tracks_mean_exactly() {
        let (m, _bundle, profile, law, drift) = reference_setup();
        let mut params = m.params().clone();
        params.sigma = Matrix::zeros(1, 1);
        params.init_spread = 0.0;
        let m0 = validate_params(params).unwrap();
        let cfg = SimConfig::new(4, 1, 1.0 / 2000.0, 7);
        let result = simulate(&m0, &law, &drift, &profile, &cfg).unwrap();
        // x_avg stays on xbar and the mean-field error vanishes
        assert!(result.mf_error_sup.sqrt() <= 1e-6, "sup err {}", result.mf_error_sup);
    }

    #[test]
    fn simulation_is_deterministic_and_exchangeable() {
        let (m, _bundle, profile, law, drift) = reference_setup();
        let cfg = SimConfig::new(3, 2, 1.0 / 2000.0, 99);
        let a = simulate(&m, &law, &drift, &profile, &cfg).unwrap();
        let b = simulate(&m, &law, &drift, &profile, &cfg).unwrap();
        for (ra, rb) in a.costs.iter().zip(&b.costs) {
            for (ca, cb) in ra.iter().zip(rb) {
                assert_eq!(ca.to_bits(), cb.to_bits());
            }
        }
        // swapping agent streams 0 and 1 swaps their costs bit-exactly
        let swapped = simulate_with_streams(&m, &law, &drift, &profile, &cfg, &|rep, agent| {
            let mapped = match agent {
                0 => 1,
                1 => 0,
                other => other,
            };
            (rep * cfg.n_agents + mapped) as u64 + 1
        })
        .unwrap();
        for rep in 0..cfg.replications {
            assert_eq!(a.costs[rep][0].to_bits(), swapped.costs[rep][1].to_bits());
            assert_eq!(a.costs[rep][1].to_bits(), swapped.costs[rep][0].to_bits());
            assert_eq!(a.costs[rep][2].to_bits(), swapped.costs[rep][2].to_bits());
        }
    }

    #[test]
    fn stderr_shrinks_with_replications() {
        let (m, _bundle, profile, law, drift) = reference_setup();
        let mut cfg = SimConfig::new(16, 128, 1.0 / 400.0, 11);
        let r1 = simulate(&m, &law, &drift, &profile, &cfg).unwrap();
        cfg.replications = 256;
        let r2 = simulate(&m, &law, &drift, &profile, &cfg).unwrap();
        let ratio = r1.social_cost_stderr / r2.social_cost_stderr;
        assert!((ratio - 2.0f64.sqrt()).abs() <= 0.2 * 2.0f64.sqrt(), "ratio {ratio}");
    }

    #[test]
    fn terminal_adjoint_identity_is_exact() {
        let (m, bundle, profile, _law, _drift) = reference_setup();
        // P(T) = -H, Ptilde(T) = 0, sbar(T) = 0 stored exactly, so the
        // reconstruction P x + Ptilde xi + sbar equals -H x at the last node
        if let RiccatiBundle::Finite { p, ptilde, .. } = &bundle {
            let last = 2000;
            assert_eq!((p.node(last) + &m.params().h).norm(), 0.0);
            assert_eq!(ptilde.as_ref().unwrap().node(last).norm(), 0.0);
            assert_eq!(profile.sbar[last].norm(), 0.0);
        } else {
            panic!("expected finite bundle");
        }
    }

    #[test]
    fn decomposition_identity_and_homogeneity() {
        let (m, bundle, profile, _law, _drift) = reference_setup();
        let report = cost_decomposition_check(&m, &bundle, &profile, 2024, 4, 10).unwrap();
        assert_eq!(report.rows.len(), 10);
        for row in &report.rows {
            assert!(row.identity_rel_error <= 1e-6, "identity error {}", row.identity_rel_error);
            assert!(row.jtilde_total >= -1e-10, "total second variation {}", row.jtilde_total);
            assert!(row.jtilde_perturbed >= -1e-10);
        }
        // zero perturbation leaves everything at the baseline: covered by
        // construction (direction profiles are unit-normalized), so instead
        // check quadratic homogeneity through the reported values: doubling
        // the direction scales jtilde by 4. The check runs on one seed with
        // a manually scaled direction.
        let grid = profile.grid;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let dir = crate::convexity::direction_profile(grid, 1, 9, &mut rng);
        let jt1 = crate::convexity::second_variation_value(&m, &bundle, grid, &dir);
        let dir2: Vec<Vector> = dir.iter().map(|v| v * 2.0).collect();
        let jt4 = crate::convexity::second_variation_value(&m, &bundle, grid, &dir2);
        assert!((jt4 - 4.0 * jt1).abs() <= 1e-8 * jt4.abs().max(1.0));
    }

    #[test]
    fn sweep_requires_three_points() {
        let (m, _bundle, profile, law, drift) = reference_setup();
        let cfg = SimConfig::new(8, 2, 1.0 / 2000.0, 1);
        let err = meanfield_error_sweep(&m, &law, &drift, &profile, &[8, 16], &cfg);
        assert!(matches!(err, Err(ControlError::BadConfig(_))));
    }

    #[test]
    fn degenerate_sweep_reports_no_slope() {
        let (m, _bundle, profile, law, drift) = reference_setup();
        let mut params = m.params().clone();
        params.sigma = Matrix::zeros(1, 1);
        params.init_spread = 0.0;
        let m0 = validate_params(params).unwrap();
        let cfg = SimConfig::new(8, 2, 1.0 / 400.0, 3);
        let report = meanfield_error_sweep(&m0, &law, &drift, &profile, &[8, 16, 32], &cfg).unwrap();
        assert!(report.slope.is_none());
    }

    #[test]
    fn initial_spread_scaling_at_time_zero() {
        // sigma = 0 with spread > 0: the time-zero error is Var(x0)/N exactly
        // (in expectation); check the Monte Carlo estimate against it
        let (m, _bundle, profile, law, drift) = reference_setup();
        let mut params = m.params().clone();
        params.sigma = Matrix::zeros(1, 1);
        params.init_spread = 0.3;
        let m0 = validate_params(params).unwrap();
        let mut estimates = Vec::new();
        for n_agents in [16usize, 64] {
            let cfg = SimConfig::new(n_agents, 4096, 1.0 / 100.0, 17);
            let result = simulate(&m0, &law, &drift, &profile, &cfg).unwrap();
            let t0_err = result.mf_error_nodes[0];
            let ptilde0 = 1.3074076282355467f64;
            let predicted = (1.0 + ptilde0 * ptilde0) * 0.09 / n_agents as f64;
            assert!(
                (t0_err - predicted).abs() <= 0.15 * predicted,
                "N={n_agents}: {t0_err} vs {predicted}"
            );
            estimates.push(t0_err);
        }
        // quartering with 4x the population
        let ratio = estimates[0] / estimates[1];
        assert!((ratio - 4.0).abs() <= 1.0, "ratio {ratio}");
    }
}
