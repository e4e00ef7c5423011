//! Independent ground truth at small population sizes: stacked centralized
//! solves and brute-force worst-case maximization, used to validate the
//! decentralized pipeline and the asymptotic-optimality rates.
//!
//! All oracle computations are deterministic (noise enters only through
//! trace terms), so the optimality-gap table carries no Monte Carlo error.

use crate::consistency::ConsistencyProfile;
use crate::control::{self, ControlError};
use crate::model::{derived_weights, Horizon, ValidatedModel};
use crate::numerics::{
    integrate_matrix_ode, Direction, Matrix, NumericsError, TimeGrid, Vector,
};
use crate::riccati::{RiccatiBundle, RiccatiError};
use thiserror::Error;

/// Largest stacked dimension nN accepted by [`build_stacked`].
pub const STACKED_LIMIT: usize = 512;
/// Largest stacked dimension accepted by the centralized Riccati solve.
pub const CENTRALIZED_LIMIT: usize = 256;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("stacked dimension {dim} exceeds the supported limit {limit}")]
    TooLarge { dim: usize, limit: usize },
    #[error("the discretized drift problem is not concave (curvature {curvature:.3e})")]
    NotConcave { curvature: f64 },
    #[error("centralized saddle Riccati escapes at t = {time}")]
    BlowUp { time: f64 },
    #[error("stacked aggregation identity violated (defect {0:.3e})")]
    AggregationDefect(f64),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// The stacked N-agent reformulation of the drift-adversary problem.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    pub n_agents: usize,
    /// `A_check = diag(A) + (1/N) 11^T (x) G`.
    pub a_check: Matrix,
    /// Block-diagonal input matrix.
    pub b_stack: Matrix,
    /// Common drift channel `1 (x) I`.
    pub f_stack: Matrix,
    /// `Q_hat = diag(Q) - (1/N) 11^T (x) Psi`.
    pub q_hat: Matrix,
    pub h_stack: Matrix,
    /// `1 (x) eta_bar`.
    pub eta_hat: Vector,
    /// Block-diagonal control weight.
    pub r1_stack: Matrix,
    /// Drift penalty weight `N R2` (enters the cost negatively).
    pub r2_scaled: Matrix,
}

/// Assemble the stacked system and verify its aggregation identity
/// `(1/N)(1^T (x) I) Q_hat (1 (x) I) = (I-Gamma)^T Q (I-Gamma)`.
pub fn build_stacked(m: &ValidatedModel, n_agents: usize) -> Result<StackedSystem, OracleError> {
    let prm = m.params();
    let n = prm.n;
    let dim = n * n_agents;
    if dim > STACKED_LIMIT {
        return Err(OracleError::TooLarge { dim, limit: STACKED_LIMIT });
    }
    let dw = derived_weights(m);
    let na = n_agents;

    let mut a_check = Matrix::zeros(dim, dim);
    let mut q_hat = Matrix::zeros(dim, dim);
    let mut h_stack = Matrix::zeros(dim, dim);
    let mut b_stack = Matrix::zeros(dim, prm.r * na);
    let mut r1_stack = Matrix::zeros(prm.r * na, prm.r * na);
    for i in 0..na {
        for j in 0..na {
            let mut av = a_check.view_mut((n * i, n * j), (n, n));
            av.copy_from(&(&prm.g / na as f64));
            if i == j {
                av += &prm.a;
            }
            let mut qv = q_hat.view_mut((n * i, n * j), (n, n));
            qv.copy_from(&(-&dw.psi / na as f64));
            if i == j {
                qv += &prm.q;
            }
        }
        h_stack.view_mut((n * i, n * i), (n, n)).copy_from(&prm.h);
        b_stack.view_mut((n * i, prm.r * i), (n, prm.r)).copy_from(&prm.b);
        r1_stack.view_mut((prm.r * i, prm.r * i), (prm.r, prm.r)).copy_from(&prm.r1);
    }
    let mut f_stack = Matrix::zeros(dim, n);
    let mut eta_hat = Vector::zeros(dim);
    for i in 0..na {
        f_stack.view_mut((n * i, 0), (n, n)).copy_from(&Matrix::identity(n, n));
        eta_hat.rows_mut(n * i, n).copy_from(&dw.eta_bar);
    }

    // aggregation identity
    let ones_i = &f_stack; // 1 (x) I
    let agg = (ones_i.transpose() * &q_hat * ones_i) / na as f64;
    let defect = (&agg - &dw.qig).norm();
    if defect > 1e-10 {
        return Err(OracleError::AggregationDefect(defect));
    }

    Ok(StackedSystem {
        n_agents: na,
        a_check,
        b_stack,
        f_stack,
        q_hat,
        h_stack,
        eta_hat,
        r1_stack,
        r2_scaled: &prm.r2 * na as f64,
    })
}

// --- discrete-exact transcription of the deterministic drift problem ------

/// One-step RK4 transfer operators for constant-coefficient dynamics:
/// `x_{k+1} = M x_k + N0 c_k + N1 c_{k+1}` for each affine channel
/// (piecewise-linear channel values, midpoint = average).
struct Propagator {
    m: Matrix,
    n0_f: Matrix,
    n1_f: Matrix,
    n0_u: Matrix,
    n1_u: Matrix,
}

fn propagator(a: &Matrix, f_chan: &Matrix, u_chan: &Matrix, h: f64) -> Propagator {
    let dim = a.nrows();
    let eye = Matrix::identity(dim, dim);
    let ah = a * h;
    let m = &eye
        + &ah
        + &ah * &ah / 2.0
        + &ah * &ah * &ah / 6.0
        + &ah * &ah * &ah * &ah / 24.0;
    let weights0 = |c: &Matrix| -> Matrix {
        (c * 3.0 + &ah * c * 2.0 + &ah * (&ah * c) * 0.75 + &ah * (&ah * (&ah * c)) * 0.25)
            * (h / 6.0)
    };
    let weights1 = |c: &Matrix| -> Matrix {
        (c * 3.0 + &ah * c + &ah * (&ah * c) * 0.25) * (h / 6.0)
    };
    Propagator {
        m,
        n0_f: weights0(f_chan),
        n1_f: weights1(f_chan),
        n0_u: weights0(u_chan),
        n1_u: weights1(u_chan),
    }
}

/// Result of the deterministic worst-case maximization.
#[derive(Debug, Clone)]
pub struct WorstCaseDrift {
    /// Maximizing drift, one n-vector per grid node.
    pub drift: Vec<Vector>,
    /// Attained worst-case social cost `J_soc(u, f*)`.
    pub value: f64,
    /// Gradient norm of the discrete stationarity system at the solution.
    pub gradient_norm: f64,
}

struct DriftProblem<'a> {
    sys: &'a StackedSystem,
    prop: Propagator,
    u_nodes: Vec<Vector>,  // stacked rN control at nodes
    x0: Vector,
    weights: Vec<f64>,
    steps: usize,
    n: usize,
}

impl DriftProblem<'_> {
    fn forward(&self, f: &[Vector]) -> Vec<Vector> {
        let mut xs = Vec::with_capacity(self.steps + 1);
        xs.push(self.x0.clone());
        for k in 0..self.steps {
            let x = &xs[k];
            let next = &self.prop.m * x
                + &self.prop.n0_f * &f[k]
                + &self.prop.n1_f * &f[k + 1]
                + &self.prop.n0_u * &self.u_nodes[k]
                + &self.prop.n1_u * &self.u_nodes[k + 1];
            xs.push(next);
        }
        xs
    }

    /// Negated objective (the convex minimization form):
    /// `sum_k w_k (-(1/2) x^T Q_hat x + eta_hat^T x + (N/2) f^T R2 f) - (1/2) x_K^T H x_K`.
    fn jcheck(&self, f: &[Vector]) -> f64 {
        let xs = self.forward(f);
        let mut acc = 0.0;
        for k in 0..=self.steps {
            let x = &xs[k];
            acc += self.weights[k]
                * (-0.5 * x.dot(&(&self.sys.q_hat * x))
                    + self.sys.eta_hat.dot(x)
                    + 0.5 * f[k].dot(&(&self.sys.r2_scaled * &f[k])));
        }
        let xk = &xs[self.steps];
        acc - 0.5 * xk.dot(&(&self.sys.h_stack * xk))
    }

    /// Control-only quadratic (constant in f).
    fn control_cost(&self) -> f64 {
        let mut acc = 0.0;
        for k in 0..=self.steps {
            acc += 0.5 * self.weights[k] * self.u_nodes[k].dot(&(&self.sys.r1_stack * &self.u_nodes[k]));
        }
        acc
    }

    /// Exact gradient of `jcheck` in the nodal drift values.
    fn gradient(&self, f: &[Vector]) -> Vec<Vector> {
        let xs = self.forward(f);
        let steps = self.steps;
        let mut lambda = vec![Vector::zeros(self.x0.len()); steps + 1];
        lambda[steps] = -(&self.sys.h_stack * &xs[steps])
            + (-(&self.sys.q_hat * &xs[steps]) + &self.sys.eta_hat) * self.weights[steps];
        for k in (0..steps).rev() {
            lambda[k] = self.prop.m.transpose() * &lambda[k + 1]
                + (-(&self.sys.q_hat * &xs[k]) + &self.sys.eta_hat) * self.weights[k];
        }
        let mut grad = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let mut g = &self.sys.r2_scaled * &f[k] * self.weights[k];
            if k < steps {
                g += self.prop.n0_f.transpose() * &lambda[k + 1];
            }
            if k > 0 {
                g += self.prop.n1_f.transpose() * &lambda[k];
            }
            grad.push(g);
        }
        grad
    }
}

fn flat_dot(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn build_drift_problem<'a>(
    m: &ValidatedModel,
    sys: &'a StackedSystem,
    u_profiles: &[Vec<Vector>],
    grid: TimeGrid,
) -> Result<DriftProblem<'a>, OracleError> {
    let prm = m.params();
    let na = sys.n_agents;
    if u_profiles.len() != na {
        return Err(OracleError::Control(ControlError::BadConfig(format!(
            "expected {na} control profiles, got {}",
            u_profiles.len()
        ))));
    }
    let steps = grid.steps();
    let mut u_nodes = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let mut u = Vector::zeros(prm.r * na);
        for (i, profile) in u_profiles.iter().enumerate() {
            u.rows_mut(prm.r * i, prm.r).copy_from(&profile[k]);
        }
        u_nodes.push(u);
    }
    let mut x0 = Vector::zeros(prm.n * na);
    for i in 0..na {
        x0.rows_mut(prm.n * i, prm.n).copy_from(&prm.xbar0);
    }
    let h = grid.dt();
    let mut weights = vec![h; steps + 1];
    weights[0] = 0.5 * h;
    weights[steps] = 0.5 * h;
    Ok(DriftProblem {
        sys,
        prop: propagator(&sys.a_check, &sys.f_stack, &sys.b_stack, h),
        u_nodes,
        x0,
        weights,
        steps,
        n: prm.n,
    })
}

/// Deterministic brute-force worst-case drift for given open-loop control
/// profiles (one nodal r-vector path per agent): the discretized problem is
/// an exactly transcribed concave quadratic in the nodal drift values,
/// solved by conjugate gradients on its negation to gradient norm 1e-10.
pub fn bruteforce_worstcase_drift(
    m: &ValidatedModel,
    u_profiles: &[Vec<Vector>],
    grid: TimeGrid,
) -> Result<WorstCaseDrift, OracleError> {
    if !m.horizon().is_finite() {
        return Err(OracleError::Riccati(RiccatiError::WrongHorizon("finite")));
    }
    let sys = build_stacked(m, u_profiles.len())?;
    let problem = build_drift_problem(m, &sys, u_profiles, grid)?;
    let dim_n = problem.n;
    let steps = problem.steps;

    let zero: Vec<Vector> = vec![Vector::zeros(dim_n); steps + 1];
    let g0 = problem.gradient(&zero);
    let matvec = |v: &[Vector]| -> Vec<Vector> {
        let gv = problem.gradient(v);
        gv.iter().zip(&g0).map(|(a, b)| a - b).collect()
    };

    // CG on the convex quadratic: solve M f = -g0
    let mut f: Vec<Vector> = zero.clone();
    let mut r: Vec<Vector> = g0.iter().map(|g| -g).collect();
    let mut p = r.clone();
    let mut rs = flat_dot(&r, &r);
    let max_iter = 10 * dim_n * (steps + 1);
    for _ in 0..max_iter {
        if rs.sqrt() <= 1e-12 {
            break;
        }
        let ap = matvec(&p);
        let curvature = flat_dot(&p, &ap);
        if curvature <= 0.0 {
            return Err(OracleError::NotConcave { curvature });
        }
        let alpha = rs / curvature;
        for k in 0..=steps {
            f[k] += &p[k] * alpha;
            r[k] -= &ap[k] * alpha;
        }
        let rs_new = flat_dot(&r, &r);
        let beta = rs_new / rs;
        for k in 0..=steps {
            p[k] = &r[k] + &p[k] * beta;
        }
        rs = rs_new;
    }
    let grad_norm = flat_dot(&problem.gradient(&f), &problem.gradient(&f)).sqrt();
    if grad_norm > 1e-10 {
        return Err(OracleError::NotConcave { curvature: grad_norm });
    }
    let value = problem.control_cost() - problem.jcheck(&f);
    Ok(WorstCaseDrift { drift: f, value, gradient_norm: grad_norm })
}

/// Central-difference directional derivative of the discrete negated
/// objective at `f` along `direction` (exact for quadratics up to roundoff).
pub fn drift_gateaux_derivative(
    m: &ValidatedModel,
    u_profiles: &[Vec<Vector>],
    grid: TimeGrid,
    f: &[Vector],
    direction: &[Vector],
) -> Result<f64, OracleError> {
    let sys = build_stacked(m, u_profiles.len())?;
    let problem = build_drift_problem(m, &sys, u_profiles, grid)?;
    let eps = 1e-4;
    let plus: Vec<Vector> = f.iter().zip(direction).map(|(a, d)| a + d * eps).collect();
    let minus: Vec<Vector> = f.iter().zip(direction).map(|(a, d)| a - d * eps).collect();
    Ok((problem.jcheck(&plus) - problem.jcheck(&minus)) / (2.0 * eps))
}

/// Value data of the centralized minimax solve.
#[derive(Debug, Clone)]
pub struct MinimaxValue {
    /// Total (not per-agent) saddle value for the i.i.d. initial law.
    pub value: f64,
    pub pi0: Matrix,
    pub offset0: Vector,
    pub constant0: f64,
}

/// Backward saddle-point Riccati for the stacked joint (control, drift)
/// problem, with affine offset and trace terms; returns the centralized
/// minimax social cost for i.i.d. initial states. The discrete concavity of
/// the drift channel is probed through the brute-force machinery first.
pub fn solve_centralized_minimax(
    m: &ValidatedModel,
    n_agents: usize,
    grid: TimeGrid,
) -> Result<MinimaxValue, OracleError> {
    if !m.horizon().is_finite() {
        return Err(OracleError::Riccati(RiccatiError::WrongHorizon("finite")));
    }
    let prm = m.params();
    let dim = prm.n * n_agents;
    if dim > CENTRALIZED_LIMIT {
        return Err(OracleError::TooLarge { dim, limit: CENTRALIZED_LIMIT });
    }
    let sys = build_stacked(m, n_agents)?;

    // cheap concavity probe on a coarse grid before trusting the saddle
    {
        let coarse = TimeGrid::new(grid.t0(), grid.t1(), 128)?;
        let zero_profiles: Vec<Vec<Vector>> =
            vec![vec![Vector::zeros(prm.r); coarse.num_nodes()]; n_agents];
        let problem = build_drift_problem(m, &sys, &zero_profiles, coarse)?;
        let zero: Vec<Vector> = vec![Vector::zeros(prm.n); coarse.num_nodes()];
        let g0 = problem.gradient(&zero);
        let mut rng_state = 0x243F6A8885A308D3u64;
        for _ in 0..3 {
            let dir: Vec<Vector> = (0..coarse.num_nodes())
                .map(|_| {
                    Vector::from_fn(prm.n, |_, _| {
                        // xorshift; deterministic probe directions
                        rng_state ^= rng_state << 13;
                        rng_state ^= rng_state >> 7;
                        rng_state ^= rng_state << 17;
                        (rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                    })
                })
                .collect();
            let gd = problem.gradient(&dir);
            let curv = flat_dot(&dir, &gd.iter().zip(&g0).map(|(a, b)| a - b).collect::<Vec<_>>());
            if curv <= 0.0 {
                return Err(OracleError::NotConcave { curvature: curv });
            }
        }
    }

    let r1_inv = crate::numerics::solve_linear(&sys.r1_stack, &Matrix::identity(sys.r1_stack.nrows(), sys.r1_stack.nrows()))?;
    let r2_inv = m.r2_inv();
    let s_mat = &sys.b_stack * r1_inv * sys.b_stack.transpose()
        - &sys.f_stack * r2_inv * sys.f_stack.transpose() / n_agents as f64;
    let sig2 = {
        let per_agent = &prm.sigma * prm.sigma.transpose();
        let mut big = Matrix::zeros(dim, dim);
        for i in 0..n_agents {
            big.view_mut((prm.n * i, prm.n * i), (prm.n, prm.n)).copy_from(&per_agent);
        }
        big
    };
    let eta_const = 0.5 * n_agents as f64 * prm.eta.dot(&(&prm.q * &prm.eta));

    // joint backward state [Pi | g | c e1]
    let mut terminal = Matrix::zeros(dim, dim + 2);
    terminal.view_mut((0, 0), (dim, dim)).copy_from(&sys.h_stack);
    let path = integrate_matrix_ode(
        |_, state| {
            let pi = state.view((0, 0), (dim, dim)).into_owned();
            let g = state.view((0, dim), (dim, 1)).into_owned();
            let dpi = -(sys.a_check.transpose() * &pi + &pi * &sys.a_check + &sys.q_hat
                - &pi * &s_mat * &pi);
            let eta_col = Matrix::from_column_slice(dim, 1, sys.eta_hat.as_slice());
            let dg = -((&sys.a_check - &s_mat * &pi).transpose() * &g - eta_col);
            let dc = -(0.5 * (&sig2 * &pi).trace() - 0.5 * (g.transpose() * &s_mat * &g)[(0, 0)]
                + eta_const);
            let mut out = Matrix::zeros(dim, dim + 2);
            out.view_mut((0, 0), (dim, dim)).copy_from(&dpi);
            out.view_mut((0, dim), (dim, 1)).copy_from(&dg);
            out[(0, dim + 1)] = dc;
            out
        },
        &terminal,
        grid,
        Direction::Backward,
        crate::riccati::BLOWUP_NORM,
    )?;
    if let Some(node) = path.blowup() {
        return Err(OracleError::BlowUp { time: grid.node(node) });
    }
    let state0 = path.node(0);
    let pi0 = state0.view((0, 0), (dim, dim)).into_owned();
    let g0 = Vector::from_column_slice(state0.view((0, dim), (dim, 1)).into_owned().as_slice());
    let c0 = state0[(0, dim + 1)];

    let mut mu0 = Vector::zeros(dim);
    for i in 0..n_agents {
        mu0.rows_mut(prm.n * i, prm.n).copy_from(&prm.xbar0);
    }
    let spread2 = prm.init_spread * prm.init_spread;
    let value = 0.5 * mu0.dot(&(&pi0 * &mu0)) + 0.5 * spread2 * pi0.trace() + g0.dot(&mu0) + c0;
    Ok(MinimaxValue { value, pi0, offset0: g0, constant0: c0 })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GapRow {
    pub n_agents: usize,
    pub centralized_value: f64,
    pub decentralized_value: f64,
    pub gap: f64,
    pub gap_times_sqrt_n: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GapTable {
    pub rows: Vec<GapRow>,
    /// Every gap at least -1e-8 (centralized value cannot exceed the
    /// decentralized worst-case cost).
    pub ordering_ok: bool,
    pub nonincreasing: bool,
    /// max/min ratio of `gap * sqrt(N)` across the sweep.
    pub sqrtn_ratio: f64,
}

impl GapTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,centralized_value,decentralized_value,gap,gap_times_sqrtN\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.n_agents,
                crate::model::fmt17(row.centralized_value),
                crate::model::fmt17(row.decentralized_value),
                crate::model::fmt17(row.gap),
                crate::model::fmt17(row.gap_times_sqrt_n),
            ));
        }
        out
    }
}

/// Per-agent optimality gap between the decentralized worst-case cost and
/// the centralized minimax value, across population sizes. Both sides are
/// quadrature-exact.
pub fn optimality_gap_sweep(
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
    profile: &ConsistencyProfile,
    ns: &[usize],
    grid: TimeGrid,
) -> Result<GapTable, OracleError> {
    let mut rows: Vec<GapRow> = Vec::with_capacity(ns.len());
    for &n_agents in ns {
        let central = solve_centralized_minimax(m, n_agents, grid)?.value / n_agents as f64;
        let decentral = control::worstcase_social_cost_exact(m, bundle, profile, n_agents)?;
        let gap = decentral - central;
        rows.push(GapRow {
            n_agents,
            centralized_value: central,
            decentralized_value: decentral,
            gap,
            gap_times_sqrt_n: gap * (n_agents as f64).sqrt(),
        });
    }
    let ordering_ok = rows.iter().all(|r| r.gap >= -1e-8);
    let nonincreasing = rows.windows(2).all(|w| w[0].gap >= w[1].gap - 1e-12);
    let vals: Vec<f64> = rows.iter().map(|r| r.gap_times_sqrt_n).collect();
    let sqrtn_ratio = if vals.iter().all(|v| *v > 0.0) {
        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            / vals.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        f64::INFINITY
    };
    Ok(GapTable { rows, ordering_ok, nonincreasing, sqrtn_ratio })
}

/// Solve the stacked infinite-horizon drift equation at size nN and
/// aggregate back to n x n through `(1/N)(1^T (x) I) P (1 (x) I)`.
pub fn aggregate_stacked_are(m: &ValidatedModel, n_agents: usize) -> Result<Matrix, OracleError> {
    let rho = match m.horizon() {
        Horizon::Infinite { rho } => rho,
        Horizon::Finite { .. } => {
            return Err(OracleError::Riccati(RiccatiError::WrongHorizon("infinite")))
        }
    };
    let sys = build_stacked(m, n_agents)?;
    let prm = m.params();
    let dim = prm.n * n_agents;
    let atil = &sys.a_check - Matrix::identity(dim, dim) * (rho / 2.0);
    let r2_inv = m.r2_inv();
    let s_n = &sys.f_stack * &r2_inv * sys.f_stack.transpose() / n_agents as f64;
    let stacked = crate::riccati::solve_care_general(&atil, &s_n, &(-&sys.q_hat), "stacked drift equation")?;
    Ok((sys.f_stack.transpose() * stacked * &sys.f_stack) / n_agents as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::solve_consistency_finite;
    use crate::model::{
        reference_example, scalar_infinite_example, scalar_params, validate_params,
        zero_cost_example, Horizon,
    };
    use crate::riccati::{solve_bundle_finite, solve_p_infinite};

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, steps).unwrap()
    }

    #[test]
    fn stacked_single_agent_collapse() {
        let m = reference_example();
        let sys = build_stacked(&m, 1).unwrap();
        assert!((sys.a_check[(0, 0)] - (-0.5)).abs() < 1e-15);
        // Q_hat = Q - Psi = (1 - Gamma)^2 Q = 0.25
        assert!((sys.q_hat[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn stacked_three_agents_entries() {
        let m = reference_example();
        let sys = build_stacked(&m, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 - 0.75 / 3.0 } else { -0.75 / 3.0 };
                assert!((sys.q_hat[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn stacked_block_diagonal_when_gamma_zero() {
        let mut params = reference_example().params().clone();
        params.gamma = Matrix::zeros(1, 1);
        let m = validate_params(params).unwrap();
        let sys = build_stacked(&m, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((sys.q_hat[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn aggregation_identity_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..4usize);
            let root = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = root.transpose() * &root;
            let gamma = Matrix::from_fn(n, n, |_, _| rng.gen_range(-0.6..0.6));
            let params = crate::model::ModelParams {
                n,
                r: 1,
                d: n,
                a: Matrix::identity(n, n) * -1.0,
                b: Matrix::from_element(n, 1, 1.0),
                g: Matrix::zeros(n, n),
                sigma: Matrix::identity(n, n) * 0.1,
                q,
                r1: Matrix::identity(1, 1),
                r2: Matrix::identity(n, n),
                h: Matrix::zeros(n, n),
                gamma,
                eta: Vector::zeros(n),
                horizon: Horizon::Finite { t: 1.0 },
                xbar0: Vector::zeros(n),
                init_spread: 0.0,
            };
            let m = validate_params(params).unwrap();
            let n_agents = rng.gen_range(1..=16usize);
            // build_stacked itself enforces the identity to 1e-10
            build_stacked(&m, n_agents).unwrap();
        }
    }

    #[test]
    fn bruteforce_zero_weights_gives_zero_drift() {
        let m = zero_cost_example();
        let g = grid(400);
        // nonzero control profile so the value reduces to the pure u-quadratic
        let u: Vec<Vector> =
            (0..=400).map(|k| Vector::from_element(1, (k as f64 / 400.0).sin())).collect();
        let result = bruteforce_worstcase_drift(&m, &[u.clone(), u.clone()], g).unwrap();
        for f in &result.drift {
            assert!(f.norm() <= 1e-12);
        }
        // value equals the control quadratic only
        let h = g.dt();
        let mut uq = 0.0;
        for k in 0..=400 {
            let w = if k == 0 || k == 400 { 0.5 * h } else { h };
            uq += 0.5 * w * 2.0 * u[k][0] * u[k][0];
        }
        assert!((result.value - uq).abs() <= 1e-12);
    }

    #[test]
    fn bruteforce_matches_drift_law_on_reference() {
        let m = reference_example();
        let fine = grid(2000);
        let bundle = solve_bundle_finite(&m, fine).unwrap();
        let (profile, _) = solve_consistency_finite(&m, &bundle, fine).unwrap();
        let law = crate::control::build_decentralized_law(&m, &bundle, &profile).unwrap();
        let drift_law = crate::control::build_worstcase_law(&m, &bundle, &profile).unwrap();

        let check = |steps: usize| -> f64 {
            let g = grid(steps);
            let u_path: Vec<Vector> =
                (0..=steps).map(|k| law.eval(g.node(k), &profile.xbar[k * 2000 / steps])).collect();
            let profiles = vec![u_path.clone(); 4];
            let result = bruteforce_worstcase_drift(&m, &profiles, g).unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..=steps {
                let expected = drift_law.deterministic(g.node(k));
                worst = worst.max((&result.drift[k] - expected).norm());
            }
            worst
        };
        let disc = check(1000);
        assert!(disc <= 1e-4, "drift discrepancy {disc}");
        // refining the grid shrinks the matched discrepancy
        let disc_fine = check(2000);
        assert!(disc / disc_fine >= 2.0, "refinement ratio {}", disc / disc_fine);
    }

    #[test]
    fn centralized_single_agent_matches_direct_solve() {
        let m = reference_example();
        let g = grid(2000);
        let value = solve_centralized_minimax(&m, 1, g).unwrap();

        // directly coded single-agent saddle: scalar Riccati with A+G,
        // weight (1-Gamma)^2 Q, channels R1, R2
        let (aa, qq, hh) = (-0.5, 0.25, 1.0);
        let s = 1.0 - 1.0; // B R1^-1 B^T - R2^-1
        let mut pi: f64 = hh;
        let mut c = 0.0;
        let hstep = g.dt();
        let sig2 = 0.01;
        for _ in 0..2000 {
            let fpi = |p: f64| -(2.0 * aa * p + qq - s * p * p);
            let fc = |p: f64| -(0.5 * sig2 * p);
            let k1 = fpi(pi);
            let c1 = fc(pi);
            let k2 = fpi(pi - 0.5 * hstep * k1);
            let c2 = fc(pi - 0.5 * hstep * k1);
            let k3 = fpi(pi - 0.5 * hstep * k2);
            let c3 = fc(pi - 0.5 * hstep * k2);
            let k4 = fpi(pi - hstep * k3);
            let c4 = fc(pi - hstep * k3);
            pi -= hstep / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            c -= hstep / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
        }
        let direct = 0.5 * pi * 1.0 + 0.5 * 0.09 * pi + c;
        assert!((value.value - direct).abs() <= 1e-9, "{} vs {direct}", value.value);
    }

    #[test]
    fn centralized_zero_scenario_value_is_zero() {
        let m = zero_cost_example();
        let value = solve_centralized_minimax(&m, 2, grid(500)).unwrap();
        assert!(value.value.abs() <= 1e-12);
    }

    #[test]
    fn gap_table_on_reference_sweep() {
        let m = reference_example();
        let g = grid(2000);
        let bundle = solve_bundle_finite(&m, g).unwrap();
        let (profile, _) = solve_consistency_finite(&m, &bundle, g).unwrap();
        let table = optimality_gap_sweep(&m, &bundle, &profile, &[2, 4, 8], g).unwrap();
        assert!(table.ordering_ok, "gaps: {:?}", table.rows);
        assert!(table.nonincreasing);
        assert!(table.sqrtn_ratio <= 3.0, "ratio {}", table.sqrtn_ratio);
        // gaps decay roughly like 1/N on this scenario
        assert!(table.rows[0].gap > 0.0);
    }

    #[test]
    fn aggregate_stacked_matches_scalar_root() {
        let m = scalar_infinite_example();
        let p = solve_p_infinite(&m).unwrap();
        for n_agents in [1usize, 5] {
            let agg = aggregate_stacked_are(&m, n_agents).unwrap();
            let tol = if n_agents == 1 { 1e-10 } else { 1e-8 };
            assert!(
                (agg[(0, 0)] - p[(0, 0)]).abs() <= tol,
                "N={n_agents}: {} vs {}",
                agg[(0, 0)],
                p[(0, 0)]
            );
        }
    }

    #[test]
    fn aggregate_zero_weight_is_zero() {
        let m = validate_params(scalar_params(
            -1.0,
            1.0,
            0.0,
            0.0,
            1.0,
            1.0,
            0.0,
            0.0,
            0.0,
            Horizon::Infinite { rho: 0.0 },
            0.0,
            0.1,
            0.0,
        ))
        .unwrap();
        let agg = aggregate_stacked_are(&m, 3).unwrap();
        assert!(agg.norm() <= 1e-12);
    }
}
