//! Riccati equations: terminal-value differential forms (finite horizon) and
//! stabilizing algebraic forms (infinite horizon).
//!
//! The terminal-value equations are integrated backward with fixed-step RK4
//! rather than by doubling or Bernoulli substitution: it is the simplest
//! method that handles indefinite quadratic terms and detects finite-time
//! escape, which doubles as the uniform-convexity certificate. Algebraic
//! equations are solved from the stable invariant subspace of the associated
//! Hamiltonian (ordered Schur), Newton-refined, and the stabilizing property
//! is verified explicitly; borderline spectra (within 1e-9 of the critical
//! line) are reported as failures, never silently accepted.

use crate::model::{derived_weights, Horizon, ValidatedModel};
use crate::numerics::{
    self, integrate_with_mids, is_hurwitz, ordered_schur, solve_linear, solve_sylvester,
    Direction, Matrix, MatrixPath, NumericsError, TimeGrid,
};
use thiserror::Error;

/// Default Frobenius-norm threshold treated as finite-time escape.
pub const BLOWUP_NORM: f64 = 1e8;
/// Strictness tolerance for Hurwitz verification of algebraic solutions.
pub const HURWITZ_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RiccatiError {
    #[error("Riccati solution escapes in finite time at t = {time}")]
    BlowUp { time: f64 },
    #[error("no stabilizing solution: {0}")]
    NoStabilizingSolution(String),
    #[error("no admissible solution: {0}")]
    NoAdmissibleSolution(String),
    #[error("operation requires a {0} horizon")]
    WrongHorizon(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn symmetrize(m: &Matrix) -> Matrix {
    0.5 * (m + m.transpose())
}

/// Field of the worst-case-drift Riccati equation:
/// `P' = -[(A+G)^T P + P (A+G) - P R2^{-1} P - (I-Gamma)^T Q (I-Gamma)]`.
fn p_field(aplusg: &Matrix, r2_inv: &Matrix, qig: &Matrix, p: &Matrix) -> Matrix {
    -(aplusg.transpose() * p + p * aplusg - p * r2_inv * p - qig)
}

/// Field of the auxiliary-control Riccati equation:
/// `K' = -[A^T K + K A - K B R1^{-1} B^T K + Q]`.
fn k_field(a: &Matrix, s1: &Matrix, q: &Matrix, k: &Matrix) -> Matrix {
    -(a.transpose() * k + k * a - k * s1 * k + q)
}

/// Backward solution of the drift Riccati with `P(T) = -H`; escape before
/// t = 0 is reported as [`RiccatiError::BlowUp`] (failure of uniform
/// convexity on `[t*, T]`).
pub fn solve_p_finite(m: &ValidatedModel, grid: TimeGrid) -> Result<MatrixPath, RiccatiError> {
    let p = m.params();
    if !m.horizon().is_finite() {
        return Err(RiccatiError::WrongHorizon("finite"));
    }
    let dw = derived_weights(m);
    let aplusg = &p.a + &p.g;
    let r2_inv = m.r2_inv();
    integrate_with_mids(
        |_, x| p_field(&aplusg, &r2_inv, &dw.qig, x),
        &(-&p.h),
        grid,
        Direction::Backward,
        BLOWUP_NORM,
    )
    .map_err(|stop| RiccatiError::BlowUp { time: stop.time })
}

/// Backward solution of the standard LQ Riccati with `K(T) = H`; never
/// escapes under the validated sign conditions.
pub fn solve_k_finite(m: &ValidatedModel, grid: TimeGrid) -> Result<MatrixPath, RiccatiError> {
    let p = m.params();
    if !m.horizon().is_finite() {
        return Err(RiccatiError::WrongHorizon("finite"));
    }
    let s1 = m.control_gain_product();
    integrate_with_mids(
        |_, x| k_field(&p.a, &s1, &p.q, x),
        &p.h,
        grid,
        Direction::Backward,
        BLOWUP_NORM,
    )
    .map_err(|stop| RiccatiError::BlowUp { time: stop.time })
}

/// Field of the mean-field-error Riccati equation.
///
/// The source term enters with a minus sign: along the synthesized closed
/// loop the aggregate control gap is `u_avg - ubar = -R1^{-1} B^T K (x_avg -
/// xbar)`, so the offset gap `s - sbar = Ptilde (x_avg - xbar)` requires
/// `Ptilde' + Ptilde(Abar+Gbar) + (A+Gbar)^T Ptilde - Ptilde R2^{-1} Ptilde
/// - P B R1^{-1} B^T K = 0`. (A plus sign on the source makes the
/// representation invalid: the resulting "worst-case" value drops below the
/// centralized optimum.)
fn ptilde_field(
    a: &Matrix,
    g: &Matrix,
    s1: &Matrix,
    r2_inv: &Matrix,
    p: &Matrix,
    k: &Matrix,
    pt: &Matrix,
) -> Matrix {
    let gbar = g - r2_inv * p;
    let abar = a - s1 * k;
    -(pt * (&abar + &gbar) + (a + &gbar).transpose() * pt - pt * r2_inv * pt - p * s1 * k)
}

/// Backward solution of the mean-field-error Riccati with terminal value 0,
/// driven by previously computed `P` and `K` paths on the same grid.
pub fn solve_ptilde_finite(
    m: &ValidatedModel,
    p_path: &MatrixPath,
    k_path: &MatrixPath,
    grid: TimeGrid,
) -> Result<MatrixPath, RiccatiError> {
    let p = m.params();
    if !m.horizon().is_finite() {
        return Err(RiccatiError::WrongHorizon("finite"));
    }
    if p_path.grid() != &grid || k_path.grid() != &grid {
        return Err(NumericsError::DimensionMismatch("P and K must live on the target grid".into()).into());
    }
    let s1 = m.control_gain_product();
    let r2_inv = m.r2_inv();
    let zero = Matrix::zeros(p.n, p.n);
    let (values, mids, blow) = numerics::rk4_tab(
        |j, x| ptilde_field(&p.a, &p.g, &s1, &r2_inv, &p_path.at_half(j), &k_path.at_half(j), x),
        &zero,
        grid,
        Direction::Backward,
        BLOWUP_NORM,
    );
    if let Some(node) = blow {
        return Err(RiccatiError::BlowUp { time: grid.node(node) });
    }
    let mut values = values;
    values.reverse();
    let mut mids = mids;
    mids.reverse();
    Ok(MatrixPath::new_complete(grid, values).map_err(RiccatiError::from)?.with_mids(mids))
}

// --- algebraic equations --------------------------------------------------

/// Stabilizing solution of `A^T X + X A - X S X + Q = 0` from the stable
/// invariant subspace of the Hamiltonian `[[A, -S], [-Q, -A^T]]`, refined by
/// Newton iteration on the residual.
fn solve_care(a: &Matrix, s: &Matrix, q: &Matrix, what: &str) -> Result<Matrix, RiccatiError> {
    solve_care_two_sided(a, a, s, q, what)
}

/// Crate-internal access to the stabilizing CARE solver (used by the
/// stacked oracle equations).
pub(crate) fn solve_care_general(
    a: &Matrix,
    s: &Matrix,
    q: &Matrix,
    what: &str,
) -> Result<Matrix, RiccatiError> {
    solve_care(a, s, q, what)
}

/// Two-sided variant `X A1 + A2^T X - X S X + Q = 0` (A1 = A2 recovers the
/// symmetric case). Solution taken from the stable invariant subspace of
/// `[[A1, -S], [-Q, -A2^T]]`; the graph condition requires the leading block
/// of the subspace basis to be invertible.
fn solve_care_two_sided(
    a1: &Matrix,
    a2: &Matrix,
    s: &Matrix,
    q: &Matrix,
    what: &str,
) -> Result<Matrix, RiccatiError> {
    let n = a1.nrows();
    let mut ham = Matrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a1);
    ham.view_mut((0, n), (n, n)).copy_from(&(-s));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-a2.transpose()));

    let eigs = numerics::eigenvalues(&ham)?;
    if eigs.iter().any(|l| l.re.abs() <= HURWITZ_TOL) {
        return Err(RiccatiError::NoStabilizingSolution(format!(
            "{what}: Hamiltonian spectrum touches the imaginary axis"
        )));
    }
    let stable = eigs.iter().filter(|l| l.re < 0.0).count();
    if stable != n {
        return Err(RiccatiError::NoStabilizingSolution(format!(
            "{what}: expected {n} stable Hamiltonian eigenvalues, found {stable}"
        )));
    }
    let os = ordered_schur(&ham, |l| l.re < 0.0)?;
    if os.selected != n {
        return Err(RiccatiError::NoStabilizingSolution(format!(
            "{what}: Schur reordering selected {} of {n} stable directions",
            os.selected
        )));
    }
    let u1 = os.q.view((0, 0), (n, n)).into_owned();
    let u2 = os.q.view((n, 0), (n, n)).into_owned();
    // X = U2 U1^{-1}; solve U1^T X^T = U2^T to avoid forming the inverse
    let xt = solve_linear(&u1.transpose(), &u2.transpose()).map_err(|_| {
        RiccatiError::NoStabilizingSolution(format!("{what}: invariant subspace is not a graph"))
    })?;
    let mut x = xt.transpose();
    if a1 == a2 {
        x = symmetrize(&x);
    }

    // Newton polish: (A2^T - X S) D + D (A1 - S X) = -residual
    for _ in 0..50 {
        let res = &x * a1 + a2.transpose() * &x - &x * s * &x + q;
        if res.norm() <= 1e-13 * (1.0 + x.norm() * x.norm()) {
            break;
        }
        let left = a2.transpose() - &x * s;
        let right = -(a1 - s * &x);
        let delta = solve_sylvester(&left, &right, &(-res))?;
        x += delta;
        if a1 == a2 {
            x = symmetrize(&x);
        }
    }
    Ok(x)
}

/// Maximal (stabilizing) solution of the infinite-horizon drift equation
/// `(A+G-rho/2 I)^T P + P (A+G-rho/2 I) - P R2^{-1} P - (I-Gamma)^T Q (I-Gamma) = 0`;
/// verified by residual and by the Hurwitz property of the closed loop.
pub fn solve_p_infinite(m: &ValidatedModel) -> Result<Matrix, RiccatiError> {
    let p = m.params();
    let rho = match m.horizon() {
        Horizon::Infinite { rho } => rho,
        Horizon::Finite { .. } => return Err(RiccatiError::WrongHorizon("infinite")),
    };
    let dw = derived_weights(m);
    let atil = &p.a + &p.g - Matrix::identity(p.n, p.n) * (rho / 2.0);
    if !is_hurwitz(&atil, HURWITZ_TOL)? {
        return Err(RiccatiError::NoStabilizingSolution(
            "A + G - (rho/2) I is not Hurwitz".into(),
        ));
    }
    let r2_inv = m.r2_inv();
    let sol = solve_care(&atil, &r2_inv, &(-&dw.qig), "drift equation")?;
    let closed = &atil - &r2_inv * &sol;
    if !is_hurwitz(&closed, 0.0)? {
        return Err(RiccatiError::NoStabilizingSolution(
            "closed loop A + G - (rho/2) I - R2^{-1} P is not Hurwitz".into(),
        ));
    }
    Ok(sol)
}

/// Stabilizing positive-semidefinite solution of
/// `rho K = A^T K + K A - K B R1^{-1} B^T K + Q`.
pub fn solve_k_infinite(m: &ValidatedModel) -> Result<Matrix, RiccatiError> {
    let p = m.params();
    let rho = match m.horizon() {
        Horizon::Infinite { rho } => rho,
        Horizon::Finite { .. } => return Err(RiccatiError::WrongHorizon("infinite")),
    };
    let arho = &p.a - Matrix::identity(p.n, p.n) * (rho / 2.0);
    let s1 = m.control_gain_product();
    let sol = solve_care(&arho, &s1, &p.q, "control equation")?;
    let closed = &arho - &s1 * &sol;
    if !is_hurwitz(&closed, 0.0)? {
        return Err(RiccatiError::NoStabilizingSolution(
            "closed loop A - (rho/2) I - B R1^{-1} B^T K is not Hurwitz".into(),
        ));
    }
    let min_eig =
        symmetrize(&sol).symmetric_eigenvalues().iter().fold(f64::INFINITY, |a, &l| a.min(l));
    if min_eig < -HURWITZ_TOL {
        return Err(RiccatiError::NoStabilizingSolution(
            "stabilizing solution is not positive semidefinite".into(),
        ));
    }
    Ok(sol)
}

/// Solution of the infinite-horizon mean-field-error equation
/// `Ptilde (Abar+Gbar) + (A+Gbar)^T Ptilde - rho Ptilde - Ptilde R2^{-1} Ptilde
///  - P B R1^{-1} B^T K = 0`
/// with both `Abar+Gbar-(rho/2)I-R2^{-1}Ptilde` and
/// `A+Gbar-(rho/2)I-R2^{-1}Ptilde` Hurwitz. The coefficient pair is
/// nonsymmetric, so `Ptilde` is treated as a general square matrix.
pub fn solve_ptilde_infinite(
    m: &ValidatedModel,
    p: &Matrix,
    k: &Matrix,
) -> Result<Matrix, RiccatiError> {
    let prm = m.params();
    let rho = match m.horizon() {
        Horizon::Infinite { rho } => rho,
        Horizon::Finite { .. } => return Err(RiccatiError::WrongHorizon("infinite")),
    };
    let r2_inv = m.r2_inv();
    let s1 = m.control_gain_product();
    let half_shift = Matrix::identity(prm.n, prm.n) * (rho / 2.0);
    let gbar = &prm.g - &r2_inv * p;
    let a1 = &prm.a - &s1 * k + &gbar - &half_shift;
    let a2 = &prm.a + &gbar - &half_shift;
    let source = -(p * &s1 * k);
    let sol = solve_care_two_sided(&a1, &a2, &r2_inv, &source, "mean-field-error equation")
        .map_err(|e| match e {
            RiccatiError::NoStabilizingSolution(msg) => RiccatiError::NoAdmissibleSolution(msg),
            other => other,
        })?;
    for (name, base) in [("Abar+Gbar", &a1), ("A+Gbar", &a2)] {
        if !is_hurwitz(&(base - &r2_inv * &sol), 0.0)? {
            return Err(RiccatiError::NoAdmissibleSolution(format!(
                "{name} - (rho/2) I - R2^{{-1}} Ptilde is not Hurwitz"
            )));
        }
    }
    Ok(sol)
}

/// Everything the synthesis needs: the drift Riccati `P`, the control
/// Riccati `K`, and (when it exists) the mean-field-error Riccati `Ptilde`,
/// either as paths on a grid or as constants.
#[derive(Debug, Clone)]
pub enum RiccatiBundle {
    Finite { grid: TimeGrid, p: MatrixPath, k: MatrixPath, ptilde: Option<MatrixPath> },
    Infinite { rho: f64, p: Matrix, k: Matrix, ptilde: Option<Matrix> },
}

impl RiccatiBundle {
    pub fn is_finite(&self) -> bool {
        matches!(self, RiccatiBundle::Finite { .. })
    }

    pub fn p_at_half(&self, j: usize) -> Matrix {
        match self {
            RiccatiBundle::Finite { p, .. } => p.at_half(j),
            RiccatiBundle::Infinite { p, .. } => p.clone(),
        }
    }

    pub fn k_at_half(&self, j: usize) -> Matrix {
        match self {
            RiccatiBundle::Finite { k, .. } => k.at_half(j),
            RiccatiBundle::Infinite { k, .. } => k.clone(),
        }
    }

    pub fn ptilde_at_half(&self, j: usize) -> Option<Matrix> {
        match self {
            RiccatiBundle::Finite { ptilde, .. } => ptilde.as_ref().map(|p| p.at_half(j)),
            RiccatiBundle::Infinite { ptilde, .. } => ptilde.clone(),
        }
    }

    /// `Gbar = G - R2^{-1} P` at a half-grid index.
    pub fn gbar_at_half(&self, m: &ValidatedModel, j: usize) -> Matrix {
        &m.params().g - m.r2_inv() * self.p_at_half(j)
    }

    /// `Abar = A - B R1^{-1} B^T K` at a half-grid index.
    pub fn abar_at_half(&self, m: &ValidatedModel, j: usize) -> Matrix {
        &m.params().a - m.control_gain_product() * self.k_at_half(j)
    }

    /// Materialized `Gbar` path on `grid` (constant for infinite horizon).
    pub fn gbar_path(&self, m: &ValidatedModel, grid: TimeGrid) -> MatrixPath {
        let vals = (0..grid.num_nodes()).map(|k| self.gbar_at_half(m, 2 * k)).collect();
        MatrixPath::new_complete(grid, vals).expect("grid-aligned")
    }

    /// Materialized `Abar` path on `grid` (constant for infinite horizon).
    pub fn abar_path(&self, m: &ValidatedModel, grid: TimeGrid) -> MatrixPath {
        let vals = (0..grid.num_nodes()).map(|k| self.abar_at_half(m, 2 * k)).collect();
        MatrixPath::new_complete(grid, vals).expect("grid-aligned")
    }
}

/// Solve the full finite-horizon bundle on `grid`. Failure of the drift
/// equation is a hard error (loss of uniform convexity); an escaping
/// mean-field-error equation leaves `ptilde = None`.
pub fn solve_bundle_finite(m: &ValidatedModel, grid: TimeGrid) -> Result<RiccatiBundle, RiccatiError> {
    let p = solve_p_finite(m, grid)?;
    let k = solve_k_finite(m, grid)?;
    let ptilde = solve_ptilde_finite(m, &p, &k, grid).ok();
    Ok(RiccatiBundle::Finite { grid, p, k, ptilde })
}

/// Solve the constant bundle for an infinite-horizon model.
pub fn solve_bundle_infinite(m: &ValidatedModel) -> Result<RiccatiBundle, RiccatiError> {
    let rho = match m.horizon() {
        Horizon::Infinite { rho } => rho,
        Horizon::Finite { .. } => return Err(RiccatiError::WrongHorizon("infinite")),
    };
    let p = solve_p_infinite(m)?;
    let k = solve_k_infinite(m)?;
    let ptilde = solve_ptilde_infinite(m, &p, &k).ok();
    Ok(RiccatiBundle::Infinite { rho, p, k, ptilde })
}

/// Max normalized residual of a finite-horizon Riccati path against its
/// defining equation, with the time derivative taken by a fourth-order
/// five-point stencil over interior nodes.
pub fn path_residual<F>(path: &MatrixPath, mut field: F) -> f64
where
    F: FnMut(f64, &Matrix) -> Matrix,
{
    let grid = path.grid();
    let h = grid.dt();
    let mut worst: f64 = 0.0;
    for k in 2..grid.steps().saturating_sub(1) {
        let deriv = (path.node(k - 2) - path.node(k - 1) * 8.0 + path.node(k + 1) * 8.0
            - path.node(k + 2))
            / (12.0 * h);
        let x = path.node(k);
        let res = (&deriv - field(grid.node(k), x)).norm() / (1.0 + x.norm() * x.norm());
        worst = worst.max(res);
    }
    worst
}

/// Residuals of the three finite-horizon equations of a bundle (drift,
/// control, mean-field-error when present).
pub fn bundle_residuals(m: &ValidatedModel, bundle: &RiccatiBundle) -> Vec<f64> {
    match bundle {
        RiccatiBundle::Finite { p, k, ptilde, .. } => {
            let prm = m.params();
            let dw = derived_weights(m);
            let aplusg = &prm.a + &prm.g;
            let r2_inv = m.r2_inv();
            let s1 = m.control_gain_product();
            let mut out = vec![
                path_residual(p, |_, x| p_field(&aplusg, &r2_inv, &dw.qig, x)),
                path_residual(k, |_, x| k_field(&prm.a, &s1, &prm.q, x)),
            ];
            if let Some(pt) = ptilde {
                let grid = *p.grid();
                out.push(path_residual(pt, |t, x| {
                    let j = ((t - grid.t0()) / grid.dt() * 2.0).round() as usize;
                    ptilde_field(&prm.a, &prm.g, &s1, &r2_inv, &p.at_half(j), &k.at_half(j), x)
                }));
            }
            out
        }
        RiccatiBundle::Infinite { rho, p, k, ptilde } => {
            let prm = m.params();
            let dw = derived_weights(m);
            let half = Matrix::identity(prm.n, prm.n) * (*rho / 2.0);
            let atil = &prm.a + &prm.g - &half;
            let r2_inv = m.r2_inv();
            let s1 = m.control_gain_product();
            let mut out = vec![
                (atil.transpose() * p + p * &atil - p * &r2_inv * p - &dw.qig).norm(),
                ((&prm.a - &half).transpose() * k + k * (&prm.a - &half) - k * &s1 * k + &prm.q)
                    .norm(),
            ];
            if let Some(pt) = ptilde {
                let gbar = &prm.g - &r2_inv * p;
                let a1 = &prm.a - &s1 * k + &gbar - &half;
                let a2 = &prm.a + &gbar - &half;
                out.push((pt * &a1 + a2.transpose() * pt - pt * &r2_inv * pt - p * &s1 * k).norm());
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        reference_example, scalar_infinite_example, scalar_params, validate_params, zero_cost_example,
        Horizon,
    };
    use crate::numerics::Vector;

    fn grid2000() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 2000).unwrap()
    }

    #[test]
    fn p_matches_reference_closed_form() {
        let m = reference_example();
        let grid = grid2000();
        let p = solve_p_finite(&m, grid).unwrap();
        let mut err: f64 = 0.0;
        for k in 0..=2000 {
            let t = grid.node(k);
            err = err.max((p.node(k)[(0, 0)] - (-1.0 / (t + 1.0) - 0.5)).abs());
        }
        assert!(err <= 1e-8, "max error {err}");
        // terminal value stored exactly
        assert_eq!(p.node(2000)[(0, 0)], -1.0);
        // -P stays positive on the whole horizon
        for k in 0..=2000 {
            assert!(-p.node(k)[(0, 0)] > 0.0);
        }
    }

    #[test]
    fn zero_weights_give_zero_solutions() {
        let m = zero_cost_example();
        let grid = grid2000();
        let p = solve_p_finite(&m, grid).unwrap();
        let k = solve_k_finite(&m, grid).unwrap();
        let pt = solve_ptilde_finite(&m, &p, &k, grid).unwrap();
        for j in [0, 1000, 2000] {
            assert_eq!(p.node(j)[(0, 0)], 0.0);
            assert_eq!(k.node(j)[(0, 0)], 0.0);
            assert_eq!(pt.node(j)[(0, 0)], 0.0);
        }
    }

    #[test]
    fn p_blowup_reported_on_failing_scenario() {
        let m = crate::model::blowup_example();
        match solve_p_finite(&m, grid2000()) {
            Err(RiccatiError::BlowUp { time }) => {
                // phase-line analysis brackets the escape near t = 0.9597
                assert!((time - 0.9597).abs() < 2e-3, "blow-up at {time}");
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn k_constant_at_scalar_equilibrium() {
        // A = B = R1 = Q = 1 with H = 1 + sqrt(2): K^2 - 2K - 1 = 0 at the
        // terminal value, so K stays there
        let h = 1.0 + 2.0f64.sqrt();
        let m = validate_params(scalar_params(
            1.0,
            1.0,
            0.0,
            1.0,
            1.0,
            1.0,
            h,
            0.0,
            0.0,
            Horizon::Finite { t: 1.0 },
            0.0,
            0.1,
            0.0,
        ))
        .unwrap();
        let k = solve_k_finite(&m, grid2000()).unwrap();
        for j in [0, 500, 2000] {
            assert!((k.node(j)[(0, 0)] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn k_reference_value_stable_under_step_halving() {
        let m = reference_example();
        let k1 = solve_k_finite(&m, grid2000()).unwrap();
        let k2 = solve_k_finite(&m, TimeGrid::new(0.0, 1.0, 4000).unwrap()).unwrap();
        let v1 = k1.node(0)[(0, 0)];
        let v2 = k2.node(0)[(0, 0)];
        assert!((v1 - v2).abs() <= 1e-9, "k(0): {v1} vs {v2}");
        // frozen Richardson value
        assert!((v1 - 2.256366909810877).abs() <= 1e-9);
    }

    #[test]
    fn ptilde_exists_on_reference_horizon() {
        let m = reference_example();
        let grid = grid2000();
        let p = solve_p_finite(&m, grid).unwrap();
        let k = solve_k_finite(&m, grid).unwrap();
        let pt = solve_ptilde_finite(&m, &p, &k, grid).unwrap();
        assert!(pt.is_complete());
        assert_eq!(pt.node(2000)[(0, 0)], 0.0);
        // frozen step-halving value at t = 0
        assert!((pt.node(0)[(0, 0)] - 1.3074076282355467).abs() < 1e-9);

        let fine = TimeGrid::new(0.0, 1.0, 4000).unwrap();
        let p2 = solve_p_finite(&m, fine).unwrap();
        let k2 = solve_k_finite(&m, fine).unwrap();
        let pt2 = solve_ptilde_finite(&m, &p2, &k2, fine).unwrap();
        assert!((pt.node(0)[(0, 0)] - pt2.node(0)[(0, 0)]).abs() <= 1e-9);
    }

    #[test]
    fn bundle_symmetry_and_residuals() {
        let m = reference_example();
        let bundle = solve_bundle_finite(&m, grid2000()).unwrap();
        let res = bundle_residuals(&m, &bundle);
        assert_eq!(res.len(), 3);
        for r in res {
            assert!(r <= 1e-8, "residual {r}");
        }
        if let RiccatiBundle::Finite { p, k, .. } = &bundle {
            for j in (0..=2000).step_by(250) {
                assert!((p.node(j) - p.node(j).transpose()).norm() <= 1e-9);
                assert!((k.node(j) - k.node(j).transpose()).norm() <= 1e-9);
                // K psd under Q >= 0, H >= 0
                assert!(k.node(j)[(0, 0)] >= -1e-12);
            }
        } else {
            panic!("expected finite bundle");
        }
    }

    #[test]
    fn larger_q_does_not_increase_p0() {
        let mut prev = f64::INFINITY;
        for q in [0.25, 0.5, 1.0, 2.0] {
            let m = validate_params(scalar_params(
                1.0,
                1.0,
                -1.5,
                q,
                1.0,
                1.0,
                1.0,
                0.5,
                0.0,
                Horizon::Finite { t: 1.0 },
                1.0,
                0.1,
                0.0,
            ))
            .unwrap();
            let p = solve_p_finite(&m, grid2000()).unwrap();
            let p0 = p.node(0)[(0, 0)];
            assert!(p0 <= prev + 1e-12, "P(0) increased with Q");
            prev = p0;
        }
    }

    #[test]
    fn infinite_drift_equation_scalar_root() {
        let m = scalar_infinite_example();
        let p = solve_p_infinite(&m).unwrap();
        let expected = -4.0 + 15.0f64.sqrt();
        assert!((p[(0, 0)] - expected).abs() <= 1e-12, "P = {}", p[(0, 0)]);
    }

    #[test]
    fn infinite_drift_zero_weight_gives_zero() {
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
        let p = solve_p_infinite(&m).unwrap();
        assert!(p.norm() <= 1e-12);
        let k = solve_k_infinite(&m).unwrap();
        assert!(k.norm() <= 1e-12);
    }

    #[test]
    fn infinite_control_equation_scalar_root() {
        let m = validate_params(scalar_params(
            1.0,
            1.0,
            -2.0,
            1.0,
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
        let k = solve_k_infinite(&m).unwrap();
        assert!((k[(0, 0)] - (1.0 + 2.0f64.sqrt())).abs() <= 1e-12);
    }

    #[test]
    fn random_two_dimensional_instances_verify_residuals() {
        use nalgebra::DMatrix;
        // stable A + G, PSD Q; deterministic entries
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, -0.2, -1.4]);
        let g = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.05, -0.1]);
        let mroot = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.3, 0.5]);
        let q = mroot.transpose() * &mroot;
        let params = crate::model::ModelParams {
            n: 2,
            r: 2,
            d: 2,
            a,
            b: DMatrix::identity(2, 2),
            g,
            sigma: DMatrix::identity(2, 2) * 0.1,
            q,
            r1: DMatrix::identity(2, 2) * 1.5,
            r2: DMatrix::identity(2, 2) * 2.0,
            h: DMatrix::zeros(2, 2),
            gamma: DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.0, 0.3]),
            eta: Vector::zeros(2),
            horizon: Horizon::Infinite { rho: 0.1 },
            xbar0: Vector::zeros(2),
            init_spread: 0.0,
        };
        let m = validate_params(params).unwrap();
        let bundle = solve_bundle_infinite(&m).unwrap();
        let res = bundle_residuals(&m, &bundle);
        assert_eq!(res.len(), 3, "ptilde should exist on this instance");
        for r in &res {
            assert!(*r <= 1e-10, "residual {r}");
        }
        if let RiccatiBundle::Infinite { p, k, .. } = &bundle {
            assert!((p - p.transpose()).norm() <= 1e-9);
            assert!((k - k.transpose()).norm() <= 1e-9);
        }
    }

    #[test]
    fn infinite_ptilde_scalar_root_with_sign_conditions() {
        let m = scalar_infinite_example();
        let p = solve_p_infinite(&m).unwrap();
        let k = solve_k_infinite(&m).unwrap();
        let pt = solve_ptilde_infinite(&m, &p, &k).unwrap();
        // admissible root of the scalar quadratic (both closed loops Hurwitz)
        assert!((pt[(0, 0)] - 0.022328355334819437).abs() <= 1e-12, "ptilde = {}", pt[(0, 0)]);
    }

    #[test]
    fn zero_source_gives_zero_ptilde_infinite() {
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
        let p = solve_p_infinite(&m).unwrap();
        let k = solve_k_infinite(&m).unwrap();
        let pt = solve_ptilde_infinite(&m, &p, &k).unwrap();
        assert!(pt.norm() <= 1e-12);
    }
}
