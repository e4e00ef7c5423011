//! The mean-field consistency system: the coupled two-point boundary value
//! problem for the quintuple (xbar, l, sbar, phi, v), solved by Riccati
//! decoupling with an independent linear-shooting cross-check, plus the
//! forward Riccati blow-up detector used as a solvability probe.
//!
//! Block conventions. The 5n-dimensional system is written with
//! `m = (xbar, l)` and `z = (sbar, phi, v)`:
//!
//! ```text
//!   m' = M11 m + M12 z
//!   z' = M21 m + M22 z + (-eta_bar, eta_bar, eta_bar)
//! ```
//!
//! `BlockVariant::System` assembles the coefficients of that system exactly
//! (this is the variant every solver and residual check uses). The forward
//! detector instead uses `BlockVariant::Detector`, which differs in two
//! entries — phi enters the sbar row through an extra `K` factor, and the
//! phi row drops its `l` coupling — matching the coefficient layout behind
//! the bundled reference scenario's expected blow-up time; under the
//! `System` coefficients that equation never escapes on the reference
//! horizon, so the published time is only reproducible this way.

use crate::model::{derived_weights, DerivedWeights, Horizon, ValidatedModel};
use crate::numerics::{
    self, integrate_matrix_ode, solve_linear, Direction, Matrix, MatrixPath, NumericsError,
    TimeGrid, Vector,
};
use crate::riccati::{RiccatiBundle, HURWITZ_TOL};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("decoupling Riccati equation escapes at t = {time}")]
    YBlowUp { time: f64 },
    #[error("shooting boundary map is singular; the consistency system is not solvable")]
    SingularBoundaryMap,
    #[error("no admissible decoupling solution: {0}")]
    NoAdmissibleY(String),
    #[error("Newton refinement diverged (residual {residual:.3e})")]
    NewtonDivergence { residual: f64 },
    #[error("truncated horizon {t_trunc} did not reach the steady state")]
    TruncationTooShort { t_trunc: f64 },
    #[error("operation requires a {0} horizon")]
    WrongHorizon(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Coefficient variant for [`assemble_blocks_with`]; see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockVariant {
    /// Coefficients of the consistency ODE system (used by all solvers).
    System,
    /// Display-form coefficients used only by the forward blow-up detector.
    Detector,
}

/// The four coefficient blocks evaluated at one time instant.
#[derive(Debug, Clone)]
pub struct BlockMatrices {
    pub m11: Matrix,
    pub m12: Matrix,
    pub m21: Matrix,
    pub m22: Matrix,
}

impl BlockMatrices {
    /// The assembled (5n) x (5n) coefficient matrix.
    pub fn full(&self) -> Matrix {
        let n2 = self.m11.nrows();
        let n3 = self.m22.nrows();
        let mut out = Matrix::zeros(n2 + n3, n2 + n3);
        out.view_mut((0, 0), (n2, n2)).copy_from(&self.m11);
        out.view_mut((0, n2), (n2, n3)).copy_from(&self.m12);
        out.view_mut((n2, 0), (n3, n2)).copy_from(&self.m21);
        out.view_mut((n2, n2), (n3, n3)).copy_from(&self.m22);
        out
    }
}

/// Assemble the consistency-system blocks from `P` and `K` evaluated at a
/// common time (finite horizon) or as constants (infinite horizon).
pub fn assemble_blocks(
    m: &ValidatedModel,
    p: &Matrix,
    k: &Matrix,
) -> Result<BlockMatrices, ConsistencyError> {
    let n = m.n();
    if p.nrows() != n || p.ncols() != n || k.nrows() != n || k.ncols() != n {
        return Err(ConsistencyError::DimensionMismatch(format!(
            "P and K must be {n}x{n}"
        )));
    }
    Ok(assemble_blocks_with(m, &derived_weights(m), p, k, BlockVariant::System))
}

pub(crate) fn assemble_blocks_with(
    m: &ValidatedModel,
    dw: &DerivedWeights,
    p: &Matrix,
    k: &Matrix,
    variant: BlockVariant,
) -> BlockMatrices {
    let prm = m.params();
    let n = prm.n;
    let r1_inv = m.r1_inv();
    let r2_inv = m.r2_inv();
    let s1 = &prm.b * &r1_inv * prm.b.transpose(); // B R1^{-1} B^T
    let gbar = &prm.g - &r2_inv * p;
    let abar = &prm.a - &s1 * k;
    let aplusgbar = &prm.a + &gbar;

    let mut m11 = Matrix::zeros(2 * n, 2 * n);
    m11.view_mut((0, 0), (n, n)).copy_from(&(&abar + &gbar));
    m11.view_mut((0, n), (n, n)).copy_from(&(&s1 * p));
    m11.view_mut((n, 0), (n, n)).copy_from(&(&r2_inv * p));
    m11.view_mut((n, n), (n, n)).copy_from(&aplusgbar);

    let mut m12 = Matrix::zeros(2 * n, 3 * n);
    m12.view_mut((0, 0), (n, n)).copy_from(&(-&r2_inv));
    m12.view_mut((0, n), (n, n)).copy_from(&(-&s1));
    m12.view_mut((n, 0), (n, n)).copy_from(&r2_inv);
    m12.view_mut((n, 2 * n), (n, n)).copy_from(&r2_inv);

    let ps1 = p * &s1;
    let pr2p = p * &r2_inv * p;
    let mut m21 = Matrix::zeros(3 * n, 2 * n);
    m21.view_mut((0, 0), (n, n)).copy_from(&(&ps1 * k));
    m21.view_mut((0, n), (n, n)).copy_from(&(-(&ps1 * p)));
    m21.view_mut((n, 0), (n, n)).copy_from(&(-(k * &gbar) + &dw.psi + &pr2p));
    m21.view_mut((2 * n, 0), (n, n)).copy_from(&(&dw.psi - &prm.q + &pr2p));
    if variant == BlockVariant::System {
        m21.view_mut((n, n), (n, n)).copy_from(&(-(k * &s1 * p)));
    }

    let mut m22 = Matrix::zeros(3 * n, 3 * n);
    m22.view_mut((n, 0), (n, n)).copy_from(&((k + p) * &r2_inv));
    m22.view_mut((2 * n, 0), (n, n)).copy_from(&(p * &r2_inv));
    m22.view_mut((n, 2 * n), (n, n)).copy_from(&(-gbar.transpose()));
    match variant {
        BlockVariant::System => {
            m22.view_mut((0, 0), (n, n)).copy_from(&(-aplusgbar.transpose()));
            m22.view_mut((0, n), (n, n)).copy_from(&ps1);
            m22.view_mut((n, n), (n, n)).copy_from(&(-abar.transpose()));
            m22.view_mut((2 * n, 2 * n), (n, n)).copy_from(&(-aplusgbar.transpose()));
        }
        BlockVariant::Detector => {
            m22.view_mut((0, 0), (n, n)).copy_from(&(-&aplusgbar));
            m22.view_mut((0, n), (n, n)).copy_from(&(&ps1 * k));
            m22.view_mut((n, n), (n, n)).copy_from(&(-abar));
            m22.view_mut((2 * n, 2 * n), (n, n)).copy_from(&(-aplusgbar));
        }
    }

    BlockMatrices { m11, m12, m21, m22 }
}

/// Affine source of the z-rows: `(-eta_bar, eta_bar, eta_bar)`.
fn affine_term(dw: &DerivedWeights) -> Vector {
    let n = dw.eta_bar.len();
    let mut b = Vector::zeros(3 * n);
    b.rows_mut(0, n).copy_from(&(-&dw.eta_bar));
    b.rows_mut(n, n).copy_from(&dw.eta_bar);
    b.rows_mut(2 * n, n).copy_from(&dw.eta_bar);
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    RiccatiDecoupling,
    Shooting,
    AreDecoupling,
}

/// The consistency quintuple sampled on a grid.
#[derive(Debug, Clone)]
pub struct ConsistencyProfile {
    pub grid: TimeGrid,
    pub xbar: Vec<Vector>,
    pub l: Vec<Vector>,
    pub sbar: Vec<Vector>,
    pub phi: Vec<Vector>,
    pub v: Vec<Vector>,
    pub method: Method,
    /// Interval-midpoint samples (same component order) when available.
    pub(crate) mids: Option<Box<ProfileMids>>,
}

#[derive(Debug, Clone)]
pub(crate) struct ProfileMids {
    pub xbar: Vec<Vector>,
    pub l: Vec<Vector>,
    pub sbar: Vec<Vector>,
    pub phi: Vec<Vector>,
    #[allow(dead_code)] // kept for completeness of the quintuple
    pub v: Vec<Vector>,
}

impl ConsistencyProfile {
    pub fn state_at(&self, k: usize) -> Vector {
        let n = self.xbar[0].len();
        let mut w = Vector::zeros(5 * n);
        w.rows_mut(0, n).copy_from(&self.xbar[k]);
        w.rows_mut(n, n).copy_from(&self.l[k]);
        w.rows_mut(2 * n, n).copy_from(&self.sbar[k]);
        w.rows_mut(3 * n, n).copy_from(&self.phi[k]);
        w.rows_mut(4 * n, n).copy_from(&self.v[k]);
        w
    }

    fn half(&self, component: fn(&Self) -> &Vec<Vector>, mid: fn(&ProfileMids) -> &Vec<Vector>, j: usize) -> Vector {
        if j % 2 == 0 {
            component(self)[j / 2].clone()
        } else if let Some(m) = &self.mids {
            mid(m)[j / 2].clone()
        } else {
            0.5 * (&component(self)[j / 2] + &component(self)[j / 2 + 1])
        }
    }

    pub(crate) fn xbar_half(&self, j: usize) -> Vector {
        self.half(|p| &p.xbar, |m| &m.xbar, j)
    }

    pub(crate) fn l_half(&self, j: usize) -> Vector {
        self.half(|p| &p.l, |m| &m.l, j)
    }

    pub(crate) fn sbar_half(&self, j: usize) -> Vector {
        self.half(|p| &p.sbar, |m| &m.sbar, j)
    }

    pub(crate) fn phi_half(&self, j: usize) -> Vector {
        self.half(|p| &p.phi, |m| &m.phi, j)
    }

    /// CSV export: header row, then one row per node with t and all five
    /// components at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.xbar[0].len();
        let mut head = vec!["t".to_string()];
        for (name, _) in [("xbar", 0), ("l", 1), ("sbar", 2), ("phi", 3), ("v", 4)] {
            for i in 0..n {
                head.push(format!("{name}_{i}"));
            }
        }
        let mut out = head.join(",") + "\n";
        for k in 0..self.grid.num_nodes() {
            let mut row = vec![crate::model::fmt17(self.grid.node(k))];
            for comp in [&self.xbar, &self.l, &self.sbar, &self.phi, &self.v] {
                for i in 0..n {
                    row.push(crate::model::fmt17(comp[k][i]));
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// The decoupling data behind a profile.
#[derive(Debug, Clone)]
pub enum DecouplingSolution {
    Finite {
        /// 3n x 2n decoupling gain path.
        y: MatrixPath,
        /// 3n affine offset path (stored as a one-column matrix path).
        alpha: MatrixPath,
    },
    Infinite {
        y: Matrix,
        alpha: Vector,
    },
}

fn split_profile(
    grid: TimeGrid,
    n: usize,
    m_vals: &[Matrix],
    z_vals: &[Matrix],
    method: Method,
    mids: Option<(Vec<Matrix>, Vec<Matrix>)>,
) -> ConsistencyProfile {
    let take = |v: &Matrix, from: usize| -> Vector { Vector::from_iterator(n, (0..n).map(|i| v[(from + i, 0)])) };
    let mut profile = ConsistencyProfile {
        grid,
        xbar: m_vals.iter().map(|v| take(v, 0)).collect(),
        l: m_vals.iter().map(|v| take(v, n)).collect(),
        sbar: z_vals.iter().map(|v| take(v, 0)).collect(),
        phi: z_vals.iter().map(|v| take(v, n)).collect(),
        v: z_vals.iter().map(|v| take(v, 2 * n)).collect(),
        method,
        mids: None,
    };
    if let Some((m_mids, z_mids)) = mids {
        profile.mids = Some(Box::new(ProfileMids {
            xbar: m_mids.iter().map(|v| take(v, 0)).collect(),
            l: m_mids.iter().map(|v| take(v, n)).collect(),
            sbar: z_mids.iter().map(|v| take(v, 0)).collect(),
            phi: z_mids.iter().map(|v| take(v, n)).collect(),
            v: z_mids.iter().map(|v| take(v, 2 * n)).collect(),
        }));
    }
    profile
}

/// Solve the finite-horizon consistency system by Riccati decoupling: the
/// gain `Y` and offset `alpha` are integrated backward jointly, then the
/// forward pair `m = (xbar, l)` closes the loop and `z = Y m + alpha`
/// recovers the remaining components.
pub fn solve_consistency_finite(
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
    grid: TimeGrid,
) -> Result<(ConsistencyProfile, DecouplingSolution), ConsistencyError> {
    let RiccatiBundle::Finite { .. } = bundle else {
        return Err(ConsistencyError::WrongHorizon("finite"));
    };
    let prm = m.params();
    let n = prm.n;
    let dw = derived_weights(m);
    let b_aff = affine_term(&dw);
    let blocks_at =
        |j: usize| assemble_blocks_with(m, &dw, &bundle.p_at_half(j), &bundle.k_at_half(j), BlockVariant::System);

    // backward sweep of the joint state [Y | alpha] (3n x (2n+1))
    let mut terminal = Matrix::zeros(3 * n, 2 * n + 1);
    terminal.view_mut((2 * n, 0), (n, n)).copy_from(&prm.h);
    let (mut ya_vals, mut ya_mids, blow) = numerics::rk4_tab(
        |j, state| {
            let bl = blocks_at(j);
            let y = state.view((0, 0), (3 * n, 2 * n)).into_owned();
            let alpha = state.view((0, 2 * n), (3 * n, 1)).into_owned();
            let dy = &bl.m21 + &bl.m22 * &y - &y * &bl.m11 - &y * &bl.m12 * &y;
            let dalpha = (&bl.m22 - &y * &bl.m12) * alpha
                + Matrix::from_column_slice(3 * n, 1, b_aff.as_slice());
            let mut out = Matrix::zeros(3 * n, 2 * n + 1);
            out.view_mut((0, 0), (3 * n, 2 * n)).copy_from(&dy);
            out.view_mut((0, 2 * n), (3 * n, 1)).copy_from(&dalpha);
            out
        },
        &terminal,
        grid,
        Direction::Backward,
        crate::riccati::BLOWUP_NORM,
    );
    if let Some(node) = blow {
        return Err(ConsistencyError::YBlowUp { time: grid.node(node) });
    }
    ya_vals.reverse();
    ya_mids.reverse();
    let y_at = |j: usize| -> Matrix {
        let src = if j % 2 == 0 { &ya_vals[j / 2] } else { &ya_mids[j / 2] };
        src.view((0, 0), (3 * n, 2 * n)).into_owned()
    };
    let alpha_at = |j: usize| -> Matrix {
        let src = if j % 2 == 0 { &ya_vals[j / 2] } else { &ya_mids[j / 2] };
        src.view((0, 2 * n), (3 * n, 1)).into_owned()
    };

    // forward sweep of m = (xbar, l)
    let mut m0 = Matrix::zeros(2 * n, 1);
    m0.view_mut((0, 0), (n, 1)).copy_from(&Matrix::from_column_slice(n, 1, prm.xbar0.as_slice()));
    let (m_vals, m_mids, blow) = numerics::rk4_tab(
        |j, state| {
            let bl = blocks_at(j);
            &bl.m11 * state + &bl.m12 * (y_at(j) * state + alpha_at(j))
        },
        &m0,
        grid,
        Direction::Forward,
        crate::riccati::BLOWUP_NORM,
    );
    if let Some(node) = blow {
        return Err(ConsistencyError::YBlowUp { time: grid.node(node) });
    }
    let z_vals: Vec<Matrix> =
        (0..grid.num_nodes()).map(|k| y_at(2 * k) * &m_vals[k] + alpha_at(2 * k)).collect();
    let z_mids: Vec<Matrix> =
        (0..grid.steps()).map(|k| y_at(2 * k + 1) * &m_mids[k] + alpha_at(2 * k + 1)).collect();

    let profile = split_profile(
        grid,
        n,
        &m_vals,
        &z_vals,
        Method::RiccatiDecoupling,
        Some((m_mids, z_mids)),
    );
    let y_path = MatrixPath::new_complete(grid, (0..grid.num_nodes()).map(|k| y_at(2 * k)).collect())?;
    let alpha_path =
        MatrixPath::new_complete(grid, (0..grid.num_nodes()).map(|k| alpha_at(2 * k)).collect())?;
    Ok((profile, DecouplingSolution::Finite { y: y_path, alpha: alpha_path }))
}

/// Independent route: single shooting on the unknown initial values
/// `(sbar, phi, v)(0)`. The system is linear, so the boundary map is affine
/// and one Jacobian solve suffices: 3n basis integrations plus one
/// particular integration determine it exactly.
pub fn solve_consistency_finite_shooting(
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
    grid: TimeGrid,
) -> Result<ConsistencyProfile, ConsistencyError> {
    let RiccatiBundle::Finite { .. } = bundle else {
        return Err(ConsistencyError::WrongHorizon("finite"));
    };
    let prm = m.params();
    let n = prm.n;
    let dw = derived_weights(m);
    let b_aff = affine_term(&dw);
    let full_at = |j: usize| {
        assemble_blocks_with(m, &dw, &bundle.p_at_half(j), &bundle.k_at_half(j), BlockVariant::System)
            .full()
    };

    let sweep = |z0: &Vector, with_affine: bool| -> Vec<Matrix> {
        let mut w0 = Matrix::zeros(5 * n, 1);
        if with_affine {
            w0.view_mut((0, 0), (n, 1))
                .copy_from(&Matrix::from_column_slice(n, 1, prm.xbar0.as_slice()));
        }
        w0.view_mut((2 * n, 0), (3 * n, 1)).copy_from(&Matrix::from_column_slice(3 * n, 1, z0.as_slice()));
        let (vals, _, _) = numerics::rk4_tab(
            |j, state| {
                let mut d = full_at(j) * state;
                if with_affine {
                    for i in 0..3 * n {
                        d[(2 * n + i, 0)] += b_aff[i];
                    }
                }
                d
            },
            &w0,
            grid,
            Direction::Forward,
            f64::INFINITY,
        );
        vals
    };

    // terminal defect r(z0) = (sbar(T), phi(T), v(T) - H xbar(T))
    let defect = |vals: &[Matrix]| -> Vector {
        let wt = &vals[grid.steps()];
        let xbar_t = Vector::from_iterator(n, (0..n).map(|i| wt[(i, 0)]));
        let h_x = &prm.h * &xbar_t;
        let mut r = Vector::zeros(3 * n);
        for i in 0..n {
            r[i] = wt[(2 * n + i, 0)];
            r[n + i] = wt[(3 * n + i, 0)];
            r[2 * n + i] = wt[(4 * n + i, 0)] - h_x[i];
        }
        r
    };

    let base = sweep(&Vector::zeros(3 * n), true);
    let r0 = defect(&base);
    let mut jac = Matrix::zeros(3 * n, 3 * n);
    for col in 0..3 * n {
        let mut e = Vector::zeros(3 * n);
        e[col] = 1.0;
        // homogeneous response: affine and xbar0 off
        let resp = sweep(&e, false);
        let rj = defect(&resp);
        for row in 0..3 * n {
            jac[(row, col)] = rj[row];
        }
    }
    let rhs = Matrix::from_column_slice(3 * n, 1, (-r0).as_slice());
    let z0 = solve_linear(&jac, &rhs).map_err(|_| ConsistencyError::SingularBoundaryMap)?;
    let z0 = Vector::from_column_slice(z0.as_slice());
    let vals = sweep(&z0, true);

    let m_vals: Vec<Matrix> = vals.iter().map(|w| w.view((0, 0), (2 * n, 1)).into_owned()).collect();
    let z_vals: Vec<Matrix> =
        vals.iter().map(|w| w.view((2 * n, 0), (3 * n, 1)).into_owned()).collect();
    Ok(split_profile(grid, n, &m_vals, &z_vals, Method::Shooting, None))
}

/// Max normalized residual of a profile against the consistency ODE system,
/// using central differences over interior nodes.
pub fn consistency_residual(
    profile: &ConsistencyProfile,
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
) -> f64 {
    let dw = derived_weights(m);
    let n = m.n();
    let grid = profile.grid;
    let h = grid.dt();
    let rho_shift = match m.horizon() {
        Horizon::Finite { .. } => 0.0,
        Horizon::Infinite { rho } => rho,
    };
    let b_aff = affine_term(&dw);
    let mut worst: f64 = 0.0;
    for k in 1..grid.steps() {
        let bl = assemble_blocks_with(
            m,
            &dw,
            &bundle.p_at_half(2 * k),
            &bundle.k_at_half(2 * k),
            BlockVariant::System,
        );
        let mut full = bl.full();
        for i in 0..3 * n {
            full[(2 * n + i, 2 * n + i)] += rho_shift;
        }
        let state = profile.state_at(k);
        let mut rhs = &full * &state;
        for i in 0..3 * n {
            rhs[2 * n + i] += b_aff[i];
        }
        let deriv = (profile.state_at(k + 1) - profile.state_at(k - 1)) / (2.0 * h);
        let res = (deriv - rhs).norm() / (1.0 + state.norm());
        worst = worst.max(res);
    }
    worst
}

/// Detector-variant blocks as a continuous function of time (coefficients
/// linearly interpolated between the bundle's half-grid samples).
fn detector_blocks_at_time(
    m: &ValidatedModel,
    dw: &DerivedWeights,
    bundle: &RiccatiBundle,
    t: f64,
) -> BlockMatrices {
    let (p, k) = match bundle {
        RiccatiBundle::Finite { grid, .. } => {
            let x = ((t - grid.t0()) / grid.dt() * 2.0).clamp(0.0, 2.0 * grid.steps() as f64);
            let j = x.floor() as usize;
            let w = x - j as f64;
            if w == 0.0 || j + 1 > 2 * grid.steps() {
                let jj = j.min(2 * grid.steps());
                (bundle.p_at_half(jj), bundle.k_at_half(jj))
            } else {
                (
                    bundle.p_at_half(j) * (1.0 - w) + bundle.p_at_half(j + 1) * w,
                    bundle.k_at_half(j) * (1.0 - w) + bundle.k_at_half(j + 1) * w,
                )
            }
        }
        RiccatiBundle::Infinite { p, k, .. } => (p.clone(), k.clone()),
    };
    assemble_blocks_with(m, dw, &p, &k, BlockVariant::Detector)
}

/// Forward integration of the alternate decoupling direction (`Z(0) = 0`)
/// under the detector coefficients; the returned path is truncated at the
/// escape node when the equation blows up inside the window.
pub fn solve_z_path(
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
    grid: TimeGrid,
) -> Result<MatrixPath, ConsistencyError> {
    let RiccatiBundle::Finite { .. } = bundle else {
        return Err(ConsistencyError::WrongHorizon("finite"));
    };
    let dw = derived_weights(m);
    if dw.eta_bar.norm() > 1e-12 {
        return Err(ConsistencyError::DimensionMismatch(
            "the forward detector requires eta_bar = 0".into(),
        ));
    }
    let n = m.n();
    let z0 = Matrix::zeros(2 * n, 3 * n);
    integrate_matrix_ode(
        |t, z| {
            let bl = detector_blocks_at_time(m, &dw, bundle, t);
            &bl.m12 + &bl.m11 * z - z * &bl.m22 - z * &bl.m21 * z
        },
        &z0,
        grid,
        Direction::Forward,
        crate::riccati::BLOWUP_NORM,
    )
    .map_err(ConsistencyError::from)
}

/// Forward blow-up detector for the alternate decoupling direction
/// (`Z(0) = 0`, valid when `eta_bar = 0`): returns the escape time refined
/// to about 1e-3 by bisection with fixed fine steps, or `None` when the
/// equation survives the whole window `[grid.t0, grid.t1]`.
pub fn detect_z_blowup(
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
    grid: TimeGrid,
) -> Result<Option<f64>, ConsistencyError> {
    let RiccatiBundle::Finite { .. } = bundle else {
        return Err(ConsistencyError::WrongHorizon("finite"));
    };
    let dw = derived_weights(m);
    if dw.eta_bar.norm() > 1e-12 {
        return Err(ConsistencyError::DimensionMismatch(
            "the forward detector requires eta_bar = 0".into(),
        ));
    }
    let n = m.n();
    let z_field = |t: f64, z: &Matrix| {
        let bl = detector_blocks_at_time(m, &dw, bundle, t);
        &bl.m12 + &bl.m11 * z - z * &bl.m22 - z * &bl.m21 * z
    };

    let z0 = Matrix::zeros(2 * n, 3 * n);
    let survives = |tau: f64| -> Result<bool, ConsistencyError> {
        if tau <= grid.t0() {
            return Ok(true);
        }
        let steps = (((tau - grid.t0()) / grid.dt()).ceil() as usize * 2).max(64);
        let probe = TimeGrid::new(grid.t0(), tau, steps)?;
        let path =
            integrate_matrix_ode(z_field, &z0, probe, Direction::Forward, crate::riccati::BLOWUP_NORM)?;
        Ok(path.blowup().is_none())
    };

    // coarse pass over the requested window
    let path =
        integrate_matrix_ode(z_field, &z0, grid, Direction::Forward, crate::riccati::BLOWUP_NORM)?;
    let Some(node) = path.blowup() else {
        return Ok(None);
    };
    let mut lo = grid.node(node.saturating_sub(1));
    let mut hi = grid.node(node);
    while !survives(hi)? && hi < grid.t1() {
        // make sure the bracket is genuine under the finer probe steps
        break;
    }
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if survives(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Infinite-horizon consistency: solve the constant-coefficient decoupling
/// ARE `M21 + rho Y + M22 Y - Y M11 - Y M12 Y = 0` from the invariant
/// subspace with spectrum in `Re < rho/2` and refine by Newton; verify the
/// two stability conditions; then integrate the mean pair forward on a
/// truncated grid long enough for the slowest closed-loop mode to decay to
/// 1e-8 (capped at 200 time units).
pub fn solve_consistency_infinite(
    m: &ValidatedModel,
    bundle: &RiccatiBundle,
) -> Result<(ConsistencyProfile, DecouplingSolution), ConsistencyError> {
    let (rho, p, k) = match bundle {
        RiccatiBundle::Infinite { rho, p, k, .. } => (*rho, p.clone(), k.clone()),
        RiccatiBundle::Finite { .. } => return Err(ConsistencyError::WrongHorizon("infinite")),
    };
    let prm = m.params();
    let n = prm.n;
    let dw = derived_weights(m);
    let bl = assemble_blocks_with(m, &dw, &p, &k, BlockVariant::System);

    let mut big = bl.full();
    for i in 0..3 * n {
        big[(2 * n + i, 2 * n + i)] += rho;
    }
    let eigs = numerics::eigenvalues(&big)?;
    let below = eigs.iter().filter(|l| l.re < rho / 2.0 - HURWITZ_TOL).count();
    let critical = eigs.iter().filter(|l| (l.re - rho / 2.0).abs() <= HURWITZ_TOL).count();
    if below != 2 * n || critical > 0 {
        return Err(ConsistencyError::NoAdmissibleY(format!(
            "need {} eigenvalues below Re = rho/2, found {below} (critical: {critical})",
            2 * n
        )));
    }
    let os = numerics::ordered_schur(&big, |l| l.re < rho / 2.0)?;
    if os.selected != 2 * n {
        return Err(ConsistencyError::NoAdmissibleY(
            "Schur reordering did not isolate the decaying subspace".into(),
        ));
    }
    let u1 = os.q.view((0, 0), (2 * n, 2 * n)).into_owned();
    let u2 = os.q.view((2 * n, 0), (3 * n, 2 * n)).into_owned();
    let yt = solve_linear(&u1.transpose(), &u2.transpose())
        .map_err(|_| ConsistencyError::NoAdmissibleY("decaying subspace is not a graph".into()))?;
    let mut y = yt.transpose();

    // Newton refinement on R(Y) = M21 + rho Y + M22 Y - Y M11 - Y M12 Y
    let residual = |y: &Matrix| -> Matrix {
        &bl.m21 + y * rho + &bl.m22 * y - y * &bl.m11 - y * &bl.m12 * y
    };
    let mut res = residual(&y);
    for _ in 0..50 {
        if res.norm() <= 1e-12 * (1.0 + y.norm() * y.norm()) {
            break;
        }
        let left = &bl.m22 + Matrix::identity(3 * n, 3 * n) * rho - &y * &bl.m12;
        let right = &bl.m11 + &bl.m12 * &y;
        let delta = numerics::solve_sylvester(&left, &right, &(-&res))?;
        y += delta;
        res = residual(&y);
    }
    if res.norm() > 1e-10 * (1.0 + y.norm() * y.norm()) {
        return Err(ConsistencyError::NewtonDivergence { residual: res.norm() });
    }

    let closed_m = &bl.m11 + &bl.m12 * &y - Matrix::identity(2 * n, 2 * n) * (rho / 2.0);
    let closed_z = -(&bl.m22) + &y * &bl.m12 - Matrix::identity(3 * n, 3 * n) * (rho / 2.0);
    if !numerics::is_hurwitz(&closed_m, 0.0)? {
        return Err(ConsistencyError::NoAdmissibleY(
            "M11 + M12 Y - (rho/2) I is not Hurwitz".into(),
        ));
    }
    if !numerics::is_hurwitz(&closed_z, 0.0)? {
        return Err(ConsistencyError::NoAdmissibleY(
            "-M22 + Y M12 - (rho/2) I is not Hurwitz".into(),
        ));
    }

    // constant offset: (Y M12 - M22 - rho I) alpha = affine source
    let b_aff = affine_term(&dw);
    let lhs = &y * &bl.m12 - &bl.m22 - Matrix::identity(3 * n, 3 * n) * rho;
    let alpha_m = solve_linear(&lhs, &Matrix::from_column_slice(3 * n, 1, b_aff.as_slice()))?;
    let alpha = Vector::from_column_slice(alpha_m.as_slice());

    // truncation horizon from the slowest decaying closed-loop mode
    let decay = numerics::eigenvalues(&closed_m)?
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let t_trunc = ((1e8f64).ln() / (-decay)).min(200.0).max(1.0);
    let steps = ((t_trunc * 200.0).ceil() as usize).clamp(2000, 40_000);
    let grid = TimeGrid::new(0.0, t_trunc, steps)?;

    // forward mean pair: m' = (M11 + M12 Y) m + M12 alpha
    let drive = &bl.m12 * Matrix::from_column_slice(3 * n, 1, alpha.as_slice());
    let closed = &bl.m11 + &bl.m12 * &y;
    let mut m0 = Matrix::zeros(2 * n, 1);
    m0.view_mut((0, 0), (n, 1)).copy_from(&Matrix::from_column_slice(n, 1, prm.xbar0.as_slice()));
    let (m_vals, m_mids, _) = numerics::rk4_tab(
        |_, state| &closed * state + &drive,
        &m0,
        grid,
        Direction::Forward,
        crate::riccati::BLOWUP_NORM,
    );

    // steady state and decay check
    let m_inf = solve_linear(&closed, &(-&drive))?;
    if (&m_vals[grid.steps()] - &m_inf).norm() > 1e-6 {
        return Err(ConsistencyError::TruncationTooShort { t_trunc });
    }

    let z_of = |mv: &Matrix| -> Matrix { &y * mv + Matrix::from_column_slice(3 * n, 1, alpha.as_slice()) };
    let z_vals: Vec<Matrix> = m_vals.iter().map(z_of).collect();
    let z_mids: Vec<Matrix> = m_mids.iter().map(z_of).collect();
    let profile =
        split_profile(grid, n, &m_vals, &z_vals, Method::AreDecoupling, Some((m_mids, z_mids)));
    Ok((profile, DecouplingSolution::Infinite { y, alpha }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_example, scalar_infinite_example, validate_params, zero_cost_example};
    use crate::riccati::{solve_bundle_finite, solve_bundle_infinite};

    fn grid2000() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 2000).unwrap()
    }

    #[test]
    fn blocks_collapse_when_weights_vanish() {
        let m = zero_cost_example();
        let zero = Matrix::zeros(1, 1);
        let bl = assemble_blocks(&m, &zero, &zero).unwrap();
        // M11 = diag(A + G, A + G); M21 = 0
        assert!((bl.m11[(0, 0)] - (-0.5)).abs() < 1e-15);
        assert!((bl.m11[(1, 1)] - (-0.5)).abs() < 1e-15);
        assert_eq!(bl.m11[(0, 1)], 0.0);
        assert_eq!(bl.m21.norm(), 0.0);
    }

    #[test]
    fn blocks_reference_terminal_values_by_hand() {
        let m = reference_example();
        // at t = T: P = -H = -1, K = H = 1
        let p = Matrix::from_element(1, 1, -1.0);
        let k = Matrix::from_element(1, 1, 1.0);
        let bl = assemble_blocks(&m, &p, &k).unwrap();
        // Abar + Gbar = (1 - 1) + (-1.5 + 1) = -0.5
        assert!((bl.m11[(0, 0)] + 0.5).abs() < 1e-15);
        assert!((bl.m11[(0, 1)] + 1.0).abs() < 1e-15); // B R1^-1 B^T P
        assert!((bl.m11[(1, 0)] + 1.0).abs() < 1e-15); // R2^-1 P
        assert!((bl.m11[(1, 1)] - 0.5).abs() < 1e-15); // A + Gbar
        // phi row of M21 carries the l coupling -K B R1^-1 B^T P = +1
        assert!((bl.m21[(1, 1)] - 1.0).abs() < 1e-15);
        // sbar row of M22 drives phi through P B R1^-1 B^T = -1
        assert!((bl.m22[(0, 1)] + 1.0).abs() < 1e-15);
        // affine source vanishes for eta = 0
        assert_eq!(affine_term(&derived_weights(&m)).norm(), 0.0);
    }

    #[test]
    fn homogeneous_scenario_gives_zero_profile() {
        let mut params = reference_example().params().clone();
        params.xbar0 = Vector::zeros(1);
        let m = validate_params(params).unwrap();
        let bundle = solve_bundle_finite(&m, grid2000()).unwrap();
        let (profile, _) = solve_consistency_finite(&m, &bundle, grid2000()).unwrap();
        let shoot = solve_consistency_finite_shooting(&m, &bundle, grid2000()).unwrap();
        for k in (0..=2000).step_by(200) {
            assert!(profile.state_at(k).norm() <= 1e-12);
            assert!(shoot.state_at(k).norm() <= 1e-12);
        }
    }

    #[test]
    fn two_routes_agree_on_reference() {
        let m = reference_example();
        let grid = grid2000();
        let bundle = solve_bundle_finite(&m, grid).unwrap();
        let (profile, _) = solve_consistency_finite(&m, &bundle, grid).unwrap();
        let shoot = solve_consistency_finite_shooting(&m, &bundle, grid).unwrap();
        let mut disc: f64 = 0.0;
        for k in 0..=2000 {
            disc = disc.max((profile.state_at(k) - shoot.state_at(k)).amax());
        }
        assert!(disc <= 1e-6, "route discrepancy {disc}");

        // boundary conditions
        assert_eq!(profile.xbar[0][0], 1.0);
        assert_eq!(profile.l[0][0], 0.0);
        assert!(profile.sbar[2000].norm() <= 1e-8);
        assert!(profile.phi[2000].norm() <= 1e-8);
        let h = &m.params().h;
        assert!((&profile.v[2000] - h * &profile.xbar[2000]).norm() <= 1e-8);

        // v = K xbar + phi along the whole path
        if let RiccatiBundle::Finite { k, .. } = &bundle {
            let mut worst: f64 = 0.0;
            for node in 0..=2000 {
                let pred = k.node(node) * &profile.xbar[node] + &profile.phi[node];
                worst = worst.max((&profile.v[node] - pred).norm());
            }
            assert!(worst <= 1e-8, "v identity violation {worst}");
        }

        // ODE residual
        let res = consistency_residual(&profile, &m, &bundle);
        assert!(res <= 1e-5, "residual {res}");
    }

    #[test]
    fn route_discrepancy_shrinks_with_refinement() {
        let m = reference_example();
        let disc = |steps: usize| {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let bundle = solve_bundle_finite(&m, grid).unwrap();
            let (profile, _) = solve_consistency_finite(&m, &bundle, grid).unwrap();
            let shoot = solve_consistency_finite_shooting(&m, &bundle, grid).unwrap();
            let mut d: f64 = 0.0;
            for k in 0..=steps {
                d = d.max((profile.state_at(k) - shoot.state_at(k)).amax());
            }
            d
        };
        let coarse = disc(250);
        let fine = disc(500);
        assert!(coarse / fine >= 4.0, "refinement ratio {}", coarse / fine);
    }

    #[test]
    fn residual_detects_corruption() {
        let m = reference_example();
        let grid = grid2000();
        let bundle = solve_bundle_finite(&m, grid).unwrap();
        let (mut profile, _) = solve_consistency_finite(&m, &bundle, grid).unwrap();
        profile.xbar[1000][0] += 1e-2;
        let res = consistency_residual(&profile, &m, &bundle);
        // differencing amplifies a node spike by ~1/(2 dt)
        assert!(res >= 1.0, "residual {res}");
    }

    #[test]
    fn z_blowup_on_reference_window() {
        let m = reference_example();
        let grid = grid2000();
        let bundle = solve_bundle_finite(&m, grid).unwrap();
        let t = detect_z_blowup(&m, &bundle, grid).unwrap().expect("must blow up");
        assert!((t - 0.758276).abs() <= 5e-3, "blow-up at {t}");

        // stability under step halving
        let grid_fine = TimeGrid::new(0.0, 1.0, 4000).unwrap();
        let t2 = detect_z_blowup(&m, &bundle, grid_fine).unwrap().expect("must blow up");
        assert!((t - t2).abs() <= 1e-3);

        // no escape on the shortened window
        let short = TimeGrid::new(0.0, 0.7, 1400).unwrap();
        assert!(detect_z_blowup(&m, &bundle, short).unwrap().is_none());
    }

    #[test]
    fn z_linear_when_quadratic_sources_vanish() {
        let m = zero_cost_example();
        let grid = grid2000();
        let bundle = solve_bundle_finite(&m, grid).unwrap();
        assert!(detect_z_blowup(&m, &bundle, grid).unwrap().is_none());
    }

    #[test]
    fn infinite_consistency_scalar_instance() {
        let m = scalar_infinite_example();
        let bundle = solve_bundle_infinite(&m).unwrap();
        let (profile, dec) = solve_consistency_infinite(&m, &bundle).unwrap();
        let DecouplingSolution::Infinite { y, alpha } = &dec else {
            panic!("expected constant decoupling");
        };
        assert!(alpha.norm() <= 1e-12, "eta = 0 must give alpha = 0");
        // ARE residual
        let bl = assemble_blocks(
            &m,
            &bundle.p_at_half(0),
            &bundle.k_at_half(0),
        )
        .unwrap();
        let res = &bl.m21 + &bl.m22 * y - y * &bl.m11 - y * &bl.m12 * y;
        assert!(res.norm() <= 1e-10, "ARE residual {}", res.norm());

        // v = K xbar + phi pointwise (A - rho/2 is Hurwitz here)
        if let RiccatiBundle::Infinite { k, .. } = &bundle {
            let mut worst: f64 = 0.0;
            for node in 0..profile.grid.num_nodes() {
                let pred = k * &profile.xbar[node] + &profile.phi[node];
                worst = worst.max((&profile.v[node] - pred).norm());
            }
            assert!(worst <= 1e-8, "v identity violation {worst}");
        }

        // system residual and terminal decay
        let res = consistency_residual(&profile, &m, &bundle);
        assert!(res <= 1e-5, "residual {res}");
        assert!(profile.state_at(profile.grid.steps()).norm() <= 1e-6);
    }

    #[test]
    fn infinite_consistency_zero_start_is_steady_zero() {
        let mut params = scalar_infinite_example().params().clone();
        params.xbar0 = Vector::zeros(1);
        let m = validate_params(params).unwrap();
        let bundle = solve_bundle_infinite(&m).unwrap();
        let (profile, _) = solve_consistency_infinite(&m, &bundle).unwrap();
        for k in (0..profile.grid.num_nodes()).step_by(500) {
            assert!(profile.state_at(k).norm() <= 1e-12);
        }
    }

    #[test]
    fn csv_export_roundtrips_nodes() {
        let m = reference_example();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let bundle = solve_bundle_finite(&m, grid).unwrap();
        let (profile, _) = solve_consistency_finite(&m, &bundle, grid).unwrap();
        let csv = profile.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 12); // header + 11 nodes
        assert!(lines[0].starts_with("t,xbar_0,l_0,sbar_0,phi_0,v_0"));
        let last: Vec<f64> = lines[11].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(last[0], 1.0);
        assert!((last[1] - profile.xbar[10][0]).abs() == 0.0);
    }
}
