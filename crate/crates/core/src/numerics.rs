//! Dense linear algebra and fixed-step ODE integration.
//!
//! Everything downstream (Riccati solvers, consistency systems, oracles) is
//! built on the handful of contracts in this module: classical RK4 on a
//! uniform grid with blow-up detection, scaling-and-squaring matrix
//! exponential, QR-iteration eigenvalues, and partial-pivot LU solves.
//! Supported envelope: dense matrices up to n = 64 (stacked systems up to
//! nN = 512).
//!
//! Paths produced by the in-crate integrators also carry midpoint samples
//! (`t_k + dt/2`) so that later RK4 sweeps over tabulated coefficients can
//! evaluate their stages exactly instead of interpolating; this keeps the
//! whole pipeline at fourth order.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

/// Frobenius-norm ceiling accepted by [`matrix_exponential`].
pub const EXP_NORM_LIMIT: f64 = 500.0;

/// Relative pivot threshold below which LU solves report [`NumericsError::Singular`].
pub const SINGULAR_PIVOT_REL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("time grid requires t1 > t0 and steps >= 1 (got t0={t0}, t1={t1}, steps={steps})")]
    BadGrid { t0: f64, t1: f64, steps: usize },
    #[error("ODE field evaluated to a non-finite value at t = {0}")]
    NonFiniteField(f64),
    #[error("matrix norm {norm:.3e} exceeds the supported exponential range {limit:.3e}")]
    Overflow { norm: f64, limit: f64 },
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
    #[error("matrix is singular to working precision (pivot {pivot:.3e})")]
    Singular { pivot: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Uniform time grid on `[t0, t1]` with `steps` intervals; node `k` sits at
/// `t0 + k * (t1 - t0) / steps`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self, NumericsError> {
        if !(t1 > t0) || steps == 0 || !t0.is_finite() || !t1.is_finite() {
            return Err(NumericsError::BadGrid { t0, t1, steps });
        }
        Ok(Self { t0, t1, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn num_nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn node(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    /// Half-grid time: index `j` in `0..=2*steps` maps to `t0 + j*dt/2`.
    pub fn half_node(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt() / 2.0
    }

    /// Index of the node nearest to `t` (clamped to the grid).
    pub fn nearest_node(&self, t: f64) -> usize {
        let x = (t - self.t0) / self.dt();
        (x.round().max(0.0) as usize).min(self.steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// A matrix-valued function sampled on a uniform grid.
///
/// `values[i]` holds the sample at node `start_node + i`. A complete path has
/// `start_node = 0` and `steps + 1` values. When integration is aborted,
/// `blowup` records the first node that could not be kept: for a forward
/// integration the kept values are nodes `0..blowup`, for a backward one they
/// are `blowup+1..=steps`.
#[derive(Debug, Clone)]
pub struct MatrixPath {
    grid: TimeGrid,
    values: Vec<Matrix>,
    mids: Option<Vec<Matrix>>,
    start_node: usize,
    blowup: Option<usize>,
}

impl MatrixPath {
    pub fn new_complete(grid: TimeGrid, values: Vec<Matrix>) -> Result<Self, NumericsError> {
        if values.len() != grid.num_nodes() {
            return Err(NumericsError::DimensionMismatch(format!(
                "expected {} nodes, got {}",
                grid.num_nodes(),
                values.len()
            )));
        }
        Ok(Self { grid, values, mids: None, start_node: 0, blowup: None })
    }

    pub fn constant(grid: TimeGrid, value: Matrix) -> Self {
        let values = vec![value.clone(); grid.num_nodes()];
        let mids = vec![value; grid.steps()];
        Self { grid, values, mids: Some(mids), start_node: 0, blowup: None }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn blowup(&self) -> Option<usize> {
        self.blowup
    }

    pub fn is_complete(&self) -> bool {
        self.blowup.is_none() && self.start_node == 0
    }

    pub fn first_node(&self) -> usize {
        self.start_node
    }

    pub fn last_node(&self) -> usize {
        self.start_node + self.values.len() - 1
    }

    /// Sample at node `k`; panics if `k` lies in the blown-up range.
    pub fn node(&self, k: usize) -> &Matrix {
        self.try_node(k).expect("node index outside the kept range")
    }

    pub fn try_node(&self, k: usize) -> Option<&Matrix> {
        k.checked_sub(self.start_node).and_then(|i| self.values.get(i))
    }

    /// Half-grid sample: even `j` hits a node, odd `j` the midpoint of an
    /// interval (stored when produced in-crate, interpolated otherwise).
    pub fn at_half(&self, j: usize) -> Matrix {
        if j % 2 == 0 {
            return self.node(j / 2).clone();
        }
        let k = j / 2;
        if let Some(mids) = &self.mids {
            if let Some(i) = k.checked_sub(self.start_node) {
                if i < mids.len() {
                    return mids[i].clone();
                }
            }
        }
        0.5 * (self.node(k) + self.node(k + 1))
    }

    /// Linear interpolation at an arbitrary time (clamped to the grid).
    pub fn eval(&self, t: f64) -> Matrix {
        let dt = self.grid.dt();
        let x = ((t - self.grid.t0()) / dt).clamp(self.start_node as f64, self.last_node() as f64);
        let k = (x.floor() as usize).min(self.last_node().saturating_sub(1).max(self.start_node));
        let w = x - k as f64;
        if w == 0.0 || k + 1 > self.last_node() {
            return self.node(k).clone();
        }
        self.node(k) * (1.0 - w) + self.node(k + 1) * w
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub(crate) fn with_mids(mut self, mids: Vec<Matrix>) -> Self {
        debug_assert_eq!(mids.len() + 1, self.values.len());
        self.mids = Some(mids);
        self
    }

    pub(crate) fn from_parts(
        grid: TimeGrid,
        values: Vec<Matrix>,
        start_node: usize,
        blowup: Option<usize>,
    ) -> Self {
        Self { grid, values, mids: None, start_node, blowup }
    }
}

fn finite_and_bounded(m: &Matrix, bound: f64) -> bool {
    let mut sq = 0.0;
    for v in m.iter() {
        if !v.is_finite() {
            return false;
        }
        sq += v * v;
    }
    sq.sqrt() <= bound
}

/// Classical fixed-step RK4 for matrix-valued ODEs with blow-up detection.
///
/// `Backward` means the boundary value sits at `t1` and integration proceeds
/// toward `t0`. Integration aborts at the first node whose Frobenius norm
/// exceeds `blowup_norm` or contains a non-finite entry; the path then
/// records that node in `blowup`. A field that itself evaluates to a
/// non-finite value at a kept node is an error.
pub fn integrate_matrix_ode<F>(
    mut field: F,
    boundary: &Matrix,
    grid: TimeGrid,
    direction: Direction,
    blowup_norm: f64,
) -> Result<MatrixPath, NumericsError>
where
    F: FnMut(f64, &Matrix) -> Matrix,
{
    let h = match direction {
        Direction::Forward => grid.dt(),
        Direction::Backward => -grid.dt(),
    };
    let steps = grid.steps();
    let mut kept = Vec::with_capacity(steps + 1);
    kept.push(boundary.clone());
    let mut y = boundary.clone();
    let mut blowup = None;
    for i in 0..steps {
        let t = match direction {
            Direction::Forward => grid.node(i),
            Direction::Backward => grid.node(steps - i),
        };
        let k1 = field(t, &y);
        if !finite_and_bounded(&k1, f64::INFINITY) {
            return Err(NumericsError::NonFiniteField(t));
        }
        let k2 = field(t + 0.5 * h, &(&y + &k1 * (0.5 * h)));
        let k3 = field(t + 0.5 * h, &(&y + &k2 * (0.5 * h)));
        let k4 = field(t + h, &(&y + &k3 * h));
        y = &y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !finite_and_bounded(&y, blowup_norm) {
            blowup = Some(match direction {
                Direction::Forward => i + 1,
                Direction::Backward => steps - i - 1,
            });
            break;
        }
        kept.push(y.clone());
    }
    let path = match direction {
        Direction::Forward => {
            MatrixPath::from_parts(grid, kept, 0, blowup)
        }
        Direction::Backward => {
            kept.reverse();
            let start = blowup.map(|b| b + 1).unwrap_or(0);
            MatrixPath::from_parts(grid, kept, start, blowup)
        }
    };
    Ok(path)
}

/// RK4 at half resolution, recording both nodes and interval midpoints of
/// `grid`. Used for coefficient paths (P, K, ...) that later sweeps consume
/// stage-exactly. Returns the completed path or the blow-up time.
pub(crate) fn integrate_with_mids<F>(
    mut field: F,
    boundary: &Matrix,
    grid: TimeGrid,
    direction: Direction,
    blowup_norm: f64,
) -> Result<MatrixPath, IntegrationStop>
where
    F: FnMut(f64, &Matrix) -> Matrix,
{
    let fine = TimeGrid::new(grid.t0(), grid.t1(), 2 * grid.steps()).expect("grid is valid");
    let path = integrate_matrix_ode(&mut field, boundary, fine, direction, blowup_norm)
        .map_err(|e| match e {
            NumericsError::NonFiniteField(t) => IntegrationStop { time: t, field_failure: true },
            other => panic!("unexpected integration error: {other}"),
        })?;
    if let Some(j) = path.blowup() {
        return Err(IntegrationStop { time: fine.node(j), field_failure: false });
    }
    let nodes: Vec<Matrix> = (0..grid.num_nodes()).map(|k| path.node(2 * k).clone()).collect();
    let mids: Vec<Matrix> = (0..grid.steps()).map(|k| path.node(2 * k + 1).clone()).collect();
    Ok(MatrixPath::new_complete(grid, nodes)
        .expect("node count matches grid")
        .with_mids(mids))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IntegrationStop {
    pub time: f64,
    #[allow(dead_code)]
    pub field_failure: bool,
}

/// RK4 over tabulated coefficients: the field receives the half-grid index of
/// the stage time (`2k`, `2k+1`, `2k+2`), so coefficient lookups are exact.
/// Returns node values plus interval midpoints (fourth-order cubic-Hermite
/// dense output) and an optional blow-up node.
pub(crate) fn rk4_tab<F>(
    mut field: F,
    boundary: &Matrix,
    grid: TimeGrid,
    direction: Direction,
    blowup_norm: f64,
) -> (Vec<Matrix>, Vec<Matrix>, Option<usize>)
where
    F: FnMut(usize, &Matrix) -> Matrix,
{
    let steps = grid.steps();
    let h = grid.dt();
    let mut values = Vec::with_capacity(steps + 1);
    let mut mids = Vec::with_capacity(steps);
    let mut y = boundary.clone();
    values.push(y.clone());
    for i in 0..steps {
        let (j0, j1, j2, sign) = match direction {
            Direction::Forward => (2 * i, 2 * i + 1, 2 * i + 2, 1.0),
            Direction::Backward => (2 * (steps - i), 2 * (steps - i) - 1, 2 * (steps - i) - 2, -1.0),
        };
        let hs = sign * h;
        let k1 = field(j0, &y);
        let k2 = field(j1, &(&y + &k1 * (0.5 * hs)));
        let k3 = field(j1, &(&y + &k2 * (0.5 * hs)));
        let k4 = field(j2, &(&y + &k3 * hs));
        let y_new = &y + (k1.clone() + k2 * 2.0 + k3 * 2.0 + k4) * (hs / 6.0);
        if !finite_and_bounded(&y_new, blowup_norm) {
            let node = match direction {
                Direction::Forward => i + 1,
                Direction::Backward => steps - i - 1,
            };
            return (values, mids, Some(node));
        }
        // Hermite midpoint: (y0 + y1)/2 + hs/8 (y0' - y1'), fourth order
        let f_new = field(j2, &y_new);
        mids.push((&y + &y_new) * 0.5 + (k1 - f_new) * (hs / 8.0));
        y = y_new;
        values.push(y.clone());
    }
    (values, mids, None)
}

/// Matrix exponential via nalgebra's scaling-and-squaring Padé approximant.
/// Relative error is at the 1e-12 level for Frobenius norms up to ~50; inputs
/// beyond [`EXP_NORM_LIMIT`] are rejected as overflow.
pub fn matrix_exponential(m: &Matrix) -> Result<Matrix, NumericsError> {
    let norm = m.norm();
    if !norm.is_finite() {
        return Err(NumericsError::NonFiniteField(f64::NAN));
    }
    if norm > EXP_NORM_LIMIT {
        return Err(NumericsError::Overflow { norm, limit: EXP_NORM_LIMIT });
    }
    Ok(m.clone().exp())
}

const SCHUR_MAX_ITER: usize = 100_000;

/// All eigenvalues (with multiplicity) via Hessenberg reduction and shifted
/// QR, reported as complex values.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex64>, NumericsError> {
    if m.nrows() != m.ncols() {
        return Err(NumericsError::DimensionMismatch(format!(
            "eigenvalues need a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or(NumericsError::NoConvergence)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// True iff every eigenvalue has real part strictly below `-margin`.
pub fn is_hurwitz(m: &Matrix, margin: f64) -> Result<bool, NumericsError> {
    Ok(eigenvalues(m)?.iter().all(|l| l.re < -margin))
}

/// Solve `A X = B` by partial-pivot LU. Reports [`NumericsError::Singular`]
/// when the smallest pivot falls below `1e-14 * ||A||_F`.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    if a.nrows() != a.ncols() {
        return Err(NumericsError::DimensionMismatch(format!(
            "solve_linear needs a square A, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() != b.nrows() {
        return Err(NumericsError::DimensionMismatch(format!(
            "A is {}x{} but B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let norm = a.norm();
    let lu = a.clone().lu();
    let min_pivot = lu.u().diagonal().iter().fold(f64::INFINITY, |acc, d| acc.min(d.abs()));
    if min_pivot < SINGULAR_PIVOT_REL * norm.max(f64::MIN_POSITIVE) {
        return Err(NumericsError::Singular { pivot: min_pivot });
    }
    lu.solve(b).ok_or(NumericsError::Singular { pivot: min_pivot })
}

/// Sylvester equation `A X - X B = C` solved densely through the Kronecker
/// form. Intended for the small systems arising in Schur-block swaps and
/// Newton steps on the consistency ARE (guarded to 4096 unknowns).
pub fn solve_sylvester(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix, NumericsError> {
    let (p, q) = (a.nrows(), b.nrows());
    if c.nrows() != p || c.ncols() != q {
        return Err(NumericsError::DimensionMismatch(format!(
            "Sylvester RHS must be {}x{}, got {}x{}",
            p,
            q,
            c.nrows(),
            c.ncols()
        )));
    }
    if p * q > 4096 {
        return Err(NumericsError::DimensionMismatch(format!(
            "Sylvester system too large for the dense Kronecker route ({} unknowns)",
            p * q
        )));
    }
    let eye_p = Matrix::identity(p, p);
    let eye_q = Matrix::identity(q, q);
    let big = eye_q.kronecker(a) - b.transpose().kronecker(&eye_p);
    let rhs = Matrix::from_column_slice(p * q, 1, c.as_slice());
    let sol = solve_linear(&big, &rhs)?;
    Ok(Matrix::from_column_slice(p, q, sol.as_slice()))
}

/// Real Schur form with the eigenvalues accepted by `select` moved to the
/// leading block; `selected` is the dimension of the leading invariant
/// subspace (spanned by the first `selected` columns of `q`).
pub(crate) struct OrderedSchur {
    pub q: Matrix,
    #[allow(dead_code)] // consumed by factorization checks in tests
    pub t: Matrix,
    pub selected: usize,
}

/// Eigenvalues of the diagonal block starting at `i` (size 1 or 2).
fn block_eigenvalue(t: &Matrix, i: usize, size: usize) -> Complex64 {
    if size == 1 {
        Complex64::new(t[(i, i)], 0.0)
    } else {
        let a = t[(i, i)];
        let b = t[(i, i + 1)];
        let c = t[(i + 1, i)];
        let d = t[(i + 1, i + 1)];
        let mean = 0.5 * (a + d);
        let disc = 0.25 * (a - d) * (a - d) + b * c;
        if disc >= 0.0 {
            Complex64::new(mean + disc.sqrt(), 0.0)
        } else {
            Complex64::new(mean, (-disc).sqrt())
        }
    }
}

/// Full QR of a tall matrix by Householder reflections, returning the square
/// orthogonal factor. Sizes here are at most 4x2.
fn full_qr_q(m: &Matrix) -> Matrix {
    let (rows, cols) = (m.nrows(), m.ncols());
    let mut r = m.clone();
    let mut q = Matrix::identity(rows, rows);
    for j in 0..cols.min(rows - 1) {
        let mut v = Vector::zeros(rows - j);
        for i in j..rows {
            v[i - j] = r[(i, j)];
        }
        let alpha = -v[0].signum() * v.norm();
        if alpha == 0.0 {
            continue;
        }
        v[0] -= alpha;
        let vnorm = v.norm();
        if vnorm < f64::MIN_POSITIVE {
            continue;
        }
        v /= vnorm;
        // apply H = I - 2vv^T to the trailing blocks of r and to q
        for col in j..cols {
            let mut dot = 0.0;
            for i in j..rows {
                dot += v[i - j] * r[(i, col)];
            }
            for i in j..rows {
                r[(i, col)] -= 2.0 * v[i - j] * dot;
            }
        }
        for col in 0..rows {
            let mut dot = 0.0;
            for i in j..rows {
                dot += v[i - j] * q[(i, col)];
            }
            for i in j..rows {
                q[(i, col)] -= 2.0 * v[i - j] * dot;
            }
        }
    }
    // accumulated reflections act on the left; Q is their transpose
    q.transpose()
}

/// Swap the adjacent diagonal blocks of sizes `p` and `q` starting at row
/// `i0` of the quasi-triangular `t`, updating the orthogonal factor `z`.
fn swap_blocks(t: &mut Matrix, z: &mut Matrix, i0: usize, p: usize, q: usize) -> Result<(), NumericsError> {
    let n = t.nrows();
    let t11 = t.view((i0, i0), (p, p)).into_owned();
    let t12 = t.view((i0, i0 + p), (p, q)).into_owned();
    let t22 = t.view((i0 + p, i0 + p), (q, q)).into_owned();
    // X with T11 X - X T22 = -T12 makes span[X; I] the T22-invariant subspace
    let x = solve_sylvester(&t11, &t22, &(-&t12))?;
    let mut stacked = Matrix::zeros(p + q, q);
    stacked.view_mut((0, 0), (p, q)).copy_from(&x);
    stacked.view_mut((p, 0), (q, q)).copy_from(&Matrix::identity(q, q));
    let w = full_qr_q(&stacked);
    // T <- W^T T W on the window, Z <- Z W
    let m = p + q;
    let t_rows = t.view((i0, 0), (m, n)).into_owned();
    t.view_mut((i0, 0), (m, n)).copy_from(&(w.transpose() * t_rows));
    let t_cols = t.view((0, i0), (n, m)).into_owned();
    t.view_mut((0, i0), (n, m)).copy_from(&(t_cols * &w));
    let z_cols = z.view((0, i0), (n, m)).into_owned();
    z.view_mut((0, i0), (n, m)).copy_from(&(z_cols * &w));
    // zero the block that is structurally zero after the swap
    for r in 0..p {
        for c in 0..q {
            t[(i0 + q + r, i0 + c)] = 0.0;
        }
    }
    Ok(())
}

/// Diagonal block layout of a real quasi-triangular matrix.
fn block_starts(t: &Matrix) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        let two = i + 1 < n && t[(i + 1, i)] != 0.0;
        blocks.push((i, if two { 2 } else { 1 }));
        i += if two { 2 } else { 1 };
    }
    blocks
}

/// Clean sub-diagonal noise so the block structure is unambiguous.
fn normalize_quasi_triangular(t: &mut Matrix) {
    let n = t.nrows();
    let scale = t.norm().max(1.0);
    let mut i = 0;
    while i + 1 < n {
        if t[(i + 1, i)].abs() < 1e-14 * scale {
            t[(i + 1, i)] = 0.0;
            i += 1;
        } else {
            // part of a 2x2 block; its own sub-sub-diagonal must vanish
            if i + 2 < n {
                t[(i + 2, i)] = 0.0;
                t[(i + 2, i + 1)] = 0.0;
            }
            i += 2;
        }
    }
    for r in 0..n {
        for c in 0..r.saturating_sub(1) {
            t[(r, c)] = 0.0;
        }
    }
}

pub(crate) fn ordered_schur<F>(m: &Matrix, select: F) -> Result<OrderedSchur, NumericsError>
where
    F: Fn(Complex64) -> bool,
{
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or(NumericsError::NoConvergence)?;
    let (mut z, mut t) = schur.unpack();
    normalize_quasi_triangular(&mut t);

    // bubble every selected block above all unselected ones, preserving order
    loop {
        let blocks = block_starts(&t);
        let mut swap_at = None;
        for w in blocks.windows(2) {
            let (i0, s0) = w[0];
            let (i1, s1) = w[1];
            let sel0 = select(block_eigenvalue(&t, i0, s0));
            let sel1 = select(block_eigenvalue(&t, i1, s1));
            if !sel0 && sel1 {
                swap_at = Some((i0, s0, s1));
                break;
            }
            debug_assert_eq!(i1, i0 + s0);
        }
        match swap_at {
            Some((i0, p, q)) => swap_blocks(&mut t, &mut z, i0, p, q)?,
            None => break,
        }
    }

    let mut selected = 0;
    for (i0, s) in block_starts(&t) {
        if select(block_eigenvalue(&t, i0, s)) {
            selected += s;
        } else {
            break;
        }
    }
    Ok(OrderedSchur { q: z, t, selected })
}
