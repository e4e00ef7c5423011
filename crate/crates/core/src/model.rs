//! Problem data: validation, derived weights, scenario file I/O.

use crate::numerics::{Matrix, Vector};
use thiserror::Error;

/// Symmetry is enforced elementwise to this tolerance.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalue margin for the (semi)definiteness checks.
pub const DEFINITENESS_MARGIN: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix {0} is not symmetric to 1e-12")]
    NotSymmetric(&'static str),
    #[error("matrix {0} is not positive semidefinite")]
    NotPositiveSemidefinite(&'static str),
    #[error("matrix {0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("bad horizon: finite needs T > 0, infinite needs rho >= 0")]
    BadHorizon,
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Finite { t: f64 },
    Infinite { rho: f64 },
}

impl Horizon {
    pub fn is_finite(&self) -> bool {
        matches!(self, Horizon::Finite { .. })
    }
}

/// All problem matrices and scalars, plus the horizon descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub n: usize,
    pub r: usize,
    pub d: usize,
    pub a: Matrix,
    pub b: Matrix,
    pub g: Matrix,
    pub sigma: Matrix,
    pub q: Matrix,
    pub r1: Matrix,
    pub r2: Matrix,
    pub h: Matrix,
    pub gamma: Matrix,
    pub eta: Vector,
    pub horizon: Horizon,
    pub xbar0: Vector,
    pub init_spread: f64,
}

/// Parameters certified against every invariant; immutable afterwards and
/// safe to share across threads.
#[derive(Debug, Clone)]
pub struct ValidatedModel {
    params: ModelParams,
}

impl ValidatedModel {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn horizon(&self) -> Horizon {
        self.params.horizon
    }

    /// `T` for finite horizon, `rho` for infinite.
    pub fn horizon_value(&self) -> f64 {
        match self.params.horizon {
            Horizon::Finite { t } => t,
            Horizon::Infinite { rho } => rho,
        }
    }

    pub fn r1_inv(&self) -> Matrix {
        crate::numerics::solve_linear(&self.params.r1, &Matrix::identity(self.params.r, self.params.r))
            .expect("validated R1 is positive definite")
    }

    pub fn r2_inv(&self) -> Matrix {
        crate::numerics::solve_linear(&self.params.r2, &Matrix::identity(self.params.n, self.params.n))
            .expect("validated R2 is positive definite")
    }

    /// `B R1^{-1} B^T`.
    pub fn control_gain_product(&self) -> Matrix {
        let p = &self.params;
        &p.b * self.r1_inv() * p.b.transpose()
    }
}

/// Weight matrices derived from (Q, Gamma, eta).
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedWeights {
    /// `Gamma^T Q + Q Gamma - Gamma^T Q Gamma`.
    pub psi: Matrix,
    /// `Q eta - Gamma^T Q eta`.
    pub eta_bar: Vector,
    /// `(I - Gamma)^T Q (I - Gamma)`.
    pub qig: Matrix,
}

fn check_symmetric(m: &Matrix, name: &'static str) -> Result<(), ModelError> {
    if (m - m.transpose()).amax() > SYMMETRY_TOL {
        return Err(ModelError::NotSymmetric(name));
    }
    Ok(())
}

fn min_symmetric_eigenvalue(m: &Matrix) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigenvalues().iter().fold(f64::INFINITY, |a, &l| a.min(l))
}

fn check_dims(p: &ModelParams) -> Result<(), ModelError> {
    let checks: [(&str, usize, usize, &Matrix); 9] = [
        ("A", p.n, p.n, &p.a),
        ("B", p.n, p.r, &p.b),
        ("G", p.n, p.n, &p.g),
        ("sigma", p.n, p.d, &p.sigma),
        ("Q", p.n, p.n, &p.q),
        ("R1", p.r, p.r, &p.r1),
        ("R2", p.n, p.n, &p.r2),
        ("H", p.n, p.n, &p.h),
        ("Gamma", p.n, p.n, &p.gamma),
    ];
    for (name, rows, cols, m) in checks {
        if m.nrows() != rows || m.ncols() != cols {
            return Err(ModelError::DimensionMismatch(format!(
                "{name} must be {rows}x{cols}, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    if p.eta.len() != p.n {
        return Err(ModelError::DimensionMismatch(format!(
            "eta must have length {}, got {}",
            p.n,
            p.eta.len()
        )));
    }
    if p.xbar0.len() != p.n {
        return Err(ModelError::DimensionMismatch(format!(
            "xbar0 must have length {}, got {}",
            p.n,
            p.xbar0.len()
        )));
    }
    if p.n == 0 || p.r == 0 || p.d == 0 {
        return Err(ModelError::DimensionMismatch("n, r, d must be positive".into()));
    }
    Ok(())
}

/// Certify raw parameters against every invariant: consistent dimensions,
/// symmetric weights, Q >= 0, R1 > 0, R2 > 0, H >= 0, a well-formed horizon,
/// and a nonnegative initial spread.
pub fn validate_params(raw: ModelParams) -> Result<ValidatedModel, ModelError> {
    check_dims(&raw)?;
    check_symmetric(&raw.q, "Q")?;
    check_symmetric(&raw.r1, "R1")?;
    check_symmetric(&raw.r2, "R2")?;
    check_symmetric(&raw.h, "H")?;
    if min_symmetric_eigenvalue(&raw.q) < -DEFINITENESS_MARGIN {
        return Err(ModelError::NotPositiveSemidefinite("Q"));
    }
    if min_symmetric_eigenvalue(&raw.h) < -DEFINITENESS_MARGIN {
        return Err(ModelError::NotPositiveSemidefinite("H"));
    }
    if min_symmetric_eigenvalue(&raw.r1) <= DEFINITENESS_MARGIN {
        return Err(ModelError::NotPositiveDefinite("R1"));
    }
    if min_symmetric_eigenvalue(&raw.r2) <= DEFINITENESS_MARGIN {
        return Err(ModelError::NotPositiveDefinite("R2"));
    }
    match raw.horizon {
        Horizon::Finite { t } if !(t > 0.0 && t.is_finite()) => return Err(ModelError::BadHorizon),
        Horizon::Infinite { rho } if !(rho >= 0.0 && rho.is_finite()) => {
            return Err(ModelError::BadHorizon)
        }
        _ => {}
    }
    if !(raw.init_spread >= 0.0 && raw.init_spread.is_finite()) {
        return Err(ModelError::DimensionMismatch("init_spread must be a nonnegative real".into()));
    }
    Ok(ValidatedModel { params: raw })
}

/// Psi, eta_bar and (I-Gamma)^T Q (I-Gamma); the identity
/// `Q - Psi = (I-Gamma)^T Q (I-Gamma)` holds by construction.
pub fn derived_weights(m: &ValidatedModel) -> DerivedWeights {
    let p = m.params();
    let gtq = p.gamma.transpose() * &p.q;
    let psi = &gtq + gtq.transpose() - &gtq * &p.gamma;
    let eta_bar = &p.q * &p.eta - p.gamma.transpose() * (&p.q * &p.eta);
    let i_minus = Matrix::identity(p.n, p.n) - &p.gamma;
    let qig = i_minus.transpose() * &p.q * &i_minus;
    DerivedWeights { psi, eta_bar, qig }
}

// --- scenario file I/O ---------------------------------------------------
//
// Scenario files are JSON objects with keys
// n, r, d, A, B, G, sigma, Q, R1, R2, H, Gamma, eta, horizon, xbar0,
// init_spread; matrices are row-major nested arrays of decimals. Optional
// fields and their defaults: eta -> 0, sigma -> 0.1 * I_{n x d} (d defaults
// to n), H -> 0, xbar0 -> 0, init_spread -> 0.

use serde_json::Value;

fn field<'v>(obj: &'v serde_json::Map<String, Value>, key: &str) -> Result<&'v Value, ModelError> {
    obj.get(key).ok_or_else(|| ModelError::SchemaViolation(format!("missing field `{key}`")))
}

fn as_usize(v: &Value, key: &str) -> Result<usize, ModelError> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| ModelError::SchemaViolation(format!("field `{key}` must be a nonnegative integer")))
}

fn as_f64(v: &Value, key: &str) -> Result<f64, ModelError> {
    v.as_f64().ok_or_else(|| ModelError::SchemaViolation(format!("field `{key}` must be a number")))
}

fn as_matrix(v: &Value, key: &str, rows: usize, cols: usize) -> Result<Matrix, ModelError> {
    let outer = v
        .as_array()
        .ok_or_else(|| ModelError::SchemaViolation(format!("field `{key}` must be a nested array")))?;
    if outer.len() != rows {
        return Err(ModelError::SchemaViolation(format!(
            "field `{key}` must have {rows} rows, got {}",
            outer.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for row in outer {
        let row = row
            .as_array()
            .ok_or_else(|| ModelError::SchemaViolation(format!("rows of `{key}` must be arrays")))?;
        if row.len() != cols {
            return Err(ModelError::SchemaViolation(format!(
                "rows of `{key}` must have {cols} entries, got {}",
                row.len()
            )));
        }
        for x in row {
            data.push(as_f64(x, key)?);
        }
    }
    Ok(Matrix::from_row_slice(rows, cols, &data))
}

fn as_vector(v: &Value, key: &str, len: usize) -> Result<Vector, ModelError> {
    let arr = v
        .as_array()
        .ok_or_else(|| ModelError::SchemaViolation(format!("field `{key}` must be an array")))?;
    if arr.len() != len {
        return Err(ModelError::SchemaViolation(format!(
            "field `{key}` must have {len} entries, got {}",
            arr.len()
        )));
    }
    let mut data = Vec::with_capacity(len);
    for x in arr {
        data.push(as_f64(x, key)?);
    }
    Ok(Vector::from_vec(data))
}

/// Parse a scenario from its JSON text.
pub fn scenario_from_json(text: &str) -> Result<ModelParams, ModelError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ModelError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| ModelError::SchemaViolation("scenario must be a JSON object".into()))?;

    let n = as_usize(field(obj, "n")?, "n")?;
    let r = as_usize(field(obj, "r")?, "r")?;
    let d = match obj.get("d") {
        Some(v) => as_usize(v, "d")?,
        None => n,
    };
    let a = as_matrix(field(obj, "A")?, "A", n, n)?;
    let b = as_matrix(field(obj, "B")?, "B", n, r)?;
    let g = as_matrix(field(obj, "G")?, "G", n, n)?;
    let q = as_matrix(field(obj, "Q")?, "Q", n, n)?;
    let r1 = as_matrix(field(obj, "R1")?, "R1", r, r)?;
    let r2 = as_matrix(field(obj, "R2")?, "R2", n, n)?;
    let gamma = as_matrix(field(obj, "Gamma")?, "Gamma", n, n)?;
    let h = match obj.get("H") {
        Some(v) => as_matrix(v, "H", n, n)?,
        None => Matrix::zeros(n, n),
    };
    let sigma = match obj.get("sigma") {
        Some(v) => as_matrix(v, "sigma", n, d)?,
        None => Matrix::from_fn(n, d, |i, j| if i == j { 0.1 } else { 0.0 }),
    };
    let eta = match obj.get("eta") {
        Some(v) => as_vector(v, "eta", n)?,
        None => Vector::zeros(n),
    };
    let xbar0 = match obj.get("xbar0") {
        Some(v) => as_vector(v, "xbar0", n)?,
        None => Vector::zeros(n),
    };
    let init_spread = match obj.get("init_spread") {
        Some(v) => as_f64(v, "init_spread")?,
        None => 0.0,
    };
    let horizon_val = field(obj, "horizon")?;
    let hobj = horizon_val
        .as_object()
        .ok_or_else(|| ModelError::SchemaViolation("`horizon` must be an object".into()))?;
    let kind = hobj
        .get("type")
        .and_then(|v| v.as_str())
        .ok_or_else(|| ModelError::SchemaViolation("`horizon.type` must be a string".into()))?;
    let horizon = match kind {
        "finite" => Horizon::Finite { t: as_f64(field(hobj, "T")?, "horizon.T")? },
        "infinite" => Horizon::Infinite { rho: as_f64(field(hobj, "rho")?, "horizon.rho")? },
        other => {
            return Err(ModelError::SchemaViolation(format!(
                "`horizon.type` must be \"finite\" or \"infinite\", got \"{other}\""
            )))
        }
    };

    Ok(ModelParams {
        n,
        r,
        d,
        a,
        b,
        g,
        sigma,
        q,
        r1,
        r2,
        h,
        gamma,
        eta,
        horizon,
        xbar0,
        init_spread,
    })
}

/// Load a scenario file from disk.
pub fn load_scenario(path: &std::path::Path) -> Result<ModelParams, ModelError> {
    let text = std::fs::read_to_string(path)?;
    scenario_from_json(&text)
}

/// Decimal with 17 significant digits; round-trips f64 exactly.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn matrix_json(m: &Matrix) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let cols: Vec<String> = (0..m.ncols()).map(|j| fmt17(m[(i, j)])).collect();
            format!("[{}]", cols.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

fn vector_json(v: &Vector) -> String {
    let entries: Vec<String> = v.iter().map(|x| fmt17(*x)).collect();
    format!("[{}]", entries.join(", "))
}

/// Serialize a scenario with 17-significant-digit decimals so that
/// load(serialize(p)) reproduces `p` bit-exactly.
pub fn scenario_to_json(p: &ModelParams) -> String {
    let horizon = match p.horizon {
        Horizon::Finite { t } => format!("{{\"type\": \"finite\", \"T\": {}}}", fmt17(t)),
        Horizon::Infinite { rho } => {
            format!("{{\"type\": \"infinite\", \"rho\": {}}}", fmt17(rho))
        }
    };
    format!(
        "{{\n  \"n\": {},\n  \"r\": {},\n  \"d\": {},\n  \"A\": {},\n  \"B\": {},\n  \"G\": {},\n  \"sigma\": {},\n  \"Q\": {},\n  \"R1\": {},\n  \"R2\": {},\n  \"H\": {},\n  \"Gamma\": {},\n  \"eta\": {},\n  \"horizon\": {},\n  \"xbar0\": {},\n  \"init_spread\": {}\n}}\n",
        p.n,
        p.r,
        p.d,
        matrix_json(&p.a),
        matrix_json(&p.b),
        matrix_json(&p.g),
        matrix_json(&p.sigma),
        matrix_json(&p.q),
        matrix_json(&p.r1),
        matrix_json(&p.r2),
        matrix_json(&p.h),
        matrix_json(&p.gamma),
        vector_json(&p.eta),
        horizon,
        vector_json(&p.xbar0),
        fmt17(p.init_spread),
    )
}

/// Scalar helper used across tests and the verification suite.
pub fn scalar_params(
    a: f64,
    b: f64,
    g: f64,
    q: f64,
    r1: f64,
    r2: f64,
    h: f64,
    gamma: f64,
    eta: f64,
    horizon: Horizon,
    xbar0: f64,
    sigma: f64,
    init_spread: f64,
) -> ModelParams {
    let m1 = |x: f64| Matrix::from_element(1, 1, x);
    ModelParams {
        n: 1,
        r: 1,
        d: 1,
        a: m1(a),
        b: m1(b),
        g: m1(g),
        sigma: m1(sigma),
        q: m1(q),
        r1: m1(r1),
        r2: m1(r2),
        h: m1(h),
        gamma: m1(gamma),
        eta: Vector::from_element(1, eta),
        horizon,
        xbar0: Vector::from_element(1, xbar0),
        init_spread,
    }
}

/// The bundled reference scenario (scalar, finite horizon).
pub fn reference_example() -> ValidatedModel {
    validate_params(scenario_from_json(include_str!("../scenarios/paper_example.json")).unwrap())
        .unwrap()
}

/// Variant of the reference scenario on which uniform convexity fails.
pub fn blowup_example() -> ValidatedModel {
    validate_params(scenario_from_json(include_str!("../scenarios/blowup_case.json")).unwrap())
        .unwrap()
}

/// Scalar infinite-horizon test scenario.
pub fn scalar_infinite_example() -> ValidatedModel {
    validate_params(scenario_from_json(include_str!("../scenarios/scalar_infinite.json")).unwrap())
        .unwrap()
}

/// Degenerate scenario with Q = H = 0 and eta = 0 (zero laws, zero cost).
pub fn zero_cost_example() -> ValidatedModel {
    validate_params(scenario_from_json(include_str!("../scenarios/zero_cost.json")).unwrap())
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_raw() -> ModelParams {
        scalar_params(
            1.0,
            1.0,
            -1.5,
            1.0,
            1.0,
            1.0,
            1.0,
            0.5,
            0.0,
            Horizon::Finite { t: 1.0 },
            1.0,
            0.1,
            0.3,
        )
    }

    #[test]
    fn reference_parameters_accepted() {
        assert!(validate_params(reference_raw()).is_ok());
    }

    #[test]
    fn zero_r1_rejected() {
        let mut p = reference_raw();
        p.r1 = Matrix::zeros(1, 1);
        assert!(matches!(validate_params(p), Err(ModelError::NotPositiveDefinite("R1"))));
    }

    #[test]
    fn asymmetric_q_rejected() {
        let mut p = reference_raw();
        p.n = 2;
        p.d = 2;
        p.a = Matrix::identity(2, 2);
        p.b = Matrix::from_row_slice(2, 1, &[1.0, 0.0]);
        p.g = Matrix::zeros(2, 2);
        p.sigma = Matrix::identity(2, 2) * 0.1;
        p.q = Matrix::from_row_slice(2, 2, &[1.0, 1e-6, 0.0, 1.0]);
        p.r2 = Matrix::identity(2, 2);
        p.h = Matrix::zeros(2, 2);
        p.gamma = Matrix::zeros(2, 2);
        p.eta = Vector::zeros(2);
        p.xbar0 = Vector::zeros(2);
        assert!(matches!(validate_params(p), Err(ModelError::NotSymmetric("Q"))));
    }

    #[test]
    fn bad_horizon_rejected() {
        let mut p = reference_raw();
        p.horizon = Horizon::Finite { t: 0.0 };
        assert!(matches!(validate_params(p), Err(ModelError::BadHorizon)));
        let mut p = reference_raw();
        p.horizon = Horizon::Infinite { rho: -0.1 };
        assert!(matches!(validate_params(p), Err(ModelError::BadHorizon)));
    }

    #[test]
    fn derived_weights_special_cases() {
        // Gamma = 0: Psi = 0, eta_bar = Q eta, QIG = Q
        let mut p = reference_raw();
        p.gamma = Matrix::zeros(1, 1);
        p.eta = Vector::from_element(1, 2.0);
        let m = validate_params(p).unwrap();
        let dw = derived_weights(&m);
        assert_eq!(dw.psi[(0, 0)], 0.0);
        assert_eq!(dw.eta_bar[0], 2.0);
        assert_eq!(dw.qig[(0, 0)], 1.0);

        // reference values: Psi = 0.75, QIG = 0.25
        let m = validate_params(reference_raw()).unwrap();
        let dw = derived_weights(&m);
        assert!((dw.psi[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((dw.qig[(0, 0)] - 0.25).abs() < 1e-15);

        // Gamma = I: QIG = 0, Psi = Q
        let mut p = reference_raw();
        p.gamma = Matrix::identity(1, 1);
        let m = validate_params(p).unwrap();
        let dw = derived_weights(&m);
        assert!(dw.qig[(0, 0)].abs() < 1e-15);
        assert!((dw.psi[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scenario_defaults_and_schema_errors() {
        let text = r#"{"n":1,"r":1,"A":[[1.0]],"B":[[1.0]],"G":[[-1.5]],"Q":[[1.0]],
                       "R1":[[1.0]],"R2":[[1.0]],"Gamma":[[0.5]],
                       "horizon":{"type":"infinite","rho":0.2}}"#;
        let p = scenario_from_json(text).unwrap();
        assert_eq!(p.horizon, Horizon::Infinite { rho: 0.2 });
        assert_eq!(p.sigma[(0, 0)], 0.1);
        assert_eq!(p.eta[0], 0.0);
        assert_eq!(p.init_spread, 0.0);

        let missing_a = r#"{"n":1,"r":1,"B":[[1.0]],"G":[[0.0]],"Q":[[1.0]],
                            "R1":[[1.0]],"R2":[[1.0]],"Gamma":[[0.0]],
                            "horizon":{"type":"finite","T":1.0}}"#;
        match scenario_from_json(missing_a) {
            Err(ModelError::SchemaViolation(msg)) => assert!(msg.contains("`A`")),
            other => panic!("expected schema violation, got {other:?}"),
        }

        match scenario_from_json("{ not json") {
            Err(ModelError::Parse { line, .. }) => assert!(line >= 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bundled_scenarios_load() {
        assert_eq!(reference_example().params().g[(0, 0)], -1.5);
        assert_eq!(blowup_example().params().r2[(0, 0)], 0.04);
        assert!(matches!(scalar_infinite_example().horizon(), Horizon::Infinite { rho } if rho == 0.0));
        assert_eq!(zero_cost_example().params().q[(0, 0)], 0.0);
    }

    #[test]
    fn serialize_load_roundtrip_bit_exact() {
        for m in [
            reference_example(),
            blowup_example(),
            scalar_infinite_example(),
            zero_cost_example(),
        ] {
            let text = scenario_to_json(m.params());
            let back = scenario_from_json(&text).unwrap();
            assert_eq!(&back, m.params());
            let valid = validate_params(back).unwrap();
            assert_eq!(valid.params(), m.params());
        }
    }
}
