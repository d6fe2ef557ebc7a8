//! One-step time-difference reconstruction: the fidelity-embedded method,
//! a Tikhonov baseline, and the boundary-motion filter that strips the part
//! of a data vector explained by boundary-element conductivity changes.
//!
//! Both reconstruction methods solve their normal equations through the
//! 208-dimensional dual system `(S Sᵀ + …)` instead of materializing the
//! element-space Gram matrix: for `x = (SᵀS + A)⁻¹Sᵀv` with `A` diagonal this
//! is the push-through identity applied after symmetric diagonal scaling, so
//! the operator is identical in exact arithmetic but the factorization stays
//! 208×208 regardless of mesh size and is far better conditioned than the
//! element-space system.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::forward::{DataVector, ForwardError, PROTOCOL_LEN};
use crate::linalg::{dot, gram, Cholesky, Dense, FactorError};
use crate::phantom::FrameSequence;
use crate::sensitivity::{FidelityRegularizer, SensitivityMatrix, SensitivitySubmatrix};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("regularization weight: {0}")]
    InvalidLambda(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("frame index {index} out of range for {len} frames")]
    FrameIndex { index: usize, len: usize },
    #[error("image: {0}")]
    InvalidImage(String),
    #[error(transparent)]
    Factorization(#[from] FactorError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
}

/// Regularization weight: a positive finite value or the limit case in which
/// the data-fidelity term drops out entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Finite(f64),
    Infinite,
}

impl Lambda {
    /// Accept only weights the reconstructions are defined for.
    pub fn validated(self) -> Result<Lambda, ReconError> {
        match self {
            Lambda::Finite(v) if v.is_finite() && v > 0.0 => Ok(self),
            Lambda::Finite(v) if v.is_infinite() && v > 0.0 => Ok(Lambda::Infinite),
            Lambda::Finite(v) => Err(ReconError::InvalidLambda(format!(
                "must be positive and finite (or 'inf'), got {v}"
            ))),
            Lambda::Infinite => Ok(self),
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Lambda::Infinite)
    }
}

impl FromStr for Lambda {
    type Err = ReconError;

    fn from_str(s: &str) -> Result<Lambda, ReconError> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(Lambda::Infinite);
        }
        let v: f64 = t
            .parse()
            .map_err(|_| ReconError::InvalidLambda(format!("cannot parse '{t}'")))?;
        Lambda::Finite(v).validated()
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lambda::Finite(v) => write!(f, "{v}"),
            Lambda::Infinite => write!(f, "inf"),
        }
    }
}

/// Which regularizer shapes the reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FidelityEmbedded,
    Standard,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::FidelityEmbedded => write!(f, "fer"),
            Method::Standard => write!(f, "standard"),
        }
    }
}

impl FromStr for Method {
    type Err = ReconError;

    fn from_str(s: &str) -> Result<Method, ReconError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fer" | "fidelity-embedded" => Ok(Method::FidelityEmbedded),
            "standard" | "tikhonov" => Ok(Method::Standard),
            other => Err(ReconError::InvalidImage(format!("unknown method '{other}'"))),
        }
    }
}

/// Element-wise conductivity-change image with the settings that produced it.
#[derive(Debug, Clone)]
pub struct ConductivityImage {
    values: Vec<f64>,
    method: Method,
    lambda: Lambda,
    timestamp: Option<f64>,
}

impl ConductivityImage {
    pub fn new(
        values: Vec<f64>,
        method: Method,
        lambda: Lambda,
    ) -> Result<ConductivityImage, ReconError> {
        if values.is_empty() {
            return Err(ReconError::InvalidImage("no element values".into()));
        }
        if let Some((k, &v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(ReconError::InvalidImage(format!("element {k} is {v}")));
        }
        Ok(ConductivityImage { values, method, lambda, timestamp: None })
    }

    pub fn with_timestamp(mut self, t: f64) -> ConductivityImage {
        self.timestamp = Some(t);
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn lambda(&self) -> Lambda {
        self.lambda
    }

    pub fn timestamp(&self) -> Option<f64> {
        self.timestamp
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Precomputed state for fidelity-embedded reconstructions: the transposed
/// sensitivity, the inverse regularizer diagonal, and the 208×208 outer
/// product of the diagonally scaled sensitivity.
#[derive(Debug, Clone)]
pub struct FerSolver {
    st: Arc<Dense>,
    inv_diag: Vec<f64>,
    outer: Dense,
}

/// Small dual outer-product matrix shared by both solvers. With `w` the
/// per-element column weights this is `Σ_k w_k · S_k S_kᵀ` over columns `S_k`.
fn weighted_outer(st: &Dense, weights: Option<&[f64]>) -> Dense {
    let n = st.rows();
    let mut outer = Dense::zeros(PROTOCOL_LEN, PROTOCOL_LEN);
    let data = outer.data_mut();
    for k in 0..n {
        let row = st.row(k);
        let w = weights.map_or(1.0, |w| w[k]);
        for a in 0..PROTOCOL_LEN {
            let wa = w * row[a];
            if wa == 0.0 {
                continue;
            }
            let base = a * PROTOCOL_LEN;
            for (b, &rb) in row.iter().enumerate().skip(a) {
                data[base + b] += wa * rb;
            }
        }
    }
    for a in 0..PROTOCOL_LEN {
        for b in 0..a {
            let v = outer.at(b, a);
            outer.set(a, b, v);
        }
    }
    outer
}

impl FerSolver {
    pub fn new(
        s: &SensitivityMatrix,
        reg: &FidelityRegularizer,
    ) -> Result<FerSolver, ReconError> {
        if reg.len() != s.n_elements() {
            return Err(ReconError::Dimension(format!(
                "regularizer has {} entries for {} elements",
                reg.len(),
                s.n_elements()
            )));
        }
        let mut inv_diag = Vec::with_capacity(reg.len());
        for (k, &d) in reg.diag().iter().enumerate() {
            if !(d > 0.0) || !d.is_finite() {
                return Err(ReconError::Dimension(format!(
                    "regularizer entry {k} is {d}, expected positive"
                )));
            }
            inv_diag.push(1.0 / d);
        }
        let st = Arc::new(s.entries().transpose());
        let weights: Vec<f64> = inv_diag.iter().map(|v| v * v).collect();
        let outer = weighted_outer(&st, Some(&weights));
        Ok(FerSolver { st, inv_diag, outer })
    }

    /// Factorize the dual system for one regularization weight. The infinite
    /// weight needs no factorization and reduces to weighted backprojection.
    pub fn factorize(&self, lambda: Lambda) -> Result<FerOperator<'_>, ReconError> {
        let lambda = lambda.validated()?;
        let chol = match lambda {
            Lambda::Finite(l) => {
                let mut m = self.outer.clone();
                for i in 0..PROTOCOL_LEN {
                    let v = m.at(i, i);
                    m.set(i, i, v + l);
                }
                Some(Cholesky::factor(m)?)
            }
            Lambda::Infinite => None,
        };
        Ok(FerOperator { solver: self, lambda, chol })
    }
}

/// One factorized fidelity-embedded reconstruction operator.
#[derive(Debug)]
pub struct FerOperator<'a> {
    solver: &'a FerSolver,
    lambda: Lambda,
    chol: Option<Cholesky>,
}

impl FerOperator<'_> {
    pub fn lambda(&self) -> Lambda {
        self.lambda
    }

    pub fn apply(&self, vdot: &DataVector) -> Vec<f64> {
        let (z, scale) = match (&self.chol, self.lambda) {
            (Some(chol), Lambda::Finite(l)) => {
                (chol.solve(vdot.values()), (1.0 + l * l).sqrt())
            }
            _ => (vdot.values().to_vec(), 1.0),
        };
        let st = &self.solver.st;
        (0..st.rows())
            .map(|k| {
                let w = self.solver.inv_diag[k];
                scale * w * w * dot(st.row(k), &z)
            })
            .collect()
    }

    pub fn reconstruct(&self, vdot: &DataVector) -> Result<ConductivityImage, ReconError> {
        ConductivityImage::new(self.apply(vdot), Method::FidelityEmbedded, self.lambda)
    }
}

/// Reconstruct one image with the fidelity-embedded regularizer.
///
/// For a finite weight the image is
/// `√(1+λ²) · (SᵀS + λ·diag(R)²)⁻¹ Sᵀ v̇`; in the infinite-weight limit the
/// fidelity term drops out and the image is `diag(R)⁻² Sᵀ v̇`. For frame
/// loops, build a [`FerSolver`] once and reuse its factorization.
pub fn fer_reconstruct(
    s: &SensitivityMatrix,
    reg: &FidelityRegularizer,
    vdot: &DataVector,
    lambda: Lambda,
) -> Result<ConductivityImage, ReconError> {
    FerSolver::new(s, reg)?.factorize(lambda)?.reconstruct(vdot)
}

/// Precomputed state for plain Tikhonov reconstructions.
#[derive(Debug, Clone)]
pub struct StandardSolver {
    st: Arc<Dense>,
    outer: Dense,
    scale: f64,
}

impl StandardSolver {
    pub fn new(s: &SensitivityMatrix) -> StandardSolver {
        let st = Arc::new(s.entries().transpose());
        let outer = weighted_outer(&st, None);
        let scale = (0..st.rows())
            .map(|k| {
                let r = st.row(k);
                dot(r, r)
            })
            .fold(0.0f64, f64::max);
        StandardSolver { st, outer, scale }
    }

    /// Largest diagonal entry of `SᵀS`; the given weight is multiplied by
    /// this before entering the normal equations.
    pub fn diagonal_scale(&self) -> f64 {
        self.scale
    }

    pub fn factorize(&self, lambda: Lambda) -> Result<StandardOperator<'_>, ReconError> {
        let lambda = lambda.validated()?;
        let l = match lambda {
            Lambda::Finite(l) => l,
            Lambda::Infinite => {
                return Err(ReconError::InvalidLambda(
                    "standard reconstruction requires a finite weight".into(),
                ));
            }
        };
        let shift = l * self.scale;
        let mut m = self.outer.clone();
        for i in 0..PROTOCOL_LEN {
            let v = m.at(i, i);
            m.set(i, i, v + shift);
        }
        Ok(StandardOperator { solver: self, lambda, chol: Cholesky::factor(m)? })
    }
}

/// One factorized Tikhonov reconstruction operator.
#[derive(Debug)]
pub struct StandardOperator<'a> {
    solver: &'a StandardSolver,
    lambda: Lambda,
    chol: Cholesky,
}

impl StandardOperator<'_> {
    pub fn lambda(&self) -> Lambda {
        self.lambda
    }

    pub fn apply(&self, vdot: &DataVector) -> Vec<f64> {
        let z = self.chol.solve(vdot.values());
        let st = &self.solver.st;
        (0..st.rows()).map(|k| dot(st.row(k), &z)).collect()
    }

    pub fn reconstruct(&self, vdot: &DataVector) -> Result<ConductivityImage, ReconError> {
        ConductivityImage::new(self.apply(vdot), Method::Standard, self.lambda)
    }
}

/// Reconstruct one image with identity-regularized Tikhonov:
/// `(SᵀS + λ·max diag(SᵀS)·I)⁻¹ Sᵀ v̇`. The weight must be finite.
pub fn standard_reconstruct(
    s: &SensitivityMatrix,
    vdot: &DataVector,
    lambda: Lambda,
) -> Result<ConductivityImage, ReconError> {
    StandardSolver::new(s).factorize(lambda)?.reconstruct(vdot)
}

/// Split a data vector into the part explained by boundary-element
/// conductivity changes and the remainder.
///
/// With `B` the boundary submatrix, the explained part is
/// `B (BᵀB + λ_b I)⁻¹ Bᵀ v̇` and the filtered vector is defined as
/// `v̇[i] − err[i]` entry by entry, so `filtered + err` reassembles `v̇`
/// exactly, bit for bit.
pub fn motion_filter(
    boundary: &SensitivitySubmatrix,
    vdot: &DataVector,
    lambda_b: f64,
) -> Result<(DataVector, DataVector), ReconError> {
    if !(lambda_b > 0.0) || !lambda_b.is_finite() {
        return Err(ReconError::InvalidLambda(format!(
            "boundary filter weight must be positive and finite, got {lambda_b}"
        )));
    }
    let b = boundary.entries();
    let p = b.cols();
    let mut m = gram(b);
    for i in 0..p {
        let v = m.at(i, i);
        m.set(i, i, v + lambda_b);
    }
    let rhs = b.tr_matvec(vdot.values());
    let z = Cholesky::factor(m)?.solve(&rhs);
    let err = b.matvec(&z);
    let filtered: Vec<f64> = vdot.values().iter().zip(&err).map(|(v, e)| v - e).collect();
    Ok((DataVector::from_values(filtered)?, DataVector::from_values(err)?))
}

/// Filter weight used when none is configured: 1% of the largest diagonal
/// entry of `BᵀB`.
pub fn default_motion_lambda(boundary: &SensitivitySubmatrix) -> f64 {
    let b = boundary.entries();
    let mut max = 0.0f64;
    for j in 0..b.cols() {
        let mut s = 0.0;
        for i in 0..b.rows() {
            let x = b.at(i, j);
            s += x * x;
        }
        max = max.max(s);
    }
    0.01 * max
}

/// Time-difference data against one reference frame, for every frame in the
/// sequence (the reference row comes out exactly zero).
pub fn time_difference(
    frames: &FrameSequence,
    reference: usize,
) -> Result<Vec<DataVector>, ReconError> {
    if reference >= frames.len() {
        return Err(ReconError::FrameIndex { index: reference, len: frames.len() });
    }
    let base = frames.data(reference).values();
    frames
        .frames()
        .iter()
        .map(|(_, v)| {
            let diff: Vec<f64> = v.values().iter().zip(base).map(|(a, b)| a - b).collect();
            Ok(DataVector::from_values(diff)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{solve_all, Conductivity};
    use crate::mesh::{assign_electrodes, generate_disk_mesh, Mesh};
    use crate::sensitivity::{
        assemble_sensitivity, boundary_submatrix, build_fidelity_regularizer,
    };
    use proptest::prelude::*;
    use std::sync::OnceLock;

    struct Fixture {
        mesh: Mesh,
        s: SensitivityMatrix,
        reg: FidelityRegularizer,
        boundary: SensitivitySubmatrix,
    }

    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let mesh = generate_disk_mesh(1.0, 0.15).unwrap();
            let layout = assign_electrodes(&mesh, 16, 0.5).unwrap();
            let sigma = Conductivity::uniform(&mesh, 1.0).unwrap();
            let ps = solve_all(&mesh, &layout, &sigma).unwrap();
            let s = assemble_sensitivity(&mesh, &ps).unwrap();
            let reg = build_fidelity_regularizer(&s).unwrap();
            let boundary = boundary_submatrix(&s, &mesh.boundary_elements()).unwrap();
            Fixture { mesh, s, reg, boundary }
        })
    }

    fn hash_vector(len: usize, seed: u64) -> Vec<f64> {
        (0..len)
            .map(|i| {
                let mut x = seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(i as u64 + 1);
                x ^= x >> 33;
                x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
                x ^= x >> 33;
                (x as f64 / u64::MAX as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn hash_data(seed: u64) -> DataVector {
        DataVector::from_values(hash_vector(PROTOCOL_LEN, seed)).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        d.sqrt() / norm(b).max(1e-300)
    }

    /// Plain Gauss elimination with partial pivoting, independent of the
    /// library's factorizations.
    fn gauss_solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, pivot);
            b.swap(col, pivot);
            for r in col + 1..n {
                let f = m[r][col] / m[col][col];
                for c in col..n {
                    m[r][c] -= f * m[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let mut acc = b[r];
            for c in r + 1..n {
                acc -= m[r][c] * x[c];
            }
            x[r] = acc / m[r][r];
        }
        x
    }

    #[test]
    fn lambda_parses_and_displays() {
        assert_eq!("inf".parse::<Lambda>().unwrap(), Lambda::Infinite);
        assert_eq!("Infinity".parse::<Lambda>().unwrap(), Lambda::Infinite);
        assert_eq!("1e999".parse::<Lambda>().unwrap(), Lambda::Infinite);
        assert_eq!("0.5".parse::<Lambda>().unwrap(), Lambda::Finite(0.5));
        assert!("0".parse::<Lambda>().is_err());
        assert!("-1".parse::<Lambda>().is_err());
        assert!("nan".parse::<Lambda>().is_err());
        assert!("banana".parse::<Lambda>().is_err());
        assert_eq!(Lambda::Finite(0.5).to_string(), "0.5");
        assert_eq!(Lambda::Infinite.to_string(), "inf");
        assert_eq!("fer".parse::<Method>().unwrap(), Method::FidelityEmbedded);
        assert_eq!("standard".parse::<Method>().unwrap(), Method::Standard);
        assert_eq!(Method::FidelityEmbedded.to_string(), "fer");
        assert!("pca".parse::<Method>().is_err());
    }

    #[test]
    fn image_rejects_non_finite_values() {
        let err = ConductivityImage::new(
            vec![0.0, f64::NAN],
            Method::FidelityEmbedded,
            Lambda::Infinite,
        );
        assert!(err.is_err());
        assert!(ConductivityImage::new(vec![], Method::Standard, Lambda::Finite(1.0)).is_err());
        let img = ConductivityImage::new(vec![1.0, -2.0], Method::Standard, Lambda::Finite(1.0))
            .unwrap()
            .with_timestamp(3.5);
        assert_eq!(img.timestamp(), Some(3.5));
        assert_eq!(img.max_abs(), 2.0);
    }

    #[test]
    fn zero_data_give_zero_images() {
        let f = fixture();
        for lambda in [Lambda::Finite(1.0), Lambda::Infinite] {
            let img = fer_reconstruct(&f.s, &f.reg, &DataVector::zeros(), lambda).unwrap();
            assert!(img.values().iter().all(|&v| v == 0.0), "{lambda}");
        }
        let img = standard_reconstruct(&f.s, &DataVector::zeros(), Lambda::Finite(0.1)).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fer_solves_its_normal_equations() {
        let f = fixture();
        let lambda = 1.0;
        let v = hash_data(0x5eed);
        let img = fer_reconstruct(&f.s, &f.reg, &v, Lambda::Finite(lambda)).unwrap();
        let scale = (1.0 + lambda * lambda).sqrt();
        let x: Vec<f64> = img.values().iter().map(|y| y / scale).collect();

        // Element-space normal equations, solved densely for the oracle.
        let n = f.s.n_elements();
        let mut m = gram(f.s.entries());
        for k in 0..n {
            let d = f.reg.at(k);
            let v = m.at(k, k);
            m.set(k, k, v + lambda * d * d);
        }
        let rhs = f.s.entries().tr_matvec(v.values());

        let residual: Vec<f64> = m
            .matvec(&x)
            .iter()
            .zip(&rhs)
            .map(|(a, b)| a - b)
            .collect();
        assert!(
            norm(&residual) <= 1e-10 * norm(&rhs),
            "normal-equation residual {:.3e}",
            norm(&residual) / norm(&rhs)
        );

        let oracle = Cholesky::factor(m).unwrap().solve(&rhs);
        let rel = rel_diff(&x, &oracle);
        assert!(rel < 1e-8, "dual and element-space solves differ by {rel:.3e}");
    }

    #[test]
    fn fer_infinite_weight_is_weighted_backprojection() {
        let f = fixture();
        let v = hash_data(7);
        let img = fer_reconstruct(&f.s, &f.reg, &v, Lambda::Infinite).unwrap();
        let brute: Vec<f64> = (0..f.s.n_elements())
            .map(|k| {
                let col = f.s.column(k);
                dot(&col, v.values()) / (f.reg.at(k) * f.reg.at(k))
            })
            .collect();
        let rel = rel_diff(img.values(), &brute);
        assert!(rel < 1e-13, "backprojection mismatch {rel:.3e}");
    }

    #[test]
    fn fer_large_weights_approach_the_infinite_limit() {
        let f = fixture();
        let solver = FerSolver::new(&f.s, &f.reg).unwrap();
        let v = hash_data(11);
        let limit = solver.factorize(Lambda::Infinite).unwrap().apply(&v);
        let mut last = f64::INFINITY;
        for l in [1e2, 1e4, 1e6, 1e8] {
            let x = solver.factorize(Lambda::Finite(l)).unwrap().apply(&v);
            let rel = rel_diff(&x, &limit);
            assert!(rel < last, "distance to the limit grew at λ={l}: {rel:.3e}");
            last = rel;
        }
        assert!(last <= 1e-3, "λ=1e8 sits {last:.3e} from the limit");
    }

    #[test]
    fn standard_matches_independent_dense_solve() {
        let cols = 50;
        let toy = Dense::from_data(
            PROTOCOL_LEN,
            cols,
            hash_vector(PROTOCOL_LEN * cols, 0xfeed),
        );
        let s = SensitivityMatrix::from_dense(toy.clone()).unwrap();
        let lambda = 1e-3;
        let v = hash_data(23);
        let img = standard_reconstruct(&s, &v, Lambda::Finite(lambda)).unwrap();

        let mut scale = 0.0f64;
        for k in 0..cols {
            let d: f64 = (0..PROTOCOL_LEN).map(|r| toy.at(r, k) * toy.at(r, k)).sum();
            scale = scale.max(d);
        }
        let mut m = vec![vec![0.0; cols]; cols];
        for a in 0..cols {
            for b in 0..cols {
                let mut acc = 0.0;
                for r in 0..PROTOCOL_LEN {
                    acc += toy.at(r, a) * toy.at(r, b);
                }
                m[a][b] = acc;
            }
            m[a][a] += lambda * scale;
        }
        let rhs: Vec<f64> = (0..cols)
            .map(|k| (0..PROTOCOL_LEN).map(|r| toy.at(r, k) * v.values()[r]).sum())
            .collect();
        let oracle = gauss_solve(m, rhs);
        let rel = rel_diff(img.values(), &oracle);
        assert!(rel < 1e-10, "standard solve differs from oracle by {rel:.3e}");
    }

    #[test]
    fn over_regularized_standard_collapses_to_scaled_backprojection() {
        let f = fixture();
        let solver = StandardSolver::new(&f.s);
        let lambda = 1e12;
        let v = hash_data(3);
        let x = solver.factorize(Lambda::Finite(lambda)).unwrap().apply(&v);
        let shift = lambda * solver.diagonal_scale();
        let approx: Vec<f64> = (0..f.s.n_elements())
            .map(|k| dot(&f.s.column(k), v.values()) / shift)
            .collect();
        let rel = rel_diff(&x, &approx);
        assert!(rel < 1e-3, "over-regularized limit off by {rel:.3e}");
    }

    #[test]
    fn weight_validation_rejects_bad_values() {
        let f = fixture();
        let v = hash_data(1);
        for bad in [0.0, -1.0, f64::NAN] {
            assert!(fer_reconstruct(&f.s, &f.reg, &v, Lambda::Finite(bad)).is_err());
            assert!(standard_reconstruct(&f.s, &v, Lambda::Finite(bad)).is_err());
        }
        assert!(standard_reconstruct(&f.s, &v, Lambda::Infinite).is_err());
        assert!(fer_reconstruct(&f.s, &f.reg, &v, Lambda::Finite(f64::INFINITY))
            .unwrap()
            .lambda()
            .is_infinite());
        assert!(motion_filter(&f.boundary, &v, 0.0).is_err());
        assert!(motion_filter(&f.boundary, &v, f64::NAN).is_err());
    }

    #[test]
    fn motion_filter_matches_independent_solve_and_splits_bitwise() {
        let f = fixture();
        let v = hash_data(0xabc);
        let lambda_b = default_motion_lambda(&f.boundary);
        let (filtered, err) = motion_filter(&f.boundary, &v, lambda_b).unwrap();

        for i in 0..PROTOCOL_LEN {
            assert_eq!(
                filtered.values()[i].to_bits(),
                (v.values()[i] - err.values()[i]).to_bits(),
                "entry {i} does not split exactly"
            );
        }

        let b = f.boundary.entries();
        let p = b.cols();
        let mut m = vec![vec![0.0; p]; p];
        for a in 0..p {
            for c in 0..p {
                let mut acc = 0.0;
                for r in 0..PROTOCOL_LEN {
                    acc += b.at(r, a) * b.at(r, c);
                }
                m[a][c] = acc;
            }
            m[a][a] += lambda_b;
        }
        let rhs: Vec<f64> = (0..p)
            .map(|k| (0..PROTOCOL_LEN).map(|r| b.at(r, k) * v.values()[r]).sum())
            .collect();
        let z = gauss_solve(m, rhs);
        let err_oracle = b.matvec(&z);
        let rel = rel_diff(err.values(), &err_oracle);
        assert!(rel < 1e-10, "explained part differs from oracle by {rel:.3e}");
    }

    #[test]
    fn motion_filter_absorbs_boundary_signatures() {
        let f = fixture();
        let b = f.boundary.entries();
        let z0 = hash_vector(b.cols(), 99);
        let v = DataVector::from_values(b.matvec(&z0)).unwrap();
        let scale = default_motion_lambda(&f.boundary) / 0.01;

        let mut last_ratio = f64::INFINITY;
        for lb in [1e-2, 1e-4, 1e-6] {
            let (filtered, _) = motion_filter(&f.boundary, &v, lb * scale).unwrap();
            let ratio = norm(filtered.values()) / norm(v.values());
            assert!(
                ratio < last_ratio,
                "residual ratio grew at λ_b={lb}: {ratio:.3e}"
            );
            last_ratio = ratio;
        }
        assert!(
            last_ratio < 0.05,
            "boundary signature survives filtering at ratio {last_ratio:.3}"
        );
    }

    #[test]
    fn explained_norm_shrinks_as_the_filter_weight_grows() {
        let f = fixture();
        let v = hash_data(0x17);
        let scale = default_motion_lambda(&f.boundary) / 0.01;
        let mut last = f64::INFINITY;
        for lb in [1e-6, 1e-3, 1.0, 1e3] {
            let (_, err) = motion_filter(&f.boundary, &v, lb * scale).unwrap();
            let n = norm(err.values());
            assert!(n <= last * (1.0 + 1e-12), "‖err‖ grew at λ_b={lb}");
            last = n;
        }
    }

    #[test]
    fn default_filter_weight_is_a_hundredth_of_the_peak_diagonal() {
        let f = fixture();
        let b = f.boundary.entries();
        let mut max = 0.0f64;
        for k in 0..b.cols() {
            let col: f64 = (0..PROTOCOL_LEN).map(|r| b.at(r, k) * b.at(r, k)).sum();
            max = max.max(col);
        }
        assert_eq!(default_motion_lambda(&f.boundary), 0.01 * max);
    }

    #[test]
    fn time_difference_is_exact_at_the_reference_and_telescopes() {
        let frames = vec![
            (0.0, hash_data(1)),
            (1.0, hash_data(2)),
            (2.0, hash_data(3)),
        ];
        let seq = FrameSequence::new(frames, 0, 0).unwrap();

        let d0 = time_difference(&seq, 0).unwrap();
        assert!(d0[0].values().iter().all(|&v| v == 0.0));

        let d1 = time_difference(&seq, 1).unwrap();
        let scale = norm(d0[2].values());
        for i in 0..PROTOCOL_LEN {
            let lhs = d0[2].values()[i];
            let rhs = d0[1].values()[i] + d1[2].values()[i];
            assert!(
                (lhs - rhs).abs() <= 1e-12 * scale,
                "telescoping breaks at entry {i}"
            );
        }

        assert!(matches!(
            time_difference(&seq, 3),
            Err(ReconError::FrameIndex { index: 3, len: 3 })
        ));

        let constant = FrameSequence::new(
            vec![(0.0, hash_data(5)), (1.0, hash_data(5))],
            0,
            0,
        )
        .unwrap();
        let d = time_difference(&constant, 0).unwrap();
        assert!(d[1].values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interior_blob_reconstructs_near_its_true_location() {
        let f = fixture();
        let center = [0.4, 0.0];
        let delta: Vec<f64> = (0..f.s.n_elements())
            .map(|k| {
                let c = f.mesh.centroid(k);
                let d2 = (c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2);
                if d2 < 0.25 * 0.25 {
                    -1e-3
                } else {
                    0.0
                }
            })
            .collect();
        let v = DataVector::from_values(f.s.apply(&delta)).unwrap();
        let img = fer_reconstruct(&f.s, &f.reg, &v, Lambda::Finite(1e4)).unwrap();
        let peak = (0..img.len())
            .max_by(|&a, &b| img.values()[a].abs().total_cmp(&img.values()[b].abs()))
            .unwrap();
        assert!(img.values()[peak] < 0.0, "peak must keep the perturbation's sign");
        let c = f.mesh.centroid(peak);
        let dist = ((c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2)).sqrt();
        assert!(dist < 0.3, "peak response {dist:.2} away from the true blob");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn reconstruction_is_linear_in_the_data(
            a in -3.0f64..3.0,
            seed in 0u64..1000,
            lexp in -1.0f64..6.0,
        ) {
            let f = fixture();
            let solver = FerSolver::new(&f.s, &f.reg).unwrap();
            let op = solver.factorize(Lambda::Finite(10f64.powf(lexp))).unwrap();
            let v = hash_data(seed);
            let scaled = DataVector::from_values(
                v.values().iter().map(|x| a * x).collect(),
            ).unwrap();
            let x = op.apply(&v);
            let xs = op.apply(&scaled);
            let expect: Vec<f64> = x.iter().map(|t| a * t).collect();
            let denom = norm(&expect);
            if denom > 0.0 {
                let d: f64 = xs.iter().zip(&expect)
                    .map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                prop_assert!(d.sqrt() / denom < 1e-10);
            }
        }
    }
}
