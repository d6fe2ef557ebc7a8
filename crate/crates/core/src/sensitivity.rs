//! Sensitivity matrix of the measurement protocol, column correlations, the
//! fidelity-embedding regularizer, boundary column selection, and the
//! averaging kernel of the regularized inverse.
//!
//! The derivative of measurement `(j, i)` with respect to the conductivity
//! of element `Δ_k` at the homogeneous reference is
//! `−area(Δ_k) · (∇u_i · ∇u_j)|_{Δ_k}`, with both potentials taken from the
//! reference forward solve. All columns live on the mesh the potentials were
//! solved on; column `k` corresponds to element `Δ_k`.
//!
//! The regularizer weight of element `k` is `sqrt(Σ_ℓ |⟨S_k, S_ℓ⟩|)`, summed
//! over every column including `ℓ = k` (the self term dominates and keeps
//! the weight strictly positive).

use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::forward::{PotentialSet, PROTOCOL_ELECTRODES, PROTOCOL_LEN};
use crate::linalg::{dot, Dense};
use crate::mesh::{ElectrodeLayout, Mesh};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("potential set does not match mesh: {0}")]
    MismatchedPotentials(String),
    #[error("column {k} has zero norm")]
    ZeroColumn { k: usize },
    #[error("column index {index} outside matrix with {cols} columns")]
    IndexOutOfRange { index: usize, cols: usize },
    #[error("empty column selection")]
    EmptySelection,
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense derivative of the 208 protocol measurements with respect to
/// per-element conductivity.
#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    entries: Dense,
}

impl SensitivityMatrix {
    /// Wrap a dense matrix; it must have one row per protocol measurement.
    pub fn from_dense(entries: Dense) -> Result<SensitivityMatrix, SensitivityError> {
        if entries.rows() != PROTOCOL_LEN {
            return Err(SensitivityError::MismatchedPotentials(format!(
                "sensitivity matrix needs {PROTOCOL_LEN} rows, got {}",
                entries.rows()
            )));
        }
        Ok(SensitivityMatrix { entries })
    }

    pub fn entries(&self) -> &Dense {
        &self.entries
    }

    pub fn rows(&self) -> usize {
        self.entries.rows()
    }

    pub fn n_elements(&self) -> usize {
        self.entries.cols()
    }

    #[inline]
    pub fn entry(&self, row: usize, k: usize) -> f64 {
        self.entries.at(row, k)
    }

    /// Column `k` as an owned vector.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.entries.rows()).map(|r| self.entries.at(r, k)).collect()
    }

    /// Apply to a per-element vector: predicted measurement changes.
    pub fn apply(&self, dsigma: &[f64]) -> Vec<f64> {
        self.entries.matvec(dsigma)
    }

    pub fn write_cache<P: AsRef<Path>>(&self, path: P, hash: &[u8; 32]) -> Result<(), SensitivityError> {
        let (rows, cols) = (self.entries.rows(), self.entries.cols());
        let mut buf = Vec::with_capacity(5 + 8 + 32 + 8 * rows * cols);
        buf.extend_from_slice(b"EITS1");
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        buf.extend_from_slice(hash);
        for v in self.entries.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_cache<P: AsRef<Path>>(path: P) -> Result<(SensitivityMatrix, [u8; 32]), SensitivityError> {
        let buf = std::fs::read(path)?;
        if buf.len() < 45 || &buf[..5] != b"EITS1" {
            return Err(SensitivityError::Cache("missing EITS1 magic".into()));
        }
        let rows = u32::from_le_bytes(buf[5..9].try_into().expect("4 bytes")) as usize;
        let cols = u32::from_le_bytes(buf[9..13].try_into().expect("4 bytes")) as usize;
        let mut hash = [0u8; 32];
        hash.copy_from_slice(&buf[13..45]);
        let expected = 45 + 8 * rows * cols;
        if buf.len() != expected {
            return Err(SensitivityError::Cache(format!(
                "cache is {} bytes, expected {expected}",
                buf.len()
            )));
        }
        let data: Vec<f64> = buf[45..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let matrix = SensitivityMatrix::from_dense(Dense::from_data(rows, cols, data))?;
        Ok((matrix, hash))
    }
}

/// Content hash identifying the inputs a cached sensitivity matrix was built
/// from: the mesh text, the electrode layout, and the reference conductivity.
pub fn sensitivity_content_hash(
    mesh_text: &str,
    layout: &ElectrodeLayout,
    sigma_ref: f64,
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"EITS1-KEY");
    h.update((mesh_text.len() as u64).to_le_bytes());
    h.update(mesh_text.as_bytes());
    h.update((layout.len() as u32).to_le_bytes());
    for g in layout.groups() {
        h.update((g.len() as u32).to_le_bytes());
        for &v in g {
            h.update((v as u64).to_le_bytes());
        }
    }
    h.update(sigma_ref.to_le_bytes());
    h.finalize().into()
}

/// Assemble the sensitivity matrix from the reference potentials. Each
/// column only needs its own element's area and gradients, so columns are
/// computed in parallel.
pub fn assemble_sensitivity(
    mesh: &Mesh,
    ps: &PotentialSet,
) -> Result<SensitivityMatrix, SensitivityError> {
    if ps.len() != PROTOCOL_ELECTRODES {
        return Err(SensitivityError::MismatchedPotentials(format!(
            "need {PROTOCOL_ELECTRODES} injections, got {}",
            ps.len()
        )));
    }
    for j in 1..=PROTOCOL_ELECTRODES {
        if ps.injection(j).node_values().len() != mesh.n_nodes() {
            return Err(SensitivityError::MismatchedPotentials(format!(
                "injection {j} has {} node potentials for a mesh with {} nodes",
                ps.injection(j).node_values().len(),
                mesh.n_nodes()
            )));
        }
    }

    // (drive, measure) injection pair per row, 0-based.
    let pairs: Vec<(usize, usize)> = crate::forward::DataVector::protocol_pairs()
        .into_iter()
        .map(|(j, i)| (j - 1, i - 1))
        .collect();

    let n = mesh.n_elements();
    let mut by_element = Dense::zeros(n, PROTOCOL_LEN);
    by_element
        .data_mut()
        .par_chunks_mut(PROTOCOL_LEN)
        .enumerate()
        .for_each(|(k, row)| {
            let tri = mesh.triangle(k);
            let grads = mesh.gradients(k);
            let area = mesh.area(k);
            let mut g = [[0.0f64; 2]; PROTOCOL_ELECTRODES];
            for (jj, gj) in g.iter_mut().enumerate() {
                let u = ps.injection(jj + 1).node_values();
                for a in 0..3 {
                    gj[0] += u[tri[a]] * grads[a][0];
                    gj[1] += u[tri[a]] * grads[a][1];
                }
            }
            for (r, &(a, b)) in pairs.iter().enumerate() {
                row[r] = -area * (g[b][0] * g[a][0] + g[b][1] * g[a][1]);
            }
        });

    SensitivityMatrix::from_dense(by_element.transpose())
}

/// Inner product of columns `k` and `ℓ`.
pub fn column_correlation(
    s: &SensitivityMatrix,
    k: usize,
    l: usize,
) -> Result<f64, SensitivityError> {
    let cols = s.n_elements();
    for idx in [k, l] {
        if idx >= cols {
            return Err(SensitivityError::IndexOutOfRange { index: idx, cols });
        }
    }
    let mut acc = 0.0;
    for r in 0..s.rows() {
        acc += s.entry(r, k) * s.entry(r, l);
    }
    Ok(acc)
}

/// Cosine of the angle between columns `k` and `ℓ`, in `[-1, 1]`.
pub fn normalized_correlation(
    s: &SensitivityMatrix,
    k: usize,
    l: usize,
) -> Result<f64, SensitivityError> {
    let ck = column_correlation(s, k, k)?;
    let cl = column_correlation(s, l, l)?;
    if ck == 0.0 {
        return Err(SensitivityError::ZeroColumn { k });
    }
    if cl == 0.0 {
        return Err(SensitivityError::ZeroColumn { k: l });
    }
    Ok(column_correlation(s, k, l)? / (ck.sqrt() * cl.sqrt()))
}

/// Diagonal regularizer weights `sqrt(Σ_ℓ |⟨S_k, S_ℓ⟩|)`.
#[derive(Debug, Clone)]
pub struct FidelityRegularizer {
    diag: Vec<f64>,
}

impl FidelityRegularizer {
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    #[inline]
    pub fn at(&self, k: usize) -> f64 {
        self.diag[k]
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }
}

/// Build the fidelity regularizer. The absolute-correlation sums are
/// accumulated column against column without materializing the full Gram
/// matrix, keeping memory at the size of the matrix itself.
pub fn build_fidelity_regularizer(
    s: &SensitivityMatrix,
) -> Result<FidelityRegularizer, SensitivityError> {
    let n = s.n_elements();
    let st = s.entries.transpose();
    if let Some(k) = (0..n).find(|&k| dot(st.row(k), st.row(k)) == 0.0) {
        return Err(SensitivityError::ZeroColumn { k });
    }
    let mut diag = vec![0.0f64; n];
    diag.par_iter_mut().enumerate().for_each(|(k, out)| {
        let rk = st.row(k);
        let mut acc = 0.0;
        for l in 0..n {
            acc += dot(rk, st.row(l)).abs();
        }
        *out = acc.sqrt();
    });
    Ok(FidelityRegularizer { diag })
}

/// Columns of the sensitivity matrix restricted to a set of elements,
/// remembering which element each column came from.
#[derive(Debug, Clone)]
pub struct SensitivitySubmatrix {
    entries: Dense,
    element_indices: Vec<usize>,
}

impl SensitivitySubmatrix {
    pub fn entries(&self) -> &Dense {
        &self.entries
    }

    pub fn element_indices(&self) -> &[usize] {
        &self.element_indices
    }

    pub fn n_columns(&self) -> usize {
        self.element_indices.len()
    }
}

/// Select the columns of `indices` (typically `mesh.boundary_elements()`).
pub fn boundary_submatrix(
    s: &SensitivityMatrix,
    indices: &[usize],
) -> Result<SensitivitySubmatrix, SensitivityError> {
    if indices.is_empty() {
        return Err(SensitivityError::EmptySelection);
    }
    let cols = s.n_elements();
    if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
        return Err(SensitivityError::IndexOutOfRange { index: bad, cols });
    }
    let mut entries = Dense::zeros(s.rows(), indices.len());
    for r in 0..s.rows() {
        let row = entries.row_mut(r);
        for (c, &k) in indices.iter().enumerate() {
            row[c] = s.entry(r, k);
        }
    }
    Ok(SensitivitySubmatrix { entries, element_indices: indices.to_vec() })
}

/// Row `k` of the averaging kernel: `|⟨S_k, S_ℓ⟩|` over the element's
/// regularizer weight squared. Rows sum to 1 by construction.
pub fn kernel_row(
    s: &SensitivityMatrix,
    r_fe: &FidelityRegularizer,
    k: usize,
) -> Result<Vec<f64>, SensitivityError> {
    let n = s.n_elements();
    if k >= n {
        return Err(SensitivityError::IndexOutOfRange { index: k, cols: n });
    }
    if r_fe.len() != n {
        return Err(SensitivityError::MismatchedPotentials(format!(
            "regularizer has {} entries for a matrix with {n} columns",
            r_fe.len()
        )));
    }
    let denom = r_fe.at(k) * r_fe.at(k);
    if denom == 0.0 {
        return Err(SensitivityError::ZeroColumn { k });
    }
    let st = s.entries.transpose();
    let rk = st.row(k);
    Ok((0..n).map(|l| dot(rk, st.row(l)).abs() / denom).collect())
}
