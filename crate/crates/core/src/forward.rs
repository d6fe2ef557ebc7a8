//! Forward solver for the shunt-electrode model and the 16-electrode
//! neighboring measurement protocol.
//!
//! Each electrode is a perfect conductor: its nodes are condensed into a
//! single degree of freedom, which makes the equipotential condition exact
//! and leaves zero-flux natural conditions on the rest of the boundary. The
//! floating potential level is fixed by the constraint `Σ_i U_i = 0` through
//! one Lagrange multiplier, and a unit current is driven between adjacent
//! electrode pairs.
//!
//! Conventions: element indices are 0-based like the mesh; electrode and
//! injection indices are 1-based (`j = 1..=16`), matching the measurement
//! protocol. Injection `j` drives `+1` into electrode `j` and `-1` into
//! electrode `j+1` (wrapping). The data vector keeps, for each injection,
//! the 13 adjacent voltage differences that do not touch the driven pair.

use std::path::Path;

use thiserror::Error;

use crate::linalg::{self, Ldlt, SparseSym};
use crate::mesh::{ElectrodeLayout, Mesh, MeshError};

/// Electrode count of the measurement protocol.
pub const PROTOCOL_ELECTRODES: usize = 16;
/// Retained measurements per injection (16 electrode gaps minus the driven
/// pair's three).
pub const MEASUREMENTS_PER_INJECTION: usize = 13;
/// Total data vector length, 16 injections of 13 measurements.
pub const PROTOCOL_LEN: usize = PROTOCOL_ELECTRODES * MEASUREMENTS_PER_INJECTION;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("conductivity: {0}")]
    InvalidConductivity(String),
    #[error("injection index {j} outside 1..={count}")]
    InvalidInjection { j: usize, count: usize },
    #[error("element index {k} outside mesh with {n_elem} elements")]
    InvalidElement { k: usize, n_elem: usize },
    #[error("layout: {0}")]
    InvalidLayout(String),
    #[error("solver: {0}")]
    Solver(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-element conductivity on the dimensionless reference scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Conductivity {
    values: Vec<f64>,
}

impl Conductivity {
    pub fn uniform(mesh: &Mesh, value: f64) -> Result<Conductivity, ForwardError> {
        Conductivity::from_values(mesh, vec![value; mesh.n_elements()])
    }

    pub fn from_values(mesh: &Mesh, values: Vec<f64>) -> Result<Conductivity, ForwardError> {
        if values.len() != mesh.n_elements() {
            return Err(ForwardError::InvalidConductivity(format!(
                "{} values for a mesh with {} elements",
                values.len(),
                mesh.n_elements()
            )));
        }
        for (k, &v) in values.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ForwardError::InvalidConductivity(format!(
                    "element {k} has non-positive value {v}"
                )));
            }
        }
        Ok(Conductivity { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }
}

/// Solution of one injection (or one adjoint dipole source): potentials at
/// every node plus the shared potential of each electrode.
#[derive(Debug, Clone)]
pub struct Potentials {
    node: Vec<f64>,
    electrodes: Vec<f64>,
}

impl Potentials {
    pub fn node_values(&self) -> &[f64] {
        &self.node
    }

    pub fn electrode_values(&self) -> &[f64] {
        &self.electrodes
    }

    /// Potential of electrode `i` (1-based).
    #[inline]
    pub fn electrode(&self, i: usize) -> f64 {
        self.electrodes[i - 1]
    }
}

/// Solutions for all injections of the protocol against one conductivity.
#[derive(Debug, Clone)]
pub struct PotentialSet {
    injections: Vec<Potentials>,
}

impl PotentialSet {
    /// Solution for injection `j` (1-based).
    pub fn injection(&self, j: usize) -> &Potentials {
        &self.injections[j - 1]
    }

    pub fn len(&self) -> usize {
        self.injections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.injections.is_empty()
    }

    /// Electrode potential `U_i^j` (both 1-based).
    #[inline]
    pub fn electrode_potential(&self, j: usize, i: usize) -> f64 {
        self.injections[j - 1].electrodes[i - 1]
    }
}

/// Factored stiffness system with electrode nodes condensed and the
/// grounding constraint appended.
pub struct CondensedSystem {
    n_nodes: usize,
    n_field: usize,
    dof_of_node: Vec<usize>,
    electrode_dofs: Vec<usize>,
    matrix: SparseSym,
    factor: Ldlt,
    perm: Vec<usize>,
    iperm: Vec<usize>,
}

const SOLVE_TOL: f64 = 1e-10;

impl CondensedSystem {
    /// Field unknowns: non-electrode nodes plus one per electrode. The full
    /// system has one more row for the grounding multiplier.
    pub fn n_field(&self) -> usize {
        self.n_field
    }

    /// Full system dimension including the multiplier.
    pub fn dimension(&self) -> usize {
        self.n_field + 1
    }

    pub fn n_electrodes(&self) -> usize {
        self.electrode_dofs.len()
    }

    /// Field degree of freedom owning node `v`.
    pub fn dof_of_node(&self, v: usize) -> usize {
        self.dof_of_node[v]
    }

    /// Solve the full system for an arbitrary field right-hand side (the
    /// multiplier entry is forced to zero). Refines the solution until the
    /// relative residual drops below 1e-10.
    fn solve_kkt(&self, rhs_field: &[f64]) -> Result<Vec<f64>, ForwardError> {
        let n = self.n_field + 1;
        debug_assert_eq!(rhs_field.len(), self.n_field);
        let mut bp = vec![0.0; n];
        for (newi, &oldi) in self.perm.iter().enumerate() {
            bp[newi] = if oldi < self.n_field { rhs_field[oldi] } else { 0.0 };
        }
        let bnorm = linalg::norm2(&bp);
        let mut x = bp.clone();
        self.factor.solve_in_place(&mut x);
        let mut rel = f64::INFINITY;
        for _ in 0..3 {
            let ax = self.matrix.matvec(&x);
            let mut r: Vec<f64> = bp.iter().zip(&ax).map(|(b, a)| b - a).collect();
            rel = if bnorm > 0.0 { linalg::norm2(&r) / bnorm } else { 0.0 };
            if rel <= 1e-13 {
                break;
            }
            self.factor.solve_in_place(&mut r);
            for (xi, ri) in x.iter_mut().zip(&r) {
                *xi += ri;
            }
        }
        if !(rel <= SOLVE_TOL) {
            return Err(ForwardError::Solver(format!(
                "relative residual {rel:e} exceeds {SOLVE_TOL:e}"
            )));
        }
        let mut out = vec![0.0; n];
        for (newi, &oldi) in self.perm.iter().enumerate() {
            out[oldi] = x[newi];
        }
        Ok(out)
    }

    fn potentials_from_kkt(&self, x: &[f64]) -> Potentials {
        let node = (0..self.n_nodes).map(|v| x[self.dof_of_node[v]]).collect();
        let electrodes = self.electrode_dofs.iter().map(|&d| x[d]).collect();
        Potentials { node, electrodes }
    }

    /// Discrete current driven into each electrode by a solved potential
    /// field: the electrode rows of the stiffness matrix applied to it.
    pub fn electrode_currents(&self, p: &Potentials) -> Vec<f64> {
        let n = self.n_field + 1;
        let mut x = vec![0.0; n];
        for v in 0..self.n_nodes {
            x[self.dof_of_node[v]] = p.node[v];
        }
        let mut xp = vec![0.0; n];
        for (newi, &oldi) in self.perm.iter().enumerate() {
            xp[newi] = x[oldi];
        }
        let yp = self.matrix.matvec(&xp);
        self.electrode_dofs
            .iter()
            .map(|&d| yp[self.iperm[d]])
            .collect()
    }

    /// Solve the adjoint dipole problem for element `k` against the gradient
    /// of injection `j`'s potential, reusing this factorization. The load is
    /// the element-local weak divergence of `χ_k ∇u_j`.
    pub fn solve_dipole(
        &self,
        mesh: &Mesh,
        k: usize,
        ps: &PotentialSet,
        j: usize,
    ) -> Result<Potentials, ForwardError> {
        if k >= mesh.n_elements() {
            return Err(ForwardError::InvalidElement { k, n_elem: mesh.n_elements() });
        }
        let count = self.electrode_dofs.len();
        if j < 1 || j > count {
            return Err(ForwardError::InvalidInjection { j, count });
        }
        if mesh.n_nodes() != self.n_nodes {
            return Err(ForwardError::InvalidLayout(
                "mesh does not match the assembled system".into(),
            ));
        }
        let u = &ps.injection(j).node;
        let tri = mesh.triangle(k);
        let grads = mesh.gradients(k);
        let area = mesh.area(k);
        let gu = element_gradient(&tri, &grads, u);
        let mut rhs = vec![0.0; self.n_field];
        for a in 0..3 {
            rhs[self.dof_of_node[tri[a]]] +=
                area * (gu[0] * grads[a][0] + gu[1] * grads[a][1]);
        }
        let x = self.solve_kkt(&rhs)?;
        Ok(self.potentials_from_kkt(&x))
    }
}

/// Gradient of the P1 field `u` on one element.
#[inline]
fn element_gradient(tri: &[usize; 3], grads: &[[f64; 2]; 3], u: &[f64]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for a in 0..3 {
        g[0] += u[tri[a]] * grads[a][0];
        g[1] += u[tri[a]] * grads[a][1];
    }
    g
}

/// Assemble and factor the condensed stiffness system for `sigma`.
pub fn assemble_system(
    mesh: &Mesh,
    layout: &ElectrodeLayout,
    sigma: &Conductivity,
) -> Result<CondensedSystem, ForwardError> {
    layout.check_against(mesh)?;
    if sigma.values.len() != mesh.n_elements() {
        return Err(ForwardError::InvalidConductivity(format!(
            "{} values for a mesh with {} elements",
            sigma.values.len(),
            mesh.n_elements()
        )));
    }

    let n_nodes = mesh.n_nodes();
    let count = layout.len();
    let mut electrode_of_node = vec![usize::MAX; n_nodes];
    let mut n_electrode_nodes = 0usize;
    for (e, g) in layout.groups().iter().enumerate() {
        for &v in g {
            electrode_of_node[v] = e;
            n_electrode_nodes += 1;
        }
    }
    let n_free = n_nodes - n_electrode_nodes;
    let n_field = n_free + count;
    let mut dof_of_node = vec![0usize; n_nodes];
    let mut next_free = 0usize;
    for v in 0..n_nodes {
        dof_of_node[v] = if electrode_of_node[v] == usize::MAX {
            let d = next_free;
            next_free += 1;
            d
        } else {
            n_free + electrode_of_node[v]
        };
    }
    let electrode_dofs: Vec<usize> = (0..count).map(|e| n_free + e).collect();

    // Stiffness triplets in upper-triangle form: iterate the full 3x3 local
    // block so entries that collapse onto the diagonal (two nodes of one
    // element on the same electrode) are counted from both sides.
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(6 * mesh.n_elements() + count + 1);
    for k in 0..mesh.n_elements() {
        let tri = mesh.triangle(k);
        let grads = mesh.gradients(k);
        let coef = sigma.value(k) * mesh.area(k);
        let dofs = [dof_of_node[tri[0]], dof_of_node[tri[1]], dof_of_node[tri[2]]];
        for a in 0..3 {
            for b in 0..3 {
                if dofs[a] <= dofs[b] {
                    let v = coef * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                    triplets.push((dofs[a], dofs[b], v));
                }
            }
        }
    }
    // Grounding constraint row: Σ_e U_e = 0.
    let mu = n_field;
    for &d in &electrode_dofs {
        triplets.push((d, mu, 1.0));
    }
    triplets.push((mu, mu, 0.0));

    // Bandwidth-reducing order over the field block; the multiplier goes
    // second to last so every leading principal block stays nonsingular and
    // the unpivoted factorization cannot break down.
    let mut adj = vec![Vec::new(); n_field];
    for &(i, j, _) in &triplets {
        if i != j && i < n_field && j < n_field {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    let field_order = linalg::rcm_order(&adj);
    let mut perm = Vec::with_capacity(n_field + 1);
    perm.extend_from_slice(&field_order[..n_field - 1]);
    perm.push(mu);
    perm.push(field_order[n_field - 1]);
    let mut iperm = vec![0usize; n_field + 1];
    for (newi, &oldi) in perm.iter().enumerate() {
        iperm[oldi] = newi;
    }

    let permuted: Vec<(usize, usize, f64)> = triplets
        .iter()
        .map(|&(i, j, v)| (iperm[i], iperm[j], v))
        .collect();
    let matrix = SparseSym::from_triplets(n_field + 1, &permuted);
    let factor = Ldlt::factor(&matrix)
        .map_err(|e| ForwardError::Solver(format!("factorization failed: {e}")))?;

    Ok(CondensedSystem {
        n_nodes,
        n_field,
        dof_of_node,
        electrode_dofs,
        matrix,
        factor,
        perm,
        iperm,
    })
}

/// Solve one injection of the protocol: unit current into electrode `j`,
/// out of electrode `j+1` (1-based, wrapping).
pub fn solve_injection(system: &CondensedSystem, j: usize) -> Result<Potentials, ForwardError> {
    let count = system.electrode_dofs.len();
    if j < 1 || j > count {
        return Err(ForwardError::InvalidInjection { j, count });
    }
    let mut rhs = vec![0.0; system.n_field];
    rhs[system.electrode_dofs[j - 1]] = 1.0;
    rhs[system.electrode_dofs[j % count]] = -1.0;
    let x = system.solve_kkt(&rhs)?;
    Ok(system.potentials_from_kkt(&x))
}

/// Assemble once and solve every injection of the protocol.
pub fn solve_all(
    mesh: &Mesh,
    layout: &ElectrodeLayout,
    sigma: &Conductivity,
) -> Result<PotentialSet, ForwardError> {
    let system = assemble_system(mesh, layout, sigma)?;
    let count = layout.len();
    let mut injections = Vec::with_capacity(count);
    for j in 1..=count {
        injections.push(solve_injection(&system, j)?);
    }
    Ok(PotentialSet { injections })
}

/// Solve the adjoint dipole problem of element `k` for injection `j` at the
/// homogeneous reference conductivity. Assembles a fresh system; use
/// [`CondensedSystem::solve_dipole`] to reuse a factorization across many
/// elements.
pub fn solve_adjoint_dipole(
    mesh: &Mesh,
    layout: &ElectrodeLayout,
    k: usize,
    ps: &PotentialSet,
    j: usize,
) -> Result<Potentials, ForwardError> {
    let sigma = Conductivity::uniform(mesh, 1.0)?;
    let system = assemble_system(mesh, layout, &sigma)?;
    system.solve_dipole(mesh, k, ps, j)
}

/// Ordered trans-impedance measurements of the neighboring protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct DataVector {
    values: Vec<f64>,
}

impl DataVector {
    pub const LEN: usize = PROTOCOL_LEN;

    pub fn from_values(values: Vec<f64>) -> Result<DataVector, ForwardError> {
        if values.len() != Self::LEN {
            return Err(ForwardError::Cache(format!(
                "data vector needs {} entries, got {}",
                Self::LEN,
                values.len()
            )));
        }
        Ok(DataVector { values })
    }

    pub fn zeros() -> DataVector {
        DataVector { values: vec![0.0; Self::LEN] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row index of measurement `(j, i)` (1-based), or `None` if `i` touches
    /// the driven pair `{j-1, j, j+1}`.
    pub fn index_of(j: usize, i: usize) -> Option<usize> {
        if !(1..=PROTOCOL_ELECTRODES).contains(&j) || !(1..=PROTOCOL_ELECTRODES).contains(&i) {
            return None;
        }
        let off = (i + PROTOCOL_ELECTRODES - j) % PROTOCOL_ELECTRODES;
        if (2..=14).contains(&off) {
            Some((j - 1) * MEASUREMENTS_PER_INJECTION + (off - 2))
        } else {
            None
        }
    }

    /// The `(j, i)` electrode pair (1-based) of every row, in order.
    pub fn protocol_pairs() -> Vec<(usize, usize)> {
        let mut pairs = Vec::with_capacity(PROTOCOL_LEN);
        for j in 1..=PROTOCOL_ELECTRODES {
            for off in 2..=14 {
                pairs.push((j, (j - 1 + off) % PROTOCOL_ELECTRODES + 1));
            }
        }
        pairs
    }

    pub fn write_cache<P: AsRef<Path>>(&self, path: P) -> Result<(), ForwardError> {
        let mut buf = Vec::with_capacity(5 + 4 + 8 * Self::LEN);
        buf.extend_from_slice(b"EITV1");
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_cache<P: AsRef<Path>>(path: P) -> Result<DataVector, ForwardError> {
        let buf = std::fs::read(path)?;
        if buf.len() < 9 || &buf[..5] != b"EITV1" {
            return Err(ForwardError::Cache("missing EITV1 magic".into()));
        }
        let count = u32::from_le_bytes(buf[5..9].try_into().expect("4 bytes")) as usize;
        if count != Self::LEN {
            return Err(ForwardError::Cache(format!(
                "cache holds {count} entries, expected {}",
                Self::LEN
            )));
        }
        if buf.len() != 9 + 8 * count {
            return Err(ForwardError::Cache(format!(
                "cache is {} bytes, expected {}",
                buf.len(),
                9 + 8 * count
            )));
        }
        let values = buf[9..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(DataVector { values })
    }
}

/// Read the protocol's 208 voltage differences off a solved potential set:
/// `V^{j,i} = U_i^j − U_{i+1}^j` for the 13 retained `i` per injection.
pub fn extract_data_vector(ps: &PotentialSet) -> Result<DataVector, ForwardError> {
    if ps.len() != PROTOCOL_ELECTRODES {
        return Err(ForwardError::InvalidLayout(format!(
            "protocol needs {PROTOCOL_ELECTRODES} injections, potential set has {}",
            ps.len()
        )));
    }
    let mut values = Vec::with_capacity(PROTOCOL_LEN);
    for j in 0..PROTOCOL_ELECTRODES {
        let u = &ps.injections[j].electrodes;
        if u.len() != PROTOCOL_ELECTRODES {
            return Err(ForwardError::InvalidLayout(format!(
                "protocol needs {PROTOCOL_ELECTRODES} electrodes, injection {} has {}",
                j + 1,
                u.len()
            )));
        }
        for off in 2..=14 {
            let i = (j + off) % PROTOCOL_ELECTRODES;
            values.push(u[i] - u[(i + 1) % PROTOCOL_ELECTRODES]);
        }
    }
    Ok(DataVector { values })
}
