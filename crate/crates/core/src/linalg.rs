//! Dense and sparse symmetric linear algebra kernels.
//!
//! Everything here is sized for desk-scale tomography problems: dense
//! matrices up to a few thousand rows and sparse symmetric systems with a few
//! tens of thousands of unknowns. The dense side provides a blocked,
//! multithreaded Cholesky factorization; the sparse side an up-looking LDL^T
//! with elimination-tree symbolic analysis and reverse Cuthill-McKee
//! ordering.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("matrix is not positive definite at pivot {index}")]
    NotPositiveDefinite { index: usize },
    #[error("zero pivot encountered at index {index}")]
    ZeroPivot { index: usize },
    #[error("missing structural diagonal entry at index {index}")]
    MissingDiagonal { index: usize },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows * cols");
        Dense { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// y = A^T x.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for (yk, ark) in y.iter_mut().zip(self.row(r)) {
                *yk += ark * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> Dense {
        let mut t = Dense::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Symmetric Gram matrix A^T A of a dense m x n matrix, returned fully
/// populated (both triangles). Parallelized over output rows.
pub fn gram(a: &Dense) -> Dense {
    let n = a.cols;
    let t = a.transpose();
    let mut g = Dense::zeros(n, n);
    g.data
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, grow)| {
            let ti = t.row(i);
            for j in i..n {
                grow[j] = dot(ti, t.row(j));
            }
        });
    for i in 0..n {
        for j in 0..i {
            g.data[i * n + j] = g.data[j * n + i];
        }
    }
    g
}

/// Cholesky factorization A = L L^T of a symmetric positive definite matrix.
/// Only the lower triangle of the input is referenced.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Dense,
}

const CHOL_BLOCK: usize = 64;

impl Cholesky {
    pub fn factor(mut a: Dense) -> Result<Cholesky, FactorError> {
        assert_eq!(a.rows, a.cols, "Cholesky needs a square matrix");
        let n = a.rows;
        let mut panel = Vec::new();
        let mut p = 0;
        while p < n {
            let pe = (p + CHOL_BLOCK).min(n);
            let nbc = pe - p;

            // Factor the diagonal block in place (bordered form).
            for j in p..pe {
                for k in p..j {
                    let s = {
                        let (rj, rk) = (j * n, k * n);
                        dot(&a.data[rj + p..rj + k], &a.data[rk + p..rk + k])
                    };
                    let lkk = a.data[k * n + k];
                    a.data[j * n + k] = (a.data[j * n + k] - s) / lkk;
                }
                let rj = j * n;
                let s = dot(&a.data[rj + p..rj + j], &a.data[rj + p..rj + j]);
                let d = a.data[rj + j] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return Err(FactorError::NotPositiveDefinite { index: j });
                }
                a.data[rj + j] = d.sqrt();
            }

            if pe < n {
                // Solve the panel rows below the block against the block.
                let (head, tail) = a.data.split_at_mut(pe * n);
                tail.par_chunks_mut(n).for_each(|row| {
                    for j in p..pe {
                        let hj = &head[j * n + p..j * n + j];
                        let s = dot(&row[p..j], hj);
                        row[j] = (row[j] - s) / head[j * n + j];
                    }
                });

                // Gather the freshly computed panel columns so the trailing
                // update only reads from an immutable scratch buffer.
                let nt = n - pe;
                panel.clear();
                panel.reserve(nt * nbc);
                for i in pe..n {
                    panel.extend_from_slice(&a.data[i * n + p..i * n + pe]);
                }
                let panel = &panel;
                let (_, tail) = a.data.split_at_mut(pe * n);
                tail.par_chunks_mut(n).enumerate().for_each(|(ti, row)| {
                    let wi = &panel[ti * nbc..(ti + 1) * nbc];
                    for tj in 0..=ti {
                        let wj = &panel[tj * nbc..(tj + 1) * nbc];
                        row[pe + tj] -= dot(wi, wj);
                    }
                });
            }
            p = pe;
        }
        Ok(Cholesky { l: a })
    }

    pub fn n(&self) -> usize {
        self.l.rows
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows;
        assert_eq!(b.len(), n);
        let mut x = b.to_vec();
        // L y = b
        for i in 0..n {
            let ri = i * n;
            let s = dot(&self.l.data[ri..ri + i], &x[..i]);
            x[i] = (x[i] - s) / self.l.data[ri + i];
        }
        // L^T z = y
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.l.data[j * n + i] * x[j];
            }
            x[i] = s / self.l.data[i * n + i];
        }
        x
    }
}

/// Symmetric sparse matrix stored as the upper triangle (diagonal included)
/// in compressed sparse column form. Row indices within each column are
/// strictly ascending.
#[derive(Debug, Clone)]
pub struct SparseSym {
    n: usize,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Build from (row, col, value) triplets. Entries from either triangle
    /// are folded into the upper one; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> SparseSym {
        let mut entries: Vec<(usize, usize, f64)> = triplets
            .iter()
            .map(|&(r, c, v)| if r <= c { (c, r, v) } else { (r, c, v) })
            .collect();
        entries.sort_by_key(|&(c, r, _)| (c, r));
        let mut colptr = vec![0usize; n + 1];
        let mut rowidx: Vec<usize> = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last = None;
        for &(c, r, v) in &entries {
            assert!(c < n, "index out of range");
            if last == Some((c, r)) {
                *values.last_mut().unwrap() += v;
            } else {
                rowidx.push(r);
                values.push(v);
                colptr[c + 1] += 1;
                last = Some((c, r));
            }
        }
        for c in 0..n {
            colptr[c + 1] += colptr[c];
        }
        SparseSym { n, colptr, rowidx, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.rowidx.len()
    }

    fn col(&self, c: usize) -> (&[usize], &[f64]) {
        let range = self.colptr[c]..self.colptr[c + 1];
        (&self.rowidx[range.clone()], &self.values[range])
    }

    /// y = A x with the full symmetric matrix implied by the stored triangle.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            let (rows, vals) = self.col(c);
            for (&r, &v) in rows.iter().zip(vals) {
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }
}

/// LDL^T factorization of a symmetric (possibly indefinite, but pivotable in
/// the given order) sparse matrix.
pub struct Ldlt {
    n: usize,
    lcolptr: Vec<usize>,
    lrowidx: Vec<usize>,
    lvalues: Vec<f64>,
    d: Vec<f64>,
}

impl Ldlt {
    pub fn factor(a: &SparseSym) -> Result<Ldlt, FactorError> {
        let n = a.n;
        // Elimination tree.
        let none = usize::MAX;
        let mut parent = vec![none; n];
        let mut ancestor = vec![none; n];
        for k in 0..n {
            let (rows, _) = a.col(k);
            for &i in rows {
                let mut j = i;
                while j != none && j < k {
                    let next = ancestor[j];
                    ancestor[j] = k;
                    if next == none {
                        parent[j] = k;
                    }
                    j = next;
                }
            }
        }

        let mut lcols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut d = vec![0.0f64; n];
        let mut y = vec![0.0f64; n];
        let mut flag = vec![false; n];
        let mut pattern: Vec<usize> = Vec::with_capacity(64);

        for k in 0..n {
            pattern.clear();
            let (rows, vals) = a.col(k);
            let mut dk = None;
            for (&i, &v) in rows.iter().zip(vals) {
                if i == k {
                    dk = Some(v);
                    continue;
                }
                y[i] += v;
                let mut j = i;
                while j != k && !flag[j] {
                    flag[j] = true;
                    pattern.push(j);
                    j = parent[j];
                    if j == none {
                        break;
                    }
                }
            }
            let mut dkk = dk.ok_or(FactorError::MissingDiagonal { index: k })?;
            pattern.sort_unstable();
            for &j in &pattern {
                let yj = y[j];
                y[j] = 0.0;
                flag[j] = false;
                for &(i, lij) in &lcols[j] {
                    y[i] -= lij * yj;
                }
                let lkj = yj / d[j];
                dkk -= lkj * yj;
                lcols[j].push((k, lkj));
            }
            if dkk == 0.0 || !dkk.is_finite() {
                return Err(FactorError::ZeroPivot { index: k });
            }
            d[k] = dkk;
        }

        let mut lcolptr = Vec::with_capacity(n + 1);
        lcolptr.push(0);
        let nnz: usize = lcols.iter().map(|c| c.len()).sum();
        let mut lrowidx = Vec::with_capacity(nnz);
        let mut lvalues = Vec::with_capacity(nnz);
        for col in &lcols {
            for &(i, v) in col {
                lrowidx.push(i);
                lvalues.push(v);
            }
            lcolptr.push(lrowidx.len());
        }
        Ok(Ldlt { n, lcolptr, lrowidx, lvalues, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l_nnz(&self) -> usize {
        self.lrowidx.len()
    }

    /// Solve A x = b in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        for j in 0..self.n {
            let xj = x[j];
            if xj != 0.0 {
                for idx in self.lcolptr[j]..self.lcolptr[j + 1] {
                    x[self.lrowidx[idx]] -= self.lvalues[idx] * xj;
                }
            }
        }
        for (xi, di) in x.iter_mut().zip(&self.d) {
            *xi /= di;
        }
        for j in (0..self.n).rev() {
            let mut s = x[j];
            for idx in self.lcolptr[j]..self.lcolptr[j + 1] {
                s -= self.lvalues[idx] * x[self.lrowidx[idx]];
            }
            x[j] = s;
        }
    }
}

/// Reverse Cuthill-McKee ordering of an undirected graph given as adjacency
/// lists. Returns `order` such that `order[new] = old`. Deterministic: start
/// nodes are minimum-degree (ties to the lowest index) and neighbor visits
/// are sorted by (degree, index).
pub fn rcm_order(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let degree = |v: usize| adj[v].len();

    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.sort_by_key(|&v| (degree(v), v));

    let mut queue = std::collections::VecDeque::new();
    for &start in &nodes {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> =
                adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_by_key(|&u| (degree(u), u));
            for u in nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_spd(n: usize, seed: u64) -> Dense {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut b = Dense::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                b.set(r, c, rng.gen_range(-1.0..1.0));
            }
        }
        let mut a = gram(&b);
        for i in 0..n {
            let v = a.at(i, i) + n as f64;
            a.set(i, i, v);
        }
        a
    }

    // ---------------------------------------------------------------- dense

    #[test]
    fn gram_matches_naive_double_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (m, n) = (17, 9);
        let mut a = Dense::zeros(m, n);
        for r in 0..m {
            for c in 0..n {
                a.set(r, c, rng.gen_range(-2.0..2.0));
            }
        }
        let g = gram(&a);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for r in 0..m {
                    s += a.at(r, i) * a.at(r, j);
                }
                assert!(
                    (g.at(i, j) - s).abs() <= 1e-12 * s.abs().max(1.0),
                    "gram mismatch at ({i},{j}): {} vs {}",
                    g.at(i, j),
                    s
                );
            }
        }
    }

    #[test]
    fn cholesky_solves_random_spd_system() {
        for n in [1, 2, 3, 10, 65, 130] {
            let a = random_spd(n, 42 + n as u64);
            let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() + 1.0).collect();
            let b = a.matvec(&x_true);
            let chol = Cholesky::factor(a.clone()).expect("SPD factorization");
            let x = chol.solve(&b);
            let err: f64 = x
                .iter()
                .zip(&x_true)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "n={n}: max solve error {err}");
        }
    }

    #[test]
    fn cholesky_rejects_indefinite_matrix() {
        let a = Dense::from_data(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            Cholesky::factor(a),
            Err(FactorError::NotPositiveDefinite { index: 1 })
        ));
    }

    #[test]
    fn tr_matvec_matches_transpose_matvec() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut a = Dense::zeros(5, 8);
        for r in 0..5 {
            for c in 0..8 {
                a.set(r, c, rng.gen_range(-1.0..1.0));
            }
        }
        let x: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let via_t = a.transpose().matvec(&x);
        let direct = a.tr_matvec(&x);
        for (u, v) in direct.iter().zip(&via_t) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    // --------------------------------------------------------------- sparse

    fn dense_from_sparse(a: &SparseSym) -> Dense {
        let n = a.n();
        let mut full = Dense::zeros(n, n);
        for c in 0..n {
            let (rows, vals) = a.col(c);
            for (&r, &v) in rows.iter().zip(vals) {
                full.set(r, c, full.at(r, c) + v);
                if r != c {
                    full.set(c, r, full.at(c, r) + v);
                }
            }
        }
        full
    }

    #[test]
    fn triplets_fold_and_sum_duplicates() {
        let a = SparseSym::from_triplets(
            3,
            &[(0, 0, 1.0), (1, 0, 2.0), (0, 1, 3.0), (1, 1, 4.0), (2, 2, 5.0), (1, 0, -1.0)],
        );
        let full = dense_from_sparse(&a);
        assert_eq!(full.at(0, 0), 1.0);
        assert_eq!(full.at(0, 1), 4.0);
        assert_eq!(full.at(1, 0), 4.0);
        assert_eq!(full.at(1, 1), 4.0);
        assert_eq!(full.at(2, 2), 5.0);
    }

    #[test]
    fn sparse_matvec_matches_dense() {
        let a = SparseSym::from_triplets(
            4,
            &[(0, 0, 2.0), (1, 1, 3.0), (2, 2, 4.0), (3, 3, 5.0), (0, 1, 1.0), (2, 3, -1.5), (0, 3, 0.5)],
        );
        let x = [1.0, -2.0, 3.0, 4.0];
        let y = a.matvec(&x);
        let yd = dense_from_sparse(&a).matvec(&x);
        for (u, v) in y.iter().zip(&yd) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn ldlt_solves_each_random_sparse_system() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for trial in 0..5 {
            let n = 40;
            let mut trips = Vec::new();
            for i in 0..n {
                trips.push((i, i, 8.0 + rng.gen_range(0.0..1.0)));
            }
            for _ in 0..3 * n {
                let r = rng.gen_range(0..n);
                let c = rng.gen_range(0..n);
                if r != c {
                    trips.push((r, c, rng.gen_range(-0.9..0.9)));
                }
            }
            let a = SparseSym::from_triplets(n, &trips);
            let x_true: Vec<f64> = (0..n).map(|i| ((i + trial) as f64 * 0.61).cos()).collect();
            let b = a.matvec(&x_true);
            let f = Ldlt::factor(&a).expect("diagonally dominant factorization");
            let mut x = b.clone();
            f.solve_in_place(&mut x);
            let err: f64 = x
                .iter()
                .zip(&x_true)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "trial {trial}: max error {err}");
        }
    }

    #[test]
    fn ldlt_handles_saddle_point_block() {
        // [ K  c ] with K positive definite and c nonzero: one negative pivot,
        // [ c' 0 ] still factorizable without pivoting when ordered last.
        let trips = vec![
            (0, 0, 4.0),
            (1, 1, 5.0),
            (0, 1, 1.0),
            (0, 2, 1.0),
            (1, 2, 1.0),
            (2, 2, 0.0),
        ];
        let a = SparseSym::from_triplets(3, &trips);
        let f = Ldlt::factor(&a).expect("saddle point factorization");
        let b = vec![1.0, 2.0, 0.0];
        let mut x = b.clone();
        f.solve_in_place(&mut x);
        let r = a.matvec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12, "residual {} vs {}", ri, bi);
        }
    }

    #[test]
    fn ldlt_reports_missing_diagonal() {
        let a = SparseSym::from_triplets(2, &[(0, 0, 1.0), (0, 1, 1.0)]);
        assert!(matches!(
            Ldlt::factor(&a),
            Err(FactorError::MissingDiagonal { index: 1 })
        ));
    }

    // ------------------------------------------------------------------ rcm

    #[test]
    fn rcm_is_a_permutation_and_shrinks_path_bandwidth() {
        // Path graph labeled in a scrambled order.
        let n = 50;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut label: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            label.swap(i, j);
        }
        let mut adj = vec![Vec::new(); n];
        for w in 0..n - 1 {
            let (a, b) = (label[w], label[w + 1]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let order = rcm_order(&adj);
        let mut seen = vec![false; n];
        for &v in &order {
            assert!(!seen[v], "duplicate node in ordering");
            seen[v] = true;
        }
        let mut pos = vec![0usize; n];
        for (p, &v) in order.iter().enumerate() {
            pos[v] = p;
        }
        let pos = &pos;
        let bw = adj
            .iter()
            .enumerate()
            .flat_map(|(v, ns)| ns.iter().map(move |&u| pos[v].abs_diff(pos[u])))
            .max()
            .unwrap();
        assert_eq!(bw, 1, "RCM must lay a path out contiguously, got bandwidth {bw}");
    }
}
