//! Sparse symmetric matrices and an up-looking LDL' factorization.
//!
//! Matrices are stored as the upper triangle (diagonal included) in
//! compressed-sparse-column form. The factorization `Q = L D L'` follows the
//! classic elimination-tree row algorithm: a symbolic pass computes the tree
//! and per-column counts, a numeric pass performs one sparse triangular solve
//! per row. No fill-reducing permutation is applied; callers order variables
//! so that densely coupled blocks come last.

use crate::error::{Error, Result};

/// Accumulates symmetric entries; duplicates are summed.
#[derive(Debug, Clone, Default)]
pub struct SymTriplets {
    n: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl SymTriplets {
    pub fn new(n: usize) -> Self {
        SymTriplets {
            n,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        SymTriplets {
            n,
            entries: Vec::with_capacity(cap),
        }
    }

    /// Add `v` at (i, j); only the upper-triangle representative is kept.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        if v == 0.0 {
            return;
        }
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((r as u32, c as u32, v));
    }

    pub fn build(mut self) -> SymmCsc {
        // sort column-major, rows ascending inside a column, then merge dups
        self.entries.sort_unstable_by_key(|a| (a.1, a.0));
        let n = self.n;
        let mut col_counts = vec![0usize; n];
        let mut row_ind: Vec<u32> = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(u32, u32)> = None;
        for &(r, c, v) in &self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_ind.push(r);
                values.push(v);
                col_counts[c as usize] += 1;
                last = Some((r, c));
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        for c in 0..n {
            col_ptr[c + 1] = col_ptr[c] + col_counts[c];
        }
        SymmCsc {
            n,
            col_ptr,
            row_ind,
            values,
        }
    }
}

/// Upper-triangle CSC symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmCsc {
    n: usize,
    col_ptr: Vec<usize>,
    row_ind: Vec<u32>,
    values: Vec<f64>,
}

impl SymmCsc {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz_upper(&self) -> usize {
        self.values.len()
    }

    /// Entry (i, j) of the full symmetric matrix (zero when absent).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        let lo = self.col_ptr[c];
        let hi = self.col_ptr[c + 1];
        match self.row_ind[lo..hi].binary_search(&(r as u32)) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    /// y = Q x with the full symmetric matrix.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        y.fill(0.0);
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_ind[p] as usize;
                let v = self.values[p];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
    }

    /// Dense (n x n) copy, for small oracles and tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        self.for_each_upper(|r, c, v| {
            m[r][c] = v;
            m[c][r] = v;
        });
        m
    }

    /// Sum of a function over stored upper-triangle entries `(i, j, v)`.
    pub fn for_each_upper(&self, mut f: impl FnMut(usize, usize, f64)) {
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                f(self.row_ind[p] as usize, c, self.values[p]);
            }
        }
    }

    /// Copy with `jitter` added to every diagonal entry.
    fn with_diagonal_jitter(&self, jitter: f64) -> SymmCsc {
        let mut m = self.clone();
        for c in 0..m.n {
            let lo = m.col_ptr[c];
            let hi = m.col_ptr[c + 1];
            match m.row_ind[lo..hi].binary_search(&(c as u32)) {
                Ok(k) => m.values[lo + k] += jitter,
                Err(_) => {
                    // structurally missing diagonal: treat as singular input
                }
            }
        }
        m
    }

    /// LDL' factorization; fails if the matrix is not positive definite.
    pub fn factor(&self) -> Result<LdlFactor> {
        LdlFactor::new(self)
    }

    /// LDL' with escalating diagonal jitter as a fallback for matrices that
    /// are positive definite only up to rounding. Returns the factor and the
    /// jitter that was finally applied (0.0 on the clean path).
    pub fn factor_with_jitter(&self) -> Result<(LdlFactor, f64)> {
        if let Ok(f) = self.factor() {
            return Ok((f, 0.0));
        }
        let max_diag = {
            let mut m = 0.0f64;
            self.for_each_upper(|i, j, v| {
                if i == j {
                    m = m.max(v.abs());
                }
            });
            m.max(1.0)
        };
        let mut jitter = 1e-10 * max_diag;
        for _ in 0..14 {
            if let Ok(f) = self.with_diagonal_jitter(jitter).factor() {
                return Ok((f, jitter));
            }
            jitter *= 10.0;
        }
        Err(Error::Numerical(
            "matrix is not positive definite even after diagonal jitter".into(),
        ))
    }
}

/// Numeric LDL' factor with elimination-tree symbolic structure.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    l_col_ptr: Vec<usize>,
    l_row_ind: Vec<u32>,
    l_values: Vec<f64>,
    diag: Vec<f64>,
}

impl LdlFactor {
    fn new(a: &SymmCsc) -> Result<LdlFactor> {
        let n = a.n;
        // symbolic: elimination tree and column counts
        let mut parent = vec![usize::MAX; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let mut i = a.row_ind[p] as usize;
                while i < k && flag[i] != k {
                    if parent[i] == usize::MAX {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + lnz[k];
        }
        let nnz_l = l_col_ptr[n];
        let mut l_row_ind = vec![0u32; nnz_l];
        let mut l_values = vec![0.0f64; nnz_l];
        let mut diag = vec![0.0f64; n];

        // numeric: one sparse triangular solve per row k
        let mut y = vec![0.0f64; n];
        let mut pattern = vec![0usize; n];
        let mut next = vec![0usize; n]; // next free slot per L column
        next[..n].copy_from_slice(&l_col_ptr[..n]);
        let mut flag2 = vec![usize::MAX; n];
        for k in 0..n {
            let mut top = n;
            flag2[k] = k;
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let i0 = a.row_ind[p] as usize;
                y[i0] += a.values[p];
                let mut len = 0usize;
                let mut i = i0;
                while i < k && flag2[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag2[i] = k;
                    i = parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = pattern[len];
                }
            }
            let mut dk = y[k];
            y[k] = 0.0;
            for &i in &pattern[top..n] {
                let yi = y[i];
                y[i] = 0.0;
                let p2 = next[i];
                for p in l_col_ptr[i]..p2 {
                    y[l_row_ind[p] as usize] -= l_values[p] * yi;
                }
                let lki = yi / diag[i];
                dk -= lki * yi;
                l_row_ind[p2] = k as u32;
                l_values[p2] = lki;
                next[i] = p2 + 1;
            }
            if !dk.is_finite() || dk <= 0.0 {
                return Err(Error::Numerical(format!(
                    "LDL pivot {k} is not positive ({dk:.3e}); matrix not positive definite"
                )));
            }
            diag[k] = dk;
        }
        Ok(LdlFactor {
            n,
            l_col_ptr,
            l_row_ind,
            l_values,
            diag,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.l_values.len()
    }

    /// log det(Q) = sum of log pivots.
    pub fn log_det(&self) -> f64 {
        self.diag.iter().map(|d| d.ln()).sum()
    }

    /// x <- L^{-1} x
    pub fn lsolve(&self, x: &mut [f64]) {
        for j in 0..self.n {
            let xj = x[j];
            if xj != 0.0 {
                for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                    x[self.l_row_ind[p] as usize] -= self.l_values[p] * xj;
                }
            }
        }
    }

    /// x <- D^{-1} x
    pub fn dsolve(&self, x: &mut [f64]) {
        for (xi, di) in x.iter_mut().zip(&self.diag) {
            *xi /= di;
        }
    }

    /// x <- L'^{-1} x
    pub fn ltsolve(&self, x: &mut [f64]) {
        for j in (0..self.n).rev() {
            let mut xj = x[j];
            for p in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                xj -= self.l_values[p] * x[self.l_row_ind[p] as usize];
            }
            x[j] = xj;
        }
    }

    /// Solve Q x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.lsolve(&mut x);
        self.dsolve(&mut x);
        self.ltsolve(&mut x);
        x
    }

    /// Quadratic form a' Q^{-1} a through one forward solve.
    pub fn quad_form_inv(&self, a_sparse: &[(usize, f64)], work: &mut [f64]) -> f64 {
        debug_assert_eq!(work.len(), self.n);
        work.fill(0.0);
        for &(i, v) in a_sparse {
            work[i] = v;
        }
        self.lsolve(work);
        let mut acc = 0.0;
        for (w, d) in work.iter().zip(&self.diag) {
            if *w != 0.0 {
                acc += w * w / d;
            }
        }
        acc
    }

    /// Draw z with Cov(z) = Q^{-1} from iid standard normals `u`:
    /// z = L'^{-1} D^{-1/2} u.
    pub fn sample_zero_mean(&self, u: &mut [f64]) {
        for (ui, di) in u.iter_mut().zip(&self.diag) {
            *ui /= di.sqrt();
        }
        self.ltsolve(u);
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop, clippy::neg_multiply)]
mod tests {
    use super::*;

    fn dense_to_csc(m: &[Vec<f64>]) -> SymmCsc {
        let n = m.len();
        let mut t = SymTriplets::new(n);
        for i in 0..n {
            for j in i..n {
                if m[i][j] != 0.0 {
                    t.add(i, j, m[i][j]);
                }
            }
        }
        t.build()
    }

    fn random_spd(n: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let b: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    a[i][j] += b[k][i] * b[k][j];
                }
            }
            a[i][i] += n as f64 * 0.5;
        }
        a
    }

    #[test]
    fn triplets_merge_duplicates_and_symmetrize() {
        let mut t = SymTriplets::new(3);
        t.add(0, 0, 1.0);
        t.add(2, 1, -0.5);
        t.add(1, 2, -0.5);
        t.add(1, 1, 2.0);
        t.add(2, 2, 2.0);
        let m = t.build();
        assert_eq!(m.get(1, 2), -1.0);
        assert_eq!(m.get(2, 1), -1.0);
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 2), 0.0);
    }

    #[test]
    fn factor_matches_dense_solve() {
        for seed in 0..4u64 {
            let n = 24;
            let a = random_spd(n, seed);
            let m = dense_to_csc(&a);
            let f = m.factor().unwrap();
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = f.solve(&b);
            // residual check: ||Ax - b|| small
            let mut r = vec![0.0; n];
            m.mul_vec(&x, &mut r);
            for i in 0..n {
                assert!((r[i] - b[i]).abs() < 1e-9, "seed={seed} i={i}");
            }
        }
    }

    #[test]
    fn log_det_matches_nalgebra() {
        let n = 16;
        let a = random_spd(n, 11);
        let m = dense_to_csc(&a);
        let f = m.factor().unwrap();
        let dm = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
        let chol = nalgebra::linalg::Cholesky::new(dm).unwrap();
        let expected: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        assert!((f.log_det() - expected).abs() < 1e-8);
    }

    #[test]
    fn quad_form_inv_matches_full_solve() {
        let n = 20;
        let a = random_spd(n, 3);
        let m = dense_to_csc(&a);
        let f = m.factor().unwrap();
        let sparse_a = vec![(2usize, 1.0), (7, -2.0), (19, 0.5)];
        let mut dense_a = vec![0.0; n];
        for &(i, v) in &sparse_a {
            dense_a[i] = v;
        }
        let x = f.solve(&dense_a);
        let direct: f64 = dense_a.iter().zip(&x).map(|(a, x)| a * x).sum();
        let mut work = vec![0.0; n];
        let qf = f.quad_form_inv(&sparse_a, &mut work);
        assert!((qf - direct).abs() < 1e-10);
    }

    #[test]
    fn indefinite_matrix_is_rejected_then_jittered() {
        // PSD with an exactly zero eigenvalue: graph Laplacian of a path
        let lap = vec![
            vec![1.0, -1.0, 0.0],
            vec![-1.0, 2.0, -1.0],
            vec![0.0, -1.0, 1.0],
        ];
        let m = dense_to_csc(&lap);
        assert!(m.factor().is_err());
        let (f, jitter) = m.factor_with_jitter().unwrap();
        assert!(jitter > 0.0);
        assert!(f.log_det().is_finite());
    }

    #[test]
    fn sampling_covariance_is_inverse() {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let a = vec![vec![4.0, 1.0], vec![1.0, 3.0]];
        let m = dense_to_csc(&a);
        let f = m.factor().unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let normal = rand_distr::StandardNormal;
        let reps = 200_000;
        let mut c00 = 0.0;
        let mut c01 = 0.0;
        let mut c11 = 0.0;
        for _ in 0..reps {
            let mut u = [normal.sample(&mut rng), normal.sample(&mut rng)];
            f.sample_zero_mean(&mut u);
            c00 += u[0] * u[0];
            c01 += u[0] * u[1];
            c11 += u[1] * u[1];
        }
        let inv_det = 1.0 / (4.0 * 3.0 - 1.0);
        let cov = [
            [3.0 * inv_det, -1.0 * inv_det],
            [-1.0 * inv_det, 4.0 * inv_det],
        ];
        assert!((c00 / reps as f64 - cov[0][0]).abs() < 5e-3);
        assert!((c01 / reps as f64 - cov[0][1]).abs() < 5e-3);
        assert!((c11 / reps as f64 - cov[1][1]).abs() < 5e-3);
    }
}
