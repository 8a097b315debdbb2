//! Dense linear-algebra helpers shared by the estimators and the simulators.

use nalgebra::{Cholesky, ColPivQR, DMatrix, DVector, Dyn, Schur, SymmetricEigen};

use crate::error::{Error, Result};

/// Default bound on the condition-number estimate before a factorization is
/// treated as singular.
pub const DEFAULT_COND_LIMIT: f64 = 1e12;

/// `XᵀX` for any (possibly strided) view.
pub fn gram<S>(x: &nalgebra::Matrix<f64, Dyn, Dyn, S>) -> DMatrix<f64>
where
    S: nalgebra::Storage<f64, Dyn, Dyn>,
{
    let owned = x.clone_owned();
    let mut g = owned.transpose() * &owned;
    symmetrize(&mut g);
    g
}

/// Overwrite `m` with `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factorization of a symmetric positive definite matrix with a
/// cheap condition check.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    dim: usize,
}

impl SpdFactor {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::with_limit(m, DEFAULT_COND_LIMIT)
    }

    pub fn with_limit(m: DMatrix<f64>, cond_limit: f64) -> Result<Self> {
        let dim = m.nrows();
        if dim != m.ncols() {
            return Err(Error::InvalidInput(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let chol = Cholesky::new(m).ok_or(Error::SingularGram {
            machine: None,
            condition: f64::INFINITY,
        })?;
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..dim {
            let d = l[(i, i)].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        // (max L_ii / min L_ii)² is a lower bound on cond₂ of the factored matrix.
        let condition = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
        if !(condition <= cond_limit) {
            return Err(Error::SingularGram {
                machine: None,
                condition,
            });
        }
        Ok(Self { chol, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Explicit inverse, assembled by solving against identity columns.
    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }

    /// `xᵀ M⁻¹ x`.
    pub fn inv_quad_form(&self, x: &DVector<f64>) -> f64 {
        // ‖L⁻¹x‖²
        let l = self.chol.l_dirty();
        let mut z = x.clone();
        for i in 0..self.dim {
            let mut s = z[i];
            for j in 0..i {
                s -= l[(i, j)] * z[j];
            }
            z[i] = s / l[(i, i)];
        }
        z.norm_squared()
    }

    /// Cholesky factor `L` with `M = L Lᵀ`.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Lower-triangular `L⁻¹` for the Cholesky factor `L`.
    pub fn l_inverse(&self) -> DMatrix<f64> {
        lower_triangular_inverse(self.chol.l_dirty())
    }

    /// `tr(M⁻¹) = ‖L⁻¹‖²_F`.
    pub fn trace_inverse(&self) -> f64 {
        self.l_inverse().norm_squared()
    }
}

/// Inverse of the lower triangle of `l` (entries above the diagonal are ignored).
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let p = l.nrows();
    let src = l.as_slice();
    let mut out = DMatrix::zeros(p, p);
    let dst = out.as_mut_slice();
    for j in 0..p {
        let z = &mut dst[j * p..(j + 1) * p];
        z[j] = 1.0;
        for m in j..p {
            let col = &src[m * p..(m + 1) * p];
            z[m] /= col[m];
            let zm = z[m];
            if zm != 0.0 {
                for (zr, lr) in z[m + 1..].iter_mut().zip(&col[m + 1..]) {
                    *zr -= zm * lr;
                }
            }
        }
    }
    out
}

/// `tr(A B)` for square matrices without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}

/// Least squares by column-pivoted Householder QR.
///
/// The ratio of the extreme diagonal magnitudes of `R` serves as the
/// condition estimate of `X`.
pub fn least_squares_qr(x: &DMatrix<f64>, y: &DVector<f64>, cond_limit: f64) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidInput(format!(
            "response has {} entries but design has {n} rows",
            y.len()
        )));
    }
    if n < p {
        return Err(Error::InvalidInput(format!(
            "least squares needs n >= p, got n = {n}, p = {p}"
        )));
    }
    let qr = ColPivQR::new(x.clone());
    let r = qr.r();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..p {
        let d = r[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= cond_limit) {
        return Err(Error::SingularGram {
            machine: None,
            condition,
        });
    }
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let mut z = qty.rows(0, p).clone_owned();
    if !r.solve_upper_triangular_mut(&mut z) {
        return Err(Error::SingularGram {
            machine: None,
            condition: f64::INFINITY,
        });
    }
    qr.p().inv_permute_rows(&mut z);
    Ok(z)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Spectral norm (largest singular value) of a general square matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let mtm = m.transpose() * m;
    sym_max_eigenvalue(&mtm).max(0.0).sqrt()
}

/// Spectral radius of a general square matrix.
///
/// Uses the eigenvalues of the real Schur form; if the QR iteration does not
/// settle, falls back to Gelfand's formula `ρ = lim ‖A^m‖^{1/m}` evaluated by
/// repeated squaring.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if let Some(schur) = Schur::try_new(m.clone(), f64::EPSILON, 100 * m.nrows().max(10)) {
        return schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    gelfand_radius(m, 48)
}

/// `‖A^{2^j}‖^{1/2^j}` after `squarings` steps, rescaling to avoid overflow.
pub fn gelfand_radius(m: &DMatrix<f64>, squarings: u32) -> f64 {
    let mut b = m.clone();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..squarings {
        let norm = b.norm();
        if norm == 0.0 {
            return 0.0;
        }
        b /= norm;
        log_scale += norm.ln() / power;
        b = &b * &b;
        power *= 2.0;
    }
    (log_scale + b.norm().ln() / power).exp()
}
