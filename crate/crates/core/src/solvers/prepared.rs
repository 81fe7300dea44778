use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::Design;

/// Relative threshold on |R_ii| below which the design is declared rank deficient.
const RANK_RTOL: f64 = 1e-10;

/// A design with its thin QR factorization Xᵀ = QR cached, shared by every
/// solve against the same covariates.
#[derive(Debug, Clone)]
pub struct PreparedDesign {
    x: DMatrix<f64>,
    xt: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl PreparedDesign {
    pub fn new(design: &Design) -> Result<Self> {
        Self::from_matrix(design.matrix.clone())
    }

    pub fn from_matrix(x: DMatrix<f64>) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || d == 0 {
            return Err(Error::Config("design must be nonempty".into()));
        }
        if n > d {
            return Err(Error::RankDeficient { rows: n });
        }
        let xt = x.transpose();
        let qr = xt.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let diag_max = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let diag_min = (0..n).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if !(diag_max > 0.0) || diag_min <= RANK_RTOL * diag_max || !diag_min.is_finite() {
            return Err(Error::RankDeficient { rows: n });
        }
        Ok(Self { x, xt, q, r })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn transpose(&self) -> &DMatrix<f64> {
        &self.xt
    }

    /// X w
    pub fn apply(&self, w: &DVector<f64>) -> DVector<f64> {
        self.xt.tr_mul(w)
    }

    /// Xᵀ λ
    pub fn apply_t(&self, lambda: &DVector<f64>) -> DVector<f64> {
        &self.xt * lambda
    }

    /// R⁻ᵀ y
    fn r_inv_t(&self, y: &DVector<f64>) -> DVector<f64> {
        self.r.tr_solve_upper_triangular(y).expect("triangular factor checked nonsingular at construction")
    }

    /// The least ℓ2-norm interpolator Xᵀ(XXᵀ)⁻¹y = Q R⁻ᵀ y.
    pub fn least_norm(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.q * self.r_inv_t(y)
    }

    /// (XXᵀ)⁻¹ y = R⁻¹ R⁻ᵀ y.
    pub fn gram_solve(&self, y: &DVector<f64>) -> DVector<f64> {
        self.r.solve_upper_triangular(&self.r_inv_t(y)).expect("triangular factor checked nonsingular at construction")
    }

    /// Euclidean projection of `w` onto {v : Xv = y}.
    pub fn project_affine(&self, w: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let residual = y - self.apply(w);
        w + self.least_norm(&residual)
    }

    /// Xᵀ diag(h) X as an n×n matrix.
    pub fn weighted_gram(&self, h: &[f64]) -> DMatrix<f64> {
        let mut scaled = self.xt.clone();
        for mut col in scaled.column_iter_mut() {
            for (v, hh) in col.iter_mut().zip(h) {
                *v *= hh;
            }
        }
        &self.x * scaled
    }

    /// An orthonormal basis of ker X (d × (d − n)).
    pub fn null_space(&self) -> DMatrix<f64> {
        let (n, d) = (self.n(), self.d());
        let mut basis: Vec<DVector<f64>> = self.q.column_iter().map(|c| c.into_owned()).collect();
        for j in 0..d {
            if basis.len() == d {
                break;
            }
            let mut v = DVector::zeros(d);
            v[j] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&v);
                    v.axpy(-c, b, 1.0);
                }
            }
            let norm = v.norm();
            if norm > 1e-6 {
                basis.push(v / norm);
            }
        }
        DMatrix::from_columns(&basis[n..])
    }
}
