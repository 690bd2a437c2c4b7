//! Complex-valued numerical primitives: convolution, lower-triangular Toeplitz
//! operators, Vandermonde construction, Hermitian eigendecomposition, least
//! squares and polynomial root finding.
//!
//! Everything here is a pure function over immutable inputs.

use std::ops::Deref;

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use num_complex::Complex64;
use thiserror::Error;

/// Complex baseband sample.
pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("sequence is empty")]
    Empty,
    #[error("sequence contains a non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("leading tap is zero; the lower-triangular Toeplitz operator is singular")]
    SingularLeadingTap,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (relative asymmetry {0:.3e})")]
    NotHermitian(f64),
    #[error("polynomial is constant after stripping trailing zeros")]
    ConstantPolynomial,
    #[error("leading polynomial coefficient is zero")]
    ZeroLeadingCoefficient,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// A nonempty sequence of finite complex samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSeq(Vec<C64>);

impl ComplexSeq {
    pub fn new(values: Vec<C64>) -> Result<Self, SignalError> {
        if values.is_empty() {
            return Err(SignalError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(SignalError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn from_real(values: &[f64]) -> Result<Self, SignalError> {
        Self::new(values.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.0
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.0
    }
}

impl Deref for ComplexSeq {
    type Target = [C64];

    fn deref(&self) -> &[C64] {
        &self.0
    }
}

pub fn norm_sq(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum()
}

pub fn norm(x: &[C64]) -> f64 {
    norm_sq(x).sqrt()
}

/// Full linear convolution; the output has `a.len() + b.len() - 1` samples.
/// Returns an empty vector if either input is empty.
pub fn convolve(a: &[C64], b: &[C64]) -> Vec<C64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![ZERO; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        if ai == ZERO {
            continue;
        }
        for (o, &bj) in out[i..].iter_mut().zip(b) {
            *o += ai * bj;
        }
    }
    out
}

/// First `n` samples of `a * b`, computed without forming the full product.
pub fn convolve_truncated(a: &[C64], b: &[C64], n: usize) -> Vec<C64> {
    let mut out = vec![ZERO; n];
    for (i, &ai) in a.iter().enumerate().take(n) {
        if ai == ZERO {
            continue;
        }
        for (o, &bj) in out[i..].iter_mut().zip(b) {
            *o += ai * bj;
        }
    }
    out
}

/// Implicit `N x N` lower-triangular Toeplitz matrix given by its first column.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzOp {
    first_column: Vec<C64>,
}

impl ToeplitzOp {
    /// Builds `T([a; 0])` of size `n`; `a` is zero-padded or truncated to `n`.
    pub fn new(a: &[C64], n: usize) -> Result<Self, SignalError> {
        if n == 0 {
            return Err(SignalError::Empty);
        }
        let mut first_column = vec![ZERO; n];
        for (dst, &src) in first_column.iter_mut().zip(a) {
            *dst = src;
        }
        Ok(Self { first_column })
    }

    pub fn size(&self) -> usize {
        self.first_column.len()
    }

    pub fn first_column(&self) -> &[C64] {
        &self.first_column
    }

    /// `T(a) x`, i.e. the first `N` samples of `a * x`.
    pub fn apply(&self, x: &[C64]) -> Result<Vec<C64>, SignalError> {
        if x.len() != self.size() {
            return Err(SignalError::LengthMismatch {
                expected: self.size(),
                got: x.len(),
            });
        }
        Ok(convolve_truncated(&self.first_column, x, self.size()))
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let n = self.size();
        DMatrix::from_fn(n, n, |i, j| if i >= j { self.first_column[i - j] } else { ZERO })
    }
}

/// Free-function form of [`ToeplitzOp::apply`].
pub fn toeplitz_apply(op: &ToeplitzOp, x: &[C64]) -> Result<Vec<C64>, SignalError> {
    op.apply(x)
}

/// First column of `T([h; 0])^{-1}` of size `n`, by forward substitution.
///
/// The cost is `O(n * len(h))`. Taps of `h` beyond `n` are ignored.
pub fn toeplitz_inverse_first_column(h: &[C64], n: usize) -> Result<Vec<C64>, SignalError> {
    if h.is_empty() || n == 0 {
        return Err(SignalError::Empty);
    }
    let h0 = h[0];
    if h0 == ZERO {
        return Err(SignalError::SingularLeadingTap);
    }
    let inv_h0 = h0.inv();
    let taps = &h[..h.len().min(n)];
    let mut g = vec![ZERO; n];
    g[0] = inv_h0;
    for k in 1..n {
        let mut acc = ZERO;
        for (j, &hj) in taps.iter().enumerate().skip(1).take(k) {
            acc += hj * g[k - j];
        }
        g[k] = -acc * inv_h0;
    }
    Ok(g)
}

/// `N x K` matrix whose column `k` is `[1, p_k, ..., p_k^{N-1}]`.
pub fn vandermonde(poles: &[C64], n: usize) -> DMatrix<C64> {
    let mut m = DMatrix::from_element(n, poles.len(), ZERO);
    for (k, &p) in poles.iter().enumerate() {
        let mut v = ONE;
        for i in 0..n {
            m[(i, k)] = v;
            v *= p;
        }
    }
    m
}

/// Eigenpairs of a Hermitian matrix, sorted by descending eigenvalue.
#[derive(Debug, Clone)]
pub struct HermitianEig {
    pub values: Vec<f64>,
    /// Unitary; column `i` pairs with `values[i]`.
    pub vectors: DMatrix<C64>,
}

impl HermitianEig {
    pub fn reassemble(&self) -> DMatrix<C64> {
        let mut scaled = self.vectors.clone();
        for (j, &l) in self.values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(l);
        }
        scaled * self.vectors.adjoint()
    }
}

fn frobenius(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Eigendecomposition of a Hermitian matrix.
///
/// Eigenvalues are returned in descending order. Each eigenvector is scaled by a
/// unit phase so that its first non-negligible component is real and positive,
/// which makes the basis reproducible.
pub fn hermitian_eig(k: &DMatrix<C64>) -> Result<HermitianEig, SignalError> {
    let (rows, cols) = k.shape();
    if rows != cols {
        return Err(SignalError::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(SignalError::Empty);
    }
    let scale = frobenius(k);
    let asym = frobenius(&(k - k.adjoint()));
    if asym > 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Err(SignalError::NotHermitian(asym / scale.max(f64::MIN_POSITIVE)));
    }
    let sym = (k + k.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::from_element(rows, rows, ZERO);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = col.iter().copied().find(|v| v.norm() > 1e-10).unwrap_or(ONE);
        let rot = pivot.conj() / pivot.norm();
        for i in 0..rows {
            vectors[(i, dst)] = col[i] * rot;
        }
    }
    Ok(HermitianEig { values, vectors })
}

/// Least-squares solver for `min ||A X - B||_F` with a reusable factorization.
///
/// Uses Householder QR with column pivoting. When the pivoted `R` reveals a
/// rank deficiency, solves via the SVD pseudoinverse instead, which gives the
/// minimum-norm solution.
pub struct LeastSquares {
    rows: usize,
    cols: usize,
    kind: Factorization,
}

enum Factorization {
    Qr {
        qr: DMatrix<C64>,
        // Householder vectors stored below the diagonal with explicit heads.
        heads: Vec<C64>,
        betas: Vec<f64>,
        perm: Vec<usize>,
    },
    Svd(Box<SVD<C64, nalgebra::Dyn, nalgebra::Dyn>>, f64),
}

impl LeastSquares {
    /// Factors `A`. A positive `ridge` solves `min ||A X - B||^2 + ridge ||X||^2`.
    pub fn new(a: &DMatrix<C64>, ridge: f64) -> Result<Self, SignalError> {
        let (m0, n) = a.shape();
        if m0 == 0 || n == 0 {
            return Err(SignalError::Empty);
        }
        let a = if ridge > 0.0 {
            let mut aug = DMatrix::from_element(m0 + n, n, ZERO);
            aug.view_mut((0, 0), (m0, n)).copy_from(a);
            for j in 0..n {
                aug[(m0 + j, j)] = C64::new(ridge.sqrt(), 0.0);
            }
            aug
        } else {
            a.clone()
        };
        let m = a.nrows();

        let mut qr = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let kmax = m.min(n);
        let mut heads = Vec::with_capacity(kmax);
        let mut betas = Vec::with_capacity(kmax);
        let mut diag = Vec::with_capacity(kmax);

        for k in 0..kmax {
            let (mut best, mut best_norm) = (k, -1.0);
            for j in k..n {
                let s: f64 = qr.view((k, j), (m - k, 1)).iter().map(|v| v.norm_sqr()).sum();
                if s > best_norm {
                    best = j;
                    best_norm = s;
                }
            }
            if best != k {
                qr.swap_columns(k, best);
                perm.swap(k, best);
            }
            let xnorm = best_norm.sqrt();
            if xnorm == 0.0 {
                heads.push(ZERO);
                betas.push(0.0);
                diag.push(0.0);
                continue;
            }
            let alpha = qr[(k, k)];
            let phase = if alpha.norm() > 0.0 { alpha / alpha.norm() } else { ONE };
            let beta_val = -phase * xnorm;
            let head = alpha - beta_val;
            let vnorm2 = head.norm_sqr() + (best_norm - alpha.norm_sqr()).max(0.0);
            let tau = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
            for j in (k + 1)..n {
                let mut s = head.conj() * qr[(k, j)];
                for i in (k + 1)..m {
                    s += qr[(i, k)].conj() * qr[(i, j)];
                }
                let f = s * tau;
                qr[(k, j)] -= f * head;
                for i in (k + 1)..m {
                    let vi = qr[(i, k)];
                    qr[(i, j)] -= f * vi;
                }
            }
            qr[(k, k)] = beta_val;
            heads.push(head);
            betas.push(tau);
            diag.push(xnorm);
        }

        let tol = (m.max(n) as f64) * f64::EPSILON * diag.first().copied().unwrap_or(0.0);
        let rank = diag.iter().filter(|&&d| d > tol).count();
        if rank < n {
            let svd = SVD::new(a, true, true);
            let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
            let eps = (m.max(n) as f64) * f64::EPSILON * smax;
            return Ok(Self {
                rows: m,
                cols: n,
                kind: Factorization::Svd(Box::new(svd), eps),
            });
        }
        Ok(Self {
            rows: m,
            cols: n,
            kind: Factorization::Qr {
                qr,
                heads,
                betas,
                perm,
            },
        })
    }

    pub fn is_rank_deficient(&self) -> bool {
        matches!(self.kind, Factorization::Svd(..))
    }

    /// Solves for every column of `b`. `b` may have fewer rows than the
    /// factored matrix when a ridge term was added; missing rows are zero.
    pub fn solve(&self, b: &DMatrix<C64>) -> Result<DMatrix<C64>, SignalError> {
        let m = self.rows;
        let n = self.cols;
        if b.nrows() > m {
            return Err(SignalError::Dimension(format!(
                "rhs has {} rows, system has {}",
                b.nrows(),
                m
            )));
        }
        let mut rhs = DMatrix::from_element(m, b.ncols(), ZERO);
        rhs.view_mut((0, 0), b.shape()).copy_from(b);
        match &self.kind {
            Factorization::Svd(svd, eps) => svd
                .solve(&rhs, *eps)
                .map_err(|e| SignalError::Dimension(e.to_string())),
            Factorization::Qr {
                qr,
                heads,
                betas,
                perm,
            } => {
                for (k, (&head, &tau)) in heads.iter().zip(betas).enumerate() {
                    if tau == 0.0 {
                        continue;
                    }
                    for c in 0..rhs.ncols() {
                        let mut s = head.conj() * rhs[(k, c)];
                        for i in (k + 1)..m {
                            s += qr[(i, k)].conj() * rhs[(i, c)];
                        }
                        let f = s * tau;
                        rhs[(k, c)] -= f * head;
                        for i in (k + 1)..m {
                            rhs[(i, c)] -= f * qr[(i, k)];
                        }
                    }
                }
                let mut x = DMatrix::from_element(n, rhs.ncols(), ZERO);
                for c in 0..rhs.ncols() {
                    for i in (0..n).rev() {
                        let mut s = rhs[(i, c)];
                        for j in (i + 1)..n {
                            s -= qr[(i, j)] * x[(perm[j], c)];
                        }
                        x[(perm[i], c)] = s / qr[(i, i)];
                    }
                }
                Ok(x)
            }
        }
    }
}

/// Minimum-norm least-squares solution of `A X = B`.
pub fn least_squares(a: &DMatrix<C64>, b: &DMatrix<C64>) -> Result<DMatrix<C64>, SignalError> {
    if a.nrows() != b.nrows() {
        return Err(SignalError::LengthMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    LeastSquares::new(a, 0.0)?.solve(b)
}

/// Evaluates `sum_l c_l z^{-l}`.
pub fn eval_poly_z_inv(coeffs: &[C64], z: C64) -> C64 {
    // Horner in w = z^{-1}.
    let w = z.inv();
    coeffs.iter().rev().fold(ZERO, |acc, &c| acc * w + c)
}

/// Coefficients of `prod_k (1 - r_k z^{-1})`.
pub fn poly_from_roots(roots: &[C64]) -> Vec<C64> {
    let mut coeffs = vec![ONE];
    for &r in roots {
        coeffs = convolve(&coeffs, &[ONE, -r]);
    }
    coeffs
}

/// Roots (in the z-plane) of `sum_l c_l z^{-l}`.
///
/// Trailing zero coefficients are stripped first. Roots come from the
/// eigenvalues of the companion matrix, followed by a few Newton steps, and are
/// returned sorted by descending modulus then argument.
pub fn polynomial_roots(coeffs: &[C64]) -> Result<Vec<C64>, SignalError> {
    let end = coeffs.iter().rposition(|&c| c != ZERO).map_or(0, |i| i + 1);
    let c = &coeffs[..end];
    if c.len() < 2 {
        return Err(SignalError::ConstantPolynomial);
    }
    if c[0] == ZERO {
        return Err(SignalError::ZeroLeadingCoefficient);
    }
    let deg = c.len() - 1;
    let monic: Vec<C64> = c.iter().map(|&v| v / c[0]).collect();

    let mut roots = if deg == 1 {
        vec![-monic[1]]
    } else {
        let mut comp = DMatrix::from_element(deg, deg, ZERO);
        for j in 0..deg {
            comp[(0, j)] = -monic[j + 1];
        }
        for i in 1..deg {
            comp[(i, i - 1)] = ONE;
        }
        let schur = nalgebra::linalg::Schur::new(comp);
        let (_, t) = schur.unpack();
        (0..deg).map(|i| t[(i, i)]).collect::<Vec<_>>()
    };

    // Polynomial in z: z^deg + a1 z^{deg-1} + ... + a_deg.
    let eval = |z: C64| {
        let mut p = ZERO;
        let mut dp = ZERO;
        for &a in &monic {
            dp = dp * z + p;
            p = p * z + a;
        }
        (p, dp)
    };
    for r in roots.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = eval(*r);
            if dp == ZERO {
                break;
            }
            let cand = *r - p / dp;
            if eval(cand).0.norm() < p.norm() {
                *r = cand;
            } else {
                break;
            }
        }
    }
    roots.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(a.arg().total_cmp(&b.arg())));
    Ok(roots)
}
