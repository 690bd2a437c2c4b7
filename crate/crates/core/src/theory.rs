//! Approximation-error analysis of PCA-configured reservoirs.
//!
//! The projection error of the Toeplitz equalizer matrices onto a basis `F`
//! can be computed two ways: numerically, by projecting every shifted copy of
//! every equalizer, and in closed form from the covariance of the equalizers
//! through shift-matrix traces. Both are exposed here, together with the
//! tail-eigenvalue form of the plain PCA error and the end-to-end channel
//! objective they bound.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::channel::{ChannelRealization, PowerDelayProfile};
use crate::signal::{convolve_truncated, hermitian_eig, vandermonde, LeastSquares, SignalError, C64, ZERO};
use crate::weight_config::{collect_equalizer_irs, ChannelStatsDataset, ConfigError, PhasePolicy};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// `||T(g)||_F^2 = sum_n (N - n) |g_n|^2`.
pub fn toeplitz_frobenius_sq(g: &[C64]) -> f64 {
    let n = g.len();
    g.iter().enumerate().map(|(i, v)| (n - i) as f64 * v.norm_sqr()).sum()
}

fn check_m_values(m_values: &[usize], available: usize) -> Result<usize, TheoryError> {
    let max = m_values.iter().copied().max().unwrap_or(0);
    if max > available {
        return Err(TheoryError::Dimension(format!("M = {max} exceeds the {available} basis columns")));
    }
    Ok(max)
}

/// Mean of `||F_M F_M^H T(g) - T(g)||_F^2` over the dataset for each `M` in
/// `m_values`, where `F_M` is the first `M` columns of `f`.
///
/// Column `i` of `T(g)` is `g` shifted down by `i`, so the projected energy is
/// `sum_m sum_i |f_m^H L_i g|^2`; the inner products for all shifts come from
/// one cross-correlation per basis column.
pub fn p2_curve_numerical(
    f: &DMatrix<C64>,
    dataset: &ChannelStatsDataset,
    m_values: &[usize],
) -> Result<Vec<f64>, TheoryError> {
    let n = dataset.len();
    if f.nrows() != n {
        return Err(TheoryError::Dimension(format!("basis has {} rows, data {}", f.nrows(), n)));
    }
    let m_max = check_m_values(m_values, f.ncols())?;
    let size = 2 * n;
    let mut planner = FftPlanner::new();
    let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(size);
    let inv: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(size);

    let f_spec: Vec<Vec<C64>> = (0..m_max)
        .into_par_iter()
        .map(|m| {
            let mut buf = vec![ZERO; size];
            for (b, v) in buf.iter_mut().zip(f.column(m).iter()) {
                *b = *v;
            }
            fwd.process(&mut buf);
            buf
        })
        .collect();

    // Per observation: total energy and cumulative projected energy over m.
    let per_obs: Vec<(f64, Vec<f64>)> = dataset
        .vectors
        .par_iter()
        .map(|g| {
            let mut gs = vec![ZERO; size];
            gs[..n].copy_from_slice(g);
            fwd.process(&mut gs);
            let mut buf = vec![ZERO; size];
            let mut scratch = vec![ZERO; inv.get_inplace_scratch_len()];
            let mut cum = Vec::with_capacity(m_max);
            let mut acc = 0.0;
            let scale = 1.0 / (size as f64 * size as f64);
            for fm in &f_spec {
                for ((b, a), s) in buf.iter_mut().zip(fm).zip(&gs) {
                    *b = a * s.conj();
                }
                inv.process_with_scratch(&mut buf, &mut scratch);
                acc += buf[..n].iter().map(|v| v.norm_sqr()).sum::<f64>() * scale;
                cum.push(acc);
            }
            (toeplitz_frobenius_sq(g), cum)
        })
        .collect();

    let n_obs = dataset.n_obs() as f64;
    Ok(m_values
        .iter()
        .map(|&m| {
            let mut total = 0.0;
            for (energy, cum) in &per_obs {
                total += energy - if m == 0 { 0.0 } else { cum[m - 1] };
            }
            total / n_obs
        })
        .collect())
}

pub fn p2_objective_numerical(f: &DMatrix<C64>, dataset: &ChannelStatsDataset) -> Result<f64, TheoryError> {
    Ok(p2_curve_numerical(f, dataset, &[f.ncols()])?[0])
}

/// Tail sum `sum_{j >= M} lambda_j` of descending eigenvalues.
pub fn lemma1_error(eigenvalues: &[f64], m: usize) -> Result<f64, TheoryError> {
    if m > eigenvalues.len() {
        return Err(TheoryError::Dimension(format!("M = {m} exceeds N = {}", eigenvalues.len())));
    }
    Ok(eigenvalues[m..].iter().sum())
}

/// Mean squared residual `||F F^H g - g||^2` over the dataset.
pub fn projection_residual(f: &DMatrix<C64>, dataset: &ChannelStatsDataset) -> f64 {
    let total: f64 = dataset
        .vectors
        .iter()
        .map(|g| {
            let gv = nalgebra::DVector::from_column_slice(g);
            let coeff = f.adjoint() * &gv;
            (f * coeff - gv).norm_squared()
        })
        .sum();
    total / dataset.n_obs() as f64
}

// sum_{a,b} K[a,b] R(a,b) with R(a,b) = sum_i conj(f[a+i]) f[b+i] over valid i.
// For a = b + d, R(a,b) is a suffix sum of conj(f[t]) f[t-d] from t = a.
fn shifted_quadratic_form(k: &DMatrix<C64>, f: &[C64]) -> f64 {
    let n = f.len();
    let mut total = 0.0;
    let mut suffix = vec![ZERO; n + 1];
    for d in 0..n {
        suffix[n] = ZERO;
        for t in (d..n).rev() {
            suffix[t] = suffix[t + 1] + f[t].conj() * f[t - d];
        }
        let mut acc = ZERO;
        for b in 0..n - d {
            acc += k[(b + d, b)] * suffix[b + d];
        }
        total += if d == 0 { acc.re } else { 2.0 * acc.re };
    }
    total
}

/// `sum_i [Tr(K L_i^H L_i) - Tr(K L_i^H F_M F_M^H L_i)]` for each `M` in
/// `m_values`, where `L_i` shifts down by `i`.
pub fn theorem1_curve(k: &DMatrix<C64>, f: &DMatrix<C64>, m_values: &[usize]) -> Result<Vec<f64>, TheoryError> {
    let n = k.nrows();
    if !k.is_square() || f.nrows() != n {
        return Err(TheoryError::Dimension(format!(
            "covariance is {}x{}, basis has {} rows",
            k.nrows(),
            k.ncols(),
            f.nrows()
        )));
    }
    let m_max = check_m_values(m_values, f.ncols())?;
    let first: f64 = (0..n).map(|i| (n - i) as f64 * k[(i, i)].re).sum();
    let per_col: Vec<f64> = (0..m_max)
        .into_par_iter()
        .map(|m| {
            let col: Vec<C64> = f.column(m).iter().copied().collect();
            shifted_quadratic_form(k, &col)
        })
        .collect();
    let mut cum = Vec::with_capacity(m_max + 1);
    cum.push(0.0);
    let mut acc = 0.0;
    for v in per_col {
        acc += v;
        cum.push(acc);
    }
    Ok(m_values.iter().map(|&m| first - cum[m]).collect())
}

pub fn theorem1_error(k: &DMatrix<C64>, f: &DMatrix<C64>) -> Result<f64, TheoryError> {
    Ok(theorem1_curve(k, f, &[f.ncols()])?[0])
}

/// Normalized approximation error curves over the basis size.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxErrorReport {
    pub m_values: Vec<usize>,
    pub numerical_normalized: Vec<f64>,
    pub theoretical_normalized: Vec<f64>,
    pub n: usize,
    pub n_obs: usize,
}

impl ApproxErrorReport {
    pub fn max_gap(&self) -> f64 {
        self.numerical_normalized
            .iter()
            .zip(&self.theoretical_normalized)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Both curves nonincreasing in `M` (up to `tol`) when `m_values` ascend.
    pub fn is_nonincreasing(&self, tol: f64) -> bool {
        let ok = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0] + tol);
        self.m_values.windows(2).all(|w| w[0] < w[1]) && ok(&self.numerical_normalized) && ok(&self.theoretical_normalized)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("M,numerical_normalized,theoretical_normalized\n");
        for ((m, a), b) in self.m_values.iter().zip(&self.numerical_normalized).zip(&self.theoretical_normalized) {
            let _ = writeln!(out, "{m},{a:.12e},{b:.12e}");
        }
        out
    }
}

/// Both error curves for a dataset, normalized by `mean ||T(g)||_F^2`.
pub fn approx_error_report(dataset: &ChannelStatsDataset, m_values: &[usize]) -> Result<ApproxErrorReport, TheoryError> {
    let k = dataset.covariance();
    let eig = hermitian_eig(&k)?;
    let m_max = check_m_values(m_values, dataset.len())?;
    let f = eig.vectors.columns(0, m_max).into_owned();
    let numerical = p2_curve_numerical(&f, dataset, m_values)?;
    let theoretical = theorem1_curve(&k, &f, m_values)?;
    let norm = dataset.vectors.iter().map(|g| toeplitz_frobenius_sq(g)).sum::<f64>() / dataset.n_obs() as f64;
    Ok(ApproxErrorReport {
        m_values: m_values.to_vec(),
        numerical_normalized: numerical.into_iter().map(|v| v / norm).collect(),
        theoretical_normalized: theoretical.into_iter().map(|v| v / norm).collect(),
        n: dataset.len(),
        n_obs: dataset.n_obs(),
    })
}

/// Error curves for `n_obs` strictly minimum-phase draws of `pdp`.
pub fn reproduce_fig5(
    pdp: &PowerDelayProfile,
    n: usize,
    n_obs: usize,
    m_values: &[usize],
    seed: u64,
) -> Result<ApproxErrorReport, TheoryError> {
    let dataset = collect_equalizer_irs(pdp, n, n_obs, PhasePolicy::RejectNonMp, seed)?;
    approx_error_report(&dataset, m_values)
}

fn channel_matrix(h: &[C64], x: Option<&[C64]>, psi: &DMatrix<C64>) -> DMatrix<C64> {
    let n = psi.nrows();
    let eff = match x {
        Some(x) => convolve_truncated(x, h, n),
        None => h.to_vec(),
    };
    let mut a = DMatrix::from_element(n, psi.ncols(), ZERO);
    for k in 0..psi.ncols() {
        let col: Vec<C64> = psi.column(k).iter().copied().collect();
        for (i, v) in convolve_truncated(&eff, &col, n).into_iter().enumerate() {
            a[(i, k)] = v;
        }
    }
    a
}

/// Mean of `||A A^+ x - x||^2` with `A = T(x) T(h) Psi` over the channels;
/// `x` defaults to the unit sample.
pub fn p_objective_numerical(
    poles: &[C64],
    channels: &[ChannelRealization],
    n: usize,
    x: Option<&[C64]>,
) -> Result<f64, TheoryError> {
    if channels.is_empty() {
        return Err(TheoryError::Dimension("no channels".into()));
    }
    let psi = vandermonde(poles, n);
    let mut target = DMatrix::from_element(n, 1, ZERO);
    match x {
        Some(x) => {
            if x.len() != n {
                return Err(TheoryError::Dimension(format!("x has {} samples, expected {n}", x.len())));
            }
            target.copy_from_slice(x);
        }
        None => target[(0, 0)] = C64::new(1.0, 0.0),
    }
    let total = channels
        .par_iter()
        .map(|h| {
            let a = channel_matrix(&h.taps, x, &psi);
            let w = LeastSquares::new(&a, 0.0)?.solve(&target)?;
            Ok((&a * w - &target).norm_squared())
        })
        .collect::<Result<Vec<f64>, SignalError>>()?;
    Ok(total.iter().sum::<f64>() / channels.len() as f64)
}

/// Mean of `||T(h)||_F^2 ||F F^H T(g) - T(g)||_F^2` with `g` the inverse of each
/// channel over `N = F.nrows()` samples.
pub fn p1_objective_numerical(f: &DMatrix<C64>, channels: &[ChannelRealization]) -> Result<f64, TheoryError> {
    let n = f.nrows();
    let mut total = 0.0;
    for h in channels {
        let g = crate::signal::toeplitz_inverse_first_column(&h.taps, n)?;
        let ds = ChannelStatsDataset::new(vec![g], crate::weight_config::Domain::Time)?;
        let p2 = p2_objective_numerical(f, &ds)?;
        let mut hn = h.taps.clone();
        hn.resize(n, ZERO);
        total += toeplitz_frobenius_sq(&hn[..n]) * p2;
    }
    Ok(total / channels.len() as f64)
}
