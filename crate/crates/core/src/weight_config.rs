//! Reservoir configuration from channel statistics.
//!
//! Time-domain route: sample channels from a PDP, invert their minimum-phase
//! factors, take the principal components of the equalizer impulse responses,
//! make each component minimum phase by boosting its leading tap, truncate the
//! inverse of that component to a short all-pole model and realise the model
//! as parallel first-order neurons.
//!
//! Frequency-domain route: same population, but principal components of the
//! sampled inverse frequency responses, each fitted by an all-pole model.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::channel::{sample_tdl, sample_tdl_with_class, ChannelError, ChannelRealization, PowerDelayProfile};
use crate::filters::{factorize_by_phase, residues_for_poles, separate_clustered_poles, FilterError, PhaseClass, RationalFilter};
use crate::reservoir::{RecurrentWeights, ReservoirError, ReservoirSpec};
use crate::rng::stream;
use crate::signal::{
    eval_poly_z_inv, hermitian_eig, polynomial_roots, toeplitz_inverse_first_column, LeastSquares, SignalError, C64,
    ONE, ZERO,
};

/// Offset margin over the tail sum of a basis column.
pub const DOMINANCE_MARGIN: f64 = 0.05;
/// Smallest leading-tap offset.
pub const MIN_OFFSET: f64 = 1e-3;
/// Magnitude cap for reflected poles.
pub const MAX_POLE_RADIUS: f64 = 0.99;
/// Reweighting passes of the all-pole frequency fit.
pub const FIT_ITERATIONS: usize = 10;
/// Default number of frequency samples for the frequency-domain route.
pub const DEFAULT_GRID_SIZE: usize = 256;

const DATASET_STREAM: u64 = 0x5354_4154;
const MAX_CLASS_DRAWS: usize = 10_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Reservoir(#[from] ReservoirError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("all-pole fit of component {component} diverged: {detail}")]
    FitDiverged { component: usize, detail: String },
}

/// How non-minimum-phase realizations enter the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhasePolicy {
    /// Keep every draw and use its minimum-phase factor.
    MpFactor,
    /// Redraw until the realization is strictly minimum phase.
    RejectNonMp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Time,
    Frequency,
}

/// Equal-length equalizer responses, one per channel draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStatsDataset {
    pub vectors: Vec<Vec<C64>>,
    pub domain: Domain,
}

impl ChannelStatsDataset {
    pub fn new(vectors: Vec<Vec<C64>>, domain: Domain) -> Result<Self, ConfigError> {
        let Some(first) = vectors.first() else {
            return Err(ConfigError::InvalidParameter("dataset is empty".into()));
        };
        if first.is_empty() || vectors.iter().any(|v| v.len() != first.len()) {
            return Err(ConfigError::InvalidParameter("dataset vectors must share a nonzero length".into()));
        }
        Ok(Self { vectors, domain })
    }

    pub fn len(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_obs(&self) -> usize {
        self.vectors.len()
    }

    /// Data matrix with one observation per column.
    pub fn matrix(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.len(), self.n_obs(), |i, j| self.vectors[j][i])
    }

    /// `(1/N_obs) sum g g^H`.
    pub fn covariance(&self) -> DMatrix<C64> {
        let g = self.matrix();
        let k = &g * g.adjoint();
        let k = k.unscale(self.n_obs() as f64);
        (&k + k.adjoint()).scale(0.5)
    }
}

fn draw_channel(
    pdp: &PowerDelayProfile,
    policy: PhasePolicy,
    seed: u64,
    index: usize,
) -> Result<ChannelRealization, ChannelError> {
    let mut rng = stream(seed, &[DATASET_STREAM, index as u64]);
    match policy {
        PhasePolicy::MpFactor => sample_tdl(pdp, &mut rng),
        PhasePolicy::RejectNonMp => sample_tdl_with_class(pdp, &[PhaseClass::StrictlyMP], MAX_CLASS_DRAWS, &mut rng),
    }
}

/// Minimum-phase factor of a realization.
pub fn mp_factor(h: &[C64]) -> Result<Vec<C64>, ConfigError> {
    Ok(factorize_by_phase(h)?.mp_factor)
}

/// Draws `n_obs` channels in parallel (one RNG stream per draw).
pub fn sample_population(
    pdp: &PowerDelayProfile,
    n_obs: usize,
    policy: PhasePolicy,
    seed: u64,
) -> Result<Vec<ChannelRealization>, ConfigError> {
    (0..n_obs)
        .into_par_iter()
        .map(|i| draw_channel(pdp, policy, seed, i).map_err(ConfigError::from))
        .collect()
}

/// Time-domain dataset of given channels: the first `n` samples of the
/// inverse of each channel's minimum-phase factor.
pub fn equalizer_irs_from_channels(channels: &[ChannelRealization], n: usize) -> Result<ChannelStatsDataset, ConfigError> {
    let vectors = channels
        .par_iter()
        .map(|h| Ok(toeplitz_inverse_first_column(&mp_factor(&h.taps)?, n)?))
        .collect::<Result<Vec<_>, ConfigError>>()?;
    ChannelStatsDataset::new(vectors, Domain::Time)
}

pub fn collect_equalizer_irs(
    pdp: &PowerDelayProfile,
    n: usize,
    n_obs: usize,
    policy: PhasePolicy,
    seed: u64,
) -> Result<ChannelStatsDataset, ConfigError> {
    if n < pdp.channel_len() {
        return Err(ConfigError::InvalidParameter(format!(
            "horizon {n} is shorter than the channel ({})",
            pdp.channel_len()
        )));
    }
    equalizer_irs_from_channels(&sample_population(pdp, n_obs, policy, seed)?, n)
}

/// `1 / H_MP(e^{j 2 pi k / K})` for `k < K`.
pub fn inverse_frequency_response(h: &[C64], grid_size: usize) -> Result<Vec<C64>, ConfigError> {
    let mp = mp_factor(h)?;
    Ok((0..grid_size)
        .map(|k| {
            let z = C64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / grid_size as f64);
            eval_poly_z_inv(&mp, z).inv()
        })
        .collect())
}

pub fn collect_inverse_frequency_responses(
    pdp: &PowerDelayProfile,
    grid_size: usize,
    n_obs: usize,
    policy: PhasePolicy,
    seed: u64,
) -> Result<ChannelStatsDataset, ConfigError> {
    let channels = sample_population(pdp, n_obs, policy, seed)?;
    let vectors = channels
        .par_iter()
        .map(|h| inverse_frequency_response(&h.taps, grid_size))
        .collect::<Result<Vec<_>, _>>()?;
    ChannelStatsDataset::new(vectors, Domain::Frequency)
}

/// Leading principal components of a dataset.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    /// `N x M` with orthonormal columns.
    pub f: DMatrix<C64>,
    /// All eigenvalues of the empirical covariance, descending.
    pub eigenvalues: Vec<f64>,
}

pub fn pca_basis(dataset: &ChannelStatsDataset, m: usize) -> Result<PcaBasis, ConfigError> {
    let n = dataset.len();
    if m == 0 || m > n {
        return Err(ConfigError::InvalidParameter(format!("need 1 <= M <= {n}, got {m}")));
    }
    let eig = hermitian_eig(&dataset.covariance())?;
    Ok(PcaBasis {
        f: eig.vectors.columns(0, m).into_owned(),
        eigenvalues: eig.values,
    })
}

/// `F = P + B` where each column of `P` is minimum phase by leading-tap dominance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfiguredBasis {
    pub f: DMatrix<C64>,
    pub p: DMatrix<C64>,
    /// Only row 0 is nonzero.
    pub b: DMatrix<C64>,
    pub offsets: Vec<f64>,
}

impl ConfiguredBasis {
    /// Checks orthonormality, the exact split and tap dominance of every column.
    pub fn check_invariants(&self, tol: f64) -> Result<(), String> {
        let m = self.f.ncols();
        let gram = self.f.adjoint() * &self.f;
        let dev = (gram - DMatrix::identity(m, m)).norm();
        if dev > tol {
            return Err(format!("basis deviates from orthonormal by {dev:.3e}"));
        }
        for (i, (fv, (pv, bv))) in self.f.iter().zip(self.p.iter().zip(self.b.iter())).enumerate() {
            if (pv + bv - fv).norm() > 2.0 * f64::EPSILON * (fv.norm() + pv.norm()) {
                return Err(format!("F != P + B at flat index {i}"));
            }
        }
        for col in 0..m {
            if self.b.column(col).iter().skip(1).any(|v| *v != ZERO) {
                return Err(format!("column {col}: compensation beyond tap 0"));
            }
            let tail: f64 = self.f.column(col).iter().skip(1).map(|v| v.norm()).sum();
            if self.offsets[col].partial_cmp(&tail) != Some(std::cmp::Ordering::Greater) {
                return Err(format!("column {col}: offset {} does not dominate tail {tail}", self.offsets[col]));
            }
        }
        Ok(())
    }
}

/// Replaces the leading tap of every column by `b_m = max(1.05 * tail, 1e-3)`,
/// with `tail = sum_{n>=1} |f_n|`, and moves the difference into `B`.
pub fn mp_compensate(f: &DMatrix<C64>) -> ConfiguredBasis {
    let (n, m) = f.shape();
    let mut p = f.clone();
    let mut b = DMatrix::from_element(n, m, ZERO);
    let mut offsets = Vec::with_capacity(m);
    for col in 0..m {
        let tail: f64 = f.column(col).iter().skip(1).map(|v| v.norm()).sum();
        let bm = ((1.0 + DOMINANCE_MARGIN) * tail).max(MIN_OFFSET);
        p[(0, col)] = C64::new(bm, 0.0);
        b[(0, col)] = f[(0, col)] - bm;
        offsets.push(bm);
    }
    ConfiguredBasis {
        f: f.clone(),
        p,
        b,
        offsets,
    }
}

/// Truncated all-pole model of one compensated column.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedOrder {
    /// First `L_f` inverse coefficients.
    pub q: Vec<C64>,
    /// `|| p - impulse_response(1/Q) ||_2` over the column length.
    pub error: f64,
}

pub fn reduce_order(p: &[C64], l_f: usize) -> Result<ReducedOrder, ConfigError> {
    if l_f == 0 {
        return Err(ConfigError::InvalidParameter("L_f must be at least 1".into()));
    }
    let n = p.len();
    let inv = toeplitz_inverse_first_column(p, n)?;
    let mut q: Vec<C64> = inv.into_iter().take(l_f).collect();
    let q0 = q[0];
    let a: Vec<C64> = q.iter().map(|v| v / q0).collect();
    let filt = RationalFilter::new(vec![q0.inv()], a)?;
    let p_hat = filt.impulse_response(n);
    let error = p.iter().zip(&p_hat).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    q.truncate(l_f);
    Ok(ReducedOrder { q, error })
}

/// Per-column pipeline diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDiagnostics {
    pub m: usize,
    pub b_m: f64,
    pub reduce_order_error: f64,
    pub n_reflected_poles: usize,
}

pub fn diagnostics_csv(diag: &[ColumnDiagnostics]) -> String {
    let mut out = String::from("m,b_m,reduce_order_error,n_reflected_poles\n");
    for d in diag {
        let _ = writeln!(out, "{},{:e},{:e},{}", d.m, d.b_m, d.reduce_order_error, d.n_reflected_poles);
    }
    out
}

/// Parallel neurons of a configured reservoir.
#[derive(Debug, Clone, PartialEq)]
pub struct PoleConfig {
    pub poles: Vec<C64>,
    pub weights: Vec<C64>,
    pub diagnostics: Vec<ColumnDiagnostics>,
}

/// Reflects poles on or outside the unit circle to radius `min(1/|p|, 0.99)`.
pub fn reflect_unstable(poles: &mut [C64]) -> usize {
    let mut count = 0;
    for p in poles.iter_mut() {
        let r = p.norm();
        if r >= 1.0 {
            *p *= (1.0 / r).min(MAX_POLE_RADIUS) / r;
            count += 1;
        }
    }
    count
}

/// Neurons realising `1/Q(z)` for coefficients `q` (in `z^{-1}`): one neuron per
/// root with weight equal to its residue, then zero poles with unit weight up
/// to `width` neurons. Coefficients below `1e-12` of the largest are dropped
/// from the tail first. Returns the number of reflected poles.
fn all_pole_neurons(q: &[C64], width: usize, poles: &mut Vec<C64>, weights: &mut Vec<C64>) -> Result<usize, ConfigError> {
    let scale = q.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let end = q.iter().rposition(|v| v.norm() > 1e-12 * scale).map_or(1, |i| i + 1);
    let q = &q[..end];
    let mut roots = if q.len() >= 2 { polynomial_roots(q)? } else { Vec::new() };
    let n_reflected = reflect_unstable(&mut roots);
    let (roots, _) = separate_clustered_poles(&roots);
    let res = residues_for_poles(&roots)?;
    let q0 = q[0];
    let used = roots.len();
    poles.extend(roots);
    weights.extend(res.into_iter().map(|c| c / q0));
    for _ in used..width {
        poles.push(ZERO);
        weights.push(ONE);
    }
    Ok(n_reflected)
}

/// `L_f` neurons per basis column.
pub fn basis_to_poles(basis: &ConfiguredBasis, l_f: usize) -> Result<PoleConfig, ConfigError> {
    let mut poles = Vec::new();
    let mut weights = Vec::new();
    let mut diagnostics = Vec::new();
    for m in 0..basis.p.ncols() {
        let col: Vec<C64> = basis.p.column(m).iter().copied().collect();
        let red = reduce_order(&col, l_f)?;
        let n_reflected = all_pole_neurons(&red.q, l_f, &mut poles, &mut weights)?;
        diagnostics.push(ColumnDiagnostics {
            m,
            b_m: basis.offsets[m],
            reduce_order_error: red.error,
            n_reflected_poles: n_reflected,
        });
    }
    Ok(PoleConfig {
        poles,
        weights,
        diagnostics,
    })
}

/// Single-input diagonal spec from configured neurons. Without a window the
/// compensation offsets are carried by one explicit skip feature.
pub fn diagonal_spec(cfg: &PoleConfig, window: usize) -> Result<ReservoirSpec, ConfigError> {
    let spec = ReservoirSpec::diagonal(cfg.poles.clone(), cfg.weights.clone(), window)?;
    Ok(spec.with_skip(window == 0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeDomainParams {
    /// Equalizer impulse-response length.
    pub n: usize,
    pub n_obs: usize,
    pub m: usize,
    pub l_f: usize,
    pub window: usize,
    pub policy: PhasePolicy,
}

impl Default for TimeDomainParams {
    fn default() -> Self {
        Self {
            n: 128,
            n_obs: 1000,
            m: 5,
            l_f: 7,
            window: 5,
            policy: PhasePolicy::MpFactor,
        }
    }
}

/// Result of a configuration run.
#[derive(Debug, Clone)]
pub struct Configured {
    pub spec: ReservoirSpec,
    pub poles: PoleConfig,
    /// Only set by the time-domain route.
    pub basis: Option<ConfiguredBasis>,
}

pub fn configure_from_dataset(dataset: &ChannelStatsDataset, params: &TimeDomainParams) -> Result<Configured, ConfigError> {
    let pca = pca_basis(dataset, params.m)?;
    let basis = mp_compensate(&pca.f);
    let poles = basis_to_poles(&basis, params.l_f)?;
    let spec = diagonal_spec(&poles, params.window)?;
    Ok(Configured {
        spec,
        poles,
        basis: Some(basis),
    })
}

pub fn configure_time_domain(pdp: &PowerDelayProfile, params: &TimeDomainParams, seed: u64) -> Result<Configured, ConfigError> {
    let dataset = collect_equalizer_irs(pdp, params.n, params.n_obs, params.policy, seed)?;
    configure_from_dataset(&dataset, params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyDomainParams {
    /// Horizon of the impulse-response error reported in diagnostics.
    pub n: usize,
    pub n_obs: usize,
    pub m: usize,
    pub l_rp: usize,
    pub window: usize,
    pub grid_size: usize,
    pub policy: PhasePolicy,
}

impl Default for FrequencyDomainParams {
    fn default() -> Self {
        Self {
            n: 128,
            n_obs: 1000,
            m: 5,
            l_rp: 7,
            window: 5,
            grid_size: DEFAULT_GRID_SIZE,
            policy: PhasePolicy::MpFactor,
        }
    }
}

/// Denominator `Q` of order `l_rp` with `E(w) Q(e^{jw}) ~ 1`, fitted by
/// iteratively reweighted least squares (weights `1/|Q_prev|^2`).
pub fn fit_all_pole(e: &[C64], l_rp: usize) -> Result<Vec<C64>, String> {
    let k = e.len();
    let z: Vec<C64> = (0..k)
        .map(|i| C64::from_polar(1.0, -2.0 * std::f64::consts::PI * i as f64 / k as f64))
        .collect();
    let mut q = vec![ZERO; l_rp + 1];
    q[0] = ONE;
    for _ in 0..FIT_ITERATIONS {
        let w: Vec<f64> = z
            .iter()
            .map(|&zi| {
                let qv = q.iter().rev().fold(ZERO, |acc, &c| acc * zi + c);
                1.0 / qv.norm()
            })
            .collect();
        if w.iter().any(|v| !v.is_finite()) {
            return Err("denominator vanished on the grid".into());
        }
        let a = DMatrix::from_fn(k, l_rp + 1, |i, l| e[i] * z[i].powu(l as u32) * w[i]);
        let b = DMatrix::from_fn(k, 1, |i, _| C64::new(w[i], 0.0));
        let sol = LeastSquares::new(&a, 0.0)
            .and_then(|ls| ls.solve(&b))
            .map_err(|err| err.to_string())?;
        q = sol.column(0).iter().copied().collect();
        if q.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err("non-finite coefficients".into());
        }
    }
    Ok(q)
}

pub fn configure_from_frequency_dataset(
    dataset: &ChannelStatsDataset,
    params: &FrequencyDomainParams,
) -> Result<Configured, ConfigError> {
    let pca = pca_basis(dataset, params.m)?;
    let k = dataset.len();
    let mut poles = Vec::new();
    let mut weights = Vec::new();
    let mut diagnostics = Vec::new();
    for m in 0..params.m {
        let e: Vec<C64> = pca.f.column(m).iter().copied().collect();
        let q = fit_all_pole(&e, params.l_rp).map_err(|detail| ConfigError::FitDiverged { component: m, detail })?;
        let start = poles.len();
        let n_reflected = all_pole_neurons(&q, params.l_rp, &mut poles, &mut weights)?;
        // Error of the realised neurons against the component's impulse response.
        let target = idft(&e);
        let realised: Vec<C64> = (0..params.n.min(k))
            .map(|t| {
                poles[start..]
                    .iter()
                    .zip(&weights[start..])
                    .map(|(p, c)| if t == 0 { *c } else { c * p.powu(t as u32) })
                    .sum()
            })
            .collect();
        let err = realised
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        diagnostics.push(ColumnDiagnostics {
            m,
            b_m: 0.0,
            reduce_order_error: err,
            n_reflected_poles: n_reflected,
        });
    }
    let cfg = PoleConfig {
        poles,
        weights,
        diagnostics,
    };
    let spec = diagonal_spec(&cfg, params.window)?;
    Ok(Configured {
        spec,
        poles: cfg,
        basis: None,
    })
}

// Impulse response behind uniformly sampled frequency values.
fn idft(e: &[C64]) -> Vec<C64> {
    let k = e.len();
    (0..k)
        .map(|t| {
            e.iter()
                .enumerate()
                .map(|(i, &v)| v * C64::from_polar(1.0, 2.0 * std::f64::consts::PI * (i * t) as f64 / k as f64))
                .sum::<C64>()
                / k as f64
        })
        .collect()
}

pub fn configure_frequency_domain(
    pdp: &PowerDelayProfile,
    params: &FrequencyDomainParams,
    seed: u64,
) -> Result<Configured, ConfigError> {
    if params.m == 0 || params.m > params.grid_size {
        return Err(ConfigError::InvalidParameter("need 1 <= M <= grid size".into()));
    }
    let dataset = collect_inverse_frequency_responses(pdp, params.grid_size, params.n_obs, params.policy, seed)?;
    configure_from_frequency_dataset(&dataset, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MimoMode {
    Factorizable,
    ParametricDistinct,
    ParametricShared,
}

/// Block-diagonal multi-input spec: every input drives its own copy of the
/// SISO reservoir(s). The window length of the first spec is kept.
pub fn assemble_mimo(siso: &[ReservoirSpec], n_inputs: usize, mode: MimoMode) -> Result<ReservoirSpec, ConfigError> {
    let expected_one = matches!(mode, MimoMode::Factorizable | MimoMode::ParametricShared);
    if siso.is_empty() || (expected_one && siso.len() != 1) {
        return Err(ConfigError::InvalidParameter(format!(
            "{mode:?} takes {} SISO spec(s), got {}",
            if expected_one { "one" } else { "one per path" },
            siso.len()
        )));
    }
    if n_inputs == 0 || siso.iter().any(|s| s.d_in() != 1) {
        return Err(ConfigError::InvalidParameter("SISO specs must have one input".into()));
    }
    let per_input: usize = siso.iter().map(|s| s.n_neurons()).sum();
    let total = per_input * n_inputs;
    let mut w_in = DMatrix::from_element(total, n_inputs, ZERO);
    let all_diag = siso.iter().all(|s| s.poles().is_some());
    let mut diag = Vec::with_capacity(total);
    let mut dense = DMatrix::from_element(total, total, ZERO);
    let mut offset = 0;
    for input in 0..n_inputs {
        for s in siso {
            let nn = s.n_neurons();
            for k in 0..nn {
                w_in[(offset + k, input)] = s.w_in()[(k, 0)];
            }
            match s.w_res() {
                RecurrentWeights::Diagonal(p) => diag.extend_from_slice(p),
                RecurrentWeights::Dense(m) => {
                    dense.view_mut((offset, offset), (nn, nn)).copy_from(m);
                }
            }
            if let (false, RecurrentWeights::Diagonal(p)) = (all_diag, s.w_res()) {
                for (k, &v) in p.iter().enumerate() {
                    dense[(offset + k, offset + k)] = v;
                }
            }
            offset += nn;
        }
    }
    let w_res = if all_diag {
        RecurrentWeights::Diagonal(diag)
    } else {
        RecurrentWeights::Dense(dense)
    };
    let first = &siso[0];
    Ok(ReservoirSpec::new(w_in, w_res, first.activation(), first.window(), first.has_skip())?)
}
