//! Channel generation: PDP-driven tapped delay lines, AGC, phase
//! classification, parametric multi-antenna channels and channel application
//! with additive white Gaussian noise.

use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::filters::{factorize_by_phase, FilterError, PhaseClass};
use crate::signal::{norm, C64, ONE, ZERO};

/// Upper bound on redraws when a realization has a root on the unit circle.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid power delay profile: {0}")]
    InvalidPdp(String),
    #[error("PDP line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("channel taps have zero energy")]
    ZeroEnergy,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("no admissible realization after {0} draws")]
    RetriesExhausted(usize),
}

/// Average power per integer-delay tap, with optional Rician LOS on tap 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerDelayProfile {
    tap_delays: Vec<usize>,
    tap_powers: Vec<f64>,
    los_k_factor: Option<f64>,
}

impl PowerDelayProfile {
    /// Validates and renormalizes the powers to unit sum.
    pub fn new(
        tap_delays: Vec<usize>,
        tap_powers: Vec<f64>,
        los_k_factor: Option<f64>,
    ) -> Result<Self, ChannelError> {
        if tap_delays.is_empty() || tap_delays.len() != tap_powers.len() {
            return Err(ChannelError::InvalidPdp(
                "delays and powers must be nonempty and of equal length".into(),
            ));
        }
        if tap_delays[0] != 0 {
            return Err(ChannelError::InvalidPdp("first tap delay must be 0".into()));
        }
        if tap_delays.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ChannelError::InvalidPdp("delays must be strictly ascending".into()));
        }
        if tap_powers.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(ChannelError::InvalidPdp("powers must be positive and finite".into()));
        }
        if let Some(k) = los_k_factor {
            if k.is_nan() || k < 0.0 {
                return Err(ChannelError::InvalidPdp("K-factor must be non-negative".into()));
            }
        }
        let total: f64 = tap_powers.iter().sum();
        let tap_powers = tap_powers.into_iter().map(|p| p / total).collect();
        Ok(Self {
            tap_delays,
            tap_powers,
            los_k_factor,
        })
    }

    /// Builds a profile from real-valued delays (in samples) and powers in dB.
    /// Delays are rounded to the sample grid and coincident taps merged.
    pub fn from_clusters(
        delays: &[f64],
        powers_db: &[f64],
        k_factor_db: Option<f64>,
    ) -> Result<Self, ChannelError> {
        if delays.len() != powers_db.len() {
            return Err(ChannelError::InvalidPdp("delay/power count mismatch".into()));
        }
        let mut taps: Vec<(usize, f64)> = Vec::new();
        for (&d, &p) in delays.iter().zip(powers_db) {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(ChannelError::InvalidPdp(format!("bad delay {d}")));
            }
            let lin = 10f64.powf(p / 10.0);
            let idx = d.round() as usize;
            match taps.iter_mut().find(|(k, _)| *k == idx) {
                Some(t) => t.1 += lin,
                None => taps.push((idx, lin)),
            }
        }
        taps.sort_by_key(|t| t.0);
        let k = k_factor_db.map(|k| if k == f64::INFINITY { k } else { 10f64.powf(k / 10.0) });
        Self::new(
            taps.iter().map(|t| t.0).collect(),
            taps.iter().map(|t| t.1).collect(),
            k,
        )
    }

    /// Parses the text format: one `delay_samples power_db` pair per line,
    /// `#` comments, and an optional `k_factor_db <value>` line.
    pub fn parse(text: &str) -> Result<Self, ChannelError> {
        let mut delays = Vec::new();
        let mut powers = Vec::new();
        let mut k_db = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: &str| ChannelError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            if fields.len() != 2 {
                return Err(err("expected two fields"));
            }
            let value: f64 = fields[1].parse().map_err(|_| err("bad number"))?;
            if fields[0] == "k_factor_db" {
                if k_db.is_some() {
                    return Err(err("duplicate k_factor_db"));
                }
                k_db = Some(value);
            } else {
                delays.push(fields[0].parse::<f64>().map_err(|_| err("bad delay"))?);
                powers.push(value);
            }
        }
        Self::from_clusters(&delays, &powers, k_db)
    }

    pub fn load(path: &Path) -> Result<Self, ChannelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ChannelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Exponentially decaying profile `exp(-n / decay)` over `n_taps` taps.
    pub fn exponential(n_taps: usize, decay: f64, los_k_factor: Option<f64>) -> Result<Self, ChannelError> {
        Self::new(
            (0..n_taps).collect(),
            (0..n_taps).map(|n| (-(n as f64) / decay).exp()).collect(),
            los_k_factor,
        )
    }

    pub fn tap_delays(&self) -> &[usize] {
        &self.tap_delays
    }

    pub fn tap_powers(&self) -> &[f64] {
        &self.tap_powers
    }

    pub fn los_k_factor(&self) -> Option<f64> {
        self.los_k_factor
    }

    /// Number of taps of a realization, i.e. the largest delay plus one.
    pub fn channel_len(&self) -> usize {
        self.tap_delays.last().map_or(1, |d| d + 1)
    }

    /// Power per delay on the dense grid `0..channel_len()`.
    pub fn dense_powers(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.channel_len()];
        for (&d, &w) in self.tap_delays.iter().zip(&self.tap_powers) {
            p[d] = w;
        }
        p
    }
}

/// Circularly-symmetric complex Gaussian with the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re * s, im * s)
}

/// A single-antenna channel impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub taps: Vec<C64>,
}

impl ChannelRealization {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Scales the taps to unit energy.
pub fn normalize_agc(h_raw: &[C64]) -> Result<ChannelRealization, ChannelError> {
    let n = norm(h_raw);
    if n == 0.0 || !n.is_finite() {
        return Err(ChannelError::ZeroEnergy);
    }
    Ok(ChannelRealization {
        taps: h_raw.iter().map(|v| v / n).collect(),
    })
}

/// One draw of the profile before gain normalization.
///
/// Each tap is zero-mean complex Gaussian with the tap power as variance. With
/// a K-factor, tap 0 splits its power into a fixed LOS component (phase 0) and
/// a scattered part in the ratio `K : 1`.
pub fn sample_tdl_raw<R: Rng + ?Sized>(pdp: &PowerDelayProfile, rng: &mut R) -> Vec<C64> {
    let mut h = vec![ZERO; pdp.channel_len()];
    for (i, (&d, &p)) in pdp.tap_delays.iter().zip(&pdp.tap_powers).enumerate() {
        h[d] = match (i, pdp.los_k_factor) {
            (0, Some(k)) if k.is_infinite() => C64::new(p.sqrt(), 0.0),
            (0, Some(k)) => C64::new((p * k / (k + 1.0)).sqrt(), 0.0) + complex_gaussian(rng, p / (k + 1.0)),
            _ => complex_gaussian(rng, p),
        };
    }
    h
}

fn has_unit_circle_root(h: &[C64]) -> bool {
    matches!(factorize_by_phase(h), Err(FilterError::UnitCircleRoot(_)))
}

/// Normalized draw of the profile. Realizations with a root on the unit
/// circle are redrawn, up to [`MAX_REDRAWS`] times.
pub fn sample_tdl<R: Rng + ?Sized>(
    pdp: &PowerDelayProfile,
    rng: &mut R,
) -> Result<ChannelRealization, ChannelError> {
    for _ in 0..MAX_REDRAWS {
        let h = normalize_agc(&sample_tdl_raw(pdp, rng))?;
        if h.taps[0] != ZERO && !has_unit_circle_root(&h.taps) {
            return Ok(h);
        }
    }
    Err(ChannelError::RetriesExhausted(MAX_REDRAWS))
}

/// Draws until the realization falls in one of the accepted phase classes.
pub fn sample_tdl_with_class<R: Rng + ?Sized>(
    pdp: &PowerDelayProfile,
    accept: &[PhaseClass],
    max_draws: usize,
    rng: &mut R,
) -> Result<ChannelRealization, ChannelError> {
    for _ in 0..max_draws {
        let h = sample_tdl(pdp, rng)?;
        if accept.contains(&classify_phase(&h)?) {
            return Ok(h);
        }
    }
    Err(ChannelError::RetriesExhausted(max_draws))
}

pub fn classify_phase(h: &ChannelRealization) -> Result<PhaseClass, ChannelError> {
    Ok(factorize_by_phase(&h.taps)?.classification)
}

/// Uniform linear array geometry towards one azimuth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringConfig {
    pub n_elements: usize,
    pub spacing_over_wavelength: f64,
    pub angle: f64,
}

/// `[1, e^{j 2 pi d cos(theta)}, ..., e^{j 2 pi (n-1) d cos(theta)}]`.
pub fn steering_vector(cfg: &SteeringConfig) -> Vec<C64> {
    let step = 2.0 * PI * cfg.spacing_over_wavelength * cfg.angle.cos();
    (0..cfg.n_elements)
        .map(|m| C64::from_polar(1.0, step * m as f64))
        .collect()
}

/// Angle statistics for parametric channels. Angles are measured from the
/// array axis, so broadside is `pi/2`. Each path gets a uniform draw inside the
/// sector plus a Laplacian offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleModel {
    pub sector_deg: (f64, f64),
    pub offset_scale_deg: f64,
    pub spacing_over_wavelength: f64,
}

impl Default for AngleModel {
    fn default() -> Self {
        Self {
            sector_deg: (-60.0, 60.0),
            offset_scale_deg: 5.0,
            spacing_over_wavelength: 0.5,
        }
    }
}

impl AngleModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.sector_deg;
        let base = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let u: f64 = rng.random_range(-0.5..0.5);
        let offset = -self.offset_scale_deg * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        PI / 2.0 + (base + offset).to_radians()
    }
}

/// `H_l = (1/sqrt(N_p)) sum_q c_q^{(l)} a_r(theta_r,q) a_t(theta_t,q)^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricForm {
    /// `N_r x N_p` receive steering vectors.
    pub a_r: DMatrix<C64>,
    /// `N_t x N_p` transmit steering vectors.
    pub a_t: DMatrix<C64>,
    /// `N_p x L` per-path tap gains.
    pub gains: DMatrix<C64>,
}

impl ParametricForm {
    pub fn tap_matrix(&self, l: usize) -> DMatrix<C64> {
        let np = self.gains.nrows();
        let mut d = self.a_r.clone();
        for q in 0..np {
            let g = self.gains[(q, l)];
            for v in d.column_mut(q).iter_mut() {
                *v *= g;
            }
        }
        (d * self.a_t.transpose()).unscale((np as f64).sqrt())
    }
}

/// Per-tap `N_r x N_t` matrices, optionally with their parametric form.
#[derive(Debug, Clone, PartialEq)]
pub struct MimoChannelRealization {
    taps: Vec<DMatrix<C64>>,
    parametric: Option<ParametricForm>,
}

impl MimoChannelRealization {
    pub fn new(taps: Vec<DMatrix<C64>>) -> Result<Self, ChannelError> {
        let Some(first) = taps.first() else {
            return Err(ChannelError::InvalidArgument("no taps".into()));
        };
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 || taps.iter().any(|t| t.shape() != shape) {
            return Err(ChannelError::InvalidArgument("inconsistent tap shapes".into()));
        }
        Ok(Self { taps, parametric: None })
    }

    /// Builds the tap matrices from the parametric form.
    pub fn from_parametric(form: ParametricForm) -> Result<Self, ChannelError> {
        let taps = (0..form.gains.ncols()).map(|l| form.tap_matrix(l)).collect();
        let mut ch = Self::new(taps)?;
        ch.parametric = Some(form);
        ch.check_consistency()?;
        Ok(ch)
    }

    pub fn from_siso(h: &ChannelRealization) -> Self {
        Self {
            taps: h.taps.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
            parametric: None,
        }
    }

    pub fn n_rx(&self) -> usize {
        self.taps[0].nrows()
    }

    pub fn n_tx(&self) -> usize {
        self.taps[0].ncols()
    }

    pub fn n_taps(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self) -> &[DMatrix<C64>] {
        &self.taps
    }

    pub fn parametric(&self) -> Option<&ParametricForm> {
        self.parametric.as_ref()
    }

    /// Impulse response from TX antenna `t` to RX antenna `r`.
    pub fn siso(&self, r: usize, t: usize) -> Vec<C64> {
        self.taps.iter().map(|m| m[(r, t)]).collect()
    }

    pub fn frobenius_energy(&self) -> f64 {
        self.taps.iter().map(|m| m.norm_squared()).sum()
    }

    /// Verifies the tap matrices against the parametric form, if present.
    pub fn check_consistency(&self) -> Result<(), ChannelError> {
        let Some(form) = &self.parametric else {
            return Ok(());
        };
        let scale = self.frobenius_energy().sqrt().max(1.0);
        for (l, h) in self.taps.iter().enumerate() {
            let gap = (form.tap_matrix(l) - h).norm();
            if gap > 1e-9 * scale {
                return Err(ChannelError::InvalidArgument(format!(
                    "tap {l} deviates from its parametric form by {gap:.3e}"
                )));
            }
        }
        Ok(())
    }
}

/// Parametric multi-antenna channel with path angles shared by all taps.
///
/// Path `q` of tap `l` has gain `CN(0, P_l)`, so every path carries an equal
/// share of the tap power after the `1/sqrt(N_p)` scaling. With a K-factor,
/// tap 0 of path 0 additionally carries a LOS term so that the LOS to scatter
/// power ratio of tap 0 equals K. The result is scaled so that
/// `sum_l ||H_l||_F^2 = N_r`.
pub fn sample_parametric_mimo<R: Rng + ?Sized>(
    pdp: &PowerDelayProfile,
    angles: &AngleModel,
    n_t: usize,
    n_r: usize,
    n_path: usize,
    rng: &mut R,
) -> Result<MimoChannelRealization, ChannelError> {
    if n_t == 0 || n_r == 0 || n_path == 0 {
        return Err(ChannelError::InvalidArgument("antenna and path counts must be positive".into()));
    }
    if n_path < n_t.min(n_r) {
        warn!("{n_path} paths cannot give a full-rank {n_r}x{n_t} channel");
    }
    let mut a_r = DMatrix::from_element(n_r, n_path, ZERO);
    let mut a_t = DMatrix::from_element(n_t, n_path, ZERO);
    for q in 0..n_path {
        let theta_r = angles.sample(rng);
        let theta_t = angles.sample(rng);
        let vr = steering_vector(&SteeringConfig {
            n_elements: n_r,
            spacing_over_wavelength: angles.spacing_over_wavelength,
            angle: theta_r,
        });
        let vt = steering_vector(&SteeringConfig {
            n_elements: n_t,
            spacing_over_wavelength: angles.spacing_over_wavelength,
            angle: theta_t,
        });
        for (i, v) in vr.into_iter().enumerate() {
            a_r[(i, q)] = v;
        }
        for (i, v) in vt.into_iter().enumerate() {
            a_t[(i, q)] = v;
        }
    }
    let powers = pdp.dense_powers();
    let mut gains = DMatrix::from_element(n_path, powers.len(), ZERO);
    for (l, &p) in powers.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let (scatter, los) = match (l, pdp.los_k_factor) {
            (0, Some(k)) if k.is_infinite() => (0.0, p),
            (0, Some(k)) => (p / (k + 1.0), p * k / (k + 1.0)),
            _ => (p, 0.0),
        };
        for q in 0..n_path {
            gains[(q, l)] = if scatter > 0.0 { complex_gaussian(rng, scatter) } else { ZERO };
        }
        if los > 0.0 {
            gains[(0, l)] += C64::new((los * n_path as f64).sqrt(), 0.0);
        }
    }
    let raw = ParametricForm { a_r, a_t, gains };
    let energy: f64 = (0..raw.gains.ncols()).map(|l| raw.tap_matrix(l).norm_squared()).sum();
    if energy == 0.0 {
        return Err(ChannelError::ZeroEnergy);
    }
    let scale = (n_r as f64 / energy).sqrt();
    let gains = raw.gains.map(|g| g * scale);
    MimoChannelRealization::from_parametric(ParametricForm { gains, ..raw })
}

/// Received streams and the noise variance actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub samples: Vec<Vec<C64>>,
    pub noise_var: f64,
}

/// Convolves each TX stream with the channel, sums at each RX antenna and
/// adds white Gaussian noise.
///
/// Output streams have the input length (the channel tail is dropped). The
/// noise variance is the mean received signal power over all RX antennas
/// divided by the linear SNR; `+inf` dB adds no noise and `-inf` dB returns
/// noise alone at the signal power (unit power if the signal is silent).
pub fn apply_channel<R: Rng + ?Sized>(
    ch: &MimoChannelRealization,
    x: &[Vec<C64>],
    snr_db: f64,
    rng: &mut R,
) -> Result<Received, ChannelError> {
    if x.len() != ch.n_tx() {
        return Err(ChannelError::InvalidArgument(format!(
            "{} TX streams for a channel with {} TX antennas",
            x.len(),
            ch.n_tx()
        )));
    }
    let len = x.first().map_or(0, |s| s.len());
    if x.iter().any(|s| s.len() != len) {
        return Err(ChannelError::InvalidArgument("TX streams differ in length".into()));
    }
    let mut y = vec![vec![ZERO; len]; ch.n_rx()];
    for (l, h) in ch.taps().iter().enumerate() {
        for (r, yr) in y.iter_mut().enumerate() {
            for (t, xt) in x.iter().enumerate() {
                let g = h[(r, t)];
                if g == ZERO {
                    continue;
                }
                for (o, &v) in yr[l.min(len)..].iter_mut().zip(xt) {
                    *o += g * v;
                }
            }
        }
    }
    let total = (len * ch.n_rx()) as f64;
    let power = if total > 0.0 {
        y.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>() / total
    } else {
        0.0
    };
    let noise_var = if snr_db == f64::INFINITY {
        0.0
    } else if snr_db == f64::NEG_INFINITY {
        for yr in y.iter_mut() {
            yr.fill(ZERO);
        }
        if power > 0.0 {
            power
        } else {
            1.0
        }
    } else {
        power / 10f64.powf(snr_db / 10.0)
    };
    if noise_var > 0.0 {
        for v in y.iter_mut().flatten() {
            *v += complex_gaussian(rng, noise_var);
        }
    }
    Ok(Received { samples: y, noise_var })
}

/// Single-antenna form of [`apply_channel`].
pub fn apply_siso<R: Rng + ?Sized>(
    h: &ChannelRealization,
    x: &[C64],
    snr_db: f64,
    rng: &mut R,
) -> Result<(Vec<C64>, f64), ChannelError> {
    let ch = MimoChannelRealization::from_siso(h);
    let mut rx = apply_channel(&ch, &[x.to_vec()], snr_db, rng)?;
    Ok((rx.samples.pop().unwrap_or_default(), rx.noise_var))
}

/// Identity channel.
pub fn identity_channel() -> ChannelRealization {
    ChannelRealization { taps: vec![ONE] }
}
