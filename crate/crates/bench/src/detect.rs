//! Slot-level symbol detectors.
//!
//! Both detectors take the received time-domain streams of one slot (one
//! vector per RX antenna, possibly followed by a few extra samples) and
//! return hard-decided payload bits in the order [`build_grid`] consumes them.
//!
//! [`build_grid`]: rclab::ofdm::build_grid

use nalgebra::{DMatrix, DVector};
use rclab::channel::MimoChannelRealization;
use rclab::ofdm::{data_positions, ofdm_demodulate, GridLayout, OfdmError, OfdmNumerology, Qam, ResourceGrid, RsMode, SymbolGrid};
use rclab::reservoir::{learn_delay_from_features, predict_from_features, wesn_features, ReservoirError, ReservoirSpec};
use rclab::{C64, ZERO};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Ofdm(#[from] OfdmError),
    #[error(transparent)]
    Reservoir(#[from] ReservoirError),
    #[error("{0}")]
    Input(String),
}

/// Readout training options for the reservoir detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcTraining {
    pub d_max: usize,
    pub ridge: f64,
}

fn stream_matrix(rx: &[Vec<C64>]) -> Result<DMatrix<C64>, DetectError> {
    let t = rx.first().map_or(0, |s| s.len());
    if rx.is_empty() || rx.iter().any(|s| s.len() != t) {
        return Err(DetectError::Input("RX streams must be nonempty and of equal length".into()));
    }
    Ok(DMatrix::from_fn(rx.len(), t, |r, n| rx[r][n]))
}

fn demap_streams(
    n_streams: usize,
    layout: &GridLayout,
    qam: &Qam,
    equalize: impl Fn(usize, usize, usize) -> C64,
) -> Vec<u8> {
    let mut bits = Vec::with_capacity(layout.payload_bits(qam));
    for ant in 0..n_streams {
        let symbols: Vec<C64> = data_positions(layout).map(|(s, k)| equalize(ant, s, k)).collect();
        bits.extend(qam.demap(&symbols));
    }
    bits
}

/// Reservoir-based detection.
///
/// The readout is trained on the RS symbol, whose transmitted waveform
/// (`reference`, one row of `symbol_len` samples per TX antenna) is known, and
/// then applied to the whole slot. The equalized time samples are OFDM
/// demodulated and the data REs hard-demapped.
pub fn rc_detect(
    rx: &[Vec<C64>],
    reference: &[Vec<C64>],
    spec: &ReservoirSpec,
    layout: &GridLayout,
    num: &OfdmNumerology,
    qam: &Qam,
    training: RcTraining,
) -> Result<Vec<u8>, DetectError> {
    let input = stream_matrix(rx)?;
    let slot_len = layout.n_sym * num.symbol_len();
    let train_len = num.symbol_len();
    if input.ncols() < slot_len {
        return Err(DetectError::Input(format!("{} samples for a {slot_len}-sample slot", input.ncols())));
    }
    if reference.len() != layout.n_t || reference.iter().any(|r| r.len() != train_len) {
        return Err(DetectError::Input("reference must hold one RS symbol per TX antenna".into()));
    }
    let target = DMatrix::from_fn(layout.n_t, train_len, |t, n| reference[t][n]);
    let features = wesn_features(spec, &input)?;
    let train = features.columns(0, train_len).into_owned();
    let fit = learn_delay_from_features(&train, &target, 0, training.d_max, training.ridge)?;
    let out = predict_from_features(&fit.readout, &features)?;
    let grids = (0..layout.n_t)
        .map(|t| {
            let s: Vec<C64> = out.row(t).iter().take(slot_len).copied().collect();
            ofdm_demodulate(&s, num, layout.n_sym)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(demap_streams(grids.len(), layout, qam, |ant, s, k| grids[ant].get(s, k)))
}

/// `r(d) = sum_l P_l e^{-j 2 pi l d / n_sc}` normalized to `r(0) = power`.
pub fn frequency_correlation(tap_powers: &[f64], n_sc: usize, power: f64) -> Vec<C64> {
    let total: f64 = tap_powers.iter().sum();
    (0..n_sc)
        .map(|d| {
            tap_powers
                .iter()
                .enumerate()
                .map(|(l, &p)| {
                    C64::from_polar(p, -2.0 * std::f64::consts::PI * (l * d % n_sc) as f64 / n_sc as f64)
                })
                .sum::<C64>()
                * (power / total)
        })
        .collect()
}

/// Per-subcarrier channel matrices `H[k]` (N_r x N_t) of a tapped channel.
pub fn channel_frequency_response(ch: &MimoChannelRealization, n_sc: usize) -> Vec<DMatrix<C64>> {
    (0..n_sc)
        .map(|k| {
            let mut h = DMatrix::from_element(ch.n_rx(), ch.n_tx(), ZERO);
            for (l, tap) in ch.taps().iter().enumerate() {
                let w = C64::from_polar(1.0, -2.0 * std::f64::consts::PI * (k * l % n_sc) as f64 / n_sc as f64);
                h += tap * w;
            }
            h
        })
        .collect()
}

/// Channel knowledge and statistics used by the LMMSE detector.
#[derive(Debug, Clone)]
pub struct LmmseSetup<'a> {
    /// Frequency correlation `r(d)` of one TX-RX link, see [`frequency_correlation`].
    pub correlation: Vec<C64>,
    /// Extra noise assumed by the interpolator, in dB.
    pub backoff_db: f64,
    /// Uses the true channel instead of estimates when set.
    pub perfect_csi: Option<&'a MimoChannelRealization>,
}

// Least-squares estimates on each antenna's comb, interpolated to all
// subcarriers with one smoothing matrix per comb.
fn estimate_channel(
    grids: &[SymbolGrid],
    rs: &ResourceGrid,
    noise_var: f64,
    setup: &LmmseSetup<'_>,
) -> Result<Vec<DMatrix<C64>>, DetectError> {
    let layout = rs.layout();
    let n_sc = layout.n_sc;
    let n_r = grids.len();
    let mut h = vec![DMatrix::from_element(n_r, layout.n_t, ZERO); n_sc];
    let sigma = noise_var * 10f64.powf(setup.backoff_db / 10.0);
    let r = |a: usize, b: usize| setup.correlation[(a + n_sc - b) % n_sc];
    for t in 0..layout.n_t {
        let pilots = layout.rs_subcarriers(t);
        if pilots.is_empty() {
            return Err(DetectError::Input(format!("antenna {t} has no RS")));
        }
        let np = pilots.len();
        let mut r_pp = DMatrix::from_fn(np, np, |i, j| r(pilots[i], pilots[j]));
        for i in 0..np {
            r_pp[(i, i)] += sigma;
        }
        let r_ap = DMatrix::from_fn(n_sc, np, |k, j| r(k, pilots[j]));
        let chol = r_pp
            .cholesky()
            .ok_or_else(|| DetectError::Input("pilot correlation is not positive definite".into()))?;
        // W = R_ap R_pp^{-1}, obtained from R_pp W^T = R_ap^T (R_pp Hermitian).
        let w = chol.solve(&r_ap.adjoint()).adjoint();
        for (rx, g) in grids.iter().enumerate() {
            let ls = DVector::from_iterator(np, pilots.iter().map(|&k| g.get(0, k) / rs.get(t, 0, k)));
            let est = &w * ls;
            for k in 0..n_sc {
                h[k][(rx, t)] = est[k];
            }
        }
    }
    Ok(h)
}

/// LMMSE detection with estimated or perfect channel knowledge.
///
/// `rs` supplies the transmitted RS values; only its RS REs are read. The
/// grid must use antenna-orthogonal combs. Each data RE is equalized by
/// `(H^H H + s I)^{-1} H^H y` followed by per-stream bias removal.
pub fn lmmse_detect(
    rx: &[Vec<C64>],
    rs: &ResourceGrid,
    num: &OfdmNumerology,
    qam: &Qam,
    noise_var: f64,
    setup: &LmmseSetup<'_>,
) -> Result<Vec<u8>, DetectError> {
    let layout = *rs.layout();
    let slot_len = layout.n_sym * num.symbol_len();
    let grids = rx
        .iter()
        .map(|s| {
            if s.len() < slot_len {
                return Err(DetectError::Input(format!("{} samples for a {slot_len}-sample slot", s.len())));
            }
            Ok(ofdm_demodulate(&s[..slot_len], num, layout.n_sym)?)
        })
        .collect::<Result<Vec<_>, DetectError>>()?;
    if grids.is_empty() {
        return Err(DetectError::Input("no RX streams".into()));
    }
    let h = match setup.perfect_csi {
        Some(ch) => {
            if ch.n_rx() != grids.len() || ch.n_tx() != layout.n_t {
                return Err(DetectError::Input("channel shape does not match the streams".into()));
            }
            channel_frequency_response(ch, layout.n_sc)
        }
        None => {
            if layout.mode != RsMode::Conventional {
                return Err(DetectError::Input("channel estimation needs antenna-orthogonal RS".into()));
            }
            estimate_channel(&grids, rs, noise_var, setup)?
        }
    };
    let n_t = layout.n_t;
    let filters: Vec<DMatrix<C64>> = h
        .iter()
        .map(|hk| {
            let mut gram = hk.adjoint() * hk;
            for i in 0..n_t {
                gram[(i, i)] += C64::new(noise_var, 0.0);
            }
            let g = gram
                .clone()
                .lu()
                .solve(&hk.adjoint())
                .unwrap_or_else(|| DMatrix::from_element(n_t, hk.nrows(), ZERO));
            let bias = &g * hk;
            let mut g = g;
            for t in 0..n_t {
                let b = bias[(t, t)];
                if b.norm() > 1e-12 {
                    let mut row = g.row_mut(t);
                    row /= b;
                }
            }
            g
        })
        .collect();
    let n_r = grids.len();
    Ok(demap_streams(n_t, &layout, qam, |ant, s, k| {
        let g = &filters[k];
        (0..n_r).map(|r| g[(ant, r)] * grids[r].get(s, k)).sum()
    }))
}
