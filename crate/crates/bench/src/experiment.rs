//! BER Monte Carlo over slots, SNR points and detectors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use rclab::channel::{
    apply_channel, sample_parametric_mimo, sample_tdl, sample_tdl_with_class, AngleModel, ChannelError,
    MimoChannelRealization, PowerDelayProfile,
};
use rclab::filters::PhaseClass;
use rclab::ofdm::{build_grid, ofdm_modulate, GridLayout, OfdmError, OfdmNumerology, Qam, RsMode, SYMBOLS_PER_SLOT};
use rclab::reservoir::{random_reservoir, Activation, RecurrentWeights, ReservoirError, ReservoirSpec};
use rclab::C64;
use rclab::rng::{derive_seed, stream};
use rclab::weight_config::{
    assemble_mimo, configure_frequency_domain, configure_time_domain, ConfigError, FrequencyDomainParams, MimoMode,
    PhasePolicy, TimeDomainParams,
};
use serde::Deserialize;
use thiserror::Error;

use crate::detect::{frequency_correlation, lmmse_detect, rc_detect, DetectError, LmmseSetup, RcTraining};

const CDL_D: &str = include_str!("../../../data/cdl_d.pdp");
const CDL_E: &str = include_str!("../../../data/cdl_e.pdp");

// Stream keys.
const KEY_CHANNEL: u64 = 1;
const KEY_BITS: u64 = 2;
const KEY_RS: u64 = 3;
const KEY_NOISE: u64 = 4;
const KEY_CONFIG_TD: u64 = 5;
const KEY_CONFIG_FD: u64 = 6;
const KEY_RANDOM: u64 = 7;
const KEY_VANILLA: u64 = 8;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Ofdm(#[from] OfdmError),
    #[error(transparent)]
    Reservoir(#[from] ReservoirError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
pub enum DetectorKind {
    #[serde(rename = "RC-TD")]
    RcTd,
    #[serde(rename = "RC-FD")]
    RcFd,
    #[serde(rename = "RC-Random")]
    RcRandom,
    #[serde(rename = "Vanilla-ESN")]
    VanillaEsn,
    #[serde(rename = "LMMSE")]
    Lmmse,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::RcTd => "RC-TD",
            DetectorKind::RcFd => "RC-FD",
            DetectorKind::RcRandom => "RC-Random",
            DetectorKind::VanillaEsn => "Vanilla-ESN",
            DetectorKind::Lmmse => "LMMSE",
        }
    }

    pub fn rs_mode(&self) -> RsMode {
        match self {
            DetectorKind::Lmmse => RsMode::Conventional,
            _ => RsMode::Learning,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    Siso,
    Mimo,
}

/// Which SISO realizations are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseFilter {
    Any,
    Mp,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationName {
    Linear,
    Tanh,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Linear => Activation::Linear,
            ActivationName::Tanh => Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfdmSection {
    pub n_sc: usize,
    pub n_cp: usize,
    #[serde(default = "default_qam")]
    pub qam: usize,
    #[serde(default = "default_rs_spacing")]
    pub rs_spacing: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    /// `cdl-d`, `cdl-e` or a PDP file path (relative to the config file).
    pub pdp: String,
    #[serde(default = "default_mode")]
    pub mode: ChannelMode,
    #[serde(default = "one")]
    pub n_t: usize,
    #[serde(default = "one")]
    pub n_r: usize,
    #[serde(default = "default_n_path")]
    pub n_path: usize,
    #[serde(default = "default_phase")]
    pub phase: PhaseFilter,
    #[serde(default = "default_sector")]
    pub sector_deg: (f64, f64),
    #[serde(default = "default_offset")]
    pub offset_scale_deg: f64,
    #[serde(default = "default_spacing")]
    pub spacing_over_wavelength: f64,
    /// Overrides the LOS K-factor of the profile; `-inf` removes the LOS component.
    #[serde(default)]
    pub k_factor_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RcSection {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_order")]
    pub l_f: usize,
    #[serde(default = "default_order")]
    pub l_rp: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Neurons of the random reservoirs; defaults to the configured count.
    pub n_neurons: Option<usize>,
    #[serde(default = "default_rho")]
    pub spectral_radius: f64,
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    #[serde(default)]
    pub ridge: f64,
    #[serde(default = "default_d_max")]
    pub d_max: usize,
    #[serde(default = "default_activation")]
    pub activation: ActivationName,
    /// Common factor applied to every input weight.
    #[serde(default = "unit")]
    pub input_scale: f64,
    /// Rescale each neuron of a diagonal reservoir so its linear state RMS under
    /// unit-power white input equals this value. Dense reservoirs are left as drawn.
    #[serde(default)]
    pub state_rms: Option<f64>,
    #[serde(default = "default_n_obs")]
    pub n_obs: usize,
    #[serde(default = "default_ir_len")]
    pub ir_len: usize,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
}

impl Default for RcSection {
    fn default() -> Self {
        toml::from_str("").expect("all RC fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmmseSection {
    #[serde(default)]
    pub perfect_csi: bool,
    #[serde(default = "default_backoff")]
    pub backoff_db: f64,
}

impl Default for LmmseSection {
    fn default() -> Self {
        toml::from_str("").expect("all LMMSE fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub detectors: Vec<DetectorKind>,
    pub snr_db: Vec<f64>,
    pub n_slots: usize,
    pub seed: u64,
}

/// Experiment description, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub ofdm: OfdmSection,
    pub channel: ChannelSection,
    #[serde(default)]
    pub rc: RcSection,
    #[serde(default)]
    pub lmmse: LmmseSection,
    /// Directory that relative PDP paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_qam() -> usize {
    16
}
fn default_rs_spacing() -> usize {
    4
}
fn default_mode() -> ChannelMode {
    ChannelMode::Siso
}
fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn default_n_path() -> usize {
    20
}
fn default_phase() -> PhaseFilter {
    PhaseFilter::Any
}
fn default_sector() -> (f64, f64) {
    AngleModel::default().sector_deg
}
fn default_offset() -> f64 {
    AngleModel::default().offset_scale_deg
}
fn default_spacing() -> f64 {
    AngleModel::default().spacing_over_wavelength
}
fn default_m() -> usize {
    5
}
fn default_order() -> usize {
    7
}
fn default_window() -> usize {
    5
}
fn default_rho() -> f64 {
    0.4
}
fn default_sparsity() -> f64 {
    0.6
}
fn default_d_max() -> usize {
    10
}
fn default_activation() -> ActivationName {
    ActivationName::Tanh
}
fn default_n_obs() -> usize {
    1000
}
fn default_ir_len() -> usize {
    128
}
fn default_grid() -> usize {
    rclab::weight_config::DEFAULT_GRID_SIZE
}
fn default_backoff() -> f64 {
    6.0
}

/// Resolves `cdl-d` / `cdl-e` to the bundled profiles, anything else to a file.
pub fn load_pdp(name: &str, base_dir: &Path) -> Result<PowerDelayProfile, ExperimentError> {
    match name.to_ascii_lowercase().as_str() {
        "cdl-d" => Ok(PowerDelayProfile::parse(CDL_D)?),
        "cdl-e" => Ok(PowerDelayProfile::parse(CDL_E)?),
        _ => {
            let path = base_dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|source| ExperimentError::Io { path, source })?;
            Ok(PowerDelayProfile::parse(&text)?)
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn n_t(&self) -> usize {
        match self.channel.mode {
            ChannelMode::Siso => 1,
            ChannelMode::Mimo => self.channel.n_t,
        }
    }

    pub fn n_r(&self) -> usize {
        match self.channel.mode {
            ChannelMode::Siso => 1,
            ChannelMode::Mimo => self.channel.n_r,
        }
    }

    /// The configured profile with the K-factor override applied.
    pub fn pdp(&self) -> Result<PowerDelayProfile, ExperimentError> {
        let pdp = load_pdp(&self.channel.pdp, &self.base_dir)?;
        let Some(k_db) = self.channel.k_factor_db else {
            return Ok(pdp);
        };
        let k = 10f64.powf(k_db / 10.0);
        Ok(PowerDelayProfile::new(pdp.tap_delays().to_vec(), pdp.tap_powers().to_vec(), Some(k))?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.into()));
        let e = &self.experiment;
        if e.snr_db.is_empty() {
            return bad("snr_db must not be empty");
        }
        if e.snr_db.iter().any(|s| s.is_nan()) {
            return bad("snr_db contains NaN");
        }
        if e.detectors.is_empty() {
            return bad("no detectors listed");
        }
        let mut seen = std::collections::HashSet::new();
        if !e.detectors.iter().all(|d| seen.insert(*d)) {
            return bad("detectors are listed twice");
        }
        OfdmNumerology::new(self.ofdm.n_sc, self.ofdm.n_cp)?;
        Qam::new(self.ofdm.qam)?;
        if self.channel.mode == ChannelMode::Mimo {
            if self.channel.n_t == 0 || self.channel.n_r == 0 || self.channel.n_path == 0 {
                return bad("antenna and path counts must be positive");
            }
            if self.channel.phase != PhaseFilter::Any {
                return bad("phase filtering applies to SISO channels only");
            }
        }
        for mode in [RsMode::Learning, RsMode::Conventional] {
            GridLayout::new(self.ofdm.n_sc, SYMBOLS_PER_SLOT, self.n_t(), self.ofdm.rs_spacing, mode)?;
        }
        let rc = &self.rc;
        if rc.m == 0 || rc.l_f == 0 || rc.l_rp == 0 || rc.ir_len == 0 || rc.n_obs == 0 {
            return bad("RC sizes must be positive");
        }
        if rc.ridge < 0.0 {
            return bad("ridge must be nonnegative");
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(rc.input_scale) || !rc.state_rms.is_none_or(positive) {
            return bad("input_scale and state_rms must be positive");
        }
        if self.channel.k_factor_db.is_some_and(f64::is_nan) {
            return bad("k_factor_db is NaN");
        }
        self.pdp()?;
        Ok(())
    }
}

/// One CSV row of a BER sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BerRecord {
    pub detector: String,
    pub snr_db: f64,
    pub n_bits: u64,
    pub n_errors: u64,
    pub ber: f64,
    pub seed: u64,
}

pub const BER_CSV_HEADER: &str = "detector,snr_db,n_bits,n_errors,ber,seed";

pub fn records_to_csv(records: &[BerRecord]) -> String {
    let mut out = format!("{BER_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.detector, r.snr_db, r.n_bits, r.n_errors, r.ber, r.seed);
    }
    out
}

fn with_mimo(spec: ReservoirSpec, n_r: usize) -> Result<ReservoirSpec, ExperimentError> {
    if n_r == 1 {
        return Ok(spec);
    }
    Ok(assemble_mimo(&[spec], n_r, MimoMode::ParametricShared)?)
}

/// Builds the reservoir of an RC detector. Configured reservoirs use the
/// SISO statistics of the profile and are replicated per RX antenna.
pub fn build_reservoir(
    kind: DetectorKind,
    cfg: &ExperimentConfig,
    pdp: &PowerDelayProfile,
    seed: u64,
) -> Result<ReservoirSpec, ExperimentError> {
    let rc = &cfg.rc;
    let act: Activation = rc.activation.into();
    let n_r = cfg.n_r();
    let default_neurons = |order: usize| rc.m * order * n_r;
    let spec = match kind {
        DetectorKind::RcTd => {
            let params = TimeDomainParams {
                n: rc.ir_len,
                n_obs: rc.n_obs,
                m: rc.m,
                l_f: rc.l_f,
                window: rc.window,
                policy: PhasePolicy::MpFactor,
            };
            let c = configure_time_domain(pdp, &params, derive_seed(seed, &[KEY_CONFIG_TD]))?;
            with_mimo(c.spec.with_activation(act), n_r)?
        }
        DetectorKind::RcFd => {
            let params = FrequencyDomainParams {
                n: rc.ir_len,
                n_obs: rc.n_obs,
                m: rc.m,
                l_rp: rc.l_rp,
                window: rc.window,
                grid_size: rc.grid_size,
                policy: PhasePolicy::MpFactor,
            };
            let c = configure_frequency_domain(pdp, &params, derive_seed(seed, &[KEY_CONFIG_FD]))?;
            with_mimo(c.spec.with_activation(act), n_r)?
        }
        DetectorKind::RcRandom | DetectorKind::VanillaEsn => {
            let configured = if cfg.experiment.detectors.contains(&DetectorKind::RcFd)
                && !cfg.experiment.detectors.contains(&DetectorKind::RcTd)
            {
                default_neurons(rc.l_rp)
            } else {
                default_neurons(rc.l_f)
            };
            let n = rc.n_neurons.unwrap_or(configured);
            let (key, window) = match kind {
                DetectorKind::RcRandom => (KEY_RANDOM, rc.window),
                _ => (KEY_VANILLA, 0),
            };
            let mut rng = stream(seed, &[key]);
            random_reservoir(n, rc.spectral_radius, rc.sparsity, n_r, window, &mut rng)?.with_activation(act)
        }
        DetectorKind::Lmmse => return Err(ExperimentError::Invalid("LMMSE has no reservoir".into())),
    };
    let mut w_in = spec.w_in() * C64::new(rc.input_scale, 0.0);
    if let (Some(target), RecurrentWeights::Diagonal(poles)) = (rc.state_rms, spec.w_res()) {
        normalize_state_rms(&mut w_in, poles, target);
    }
    Ok(ReservoirSpec::new(
        w_in,
        spec.w_res().clone(),
        spec.activation(),
        spec.window(),
        spec.has_skip(),
    )?)
}

/// Per-neuron gain so that `x_i[n] = p_i x_i[n-1] + w_i u[n]` has RMS `target`
/// for white unit-power `u`. Neurons with no input are left alone.
fn normalize_state_rms(w_in: &mut DMatrix<C64>, poles: &[C64], target: f64) {
    for (i, p) in poles.iter().enumerate() {
        let mut row = w_in.row_mut(i);
        let rms = (row.norm_squared() / (1.0 - p.norm_sqr())).sqrt();
        if rms > 0.0 {
            row *= C64::new(target / rms, 0.0);
        }
    }
}

fn draw_channel(
    cfg: &ExperimentConfig,
    pdp: &PowerDelayProfile,
    seed: u64,
    slot: u64,
) -> Result<MimoChannelRealization, ExperimentError> {
    let mut rng = stream(seed, &[KEY_CHANNEL, slot]);
    let ch = &cfg.channel;
    Ok(match ch.mode {
        ChannelMode::Siso => {
            let h = match ch.phase {
                PhaseFilter::Any => sample_tdl(pdp, &mut rng)?,
                PhaseFilter::Mp => sample_tdl_with_class(pdp, &[PhaseClass::StrictlyMP], 10_000, &mut rng)?,
                PhaseFilter::Mixed => sample_tdl_with_class(pdp, &[PhaseClass::Mixed], 10_000, &mut rng)?,
            };
            MimoChannelRealization::from_siso(&h)
        }
        ChannelMode::Mimo => {
            let angles = AngleModel {
                sector_deg: ch.sector_deg,
                offset_scale_deg: ch.offset_scale_deg,
                spacing_over_wavelength: ch.spacing_over_wavelength,
            };
            sample_parametric_mimo(pdp, &angles, ch.n_t, ch.n_r, ch.n_path, &mut rng)?
        }
    })
}

fn count_errors(a: &[u8], b: &[u8]) -> u64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u64
}

struct Prepared {
    kinds: Vec<DetectorKind>,
    specs: Vec<Option<ReservoirSpec>>,
    pdp: PowerDelayProfile,
    correlation: Vec<C64>,
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared, ExperimentError> {
    let pdp = cfg.pdp()?;
    let kinds = cfg.experiment.detectors.clone();
    let specs = kinds
        .iter()
        .map(|&k| match k {
            DetectorKind::Lmmse => Ok(None),
            _ => build_reservoir(k, cfg, &pdp, seed).map(Some),
        })
        .collect::<Result<Vec<_>, _>>()?;
    // Per-link power under Frobenius AGC: sum ||H_l||^2 = N_r spread over N_r N_t links.
    let link_power = 1.0 / cfg.n_t() as f64;
    let correlation = frequency_correlation(&pdp.dense_powers(), cfg.ofdm.n_sc, link_power);
    Ok(Prepared {
        kinds,
        specs,
        pdp,
        correlation,
    })
}

// Error counts of every (detector, snr) pair for one slot.
fn run_slot(cfg: &ExperimentConfig, prep: &Prepared, seed: u64, slot: u64) -> Result<Vec<(u64, u64)>, ExperimentError> {
    let num = OfdmNumerology::new(cfg.ofdm.n_sc, cfg.ofdm.n_cp)?;
    let qam = Qam::new(cfg.ofdm.qam)?;
    let n_t = cfg.n_t();
    let ch = draw_channel(cfg, &prep.pdp, seed, slot)?;
    let pad = cfg.rc.d_max + ch.n_taps();
    let mut out = vec![(0u64, 0u64); prep.kinds.len() * cfg.experiment.snr_db.len()];
    for mode in [RsMode::Learning, RsMode::Conventional] {
        let members: Vec<usize> = (0..prep.kinds.len()).filter(|&i| prep.kinds[i].rs_mode() == mode).collect();
        if members.is_empty() {
            continue;
        }
        let layout = GridLayout::new(num.n_sc, SYMBOLS_PER_SLOT, n_t, cfg.ofdm.rs_spacing, mode)?;
        let mut bit_rng = stream(seed, &[KEY_BITS, slot]);
        let payload: Vec<u8> = (0..layout.payload_bits(&qam)).map(|_| bit_rng.random_range(0..2u8)).collect();
        let mode_key = mode as u64;
        let grid = build_grid(layout, &qam, &payload, &mut stream(seed, &[KEY_RS, slot, mode_key]))?;
        let mut tx = ofdm_modulate(&grid, &num)?;
        let reference: Vec<Vec<C64>> = tx.iter().map(|s| s[..num.symbol_len()].to_vec()).collect();
        for s in tx.iter_mut() {
            s.resize(s.len() + pad, rclab::ZERO);
        }
        for (si, &snr) in cfg.experiment.snr_db.iter().enumerate() {
            let mut noise = stream(seed, &[KEY_NOISE, slot, si as u64, mode_key]);
            let rx = apply_channel(&ch, &tx, snr, &mut noise)?;
            for &d in &members {
                let bits = match &prep.specs[d] {
                    Some(spec) => rc_detect(
                        &rx.samples,
                        &reference,
                        spec,
                        &layout,
                        &num,
                        &qam,
                        RcTraining {
                            d_max: cfg.rc.d_max,
                            ridge: cfg.rc.ridge,
                        },
                    )?,
                    None => {
                        let setup = LmmseSetup {
                            correlation: prep.correlation.clone(),
                            backoff_db: cfg.lmmse.backoff_db,
                            perfect_csi: cfg.lmmse.perfect_csi.then_some(&ch),
                        };
                        lmmse_detect(&rx.samples, &grid, &num, &qam, rx.noise_var, &setup)?
                    }
                };
                let slot_out = &mut out[d * cfg.experiment.snr_db.len() + si];
                slot_out.0 += payload.len() as u64;
                slot_out.1 += count_errors(&bits, &payload);
            }
        }
    }
    Ok(out)
}

/// Runs the sweep. Slots run in parallel on the current rayon pool; every
/// random draw comes from a stream keyed by `(seed, slot, ...)`, so the result
/// does not depend on the number of workers.
pub fn run_ber_experiment(cfg: &ExperimentConfig) -> Result<Vec<BerRecord>, ExperimentError> {
    cfg.validate()?;
    let seed = cfg.experiment.seed;
    if cfg.experiment.n_slots == 0 {
        return Ok(Vec::new());
    }
    let prep = prepare(cfg, seed)?;
    let per_slot = (0..cfg.experiment.n_slots as u64)
        .into_par_iter()
        .map(|slot| run_slot(cfg, &prep, seed, slot))
        .collect::<Result<Vec<_>, _>>()?;
    let n_snr = cfg.experiment.snr_db.len();
    let mut records = Vec::with_capacity(prep.kinds.len() * n_snr);
    for (d, kind) in prep.kinds.iter().enumerate() {
        for (si, &snr) in cfg.experiment.snr_db.iter().enumerate() {
            let (n_bits, n_errors) = per_slot
                .iter()
                .fold((0, 0), |acc, s| (acc.0 + s[d * n_snr + si].0, acc.1 + s[d * n_snr + si].1));
            records.push(BerRecord {
                detector: kind.name().to_string(),
                snr_db: snr,
                n_bits,
                n_errors,
                ber: if n_bits == 0 { 0.0 } else { n_errors as f64 / n_bits as f64 },
                seed,
            });
        }
    }
    Ok(records)
}
