//! Echo state network dynamics and readout training.
//!
//! A reservoir is a fixed recurrent layer `x[n] = act(W_res x[n-1] + W_in u[n])`.
//! Its states, optionally followed by a tap-delay window of the raw input, form
//! the features of a linear readout trained by least squares.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Schur};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::signal::{convolve_truncated, vandermonde, LeastSquares, SignalError, C64, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReservoirError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("spec dump line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    /// `tanh` applied to real and imaginary parts separately.
    Tanh,
}

impl Activation {
    fn apply(&self, v: C64) -> C64 {
        match self {
            Activation::Linear => v,
            Activation::Tanh => C64::new(v.re.tanh(), v.im.tanh()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecurrentWeights {
    /// Parallel first-order neurons.
    Diagonal(Vec<C64>),
    Dense(DMatrix<C64>),
}

impl RecurrentWeights {
    pub fn size(&self) -> usize {
        match self {
            RecurrentWeights::Diagonal(p) => p.len(),
            RecurrentWeights::Dense(m) => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        match self {
            RecurrentWeights::Diagonal(p) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(p)),
            RecurrentWeights::Dense(m) => m.clone(),
        }
    }

    pub fn spectral_radius(&self) -> f64 {
        match self {
            RecurrentWeights::Diagonal(p) => p.iter().map(|v| v.norm()).fold(0.0, f64::max),
            RecurrentWeights::Dense(m) => spectral_radius(m),
        }
    }
}

pub fn spectral_radius(m: &DMatrix<C64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    Schur::new(m.clone())
        .eigenvalues()
        .map(|ev| ev.iter().map(|v| v.norm()).fold(0.0, f64::max))
        .unwrap_or(0.0)
}

/// Untrained network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirSpec {
    w_in: DMatrix<C64>,
    w_res: RecurrentWeights,
    activation: Activation,
    window: usize,
    skip: bool,
}

impl ReservoirSpec {
    /// `w_in` is `N_n x d_in`. `skip` adds the current input as extra
    /// features when `window == 0`; it is redundant otherwise.
    pub fn new(
        w_in: DMatrix<C64>,
        w_res: RecurrentWeights,
        activation: Activation,
        window: usize,
        skip: bool,
    ) -> Result<Self, ReservoirError> {
        if w_in.nrows() != w_res.size() {
            return Err(ReservoirError::Dimension(format!(
                "W_in has {} rows but the reservoir has {} neurons",
                w_in.nrows(),
                w_res.size()
            )));
        }
        if let RecurrentWeights::Dense(m) = &w_res {
            if !m.is_square() {
                return Err(ReservoirError::Dimension("W_res must be square".into()));
            }
        }
        if w_in.ncols() == 0 {
            return Err(ReservoirError::Dimension("at least one input is required".into()));
        }
        Ok(Self {
            w_in,
            w_res,
            activation,
            window,
            skip: skip && window == 0,
        })
    }

    /// Single-input reservoir of parallel neurons.
    pub fn diagonal(poles: Vec<C64>, input_weights: Vec<C64>, window: usize) -> Result<Self, ReservoirError> {
        let w_in = DMatrix::from_column_slice(input_weights.len(), 1, &input_weights);
        Self::new(w_in, RecurrentWeights::Diagonal(poles), Activation::Linear, window, false)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self.skip &= window == 0;
        self
    }

    pub fn with_skip(mut self, skip: bool) -> Self {
        self.skip = skip && self.window == 0;
        self
    }

    pub fn n_neurons(&self) -> usize {
        self.w_res.size()
    }

    pub fn d_in(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn has_skip(&self) -> bool {
        self.skip
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn w_in(&self) -> &DMatrix<C64> {
        &self.w_in
    }

    pub fn w_res(&self) -> &RecurrentWeights {
        &self.w_res
    }

    pub fn poles(&self) -> Option<&[C64]> {
        match &self.w_res {
            RecurrentWeights::Diagonal(p) => Some(p),
            RecurrentWeights::Dense(_) => None,
        }
    }

    /// Feature rows: neurons, then `d_in` rows per window lag (or one skip block).
    pub fn feature_len(&self) -> usize {
        let taps = if self.skip { 1 } else { self.window };
        self.n_neurons() + self.d_in() * taps
    }
}

/// State trajectory from a zero initial state; column `n` is the state at time `n`.
pub fn run_states(spec: &ReservoirSpec, input: &DMatrix<C64>) -> Result<DMatrix<C64>, ReservoirError> {
    if input.nrows() != spec.d_in() {
        return Err(ReservoirError::Dimension(format!(
            "input has {} rows, spec expects {}",
            input.nrows(),
            spec.d_in()
        )));
    }
    let nn = spec.n_neurons();
    let t = input.ncols();
    let drive = &spec.w_in * input;
    let mut states = DMatrix::from_element(nn, t, ZERO);
    let act = spec.activation;
    match &spec.w_res {
        RecurrentWeights::Diagonal(p) => {
            let mut x = vec![ZERO; nn];
            for n in 0..t {
                for (k, xk) in x.iter_mut().enumerate() {
                    *xk = act.apply(p[k] * *xk + drive[(k, n)]);
                    states[(k, n)] = *xk;
                }
            }
        }
        RecurrentWeights::Dense(w) => {
            let mut x = nalgebra::DVector::from_element(nn, ZERO);
            for n in 0..t {
                let pre = w * &x + drive.column(n);
                x = pre.map(|v| act.apply(v));
                states.set_column(n, &x);
            }
        }
    }
    Ok(states)
}

/// States of unit-input-weight linear neurons in closed form: row `k` is the
/// first `N` samples of `y` filtered by `1 / (1 - p_k z^{-1})`.
pub fn block_states(poles: &[C64], y: &[C64]) -> DMatrix<C64> {
    let n = y.len();
    let psi = vandermonde(poles, n);
    let mut s = DMatrix::from_element(poles.len(), n, ZERO);
    for k in 0..poles.len() {
        let col: Vec<C64> = psi.column(k).iter().copied().collect();
        for (i, v) in convolve_truncated(y, &col, n).into_iter().enumerate() {
            s[(k, i)] = v;
        }
    }
    s
}

/// States stacked over the windowed input `u[n], u[n-1], ..., u[n-N_w+1]`
/// (zero history before the first sample).
pub fn wesn_features(spec: &ReservoirSpec, input: &DMatrix<C64>) -> Result<DMatrix<C64>, ReservoirError> {
    let states = run_states(spec, input)?;
    let nn = spec.n_neurons();
    let d = spec.d_in();
    let t = input.ncols();
    let lags = if spec.skip { 1 } else { spec.window };
    let mut f = DMatrix::from_element(spec.feature_len(), t, ZERO);
    f.view_mut((0, 0), (nn, t)).copy_from(&states);
    for lag in 0..lags {
        for n in lag..t {
            for i in 0..d {
                f[(nn + lag * d + i, n)] = input[(i, n - lag)];
            }
        }
    }
    Ok(f)
}

/// Trained output weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub w_out: DMatrix<C64>,
    pub delay: usize,
    /// `||W_out F - O_D||_F^2` on the training data.
    pub residual: f64,
}

/// `target` shifted right by `d` samples with zeros in front.
pub fn delayed(target: &DMatrix<C64>, d: usize) -> DMatrix<C64> {
    let (r, t) = target.shape();
    let mut out = DMatrix::from_element(r, t, ZERO);
    if d < t {
        out.view_mut((0, d), (r, t - d)).copy_from(&target.view((0, 0), (r, t - d)));
    }
    out
}

/// Least-squares readout against `target` delayed by `delay`.
pub fn train_readout(
    features: &DMatrix<C64>,
    target: &DMatrix<C64>,
    delay: usize,
    ridge: f64,
) -> Result<Readout, ReservoirError> {
    let fit = learn_delay_from_features(features, target, delay, delay, ridge)?;
    Ok(fit.readout)
}

/// Outcome of a delay search.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayFit {
    pub readout: Readout,
    /// Training residual for every candidate delay `0..=D_max`.
    pub residuals: Vec<f64>,
}

/// Fits readouts for delays `d_min..=d_max` from one factorization and keeps
/// the delay with the smallest training residual (ties go to the smaller delay).
pub fn learn_delay_from_features(
    features: &DMatrix<C64>,
    target: &DMatrix<C64>,
    d_min: usize,
    d_max: usize,
    ridge: f64,
) -> Result<DelayFit, ReservoirError> {
    let t = features.ncols();
    if target.ncols() != t {
        return Err(ReservoirError::Dimension(format!(
            "features span {} samples, target {}",
            t,
            target.ncols()
        )));
    }
    if d_min > d_max {
        return Err(ReservoirError::InvalidParameter("d_min exceeds d_max".into()));
    }
    if t <= features.nrows() {
        log::warn!("training on {} samples with {} features", t, features.nrows());
    }
    let d_out = target.nrows();
    let n_cand = d_max - d_min + 1;
    let a = features.transpose();
    let mut rhs = DMatrix::from_element(t, d_out * n_cand, ZERO);
    for (j, d) in (d_min..=d_max).enumerate() {
        let td = delayed(target, d).transpose();
        rhs.view_mut((0, j * d_out), (t, d_out)).copy_from(&td);
    }
    let solver = LeastSquares::new(&a, ridge)?;
    let x = solver.solve(&rhs)?;
    let fitted = &a * &x - &rhs;
    let mut residuals = vec![f64::NAN; d_min];
    for j in 0..n_cand {
        let r: f64 = fitted.columns(j * d_out, d_out).iter().map(|v| v.norm_sqr()).sum();
        residuals.push(r);
    }
    let tie = 1e-10 * target.iter().map(|v| v.norm_sqr()).sum::<f64>();
    let mut best = d_min;
    for d in d_min..=d_max {
        if residuals[d] < residuals[best] - tie {
            best = d;
        }
    }
    let j = best - d_min;
    let w_out = x.columns(j * d_out, d_out).transpose();
    Ok(DelayFit {
        readout: Readout {
            w_out,
            delay: best,
            residual: residuals[best],
        },
        residuals,
    })
}

/// Runs the spec on `train_input` and searches delays `0..=d_max`.
pub fn learn_delay(
    spec: &ReservoirSpec,
    train_input: &DMatrix<C64>,
    train_target: &DMatrix<C64>,
    d_max: usize,
    ridge: f64,
) -> Result<DelayFit, ReservoirError> {
    let f = wesn_features(spec, train_input)?;
    learn_delay_from_features(&f, train_target, 0, d_max, ridge)
}

/// Applies the readout and removes its delay: output `n` is `W_out f[n + D]`,
/// zero where `n + D` runs past the input.
pub fn predict_from_features(readout: &Readout, features: &DMatrix<C64>) -> Result<DMatrix<C64>, ReservoirError> {
    if readout.w_out.ncols() != features.nrows() {
        return Err(ReservoirError::Dimension(format!(
            "readout expects {} features, got {}",
            readout.w_out.ncols(),
            features.nrows()
        )));
    }
    let t = features.ncols();
    let d = readout.delay;
    let mut out = DMatrix::from_element(readout.w_out.nrows(), t, ZERO);
    if d < t {
        let y = &readout.w_out * features.columns(d, t - d);
        out.view_mut((0, 0), (y.nrows(), t - d)).copy_from(&y);
    }
    Ok(out)
}

pub fn predict(spec: &ReservoirSpec, readout: &Readout, input: &DMatrix<C64>) -> Result<DMatrix<C64>, ReservoirError> {
    predict_from_features(readout, &wesn_features(spec, input)?)
}

fn uniform_complex<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    C64::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0))
}

/// Random dense reservoir: complex entries uniform on `[-1, 1]^2`, exactly
/// `round(sparsity * N_n^2)` of them zeroed, rescaled to the spectral radius.
/// Input weights are complex uniform on `[-1, 1]^2`.
pub fn random_reservoir<R: Rng + ?Sized>(
    n_neurons: usize,
    spectral_radius_target: f64,
    sparsity: f64,
    d_in: usize,
    window: usize,
    rng: &mut R,
) -> Result<ReservoirSpec, ReservoirError> {
    if !(spectral_radius_target > 0.0 && spectral_radius_target < 1.0) {
        return Err(ReservoirError::InvalidParameter("spectral radius must lie in (0, 1)".into()));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(ReservoirError::InvalidParameter("sparsity must lie in [0, 1)".into()));
    }
    if n_neurons == 0 || d_in == 0 {
        return Err(ReservoirError::InvalidParameter("sizes must be positive".into()));
    }
    let total = n_neurons * n_neurons;
    let n_zero = (sparsity * total as f64).round() as usize;
    loop {
        let mut w = DMatrix::from_fn(n_neurons, n_neurons, |_, _| uniform_complex(rng));
        let mut idx: Vec<usize> = (0..total).collect();
        idx.shuffle(rng);
        for &i in &idx[..n_zero] {
            w[(i % n_neurons, i / n_neurons)] = ZERO;
        }
        let rho = spectral_radius(&w);
        if rho <= 1e-12 {
            continue;
        }
        w.scale_mut(spectral_radius_target / rho);
        let w_in = DMatrix::from_fn(n_neurons, d_in, |_, _| uniform_complex(rng));
        return ReservoirSpec::new(w_in, RecurrentWeights::Dense(w), Activation::Linear, window, false);
    }
}

/// Text dump of a diagonal reservoir, one neuron per line. For multi-input
/// specs the single nonzero input weight of each neuron is written.
pub fn dump_spec(spec: &ReservoirSpec) -> Result<String, ReservoirError> {
    let poles = spec
        .poles()
        .ok_or_else(|| ReservoirError::InvalidParameter("only diagonal reservoirs can be dumped".into()))?;
    let mut out = String::from("neuron_index,pole_real,pole_imag,w_in_real,w_in_imag\n");
    for (k, p) in poles.iter().enumerate() {
        let row = spec.w_in.row(k);
        let w = row.iter().copied().find(|v| *v != ZERO).unwrap_or(ZERO);
        let _ = writeln!(out, "{k},{:e},{:e},{:e},{:e}", p.re, p.im, w.re, w.im);
    }
    Ok(out)
}

/// Reads a single-input diagonal reservoir back from [`dump_spec`] output.
pub fn parse_spec_dump(text: &str, window: usize) -> Result<ReservoirSpec, ReservoirError> {
    let mut poles = Vec::new();
    let mut weights = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("neuron_index") {
            continue;
        }
        let err = |msg: &str| ReservoirError::Parse {
            line: i + 1,
            msg: msg.into(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        let idx: usize = f[0].parse().map_err(|_| err("bad index"))?;
        if idx != poles.len() {
            return Err(err("neuron indices must be consecutive"));
        }
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| err("bad number"))?;
        poles.push(C64::new(v[0], v[1]));
        weights.push(C64::new(v[2], v[3]));
    }
    ReservoirSpec::diagonal(poles, weights, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::signal::{convolve, ONE};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn row(v: &[C64]) -> DMatrix<C64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    fn impulse(n: usize) -> Vec<C64> {
        let mut v = vec![ZERO; n];
        v[0] = ONE;
        v
    }

    #[test]
    fn single_pole_state_is_geometric() {
        let spec = ReservoirSpec::diagonal(vec![c(0.5, 0.0)], vec![ONE], 0).unwrap();
        let s = run_states(&spec, &row(&impulse(4))).unwrap();
        let expect = [1.0, 0.5, 0.25, 0.125];
        for (n, e) in expect.iter().enumerate() {
            assert!((s[(0, n)] - c(*e, 0.0)).norm() < 1e-15);
        }
        let zero = ReservoirSpec::diagonal(vec![c(0.5, 0.0)], vec![ZERO], 0).unwrap();
        assert!(run_states(&zero, &row(&[ONE, c(2.0, 1.0)])).unwrap().iter().all(|v| *v == ZERO));
    }

    #[test]
    fn tanh_is_split_complex() {
        let spec = ReservoirSpec::diagonal(vec![ZERO], vec![ONE], 0)
            .unwrap()
            .with_activation(Activation::Tanh);
        let s = run_states(&spec, &row(&[c(0.5, -2.0)])).unwrap();
        assert!((s[(0, 0)] - c(0.5f64.tanh(), (-2.0f64).tanh())).norm() < 1e-15);
    }

    #[test]
    fn block_state_examples() {
        let y = vec![c(1.0, 2.0), c(-1.0, 0.5), c(0.3, 0.0)];
        let s = block_states(&[ZERO], &y);
        assert!(s.row(0).iter().zip(&y).all(|(a, b)| a == b));
        let s = block_states(&[c(0.5, 0.5)], &impulse(3));
        assert!((s[(0, 2)] - c(0.5, 0.5).powu(2)).norm() < 1e-15);
    }

    #[test]
    fn window_features_shift_the_input() {
        let spec = ReservoirSpec::diagonal(vec![c(0.3, 0.0)], vec![ONE], 2).unwrap();
        let u = row(&[c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0)]);
        let f = wesn_features(&spec, &u).unwrap();
        assert_eq!(f.nrows(), 3);
        let lag0: Vec<f64> = f.row(1).iter().map(|v| v.re).collect();
        let lag1: Vec<f64> = f.row(2).iter().map(|v| v.re).collect();
        assert_eq!(lag0, vec![1.0, 2.0, 3.0]);
        assert_eq!(lag1, vec![0.0, 1.0, 2.0]);

        let vanilla = spec.clone().with_window(0);
        assert_eq!(wesn_features(&vanilla, &u).unwrap(), run_states(&vanilla, &u).unwrap());

        let n35 = ReservoirSpec::diagonal(vec![ZERO; 35], vec![ONE; 35], 5).unwrap();
        assert_eq!(n35.feature_len(), 40);

        let skip = vanilla.with_skip(true);
        assert_eq!(skip.feature_len(), 2);
    }

    #[test]
    fn readout_fits_target_in_feature_span() {
        let spec = ReservoirSpec::diagonal(vec![c(0.4, 0.1)], vec![ONE], 1).unwrap();
        let mut rng = stream(1, &[]);
        let u = DMatrix::from_fn(1, 50, |_, _| uniform_complex(&mut rng));
        let f = wesn_features(&spec, &u).unwrap();
        let r = train_readout(&f, &u, 0, 0.0).unwrap();
        assert!(r.residual < 1e-20);
        assert!((r.w_out[(0, 1)] - ONE).norm() < 1e-10);
    }

    #[test]
    fn orthogonal_target_gives_zero_readout() {
        let f = DMatrix::from_row_slice(1, 4, &[ONE, ZERO, ZERO, ZERO]);
        let t = DMatrix::from_row_slice(1, 4, &[ZERO, ONE, ZERO, ONE]);
        let r = train_readout(&f, &t, 0, 0.0).unwrap();
        assert!(r.w_out[(0, 0)].norm() < 1e-15);
    }

    #[test]
    fn single_pole_equalizes_minimum_phase_channel() {
        // y = h * x with h = [1, -0.5]; 1/(1 - 0.5 z^{-1}) inverts it exactly.
        let mut rng = stream(2, &[]);
        let x: Vec<C64> = (0..200).map(|_| uniform_complex(&mut rng)).collect();
        let mut y = convolve(&[ONE, c(-0.5, 0.0)], &x);
        y.truncate(x.len());
        let spec = ReservoirSpec::diagonal(vec![c(0.5, 0.0)], vec![ONE], 0).unwrap();
        let fit = learn_delay(&spec, &row(&y), &row(&x), 0, 0.0).unwrap();
        assert!(fit.readout.residual <= 1e-8);
        assert!((fit.readout.w_out[(0, 0)] - ONE).norm() < 1e-8);
        let xhat = predict(&spec, &fit.readout, &row(&y)).unwrap();
        assert!(xhat.iter().zip(&x).all(|(a, b)| (a - b).norm() < 1e-6));
    }

    #[test]
    fn delay_learning_examples() {
        let mut rng = stream(3, &[]);
        let x: Vec<C64> = (0..300).map(|_| uniform_complex(&mut rng)).collect();
        let spec = ReservoirSpec::diagonal(vec![c(0.2, 0.0), c(-0.3, 0.2)], vec![ONE, ONE], 3).unwrap();

        let fit = learn_delay(&spec, &row(&x), &row(&x), 5, 0.0).unwrap();
        assert_eq!(fit.readout.delay, 0);

        let mut y = vec![ZERO, ZERO];
        y.extend_from_slice(&x[..x.len() - 2]);
        let fit = learn_delay(&spec, &row(&y), &row(&x), 5, 0.0).unwrap();
        assert_eq!(fit.readout.delay, 2);
        assert!(fit.readout.residual < 1e-18);

        // Mixed-phase channel: causal inversion needs delay.
        let h = [ONE, c(-2.5, 0.0), ONE];
        let mut y = convolve(&h, &x);
        y.truncate(x.len());
        let spec = ReservoirSpec::diagonal(vec![c(0.5, 0.0)], vec![ONE], 8).unwrap();
        let fit = learn_delay(&spec, &row(&y), &row(&x), 12, 0.0).unwrap();
        assert!(fit.readout.delay > 0);
        assert!(fit.readout.residual < fit.residuals[0]);
    }

    #[test]
    fn random_reservoir_properties() {
        let spec = random_reservoir(36, 0.4, 0.6, 1, 0, &mut stream(4, &[])).unwrap();
        let RecurrentWeights::Dense(w) = spec.w_res() else { panic!("dense expected") };
        assert!((spectral_radius(w) - 0.4).abs() < 1e-6);
        let zeros = w.iter().filter(|v| **v == ZERO).count();
        assert_eq!(zeros, (0.6f64 * 36.0 * 36.0).round() as usize);
        let again = random_reservoir(36, 0.4, 0.6, 1, 0, &mut stream(4, &[])).unwrap();
        assert_eq!(spec, again);
        assert!(random_reservoir(4, 1.2, 0.1, 1, 0, &mut stream(4, &[])).is_err());
    }

    #[test]
    fn zero_input_predicts_zero() {
        let spec = random_reservoir(5, 0.5, 0.2, 1, 2, &mut stream(5, &[])).unwrap();
        let readout = Readout {
            w_out: DMatrix::from_element(1, spec.feature_len(), c(0.3, -0.1)),
            delay: 1,
            residual: 0.0,
        };
        let out = predict(&spec, &readout, &DMatrix::from_element(1, 10, ZERO)).unwrap();
        assert!(out.iter().all(|v| *v == ZERO));
    }

    #[test]
    fn replaying_training_data_reproduces_residual() {
        let mut rng = stream(6, &[]);
        let u = DMatrix::from_fn(1, 80, |_, _| uniform_complex(&mut rng));
        let t = DMatrix::from_fn(1, 80, |_, _| uniform_complex(&mut rng));
        let spec = random_reservoir(6, 0.4, 0.5, 1, 2, &mut rng).unwrap();
        let fit = learn_delay(&spec, &u, &t, 3, 0.0).unwrap();
        let out = predict(&spec, &fit.readout, &u).unwrap();
        let d = fit.readout.delay;
        let r: f64 = (0..80 - d).map(|n| (out[(0, n)] - t[(0, n)]).norm_sqr()).sum();
        let f = wesn_features(&spec, &u).unwrap();
        let full = (&fit.readout.w_out * &f - delayed(&t, d)).norm_squared();
        assert!((full - fit.readout.residual).abs() < 1e-9 * full.max(1.0));
        assert!(r <= full + 1e-9);
    }

    #[test]
    fn dump_roundtrip() {
        let spec = ReservoirSpec::diagonal(vec![c(0.5, -0.25), c(0.0, 0.125)], vec![c(1.0, 0.0), c(-2.0, 0.5)], 3).unwrap();
        let text = dump_spec(&spec).unwrap();
        assert!(text.starts_with("neuron_index,pole_real,pole_imag,w_in_real,w_in_imag\n"));
        assert_eq!(parse_spec_dump(&text, 3).unwrap(), spec);
        assert!(matches!(parse_spec_dump("0,1,2\n", 0), Err(ReservoirError::Parse { line: 1, .. })));
    }

    fn cplx() -> impl Strategy<Value = C64> {
        (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| C64::new(a, b))
    }

    proptest! {
        #[test]
        fn recursion_matches_block_form(
            poles in prop::collection::vec(
                (0.0f64..0.95, 0.0f64..std::f64::consts::TAU).prop_map(|(r, t)| C64::from_polar(r, t)),
                1..8,
            ),
            y in prop::collection::vec(cplx(), 1..60),
        ) {
            let k = poles.len();
            let spec = ReservoirSpec::diagonal(poles.clone(), vec![ONE; k], 0).unwrap();
            let s = run_states(&spec, &row(&y)).unwrap();
            let b = block_states(&poles, &y);
            prop_assert!((s - b).norm() <= 1e-10);
        }

        #[test]
        fn readout_residual_is_orthogonal_to_features(
            u in prop::collection::vec(cplx(), 40),
            t in prop::collection::vec(cplx(), 40),
            seed in 0u64..100,
        ) {
            let spec = random_reservoir(5, 0.4, 0.4, 1, 3, &mut stream(seed, &[])).unwrap();
            let f = wesn_features(&spec, &row(&u)).unwrap();
            let target = row(&t);
            let r = train_readout(&f, &target, 0, 0.0).unwrap();
            let res = &r.w_out * &f - &target;
            let g = &f * res.adjoint();
            // Backward-stable solve: |F r^H| ~ eps |F| (|r| + |F| |W| + |t|).
            let bound = 1e3 * f64::EPSILON * f.norm() * (res.norm() + f.norm() * r.w_out.norm() + target.norm());
            prop_assert!(g.norm() <= bound, "{} > {bound}", g.norm());
        }

        #[test]
        fn learned_delay_never_worse_than_zero(
            u in prop::collection::vec(cplx(), 60),
            t in prop::collection::vec(cplx(), 60),
            d_max in 0usize..6,
        ) {
            let spec = ReservoirSpec::diagonal(vec![c(0.5, 0.0), c(-0.2, 0.3)], vec![ONE, ONE], 2).unwrap();
            let fit = learn_delay(&spec, &row(&u), &row(&t), d_max, 0.0).unwrap();
            prop_assert!(fit.readout.residual <= fit.residuals[0]);
            prop_assert!(fit.readout.delay <= d_max);
        }
    }
}
