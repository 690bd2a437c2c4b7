//! Rational filters, pole/residue decompositions, minimum/non-minimum phase
//! factorization and the stable inverse of a mixed-phase channel.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::signal::{
    convolve, convolve_truncated, norm, poly_from_roots, polynomial_roots, vandermonde,
    LeastSquares, SignalError, C64, ONE, ZERO,
};

/// Roots with `| |z| - 1 | <= UNIT_RING_TOL` are treated as lying on the unit circle.
pub const UNIT_RING_TOL: f64 = 1e-6;
/// Poles closer than this are considered repeated.
pub const CLUSTER_TOL: f64 = 1e-6;
/// Radial step used to separate clustered poles.
pub const CLUSTER_JITTER: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("root {0} lies within the unit-circle ring")]
    UnitCircleRoot(C64),
    #[error("poles {0} and {1} are repeated within tolerance")]
    RepeatedPole(C64, C64),
    #[error("denominator must start with exactly 1")]
    InvalidDenominator,
    #[error("leading tap is zero; strip leading zeros and account for the delay separately")]
    LeadingZero,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// `B(z) / A(z)` in powers of `z^{-1}` with `a[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalFilter {
    b: Vec<C64>,
    a: Vec<C64>,
}

impl RationalFilter {
    pub fn new(b: Vec<C64>, a: Vec<C64>) -> Result<Self, FilterError> {
        if b.is_empty() {
            return Err(SignalError::Empty.into());
        }
        if a.first() != Some(&ONE) {
            return Err(FilterError::InvalidDenominator);
        }
        Ok(Self { b, a })
    }

    pub fn fir(b: Vec<C64>) -> Result<Self, FilterError> {
        Self::new(b, vec![ONE])
    }

    pub fn numerator(&self) -> &[C64] {
        &self.b
    }

    pub fn denominator(&self) -> &[C64] {
        &self.a
    }

    /// First `n` samples of the unit-sample response, by direct recursion.
    pub fn impulse_response(&self, n: usize) -> Vec<C64> {
        let mut y = vec![ZERO; n];
        for i in 0..n {
            let mut acc = self.b.get(i).copied().unwrap_or(ZERO);
            for (k, &ak) in self.a.iter().enumerate().skip(1).take(i) {
                acc -= ak * y[i - k];
            }
            y[i] = acc;
        }
        y
    }
}

/// Free-function form of [`RationalFilter::impulse_response`].
pub fn impulse_response(f: &RationalFilter, n: usize) -> Vec<C64> {
    f.impulse_response(n)
}

/// Parallel first-order sections `sum_k c_k / (1 - p_k z^{-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoleSet {
    pub poles: Vec<C64>,
    pub residues: Vec<C64>,
}

impl PoleSet {
    pub fn new(poles: Vec<C64>, residues: Vec<C64>) -> Result<Self, FilterError> {
        if poles.len() != residues.len() {
            return Err(SignalError::LengthMismatch {
                expected: poles.len(),
                got: residues.len(),
            }
            .into());
        }
        Ok(Self { poles, residues })
    }

    pub fn len(&self) -> usize {
        self.poles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poles.is_empty()
    }

    pub fn is_stable(&self) -> bool {
        self.poles.iter().all(|p| p.norm() < 1.0)
    }

    /// `sum_k c_k p_k^n` for `n < len`.
    pub fn impulse_response(&self, n: usize) -> Vec<C64> {
        let mut out = vec![ZERO; n];
        for (&p, &c) in self.poles.iter().zip(&self.residues) {
            let mut v = c;
            for o in out.iter_mut() {
                *o += v;
                v *= p;
            }
        }
        out
    }
}

/// Residues of `1 / prod_k (1 - p_k z^{-1})` at the given simple poles:
/// `c_k = p_k^{K-1} / prod_{j != k} (p_k - p_j)`.
pub fn residues_for_poles(poles: &[C64]) -> Result<Vec<C64>, FilterError> {
    check_simple(poles)?;
    let k = poles.len();
    Ok(poles
        .iter()
        .enumerate()
        .map(|(i, &pk)| {
            let mut den = ONE;
            for (j, &pj) in poles.iter().enumerate() {
                if j != i {
                    den *= pk - pj;
                }
            }
            pk.powu(k.saturating_sub(1) as u32) / den
        })
        .collect())
}

fn check_simple(poles: &[C64]) -> Result<(), FilterError> {
    for i in 0..poles.len() {
        for j in (i + 1)..poles.len() {
            if (poles[i] - poles[j]).norm() <= CLUSTER_TOL {
                return Err(FilterError::RepeatedPole(poles[i], poles[j]));
            }
        }
    }
    Ok(())
}

/// Decomposes `1 / A(z)` into first-order sections.
pub fn partial_fractions(a: &[C64]) -> Result<PoleSet, FilterError> {
    if a.first() != Some(&ONE) {
        return Err(FilterError::InvalidDenominator);
    }
    let end = a.iter().rposition(|&c| c != ZERO).map_or(1, |i| i + 1);
    if end <= 1 {
        return PoleSet::new(vec![], vec![]);
    }
    let poles = polynomial_roots(&a[..end])?;
    let residues = residues_for_poles(&poles)?;
    PoleSet::new(poles, residues)
}

/// Moves poles that sit within [`CLUSTER_TOL`] of an earlier pole by a
/// deterministic radial step of `CLUSTER_JITTER * j` towards the origin, where
/// `j` counts the earlier neighbours. Returns the adjusted poles and how many
/// were moved.
pub fn separate_clustered_poles(poles: &[C64]) -> (Vec<C64>, usize) {
    let mut out = poles.to_vec();
    let mut moved = 0;
    for i in 1..out.len() {
        let j = (0..i).filter(|&k| (poles[k] - poles[i]).norm() <= CLUSTER_TOL).count();
        if j == 0 {
            continue;
        }
        let p = poles[i];
        let dir = if p.norm() > 1e-12 { p / p.norm() } else { ONE };
        out[i] = p - dir * (CLUSTER_JITTER * j as f64);
        moved += 1;
    }
    (out, moved)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseClass {
    StrictlyMP,
    StrictlyNMP,
    Mixed,
}

/// `h = mp * nmp`, with all `mp` roots inside and all `nmp` roots outside the unit circle.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseFactorization {
    pub mp_factor: Vec<C64>,
    pub nmp_factor: Vec<C64>,
    pub mp_roots: Vec<C64>,
    pub nmp_roots: Vec<C64>,
    pub classification: PhaseClass,
}

fn strip_trailing(h: &[C64]) -> &[C64] {
    let end = h.iter().rposition(|&c| c != ZERO).map_or(0, |i| i + 1);
    &h[..end]
}

/// Splits the taps into minimum- and non-minimum-phase factors.
///
/// The overall gain goes to the MP factor; the NMP factor is monic in `z^0`.
/// A channel with no roots at all counts as strictly MP.
pub fn factorize_by_phase(h: &[C64]) -> Result<PhaseFactorization, FilterError> {
    if h.is_empty() {
        return Err(SignalError::Empty.into());
    }
    if h[0] == ZERO {
        return Err(FilterError::LeadingZero);
    }
    let h = strip_trailing(h);
    let roots = if h.len() >= 2 { polynomial_roots(h)? } else { Vec::new() };
    if let Some(&r) = roots.iter().find(|r| (r.norm() - 1.0).abs() <= UNIT_RING_TOL) {
        return Err(FilterError::UnitCircleRoot(r));
    }
    let (mp_roots, nmp_roots): (Vec<C64>, Vec<C64>) = roots.into_iter().partition(|r| r.norm() < 1.0);
    let classification = match (mp_roots.is_empty(), nmp_roots.is_empty()) {
        (_, true) => PhaseClass::StrictlyMP,
        (true, false) => PhaseClass::StrictlyNMP,
        (false, false) => PhaseClass::Mixed,
    };
    let mp_factor = poly_from_roots(&mp_roots).into_iter().map(|c| c * h[0]).collect();
    let nmp_factor = poly_from_roots(&nmp_roots);
    Ok(PhaseFactorization {
        mp_factor,
        nmp_factor,
        mp_roots,
        nmp_roots,
        classification,
    })
}

/// Stable causal approximation of `1 / H(z)` realised as first-order sections at
/// the MP-factor roots plus a short FIR part.
#[derive(Debug, Clone, PartialEq)]
pub struct StableInverse {
    pub poles: PoleSet,
    pub fir_taps: Vec<C64>,
    pub delay: usize,
    /// `|| (h * g)[..N] - delta_delay ||_2` over the fitting horizon.
    pub residual: f64,
}

impl StableInverse {
    pub fn impulse_response(&self, n: usize) -> Vec<C64> {
        let mut g = self.poles.impulse_response(n);
        for (o, &f) in g.iter_mut().zip(&self.fir_taps) {
            *o += f;
        }
        g
    }
}

/// Delayed stable inverse of a (possibly mixed-phase) channel.
///
/// The poles are the MP-factor roots. Their residues and `l_ff` FIR taps are
/// fitted jointly by least squares so that `h * g` matches a unit sample
/// delayed by `n_nmp + l_ff - 1` over an `n`-sample horizon, where `n_nmp`
/// counts the NMP roots. Each extra FIR tap adds one sample of delay, which
/// makes the residual non-increasing in `l_ff`.
pub fn stable_inverse_approx(h: &[C64], l_ff: usize, n: usize) -> Result<StableInverse, FilterError> {
    if l_ff == 0 {
        return Err(FilterError::InvalidArgument("l_ff must be at least 1".into()));
    }
    let fact = factorize_by_phase(h)?;
    let (poles, _) = separate_clustered_poles(&fact.mp_roots);
    let delay = fact.nmp_roots.len() + l_ff - 1;
    if n <= delay {
        return Err(FilterError::InvalidArgument(format!(
            "horizon {n} must exceed the delay {delay}"
        )));
    }
    let k = poles.len();
    let psi = vandermonde(&poles, n);
    let mut a = DMatrix::from_element(n, k + l_ff, ZERO);
    for j in 0..k {
        let col: Vec<C64> = psi.column(j).iter().copied().collect();
        let y = convolve_truncated(h, &col, n);
        a.set_column(j, &nalgebra::DVector::from_vec(y));
    }
    for j in 0..l_ff {
        for (i, &hv) in h.iter().enumerate() {
            if i + j < n {
                a[(i + j, k + j)] = hv;
            }
        }
    }
    let mut target = DMatrix::from_element(n, 1, ZERO);
    target[(delay, 0)] = ONE;
    let x = LeastSquares::new(&a, 0.0)?.solve(&target)?;
    let residues: Vec<C64> = (0..k).map(|j| x[(j, 0)]).collect();
    let fir_taps: Vec<C64> = (0..l_ff).map(|j| x[(k + j, 0)]).collect();
    let fit = &a * &x - &target;
    let residual = fit.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    Ok(StableInverse {
        poles: PoleSet::new(poles, residues)?,
        fir_taps,
        delay,
        residual,
    })
}

/// `|| (h * g)[..n] - delta_delay ||_2` for an arbitrary inverse candidate.
pub fn isi_residual(h: &[C64], g: &[C64], delay: usize, n: usize) -> f64 {
    let mut y = convolve(h, g);
    y.resize(n.max(y.len()), ZERO);
    y.truncate(n);
    if delay < n {
        y[delay] -= ONE;
    }
    norm(&y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn real(v: &[f64]) -> Vec<C64> {
        v.iter().map(|&x| c(x, 0.0)).collect()
    }

    fn close(a: &[C64], b: &[C64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).norm() <= tol)
    }

    #[test]
    fn impulse_response_examples() {
        let f = RationalFilter::new(real(&[1.0]), real(&[1.0, -0.5])).unwrap();
        assert!(close(&f.impulse_response(4), &real(&[1.0, 0.5, 0.25, 0.125]), 1e-15));
        let f = RationalFilter::fir(real(&[1.0, 1.0])).unwrap();
        assert!(close(&impulse_response(&f, 3), &real(&[1.0, 1.0, 0.0]), 0.0));
        let f = RationalFilter::new(real(&[1.0]), real(&[1.0, -0.75, 0.125])).unwrap();
        assert!(close(&f.impulse_response(3), &real(&[1.0, 0.75, 0.4375]), 1e-15));
        assert_eq!(
            RationalFilter::new(real(&[1.0]), real(&[2.0])),
            Err(FilterError::InvalidDenominator)
        );
    }

    fn sorted(mut p: PoleSet) -> PoleSet {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p.poles[b].re.total_cmp(&p.poles[a].re));
        p = PoleSet {
            poles: idx.iter().map(|&i| p.poles[i]).collect(),
            residues: idx.iter().map(|&i| p.residues[i]).collect(),
        };
        p
    }

    #[test]
    fn partial_fraction_examples() {
        let p = partial_fractions(&real(&[1.0, -0.5])).unwrap();
        assert!(close(&p.poles, &real(&[0.5]), 1e-14) && close(&p.residues, &real(&[1.0]), 1e-14));

        let p = sorted(partial_fractions(&real(&[1.0, -0.75, 0.125])).unwrap());
        assert!(close(&p.poles, &real(&[0.5, 0.25]), 1e-12));
        assert!(close(&p.residues, &real(&[2.0, -1.0]), 1e-12));

        let p = sorted(partial_fractions(&real(&[1.0, 0.0, -0.25])).unwrap());
        assert!(close(&p.poles, &real(&[0.5, -0.5]), 1e-12));
        assert!(close(&p.residues, &real(&[0.5, 0.5]), 1e-12));

        assert!(matches!(
            partial_fractions(&real(&[1.0, -1.0, 0.25])),
            Err(FilterError::RepeatedPole(..))
        ));
    }

    #[test]
    fn clustered_poles_are_separated() {
        let (p, moved) = separate_clustered_poles(&[c(0.5, 0.0), c(0.5, 0.0), c(0.5, 0.0), c(0.2, 0.0)]);
        assert_eq!(moved, 2);
        assert!(close(&p, &[c(0.5, 0.0), c(0.49999, 0.0), c(0.49998, 0.0), c(0.2, 0.0)], 1e-15));
        assert!(residues_for_poles(&p).is_ok());
    }

    #[test]
    fn factorize_examples() {
        let f = factorize_by_phase(&real(&[1.0, -0.5])).unwrap();
        assert_eq!(f.classification, PhaseClass::StrictlyMP);
        assert!(close(&f.mp_factor, &real(&[1.0, -0.5]), 1e-14));
        assert!(close(&f.nmp_factor, &real(&[1.0]), 0.0));

        let f = factorize_by_phase(&real(&[1.0, -2.5, 1.0])).unwrap();
        assert_eq!(f.classification, PhaseClass::Mixed);
        assert!(close(&f.mp_factor, &real(&[1.0, -0.5]), 1e-12));
        assert!(close(&f.nmp_factor, &real(&[1.0, -2.0]), 1e-12));

        let f = factorize_by_phase(&real(&[1.0, -2.0])).unwrap();
        assert_eq!(f.classification, PhaseClass::StrictlyNMP);

        assert!(matches!(
            factorize_by_phase(&real(&[1.0, -3.0, 2.0])),
            Err(FilterError::UnitCircleRoot(_))
        ));
        assert_eq!(factorize_by_phase(&real(&[0.0, 0.0, 1.0])), Err(FilterError::LeadingZero));
    }

    #[test]
    fn stable_inverse_of_minimum_phase_channel_is_exact() {
        let inv = stable_inverse_approx(&real(&[1.0, -0.5]), 1, 128).unwrap();
        assert!(close(&inv.poles.poles, &real(&[0.5]), 1e-14));
        assert_eq!(inv.delay, 0);
        assert!(inv.fir_taps[0].norm() < 1e-9);
        assert!(inv.residual <= 1e-9);
        let g = inv.impulse_response(128);
        assert!(isi_residual(&real(&[1.0, -0.5]), &g, 0, 128) <= 1e-9);
    }

    #[test]
    fn stable_inverse_of_mixed_phase_channel_improves_with_fir_length() {
        let h = real(&[1.0, -2.5, 1.0]);
        let r: Vec<f64> = [2, 4, 8]
            .iter()
            .map(|&l| stable_inverse_approx(&h, l, 128).unwrap().residual)
            .collect();
        assert!(r[0] >= r[1] && r[1] >= r[2], "{r:?}");
        // The anticausal part of 1/(1 - 2 z^{-1}) decays as 2^{-k}; with 8 taps
        // the leftover tail is small.
        assert!(r[2] < 1e-2, "{r:?}");
        let inv = stable_inverse_approx(&h, 8, 128).unwrap();
        assert_eq!(inv.delay, 8);
        assert!((isi_residual(&h, &inv.impulse_response(128), inv.delay, 128) - inv.residual).abs() < 1e-9);
    }

    fn cplx() -> impl Strategy<Value = C64> {
        (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| C64::new(a, b))
    }

    fn stable_root() -> impl Strategy<Value = C64> {
        (0.05f64..0.9, 0.0f64..std::f64::consts::TAU).prop_map(|(r, t)| C64::from_polar(r, t))
    }

    fn unstable_root() -> impl Strategy<Value = C64> {
        (1.15f64..3.0, 0.0f64..std::f64::consts::TAU).prop_map(|(r, t)| C64::from_polar(r, t))
    }

    proptest! {
        #[test]
        fn partial_fractions_recombine(roots in prop::collection::vec(stable_root(), 1..=10)) {
            let (roots, _) = separate_clustered_poles(&roots);
            prop_assume!(check_simple(&roots).is_ok());
            let mut sep_ok = true;
            for i in 0..roots.len() {
                for j in (i + 1)..roots.len() {
                    sep_ok &= (roots[i] - roots[j]).norm() > 0.05;
                }
            }
            prop_assume!(sep_ok);
            let a = poly_from_roots(&roots);
            let ps = partial_fractions(&a).unwrap();
            let direct = RationalFilter::new(vec![ONE], a).unwrap().impulse_response(128);
            let recomb = ps.impulse_response(128);
            for (x, y) in direct.iter().zip(&recomb) {
                prop_assert!((x - y).norm() <= 1e-6);
            }
        }

        #[test]
        fn factorization_partitions_roots(
            inside in prop::collection::vec(stable_root(), 0..5),
            outside in prop::collection::vec(unstable_root(), 0..5),
            gain in cplx(),
        ) {
            prop_assume!(gain.norm() > 0.1 && inside.len() + outside.len() > 0);
            let mut roots = inside.clone();
            roots.extend(outside.iter().copied());
            let h: Vec<C64> = poly_from_roots(&roots).into_iter().map(|v| v * gain).collect();
            let f = factorize_by_phase(&h).unwrap();
            prop_assert!(f.mp_roots.iter().all(|r| r.norm() < 1.0));
            prop_assert!(f.nmp_roots.iter().all(|r| r.norm() > 1.0));
            prop_assert_eq!(f.mp_roots.len(), inside.len());
            prop_assert_eq!(f.nmp_roots.len(), outside.len());
            let prod = convolve(&f.mp_factor, &f.nmp_factor);
            let scale = norm(&h);
            for (x, y) in prod.iter().zip(&h) {
                prop_assert!((x - y).norm() <= 1e-7 * scale);
            }
        }

        #[test]
        fn stable_inverse_residual_non_increasing(
            inside in prop::collection::vec(stable_root(), 1..4),
            outside in prop::collection::vec(unstable_root(), 1..3),
        ) {
            let mut roots = inside;
            roots.extend(outside);
            let h = poly_from_roots(&roots);
            let mut prev = f64::INFINITY;
            for l_ff in 1..=8 {
                let r = stable_inverse_approx(&h, l_ff, 128).unwrap().residual;
                prop_assert!(r <= prev * (1.0 + 1e-9) + 1e-12, "l_ff={} r={} prev={}", l_ff, r, prev);
                prev = r;
            }
        }
    }
}
