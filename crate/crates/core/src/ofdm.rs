//! OFDM transceiver: Gray-coded QAM, resource grids with comb reference
//! signals, and CP-OFDM modulation with a unitary DFT.

use std::io::{self, Write};

use rand::Rng;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::signal::{C64, ZERO};

/// OFDM symbols per slot; the first symbol of every slot carries the RS.
pub const SYMBOLS_PER_SLOT: usize = 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OfdmError {
    #[error("unsupported QAM order {0}")]
    UnsupportedOrder(usize),
    #[error("bit count {bits} is not a multiple of {per_symbol}")]
    BitCount { bits: usize, per_symbol: usize },
    #[error("payload has {got} bits, grid needs {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("invalid numerology: {0}")]
    Numerology(String),
    #[error("RS spacing {spacing} is incompatible with {n_sc} subcarriers and {n_t} antennas")]
    Spacing { spacing: usize, n_sc: usize, n_t: usize },
    #[error("expected {expected} samples, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Square QAM with per-axis Gray labelling and unit average energy.
///
/// The first half of each label selects the in-phase level, the second half the
/// quadrature level. Label 0 maps to the top-right corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qam {
    order: usize,
    levels: usize,
    bits_per_axis: usize,
    scale: f64,
}

fn gray_to_binary(mut g: usize) -> usize {
    let mut b = 0;
    while g != 0 {
        b ^= g;
        g >>= 1;
    }
    b
}

fn binary_to_gray(b: usize) -> usize {
    b ^ (b >> 1)
}

impl Qam {
    pub fn new(order: usize) -> Result<Self, OfdmError> {
        if !matches!(order, 4 | 16 | 64 | 256) {
            return Err(OfdmError::UnsupportedOrder(order));
        }
        let levels = (order as f64).sqrt().round() as usize;
        Ok(Self {
            order,
            levels,
            bits_per_axis: levels.trailing_zeros() as usize,
            scale: (3.0 / (2.0 * (order as f64 - 1.0))).sqrt(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        2 * self.bits_per_axis
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn axis_level(&self, bits: &[u8]) -> f64 {
        let g = bits.iter().fold(0usize, |acc, &b| (acc << 1) | (b & 1) as usize);
        (self.levels as f64 - 1.0) - 2.0 * gray_to_binary(g) as f64
    }

    fn axis_bits(&self, v: f64, out: &mut Vec<u8>) {
        let m = self.levels as f64;
        let idx = (((m - 1.0) - v / self.scale) / 2.0).round().clamp(0.0, m - 1.0) as usize;
        let g = binary_to_gray(idx);
        for k in (0..self.bits_per_axis).rev() {
            out.push(((g >> k) & 1) as u8);
        }
    }

    pub fn map(&self, bits: &[u8]) -> Result<Vec<C64>, OfdmError> {
        let bps = self.bits_per_symbol();
        if !bits.len().is_multiple_of(bps) {
            return Err(OfdmError::BitCount {
                bits: bits.len(),
                per_symbol: bps,
            });
        }
        Ok(bits
            .chunks(bps)
            .map(|c| {
                let (i, q) = c.split_at(self.bits_per_axis);
                C64::new(self.axis_level(i), self.axis_level(q)) * self.scale
            })
            .collect())
    }

    /// Nearest-neighbour hard decision.
    pub fn demap(&self, symbols: &[C64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(symbols.len() * self.bits_per_symbol());
        for s in symbols {
            self.axis_bits(s.re, &mut out);
            self.axis_bits(s.im, &mut out);
        }
        out
    }
}

pub fn qam_map(qam: &Qam, bits: &[u8]) -> Result<Vec<C64>, OfdmError> {
    qam.map(bits)
}

pub fn qam_demap(qam: &Qam, symbols: &[C64]) -> Vec<u8> {
    qam.demap(symbols)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OfdmNumerology {
    pub n_sc: usize,
    pub n_cp: usize,
}

impl OfdmNumerology {
    pub fn new(n_sc: usize, n_cp: usize) -> Result<Self, OfdmError> {
        if !n_sc.is_power_of_two() || n_sc < 2 {
            return Err(OfdmError::Numerology(format!("{n_sc} subcarriers is not a power of two")));
        }
        if n_cp >= n_sc {
            return Err(OfdmError::Numerology("cyclic prefix must be shorter than the symbol".into()));
        }
        Ok(Self { n_sc, n_cp })
    }

    pub fn symbol_len(&self) -> usize {
        self.n_sc + self.n_cp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReKind {
    Data,
    Rs,
    EmptyRs,
}

impl ReKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReKind::Data => "data",
            ReKind::Rs => "rs",
            ReKind::EmptyRs => "empty_rs",
        }
    }
}

/// How reference signals are shared between transmit antennas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsMode {
    /// Antenna-orthogonal combs, for per-link channel estimation.
    Conventional,
    /// All antennas transmit on the same comb at once.
    Learning,
}

/// RE classification of a slot-structured grid.
///
/// Symbols with index `0 mod 14` carry the RS. Every RE of such a symbol that
/// is not an RS of the given antenna is left empty, so the full time-domain
/// waveform of the RS symbol is known at the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub n_sc: usize,
    pub n_sym: usize,
    pub n_t: usize,
    pub rs_spacing: usize,
    pub mode: RsMode,
}

impl GridLayout {
    pub fn new(n_sc: usize, n_sym: usize, n_t: usize, rs_spacing: usize, mode: RsMode) -> Result<Self, OfdmError> {
        let period = match mode {
            RsMode::Conventional => rs_spacing * n_t,
            RsMode::Learning => rs_spacing,
        };
        if n_t == 0 || rs_spacing == 0 || !n_sc.is_multiple_of(rs_spacing) || !n_sc.is_multiple_of(period) {
            return Err(OfdmError::Spacing {
                spacing: rs_spacing,
                n_sc,
                n_t,
            });
        }
        Ok(Self {
            n_sc,
            n_sym,
            n_t,
            rs_spacing,
            mode,
        })
    }

    pub fn is_rs_symbol(sym: usize) -> bool {
        sym.is_multiple_of(SYMBOLS_PER_SLOT)
    }

    pub fn kind(&self, ant: usize, sym: usize, sc: usize) -> ReKind {
        if !Self::is_rs_symbol(sym) {
            return ReKind::Data;
        }
        let on_comb = match self.mode {
            RsMode::Learning => sc.is_multiple_of(self.rs_spacing),
            RsMode::Conventional => sc % (self.rs_spacing * self.n_t) == ant * self.rs_spacing,
        };
        if on_comb {
            ReKind::Rs
        } else {
            ReKind::EmptyRs
        }
    }

    /// Subcarriers carrying RS of antenna `ant` in an RS symbol.
    pub fn rs_subcarriers(&self, ant: usize) -> Vec<usize> {
        (0..self.n_sc).filter(|&k| self.kind(ant, 0, k) == ReKind::Rs).collect()
    }

    pub fn n_data_re_per_antenna(&self) -> usize {
        (0..self.n_sym).filter(|&s| !Self::is_rs_symbol(s)).count() * self.n_sc
    }

    pub fn payload_bits(&self, qam: &Qam) -> usize {
        self.n_t * self.n_data_re_per_antenna() * qam.bits_per_symbol()
    }
}

/// Subcarrier x symbol x antenna grid with an RE-kind mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceGrid {
    layout: GridLayout,
    values: Vec<C64>,
}

impl ResourceGrid {
    fn index(&self, ant: usize, sym: usize, sc: usize) -> usize {
        (ant * self.layout.n_sym + sym) * self.layout.n_sc + sc
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn get(&self, ant: usize, sym: usize, sc: usize) -> C64 {
        self.values[self.index(ant, sym, sc)]
    }

    pub fn kind(&self, ant: usize, sym: usize, sc: usize) -> ReKind {
        self.layout.kind(ant, sym, sc)
    }

    /// Subcarrier vector of one OFDM symbol of one antenna.
    pub fn symbol(&self, ant: usize, sym: usize) -> &[C64] {
        let start = self.index(ant, sym, 0);
        &self.values[start..start + self.layout.n_sc]
    }

    /// Data symbols of one antenna in transmission order.
    pub fn data_symbols(&self, ant: usize) -> Vec<C64> {
        data_positions(&self.layout)
            .map(|(s, k)| self.get(ant, s, k))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "sym,sc,ant,kind,re_real,re_imag")?;
        for sym in 0..self.layout.n_sym {
            for sc in 0..self.layout.n_sc {
                for ant in 0..self.layout.n_t {
                    let v = self.get(ant, sym, sc);
                    writeln!(
                        w,
                        "{sym},{sc},{ant},{},{:e},{:e}",
                        self.kind(ant, sym, sc).as_str(),
                        v.re,
                        v.im
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// `(symbol, subcarrier)` of data REs in transmission order; identical for all antennas.
pub fn data_positions(layout: &GridLayout) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..layout.n_sym)
        .filter(|&s| !GridLayout::is_rs_symbol(s))
        .flat_map(move |s| (0..layout.n_sc).map(move |k| (s, k)))
}

/// Unit-energy QPSK reference symbols.
pub fn random_qpsk<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<C64> {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    (0..n)
        .map(|_| {
            let b: u8 = rng.random_range(0..4);
            C64::new(if b & 1 == 0 { a } else { -a }, if b & 2 == 0 { a } else { -a })
        })
        .collect()
}

/// Fills a grid: RS REs get random QPSK from `rng`, data REs are filled
/// antenna by antenna from `bits`, and empty REs stay zero.
pub fn build_grid<R: Rng + ?Sized>(
    layout: GridLayout,
    qam: &Qam,
    bits: &[u8],
    rng: &mut R,
) -> Result<ResourceGrid, OfdmError> {
    let expected = layout.payload_bits(qam);
    if bits.len() != expected {
        return Err(OfdmError::PayloadSize {
            expected,
            got: bits.len(),
        });
    }
    let symbols = qam.map(bits)?;
    let per_ant = layout.n_data_re_per_antenna();
    let mut grid = ResourceGrid {
        layout,
        values: vec![ZERO; layout.n_t * layout.n_sym * layout.n_sc],
    };
    for ant in 0..layout.n_t {
        let mut data = symbols[ant * per_ant..(ant + 1) * per_ant].iter();
        for sym in 0..layout.n_sym {
            let rs_count = if GridLayout::is_rs_symbol(sym) {
                layout.rs_subcarriers(ant).len()
            } else {
                0
            };
            let mut rs = random_qpsk(rng, rs_count).into_iter();
            for sc in 0..layout.n_sc {
                let idx = grid.index(ant, sym, sc);
                grid.values[idx] = match layout.kind(ant, sym, sc) {
                    ReKind::Data => *data.next().expect("payload sized above"),
                    ReKind::Rs => rs.next().expect("RS count matches comb"),
                    ReKind::EmptyRs => ZERO,
                };
            }
        }
    }
    Ok(grid)
}

/// Time samples per antenna: unitary IDFT per symbol with the cyclic prefix
/// prepended, symbols concatenated.
pub fn ofdm_modulate(grid: &ResourceGrid, num: &OfdmNumerology) -> Result<Vec<Vec<C64>>, OfdmError> {
    let layout = grid.layout();
    if layout.n_sc != num.n_sc {
        return Err(OfdmError::LengthMismatch {
            expected: num.n_sc,
            got: layout.n_sc,
        });
    }
    let ifft = FftPlanner::new().plan_fft_inverse(num.n_sc);
    let scale = 1.0 / (num.n_sc as f64).sqrt();
    let mut buf = vec![ZERO; num.n_sc];
    Ok((0..layout.n_t)
        .map(|ant| {
            let mut out = Vec::with_capacity(layout.n_sym * num.symbol_len());
            for sym in 0..layout.n_sym {
                buf.copy_from_slice(grid.symbol(ant, sym));
                ifft.process(&mut buf);
                out.extend(buf[num.n_sc - num.n_cp..].iter().map(|v| v * scale));
                out.extend(buf.iter().map(|v| v * scale));
            }
            out
        })
        .collect())
}

/// Received subcarrier values of one antenna stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolGrid {
    pub n_sc: usize,
    pub n_sym: usize,
    values: Vec<C64>,
}

impl SymbolGrid {
    pub fn get(&self, sym: usize, sc: usize) -> C64 {
        self.values[sym * self.n_sc + sc]
    }

    pub fn symbol(&self, sym: usize) -> &[C64] {
        &self.values[sym * self.n_sc..(sym + 1) * self.n_sc]
    }
}

/// Strips the cyclic prefix and applies the unitary DFT per symbol.
pub fn ofdm_demodulate(samples: &[C64], num: &OfdmNumerology, n_sym: usize) -> Result<SymbolGrid, OfdmError> {
    let expected = n_sym * num.symbol_len();
    if samples.len() != expected {
        return Err(OfdmError::LengthMismatch {
            expected,
            got: samples.len(),
        });
    }
    let fft = FftPlanner::new().plan_fft_forward(num.n_sc);
    let scale = 1.0 / (num.n_sc as f64).sqrt();
    let mut values = Vec::with_capacity(n_sym * num.n_sc);
    for block in samples.chunks(num.symbol_len()) {
        let mut buf = block[num.n_cp..].to_vec();
        fft.process(&mut buf);
        values.extend(buf.into_iter().map(|v| v * scale));
    }
    Ok(SymbolGrid {
        n_sc: num.n_sc,
        n_sym,
        values,
    })
}
