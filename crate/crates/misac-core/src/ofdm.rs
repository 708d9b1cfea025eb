//! OFDM frame construction and recovery at complex baseband.
//!
//! A frame is an `N x M` matrix of frequency-domain cells (rows are
//! subcarriers, columns are OFDM symbols). Modulation runs one inverse DFT
//! per symbol with 1/N scaling, prepends a cyclic prefix of the last
//! `cp_len` samples and concatenates the symbols; demodulation is the exact
//! inverse with an unscaled forward DFT. An optional two-symbol preamble for
//! receiver synchronization is prepended ahead of the data symbols:
//!
//! * symbol 1 carries energy on even subcarriers only, so its useful part
//!   consists of two identical halves in the time domain,
//! * symbol 2 carries a known pseudo-random QPSK sequence on every
//!   subcarrier.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// QPSK constellation with Gray labelling: bit pair `b1 b0` maps to
/// `((1 - 2*b1) + j(1 - 2*b0)) / sqrt(2)`.
const QPSK: [Complex64; 4] = [
    Complex64::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2),   // 00
    Complex64::new(FRAC_1_SQRT_2, -FRAC_1_SQRT_2),  // 01
    Complex64::new(-FRAC_1_SQRT_2, FRAC_1_SQRT_2),  // 10
    Complex64::new(-FRAC_1_SQRT_2, -FRAC_1_SQRT_2), // 11
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Qpsk,
}

/// Which cells of the grid carry pilots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PilotKind {
    /// Pilots on every `subcarrier_interval`-th subcarrier of every
    /// `symbol_interval`-th symbol.
    Lattice,
    /// Entire OFDM symbols are pilots, every `symbol_interval`-th symbol.
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotPattern {
    pub kind: PilotKind,
    pub subcarrier_interval: usize,
    pub symbol_interval: usize,
    pub pilot_seed: u64,
}

impl PilotPattern {
    pub fn lattice(subcarrier_interval: usize, symbol_interval: usize, pilot_seed: u64) -> Self {
        PilotPattern {
            kind: PilotKind::Lattice,
            subcarrier_interval,
            symbol_interval,
            pilot_seed,
        }
    }

    pub fn block(symbol_interval: usize, pilot_seed: u64) -> Self {
        PilotPattern {
            kind: PilotKind::Block,
            subcarrier_interval: 1,
            symbol_interval,
            pilot_seed,
        }
    }

    pub fn is_pilot(&self, subcarrier: usize, symbol: usize) -> bool {
        match self.kind {
            PilotKind::Lattice => {
                subcarrier % self.subcarrier_interval == 0 && symbol % self.symbol_interval == 0
            }
            PilotKind::Block => symbol % self.symbol_interval == 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.subcarrier_interval == 0 || self.symbol_interval == 0 {
            return Err(Error::config("pilot intervals must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreambleConfig {
    pub enabled: bool,
    pub seed: u64,
}

impl PreambleConfig {
    pub fn enabled(seed: u64) -> Self {
        PreambleConfig {
            enabled: true,
            seed,
        }
    }

    pub fn disabled() -> Self {
        PreambleConfig {
            enabled: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfdmParams {
    pub n_subcarriers: usize,
    pub cp_len: usize,
    pub n_symbols: usize,
    /// Subcarrier spacing in Hz.
    #[serde(rename = "subcarrier_spacing_hz")]
    pub subcarrier_spacing: f64,
    /// Complex baseband sampling rate in Hz; must equal
    /// `n_subcarriers * subcarrier_spacing`.
    #[serde(rename = "sample_rate_hz")]
    pub sample_rate: f64,
    /// RF carrier in Hz, used for wavelengths and path phases.
    #[serde(rename = "carrier_freq_hz")]
    pub carrier_freq: f64,
    pub modulation: Modulation,
    pub pilot_pattern: PilotPattern,
    pub preamble: PreambleConfig,
}

impl OfdmParams {
    /// 28 GHz carrier, 500 MHz bandwidth configuration: 2048 subcarriers at
    /// 244.140625 kHz spacing, 512-sample cyclic prefix, 512 data symbols.
    pub fn wideband_28ghz() -> Self {
        OfdmParams {
            n_subcarriers: 2048,
            cp_len: 512,
            n_symbols: 512,
            subcarrier_spacing: 500e6 / 2048.0,
            sample_rate: 500e6,
            carrier_freq: 28e9,
            modulation: Modulation::Qpsk,
            pilot_pattern: PilotPattern::lattice(2, 2, 1),
            preamble: PreambleConfig::enabled(2),
        }
    }

    /// Same bandwidth and carrier with a 4x smaller grid (512 subcarriers,
    /// 128 symbols), for fast test runs.
    pub fn wideband_28ghz_compact() -> Self {
        OfdmParams {
            n_subcarriers: 512,
            cp_len: 128,
            n_symbols: 128,
            subcarrier_spacing: 500e6 / 512.0,
            sample_rate: 500e6,
            carrier_freq: 28e9,
            modulation: Modulation::Qpsk,
            pilot_pattern: PilotPattern::lattice(2, 2, 1),
            preamble: PreambleConfig::enabled(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subcarriers < 2 || self.n_subcarriers % 2 != 0 {
            return Err(Error::config("subcarrier count must be even and >= 2"));
        }
        if self.n_symbols == 0 {
            return Err(Error::config("frame must contain at least one symbol"));
        }
        if self.cp_len >= self.n_subcarriers {
            return Err(Error::config(
                "cyclic prefix must be shorter than the symbol body",
            ));
        }
        if self.subcarrier_spacing <= 0.0 || self.sample_rate <= 0.0 || self.carrier_freq <= 0.0 {
            return Err(Error::config("rates and carrier must be positive"));
        }
        let implied = self.n_subcarriers as f64 * self.subcarrier_spacing;
        if ((implied - self.sample_rate) / self.sample_rate).abs() > 1e-9 {
            return Err(Error::config(format!(
                "sample rate {} Hz does not match n_subcarriers * subcarrier_spacing = {} Hz",
                self.sample_rate, implied
            )));
        }
        self.pilot_pattern.validate()
    }

    /// Occupied bandwidth in Hz (equals the sampling rate for a full grid).
    pub fn bandwidth(&self) -> f64 {
        self.n_subcarriers as f64 * self.subcarrier_spacing
    }

    /// Duration of one OFDM symbol including its cyclic prefix, seconds.
    pub fn symbol_duration(&self) -> f64 {
        (self.n_subcarriers + self.cp_len) as f64 / self.sample_rate
    }

    /// Duration of the data portion of a frame (preamble excluded), seconds.
    pub fn frame_duration(&self) -> f64 {
        self.n_symbols as f64 * self.symbol_duration()
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.n_subcarriers + self.cp_len
    }

    /// Number of preamble symbols ahead of the data (2 when enabled).
    pub fn preamble_symbols(&self) -> usize {
        if self.preamble.enabled {
            2
        } else {
            0
        }
    }

    /// Total frame length in samples, preamble included.
    pub fn frame_len_samples(&self) -> usize {
        (self.n_symbols + self.preamble_symbols()) * self.samples_per_symbol()
    }

    pub fn pilot_cell_count(&self) -> usize {
        let p = &self.pilot_pattern;
        let rows = match p.kind {
            PilotKind::Lattice => self.n_subcarriers.div_ceil(p.subcarrier_interval),
            PilotKind::Block => self.n_subcarriers,
        };
        rows * self.n_symbols.div_ceil(p.symbol_interval)
    }

    pub fn data_cell_count(&self) -> usize {
        self.n_subcarriers * self.n_symbols - self.pilot_cell_count()
    }

    /// Payload bits carried by one frame (2 bits per QPSK data cell).
    pub fn payload_bit_count(&self) -> usize {
        2 * self.data_cell_count()
    }

    /// Net data rate in bit/s over the data portion of the frame.
    pub fn data_rate_bps(&self) -> f64 {
        self.payload_bit_count() as f64 / self.frame_duration()
    }

    /// Monostatic (two-way) range resolution c/(2B), metres.
    pub fn mono_range_resolution(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth())
    }

    /// Bistatic (one-way) relative range resolution c/B, metres.
    pub fn bistatic_range_resolution(&self) -> f64 {
        SPEED_OF_LIGHT / self.bandwidth()
    }

    /// Maximum unambiguous monostatic range N * c/(2B), metres.
    pub fn mono_max_unambiguous_range(&self) -> f64 {
        self.n_subcarriers as f64 * self.mono_range_resolution()
    }

    /// Maximum unambiguous bistatic relative range N * c/B, metres.
    pub fn bistatic_max_unambiguous_range(&self) -> f64 {
        self.n_subcarriers as f64 * self.bistatic_range_resolution()
    }

    /// Doppler resolution 1/(M * T_sym), Hz.
    pub fn doppler_resolution(&self) -> f64 {
        1.0 / (self.n_symbols as f64 * self.symbol_duration())
    }

    /// Maximum unambiguous Doppler +-1/(2 T_sym), Hz.
    pub fn max_unambiguous_doppler(&self) -> f64 {
        1.0 / (2.0 * self.symbol_duration())
    }

    /// Coherent integration gain of the full grid, 10*log10(N*M) dB.
    pub fn processing_gain_db(&self) -> f64 {
        10.0 * (self.n_subcarriers as f64 * self.n_symbols as f64).log10()
    }
}

/// Role of one frequency-domain cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellRole {
    Data,
    Pilot,
}

/// Frequency-domain frame: cells, their roles and the payload that filled
/// the data cells. Data cells are filled symbol-major (all subcarriers of
/// symbol 0, then symbol 1, ...), two payload bits per cell.
#[derive(Debug, Clone)]
pub struct FrameGrid {
    pub cells: Array2<Complex64>,
    pub roles: Array2<CellRole>,
    pub payload_bits: Vec<u8>,
}

/// Contiguous block of complex baseband samples.
#[derive(Debug, Clone)]
pub struct BasebandSignal {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
}

impl BasebandSignal {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64) -> Self {
        BasebandSignal {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }
}

/// Draw one uniformly random QPSK symbol.
pub fn random_qpsk(rng: &mut ChaCha8Rng) -> Complex64 {
    QPSK[rng.gen_range(0..4usize)]
}

/// Seeded pseudo-random payload for one frame.
pub fn generate_payload_bits(params: &OfdmParams, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..params.payload_bit_count())
        .map(|_| rng.gen_range(0..2u8))
        .collect()
}

/// Map a bit stream onto QPSK symbols, two bits per symbol, first bit of
/// each pair on the real axis.
pub fn map_qpsk(bits: &[u8]) -> Result<Vec<Complex64>> {
    if bits.len() % 2 != 0 {
        return Err(Error::OddBitCount(bits.len()));
    }
    if let Some(&b) = bits.iter().find(|&&b| b > 1) {
        return Err(Error::InvalidBit(b));
    }
    Ok(bits
        .chunks_exact(2)
        .map(|pair| QPSK[(pair[0] * 2 + pair[1]) as usize])
        .collect())
}

/// Minimum-distance hard decisions back to bits (inverse of `map_qpsk`).
pub fn demap_qpsk(symbols: &[Complex64]) -> Vec<u8> {
    let mut bits = Vec::with_capacity(symbols.len() * 2);
    for s in symbols {
        bits.push(u8::from(s.re < 0.0));
        bits.push(u8::from(s.im < 0.0));
    }
    bits
}

/// Fill a frame grid from payload bits; pilot cells take seeded
/// pseudo-random QPSK values that depend only on the pilot pattern and its
/// seed.
pub fn build_frame(params: &OfdmParams, payload_bits: &[u8]) -> Result<FrameGrid> {
    params.validate()?;
    let expected = params.payload_bit_count();
    if payload_bits.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            got: payload_bits.len(),
        });
    }
    let n = params.n_subcarriers;
    let m = params.n_symbols;
    let data_symbols = map_qpsk(payload_bits)?;
    let mut pilot_rng = ChaCha8Rng::seed_from_u64(params.pilot_pattern.pilot_seed);

    let mut cells = Array2::from_elem((n, m), Complex64::new(0.0, 0.0));
    let mut roles = Array2::from_elem((n, m), CellRole::Data);
    let mut next_data = 0usize;
    for sym in 0..m {
        for sc in 0..n {
            if params.pilot_pattern.is_pilot(sc, sym) {
                cells[(sc, sym)] = random_qpsk(&mut pilot_rng);
                roles[(sc, sym)] = CellRole::Pilot;
            } else {
                cells[(sc, sym)] = data_symbols[next_data];
                next_data += 1;
            }
        }
    }
    debug_assert_eq!(next_data, data_symbols.len());

    Ok(FrameGrid {
        cells,
        roles,
        payload_bits: payload_bits.to_vec(),
    })
}

/// Pilot cell values alone (same generator as `build_frame`), for receivers
/// that know the pattern but not the payload.
pub fn pilot_cells(params: &OfdmParams) -> Array2<Complex64> {
    let n = params.n_subcarriers;
    let m = params.n_symbols;
    let mut pilot_rng = ChaCha8Rng::seed_from_u64(params.pilot_pattern.pilot_seed);
    let mut cells = Array2::from_elem((n, m), Complex64::new(0.0, 0.0));
    for sym in 0..m {
        for sc in 0..n {
            if params.pilot_pattern.is_pilot(sc, sym) {
                cells[(sc, sym)] = random_qpsk(&mut pilot_rng);
            }
        }
    }
    cells
}

/// Frequency-domain preamble rows: (symbol 1, symbol 2). Symbol 1 carries
/// `sqrt(2)`-scaled QPSK on even subcarriers and zeros on odd ones so both
/// symbols have the same energy.
pub fn preamble_frequency_symbols(params: &OfdmParams) -> (Vec<Complex64>, Vec<Complex64>) {
    let n = params.n_subcarriers;
    let mut rng = ChaCha8Rng::seed_from_u64(params.preamble.seed);
    let mut sym1 = vec![Complex64::new(0.0, 0.0); n];
    for sc in (0..n).step_by(2) {
        sym1[sc] = random_qpsk(&mut rng) * std::f64::consts::SQRT_2;
    }
    let sym2 = (0..n).map(|_| random_qpsk(&mut rng)).collect();
    (sym1, sym2)
}

/// Time-domain preamble (two symbols with cyclic prefixes). The useful part
/// of symbol 1 is built from a half-length inverse DFT and tiled twice, so
/// its halves are identical to the last bit.
pub fn preamble_time_domain(params: &OfdmParams) -> Vec<Complex64> {
    let n = params.n_subcarriers;
    let cp = params.cp_len;
    let (sym1, sym2) = preamble_frequency_symbols(params);

    // Even-subcarrier occupancy: x[k] = (sqrt2/N) * sum_u p[u] e^{j2pi uk/(N/2)}
    let mut half: Vec<Complex64> = sym1.iter().step_by(2).map(|&v| v / 2.0).collect();
    fft::inverse(&mut half);
    for v in half.iter_mut() {
        *v /= (n / 2) as f64;
    }
    let mut body1 = half.clone();
    body1.extend_from_slice(&half);

    let mut body2 = sym2;
    fft::inverse(&mut body2);
    for v in body2.iter_mut() {
        *v /= n as f64;
    }

    let mut out = Vec::with_capacity(2 * (n + cp));
    out.extend_from_slice(&body1[n - cp..]);
    out.extend_from_slice(&body1);
    out.extend_from_slice(&body2[n - cp..]);
    out.extend_from_slice(&body2);
    out
}

/// Inverse DFT with 1/N scaling per symbol, cyclic prefix insertion and
/// parallel-to-serial conversion; the preamble (when enabled) is prepended.
pub fn modulate(grid: &FrameGrid, params: &OfdmParams) -> Result<BasebandSignal> {
    params.validate()?;
    let n = params.n_subcarriers;
    let m = params.n_symbols;
    if grid.cells.dim() != (n, m) {
        return Err(Error::DimensionMismatch(format!(
            "grid is {:?}, params describe ({}, {})",
            grid.cells.dim(),
            n,
            m
        )));
    }
    let cp = params.cp_len;
    let mut samples = Vec::with_capacity(params.frame_len_samples());
    if params.preamble.enabled {
        samples.extend_from_slice(&preamble_time_domain(params));
    }
    let mut scratch = vec![Complex64::new(0.0, 0.0); n];
    for sym in 0..m {
        for sc in 0..n {
            scratch[sc] = grid.cells[(sc, sym)];
        }
        fft::inverse(&mut scratch);
        for v in scratch.iter_mut() {
            *v /= n as f64;
        }
        samples.extend_from_slice(&scratch[n - cp..]);
        samples.extend_from_slice(&scratch);
    }
    Ok(BasebandSignal::new(samples, params.sample_rate))
}

/// Serial-to-parallel conversion, cyclic prefix removal and unscaled forward
/// DFT per symbol. `start_index` addresses the first sample of the frame as
/// transmitted (the preamble, when enabled, is skipped internally); the raw
/// frequency-domain matrix is returned without any equalization.
pub fn demodulate(
    signal: &BasebandSignal,
    params: &OfdmParams,
    start_index: usize,
) -> Result<Array2<Complex64>> {
    params.validate()?;
    let n = params.n_subcarriers;
    let m = params.n_symbols;
    let cp = params.cp_len;
    let sym_len = params.samples_per_symbol();
    let data_start = start_index + params.preamble_symbols() * sym_len;
    let needed = m * sym_len;
    if data_start + needed > signal.len() {
        return Err(Error::SignalTooShort {
            needed,
            offset: data_start,
            available: signal.len(),
        });
    }
    let mut grid = Array2::from_elem((n, m), Complex64::new(0.0, 0.0));
    let mut scratch = vec![Complex64::new(0.0, 0.0); n];
    for sym in 0..m {
        let off = data_start + sym * sym_len + cp;
        scratch.copy_from_slice(&signal.samples[off..off + n]);
        fft::forward(&mut scratch);
        for sc in 0..n {
            grid[(sc, sym)] = scratch[sc];
        }
    }
    Ok(grid)
}
