//! Communication receiver: pilot-based channel estimation, zero-forcing
//! equalization, hard-decision demapping and link scoring.
//!
//! The channel estimate is least squares at pilot cells and bilinear in
//! between, with nearest-edge extrapolation outside the pilot hull. Cells
//! whose channel estimate is numerically zero cannot be equalized; they are
//! decided at random (seeded) and left out of the error-vector metric.

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ofdm::{pilot_cells, random_qpsk, CellRole, FrameGrid, OfdmParams};
use crate::units::linear_to_db;

/// Channel gain below this magnitude counts as an erasure.
pub const ERASURE_THRESHOLD: f64 = 1e-12;

/// Error-vector ratio is floored here so a perfect link stays finite in dB.
pub const EVM_FLOOR_DB: f64 = -80.0;

/// Decoded frame with its quality metrics.
#[derive(Debug, Clone)]
pub struct CommResult {
    /// Hard-decided payload bits in frame order.
    pub decided_bits: Vec<u8>,
    /// Full grid of decided symbols: known pilots, decided data cells.
    pub decided_grid: Array2<Complex64>,
    /// Channel estimate used for equalization.
    pub est_channel: Array2<Complex64>,
    pub bit_errors: usize,
    pub ber: f64,
    /// Error vector magnitude over equalized data cells, dB.
    pub evm_db: f64,
    /// Data cells that could not be equalized.
    pub erasures: usize,
}

/// Pilot row/column coordinate lists for the configured pattern.
fn pilot_axes(params: &OfdmParams) -> (Vec<usize>, Vec<usize>) {
    let pat = &params.pilot_pattern;
    let rows: Vec<usize> = match pat.kind {
        crate::ofdm::PilotKind::Lattice => {
            (0..params.n_subcarriers).step_by(pat.subcarrier_interval).collect()
        }
        crate::ofdm::PilotKind::Block => (0..params.n_subcarriers).collect(),
    };
    let cols: Vec<usize> = (0..params.n_symbols).step_by(pat.symbol_interval).collect();
    (rows, cols)
}

/// Bracketing indices and interpolation weight along one sorted axis, with
/// clamping (nearest value) outside the covered range.
fn bracket(axis: &[usize], x: usize) -> (usize, usize, f64) {
    match axis.binary_search(&x) {
        Ok(i) => (i, i, 0.0),
        Err(0) => (0, 0, 0.0),
        Err(i) if i == axis.len() => (i - 1, i - 1, 0.0),
        Err(i) => {
            let lo = axis[i - 1] as f64;
            let hi = axis[i] as f64;
            (i - 1, i, (x as f64 - lo) / (hi - lo))
        }
    }
}

/// Least-squares channel estimate at pilots, bilinear across the grid.
pub fn estimate_channel(
    rx_grid: &Array2<Complex64>,
    params: &OfdmParams,
) -> Result<Array2<Complex64>> {
    let (n, m) = rx_grid.dim();
    if (n, m) != (params.n_subcarriers, params.n_symbols) {
        return Err(Error::DimensionMismatch(format!(
            "grid {:?} against params ({}, {})",
            rx_grid.dim(),
            params.n_subcarriers,
            params.n_symbols
        )));
    }
    let pilots = pilot_cells(params);
    let (rows, cols) = pilot_axes(params);

    // LS estimates on the pilot lattice.
    let mut nodes = Array2::<Complex64>::zeros((rows.len(), cols.len()));
    for (ri, &r) in rows.iter().enumerate() {
        for (ci, &c) in cols.iter().enumerate() {
            nodes[(ri, ci)] = rx_grid[(r, c)] / pilots[(r, c)];
        }
    }

    let mut est = Array2::<Complex64>::zeros((n, m));
    for sc in 0..n {
        let (r0, r1, tr) = bracket(&rows, sc);
        for sym in 0..m {
            let (c0, c1, tc) = bracket(&cols, sym);
            let top = nodes[(r0, c0)] * (1.0 - tc) + nodes[(r0, c1)] * tc;
            let bottom = nodes[(r1, c0)] * (1.0 - tc) + nodes[(r1, c1)] * tc;
            est[(sc, sym)] = top * (1.0 - tr) + bottom * tr;
        }
    }
    Ok(est)
}

/// Zero-forcing equalization. Returns the equalized grid and the erasure
/// mask; erased cells are zeroed rather than divided by nothing.
pub fn equalize(
    rx_grid: &Array2<Complex64>,
    est_channel: &Array2<Complex64>,
) -> Result<(Array2<Complex64>, Array2<bool>)> {
    if rx_grid.dim() != est_channel.dim() {
        return Err(Error::DimensionMismatch(format!(
            "received {:?} against channel {:?}",
            rx_grid.dim(),
            est_channel.dim()
        )));
    }
    let mut eq = Array2::<Complex64>::zeros(rx_grid.dim());
    let mut erased = Array2::<bool>::from_elem(rx_grid.dim(), false);
    for ((idx, v), h) in eq.indexed_iter_mut().zip(est_channel.iter()) {
        if h.norm() < ERASURE_THRESHOLD {
            erased[idx] = true;
        } else {
            *v = rx_grid[idx] / h;
        }
    }
    Ok((eq, erased))
}

/// Nearest QPSK point and its bit pair for an equalized cell.
fn decide(v: Complex64) -> (Complex64, [u8; 2]) {
    let b1 = u8::from(v.re < 0.0);
    let b0 = u8::from(v.im < 0.0);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (
        Complex64::new(
            if b1 == 0 { s } else { -s },
            if b0 == 0 { s } else { -s },
        ),
        [b1, b0],
    )
}

/// Hard-decide the equalized grid and score it against the transmitted
/// frame. Erased cells draw a random symbol (deterministic in `seed`),
/// count toward bit errors, and stay out of the error-vector sum.
pub fn demap_and_score(
    eq_grid: &Array2<Complex64>,
    erased: &Array2<bool>,
    est_channel: &Array2<Complex64>,
    tx: &FrameGrid,
    params: &OfdmParams,
    seed: u64,
) -> Result<CommResult> {
    if eq_grid.dim() != tx.cells.dim() {
        return Err(Error::DimensionMismatch(format!(
            "equalized {:?} against transmitted {:?}",
            eq_grid.dim(),
            tx.cells.dim()
        )));
    }
    let (n, m) = eq_grid.dim();
    let pilots = pilot_cells(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut decided_bits = Vec::with_capacity(tx.payload_bits.len());
    let mut decided_grid = Array2::<Complex64>::zeros((n, m));
    let mut bit_errors = 0usize;
    let mut err_energy = 0.0f64;
    let mut ref_energy = 0.0f64;
    let mut erasures = 0usize;
    let mut bit_cursor = 0usize;

    // Same traversal order as frame construction keeps bits aligned.
    for sym in 0..m {
        for sc in 0..n {
            match tx.roles[(sc, sym)] {
                CellRole::Pilot => {
                    decided_grid[(sc, sym)] = pilots[(sc, sym)];
                }
                CellRole::Data => {
                    let (point, bits) = if erased[(sc, sym)] {
                        erasures += 1;
                        let s = random_qpsk(&mut rng);
                        let (_, bits) = decide(s);
                        (s, bits)
                    } else {
                        let v = eq_grid[(sc, sym)];
                        err_energy += (v - tx.cells[(sc, sym)]).norm_sqr();
                        ref_energy += tx.cells[(sc, sym)].norm_sqr();
                        decide(v)
                    };
                    decided_grid[(sc, sym)] = point;
                    for b in bits {
                        if b != tx.payload_bits[bit_cursor] {
                            bit_errors += 1;
                        }
                        decided_bits.push(b);
                        bit_cursor += 1;
                    }
                }
            }
        }
    }

    let evm_db = if ref_energy > 0.0 && err_energy > 0.0 {
        linear_to_db(err_energy / ref_energy).max(EVM_FLOOR_DB)
    } else {
        EVM_FLOOR_DB
    };
    Ok(CommResult {
        decided_bits,
        decided_grid,
        est_channel: est_channel.clone(),
        bit_errors,
        ber: bit_errors as f64 / tx.payload_bits.len().max(1) as f64,
        evm_db,
        erasures,
    })
}

/// Full receive chain on an already-demodulated grid: estimate, equalize,
/// decide, score.
pub fn receive_and_score(
    rx_grid: &Array2<Complex64>,
    tx: &FrameGrid,
    params: &OfdmParams,
    seed: u64,
) -> Result<CommResult> {
    let est = estimate_channel(rx_grid, params)?;
    let (eq, erased) = equalize(rx_grid, &est)?;
    demap_and_score(&eq, &erased, &est, tx, params, seed)
}
