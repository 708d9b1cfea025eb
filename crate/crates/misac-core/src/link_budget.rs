//! Analytic power-domain classification of multistatic interference.
//!
//! Closed-form received powers for the four arrival classes at an ISAC
//! node: direct coupling, monostatic target reflection, bistatic
//! line-of-sight and bistatic target reflection, plus their pairwise ratios
//! and the SINR that drives the cancellation decision. All powers are dBm
//! for a stated transmit power; amplitudes for the waveform simulation are
//! derived from these values in `channel`.

use std::io;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{db_to_linear, dbm_to_mw, linear_to_db};

/// Boltzmann constant, J/K.
const BOLTZMANN: f64 = 1.380_649e-23;

/// Per-path ranges of one transmitter/receiver/target layout, metres.
///
/// `r_los` is the bistatic transmitter-to-receiver distance, `r_mono` the
/// one-way range from the monostatic node to the target, `r_tx_tgt` and
/// `r_tgt_rx` the two legs of the bistatic reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    #[serde(rename = "r_los_m")]
    pub r_los: f64,
    #[serde(rename = "r_mono_m")]
    pub r_mono: f64,
    #[serde(rename = "r_tx_tgt_m")]
    pub r_tx_tgt: f64,
    #[serde(rename = "r_tgt_rx_m")]
    pub r_tgt_rx: f64,
}

impl LinkGeometry {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.r_los, self.r_mono, self.r_tx_tgt, self.r_tgt_rx];
        if ranges.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::config("all ranges must be positive and finite"));
        }
        Ok(())
    }

    /// Ranges for a concrete 2D layout: monostatic node (which also hosts
    /// the receiver), bistatic transmitter, target.
    pub fn from_positions(mono_node: [f64; 2], bi_tx_node: [f64; 2], target: [f64; 2]) -> Self {
        let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let r_mono = dist(mono_node, target);
        LinkGeometry {
            r_los: dist(mono_node, bi_tx_node),
            r_mono,
            r_tx_tgt: dist(bi_tx_node, target),
            r_tgt_rx: r_mono,
        }
    }
}

/// Transmit powers, antenna gains, radar cross sections and noise for one
/// link-budget evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioParams {
    pub p_tx_dbm: f64,
    pub g_tx_dbi: f64,
    pub g_rx_dbi: f64,
    pub wavelength_m: f64,
    pub sigma_mono_dbsm: f64,
    pub sigma_bi_dbsm: f64,
    /// Direct-coupling power relative to the transmit power, dB (<= 0).
    pub coupling_rel_db: f64,
    pub noise_power_dbm: f64,
}

impl RadioParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength_m.is_finite() && self.wavelength_m > 0.0) {
            return Err(Error::config("wavelength must be positive"));
        }
        if self.coupling_rel_db > 0.0 {
            return Err(Error::config("coupling must not exceed the transmit power"));
        }
        Ok(())
    }
}

/// Thermal noise floor 10log10(kTB) + 30 + NF at T = 290 K, dBm.
pub fn thermal_noise_dbm(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    10.0 * (BOLTZMANN * 290.0 * bandwidth_hz).log10() + 30.0 + noise_figure_db
}

/// Direct coupling power: transmit power reduced by the isolation, dBm.
pub fn p_coupling(radio: &RadioParams) -> f64 {
    radio.p_tx_dbm + radio.coupling_rel_db
}

/// Free-space one-way received power of the bistatic line of sight, dBm.
pub fn p_bi_los(radio: &RadioParams, geometry: &LinkGeometry) -> f64 {
    radio.p_tx_dbm + radio.g_tx_dbi + radio.g_rx_dbi
        + 20.0 * (radio.wavelength_m / (4.0 * std::f64::consts::PI * geometry.r_los)).log10()
}

/// Monostatic reflection power (two-way, R^4 law), dBm.
pub fn p_mono_tgt(radio: &RadioParams, geometry: &LinkGeometry) -> f64 {
    let four_pi = 4.0 * std::f64::consts::PI;
    radio.p_tx_dbm
        + radio.g_tx_dbi
        + radio.g_rx_dbi
        + radio.sigma_mono_dbsm
        + 20.0 * radio.wavelength_m.log10()
        - 30.0 * four_pi.log10()
        - 40.0 * geometry.r_mono.log10()
}

/// Bistatic reflection power over the two legs, dBm.
pub fn p_bi_tgt(radio: &RadioParams, geometry: &LinkGeometry) -> f64 {
    let four_pi = 4.0 * std::f64::consts::PI;
    radio.p_tx_dbm
        + radio.g_tx_dbi
        + radio.g_rx_dbi
        + radio.sigma_bi_dbsm
        + 20.0 * radio.wavelength_m.log10()
        - 30.0 * four_pi.log10()
        - 20.0 * geometry.r_tx_tgt.log10()
        - 20.0 * geometry.r_tgt_rx.log10()
}

/// Power ratio of the bistatic LoS over the monostatic reflection,
/// 10log10(4 pi R^4 / (sigma_mono R_LoS^2)) dB.
pub fn ratio_los_to_mono(radio: &RadioParams, geometry: &LinkGeometry) -> f64 {
    let four_pi = 4.0 * std::f64::consts::PI;
    10.0 * four_pi.log10() + 40.0 * geometry.r_mono.log10()
        - radio.sigma_mono_dbsm
        - 20.0 * geometry.r_los.log10()
}

/// True iff the LoS power strictly exceeds the bistatic reflection. The
/// exact ratio of the one-way and two-leg powers gives the condition
/// 4 pi (R_TxTgt R_TgtRx)^2 > R_LoS^2 sigma_bi in linear units.
pub fn los_dominates_bi_reflection(radio: &RadioParams, geometry: &LinkGeometry) -> bool {
    let four_pi = 4.0 * std::f64::consts::PI;
    let lhs = four_pi * (geometry.r_tx_tgt * geometry.r_tgt_rx).powi(2);
    let rhs = geometry.r_los.powi(2) * db_to_linear(radio.sigma_bi_dbsm);
    lhs > rhs
}

/// Power ratio of the bistatic over the monostatic reflection, dB.
pub fn ratio_bi_to_mono_tgt(radio: &RadioParams, geometry: &LinkGeometry) -> f64 {
    40.0 * geometry.r_mono.log10()
        - 20.0 * geometry.r_tx_tgt.log10()
        - 20.0 * geometry.r_tgt_rx.log10()
        + radio.sigma_bi_dbsm
        - radio.sigma_mono_dbsm
}

/// SINR of the bistatic-origin arrivals over monostatic reflection plus
/// noise, dB: 10log10((P_biLoS + P_biTgt) / (P_monoTgt + P_noise)).
pub fn sinr(radio: &RadioParams, geometry: &LinkGeometry) -> Result<f64> {
    let num = dbm_to_mw(p_bi_los(radio, geometry)) + dbm_to_mw(p_bi_tgt(radio, geometry));
    let den = dbm_to_mw(p_mono_tgt(radio, geometry)) + dbm_to_mw(radio.noise_power_dbm);
    if den == 0.0 {
        return Err(Error::config("SINR denominator is zero"));
    }
    Ok(linear_to_db(num / den))
}

/// SINR evaluated over a 2D grid of candidate target positions.
#[derive(Debug, Clone)]
pub struct SpatialSinrMap {
    /// dB values, indexed `[(ix, iy)]`; NaN marks grid points coincident
    /// with a node.
    pub values: Array2<f64>,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl SpatialSinrMap {
    /// Row-major CSV: one line per grid point with its coordinates.
    pub fn write_csv<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "x_m,y_m,sinr_db")?;
        for (iy, y) in self.ys.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                writeln!(w, "{x},{y},{}", self.values[(ix, iy)])?;
            }
        }
        Ok(())
    }
}

/// Sweep the target position across a square grid and evaluate the SINR at
/// each point, with the given RCS applied to both reflection classes. Grid
/// points closer than one step to either node are marked NaN.
pub fn spatial_sinr_map(
    radio: &RadioParams,
    mono_node: [f64; 2],
    bi_tx_node: [f64; 2],
    rcs_dbsm: f64,
    grid_extent_m: f64,
    grid_step_m: f64,
) -> Result<SpatialSinrMap> {
    if grid_step_m <= 0.0 || grid_extent_m <= 0.0 {
        return Err(Error::config("grid extent and step must be positive"));
    }
    let mut swept = *radio;
    swept.sigma_mono_dbsm = rcs_dbsm;
    swept.sigma_bi_dbsm = rcs_dbsm;

    let half = grid_extent_m / 2.0;
    let steps = (grid_extent_m / grid_step_m).round() as usize + 1;
    let axis: Vec<f64> = (0..steps).map(|i| -half + i as f64 * grid_step_m).collect();
    let mut values = Array2::from_elem((steps, steps), f64::NAN);
    for (iy, &y) in axis.iter().enumerate() {
        for (ix, &x) in axis.iter().enumerate() {
            let geometry = LinkGeometry::from_positions(mono_node, bi_tx_node, [x, y]);
            if geometry.r_mono < grid_step_m || geometry.r_tx_tgt < grid_step_m {
                continue; // singular range at a node
            }
            values[(ix, iy)] = sinr(&swept, &geometry)?;
        }
    }
    Ok(SpatialSinrMap {
        values,
        xs: axis.clone(),
        ys: axis,
    })
}
