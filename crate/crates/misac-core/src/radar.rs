//! Radar channel estimation and range-Doppler processing.
//!
//! The radar channel is the element-wise ratio of received to transmitted
//! frequency-domain cells. A unitary IDFT along the subcarrier axis turns
//! delay phase ramps into range peaks; a unitary DFT along the symbol axis
//! turns Doppler rotations into Doppler peaks. The Doppler axis is centered
//! (zero in the middle), the delay axis is one-sided. With this scaling the
//! map holds exactly the channel energy, and a unit-magnitude single-path
//! channel integrates to the full N*M processing gain over the noise floor.

use std::io;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::ofdm::{OfdmParams, SPEED_OF_LIGHT};
use crate::units::linear_to_db;

/// Interpretation of the delay axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadarMode {
    /// Round-trip delays: one bin is c/(2B) metres.
    Mono,
    /// One-way excess delays relative to the LoS: one bin is c/B metres.
    BiRelative,
}

/// Range-Doppler magnitude/phase surface with axis metadata.
#[derive(Debug, Clone)]
pub struct RangeDopplerMap {
    /// `(delay bin, Doppler index)`; Doppler index M/2 is zero Hz.
    pub cells: Array2<Complex64>,
    pub range_bin_m: f64,
    pub doppler_bin_hz: f64,
    pub mode: RadarMode,
}

impl RangeDopplerMap {
    pub fn n_range_bins(&self) -> usize {
        self.cells.dim().0
    }

    pub fn n_doppler_bins(&self) -> usize {
        self.cells.dim().1
    }

    /// Signed Doppler bin of a raw column index (axis is centered).
    pub fn signed_doppler_bin(&self, index: usize) -> isize {
        index as isize - (self.n_doppler_bins() / 2) as isize
    }

    /// Raw column index of a signed Doppler bin.
    pub fn doppler_index(&self, signed_bin: isize) -> usize {
        (signed_bin + (self.n_doppler_bins() / 2) as isize).rem_euclid(self.n_doppler_bins() as isize)
            as usize
    }

    pub fn energy(&self) -> f64 {
        self.cells.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Indices of the strongest cell.
    pub fn peak_cell(&self) -> (usize, usize) {
        let mut best = (0usize, 0usize);
        let mut best_val = f64::NEG_INFINITY;
        for ((r, d), c) in self.cells.indexed_iter() {
            let v = c.norm_sqr();
            if v > best_val {
                best_val = v;
                best = (r, d);
            }
        }
        best
    }

    /// Long-form CSV of the map magnitude in dB, normalized to the peak.
    pub fn write_csv<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        let peak = self.cells[self.peak_cell()].norm_sqr();
        writeln!(w, "range_m,doppler_hz,magnitude_db")?;
        for ((r, d), c) in self.cells.indexed_iter() {
            let range = r as f64 * self.range_bin_m;
            let doppler = self.signed_doppler_bin(d) as f64 * self.doppler_bin_hz;
            let mag = linear_to_db(c.norm_sqr() / peak);
            writeln!(w, "{range},{doppler},{mag}")?;
        }
        Ok(())
    }
}

/// One extracted peak with physical coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Detection {
    pub range_bin: usize,
    /// Signed, centered Doppler bin.
    pub doppler_bin: isize,
    pub range_m: f64,
    pub doppler_hz: f64,
    pub peak_amplitude: Complex64,
    pub image_sinr_db: f64,
}

/// Cells over which the map noise floor is averaged.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseRegion {
    /// Delay bins in `[lo_frac, hi_frac)` of the axis: a far band beyond
    /// any plausible target, unaffected by peak skirts near the origin.
    FarBand { lo_frac: f64, hi_frac: f64 },
    /// Everything outside square zones of the given half-width around the
    /// listed `(range bin, Doppler index)` centers (toroidal distance).
    OutsideZones {
        centers: Vec<(usize, usize)>,
        half_width: usize,
    },
}

impl NoiseRegion {
    /// Far half-to-three-quarters band of the delay axis.
    pub fn far_band_default() -> Self {
        NoiseRegion::FarBand {
            lo_frac: 0.5,
            hi_frac: 0.75,
        }
    }

    fn contains(&self, map: &RangeDopplerMap, r: usize, d: usize) -> bool {
        match self {
            NoiseRegion::FarBand { lo_frac, hi_frac } => {
                let n = map.n_range_bins() as f64;
                let frac = r as f64 / n;
                frac >= *lo_frac && frac < *hi_frac
            }
            NoiseRegion::OutsideZones {
                centers,
                half_width,
            } => !centers
                .iter()
                .any(|&c| within_zone(map, c, (r, d), *half_width)),
        }
    }
}

fn toroidal_distance(a: usize, b: usize, modulus: usize) -> usize {
    let d = (a as isize - b as isize).rem_euclid(modulus as isize) as usize;
    d.min(modulus - d)
}

fn within_zone(
    map: &RangeDopplerMap,
    center: (usize, usize),
    cell: (usize, usize),
    half_width: usize,
) -> bool {
    toroidal_distance(center.0, cell.0, map.n_range_bins()) <= half_width
        && toroidal_distance(center.1, cell.1, map.n_doppler_bins()) <= half_width
}

/// Mean cell power over the region.
pub fn noise_floor(map: &RangeDopplerMap, region: &NoiseRegion) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((r, d), c) in map.cells.indexed_iter() {
        if region.contains(map, r, d) {
            sum += c.norm_sqr();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyNoiseRegion);
    }
    Ok(sum / count as f64)
}

/// Peak power over the average noise-region power, dB.
pub fn image_sinr(
    map: &RangeDopplerMap,
    peak: (usize, usize),
    region: &NoiseRegion,
) -> Result<f64> {
    let floor = noise_floor(map, region)?;
    Ok(linear_to_db(map.cells[peak].norm_sqr() / floor))
}

/// Element-wise received/transmitted cell ratio.
pub fn estimate_radar_channel(
    rx_grid: &Array2<Complex64>,
    tx_grid: &Array2<Complex64>,
) -> Result<Array2<Complex64>> {
    if rx_grid.dim() != tx_grid.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} versus {:?}",
            rx_grid.dim(),
            tx_grid.dim()
        )));
    }
    for ((n, m), x) in tx_grid.indexed_iter() {
        if x.norm_sqr() < 1e-24 {
            return Err(Error::ZeroTransmitCell { n, m });
        }
    }
    Ok(rx_grid / tx_grid)
}

/// Unitary delay/Doppler transform of the radar channel.
pub fn rd_map(channel: &Array2<Complex64>, params: &OfdmParams, mode: RadarMode) -> RangeDopplerMap {
    let (n, m) = channel.dim();
    let mut cells = channel.clone();

    // Delay: inverse transform down each subcarrier column (fixed symbol).
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    let n_scale = (n as f64).sqrt();
    for sym in 0..m {
        for sc in 0..n {
            col[sc] = cells[(sc, sym)];
        }
        fft::inverse(&mut col);
        for sc in 0..n {
            cells[(sc, sym)] = col[sc] / n_scale;
        }
    }

    // Doppler: forward transform along each delay row, then center it.
    let mut row = vec![Complex64::new(0.0, 0.0); m];
    let m_scale = (m as f64).sqrt();
    for sc in 0..n {
        for sym in 0..m {
            row[sym] = cells[(sc, sym)];
        }
        fft::forward(&mut row);
        fft::fftshift(&mut row);
        for sym in 0..m {
            cells[(sc, sym)] = row[sym] / m_scale;
        }
    }

    let range_bin_m = match mode {
        RadarMode::Mono => SPEED_OF_LIGHT / (2.0 * params.bandwidth()),
        RadarMode::BiRelative => SPEED_OF_LIGHT / params.bandwidth(),
    };
    RangeDopplerMap {
        cells,
        range_bin_m,
        doppler_bin_hz: params.doppler_resolution(),
        mode,
    }
}

/// Bin indices to physical units for the given mode.
pub fn bins_to_physical(
    params: &OfdmParams,
    mode: RadarMode,
    range_bin: usize,
    signed_doppler_bin: isize,
) -> (f64, f64) {
    let per_bin = match mode {
        RadarMode::Mono => SPEED_OF_LIGHT / (2.0 * params.bandwidth()),
        RadarMode::BiRelative => SPEED_OF_LIGHT / params.bandwidth(),
    };
    (
        range_bin as f64 * per_bin,
        signed_doppler_bin as f64 * params.doppler_resolution(),
    )
}

/// Greedy strongest-first peak extraction. Each accepted peak excludes a
/// toroidal square of the given half-width from further detection; image
/// SINRs are measured against the complement of all exclusion zones.
pub fn detect_peaks(
    map: &RangeDopplerMap,
    max_count: usize,
    exclusion_half_width: usize,
) -> Result<Vec<Detection>> {
    let mut centers: Vec<(usize, usize)> = Vec::new();
    for _ in 0..max_count {
        let mut best: Option<((usize, usize), f64)> = None;
        for ((r, d), c) in map.cells.indexed_iter() {
            if centers
                .iter()
                .any(|&z| within_zone(map, z, (r, d), exclusion_half_width))
            {
                continue;
            }
            let v = c.norm_sqr();
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some(((r, d), v));
            }
        }
        match best {
            Some((cell, _)) => centers.push(cell),
            None => break, // zones swallowed the whole map
        }
    }

    let region = NoiseRegion::OutsideZones {
        centers: centers.clone(),
        half_width: exclusion_half_width,
    };
    centers
        .into_iter()
        .map(|cell| Ok(make_detection(map, cell, image_sinr(map, cell, &region)?)))
        .collect()
}

/// Re-score detections against a different noise region.
pub fn score_detections(
    map: &RangeDopplerMap,
    detections: &[Detection],
    region: &NoiseRegion,
) -> Result<Vec<Detection>> {
    detections
        .iter()
        .map(|det| {
            let cell = (det.range_bin, map.doppler_index(det.doppler_bin));
            let sinr = image_sinr(map, cell, region)?;
            Ok(Detection {
                image_sinr_db: sinr,
                ..*det
            })
        })
        .collect()
}

fn make_detection(map: &RangeDopplerMap, cell: (usize, usize), image_sinr_db: f64) -> Detection {
    let signed = map.signed_doppler_bin(cell.1);
    Detection {
        range_bin: cell.0,
        doppler_bin: signed,
        range_m: cell.0 as f64 * map.range_bin_m,
        doppler_hz: signed as f64 * map.doppler_bin_hz,
        peak_amplitude: map.cells[cell],
        image_sinr_db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{apply_path, PathOrigin, PathSpec};
    use crate::ofdm::{build_frame, demodulate, generate_payload_bits, modulate, PreambleConfig};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> OfdmParams {
        let mut p = OfdmParams::wideband_28ghz();
        p.n_subcarriers = 256;
        p.cp_len = 64;
        p.n_symbols = 64;
        p.subcarrier_spacing = p.sample_rate / 256.0;
        p.preamble = PreambleConfig::disabled();
        p.validate().unwrap();
        p
    }

    /// Single-path channel model: delay ramp along subcarriers, Doppler
    /// rotation along symbols.
    fn synthetic_channel(
        p: &OfdmParams,
        amp: Complex64,
        delay_bins: f64,
        doppler_bins: f64,
    ) -> Array2<Complex64> {
        let (n, m) = (p.n_subcarriers, p.n_symbols);
        let mut h = Array2::from_elem((n, m), Complex64::new(0.0, 0.0));
        for sym in 0..m {
            for sc in 0..n {
                let phase = -2.0 * std::f64::consts::PI * sc as f64 * delay_bins / n as f64
                    + 2.0 * std::f64::consts::PI * sym as f64 * doppler_bins / m as f64;
                h[(sc, sym)] = amp * Complex64::from_polar(1.0, phase);
            }
        }
        h
    }

    #[test]
    fn channel_of_identical_grids_is_all_ones() {
        let p = params();
        let grid = build_frame(&p, &generate_payload_bits(&p, 1)).unwrap();
        let h = estimate_radar_channel(&grid.cells, &grid.cells).unwrap();
        for c in h.iter() {
            assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn channel_of_rotated_grid_is_constant_phase() {
        let p = params();
        let grid = build_frame(&p, &generate_payload_bits(&p, 2)).unwrap();
        let rot = Complex64::from_polar(1.0, 0.7);
        let rx = grid.cells.mapv(|c| c * rot);
        let h = estimate_radar_channel(&rx, &grid.cells).unwrap();
        for c in h.iter() {
            assert!((c - rot).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_transmit_cell_is_rejected() {
        let p = params();
        let grid = build_frame(&p, &generate_payload_bits(&p, 3)).unwrap();
        let mut tx = grid.cells.clone();
        tx[(5, 4)] = Complex64::new(0.0, 0.0);
        assert!(matches!(
            estimate_radar_channel(&grid.cells, &tx),
            Err(Error::ZeroTransmitCell { n: 5, m: 4 })
        ));
    }

    #[test]
    fn estimated_channel_matches_path_model_for_integer_delay() {
        let p = params();
        let grid = build_frame(&p, &generate_payload_bits(&p, 4)).unwrap();
        let tx = modulate(&grid, &p).unwrap();
        let d = 10usize;
        let amp = Complex64::new(0.8, -0.3);
        let path = PathSpec {
            delay_s: d as f64 / p.sample_rate,
            doppler_hz: 0.0,
            amplitude: amp,
            origin: PathOrigin::Mono,
        };
        let rx = apply_path(&tx, &path).unwrap();
        let z = demodulate(&rx, &p, 0).unwrap();
        let h = estimate_radar_channel(&z, &grid.cells).unwrap();
        let model = synthetic_channel(&p, amp, d as f64, 0.0);
        let max_err = h
            .iter()
            .zip(model.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-6, "max channel error {max_err}");
    }

    #[test]
    fn all_ones_channel_collapses_to_origin_peak() {
        let p = params();
        let h = Array2::from_elem((p.n_subcarriers, p.n_symbols), Complex64::new(1.0, 0.0));
        let map = rd_map(&h, &p, RadarMode::Mono);
        let (r, d) = map.peak_cell();
        assert_eq!(r, 0);
        assert_eq!(map.signed_doppler_bin(d), 0);
        let peak_power = map.cells[(r, d)].norm_sqr();
        assert_relative_eq!(
            peak_power,
            (p.n_subcarriers * p.n_symbols) as f64,
            max_relative = 1e-9
        );
        for ((rr, dd), c) in map.cells.indexed_iter() {
            if (rr, dd) != (r, d) {
                let rel_db = linear_to_db(c.norm_sqr() / peak_power);
                assert!(rel_db < -250.0, "sidelobe at {rel_db} dB");
            }
        }
    }

    #[test]
    fn integer_bin_injection_lands_on_its_bins() {
        let p = params();
        let h = synthetic_channel(&p, Complex64::new(1.0, 0.0), 10.0, 5.0);
        let map = rd_map(&h, &p, RadarMode::Mono);
        let (r, d) = map.peak_cell();
        assert_eq!(r, 10);
        assert_eq!(map.signed_doppler_bin(d), 5);

        let h = synthetic_channel(&p, Complex64::new(1.0, 0.0), 3.0, -7.0);
        let map = rd_map(&h, &p, RadarMode::Mono);
        let (r, d) = map.peak_cell();
        assert_eq!(r, 3);
        assert_eq!(map.signed_doppler_bin(d), -7);
    }

    #[test]
    fn map_preserves_channel_energy() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Array2::from_shape_fn((p.n_subcarriers, p.n_symbols), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let map = rd_map(&h, &p, RadarMode::Mono);
        let h_energy: f64 = h.iter().map(|c| c.norm_sqr()).sum();
        assert_relative_eq!(map.energy(), h_energy, max_relative = 1e-9);
    }

    #[test]
    fn map_formation_is_linear() {
        let p = params();
        let h1 = synthetic_channel(&p, Complex64::new(0.5, 0.2), 4.0, 2.0);
        let h2 = synthetic_channel(&p, Complex64::new(-0.1, 0.9), 17.0, -9.0);
        let sum_map = rd_map(&(&h1 + &h2), &p, RadarMode::Mono);
        let map1 = rd_map(&h1, &p, RadarMode::Mono);
        let map2 = rd_map(&h2, &p, RadarMode::Mono);
        for ((r, d), c) in sum_map.cells.indexed_iter() {
            let expect = map1.cells[(r, d)] + map2.cells[(r, d)];
            assert!((c - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn two_separated_targets_are_found_in_order() {
        let p = params();
        let strong = synthetic_channel(&p, Complex64::new(1.0, 0.0), 20.0, 4.0);
        let weak = synthetic_channel(&p, Complex64::new(0.1, 0.0), 60.0, -10.0);
        let map = rd_map(&(&strong + &weak), &p, RadarMode::Mono);
        let dets = detect_peaks(&map, 2, 4).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!((dets[0].range_bin, dets[0].doppler_bin), (20, 4));
        assert_eq!((dets[1].range_bin, dets[1].doppler_bin), (60, -10));
        assert!(dets[0].peak_amplitude.norm() > dets[1].peak_amplitude.norm());
        // 20 dB amplitude gap survives the transform.
        let gap = linear_to_db(
            dets[0].peak_amplitude.norm_sqr() / dets[1].peak_amplitude.norm_sqr(),
        );
        assert_relative_eq!(gap, 20.0, epsilon = 0.1);
    }

    #[test]
    fn image_sinr_direct_ratios() {
        let p = params();
        // Build the map directly: uniform floor with one hot cell.
        let mut cells = Array2::from_elem(
            (p.n_subcarriers, p.n_symbols),
            Complex64::new(1e-3, 0.0),
        );
        cells[(10, 32)] = Complex64::new(1.0, 0.0);
        let map = RangeDopplerMap {
            cells,
            range_bin_m: 0.3,
            doppler_bin_hz: 381.47,
            mode: RadarMode::Mono,
        };
        let region = NoiseRegion::OutsideZones {
            centers: vec![(10, 32)],
            half_width: 4,
        };
        let sinr = image_sinr(&map, (10, 32), &region).unwrap();
        assert_relative_eq!(sinr, 60.0, epsilon = 1e-6);

        // Doubling the peak amplitude adds 6.02 dB.
        let mut cells2 = map.cells.clone();
        cells2[(10, 32)] *= 2.0;
        let map2 = RangeDopplerMap { cells: cells2, ..map.clone() };
        let sinr2 = image_sinr(&map2, (10, 32), &region).unwrap();
        assert_relative_eq!(sinr2 - sinr, 20.0 * 2.0f64.log10(), epsilon = 1e-9);

        // Degenerate region: zones covering everything leave no noise cells.
        let all = NoiseRegion::OutsideZones {
            centers: vec![(0, 0)],
            half_width: p.n_subcarriers.max(p.n_symbols),
        };
        assert!(matches!(
            image_sinr(&map, (10, 32), &all),
            Err(Error::EmptyNoiseRegion)
        ));
    }

    #[test]
    fn far_band_region_skips_near_bins() {
        let p = params();
        let h = synthetic_channel(&p, Complex64::new(1.0, 0.0), 5.0, 0.0);
        let map = rd_map(&h, &p, RadarMode::Mono);
        let region = NoiseRegion::far_band_default();
        // The target sits at bin 5, well outside [N/2, 3N/4): the floor is
        // numerical residue only, hundreds of dB below the peak.
        let sinr = image_sinr(&map, (5, map.doppler_index(0)), &region).unwrap();
        assert!(sinr > 200.0, "noiseless far-band image SINR {sinr}");
    }

    #[test]
    fn image_sinr_tracks_processing_gain_at_unit_cell_snr() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut h = synthetic_channel(&p, Complex64::new(1.0, 0.0), 12.0, 6.0);
        // Per-cell complex noise with the same power as the target ramp.
        for c in h.iter_mut() {
            *c += Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                * (1.5f64).sqrt(); // uniform variance 1/3 per part; 2*(1.5/3)=1
        }
        let map = rd_map(&h, &p, RadarMode::Mono);
        let det = &detect_peaks(&map, 1, 4).unwrap()[0];
        assert_eq!((det.range_bin, det.doppler_bin), (12, 6));
        let pg = p.processing_gain_db();
        assert!(
            (det.image_sinr_db - pg).abs() < 0.6,
            "image SINR {:.2} dB against processing gain {:.2} dB",
            det.image_sinr_db,
            pg
        );
    }

    #[test]
    fn physical_units_for_reference_grid() {
        let p = OfdmParams::wideband_28ghz();
        let (r, f) = bins_to_physical(&p, RadarMode::Mono, 40, -5);
        assert_relative_eq!(r, 11.99, epsilon = 0.01);
        assert_relative_eq!(f, -1907.35, epsilon = 0.05);
        let (rb, _) = bins_to_physical(&p, RadarMode::BiRelative, 10, 0);
        assert_relative_eq!(rb, 6.0, epsilon = 0.01);
    }

    #[test]
    fn csv_export_normalizes_to_peak() {
        let p = params();
        let h = synthetic_channel(&p, Complex64::new(0.7, 0.1), 8.0, 3.0);
        let map = rd_map(&h, &p, RadarMode::Mono);
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("range_m,doppler_hz,magnitude_db"));
        let max_db = lines
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(max_db, 0.0, epsilon = 1e-12);
    }
}
