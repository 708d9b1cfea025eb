//! Successive interference cancellation over the composite capture.
//!
//! The canceller peels interference in a fixed protocol order:
//!
//! 1. transmitter-to-receiver coupling, always, as a zero-delay
//!    zero-Doppler component of the monostatic radar channel,
//! 2. monostatic target reflections, iteratively strongest-first, as long
//!    as the strongest image peak clears the decision threshold,
//! 3. the bistatic line of sight, once, by synchronizing, decoding and
//!    regenerating that frame.
//!
//! Reflections are cancelled in the radar-channel domain: one complex
//! exponential per detected delay/Doppler bin, scaled so its own image peak
//! reproduces the measured one, re-modulated and subtracted in time. The
//! decision trace, residual and per-branch subtracted signals are all kept
//! so callers can score cancellation ratios against isolated references.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::resample_linear;
use crate::comm::{self, CommResult};
use crate::error::{Error, Result};
use crate::fft;
use crate::ofdm::{
    demodulate, modulate, preamble_frequency_symbols, BasebandSignal, FrameGrid, OfdmParams,
};
use crate::radar::{
    estimate_radar_channel, image_sinr, rd_map, Detection, NoiseRegion, RadarMode, RangeDopplerMap,
};
use crate::sync::{compensate, estimate_all, SyncEstimates};

/// Canceller policy knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SicConfig {
    /// Image peaks at or above this clear the monostatic cancellation gate.
    pub image_sinr_threshold_db: f64,
    /// Upper bound on monostatic cancellation passes.
    pub max_iterations: usize,
    /// Peaks below the floor by this margin are not treated as targets.
    pub detection_floor_db: f64,
    /// Seed for erasure decisions in the decode step.
    pub comm_seed: u64,
    /// Refine detections to continuous bin coordinates before the
    /// reconstruction. Off by default: the baseline protocol feeds the
    /// quantized detection bins into the atom and accepts the leakage
    /// residue of off-bin targets.
    #[serde(default)]
    pub refine_fractional_bins: bool,
}

impl Default for SicConfig {
    fn default() -> Self {
        SicConfig {
            image_sinr_threshold_db: 45.0,
            max_iterations: 8,
            detection_floor_db: 15.0,
            comm_seed: 0,
            refine_fractional_bins: false,
        }
    }
}

/// One cancellation move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SicAction {
    CancelCoupling,
    CancelMono,
    CancelBiLos,
}

/// Whether a measured image peak obliges a monostatic cancellation pass.
/// The threshold itself is included.
pub fn mono_gate_open(image_sinr_db: f64, config: &SicConfig) -> bool {
    image_sinr_db >= config.image_sinr_threshold_db
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SicStepRecord {
    pub action: SicAction,
    pub iteration: usize,
    pub detection: Option<Detection>,
    pub image_sinr_before_db: Option<f64>,
    /// Same cell re-measured after the subtraction.
    pub image_sinr_after_db: Option<f64>,
    pub sync: Option<SyncEstimates>,
    pub ber: Option<f64>,
    pub evm_db: Option<f64>,
    pub aborted: bool,
    pub note: String,
}

/// Serializable decision history of one canceller run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SicTrace {
    pub steps: Vec<SicStepRecord>,
    /// First substantive move after coupling removal.
    pub decision: Option<SicAction>,
    /// Strongest image peak at the moment of that decision.
    pub mono_image_sinr_at_decision_db: Option<f64>,
    /// Strongest image peak re-measured after the cross-link cancellation,
    /// when the monostatic frame is known.
    pub mono_image_sinr_after_bi_db: Option<f64>,
    /// The monostatic loop stopped on the iteration cap with its gate
    /// still open.
    pub iteration_cap_hit: bool,
}

/// Canceller output: trace plus the signals needed for scoring.
#[derive(Debug, Clone)]
pub struct SicReport {
    pub trace: SicTrace,
    pub residual: BasebandSignal,
    pub subtracted_coupling: BasebandSignal,
    pub subtracted_mono: BasebandSignal,
    pub subtracted_bi: BasebandSignal,
    pub comm: Option<CommResult>,
    pub sync: Option<SyncEstimates>,
}

/// One reconstructed reflection: a single delay/Doppler exponential at
/// continuous (fractional) bin coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RadarComponent {
    /// Delay in range bins, not necessarily whole.
    pub range_bins: f64,
    /// Signed, centered Doppler in bins, not necessarily whole.
    pub doppler_bins: f64,
    pub amplitude: Complex64,
}

/// Baseband frequency of subcarrier `sc`, in bins, signed: the upper half
/// of the index range aliases to negative frequencies. A physical delay
/// ramps phase against this signed frequency, which only matters once the
/// delay is fractional.
fn signed_sc(sc: usize, n: usize) -> f64 {
    if sc <= n / 2 {
        sc as f64
    } else {
        sc as f64 - n as f64
    }
}

/// Radar channel assembled from point components:
/// H[n, m] = sum a e^{-j 2 pi f(n) r / N} e^{+j 2 pi m d / M}.
pub fn reconstruct_mono_channel(
    components: &[RadarComponent],
    params: &OfdmParams,
) -> Array2<Complex64> {
    let n = params.n_subcarriers;
    let m = params.n_symbols;
    let mut h = Array2::<Complex64>::zeros((n, m));
    for c in components {
        let delay_step = -2.0 * std::f64::consts::PI * c.range_bins / n as f64;
        let doppler_step = 2.0 * std::f64::consts::PI * c.doppler_bins / m as f64;
        for sc in 0..n {
            let row = c.amplitude * Complex64::from_polar(1.0, delay_step * signed_sc(sc, n));
            for sym in 0..m {
                h[(sc, sym)] += row * Complex64::from_polar(1.0, doppler_step * sym as f64);
            }
        }
    }
    h
}

/// Map value of the radar channel at continuous bin coordinates, same
/// normalization as the unitary transform behind the discrete map.
fn map_value_at(h: &Array2<Complex64>, r: f64, d: f64) -> Complex64 {
    let (n, m) = h.dim();
    let mut acc = Complex64::new(0.0, 0.0);
    for sym in 0..m {
        let wd = Complex64::from_polar(
            1.0,
            -2.0 * std::f64::consts::PI * d * sym as f64 / m as f64,
        );
        let mut col = Complex64::new(0.0, 0.0);
        for sc in 0..n {
            col += h[(sc, sym)]
                * Complex64::from_polar(
                    1.0,
                    2.0 * std::f64::consts::PI * r * signed_sc(sc, n) / n as f64,
                );
        }
        acc += col * wd;
    }
    acc / ((n * m) as f64).sqrt()
}

/// One-dimensional peak refinement: shrinking nine-point grid searches
/// followed by a parabolic vertex step on the final spacing.
fn refine_axis(mut eval: impl FnMut(f64) -> f64, start: f64) -> f64 {
    let mut center = start;
    let mut half = 0.5;
    for _ in 0..4 {
        let spacing = half / 4.0;
        let mut best = (eval(center), center);
        for k in -4..=4i32 {
            if k == 0 {
                continue;
            }
            let x = center + spacing * k as f64;
            let v = eval(x);
            if v > best.0 {
                best = (v, x);
            }
        }
        center = best.1;
        half = spacing;
    }
    let h = half / 4.0;
    let (lo, mid, hi) = (eval(center - h), eval(center), eval(center + h));
    let denom = lo - 2.0 * mid + hi;
    if denom.abs() > 1e-300 {
        let step = 0.5 * h * (lo - hi) / denom;
        if step.abs() <= h {
            center += step;
        }
    }
    center
}

/// Continuous-coordinate peak location and complex amplitude near an
/// integer map cell, found by coordinate descent on the map magnitude.
/// The atom is separable in range and Doppler, so alternating the two
/// one-dimensional searches converges immediately for a lone reflection.
fn fractional_peak(h: &Array2<Complex64>, r0: f64, d0: f64) -> (f64, f64, Complex64) {
    let (n, m) = h.dim();
    let mut r = r0;
    let mut d = d0;
    for _ in 0..2 {
        // Project out the current Doppler, then scan range cheaply.
        let g_r: Vec<Complex64> = (0..n)
            .map(|sc| {
                (0..m)
                    .map(|sym| {
                        h[(sc, sym)]
                            * Complex64::from_polar(
                                1.0,
                                -2.0 * std::f64::consts::PI * d * sym as f64 / m as f64,
                            )
                    })
                    .sum()
            })
            .collect();
        r = refine_axis(
            |x| {
                g_r.iter()
                    .enumerate()
                    .map(|(sc, v)| {
                        v * Complex64::from_polar(
                            1.0,
                            2.0 * std::f64::consts::PI * x * signed_sc(sc, n) / n as f64,
                        )
                    })
                    .sum::<Complex64>()
                    .norm_sqr()
            },
            r,
        );
        let g_d: Vec<Complex64> = (0..m)
            .map(|sym| {
                (0..n)
                    .map(|sc| {
                        h[(sc, sym)]
                            * Complex64::from_polar(
                                1.0,
                                2.0 * std::f64::consts::PI * r * signed_sc(sc, n) / n as f64,
                            )
                    })
                    .sum()
            })
            .collect();
        d = refine_axis(
            |x| {
                g_d.iter()
                    .enumerate()
                    .map(|(sym, v)| {
                        v * Complex64::from_polar(
                            1.0,
                            -2.0 * std::f64::consts::PI * x * sym as f64 / m as f64,
                        )
                    })
                    .sum::<Complex64>()
                    .norm_sqr()
            },
            d,
        );
    }
    (r, d, map_value_at(h, r, d))
}

/// Scale a reconstructed channel so its own image peak reproduces the
/// received map's value at `peak` exactly, fractional-bin leakage included.
pub fn normalize_reconstruction(
    recon: &Array2<Complex64>,
    received: &RangeDopplerMap,
    peak: (usize, usize),
    params: &OfdmParams,
) -> Array2<Complex64> {
    let own = rd_map(recon, params, received.mode);
    let denom = own.cells[peak];
    if denom.norm() < 1e-300 {
        return recon.clone();
    }
    let ratio = received.cells[peak] / denom;
    recon.mapv(|v| v * ratio)
}

fn subtract_into(residual: &mut BasebandSignal, subtrahend: &BasebandSignal) {
    let l = residual.len().min(subtrahend.len());
    for k in 0..l {
        residual.samples[k] -= subtrahend.samples[k];
    }
}

fn accumulate_into(acc: &mut BasebandSignal, add: &BasebandSignal) {
    if acc.len() < add.len() {
        acc.samples
            .resize(add.len(), Complex64::new(0.0, 0.0));
    }
    for k in 0..add.len() {
        acc.samples[k] += add.samples[k];
    }
}

/// Result of a single radar-domain cancellation pass.
#[derive(Debug, Clone)]
pub struct CancelOutcome {
    pub residual: BasebandSignal,
    pub subtracted: BasebandSignal,
    pub detection: Detection,
    pub image_sinr_before_db: f64,
    pub image_sinr_after_db: f64,
}

/// Monostatic radar map of the capture against the known transmit frame.
pub fn mono_map(
    composite: &BasebandSignal,
    mono_tx: &FrameGrid,
    params: &OfdmParams,
) -> Result<RangeDopplerMap> {
    let z = demodulate(composite, params, 0)?;
    let h = estimate_radar_channel(&z, &mono_tx.cells)?;
    Ok(rd_map(&h, params, RadarMode::Mono))
}

/// Image quality of the strongest monostatic peak, the canceller's
/// decision metric.
pub fn strongest_mono_image(
    composite: &BasebandSignal,
    mono_tx: &FrameGrid,
    params: &OfdmParams,
) -> Result<f64> {
    let map = mono_map(composite, mono_tx, params)?;
    image_sinr(&map, map.peak_cell(), &NoiseRegion::far_band_default())
}

/// Detect (or accept the forced bin), reconstruct, normalize, re-modulate
/// with the known transmit frame and subtract. The peak cell is re-measured
/// on the residual map.
///
/// With `refine` set, free detections are refined to continuous bin
/// coordinates before the reconstruction; a quantized atom leaves its whole
/// leakage skirt behind, a refined one cancels the skirt along with the
/// peak. Forced bins (the coupling path is exactly zero delay, zero
/// Doppler) are never refined, so neighbouring reflections cannot drag the
/// atom off its cell.
pub fn cancel_mono_component(
    composite: &BasebandSignal,
    mono_tx: &FrameGrid,
    params: &OfdmParams,
    forced_bin: Option<(usize, isize)>,
    refine: bool,
) -> Result<CancelOutcome> {
    let region = NoiseRegion::far_band_default();
    let z = demodulate(composite, params, 0)?;
    let h = estimate_radar_channel(&z, &mono_tx.cells)?;
    let map = rd_map(&h, params, RadarMode::Mono);
    let peak = match forced_bin {
        Some((r, d)) => (r, map.doppler_index(d)),
        None => map.peak_cell(),
    };
    let image_before = image_sinr(&map, peak, &region)?;

    let signed_doppler = map.signed_doppler_bin(peak.1);
    let scale = ((params.n_subcarriers * params.n_symbols) as f64).sqrt();
    let (r_hat, d_hat, peak_value) = if refine && forced_bin.is_none() {
        fractional_peak(&h, peak.0 as f64, signed_doppler as f64)
    } else {
        (peak.0 as f64, signed_doppler as f64, map.cells[peak])
    };
    let component = RadarComponent {
        range_bins: r_hat,
        doppler_bins: d_hat,
        amplitude: peak_value / scale,
    };
    let recon = reconstruct_mono_channel(&[component], params);
    let recon = normalize_reconstruction(&recon, &map, peak, params);

    let product = FrameGrid {
        cells: &recon * &mono_tx.cells,
        roles: mono_tx.roles.clone(),
        payload_bits: mono_tx.payload_bits.clone(),
    };
    let subtracted = modulate(&product, params)?;
    let mut residual = composite.clone();
    subtract_into(&mut residual, &subtracted);

    let map_after = mono_map(&residual, mono_tx, params)?;
    let image_after = image_sinr(&map_after, peak, &region)?;

    Ok(CancelOutcome {
        residual,
        subtracted,
        detection: Detection {
            range_bin: peak.0,
            doppler_bin: signed_doppler,
            range_m: r_hat * map.range_bin_m,
            doppler_hz: d_hat * map.doppler_bin_hz,
            peak_amplitude: map.cells[peak],
            image_sinr_db: image_before,
        },
        image_sinr_before_db: image_before,
        image_sinr_after_db: image_after,
    })
}

/// Decoded-and-regenerated bistatic line-of-sight cancellation.
#[derive(Debug, Clone)]
pub struct BiCancelOutcome {
    pub residual: BasebandSignal,
    pub subtracted: BasebandSignal,
    pub sync: SyncEstimates,
    pub comm: CommResult,
}

/// Rebuild the asynchronous bistatic frame as the receiver sees it: decided
/// cells and known preamble through the estimated channel, with the
/// estimated offsets re-applied.
fn regenerate_bi_frame(
    decided: &FrameGrid,
    est_channel: &Array2<Complex64>,
    estimates: &SyncEstimates,
    params: &OfdmParams,
) -> Result<BasebandSignal> {
    let mut body_params = params.clone();
    body_params.preamble = crate::ofdm::PreambleConfig::disabled();
    let product = FrameGrid {
        cells: est_channel * &decided.cells,
        roles: decided.roles.clone(),
        payload_bits: decided.payload_bits.clone(),
    };
    let body = modulate(&product, &body_params)?;

    // Preamble through the first-symbol channel estimate.
    let n = params.n_subcarriers;
    let (s1, s2) = preamble_frequency_symbols(params);
    let mut samples = Vec::with_capacity(params.frame_len_samples());
    for sym in [s1, s2] {
        let mut buf: Vec<Complex64> = (0..n).map(|sc| sym[sc] * est_channel[(sc, 0)]).collect();
        fft::inverse(&mut buf);
        for v in buf.iter_mut() {
            *v /= n as f64;
        }
        samples.extend_from_slice(&buf[n - params.cp_len..]);
        samples.extend_from_slice(&buf);
    }
    samples.extend_from_slice(&body.samples);
    let clean = BasebandSignal::new(samples, body.sample_rate);
    Ok(reapply_first_order(&clean, estimates, params))
}

/// Re-impair a regenerated frame with the estimated offsets, mirroring
/// `sync::reapply` but with the O(L) first-order resampler for the clock
/// drift. Reconstruction runs once per decoded frame inside the
/// cancellation loop, so it uses the cheap interpolator; its band-edge
/// error is part of the canceller's residual budget and shows up directly
/// in the cancellation ratio at large drift.
fn reapply_first_order(
    signal: &BasebandSignal,
    estimates: &SyncEstimates,
    params: &OfdmParams,
) -> BasebandSignal {
    let step = 2.0 * std::f64::consts::PI * estimates.total_cfo_hz(params) / signal.sample_rate;
    let rotated = BasebandSignal::new(
        signal
            .samples
            .iter()
            .enumerate()
            .map(|(k, v)| v * Complex64::from_polar(1.0, step * k as f64))
            .collect(),
        signal.sample_rate,
    );
    let drifted = resample_linear(&rotated, 1.0 + estimates.sfo_ppm * 1e-6);
    let mut samples = vec![Complex64::new(0.0, 0.0); estimates.fine_sto];
    samples.extend_from_slice(&drifted.samples);
    BasebandSignal::new(samples, signal.sample_rate)
}

/// Synchronize, decode and subtract the bistatic frame. Fails without
/// touching the signal when synchronization cannot lock.
pub fn cancel_bi_los(
    composite: &BasebandSignal,
    bi_tx: &FrameGrid,
    params: &OfdmParams,
    comm_seed: u64,
) -> Result<BiCancelOutcome> {
    let estimates = estimate_all(composite, params)?;
    let aligned = compensate(composite, &estimates, params)?;
    let z = demodulate(&aligned, params, 0)?;
    let est_channel = comm::estimate_channel(&z, params)?;
    let (eq, erased) = comm::equalize(&z, &est_channel)?;
    let result = comm::demap_and_score(&eq, &erased, &est_channel, bi_tx, params, comm_seed)?;

    let decided = FrameGrid {
        cells: result.decided_grid.clone(),
        roles: bi_tx.roles.clone(),
        payload_bits: result.decided_bits.clone(),
    };
    let subtracted = regenerate_bi_frame(&decided, &est_channel, &estimates, params)?;
    let mut residual = composite.clone();
    subtract_into(&mut residual, &subtracted);
    Ok(BiCancelOutcome {
        residual,
        subtracted,
        sync: estimates,
        comm: result,
    })
}

/// Full adaptive cancellation protocol.
///
/// Coupling is removed first, unconditionally. The strongest remaining
/// image peak then decides the order: at or above the threshold the
/// monostatic loop (strongest-first, while the gate stays open and
/// iterations remain) runs before the single cross-link cancellation;
/// below it the cross-link goes first and the monostatic loop follows on
/// the cleaned signal, where peaks may newly clear the gate. A failed
/// cross-link lock is recorded as an aborted step and the signal passes
/// through untouched.
pub fn run_sic(
    composite: &BasebandSignal,
    mono_tx: Option<&FrameGrid>,
    mono_params: &OfdmParams,
    bi_tx: Option<&FrameGrid>,
    bi_params: &OfdmParams,
    config: &SicConfig,
) -> Result<SicReport> {
    let mut residual = composite.clone();
    let empty = BasebandSignal::new(Vec::new(), composite.sample_rate);
    let mut report = SicReport {
        trace: SicTrace::default(),
        residual: composite.clone(),
        subtracted_coupling: empty.clone(),
        subtracted_mono: empty.clone(),
        subtracted_bi: empty,
        comm: None,
        sync: None,
    };

    if let Some(tx) = mono_tx {
        let outcome = cancel_mono_component(&residual, tx, mono_params, Some((0, 0)), false)?;
        residual = outcome.residual;
        accumulate_into(&mut report.subtracted_coupling, &outcome.subtracted);
        report.trace.steps.push(SicStepRecord {
            action: SicAction::CancelCoupling,
            iteration: 0,
            detection: Some(outcome.detection),
            image_sinr_before_db: Some(outcome.image_sinr_before_db),
            image_sinr_after_db: Some(outcome.image_sinr_after_db),
            sync: None,
            ber: None,
            evm_db: None,
            aborted: false,
            note: "coupling removed as zero-delay zero-Doppler component".into(),
        });
    }

    let mono_first = match mono_tx {
        Some(tx) => {
            let gate = strongest_mono_image(&residual, tx, mono_params)?;
            report.trace.mono_image_sinr_at_decision_db = Some(gate);
            mono_gate_open(gate, config)
        }
        None => false,
    };
    report.trace.decision = if mono_first {
        Some(SicAction::CancelMono)
    } else if bi_tx.is_some() {
        Some(SicAction::CancelBiLos)
    } else {
        None
    };

    let mono_loop = |residual: &mut BasebandSignal, report: &mut SicReport| -> Result<()> {
        let Some(tx) = mono_tx else { return Ok(()) };
        let mut iteration = 0;
        loop {
            let outcome = cancel_mono_component(
                residual,
                tx,
                mono_params,
                None,
                config.refine_fractional_bins,
            )?;
            if !mono_gate_open(outcome.image_sinr_before_db, config) {
                return Ok(());
            }
            if iteration >= config.max_iterations {
                report.trace.iteration_cap_hit = true;
                return Ok(());
            }
            *residual = outcome.residual.clone();
            accumulate_into(&mut report.subtracted_mono, &outcome.subtracted);
            report.trace.steps.push(SicStepRecord {
                action: SicAction::CancelMono,
                iteration,
                detection: Some(outcome.detection),
                image_sinr_before_db: Some(outcome.image_sinr_before_db),
                image_sinr_after_db: Some(outcome.image_sinr_after_db),
                sync: None,
                ber: None,
                evm_db: None,
                aborted: false,
                note: "strongest reflection reconstructed and subtracted".into(),
            });
            iteration += 1;
        }
    };

    let bi_once = |residual: &mut BasebandSignal, report: &mut SicReport| -> Result<()> {
        let Some(tx) = bi_tx else { return Ok(()) };
        match cancel_bi_los(residual, tx, bi_params, config.comm_seed) {
            Ok(outcome) => {
                *residual = outcome.residual.clone();
                accumulate_into(&mut report.subtracted_bi, &outcome.subtracted);
                report.trace.steps.push(SicStepRecord {
                    action: SicAction::CancelBiLos,
                    iteration: 0,
                    detection: None,
                    image_sinr_before_db: None,
                    image_sinr_after_db: None,
                    sync: Some(outcome.sync),
                    ber: Some(outcome.comm.ber),
                    evm_db: Some(outcome.comm.evm_db),
                    aborted: false,
                    note: "bistatic frame decoded, regenerated and subtracted".into(),
                });
                report.comm = Some(outcome.comm);
                report.sync = Some(outcome.sync);
            }
            Err(e @ (Error::SyncDetectionFailed(_) | Error::IntegerCfoAmbiguous { .. })) => {
                report.trace.steps.push(SicStepRecord {
                    action: SicAction::CancelBiLos,
                    iteration: 0,
                    detection: None,
                    image_sinr_before_db: None,
                    image_sinr_after_db: None,
                    sync: None,
                    ber: None,
                    evm_db: None,
                    aborted: true,
                    note: format!("could not lock: {e}"),
                });
            }
            Err(e) => return Err(e),
        }
        Ok(())
    };

    if mono_first {
        mono_loop(&mut residual, &mut report)?;
        bi_once(&mut residual, &mut report)?;
    } else {
        bi_once(&mut residual, &mut report)?;
        if let Some(tx) = mono_tx {
            report.trace.mono_image_sinr_after_bi_db =
                Some(strongest_mono_image(&residual, tx, mono_params)?);
        }
        mono_loop(&mut residual, &mut report)?;
    }

    report.residual = residual;
    Ok(report)
}

/// Linear interference cancellation ratio: amplitude of what the
/// subtraction left behind, relative to the untouched interference,
/// sqrt(sum |ref - recon|^2 / sum |ref|^2). A perfect reconstruction
/// scores 0, no reconstruction at all scores 1.
pub fn icr_linear(reference: &BasebandSignal, reconstruction: &BasebandSignal) -> f64 {
    let l = reference.len().max(reconstruction.len());
    let zero = Complex64::new(0.0, 0.0);
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..l {
        let r = reference.samples.get(k).copied().unwrap_or(zero);
        let c = reconstruction.samples.get(k).copied().unwrap_or(zero);
        num += (r - c).norm_sqr();
        den += r.norm_sqr();
    }
    if den <= 0.0 {
        return if num > 0.0 { f64::INFINITY } else { 0.0 };
    }
    (num / den).sqrt()
}

/// The linear cancellation ratio in dB, clamped to [-100, 100]; more
/// negative is deeper cancellation.
pub fn icr_db(reference: &BasebandSignal, reconstruction: &BasebandSignal) -> f64 {
    (20.0 * icr_linear(reference, reconstruction).log10()).clamp(-100.0, 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{compose_detailed, ImpairmentSpec, PathOrigin, PathSpec};
    use crate::link_budget::RadioParams;
    use crate::ofdm::{build_frame, generate_payload_bits, Modulation, PilotPattern, PreambleConfig};
    use crate::scenario::Scenario;
    use crate::units::linear_to_db;

    fn mono_params() -> OfdmParams {
        let p = OfdmParams {
            n_subcarriers: 256,
            cp_len: 64,
            n_symbols: 64,
            subcarrier_spacing: 4e6 / 256.0,
            sample_rate: 4e6,
            carrier_freq: 1e9,
            modulation: Modulation::Qpsk,
            pilot_pattern: PilotPattern::lattice(2, 2, 31),
            preamble: PreambleConfig::disabled(),
        };
        p.validate().unwrap();
        p
    }

    fn bi_params() -> OfdmParams {
        let mut p = mono_params();
        p.preamble = PreambleConfig::enabled(32);
        p
    }

    fn radio(p: &OfdmParams) -> RadioParams {
        RadioParams {
            p_tx_dbm: 10.0,
            g_tx_dbi: 10.0,
            g_rx_dbi: 10.0,
            wavelength_m: crate::ofdm::SPEED_OF_LIGHT / p.carrier_freq,
            sigma_mono_dbsm: 10.0,
            sigma_bi_dbsm: 10.0,
            coupling_rel_db: -30.0,
            noise_power_dbm: -90.0,
        }
    }

    fn scenario(p: &OfdmParams, paths: Vec<PathSpec>, noise_dbm: f64, seed: u64) -> Scenario {
        Scenario {
            params: p.clone(),
            radio_mono: radio(p),
            radio_bi: radio(p),
            paths,
            impairments: ImpairmentSpec::none(),
            noise_power_dbm: noise_dbm,
            seed,
            sinr_override_db: None,
        }
    }

    fn mono_path(delay_bins: f64, doppler_bins: f64, amp: Complex64, p: &OfdmParams) -> PathSpec {
        PathSpec {
            delay_s: delay_bins / p.sample_rate,
            doppler_hz: doppler_bins * p.doppler_resolution(),
            amplitude: amp,
            origin: PathOrigin::Mono,
        }
    }

    /// Transmit signal followed by a quiet gap, as a real capture window
    /// would see it; channel delay spreads into the gap instead of
    /// truncating the frame.
    fn with_quiet_tail(sig: &BasebandSignal, p: &OfdmParams) -> BasebandSignal {
        let mut s = sig.clone();
        s.samples
            .extend(vec![Complex64::new(0.0, 0.0); p.samples_per_symbol()]);
        s
    }

    #[test]
    fn on_bin_reflection_cancels_in_the_channel_domain() {
        let p = mono_params();
        let tx = build_frame(&p, &generate_payload_bits(&p, 1)).unwrap();
        let atom = RadarComponent {
            range_bins: 12.0,
            doppler_bins: 5.0,
            amplitude: Complex64::new(0.8, 0.3),
        };
        let h = reconstruct_mono_channel(&[atom], &p);
        let product = FrameGrid {
            cells: &h * &tx.cells,
            roles: tx.roles.clone(),
            payload_bits: tx.payload_bits.clone(),
        };
        let composite = modulate(&product, &p).unwrap();

        let before = mono_map(&composite, &tx, &p).unwrap();
        let outcome = cancel_mono_component(&composite, &tx, &p, None, false).unwrap();
        assert_eq!(outcome.detection.range_bin, 12);
        assert_eq!(outcome.detection.doppler_bin, 5);

        // The reconstruction is exact where the receiver looks: the
        // residual radar channel is empty to numerical precision.
        let after = mono_map(&outcome.residual, &tx, &p).unwrap();
        let drop_db = linear_to_db(after.energy() / before.energy());
        assert!(drop_db < -80.0, "channel residual at {drop_db:.1} dB");
    }

    #[test]
    fn integer_delay_reflection_cancels_on_the_grid() {
        // A whole-sample delay inside the cyclic prefix is exactly diagonal
        // on the demodulated grid, so cancellation bottoms out near machine
        // precision there even though the time-domain prefix junk remains.
        let p = mono_params();
        let tx = build_frame(&p, &generate_payload_bits(&p, 1)).unwrap();
        let path = mono_path(12.0, 0.0, Complex64::new(0.8, 0.3), &p);
        let sc = scenario(&p, vec![path], f64::NEG_INFINITY, 2);
        let tx_sig = modulate(&tx, &p).unwrap();
        let composite = compose_detailed(&sc, Some(&tx_sig), None).unwrap().total;

        let before = mono_map(&composite, &tx, &p).unwrap();
        let outcome = cancel_mono_component(&composite, &tx, &p, None, false).unwrap();
        assert_eq!(outcome.detection.range_bin, 12);
        assert_eq!(outcome.detection.doppler_bin, 0);
        let after = mono_map(&outcome.residual, &tx, &p).unwrap();
        let drop_db = linear_to_db(after.energy() / before.energy());
        assert!(drop_db < -80.0, "channel residual at {drop_db:.1} dB");
    }

    #[test]
    fn coupling_only_capture_cancels_to_silence() {
        let p = mono_params();
        let tx = build_frame(&p, &generate_payload_bits(&p, 3)).unwrap();
        let coupling = PathSpec {
            delay_s: 0.0,
            doppler_hz: 0.0,
            amplitude: Complex64::new(2.0, -1.0),
            origin: PathOrigin::Coupling,
        };
        let sc = scenario(&p, vec![coupling], -300.0, 4);
        let tx_sig = modulate(&tx, &p).unwrap();
        let composite = compose_detailed(&sc, Some(&tx_sig), None).unwrap().total;

        let outcome = cancel_mono_component(&composite, &tx, &p, Some((0, 0)), false).unwrap();
        let res_db = linear_to_db(outcome.residual.energy() / composite.energy());
        assert!(res_db < -60.0, "time-domain residual at {res_db:.1} dB");
    }

    #[test]
    fn fractional_bin_reflection_cancels_deeply() {
        // A target between bins leaves a leakage skirt that a quantized
        // atom cannot touch; the refined atom takes the skirt out with it.
        let p = mono_params();
        let tx = build_frame(&p, &generate_payload_bits(&p, 5)).unwrap();
        let path = mono_path(10.4, 0.3, Complex64::new(1.0, 0.0), &p);
        let sc = scenario(&p, vec![path], f64::NEG_INFINITY, 6);
        let tx_sig = modulate(&tx, &p).unwrap();
        let composite = compose_detailed(&sc, Some(&tx_sig), None).unwrap().total;

        let before = mono_map(&composite, &tx, &p).unwrap();
        let peak_before = before.cells[before.peak_cell()].norm_sqr();

        let outcome = cancel_mono_component(&composite, &tx, &p, None, true).unwrap();
        assert!(
            (outcome.detection.range_m / before.range_bin_m - 10.4).abs() < 0.05,
            "range refined to {:.3} bins",
            outcome.detection.range_m / before.range_bin_m
        );

        let after = mono_map(&outcome.residual, &tx, &p).unwrap();
        let peak_after = after.cells[after.peak_cell()].norm_sqr();
        let drop_db = linear_to_db(peak_after / peak_before);
        assert!(drop_db < -25.0, "peak only dropped {drop_db:.1} dB");
    }

    #[test]
    fn quantized_atoms_peel_fractional_targets_iteratively() {
        // Without refinement the atom sits on the detection cell and each
        // pass takes out one cell of the leakage skirt; the loop grinds
        // the peak down rather than removing it in one shot.
        let p = mono_params();
        let tx = build_frame(&p, &generate_payload_bits(&p, 5)).unwrap();
        let path = mono_path(10.4, 0.3, Complex64::new(1.0, 0.0), &p);
        let sc = scenario(&p, vec![path], f64::NEG_INFINITY, 6);
        let tx_sig = modulate(&tx, &p).unwrap();
        let composite = compose_detailed(&sc, Some(&tx_sig), None).unwrap().total;

        let before = mono_map(&composite, &tx, &p).unwrap();
        let peak_before = before.cells[before.peak_cell()].norm_sqr();

        let config = SicConfig {
            image_sinr_threshold_db: 30.0,
            ..SicConfig::default()
        };
        let report = run_sic(&composite, Some(&tx), &p, None, &p, &config).unwrap();
        let mono_steps = report
            .trace
            .steps
            .iter()
            .filter(|s| s.action == SicAction::CancelMono)
            .count();
        assert!(mono_steps >= 2, "expected iterative passes, got {mono_steps}");

        let after = mono_map(&report.residual, &tx, &p).unwrap();
        let peak_after = after.cells[after.peak_cell()].norm_sqr();
        let drop_db = linear_to_db(peak_after / peak_before);
        assert!(drop_db < -10.0, "peak only dropped {drop_db:.1} dB");
    }

    #[test]
    fn wrong_bin_subtraction_changes_almost_nothing() {
        // Forcing the canceller onto an empty cell builds an atom from
        // junk; the subtraction must be close to a no-op.
        let p = mono_params();
        let tx = build_frame(&p, &generate_payload_bits(&p, 1)).unwrap();
        let path = mono_path(12.0, 0.0, Complex64::new(0.8, 0.3), &p);
        let sc = scenario(&p, vec![path], f64::NEG_INFINITY, 2);
        let tx_sig = modulate(&tx, &p).unwrap();
        let composite = compose_detailed(&sc, Some(&tx_sig), None).unwrap().total;

        let outcome = cancel_mono_component(&composite, &tx, &p, Some((14, 0)), false).unwrap();
        let change_db = linear_to_db(outcome.residual.energy() / composite.energy());
        assert!(change_db.abs() < 1.0, "energy changed by {change_db:.2} dB");
    }

    #[test]
    fn weak_peak_defers_to_cross_link_first() {
        // When the strongest reflection sits below the gate, the protocol
        // decodes and removes the cross-link frame first and only then
        // revisits the monostatic map.
        let p = mono_params();
        let bi_p = bi_params();
        let mono_tx = build_frame(&p, &generate_payload_bits(&p, 21)).unwrap();
        let bi_tx = build_frame(&bi_p, &generate_payload_bits(&bi_p, 22)).unwrap();
        let mono_sig = with_quiet_tail(&modulate(&mono_tx, &p).unwrap(), &p);
        let bi_sig = with_quiet_tail(&modulate(&bi_tx, &bi_p).unwrap(), &bi_p);

        let paths = vec![
            mono_path(9.0, 0.0, Complex64::new(0.02, 0.01), &p),
            PathSpec {
                delay_s: 4.0 / p.sample_rate,
                doppler_hz: 0.0,
                amplitude: Complex64::new(1.0, 0.2),
                origin: PathOrigin::BiLos,
            },
        ];
        let sc = scenario(&p, paths, -85.0, 23);
        let composite = compose_detailed(&sc, Some(&mono_sig), Some(&bi_sig))
            .unwrap()
            .total;

        let report = run_sic(
            &composite,
            Some(&mono_tx),
            &p,
            Some(&bi_tx),
            &bi_p,
            &SicConfig::default(),
        )
        .unwrap();
        assert_eq!(report.trace.decision, Some(SicAction::CancelBiLos));
        let gate = report.trace.mono_image_sinr_at_decision_db.unwrap();
        assert!(gate < 45.0, "gate unexpectedly open at {gate:.1} dB");
        let after_bi = report.trace.mono_image_sinr_after_bi_db.unwrap();
        assert!(
            after_bi > gate,
            "mono image should improve: {gate:.1} -> {after_bi:.1} dB"
        );
        // The cross-link step must precede any monostatic pass.
        let first_substantive = report
            .trace
            .steps
            .iter()
            .find(|s| s.action != SicAction::CancelCoupling)
            .unwrap();
        assert_eq!(first_substantive.action, SicAction::CancelBiLos);
    }

    #[test]
    fn two_reflections_are_peeled_strongest_first() {
        let p = mono_params();
        let tx = build_frame(&p, &generate_payload_bits(&p, 5)).unwrap();
        let strong = mono_path(12.0, 0.6, Complex64::new(1.0, 0.0), &p);
        let weak = mono_path(30.0, -0.4, Complex64::new(0.3, 0.1), &p);
        let sc = scenario(&p, vec![strong, weak], f64::NEG_INFINITY, 6);
        let tx_sig = modulate(&tx, &p).unwrap();
        let composite = compose_detailed(&sc, Some(&tx_sig), None).unwrap().total;

        let before = mono_map(&composite, &tx, &p).unwrap();
        let peak_before = before.cells[before.peak_cell()].norm_sqr();

        let config = SicConfig {
            image_sinr_threshold_db: 30.0,
            refine_fractional_bins: true,
            ..SicConfig::default()
        };
        let report = run_sic(&composite, Some(&tx), &p, None, &p, &config).unwrap();
        assert_eq!(report.trace.decision, Some(SicAction::CancelMono));
        let detections: Vec<usize> = report
            .trace
            .steps
            .iter()
            .filter(|s| s.action == SicAction::CancelMono)
            .filter_map(|s| s.detection.as_ref().map(|d| d.range_bin))
            .collect();
        assert!(detections.len() >= 2, "got passes at bins {detections:?}");
        assert_eq!(detections[0], 12, "strongest target first");
        assert!(detections.contains(&30), "weak target found: {detections:?}");

        let after = mono_map(&report.residual, &tx, &p).unwrap();
        let peak_after = after.cells[after.peak_cell()].norm_sqr();
        let drop_db = linear_to_db(peak_after / peak_before);
        assert!(drop_db < -20.0, "peak only dropped {drop_db:.1} dB");
    }

    #[test]
    fn gate_includes_the_threshold_itself() {
        let config = SicConfig::default();
        assert!(mono_gate_open(45.0, &config));
        assert!(mono_gate_open(45.1, &config));
        assert!(!mono_gate_open(44.999, &config));
    }

    #[test]
    fn clean_bistatic_frame_decodes_and_cancels_deeply() {
        let p = bi_params();
        let tx = build_frame(&p, &generate_payload_bits(&p, 7)).unwrap();
        let tx_sig = with_quiet_tail(&modulate(&tx, &p).unwrap(), &p);
        let path = PathSpec {
            delay_s: 6.0 / p.sample_rate,
            doppler_hz: 0.0,
            amplitude: Complex64::new(0.9, -0.2),
            origin: PathOrigin::BiLos,
        };
        // Drift kept small: the first-order reapply interpolator turns
        // accumulated drift into a band-edge residual, which is the point
        // of the large-offset sweeps but not of this depth check.
        let mut sc = scenario(&p, vec![path], -90.0, 8);
        sc.impairments = ImpairmentSpec {
            cfo_hz: 3.2 * p.subcarrier_spacing + 700.0,
            sfo_ppm: 0.5,
            sto_samples: 900,
        };
        let composite = compose_detailed(&sc, None, Some(&tx_sig)).unwrap().total;

        let outcome = cancel_bi_los(&composite, &tx, &p, 0).unwrap();
        assert_eq!(outcome.comm.bit_errors, 0, "decode should be clean");
        assert_eq!(outcome.sync.int_cfo_bins, 3);
        let res_db = linear_to_db(outcome.residual.energy() / composite.energy());
        assert!(res_db < -20.0, "bistatic residual at {res_db:.1} dB");
    }

    #[test]
    fn sync_failure_leaves_signal_untouched() {
        let p = bi_params();
        let tx = build_frame(&p, &generate_payload_bits(&p, 9)).unwrap();
        // Pure noise: nothing to lock onto. The frame only sets the length.
        let sc = scenario(&p, vec![], -30.0, 10);
        let noise_len_frame = modulate(&tx, &p).unwrap();
        let composite = compose_detailed(&sc, Some(&noise_len_frame), None)
            .unwrap()
            .total;
        // Without any bistatic path the frame never reaches the receiver.
        assert!(matches!(
            cancel_bi_los(&composite, &tx, &p, 0),
            Err(Error::SyncDetectionFailed(_))
        ));

        let report = run_sic(&composite, None, &p, Some(&tx), &p, &SicConfig::default()).unwrap();
        let step = report.trace.steps.last().unwrap();
        assert!(step.aborted);
        assert_eq!(report.trace.decision, Some(SicAction::CancelBiLos));
        for k in 0..composite.len() {
            assert_eq!(report.residual.samples[k], composite.samples[k]);
        }
    }

    #[test]
    fn full_protocol_trace_serializes() {
        let p = mono_params();
        let bi_p = bi_params();
        let mono_tx = build_frame(&p, &generate_payload_bits(&p, 11)).unwrap();
        let bi_tx = build_frame(&bi_p, &generate_payload_bits(&bi_p, 12)).unwrap();
        let mono_sig = with_quiet_tail(&modulate(&mono_tx, &p).unwrap(), &p);
        let bi_sig = with_quiet_tail(&modulate(&bi_tx, &bi_p).unwrap(), &bi_p);

        let paths = vec![
            PathSpec {
                delay_s: 0.0,
                doppler_hz: 0.0,
                amplitude: Complex64::new(3.0, 0.0),
                origin: PathOrigin::Coupling,
            },
            mono_path(8.0, 0.0, Complex64::new(0.9, 0.4), &p),
            PathSpec {
                delay_s: 5.0 / p.sample_rate,
                doppler_hz: 0.0,
                amplitude: Complex64::new(0.25, 0.1),
                origin: PathOrigin::BiLos,
            },
        ];
        let sc = scenario(&p, paths, -70.0, 13);
        let composite = compose_detailed(&sc, Some(&mono_sig), Some(&bi_sig))
            .unwrap()
            .total;

        let config = SicConfig {
            image_sinr_threshold_db: 25.0,
            ..SicConfig::default()
        };
        let report = run_sic(&composite, Some(&mono_tx), &p, Some(&bi_tx), &bi_p, &config).unwrap();
        assert_eq!(report.trace.steps[0].action, SicAction::CancelCoupling);
        assert_eq!(report.trace.decision, Some(SicAction::CancelMono));
        assert!(report.comm.is_some());

        let json = serde_json::to_string_pretty(&report.trace).unwrap();
        assert!(json.contains("cancel_mono"));
        let back: SicTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back.steps.len(), report.trace.steps.len());
    }

    #[test]
    fn icr_matches_hand_computed_ratios() {
        let a = BasebandSignal::new(vec![Complex64::new(1.0, 0.0); 100], 1e6);
        let scaled = BasebandSignal::new(vec![Complex64::new(0.9, 0.0); 100], 1e6);
        let silent = BasebandSignal::new(vec![Complex64::new(0.0, 0.0); 100], 1e6);
        // Perfect reconstruction bottoms out at the floor; none at all is
        // a ratio of one; a 0.9 scale leaves a tenth of the amplitude.
        assert_eq!(icr_db(&a, &a), -100.0);
        assert!(icr_db(&a, &silent).abs() < 1e-12);
        assert!((icr_db(&a, &scaled) + 20.0).abs() < 1e-9);
        assert!((icr_linear(&a, &scaled) - 0.1).abs() < 1e-12);
    }
}
