//! Timing, carrier and sampling-clock recovery for the bistatic branch.
//!
//! Estimation runs in the order the impairments are peeled off:
//!
//! 1. coarse timing and fractional CFO from the half-symbol autocorrelation
//!    of preamble symbol 1 (its body is two identical halves),
//! 2. integer CFO from a differential frequency-domain correlation of
//!    preamble symbol 2 against its known sequence,
//! 3. fine timing from time-domain cross-correlation with the full known
//!    preamble after CFO correction,
//! 4. SFO from the across-symbol growth of the pilot phase ramp's slope
//!    over subcarriers,
//! 5. residual STO/CFO re-measured on pilots after compensation.
//!
//! `compensate` removes the estimated offsets (trim, resample, derotate);
//! `reapply` is its inverse in reverse order, used when a reconstructed
//! signal must be returned to the asynchronous time base for subtraction.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{resample, resample_inverse, ImpairmentSpec};
use crate::error::{Error, Result};
use crate::fft;
use crate::ofdm::{
    demodulate, pilot_cells, preamble_frequency_symbols, preamble_time_domain, BasebandSignal,
    OfdmParams, PilotKind,
};

/// Offsets recovered by the synchronization chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncEstimates {
    pub coarse_sto: usize,
    pub fine_sto: usize,
    pub frac_cfo_hz: f64,
    pub int_cfo_bins: i64,
    pub residual_cfo_hz: f64,
    pub sfo_ppm: f64,
}

impl SyncEstimates {
    pub fn zero() -> Self {
        SyncEstimates {
            coarse_sto: 0,
            fine_sto: 0,
            frac_cfo_hz: 0.0,
            int_cfo_bins: 0,
            residual_cfo_hz: 0.0,
            sfo_ppm: 0.0,
        }
    }

    /// Perfect-knowledge estimates from the true impairments, for runs that
    /// study interference in isolation. `extra_delay_samples` holds the
    /// propagation delay of the path the receiver locks onto.
    pub fn from_truth(
        impairments: &ImpairmentSpec,
        params: &OfdmParams,
        extra_delay_samples: f64,
    ) -> Self {
        let spacing = params.subcarrier_spacing;
        let int = (impairments.cfo_hz / spacing).round() as i64;
        SyncEstimates {
            coarse_sto: impairments.sto_samples,
            fine_sto: impairments.sto_samples + extra_delay_samples.round() as usize,
            frac_cfo_hz: impairments.cfo_hz - int as f64 * spacing,
            int_cfo_bins: int,
            residual_cfo_hz: 0.0,
            sfo_ppm: impairments.sfo_ppm,
        }
    }

    /// Integer, fractional and residual carrier offset combined, Hz.
    pub fn total_cfo_hz(&self, params: &OfdmParams) -> f64 {
        self.int_cfo_bins as f64 * params.subcarrier_spacing + self.frac_cfo_hz
            + self.residual_cfo_hz
    }
}

const DETECTION_THRESHOLD: f64 = 0.5;
const PLATEAU_FRACTION: f64 = 0.9;
const INT_CFO_SEARCH: i64 = 8;
const INT_CFO_MARGIN_DB: f64 = 3.0;

/// Half-symbol autocorrelation timing metric over the whole capture.
///
/// Returns the estimated frame start (plateau midpoint pulled back by the
/// known half prefix) and the fractional CFO in Hz from the correlation
/// angle. Fails when no metric sample reaches the detection threshold.
pub fn schmidl_cox(signal: &BasebandSignal, params: &OfdmParams) -> Result<(usize, f64)> {
    params.validate()?;
    if !params.preamble.enabled {
        return Err(Error::config("timing search needs the preamble enabled"));
    }
    let n = params.n_subcarriers;
    let half = n / 2;
    let x = &signal.samples;
    if x.len() < n + 1 {
        return Err(Error::SignalTooShort {
            needed: n + 1,
            offset: 0,
            available: x.len(),
        });
    }

    // Sliding sums: P(d) correlates the two half-windows, R(d) averages the
    // energy of both halves. The symmetric energy keeps the metric honest
    // where one half holds little power (capture edges, guard silence).
    let mut p = Complex64::new(0.0, 0.0);
    let mut r_lead = 0.0f64;
    let mut r_trail = 0.0f64;
    for k in 0..half {
        p += x[k].conj() * x[k + half];
        r_lead += x[k].norm_sqr();
        r_trail += x[k + half].norm_sqr();
    }
    let d_max = x.len() - n;
    let mut metric = vec![0.0f64; d_max + 1];
    for d in 0..=d_max {
        let r = 0.5 * (r_lead + r_trail);
        metric[d] = if r > 1e-300 { p.norm_sqr() / (r * r) } else { 0.0 };
        if d < d_max {
            p += x[d + half].conj() * x[d + n] - x[d].conj() * x[d + half];
            r_lead += x[d + half].norm_sqr() - x[d].norm_sqr();
            r_trail += x[d + n].norm_sqr() - x[d + half].norm_sqr();
        }
    }

    let (peak_d, peak_val) =
        metric
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
    if peak_val < DETECTION_THRESHOLD {
        return Err(Error::SyncDetectionFailed(format!(
            "timing metric peaks at {peak_val:.3}, below {DETECTION_THRESHOLD}"
        )));
    }

    // The cyclic prefix smears the maximum into a plateau; its midpoint
    // sits half a prefix after the frame start.
    let floor = peak_val * PLATEAU_FRACTION;
    let mut lo = peak_d;
    while lo > 0 && metric[lo - 1] >= floor {
        lo -= 1;
    }
    let mut hi = peak_d;
    while hi < d_max && metric[hi + 1] >= floor {
        hi += 1;
    }
    let midpoint = (lo + hi) / 2;
    let coarse_sto = midpoint.saturating_sub(params.cp_len / 2);

    let mut p_mid = Complex64::new(0.0, 0.0);
    for k in 0..half {
        p_mid += x[midpoint + k].conj() * x[midpoint + k + half];
    }
    let frac_cfo_hz = p_mid.arg() * signal.sample_rate / (std::f64::consts::PI * n as f64);
    Ok((coarse_sto, frac_cfo_hz))
}

fn pick_best_shift(scores: &[(i64, f64)]) -> Result<i64> {
    let mut best = (0i64, f64::NEG_INFINITY);
    let mut runner = f64::NEG_INFINITY;
    for &(g, s) in scores {
        if s > best.1 {
            runner = best.1;
            best = (g, s);
        } else if s > runner {
            runner = s;
        }
    }
    let margin_db = 10.0 * (best.1 / runner).log10();
    if !margin_db.is_finite() || margin_db < INT_CFO_MARGIN_DB {
        return Err(Error::IntegerCfoAmbiguous {
            best_db: 10.0 * best.1.log10(),
            runner_up_db: 10.0 * runner.log10(),
            margin_db,
        });
    }
    Ok(best.0)
}

/// Integer carrier offset in subcarrier bins.
///
/// After fractional correction, the demodulated second preamble symbol is a
/// bin-shifted copy of its known sequence times the (slowly varying)
/// channel. Correlating differential sequences `Y[n] conj(Y[n-1])` against
/// the known counterpart cancels the channel and leaves a sharp correlation
/// maximum at the true shift.
pub fn integer_cfo(
    signal: &BasebandSignal,
    params: &OfdmParams,
    coarse_sto: usize,
    frac_cfo_hz: f64,
) -> Result<i64> {
    let n = params.n_subcarriers;
    let cp = params.cp_len;
    let start = coarse_sto + (n + cp) + cp;
    if start + n > signal.len() {
        return Err(Error::SignalTooShort {
            needed: n,
            offset: start,
            available: signal.len(),
        });
    }
    let step = -2.0 * std::f64::consts::PI * frac_cfo_hz / signal.sample_rate;
    let mut buf: Vec<Complex64> = (0..n)
        .map(|k| signal.samples[start + k] * Complex64::from_polar(1.0, step * (start + k) as f64))
        .collect();
    fft::forward(&mut buf);

    let (_, s2) = preamble_frequency_symbols(params);
    let d_y: Vec<Complex64> = (0..n).map(|i| buf[i] * buf[(i + n - 1) % n].conj()).collect();
    let d_s: Vec<Complex64> = (0..n).map(|i| s2[i] * s2[(i + n - 1) % n].conj()).collect();

    let scores: Vec<(i64, f64)> = (-INT_CFO_SEARCH..=INT_CFO_SEARCH)
        .map(|g| {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                let src = (i as i64 - g).rem_euclid(n as i64) as usize;
                acc += d_y[i] * d_s[src].conj();
            }
            (g, acc.norm_sqr())
        })
        .collect();
    pick_best_shift(&scores)
}

/// Sample-exact frame start from cross-correlation with the known
/// time-domain preamble, searched one prefix length around the coarse
/// estimate on the CFO-corrected signal.
pub fn fine_sto(
    signal: &BasebandSignal,
    params: &OfdmParams,
    estimates: &SyncEstimates,
) -> Result<usize> {
    let pre = preamble_time_domain(params);
    let cfo = estimates.int_cfo_bins as f64 * params.subcarrier_spacing + estimates.frac_cfo_hz;
    let lo = estimates.coarse_sto.saturating_sub(params.cp_len);
    let hi = (estimates.coarse_sto + params.cp_len).min(signal.len().saturating_sub(pre.len()));
    if lo > hi {
        return Err(Error::SignalTooShort {
            needed: pre.len(),
            offset: lo,
            available: signal.len(),
        });
    }
    let step = -2.0 * std::f64::consts::PI * cfo / signal.sample_rate;
    let corrected: Vec<Complex64> = (lo..hi + pre.len())
        .map(|k| signal.samples[k] * Complex64::from_polar(1.0, step * k as f64))
        .collect();
    let mut best = (lo, f64::NEG_INFINITY);
    for d in lo..=hi {
        let off = d - lo;
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, pk) in pre.iter().enumerate() {
            acc += pk.conj() * corrected[off + k];
        }
        let v = acc.norm_sqr();
        if v > best.1 {
            best = (d, v);
        }
    }
    Ok(best.0)
}

/// Pilot symbol interval and the subcarrier stride between pilots.
fn pilot_strides(params: &OfdmParams) -> (usize, usize) {
    let p = &params.pilot_pattern;
    let sc = match p.kind {
        PilotKind::Lattice => p.subcarrier_interval,
        PilotKind::Block => 1,
    };
    (sc, p.symbol_interval)
}

/// Per-subcarrier sum of conjugate products between pilot symbols `lag`
/// apart. Each entry carries phase 2 pi f eps lag (N+cp)/N for signed bin
/// frequency f, plus a common offset; its magnitude acts as a weight.
fn pilot_pair_products(
    rx_grid: &Array2<Complex64>,
    params: &OfdmParams,
    lag: usize,
) -> Result<Vec<Complex64>> {
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
    let (sc_stride, dm) = pilot_strides(params);
    if m <= dm {
        return Err(Error::config("need at least two pilot symbols for SFO"));
    }
    let mut v = vec![Complex64::new(0.0, 0.0); n];
    for sym in (0..m.saturating_sub(lag)).step_by(dm) {
        if !params.pilot_pattern.is_pilot(0, sym + lag) {
            continue;
        }
        for sc in (0..n).step_by(sc_stride) {
            if !params.pilot_pattern.is_pilot(sc, sym) {
                continue;
            }
            let z0 = rx_grid[(sc, sym)] * pilots[(sc, sym)].conj();
            let z1 = rx_grid[(sc, sym + lag)] * pilots[(sc, sym + lag)].conj();
            v[sc] += z1 * z0.conj();
        }
    }
    Ok(v)
}

/// Signed bin frequency for subcarrier index `sc`.
fn signed_bin(sc: usize, n: usize) -> f64 {
    if sc <= n / 2 {
        sc as f64
    } else {
        sc as f64 - n as f64
    }
}

/// Weighted least-squares slope of `angle(v[sc] derotated by slope0)` over
/// the signed bin frequency, intercept included so a common carrier drift
/// does not bias the fit. Returns the total slope in rad per bin.
fn fit_phase_slope(v: &[Complex64], n: usize, slope0: f64) -> f64 {
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (sc, val) in v.iter().enumerate() {
        let w = val.norm();
        if w < 1e-300 || sc == n / 2 {
            continue;
        }
        let f = signed_bin(sc, n);
        let phi = (val * Complex64::from_polar(1.0, -slope0 * f)).arg();
        sw += w;
        sx += w * f;
        sy += w * phi;
        sxx += w * f * f;
        sxy += w * f * phi;
    }
    let denom = sw * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return slope0;
    }
    slope0 + (sw * sxy - sx * sy) / denom
}

/// Sampling frequency offset in ppm from across-symbol pilot products:
/// their phase grows linearly with the signed bin frequency at a rate
/// proportional to the clock offset and the symbol lag.
///
/// The fit runs over a ladder of symbol lags. Short lags give a coarse,
/// unambiguous estimate; long lags multiply the phase signal while the
/// intercarrier noise stays flat, sharpening the estimate well below the
/// per-cell phase noise.
pub fn estimate_sfo(rx_grid: &Array2<Complex64>, params: &OfdmParams) -> Result<f64> {
    let (_, dm) = pilot_strides(params);
    let n = params.n_subcarriers;
    let last_pair = params.n_symbols.saturating_sub(dm + 1);
    let max_lag = (last_pair / dm) * dm;
    if max_lag == 0 {
        return Err(Error::config("need at least two pilot symbols for SFO"));
    }
    let mut lags = vec![dm];
    if 8 * dm < max_lag {
        lags.push(8 * dm);
    }
    if max_lag > dm {
        lags.push(max_lag);
    }

    let scale = 2.0 * std::f64::consts::PI * (n + params.cp_len) as f64 / n as f64;
    let mut eps = 0.0f64;
    for lag in lags {
        let v = pilot_pair_products(rx_grid, params, lag)?;
        let slope0 = eps * scale * lag as f64;
        let slope = fit_phase_slope(&v, n, slope0);
        eps = slope / (scale * lag as f64);
    }
    Ok(eps * 1e6)
}

/// Residual timing (samples) and carrier offset (Hz) measured on pilots of
/// an already-compensated grid.
pub fn residual_offsets(rx_grid: &Array2<Complex64>, params: &OfdmParams) -> Result<(f64, f64)> {
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
    let (sc_stride, dm) = pilot_strides(params);

    // Timing: phase slope across subcarriers inside each pilot symbol.
    // Pairs touching the sign flip of the bin frequency at n/2 stay out.
    let mut a = Complex64::new(0.0, 0.0);
    for sym in (0..m).step_by(dm) {
        let mut sc = 0;
        while sc + sc_stride < n {
            if params.pilot_pattern.is_pilot(sc, sym) && (sc + sc_stride < n / 2 || sc > n / 2) {
                let z0 = rx_grid[(sc, sym)] * pilots[(sc, sym)].conj();
                let z1 = rx_grid[(sc + sc_stride, sym)] * pilots[(sc + sc_stride, sym)].conj();
                a += z1 * z0.conj();
            }
            sc += sc_stride;
        }
    }
    let residual_sto = -a.arg() * n as f64 / (2.0 * std::f64::consts::PI * sc_stride as f64);

    // Carrier: common phase drift across pilot symbols.
    let v = pilot_pair_products(rx_grid, params, dm)?;
    let drift: Complex64 = v.iter().sum();
    let residual_cfo = drift.arg() / (2.0 * std::f64::consts::PI * dm as f64 * params.symbol_duration());
    Ok((residual_sto, residual_cfo))
}

/// Remove the estimated offsets: trim to the frame start, undo the clock
/// drift by resampling, derotate the carrier offset.
///
/// A capture that ends right at the frame boundary can come up a few
/// samples short after the timing trim (channel delay wraps the tail, clock
/// drift compresses the frame). Deficits of up to one OFDM symbol are
/// padded with zeros so the frame stays demodulable; anything larger is a
/// genuinely truncated capture and is left short.
pub fn compensate(
    signal: &BasebandSignal,
    estimates: &SyncEstimates,
    params: &OfdmParams,
) -> Result<BasebandSignal> {
    if estimates.fine_sto >= signal.len() {
        return Err(Error::SignalTooShort {
            needed: 1,
            offset: estimates.fine_sto,
            available: signal.len(),
        });
    }
    let trimmed = BasebandSignal::new(
        signal.samples[estimates.fine_sto..].to_vec(),
        signal.sample_rate,
    );
    // Newton-refined inverse of the forward clock stretch: a plain
    // re-resample leaves band-edge leakage behind, which shows up as a
    // decode floor on the outermost subcarriers.
    let resampled = resample_inverse(&trimmed, 1.0 / (1.0 + estimates.sfo_ppm * 1e-6));
    let step = -2.0 * std::f64::consts::PI * estimates.total_cfo_hz(params) / signal.sample_rate;
    let mut samples: Vec<Complex64> = resampled
        .samples
        .iter()
        .enumerate()
        .map(|(k, v)| v * Complex64::from_polar(1.0, step * k as f64))
        .collect();
    let need = params.frame_len_samples();
    if samples.len() < need && need - samples.len() <= params.samples_per_symbol() {
        samples.resize(need, Complex64::new(0.0, 0.0));
    }
    Ok(BasebandSignal::new(samples, signal.sample_rate))
}

/// Exact inverse of `compensate`: re-rotate, re-introduce the clock drift,
/// pad the frame-start offset back in.
pub fn reapply(
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
    // forward stretch, same operation the channel applies
    let drifted = resample(&rotated, 1.0 + estimates.sfo_ppm * 1e-6);
    let mut samples = vec![Complex64::new(0.0, 0.0); estimates.fine_sto];
    samples.extend_from_slice(&drifted.samples);
    BasebandSignal::new(samples, signal.sample_rate)
}

/// Run the whole estimation chain in order: coarse timing and fractional
/// CFO, integer CFO, fine timing, SFO from pilots, then residual offsets on
/// the compensated grid. The fractional/integer split is normalized so the
/// fractional part stays within half a subcarrier spacing.
pub fn estimate_all(signal: &BasebandSignal, params: &OfdmParams) -> Result<SyncEstimates> {
    let (coarse_sto, frac) = schmidl_cox(signal, params)?;
    let int = integer_cfo(signal, params, coarse_sto, frac)?;
    let mut estimates = SyncEstimates {
        coarse_sto,
        fine_sto: 0,
        frac_cfo_hz: frac,
        int_cfo_bins: int,
        residual_cfo_hz: 0.0,
        sfo_ppm: 0.0,
    };
    estimates.fine_sto = fine_sto(signal, params, &estimates)?;

    // SFO needs a grid that is timing/carrier aligned but NOT resampled.
    let partial = compensate(signal, &estimates, params)?;
    let grid = demodulate(&partial, params, 0)?;
    estimates.sfo_ppm = estimate_sfo(&grid, params)?;

    let full = compensate(signal, &estimates, params)?;
    let grid = demodulate(&full, params, 0)?;
    let (_, residual_cfo) = residual_offsets(&grid, params)?;
    estimates.residual_cfo_hz = residual_cfo;

    // Keep |fractional| within half a bin; push the rest into the integer.
    let spacing = params.subcarrier_spacing;
    let carry = (estimates.frac_cfo_hz / spacing).round();
    estimates.frac_cfo_hz -= carry * spacing;
    estimates.int_cfo_bins += carry as i64;
    Ok(estimates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{apply_cfo, apply_sfo};
    use crate::ofdm::{build_frame, generate_payload_bits, modulate, PreambleConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn params() -> OfdmParams {
        let p = OfdmParams {
            n_subcarriers: 256,
            cp_len: 64,
            n_symbols: 64,
            subcarrier_spacing: 4e6 / 256.0,
            sample_rate: 4e6,
            carrier_freq: 1e9,
            modulation: crate::ofdm::Modulation::Qpsk,
            pilot_pattern: crate::ofdm::PilotPattern::lattice(2, 2, 31),
            preamble: PreambleConfig::enabled(32),
        };
        p.validate().unwrap();
        p
    }

    fn tx_frame(p: &OfdmParams, seed: u64) -> BasebandSignal {
        let grid = build_frame(p, &generate_payload_bits(p, seed)).unwrap();
        modulate(&grid, p).unwrap()
    }

    /// STO + CFO + SFO + AWGN channel for one frame.
    fn impaired(
        _p: &OfdmParams,
        tx: &BasebandSignal,
        sto: usize,
        cfo_hz: f64,
        sfo_ppm: f64,
        snr_db: Option<f64>,
        noise_seed: u64,
    ) -> BasebandSignal {
        let shifted = apply_sfo(&apply_cfo(tx, cfo_hz), sfo_ppm);
        let mut samples = vec![Complex64::new(0.0, 0.0); sto];
        samples.extend_from_slice(&shifted.samples);
        // Trail with a little silence so searches have room.
        samples.extend(std::iter::repeat(Complex64::new(0.0, 0.0)).take(256));
        if let Some(snr) = snr_db {
            let p_sig = tx.mean_power();
            let sigma = (p_sig / 10f64.powf(snr / 10.0) / 2.0).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let dist = Normal::new(0.0, sigma).unwrap();
            for v in samples.iter_mut() {
                *v += Complex64::new(dist.sample(&mut rng), dist.sample(&mut rng));
            }
        }
        BasebandSignal::new(samples, tx.sample_rate)
    }

    #[test]
    fn coarse_timing_lands_near_frame_start() {
        let p = params();
        let tx = tx_frame(&p, 1);
        let rx = impaired(&p, &tx, 1000, 0.0, 0.0, None, 0);
        let (coarse, frac) = schmidl_cox(&rx, &p).unwrap();
        assert!(
            (coarse as isize - 1000).unsigned_abs() <= p.cp_len / 4,
            "coarse {coarse} for true 1000"
        );
        assert!(frac.abs() < 1.0, "fractional CFO {frac} Hz on clean input");
    }

    #[test]
    fn fractional_cfo_tracks_injection_under_noise() {
        let p = params();
        let tx = tx_frame(&p, 2);
        let injected = 0.3 * p.subcarrier_spacing;
        for seed in 0..10 {
            let rx = impaired(&p, &tx, 500, injected, 0.0, Some(20.0), seed);
            let (_, frac) = schmidl_cox(&rx, &p).unwrap();
            assert!(
                (frac - injected).abs() < 0.01 * p.subcarrier_spacing,
                "seed {seed}: estimated {frac:.1} for {injected:.1}"
            );
        }
    }

    #[test]
    fn pure_noise_fails_detection() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let noise: Vec<Complex64> = (0..8192)
            .map(|_| Complex64::new(dist.sample(&mut rng), dist.sample(&mut rng)))
            .collect();
        let signal = BasebandSignal::new(noise, p.sample_rate);
        assert!(matches!(
            schmidl_cox(&signal, &p),
            Err(Error::SyncDetectionFailed(_))
        ));
    }

    #[test]
    fn integer_cfo_recovers_whole_bins() {
        let p = params();
        let tx = tx_frame(&p, 3);
        let spacing = p.subcarrier_spacing;
        for (injected_bins, frac_part) in [(0i64, 0.0), (2, 0.1), (-3, -0.2)] {
            let cfo = injected_bins as f64 * spacing + frac_part * spacing;
            let rx = impaired(&p, &tx, 700, cfo, 0.0, Some(25.0), 4);
            let (coarse, frac) = schmidl_cox(&rx, &p).unwrap();
            let int = integer_cfo(&rx, &p, coarse, frac).unwrap();
            // The half-symbol metric may fold a half-bin ambiguity into the
            // fractional part; only the combined value is meaningful.
            let total = int as f64 * spacing + frac;
            assert!(
                (total - cfo).abs() < 0.02 * spacing,
                "recovered {total:.1} Hz for {cfo:.1} Hz"
            );
        }
    }

    #[test]
    fn tied_correlation_scores_are_ambiguous() {
        let scores: Vec<(i64, f64)> = vec![(-1, 0.5), (0, 1.0), (1, 0.9)];
        assert!(matches!(
            pick_best_shift(&scores),
            Err(Error::IntegerCfoAmbiguous { .. })
        ));
        let scores: Vec<(i64, f64)> = vec![(-1, 0.01), (0, 1.0), (1, 0.2)];
        assert_eq!(pick_best_shift(&scores).unwrap(), 0);
    }

    #[test]
    fn fine_timing_is_sample_exact_when_clean() {
        let p = params();
        let tx = tx_frame(&p, 4);
        for sto in [0usize, 1000] {
            let rx = impaired(&p, &tx, sto, 0.0, 0.0, None, 0);
            let (coarse, frac) = schmidl_cox(&rx, &p).unwrap();
            let estimates = SyncEstimates {
                coarse_sto: coarse,
                frac_cfo_hz: frac,
                ..SyncEstimates::zero()
            };
            assert_eq!(fine_sto(&rx, &p, &estimates).unwrap(), sto);
        }
    }

    #[test]
    fn fine_timing_stays_within_one_sample_at_10db() {
        let p = params();
        let tx = tx_frame(&p, 5);
        let mut hits = 0;
        for seed in 0..20 {
            let rx = impaired(&p, &tx, 1500, 0.0, 0.0, Some(10.0), 100 + seed);
            let (coarse, frac) = schmidl_cox(&rx, &p).unwrap();
            let estimates = SyncEstimates {
                coarse_sto: coarse,
                frac_cfo_hz: frac,
                ..SyncEstimates::zero()
            };
            let fine = fine_sto(&rx, &p, &estimates).unwrap();
            if (fine as isize - 1500).abs() <= 1 {
                hits += 1;
            }
        }
        assert!(hits >= 19, "only {hits}/20 within one sample");
    }

    #[test]
    fn sfo_estimates_match_injection() {
        let p = params();
        let tx = tx_frame(&p, 6);
        for (injected, tolerance) in [(50.0, 0.2), (30.0, 0.5), (0.0, 0.05)] {
            let rx = apply_sfo(&tx, injected);
            let grid = demodulate(&rx, &p, 0).unwrap();
            let estimate = estimate_sfo(&grid, &p).unwrap();
            assert!(
                (estimate - injected).abs() < tolerance,
                "estimated {estimate:.3} ppm for {injected} ppm"
            );
        }
    }

    #[test]
    fn block_pilots_support_sfo_estimation() {
        let mut p = params();
        p.pilot_pattern = crate::ofdm::PilotPattern::block(2, 77);
        let tx = tx_frame(&p, 7);
        let rx = apply_sfo(&tx, 40.0);
        let grid = demodulate(&rx, &p, 0).unwrap();
        let estimate = estimate_sfo(&grid, &p).unwrap();
        assert!((estimate - 40.0).abs() < 0.3, "block-pilot estimate {estimate:.3}");
    }

    #[test]
    fn compensate_then_reapply_restores_interior() {
        let p = params();
        let tx = tx_frame(&p, 8);
        let rx = impaired(&p, &tx, 900, 3000.0, 25.0, None, 0);
        let estimates = SyncEstimates {
            coarse_sto: 900,
            fine_sto: 900,
            frac_cfo_hz: 3000.0,
            int_cfo_bins: 0,
            residual_cfo_hz: 0.0,
            sfo_ppm: 25.0,
        };
        let comp = compensate(&rx, &estimates, &p).unwrap();
        let back = reapply(&comp, &estimates, &p);
        let guard = 200;
        let lo = 900 + guard;
        let hi = (900 + tx.len()).min(back.len()) - guard;
        let mut num = 0.0;
        let mut den = 0.0;
        for k in lo..hi {
            num += (back.samples[k] - rx.samples[k]).norm_sqr();
            den += rx.samples[k].norm_sqr();
        }
        let residual_db = 10.0 * (num / den).log10();
        assert!(residual_db < -50.0, "round trip at {residual_db:.1} dB");
    }

    #[test]
    fn zero_estimates_are_identity() {
        let p = params();
        let tx = tx_frame(&p, 9);
        let comp = compensate(&tx, &SyncEstimates::zero(), &p).unwrap();
        assert_eq!(comp.samples, tx.samples);
        let back = reapply(&tx, &SyncEstimates::zero(), &p);
        assert_eq!(back.samples, tx.samples);
    }

    #[test]
    fn compensation_with_true_offsets_flattens_pilot_phase() {
        let p = params();
        let tx = tx_frame(&p, 10);
        let rx = impaired(&p, &tx, 1200, 5000.0, 30.0, None, 0);
        let estimates = SyncEstimates {
            coarse_sto: 1200,
            fine_sto: 1200,
            frac_cfo_hz: 5000.0,
            int_cfo_bins: 0,
            residual_cfo_hz: 0.0,
            sfo_ppm: 30.0,
        };
        let comp = compensate(&rx, &estimates, &p).unwrap();
        let grid = demodulate(&comp, &p, 0).unwrap();
        let v = pilot_pair_products(&grid, &p, 2).unwrap();
        let drift: Complex64 = v.iter().sum();
        // Phase drift per symbol across the pilot pairs.
        let per_symbol = drift.arg() / p.pilot_pattern.symbol_interval as f64;
        assert!(
            per_symbol.abs() < 1e-3,
            "pilot drift {per_symbol:.2e} rad/symbol"
        );
    }

    #[test]
    fn residuals_recover_small_leftovers() {
        let p = params();
        let tx = tx_frame(&p, 11);

        let clean = demodulate(&tx, &p, 0).unwrap();
        let (sto0, cfo0) = residual_offsets(&clean, &p).unwrap();
        assert!(sto0.abs() < 1e-6, "clean residual STO {sto0}");
        assert!(cfo0.abs() < 1e-6, "clean residual CFO {cfo0}");

        // Half-sample timing error shows up as a subcarrier phase slope.
        let late = resample(&tx, 1.0); // clone through the identity path
        let mut shifted = vec![Complex64::new(0.0, 0.0); late.len()];
        // Apply a 0.5-sample delay with the path machinery.
        let path = crate::channel::PathSpec {
            delay_s: 0.5 / p.sample_rate,
            doppler_hz: 0.0,
            amplitude: Complex64::new(1.0, 0.0),
            origin: crate::channel::PathOrigin::BiLos,
        };
        let delayed = crate::channel::apply_path(&tx, &path).unwrap();
        shifted.copy_from_slice(&delayed.samples);
        let grid = demodulate(&delayed, &p, 0).unwrap();
        let (sto, _) = residual_offsets(&grid, &p).unwrap();
        assert!((sto - 0.5).abs() < 0.05, "estimated {sto} for 0.5 samples");

        let rotated = apply_cfo(&tx, 100.0);
        let grid = demodulate(&rotated, &p, 0).unwrap();
        let (_, cfo) = residual_offsets(&grid, &p).unwrap();
        assert!((cfo - 100.0).abs() < 10.0, "estimated {cfo} Hz for 100 Hz");
    }

    #[test]
    fn full_chain_meets_joint_bounds() {
        let p = params();
        let spacing = p.subcarrier_spacing;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..10 {
            let tx = tx_frame(&p, 200 + trial);
            let sto = rng.gen_range(0..3000usize);
            let cfo = rng.gen_range(-2.0..2.0) * spacing;
            let sfo = rng.gen_range(-50.0..50.0);
            let snr = rng.gen_range(15.0..25.0);
            let rx = impaired(&p, &tx, sto, cfo, sfo, Some(snr), 300 + trial);
            let est = estimate_all(&rx, &p).unwrap();
            assert!(
                (est.fine_sto as isize - sto as isize).abs() <= 1,
                "trial {trial}: STO {} for {sto}",
                est.fine_sto
            );
            let cfo_err = (est.total_cfo_hz(&p) - cfo).abs();
            assert!(
                cfo_err < 0.02 * spacing,
                "trial {trial}: CFO error {cfo_err:.1} Hz"
            );
            assert!(
                (est.sfo_ppm - sfo).abs() < 0.5,
                "trial {trial}: SFO {} for {sfo}",
                est.sfo_ppm
            );
            assert!(est.frac_cfo_hz.abs() <= spacing / 2.0 + 1e-9);
        }
    }
}
