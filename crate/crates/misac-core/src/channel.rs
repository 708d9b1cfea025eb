//! Received-signal composition for one ISAC node.
//!
//! Builds the composite baseband capture out of per-path delayed, Doppler
//! shifted and scaled copies of the two transmit frames (own monostatic
//! frame and the remote bistatic frame), carrier and sampling frequency
//! offsets on the bistatic branch, a frame-start offset for the bistatic
//! transmitter, and AWGN. Fractional delays use a circular windowed-sinc
//! interpolation kernel, so integer-sample delays stay exact circular
//! shifts. Per-branch bookkeeping is kept for cancellation references.

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::link_budget::{p_bi_los, p_bi_tgt, p_coupling, p_mono_tgt, LinkGeometry, RadioParams};
use crate::ofdm::{BasebandSignal, OfdmParams, SPEED_OF_LIGHT};
use crate::scenario::Scenario;
use crate::units::{dbm_to_mw, linear_to_db};

/// Which transmitter a propagation path belongs to and what it bounced off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathOrigin {
    /// Transmit-to-receive spillover inside the monostatic node.
    Coupling,
    /// Own-frame target reflection (two-way).
    Mono,
    /// Direct line of sight from the bistatic transmitter.
    BiLos,
    /// Bistatic transmitter's signal reflected off a target.
    BiTarget,
}

impl PathOrigin {
    pub fn is_bistatic(self) -> bool {
        matches!(self, PathOrigin::BiLos | PathOrigin::BiTarget)
    }
}

/// One propagation path: delay, Doppler, complex gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub delay_s: f64,
    pub doppler_hz: f64,
    pub amplitude: Complex64,
    pub origin: PathOrigin,
}

impl PathSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.delay_s.is_finite() && self.delay_s >= 0.0) {
            return Err(Error::config("path delay must be finite and non-negative"));
        }
        if !self.amplitude.is_finite() || !self.doppler_hz.is_finite() {
            return Err(Error::config("path amplitude and Doppler must be finite"));
        }
        Ok(())
    }
}

/// Receiver-side impairments of the bistatic branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentSpec {
    pub cfo_hz: f64,
    pub sfo_ppm: f64,
    /// Frame-start offset of the bistatic transmission, whole samples.
    pub sto_samples: usize,
}

impl ImpairmentSpec {
    pub fn none() -> Self {
        ImpairmentSpec {
            cfo_hz: 0.0,
            sfo_ppm: 0.0,
            sto_samples: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sfo_ppm.abs() >= 1000.0 {
            return Err(Error::config("sampling offset beyond 1000 ppm is not sane"));
        }
        Ok(())
    }
}

/// One-way (or round-trip) propagation delay for an origin class, seconds.
pub fn delay_for_origin(geometry: &LinkGeometry, origin: PathOrigin) -> f64 {
    match origin {
        PathOrigin::Coupling => 0.0,
        PathOrigin::Mono => 2.0 * geometry.r_mono / SPEED_OF_LIGHT,
        PathOrigin::BiLos => geometry.r_los / SPEED_OF_LIGHT,
        PathOrigin::BiTarget => (geometry.r_tx_tgt + geometry.r_tgt_rx) / SPEED_OF_LIGHT,
    }
}

/// Complex path gain from the link budget.
///
/// The magnitude is chosen so that a frame produced by `modulate` (mean
/// sample power 1/N) arrives with exactly the budget power in mW units:
/// |a| = 10^(P_dBm/20) * sqrt(N). The phase is the carrier rotation over
/// the path delay, e^{-j 2 pi tau f_c}.
pub fn path_amplitude_from_budget(
    radio: &RadioParams,
    geometry: &LinkGeometry,
    origin: PathOrigin,
    params: &OfdmParams,
) -> Complex64 {
    let p_dbm = match origin {
        PathOrigin::Coupling => p_coupling(radio),
        PathOrigin::Mono => p_mono_tgt(radio, geometry),
        PathOrigin::BiLos => p_bi_los(radio, geometry),
        PathOrigin::BiTarget => p_bi_tgt(radio, geometry),
    };
    let tau = delay_for_origin(geometry, origin);
    let f_c = SPEED_OF_LIGHT / radio.wavelength_m;
    let magnitude = dbm_to_mw(p_dbm).sqrt() * (params.n_subcarriers as f64).sqrt();
    Complex64::from_polar(magnitude, -2.0 * std::f64::consts::PI * tau * f_c)
}

/// Path from budget power, geometry-derived delay and explicit Doppler.
pub fn path_from_budget(
    radio: &RadioParams,
    geometry: &LinkGeometry,
    origin: PathOrigin,
    doppler_hz: f64,
    params: &OfdmParams,
) -> PathSpec {
    PathSpec {
        delay_s: delay_for_origin(geometry, origin),
        doppler_hz,
        amplitude: path_amplitude_from_budget(radio, geometry, origin, params),
        origin,
    }
}

/// Delay, Doppler shift and scale one signal block. The delay acts
/// circularly over the whole block (exact shift for integer samples,
/// band-limited phase ramp otherwise); the cyclic prefix absorbs the
/// per-symbol consequences for delays up to the prefix length.
pub fn apply_path(signal: &BasebandSignal, path: &PathSpec) -> Result<BasebandSignal> {
    path.validate()?;
    let len = signal.len();
    let delay_samples = path.delay_s * signal.sample_rate;
    if delay_samples >= len as f64 {
        return Err(Error::DelayTooLong {
            delay_samples,
            block_len: len,
        });
    }
    let mut buf = signal.samples.clone();
    if delay_samples != 0.0 {
        // Fractional delay as circular convolution with a windowed-sinc
        // kernel. A spectral phase ramp would have to jump by a fraction
        // of a turn somewhere on the frequency circle, and any cut
        // placement makes the response of nearby content vary along the
        // block; a time-invariant kernel instead gives every subcarrier a
        // fixed response (band-edge bins see a real attenuation), which a
        // per-subcarrier equalizer absorbs. The integer part reduces the
        // kernel to an exact delta, so whole-sample delays stay exact
        // circular shifts. The half-width sets the transition width near
        // the outermost frequency: short kernels spread the unavoidable
        // real-axis pinch there over many bins, gently enough for a
        // pilot-spaced interpolator to follow.
        let d_int = delay_samples.floor();
        let mu = delay_samples - d_int;
        let half = 24.min((len - 1) / 2) as isize;
        let mut kernel = vec![Complex64::new(0.0, 0.0); len];
        let sinc = |x: f64| {
            if x.abs() < 1e-12 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            }
        };
        for i in -half..=half {
            let w = 0.42
                + 0.5 * (std::f64::consts::PI * i as f64 / (half.max(1)) as f64).cos()
                + 0.08 * (2.0 * std::f64::consts::PI * i as f64 / (half.max(1)) as f64).cos();
            let tap = w * sinc(i as f64 - mu);
            let pos = (d_int as i64 + i as i64).rem_euclid(len as i64) as usize;
            kernel[pos] += Complex64::new(tap, 0.0);
        }
        let mut spec = kernel;
        fft::forward(&mut spec);
        fft::forward(&mut buf);
        for (v, k) in buf.iter_mut().zip(spec.iter()) {
            *v *= k;
        }
        fft::inverse(&mut buf);
        let l = len as f64;
        for v in buf.iter_mut() {
            *v /= l;
        }
    }
    let step = 2.0 * std::f64::consts::PI * path.doppler_hz / signal.sample_rate;
    for (k, v) in buf.iter_mut().enumerate() {
        *v *= path.amplitude * Complex64::from_polar(1.0, step * k as f64);
    }
    Ok(BasebandSignal::new(buf, signal.sample_rate))
}

/// Carrier frequency offset: per-sample rotation e^{j 2 pi f k / f_s}.
pub fn apply_cfo(signal: &BasebandSignal, cfo_hz: f64) -> BasebandSignal {
    if cfo_hz == 0.0 {
        return signal.clone();
    }
    let step = 2.0 * std::f64::consts::PI * cfo_hz / signal.sample_rate;
    let samples = signal
        .samples
        .iter()
        .enumerate()
        .map(|(k, v)| v * Complex64::from_polar(1.0, step * k as f64))
        .collect();
    BasebandSignal::new(samples, signal.sample_rate)
}

/// Sampling frequency offset of `ppm` parts per million: the receiver reads
/// sample k at position k(1 + ppm 1e-6) of the incoming stream.
pub fn apply_sfo(signal: &BasebandSignal, sfo_ppm: f64) -> BasebandSignal {
    resample(signal, 1.0 + sfo_ppm * 1e-6)
}

/// Band-limited fractional resampler: output k takes the value of the
/// periodic trigonometric interpolant of the input at position k * factor.
///
/// The interpolant is evaluated exactly through a chirp-z sum: with q =
/// factor / L the phase f k q factors as (f^2 + k^2 - (k-f)^2) q / 2, which
/// turns the evaluation into one linear convolution against a chirp. Unlike
/// kernel interpolators this treats subcarriers near the Nyquist edge
/// correctly, which matters for full-band OFDM content. Output length
/// equals input length; the handful of samples past the original end wrap
/// periodically.
pub fn resample(signal: &BasebandSignal, factor: f64) -> BasebandSignal {
    assert!(factor.is_finite() && factor > 0.0, "resample factor must be positive");
    let l = signal.len();
    if l == 0 || factor == 1.0 {
        return signal.clone();
    }

    let mut spec = signal.samples.clone();
    fft::forward(&mut spec);

    // y[k] = (1/L) sum_f X[f] e^{j 2 pi q f k}, f the signed bin index.
    let q = factor / l as f64;
    let f_min = -((l as i64 - 1) / 2);
    let chirp = |t: f64| -> Complex64 {
        Complex64::from_polar(1.0, std::f64::consts::PI * q * t * t)
    };

    let f_max = (l / 2) as i64;
    let out_len = l;
    let conv_len = out_len + 2 * l - 1;
    let p = conv_len.next_power_of_two();

    let mut a = vec![Complex64::new(0.0, 0.0); p];
    for (idx, v) in spec.iter().enumerate() {
        let f = if idx <= l / 2 {
            idx as i64
        } else {
            idx as i64 - l as i64
        };
        a[(f - f_min) as usize] = v * chirp(f as f64);
    }
    // C[i] covers the lag m = k - f through i = m + f_max.
    let mut c = vec![Complex64::new(0.0, 0.0); p];
    for (i, v) in c.iter_mut().enumerate().take(out_len + l - 1) {
        *v = chirp((i as i64 - f_max) as f64).conj();
    }
    fft::forward(&mut a);
    fft::forward(&mut c);
    for (av, cv) in a.iter_mut().zip(c.iter()) {
        *av *= cv;
    }
    fft::inverse(&mut a);

    // s[k + l - 1] = sum_f A C; undo the unnormalized FFT pair and the DFT.
    let scale = 1.0 / (l as f64 * p as f64);
    let samples = (0..out_len)
        .map(|k| a[k + l - 1] * chirp(k as f64) * scale)
        .collect();
    BasebandSignal::new(samples, signal.sample_rate)
}

/// Resample by `factor`, refined with one Newton step so the result inverts
/// a prior `resample(x, 1/factor)` to second order. A plain re-resample
/// leaves the small leakage of the stretched spectrum in place twice; the
/// correction squares that error operator, burying the round-trip residual.
pub fn resample_inverse(signal: &BasebandSignal, factor: f64) -> BasebandSignal {
    if factor == 1.0 {
        return signal.clone();
    }
    let w0 = resample(signal, factor);
    let back = resample(&w0, 1.0 / factor);
    let residual = BasebandSignal::new(
        signal
            .samples
            .iter()
            .zip(back.samples.iter())
            .map(|(a, b)| a - b)
            .collect(),
        signal.sample_rate,
    );
    let correction = resample(&residual, factor);
    BasebandSignal::new(
        w0.samples
            .iter()
            .zip(correction.samples.iter())
            .map(|(a, b)| a + b)
            .collect(),
        signal.sample_rate,
    )
}

/// First-order fractional resampler: output k linearly interpolates the
/// input between floor(k * factor) and the next sample, wrapping
/// periodically past the end.
///
/// This is the cheap O(L) alternative to `resample`. Interpolation error
/// grows toward the band edge, so on full-band OFDM content the residual
/// against the exact interpolant saturates near -14 dB once the
/// accumulated drift spans whole samples. Reconstruction paths that model
/// a low-complexity receiver use this deliberately; estimation paths that
/// need an invertible operation should stay on `resample`.
pub fn resample_linear(signal: &BasebandSignal, factor: f64) -> BasebandSignal {
    assert!(factor.is_finite() && factor > 0.0, "resample factor must be positive");
    let l = signal.len();
    if l == 0 || factor == 1.0 {
        return signal.clone();
    }
    let samples = (0..l)
        .map(|k| {
            let pos = k as f64 * factor;
            let base = pos.floor();
            let mu = pos - base;
            let i0 = (base as usize) % l;
            let i1 = (i0 + 1) % l;
            signal.samples[i0] * (1.0 - mu) + signal.samples[i1] * mu
        })
        .collect();
    BasebandSignal::new(samples, signal.sample_rate)
}

/// Composite received signal with per-branch references retained.
#[derive(Debug, Clone)]
pub struct ComposedSignal {
    pub total: BasebandSignal,
    pub coupling: BasebandSignal,
    /// Monostatic target reflections after any SINR-override scaling.
    pub mono_reflections: BasebandSignal,
    pub bi_los: BasebandSignal,
    pub bi_targets: BasebandSignal,
    pub noise: BasebandSignal,
    /// Linear amplitude factor applied to the Mono-origin paths.
    pub mono_scale: f64,
    /// (P_biLoS + P_biTgt) / (P_monoTgt + P_noise) over the composite
    /// window, dB, using the configured noise power.
    pub measured_sinr_db: f64,
}

fn zeros(len: usize, rate: f64) -> BasebandSignal {
    BasebandSignal::new(vec![Complex64::new(0.0, 0.0); len], rate)
}

fn pad_to(signal: &mut BasebandSignal, len: usize) {
    if signal.len() < len {
        signal.samples.resize(len, Complex64::new(0.0, 0.0));
    }
}

fn accumulate(target: &mut BasebandSignal, source: &BasebandSignal) {
    pad_to(target, source.len());
    for (t, s) in target.samples.iter_mut().zip(&source.samples) {
        *t += s;
    }
}

/// Sum every path contribution plus noise; returns only the composite.
pub fn compose_received(
    scenario: &Scenario,
    tx_mono: Option<&BasebandSignal>,
    tx_bi: Option<&BasebandSignal>,
) -> Result<BasebandSignal> {
    Ok(compose_detailed(scenario, tx_mono, tx_bi)?.total)
}

/// Sum every path contribution plus noise, keeping isolated branches.
///
/// Mono and Coupling paths act on the local frame; BiLos and BiTarget paths
/// act on the remote frame, which additionally receives CFO, SFO and the
/// frame-start offset. When `sinr_override_db` is set, the Mono-origin sum
/// is rescaled so the composite SINR equals the requested value.
pub fn compose_detailed(
    scenario: &Scenario,
    tx_mono: Option<&BasebandSignal>,
    tx_bi: Option<&BasebandSignal>,
) -> Result<ComposedSignal> {
    scenario.validate()?;
    let rate = scenario.params.sample_rate;
    let sto = scenario.impairments.sto_samples;

    let mut coupling = zeros(0, rate);
    let mut mono_reflections = zeros(0, rate);
    let mut bi_los = zeros(0, rate);
    let mut bi_targets = zeros(0, rate);

    for path in &scenario.paths {
        let (tx, label) = if path.origin.is_bistatic() {
            (tx_bi, "bistatic")
        } else {
            (tx_mono, "monostatic")
        };
        let tx = tx.ok_or_else(|| {
            Error::config(format!("path references the missing {label} transmit signal"))
        })?;
        let contribution = apply_path(tx, path)?;
        match path.origin {
            PathOrigin::Coupling => accumulate(&mut coupling, &contribution),
            PathOrigin::Mono => accumulate(&mut mono_reflections, &contribution),
            PathOrigin::BiLos => accumulate(&mut bi_los, &contribution),
            PathOrigin::BiTarget => accumulate(&mut bi_targets, &contribution),
        }
    }

    // Receiver-side impairments act on the combined bistatic arrival, then
    // the whole branch slides to its frame-start offset.
    let impair = |branch: &BasebandSignal| -> BasebandSignal {
        if branch.is_empty() {
            return branch.clone();
        }
        let shifted = apply_sfo(
            &apply_cfo(branch, scenario.impairments.cfo_hz),
            scenario.impairments.sfo_ppm,
        );
        let mut samples = vec![Complex64::new(0.0, 0.0); sto];
        samples.extend_from_slice(&shifted.samples);
        BasebandSignal::new(samples, branch.sample_rate)
    };
    let mut bi_los = impair(&bi_los);
    let mut bi_targets = impair(&bi_targets);

    let total_len = [
        coupling.len(),
        mono_reflections.len(),
        bi_los.len(),
        bi_targets.len(),
        tx_mono.map_or(0, BasebandSignal::len),
    ]
    .into_iter()
    .max()
    .unwrap();
    if total_len == 0 {
        return Err(Error::config("nothing to compose: no paths and no local frame"));
    }
    pad_to(&mut coupling, total_len);
    pad_to(&mut mono_reflections, total_len);
    pad_to(&mut bi_los, total_len);
    pad_to(&mut bi_targets, total_len);

    let noise_mw = dbm_to_mw(scenario.noise_power_dbm);
    let p_bi = (bi_los.energy() + bi_targets.energy()) / total_len as f64;
    let p_mono = mono_reflections.energy() / total_len as f64;

    let mono_scale = match scenario.sinr_override_db {
        None => 1.0,
        Some(target_db) => {
            let target = dbm_to_mw(target_db); // 10^(dB/10), same conversion
            if p_mono == 0.0 {
                return Err(Error::config(
                    "SINR override requires at least one Mono-origin path",
                ));
            }
            let wanted_denominator = p_bi / target - noise_mw;
            if wanted_denominator <= 0.0 {
                return Err(Error::OverrideInfeasible {
                    requested_db: target_db,
                    bi_power_dbm: linear_to_db(p_bi),
                    noise_dbm: scenario.noise_power_dbm,
                });
            }
            (wanted_denominator / p_mono).sqrt()
        }
    };
    if mono_scale != 1.0 {
        for v in mono_reflections.samples.iter_mut() {
            *v *= mono_scale;
        }
    }

    let measured_sinr_db = linear_to_db(
        (p_bi) / (mono_reflections.energy() / total_len as f64 + noise_mw),
    );

    let mut noise = zeros(total_len, rate);
    if noise_mw > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x6e6f_6973_655f_7267);
        let dist = Normal::new(0.0, (noise_mw / 2.0).sqrt()).expect("valid stddev");
        for v in noise.samples.iter_mut() {
            *v = Complex64::new(dist.sample(&mut rng), dist.sample(&mut rng));
        }
    }

    let mut total = zeros(total_len, rate);
    for branch in [&coupling, &mono_reflections, &bi_los, &bi_targets, &noise] {
        accumulate(&mut total, branch);
    }

    Ok(ComposedSignal {
        total,
        coupling,
        mono_reflections,
        bi_los,
        bi_targets,
        noise,
        mono_scale,
        measured_sinr_db,
    })
}

/// Element-wise product grid for rebuilding a frame from an estimated
/// channel and decided symbols (shared by the cancellation paths).
pub fn grid_product(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} versus {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a * b)
}
