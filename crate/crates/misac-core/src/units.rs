//! dB/linear conversions used throughout the crate.
//!
//! Powers are carried in dBm (absolute) or dB (ratios); linear powers are in
//! milliwatts so that `dbm_to_mw` and `mw_to_dbm` round-trip directly.

/// Ratio in dB to linear power ratio.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Linear power ratio to dB. Zero or negative input maps to `-inf`.
pub fn linear_to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * linear.log10()
    }
}

/// Absolute power in dBm to milliwatts.
pub fn dbm_to_mw(dbm: f64) -> f64 {
    db_to_linear(dbm)
}

/// Milliwatts to dBm.
pub fn mw_to_dbm(mw: f64) -> f64 {
    linear_to_db(mw)
}

/// Amplitude gain corresponding to a power gain in dB.
pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}
