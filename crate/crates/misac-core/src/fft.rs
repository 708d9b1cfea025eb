//! Shared FFT plumbing on top of rustfft.
//!
//! rustfft leaves both directions unscaled; every call site applies its own
//! normalization. Plans are cached per thread keyed by (length, direction).

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((len, forward))
            .or_insert_with(|| {
                if forward {
                    planner.plan_fft_forward(len)
                } else {
                    planner.plan_fft_inverse(len)
                }
            })
            .clone()
    })
}

/// In-place unscaled forward DFT.
pub fn forward(buf: &mut [Complex64]) {
    if buf.len() > 1 {
        plan(buf.len(), true).process(buf);
    }
}

/// In-place unscaled inverse DFT (positive exponent).
pub fn inverse(buf: &mut [Complex64]) {
    if buf.len() > 1 {
        plan(buf.len(), false).process(buf);
    }
}

/// Cyclic shift of the zero-frequency bin to the centre, as used for the
/// Doppler axis of range-Doppler maps.
pub fn fftshift<T: Copy>(row: &mut [T]) {
    let n = row.len();
    row.rotate_left(n - n / 2);
}
