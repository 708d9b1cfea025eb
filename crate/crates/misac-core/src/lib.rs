//! Complex-baseband simulation library for multistatic OFDM joint
//! sensing-and-communication links.
//!
//! The library models a pair of co-channel OFDM transmitters (one monostatic
//! sensing node, one bistatic communication transmitter) received by a single
//! node, and provides the full processing chain on top of the composite
//! signal:
//!
//! ```text
//! ofdm         frame construction, (de)modulation, pilot layout, preamble
//! link_budget  received-power equations, interference ratios, SINR maps
//! channel      delay/Doppler paths, CFO/SFO/STO impairments, AWGN, composition
//! sync         preamble timing, carrier and sampling-clock recovery
//! radar        range-Doppler maps, peak detection, image SINR
//! comm         pilot channel estimation, equalization, BER/EVM scoring
//! sic          successive cancellation of coupling, monostatic reflections
//!              and the cross-link line-of-sight component
//! experiments  scenario builders, SINR sweeps, CSV/JSON reporting
//! ```
//!
//! All signal processing runs on `num_complex::Complex<f64>` buffers; grids
//! are `ndarray::Array2` with shape `(subcarriers, symbols)`. Everything that
//! draws randomness is seeded explicitly and reproducible across runs.

pub mod channel;
pub mod comm;
pub mod error;
pub mod experiments;
mod fft;
pub mod link_budget;
pub mod ofdm;
pub mod radar;
pub mod scenario;
pub mod sic;
pub mod sync;
pub mod units;

pub use channel::{ImpairmentSpec, PathOrigin, PathSpec};
pub use comm::CommResult;
pub use error::{Error, Result};
pub use experiments::{
    run_scenario, run_sweep, summarize_gains, GainSummary, MetricsRecord, MetricsReport,
    ScenarioConfig, ScenarioOutcome, SweepCase, SweepSpec, SyncMode,
};
pub use link_budget::{LinkGeometry, RadioParams};
pub use ofdm::{
    BasebandSignal, CellRole, FrameGrid, Modulation, OfdmParams, PilotKind, PilotPattern,
    PreambleConfig, SPEED_OF_LIGHT,
};
pub use radar::{Detection, NoiseRegion, RadarMode, RangeDopplerMap};
pub use scenario::Scenario;
pub use sic::{SicAction, SicConfig, SicReport};
pub use sync::SyncEstimates;
