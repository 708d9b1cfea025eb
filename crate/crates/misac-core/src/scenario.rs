//! Scenario definition and its on-disk TOML form.
//!
//! A `Scenario` is everything one experiment needs: waveform numerology,
//! radio parameters of both links, the explicit path list, impairments,
//! noise and the RNG seed. The file format describes geometry and targets
//! instead of raw paths; loading derives every path delay and complex gain
//! from the link budget. All file keys carry their unit as a suffix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{path_from_budget, ImpairmentSpec, PathOrigin, PathSpec};
use crate::error::{Error, Result};
use crate::link_budget::{LinkGeometry, RadioParams};
use crate::ofdm::{OfdmParams, SPEED_OF_LIGHT};

/// Full description of one simulated capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub params: OfdmParams,
    pub radio_mono: RadioParams,
    pub radio_bi: RadioParams,
    pub paths: Vec<PathSpec>,
    pub impairments: ImpairmentSpec,
    pub noise_power_dbm: f64,
    pub seed: u64,
    /// When set, the Mono-origin paths are rescaled at composition time so
    /// the bistatic-to-(mono reflection + noise) power ratio hits this value.
    pub sinr_override_db: Option<f64>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.radio_mono.validate()?;
        self.radio_bi.validate()?;
        self.impairments.validate()?;
        for path in &self.paths {
            path.validate()?;
        }
        let n_los = self
            .paths
            .iter()
            .filter(|p| p.origin == PathOrigin::BiLos)
            .count();
        let n_coupling = self
            .paths
            .iter()
            .filter(|p| p.origin == PathOrigin::Coupling)
            .count();
        let n_bi_tgt = self
            .paths
            .iter()
            .filter(|p| p.origin == PathOrigin::BiTarget)
            .count();
        if n_coupling > 1 {
            return Err(Error::config("at most one direct-coupling path is allowed"));
        }
        if n_los > 1 {
            return Err(Error::config("at most one bistatic LoS path is allowed"));
        }
        if n_bi_tgt > 0 && n_los == 0 {
            return Err(Error::config(
                "bistatic reflections require the LoS path of their transmitter",
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| Error::ScenarioParse(e.to_string()))?;
        file.into_scenario()
    }

    pub fn from_toml_file<P: AsRef<Path>>(path: P) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)?;
        Scenario::from_toml_str(&text)
    }
}

fn default_true() -> bool {
    true
}

impl Default for ImpairmentSpec {
    fn default() -> Self {
        ImpairmentSpec::none()
    }
}

/// Radio section of a scenario file; wavelength and noise power are filled
/// in from the carrier frequency and the top-level noise entry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RadioSection {
    pub p_tx_dbm: f64,
    pub g_tx_dbi: f64,
    pub g_rx_dbi: f64,
    pub sigma_mono_dbsm: f64,
    pub sigma_bi_dbsm: f64,
    pub coupling_rel_db: f64,
}

impl RadioSection {
    fn into_radio(self, wavelength_m: f64, noise_power_dbm: f64) -> RadioParams {
        RadioParams {
            p_tx_dbm: self.p_tx_dbm,
            g_tx_dbi: self.g_tx_dbi,
            g_rx_dbi: self.g_rx_dbi,
            wavelength_m,
            sigma_mono_dbsm: self.sigma_mono_dbsm,
            sigma_bi_dbsm: self.sigma_bi_dbsm,
            coupling_rel_db: self.coupling_rel_db,
            noise_power_dbm,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeometrySection {
    pub r_los_m: f64,
    #[serde(default)]
    pub los_doppler_hz: f64,
}

/// One reflecting target. A physical object that reflects both frames is
/// written as one `mono` and one `bistatic` entry sharing its position.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetSection {
    Mono {
        range_m: f64,
        #[serde(default)]
        doppler_hz: f64,
    },
    Bistatic {
        tx_range_m: f64,
        rx_range_m: f64,
        #[serde(default)]
        doppler_hz: f64,
    },
}

/// On-disk scenario schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub seed: u64,
    pub noise_power_dbm: f64,
    #[serde(default)]
    pub sinr_override_db: Option<f64>,
    #[serde(default = "default_true")]
    pub include_coupling: bool,
    pub ofdm: OfdmParams,
    pub radio_mono: RadioSection,
    pub radio_bi: RadioSection,
    pub geometry: GeometrySection,
    #[serde(default)]
    pub impairments: ImpairmentSpec,
    #[serde(default)]
    pub targets: Vec<TargetSection>,
}

impl ScenarioFile {
    /// Derive the explicit path list from geometry and budget.
    pub fn into_scenario(self) -> Result<Scenario> {
        let params = self.ofdm;
        params.validate()?;
        if !(self.geometry.r_los_m.is_finite() && self.geometry.r_los_m > 0.0) {
            return Err(Error::config("r_los_m must be positive"));
        }
        let wavelength = SPEED_OF_LIGHT / params.carrier_freq;
        let radio_mono = self.radio_mono.into_radio(wavelength, self.noise_power_dbm);
        let radio_bi = self.radio_bi.into_radio(wavelength, self.noise_power_dbm);

        // Unused legs hold harmless positive placeholders.
        let base = |r_mono: f64, r_tx_tgt: f64, r_tgt_rx: f64| LinkGeometry {
            r_los: self.geometry.r_los_m,
            r_mono,
            r_tx_tgt,
            r_tgt_rx,
        };

        let mut paths = Vec::new();
        if self.include_coupling {
            paths.push(path_from_budget(
                &radio_mono,
                &base(1.0, 1.0, 1.0),
                PathOrigin::Coupling,
                0.0,
                &params,
            ));
        }
        paths.push(path_from_budget(
            &radio_bi,
            &base(1.0, 1.0, 1.0),
            PathOrigin::BiLos,
            self.geometry.los_doppler_hz,
            &params,
        ));
        for target in &self.targets {
            match *target {
                TargetSection::Mono { range_m, doppler_hz } => {
                    if !(range_m.is_finite() && range_m > 0.0) {
                        return Err(Error::config("mono target range must be positive"));
                    }
                    paths.push(path_from_budget(
                        &radio_mono,
                        &base(range_m, 1.0, 1.0),
                        PathOrigin::Mono,
                        doppler_hz,
                        &params,
                    ));
                }
                TargetSection::Bistatic {
                    tx_range_m,
                    rx_range_m,
                    doppler_hz,
                } => {
                    if !(tx_range_m > 0.0 && rx_range_m > 0.0) {
                        return Err(Error::config("bistatic target legs must be positive"));
                    }
                    paths.push(path_from_budget(
                        &radio_bi,
                        &base(1.0, tx_range_m, rx_range_m),
                        PathOrigin::BiTarget,
                        doppler_hz,
                        &params,
                    ));
                }
            }
        }

        let scenario = Scenario {
            params,
            radio_mono,
            radio_bi,
            paths,
            impairments: self.impairments,
            noise_power_dbm: self.noise_power_dbm,
            seed: self.seed,
            sinr_override_db: self.sinr_override_db,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ScenarioParse(e.to_string()))
    }
}
