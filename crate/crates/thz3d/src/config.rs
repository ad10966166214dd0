//! Acquisition system constants.
//!
//! The defaults describe a 514-640 GHz FMCW scanner sweeping 1400 frequency
//! samples per pixel at a 262.5 um lateral step. Everything downstream
//! (phantom synthesis, preprocessing, fitting, depth calibration) reads its
//! constants from here.

use crate::error::{Result, ThzError};
use std::f64::consts::PI;

/// Speed of light in air (m/s), fixed.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone)]
pub struct AcquisitionConfig {
    /// Sweep start frequency (Hz).
    pub f_start: f64,
    /// Sweep end frequency (Hz).
    pub f_end: f64,
    /// Number of frequency samples per depth profile (N_z).
    pub n_freq: usize,
    /// Zero-padding factor N; padded length is D = N * N_z.
    pub pad_factor: usize,
    /// Lateral scan step (um).
    pub lateral_step_um: f64,
    /// Carrier angular frequency of the modulated-sinc model, in rad per
    /// padded z-sample. Defaults to pi*(N_z-1)/D, the linear-phase slope of
    /// the DFT of a length-N_z complex exponential. Overridable; a
    /// data-driven estimator lives in `fitting`.
    pub carrier_omega: f64,
    /// Physical depth per unpadded z-sample (um). Stored rather than
    /// recomputed so the system's nominal 1210 um can be injected in place
    /// of the value derived from the bandwidth.
    pub depth_per_sample_um: f64,
}

impl AcquisitionConfig {
    pub fn bandwidth(&self) -> f64 {
        self.f_end - self.f_start
    }

    /// Padded profile length D = pad_factor * n_freq.
    pub fn padded_len(&self) -> usize {
        self.pad_factor * self.n_freq
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_start > 0.0 && self.f_end > self.f_start) {
            return Err(ThzError::InvalidArgument(
                "require f_end > f_start > 0".into(),
            ));
        }
        if self.n_freq < 2 {
            return Err(ThzError::InvalidArgument("n_freq must be >= 2".into()));
        }
        if self.pad_factor < 1 {
            return Err(ThzError::InvalidArgument("pad_factor must be >= 1".into()));
        }
        if !(self.lateral_step_um > 0.0) {
            return Err(ThzError::InvalidArgument(
                "lateral_step_um must be > 0".into(),
            ));
        }
        if !(self.depth_per_sample_um > 0.0) {
            return Err(ThzError::InvalidArgument(
                "depth_per_sample_um must be > 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        let f_start = 514e9;
        let f_end = 640e9;
        let n_freq = 1400;
        let pad_factor = 9;
        Self {
            f_start,
            f_end,
            n_freq,
            pad_factor,
            lateral_step_um: 262.5,
            carrier_omega: default_carrier_omega(n_freq, pad_factor),
            depth_per_sample_um: depth_per_sample_um(f_start, f_end),
        }
    }
}

/// Nominal carrier slope pi*(N_z-1)/D in rad per padded sample.
pub fn default_carrier_omega(n_freq: usize, pad_factor: usize) -> f64 {
    PI * (n_freq as f64 - 1.0) / (pad_factor * n_freq) as f64
}

/// Depth covered by one unpadded z-sample: c / (2B), in um.
pub fn depth_per_sample_um(f_start: f64, f_end: f64) -> f64 {
    SPEED_OF_LIGHT / (2.0 * (f_end - f_start)) * 1e6
}

/// Depth per sample for an existing config, derived from its bandwidth.
pub fn depth_per_sample(cfg: &AcquisitionConfig) -> f64 {
    depth_per_sample_um(cfg.f_start, cfg.f_end)
}
