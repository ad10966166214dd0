//! Per-pixel curve fitting in z: window location, magnitude fit, phase
//! initialization, complex fit, and reconstruction of intensity and depth.
//!
//! The four stages run independently per pixel on an immutable spatial
//! volume, so the volume fit is a deterministic parallel map.

use crate::config::AcquisitionConfig;
use crate::error::{Result, ThzError};
use crate::model;
use crate::solver::{self, LeastSquaresProblem, SolverOptions};
use crate::volume::{ComplexVolume, DepthMap, Domain, IntensityImage};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

/// Fitting window around the magnitude peak, inclusive index range clamped
/// to the profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitWindow {
    pub z_max: usize,
    pub lo: usize,
    pub hi: usize,
}

impl FitWindow {
    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Default half-width of the fitting window.
pub const DEFAULT_TAU_F: usize = 45;

/// Clamped windows shorter than this many samples are not fitted; with 4
/// parameters this keeps at least a 4x residual/parameter ratio.
pub const MIN_WINDOW_LEN: usize = 16;

/// Locate the magnitude peak (lowest index wins ties) and build the
/// fitting window. Returns None for an all-zero profile.
pub fn locate_window(signal: &[Complex64], tau_f: usize) -> Option<FitWindow> {
    let mut z_max = 0usize;
    let mut best = 0.0f64;
    for (z, s) in signal.iter().enumerate() {
        let m = s.norm_sqr();
        if m > best {
            best = m;
            z_max = z;
        }
    }
    if best == 0.0 {
        return None;
    }
    let lo = z_max.saturating_sub(tau_f);
    let hi = (z_max + tau_f).min(signal.len() - 1);
    Some(FitWindow { z_max, lo, hi })
}

/// Result of the per-pixel pipeline.
#[derive(Debug, Clone)]
pub struct SincFitParams {
    /// Field amplitude, >= 0.
    pub amplitude: f64,
    /// Peak position in padded samples.
    pub mu: f64,
    /// Inverse lobe width, per padded sample, in (0, 1].
    pub sigma: f64,
    /// Phase, wrapped to [-pi, pi).
    pub phi: f64,
    /// Complex-fit residual RMSE over the window.
    pub rmse: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct PixelFit {
    pub params: Option<SincFitParams>,
    /// Magnitude-peak position, the max-magnitude depth baseline.
    pub z_max: usize,
}

impl PixelFit {
    fn invalid() -> Self {
        Self {
            params: None,
            z_max: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitGrid {
    pub nx: usize,
    pub ny: usize,
    pub tau_f: usize,
    pub omega: f64,
    pixels: Vec<PixelFit>,
}

impl FitGrid {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &PixelFit {
        &self.pixels[y * self.nx + x]
    }

    pub fn pixels(&self) -> &[PixelFit] {
        &self.pixels
    }

    pub fn converged_fraction(&self) -> f64 {
        let n = self
            .pixels
            .iter()
            .filter(|p| p.params.as_ref().is_some_and(|q| q.converged))
            .count();
        n as f64 / self.pixels.len() as f64
    }
}

/// Magnitude residual system: r_i = A |sinc(sigma (z_i - mu))| - |u_hat[z_i]|,
/// parameters (A, mu, sigma). Public so oracles can probe its Jacobian.
pub struct MagnitudeProblem<'a> {
    /// Sample positions z_i.
    pub zs: &'a [f64],
    /// Data magnitudes |u_hat[z_i]|.
    pub mags: &'a [f64],
}

impl LeastSquaresProblem for MagnitudeProblem<'_> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_residuals(&self) -> usize {
        self.zs.len()
    }
    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        let (a, mu, sigma) = (x[0], x[1], x[2]);
        for (i, (&z, &m)) in self.zs.iter().zip(self.mags).enumerate() {
            out[i] = a * model::sinc(sigma * (z - mu)).abs() - m;
        }
    }
    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let (a, mu, sigma) = (x[0], x[1], x[2]);
        for (i, &z) in self.zs.iter().enumerate() {
            let t = sigma * (z - mu);
            let s = model::sinc(t);
            let sd = model::sinc_deriv(t);
            let sgn = if s >= 0.0 { 1.0 } else { -1.0 };
            out[(i, 0)] = s.abs();
            out[(i, 1)] = -a * sgn * sd * sigma;
            out[(i, 2)] = a * sgn * sd * (z - mu);
        }
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![
            (0.0, f64::INFINITY),
            (f64::NEG_INFINITY, f64::INFINITY),
            (1e-6, 1.0),
        ]
    }
}

/// Magnitude fit of A * |sinc(sigma (z - mu))| to |u_hat| over the window.
/// Initial guesses: peak magnitude, peak position, 1/pad_factor. On solver
/// failure the initial guesses come back with `converged = false`.
pub fn fit_magnitude(
    signal: &[Complex64],
    window: &FitWindow,
    pad_factor: usize,
    opts: &SolverOptions,
) -> (f64, f64, f64, bool) {
    let zs: Vec<f64> = (window.lo..=window.hi).map(|z| z as f64).collect();
    let mags: Vec<f64> = (window.lo..=window.hi).map(|z| signal[z].norm()).collect();
    let x0 = [
        signal[window.z_max].norm(),
        window.z_max as f64,
        1.0 / pad_factor as f64,
    ];
    let problem = MagnitudeProblem {
        zs: &zs,
        mags: &mags,
    };
    match solver::solve(&problem, &x0, opts) {
        Ok(rep) if rep.success => (rep.x[0], rep.x[1], rep.x[2], true),
        _ => (x0[0], x0[1], x0[2], false),
    }
}

/// Closed-form initial phase:
/// phi_m = atan2(sum sin(omega z + angle(u)), sum cos(omega z + angle(u)))
/// over the window. Returns the wrapped angle and a confidence flag that
/// is false when the resultant vector nearly vanishes.
pub fn init_phase(signal: &[Complex64], window: &FitWindow, omega: f64) -> (f64, bool) {
    let mut sin_sum = 0.0;
    let mut cos_sum = 0.0;
    for z in window.lo..=window.hi {
        let ang = omega * z as f64 + signal[z].arg();
        sin_sum += ang.sin();
        cos_sum += ang.cos();
    }
    if (sin_sum * sin_sum + cos_sum * cos_sum).sqrt() < 1e-12 {
        return (0.0, false);
    }
    (model::wrap_angle(sin_sum.atan2(cos_sum)), true)
}

/// Complex residual system: interleaved (re, im) residuals of the
/// modulated-sinc model against the data over the window, parameters
/// (A, mu, sigma, phi) with omega fixed. Public so oracles can probe its
/// Jacobian.
pub struct ComplexProblem<'a> {
    /// Sample positions z_i.
    pub zs: &'a [f64],
    /// Data real parts.
    pub re: &'a [f64],
    /// Data imaginary parts.
    pub im: &'a [f64],
    /// Fixed carrier slope.
    pub omega: f64,
    /// Lower bound on mu.
    pub mu_lo: f64,
    /// Upper bound on mu.
    pub mu_hi: f64,
}

impl LeastSquaresProblem for ComplexProblem<'_> {
    fn n_params(&self) -> usize {
        4
    }
    fn n_residuals(&self) -> usize {
        2 * self.zs.len()
    }
    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        let (a, mu, sigma, phi) = (x[0], x[1], x[2], x[3]);
        for (i, &z) in self.zs.iter().enumerate() {
            let (vre, vim) = model::eval_parts(z, a, mu, sigma, phi, self.omega);
            out[2 * i] = vre - self.re[i];
            out[2 * i + 1] = vim - self.im[i];
        }
    }
    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let (a, mu, sigma, phi) = (x[0], x[1], x[2], x[3]);
        for (i, &z) in self.zs.iter().enumerate() {
            let (d_re, d_im) = model::jacobian_row(z, a, mu, sigma, phi, self.omega);
            for j in 0..4 {
                out[(2 * i, j)] = d_re[j];
                out[(2 * i + 1, j)] = d_im[j];
            }
        }
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![
            (0.0, f64::INFINITY),
            (self.mu_lo, self.mu_hi),
            (1e-6, 1.0),
            (f64::NEG_INFINITY, f64::INFINITY),
        ]
    }
}

/// Complex fit of the full modulated-sinc model over the window, starting
/// from the magnitude-fit and phase-init values. omega stays fixed. On
/// solver failure, the initial values come back with `converged = false`.
pub fn fit_complex(
    signal: &[Complex64],
    window: &FitWindow,
    init: (f64, f64, f64, f64),
    omega: f64,
    tau_f: usize,
    opts: &SolverOptions,
) -> SincFitParams {
    let zs: Vec<f64> = (window.lo..=window.hi).map(|z| z as f64).collect();
    let re: Vec<f64> = (window.lo..=window.hi).map(|z| signal[z].re).collect();
    let im: Vec<f64> = (window.lo..=window.hi).map(|z| signal[z].im).collect();
    let problem = ComplexProblem {
        zs: &zs,
        re: &re,
        im: &im,
        omega,
        mu_lo: window.lo as f64 - tau_f as f64,
        mu_hi: window.hi as f64 + tau_f as f64,
    };
    let x0 = [init.0, init.1, init.2, init.3];
    let (x, converged, iterations) = match solver::solve(&problem, &x0, opts) {
        Ok(rep) if rep.success => (rep.x, true, rep.iterations),
        Ok(rep) => (rep.x, false, rep.iterations),
        Err(_) => (x0.to_vec(), false, 0),
    };
    let rmse = window_rmse(signal, window, x[0], x[1], x[2], x[3], omega, tau_f);
    SincFitParams {
        amplitude: x[0],
        mu: x[1],
        sigma: x[2],
        phi: model::wrap_angle(x[3]),
        rmse,
        converged,
        iterations,
    }
}

/// RMSE between data and model over the window, with the nominal window
/// size 2 tau_f + 1 as denominator.
pub fn window_rmse(
    signal: &[Complex64],
    window: &FitWindow,
    a: f64,
    mu: f64,
    sigma: f64,
    phi: f64,
    omega: f64,
    tau_f: usize,
) -> f64 {
    let mut sum = 0.0;
    for z in window.lo..=window.hi {
        let (vre, vim) = model::eval_parts(z as f64, a, mu, sigma, phi, omega);
        let dre = signal[z].re - vre;
        let dim = signal[z].im - vim;
        sum += dre * dre + dim * dim;
    }
    (sum / (2 * tau_f + 1) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub tau_f: usize,
    pub omega: f64,
    pub solver: SolverOptions,
}

impl FitOptions {
    pub fn for_config(cfg: &AcquisitionConfig) -> Self {
        Self {
            tau_f: DEFAULT_TAU_F,
            omega: cfg.carrier_omega,
            solver: SolverOptions::default(),
        }
    }
}

/// Run the full locate -> magnitude -> phase -> complex pipeline for one
/// profile.
pub fn fit_pixel(signal: &[Complex64], pad_factor: usize, opts: &FitOptions) -> PixelFit {
    let window = match locate_window(signal, opts.tau_f) {
        Some(w) => w,
        None => return PixelFit::invalid(),
    };
    let nominal = 2 * opts.tau_f + 1;
    if window.len() < nominal && window.len() < MIN_WINDOW_LEN {
        return PixelFit {
            params: None,
            z_max: window.z_max,
        };
    }
    let (a_m, mu_m, sigma_m, mag_ok) = fit_magnitude(signal, &window, pad_factor, &opts.solver);
    let (phi_m, _confident) = init_phase(signal, &window, opts.omega);
    let mut params = fit_complex(
        signal,
        &window,
        (a_m, mu_m, sigma_m, phi_m),
        opts.omega,
        opts.tau_f,
        &opts.solver,
    );
    // The phase init carries a pi ambiguity: it assumes a positive envelope,
    // but for wide lobes the window's sign-flipped side lobes can dominate
    // the circular mean. A wrong sign strands the amplitude at the A >= 0
    // bound, leaving the residual at data scale, so retry flipped.
    let peak = signal[window.z_max].norm();
    if params.rmse > 0.25 * peak {
        let flipped = fit_complex(
            signal,
            &window,
            (a_m, mu_m, sigma_m, model::wrap_angle(phi_m + std::f64::consts::PI)),
            opts.omega,
            opts.tau_f,
            &opts.solver,
        );
        if flipped.rmse < params.rmse {
            params = flipped;
        }
    }
    params.converged &= mag_ok;
    PixelFit {
        params: Some(params),
        z_max: window.z_max,
    }
}

/// Parallel per-pixel fit over the whole spatial volume. Deterministic:
/// the result is independent of worker count.
pub fn fit_volume(vol: &ComplexVolume, cfg: &AcquisitionConfig, opts: &FitOptions) -> Result<FitGrid> {
    if vol.domain != Domain::Spatial {
        return Err(ThzError::DomainMismatch {
            expected: Domain::Spatial,
        });
    }
    let (nx, ny) = (vol.nx, vol.ny);
    let pixels: Vec<PixelFit> = (0..nx * ny)
        .into_par_iter()
        .map(|p| {
            let (x, y) = (p % nx, p / nx);
            let signal = vol.pixel_signal(x, y);
            fit_pixel(&signal, cfg.pad_factor, opts)
        })
        .collect();
    Ok(FitGrid {
        nx,
        ny,
        tau_f: opts.tau_f,
        omega: opts.omega,
        pixels,
    })
}

/// Reconstructed intensity I_v = A^2 per pixel; invalid pixels become 0.
pub fn reconstruct_intensity(grid: &FitGrid) -> IntensityImage {
    let values: Vec<f64> = grid
        .pixels
        .iter()
        .map(|p| p.params.as_ref().map_or(0.0, |q| q.amplitude * q.amplitude))
        .collect();
    IntensityImage::new(grid.nx, grid.ny, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMethod {
    /// Fitted peak position mu (the curve-fit method).
    Mu,
    /// Integer max-magnitude position z_max (the baseline).
    MaxMagnitude,
}

/// Calibrate z positions to um: depth = (z - z0) / N * delta_d.
pub fn reconstruct_depth(
    grid: &FitGrid,
    z0: f64,
    cfg: &AcquisitionConfig,
    method: DepthMethod,
) -> DepthMap {
    let mut map = DepthMap::invalid(grid.nx, grid.ny);
    let scale = cfg.depth_per_sample_um / cfg.pad_factor as f64;
    for y in 0..grid.ny {
        for x in 0..grid.nx {
            let pix = grid.get(x, y);
            match method {
                DepthMethod::Mu => {
                    if let Some(q) = &pix.params {
                        map.set(x, y, (q.mu - z0) * scale);
                    }
                }
                DepthMethod::MaxMagnitude => {
                    if pix.params.is_some() {
                        map.set(x, y, (pix.z_max as f64 - z0) * scale);
                    }
                }
            }
        }
    }
    map
}

/// Median fitted mu over a rectangular reference region, used as the
/// calibration zero z0.
pub fn estimate_reference_z0(
    grid: &FitGrid,
    x_range: (usize, usize),
    y_range: (usize, usize),
    method: DepthMethod,
) -> Option<f64> {
    let mut mus = Vec::new();
    for y in y_range.0..y_range.1 {
        for x in x_range.0..x_range.1 {
            let pix = grid.get(x, y);
            match method {
                DepthMethod::Mu => {
                    if let Some(q) = &pix.params {
                        mus.push(q.mu);
                    }
                }
                DepthMethod::MaxMagnitude => {
                    if pix.params.is_some() {
                        mus.push(pix.z_max as f64);
                    }
                }
            }
        }
    }
    if mus.is_empty() {
        return None;
    }
    mus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = mus.len();
    Some(if n % 2 == 1 {
        mus[n / 2]
    } else {
        0.5 * (mus[n / 2 - 1] + mus[n / 2])
    })
}

/// Estimate the carrier slope from data: the median, over the
/// highest-magnitude pixels, of the phase decrement per padded sample
/// across the half-maximum main lobe.
pub fn estimate_carrier_omega(vol: &ComplexVolume, sample_pixels: usize) -> Result<f64> {
    if vol.domain != Domain::Spatial {
        return Err(ThzError::DomainMismatch {
            expected: Domain::Spatial,
        });
    }
    if sample_pixels < 10 {
        return Err(ThzError::InvalidArgument(
            "need at least 10 sample pixels".into(),
        ));
    }
    let n_pix = vol.n_pixels();
    let mut peaks: Vec<(f64, usize)> = (0..n_pix)
        .map(|p| {
            let sig = vol.pixel_signal(p % vol.nx, p / vol.nx);
            (sig.iter().map(|s| s.norm()).fold(0.0, f64::max), p)
        })
        .collect();
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let take = sample_pixels.min(n_pix);
    if take < 10 {
        return Err(ThzError::InvalidArgument(
            "volume has fewer than 10 pixels".into(),
        ));
    }

    let mut slopes = Vec::new();
    for &(_, p) in peaks.iter().take(take) {
        let sig = vol.pixel_signal(p % vol.nx, p / vol.nx);
        if let Some(w) = locate_window(&sig, 0) {
            let peak_mag = sig[w.z_max].norm();
            let mut lo = w.z_max;
            while lo > 0 && sig[lo - 1].norm() >= 0.5 * peak_mag {
                lo -= 1;
            }
            let mut hi = w.z_max;
            while hi + 1 < sig.len() && sig[hi + 1].norm() >= 0.5 * peak_mag {
                hi += 1;
            }
            if hi > lo {
                let mut acc = 0.0;
                for z in lo..hi {
                    acc += (sig[z + 1] * sig[z].conj()).arg();
                }
                slopes.push(-(acc / (hi - lo) as f64));
            }
        }
    }
    if slopes.is_empty() {
        return Err(ThzError::Numerical("no usable main lobes".into()));
    }
    slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = slopes.len();
    Ok(if n % 2 == 1 {
        slopes[n / 2]
    } else {
        0.5 * (slopes[n / 2 - 1] + slopes[n / 2])
    })
}
