//! Physics-based FMCW forward model: synthesizes frequency-domain beat
//! volumes for scenes with known per-pixel reflectivity and depth. Serves
//! as the ground-truth oracle for the evaluation harness.
//!
//! Per pixel: u(x,y)[k] = a(x,y) * exp(+j 2 pi f_k tau(x,y)) with
//! f_k = f_start + k B / N_z and tau = 2 (z_ref + depth) / c, where a is
//! the reflectivity map blurred laterally by a unit-sum Gaussian PSF (the
//! same kernel at every frequency bin). The +j sign makes the deramp DFT
//! (forward kernel e^{-j 2 pi k z / D}) localize the reflector at bin
//! z* = D * (B/N_z) * tau, with the carrier phase slope -pi (N_z - 1) / D.

use crate::config::{AcquisitionConfig, SPEED_OF_LIGHT};
use crate::error::{Result, ThzError};
use crate::volume::{ComplexVolume, Domain};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

/// FWHM of the system's measured lateral PSF (um).
pub const DEFAULT_PSF_FWHM_UM: f64 = 793.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Vertical stripes; intensity varies along x (horizontal resolution).
    VerticalBars,
    /// Horizontal stripes; intensity varies along y (vertical resolution).
    HorizontalBars,
}

/// One three-bar resolving group on the chart.
#[derive(Debug, Clone)]
pub struct BarGroup {
    pub orientation: Orientation,
    /// Realized bar period (um), after rounding to whole pixels.
    pub period_um: f64,
    pub bar_px: usize,
    pub gap_px: usize,
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

#[derive(Debug, Clone)]
pub struct StepBand {
    pub x0: usize,
    pub x1: usize,
    pub depth_um: f64,
}

#[derive(Debug, Clone)]
pub enum SceneLayout {
    Flat,
    /// Piecewise-constant depth bands along x; band 0 is the reference zero.
    Steps(Vec<StepBand>),
    /// Bar chart plus a tilted homogeneous band (rows y0..y1).
    Usaf {
        groups: Vec<BarGroup>,
        tilt_rows: (usize, usize),
    },
    Textured,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub nx: usize,
    pub ny: usize,
    /// Per-pixel reflectivity in [0, 1], x fastest.
    pub reflectivity: Vec<f64>,
    /// Per-pixel depth from the reference plane (um).
    pub depth_um: Vec<f64>,
    pub psf_fwhm_um: f64,
    /// None = noiseless.
    pub snr_db: Option<f64>,
    pub rng_seed: u64,
    pub layout: SceneLayout,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.reflectivity.len() != self.nx * self.ny
            || self.depth_um.len() != self.nx * self.ny
        {
            return Err(ThzError::InvalidArgument("scene map size mismatch".into()));
        }
        if !self
            .reflectivity
            .iter()
            .all(|r| (0.0..=1.0).contains(r) && r.is_finite())
        {
            return Err(ThzError::InvalidArgument(
                "reflectivity must lie in [0, 1]".into(),
            ));
        }
        if !self.depth_um.iter().all(|d| d.is_finite()) {
            return Err(ThzError::InvalidArgument("depth must be finite".into()));
        }
        if !(self.psf_fwhm_um > 0.0) {
            return Err(ThzError::InvalidArgument("psf_fwhm must be > 0".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant step ladder along x: a flat reference band at depth 0
/// followed by one band per step, each offset by the next entry of `steps`.
/// Unit reflectivity everywhere.
pub fn make_step_scene(
    _cfg: &AcquisitionConfig,
    steps: &[f64],
    nx: usize,
    ny: usize,
) -> Result<SceneSpec> {
    if steps.is_empty() {
        return Err(ThzError::InvalidArgument("steps must be nonempty".into()));
    }
    let n_bands = steps.len() + 1;
    if nx < n_bands {
        return Err(ThzError::InvalidArgument(format!(
            "nx = {nx} gives zero-area bands for {n_bands} bands"
        )));
    }
    let base = nx / n_bands;
    let rem = nx % n_bands;
    let mut bands = Vec::with_capacity(n_bands);
    let mut x = 0usize;
    let mut depth = 0.0;
    for i in 0..n_bands {
        if i > 0 {
            depth += steps[i - 1];
        }
        let w = base + usize::from(i < rem);
        bands.push(StepBand {
            x0: x,
            x1: x + w,
            depth_um: depth,
        });
        x += w;
    }
    let mut depth_map = vec![0.0; nx * ny];
    for b in &bands {
        for y in 0..ny {
            for x in b.x0..b.x1 {
                depth_map[y * nx + x] = b.depth_um;
            }
        }
    }
    Ok(SceneSpec {
        nx,
        ny,
        reflectivity: vec![1.0; nx * ny],
        depth_um: depth_map,
        psf_fwhm_um: DEFAULT_PSF_FWHM_UM,
        snr_db: None,
        rng_seed: 0,
        layout: SceneLayout::Steps(bands),
    })
}

const SUBSTRATE: f64 = 0.2;
const CHART_MARGIN: usize = 6;
const BAR_LEN: usize = 14;
const TILT_ROWS: usize = 18;
const TILT_RANGE_UM: f64 = 180.0;

/// Three-bar resolving chart at the given bar periods (um), horizontal and
/// vertical, on a substrate background, plus one tilted homogeneous metal
/// band (linear depth ramp) for the intensity-variance experiment.
pub fn make_usaf_scene(cfg: &AcquisitionConfig, bar_periods_um: &[f64]) -> Result<SceneSpec> {
    if bar_periods_um.is_empty() {
        return Err(ThzError::InvalidArgument("need at least one period".into()));
    }
    let step = cfg.lateral_step_um;
    let mut specs = Vec::new();
    for &p in bar_periods_um {
        if p < 2.0 * step {
            return Err(ThzError::InvalidArgument(format!(
                "period {p} um below the 2x lateral-step sampling limit"
            )));
        }
        let px = (p / step).round() as usize;
        let bar = px.div_ceil(2);
        let gap = px - bar;
        specs.push((bar, gap));
    }

    let m = CHART_MARGIN;
    let v_widths: Vec<usize> = specs.iter().map(|(b, g)| 3 * b + 2 * g).collect();
    let vx_total = m + v_widths.iter().map(|w| w + m).sum::<usize>();
    let hx_total = m + specs.len() * (BAR_LEN + m);
    let nx = vx_total.max(hx_total);
    let h_band = *v_widths.iter().max().unwrap();
    let ny = m + BAR_LEN + m + h_band + m + TILT_ROWS + m;

    let mut refl = vec![SUBSTRATE; nx * ny];
    let mut groups = Vec::new();

    // vertical-bar groups (horizontal resolution), top band
    let mut x = m;
    let y0 = m;
    for (i, &(bar, gap)) in specs.iter().enumerate() {
        let w = v_widths[i];
        for b in 0..3 {
            let bx = x + b * (bar + gap);
            for yy in y0..y0 + BAR_LEN {
                for xx in bx..bx + bar {
                    refl[yy * nx + xx] = 1.0;
                }
            }
        }
        groups.push(BarGroup {
            orientation: Orientation::VerticalBars,
            period_um: (bar + gap) as f64 * step,
            bar_px: bar,
            gap_px: gap,
            x0: x,
            x1: x + w,
            y0,
            y1: y0 + BAR_LEN,
        });
        x += w + m;
    }

    // horizontal-bar groups (vertical resolution), middle band
    let mut x = m;
    let y0 = m + BAR_LEN + m;
    for &(bar, gap) in &specs {
        let h = 3 * bar + 2 * gap;
        for b in 0..3 {
            let by = y0 + b * (bar + gap);
            for yy in by..by + bar {
                for xx in x..x + BAR_LEN {
                    refl[yy * nx + xx] = 1.0;
                }
            }
        }
        groups.push(BarGroup {
            orientation: Orientation::HorizontalBars,
            period_um: (bar + gap) as f64 * step,
            bar_px: bar,
            gap_px: gap,
            x0: x,
            x1: x + BAR_LEN,
            y0,
            y1: y0 + h,
        });
        x += BAR_LEN + m;
    }

    // tilted homogeneous band at the bottom
    let ty0 = ny - m - TILT_ROWS;
    let ty1 = ny - m;
    let mut depth = vec![0.0; nx * ny];
    for yy in ty0..ty1 {
        for xx in 0..nx {
            refl[yy * nx + xx] = 1.0;
            depth[yy * nx + xx] = TILT_RANGE_UM * xx as f64 / (nx - 1) as f64;
        }
    }

    Ok(SceneSpec {
        nx,
        ny,
        reflectivity: refl,
        depth_um: depth,
        psf_fwhm_um: DEFAULT_PSF_FWHM_UM,
        snr_db: None,
        rng_seed: 0,
        layout: SceneLayout::Usaf {
            groups,
            tilt_rows: (ty0, ty1),
        },
    })
}

/// Flat metal plane carrying a weak periodic reflectivity ripple (10%
/// modulation), standing in for texture embedded under the surface.
pub fn make_textured_scene(_cfg: &AcquisitionConfig, nx: usize, ny: usize) -> Result<SceneSpec> {
    if nx == 0 || ny == 0 {
        return Err(ThzError::InvalidArgument("empty scene".into()));
    }
    let mut refl = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let ripple = 0.05 * (2.0 * PI * x as f64 / 4.0).sin();
            refl[y * nx + x] = 0.9 + ripple;
        }
    }
    Ok(SceneSpec {
        nx,
        ny,
        reflectivity: refl,
        depth_um: vec![0.0; nx * ny],
        psf_fwhm_um: DEFAULT_PSF_FWHM_UM,
        snr_db: None,
        rng_seed: 0,
        layout: SceneLayout::Textured,
    })
}

/// Separable Gaussian blur with reflect boundary and a unit-sum sampled
/// kernel.
pub fn gaussian_blur_2d(values: &[f64], nx: usize, ny: usize, sigma_px: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_px).ceil() as i64;
    if radius == 0 || sigma_px <= 0.0 {
        return values.to_vec();
    }
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64 * i as f64) / (2.0 * sigma_px * sigma_px)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let reflect = |i: i64, n: i64| -> usize {
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - 1 - i;
            }
        }
        i as usize
    };

    let mut tmp = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = reflect(x as i64 + ki as i64 - radius, nx as i64);
                acc += k * values[y * nx + xx];
            }
            tmp[y * nx + x] = acc;
        }
    }
    let mut out = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = reflect(y as i64 + ki as i64 - radius, ny as i64);
                acc += k * tmp[yy * nx + x];
            }
            out[y * nx + x] = acc;
        }
    }
    out
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-pixel generator; independent of worker count and
/// iteration order.
pub fn pixel_rng(seed: u64, x: usize, y: usize) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(((y as u64) << 32) | x as u64));
    ChaCha8Rng::seed_from_u64(key)
}

/// Reference plane offset: a third of the alias-free depth range, keeping
/// fitting windows interior.
pub fn reference_plane_um(cfg: &AcquisitionConfig) -> f64 {
    let depth_range = cfg.n_freq as f64 * crate::config::depth_per_sample(cfg);
    depth_range / 3.0
}

/// Synthesize the frequency-domain beat volume for a scene.
pub fn synthesize(scene: &SceneSpec, cfg: &AcquisitionConfig) -> Result<ComplexVolume> {
    cfg.validate()?;
    scene.validate()?;
    let (nx, ny, nz) = (scene.nx, scene.ny, cfg.n_freq);
    let sigma_px = scene.psf_fwhm_um / (cfg.lateral_step_um * 2.354_820_045);
    let blurred = gaussian_blur_2d(&scene.reflectivity, nx, ny, sigma_px);
    let peak = blurred.iter().cloned().fold(0.0, f64::max);
    let noise_sigma = scene.snr_db.map(|snr| peak * 10f64.powf(-snr / 20.0));

    let z_ref = reference_plane_um(cfg);
    let bandwidth = cfg.bandwidth();
    let df = bandwidth / nz as f64;

    let pixels: Vec<Vec<Complex64>> = (0..nx * ny)
        .into_par_iter()
        .map(|p| {
            let (x, y) = (p % nx, p / nx);
            let a = blurred[p];
            let tau = 2.0 * (z_ref + scene.depth_um[p]) * 1e-6 / SPEED_OF_LIGHT;
            let mut sig: Vec<Complex64> = (0..nz)
                .map(|k| {
                    let fk = cfg.f_start + k as f64 * df;
                    Complex64::from_polar(a, 2.0 * PI * fk * tau)
                })
                .collect();
            if let Some(sigma) = noise_sigma {
                let mut rng = pixel_rng(scene.rng_seed, x, y);
                let s = sigma / f64::sqrt(2.0);
                for v in sig.iter_mut() {
                    let g1: f64 = standard_normal(&mut rng);
                    let g2: f64 = standard_normal(&mut rng);
                    *v += Complex64::new(s * g1, s * g2);
                }
            }
            sig
        })
        .collect();

    let mut samples = vec![Complex64::new(0.0, 0.0); nx * ny * nz];
    let slice = nx * ny;
    for (p, sig) in pixels.iter().enumerate() {
        for k in 0..nz {
            samples[p + k * slice] = sig[k];
        }
    }
    Ok(ComplexVolume::new(
        nx,
        ny,
        nz,
        Domain::Frequency,
        cfg.lateral_step_um as f32,
        samples,
    ))
}

/// Box-Muller standard normal from a uniform source.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Expected padded-bin position of a reflector at the given depth.
pub fn analytic_peak_bin(cfg: &AcquisitionConfig, depth_um: f64) -> f64 {
    let d = cfg.padded_len() as f64;
    let tau = 2.0 * (reference_plane_um(cfg) + depth_um) * 1e-6 / SPEED_OF_LIGHT;
    let nu = cfg.bandwidth() / cfg.n_freq as f64 * tau;
    (d * nu).rem_euclid(d)
}

/// Per-pixel ground truth sidecar: x, y, depth_um, reflectivity.
pub fn write_ground_truth_csv(scene: &SceneSpec, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "x,y,depth_um,reflectivity")?;
    for y in 0..scene.ny {
        for x in 0..scene.nx {
            let p = y * scene.nx + x;
            writeln!(
                w,
                "{},{},{},{}",
                x, y, scene.depth_um[p], scene.reflectivity[p]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::pad_and_fft;
    use approx::assert_relative_eq;

    fn small_cfg() -> AcquisitionConfig {
        let mut cfg = AcquisitionConfig::default();
        cfg.n_freq = 140;
        cfg.carrier_omega = crate::config::default_carrier_omega(140, 9);
        cfg
    }

    #[test]
    fn step_scene_bands() {
        let cfg = small_cfg();
        let scene = make_step_scene(&cfg, &[100.0], 32, 16).unwrap();
        match &scene.layout {
            SceneLayout::Steps(bands) => {
                assert_eq!(bands.len(), 2);
                assert_eq!(bands[0].depth_um, 0.0);
                assert_eq!(bands[1].depth_um, 100.0);
                assert_eq!(bands[0].x0, 0);
                assert_eq!(bands[1].x1, 32);
            }
            _ => panic!("expected step layout"),
        }
        assert!(scene.reflectivity.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn step_scene_single_zero_step_is_constant() {
        let cfg = small_cfg();
        let scene = make_step_scene(&cfg, &[0.0], 16, 4).unwrap();
        assert!(scene.depth_um.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn step_scene_rejects_zero_area_bands() {
        let cfg = small_cfg();
        assert!(make_step_scene(&cfg, &[1.0; 40], 20, 4).is_err());
        assert!(make_step_scene(&cfg, &[], 20, 4).is_err());
    }

    #[test]
    fn usaf_nyquist_edge_gives_single_pixel_bars() {
        let cfg = small_cfg();
        let scene = make_usaf_scene(&cfg, &[2.0 * cfg.lateral_step_um]).unwrap();
        let groups = match &scene.layout {
            SceneLayout::Usaf { groups, .. } => groups.clone(),
            _ => panic!(),
        };
        assert_eq!(groups[0].bar_px, 1);
        assert_eq!(groups[0].gap_px, 1);
        assert!(make_usaf_scene(&cfg, &[1.9 * cfg.lateral_step_um]).is_err());
    }

    #[test]
    fn usaf_tilt_band_is_unit_reflectivity() {
        let cfg = small_cfg();
        let scene = make_usaf_scene(&cfg, &[4.0 * cfg.lateral_step_um]).unwrap();
        let (y0, y1) = match &scene.layout {
            SceneLayout::Usaf { tilt_rows, .. } => *tilt_rows,
            _ => panic!(),
        };
        assert_eq!(y1 - y0, TILT_ROWS);
        for y in y0..y1 {
            for x in 0..scene.nx {
                assert_eq!(scene.reflectivity[y * scene.nx + x], 1.0);
            }
        }
        // ramp spans at most 200 um
        let lo = scene.depth_um[y0 * scene.nx];
        let hi = scene.depth_um[y0 * scene.nx + scene.nx - 1];
        assert!(hi - lo > 0.0 && hi - lo <= 200.0);
    }

    #[test]
    fn synthesized_peak_lands_on_analytic_bin() {
        let cfg = small_cfg();
        let mut scene = make_step_scene(&cfg, &[500.0], 4, 2).unwrap();
        scene.psf_fwhm_um = 1e-9; // effectively a delta PSF
        let vol = synthesize(&scene, &cfg).unwrap();
        let spatial = pad_and_fft(&vol, cfg.pad_factor).unwrap();
        for (x, depth) in [(0usize, 0.0), (3usize, 500.0)] {
            let sig = spatial.pixel_signal(x, 0);
            let z_max = sig
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
                .unwrap()
                .0;
            let expected = analytic_peak_bin(&cfg, depth);
            assert!(
                (z_max as f64 - expected).abs() <= 0.5,
                "peak {z_max} vs analytic {expected}"
            );
        }
    }

    #[test]
    fn flat_delta_scene_gives_identical_pixels() {
        let cfg = small_cfg();
        let mut scene = make_step_scene(&cfg, &[0.0], 6, 3).unwrap();
        scene.psf_fwhm_um = 1e-9;
        let vol = synthesize(&scene, &cfg).unwrap();
        let first = vol.pixel_signal(0, 0);
        for y in 0..3 {
            for x in 0..6 {
                assert_eq!(vol.pixel_signal(x, y), first);
            }
        }
    }

    #[test]
    fn phase_slope_across_main_lobe_matches_carrier() {
        let cfg = small_cfg();
        let mut scene = make_step_scene(&cfg, &[0.0], 2, 1).unwrap();
        scene.psf_fwhm_um = 1e-9;
        let vol = synthesize(&scene, &cfg).unwrap();
        let spatial = pad_and_fft(&vol, cfg.pad_factor).unwrap();
        let sig = spatial.pixel_signal(0, 0);
        let z_max = sig
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
            .unwrap()
            .0;
        // regression of unwrapped phase over the inner main lobe
        let lo = z_max - 3;
        let mut slopes = Vec::new();
        for z in lo..lo + 7 {
            let d = (sig[z + 1] * sig[z].conj()).arg();
            slopes.push(d);
        }
        let mean_slope: f64 = slopes.iter().sum::<f64>() / slopes.len() as f64;
        let omega = crate::config::default_carrier_omega(cfg.n_freq, cfg.pad_factor);
        assert_relative_eq!(-mean_slope, omega, max_relative = 1e-6);
    }

    #[test]
    fn noise_is_reproducible_per_seed() {
        let cfg = small_cfg();
        let mut scene = make_step_scene(&cfg, &[100.0], 8, 4).unwrap();
        scene.snr_db = Some(30.0);
        scene.rng_seed = 7;
        let a = synthesize(&scene, &cfg).unwrap();
        let b = synthesize(&scene, &cfg).unwrap();
        assert_eq!(a.samples(), b.samples());
        scene.rng_seed = 8;
        let c = synthesize(&scene, &cfg).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn parseval_between_domains() {
        let cfg = small_cfg();
        let mut scene = make_step_scene(&cfg, &[300.0], 4, 2).unwrap();
        scene.psf_fwhm_um = 1e-9;
        let vol = synthesize(&scene, &cfg).unwrap();
        let padded = crate::preprocess::zero_pad(&vol, cfg.pad_factor).unwrap();
        let spatial = crate::preprocess::deramp_fft(&padded).unwrap();
        let d = spatial.nz as f64;
        assert_relative_eq!(
            vol.energy(),
            spatial.energy() / d,
            max_relative = 1e-9
        );
    }

    #[test]
    fn doubling_reflectivity_doubles_signal() {
        let cfg = small_cfg();
        let mut scene = make_textured_scene(&cfg, 4, 4).unwrap();
        scene.psf_fwhm_um = 1e-9;
        let base = synthesize(&scene, &cfg).unwrap();
        let mut half = scene.clone();
        for r in half.reflectivity.iter_mut() {
            *r *= 0.5;
        }
        let halved = synthesize(&half, &cfg).unwrap();
        for (a, b) in base.samples().iter().zip(halved.samples()) {
            assert!((a * 0.5 - b).norm() < 1e-12);
        }
    }
}
