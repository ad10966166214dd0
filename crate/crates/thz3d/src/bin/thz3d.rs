//! Command-line front end for the THz 3D super-resolution pipeline.
//!
//! Subcommands:
//!   synth     - synthesize a test-scene beat-signal volume + ground truth
//!   fit       - per-pixel curve fitting: intensities and depth maps
//!   deconv    - lateral deconvolution of an intensity image
//!   eval      - evaluation tables (RMSE sweep, depth table, MTF, variance, dB)
//!   pipeline  - synth -> fit -> deconv -> eval driven by a key=value config
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use thz3d::config::{depth_per_sample_um, AcquisitionConfig};
use thz3d::deconv::{
    blind_tv_deconvolve, extract_kernel, gaussian_kernel, lucy_richardson, BlindDeconvOptions,
    Kernel,
};
use thz3d::fitting::{
    estimate_carrier_omega, estimate_reference_z0, fit_volume, reconstruct_depth,
    reconstruct_intensity, DepthMethod, FitGrid, FitOptions,
};
use thz3d::io::{
    read_image_csv, read_volume, write_image_csv, write_image_png, write_volume, PngScale,
};
use thz3d::metrics::{
    depth_step_table, line_pattern_contrast, region_variance, resolution_3db_um,
    window_sweep, write_contrast_csv, write_step_table_csv, write_sweep_csv,
};
use thz3d::phantom::{
    make_step_scene, make_textured_scene, make_usaf_scene, synthesize, write_ground_truth_csv,
    Orientation, SceneLayout, SceneSpec, DEFAULT_PSF_FWHM_UM,
};
use thz3d::preprocess::{pad_and_fft, reference_intensity};
use thz3d::volume::{ComplexVolume, DepthMap, Domain, IntensityImage};
use thz3d::ThzError;

/// Ground-truth step ladder (um) used by the default step scene: a flat
/// reference band followed by one band per entry, spanning two orders of
/// magnitude around the system's nominal single-sample depth resolution.
const DEFAULT_STEPS_UM: [f64; 14] = [
    4009.0, 2987.0, 2006.0, 1004.0, 903.0, 803.0, 703.0, 600.0, 472.0, 410.0, 298.0, 208.0, 91.0,
    42.0,
];

/// Default bar periods (um) for the resolving chart, from 12x down to 3x
/// the lateral scan step.
const DEFAULT_BAR_PERIODS_UM: [f64; 5] = [3150.0, 2100.0, 1575.0, 1050.0, 787.5];

const DEFAULT_SWEEP_TAUS: [usize; 8] = [5, 9, 13, 20, 28, 36, 45, 60];

fn default_psf_sigma_px() -> f64 {
    DEFAULT_PSF_FWHM_UM / 262.5 / (8.0 * std::f64::consts::LN_2).sqrt()
}

// ---------------------------------------------------------------------------
// error handling / exit codes

#[derive(Debug)]
enum CliError {
    /// Bad flags or flag values. Exit 1.
    Usage(String),
    /// Unreadable / malformed / inconsistent input data. Exit 2.
    Data(String),
    /// The numerics failed on valid input. Exit 3.
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ThzError> for CliError {
    fn from(e: ThzError) -> Self {
        match e {
            ThzError::Numerical(m) => CliError::Numerical(m),
            ThzError::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Re-tag a library error as a data error: validation failures on values
/// that came from an input file (not from flags) are data problems.
fn data_err(e: ThzError) -> CliError {
    CliError::Data(e.to_string())
}

// ---------------------------------------------------------------------------
// argument surface

#[derive(Parser)]
#[command(
    name = "thz3d",
    version,
    about = "FMCW THz 3D super-resolution: depth curve fitting + lateral deconvolution"
)]
struct Cli {
    /// Worker threads for per-pixel stages (default: all cores).
    /// Outputs are identical for any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a test scene into a beat-signal volume + ground truth CSV
    Synth(SynthArgs),
    /// Per-pixel model fitting: parameter table, intensities, depth maps
    Fit(FitArgs),
    /// Deconvolve an intensity image laterally
    Deconv(DeconvArgs),
    /// Evaluation tables and plots
    Eval(EvalArgs),
    /// Full synth -> fit -> deconv -> eval run from a key=value config file
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SceneKind {
    /// Depth step ladder on a flat plate
    Step,
    /// Three-bar resolving chart + tilted homogeneous band
    Usaf,
    /// Flat plate with a weak periodic reflectivity ripple
    Textured,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    scene: SceneKind,
    /// Scene width in pixels (step/textured; the chart sizes itself)
    #[arg(long)]
    nx: Option<usize>,
    /// Scene height in pixels (step/textured; the chart sizes itself)
    #[arg(long)]
    ny: Option<usize>,
    /// Per-pixel SNR in dB, or "inf" for noiseless
    #[arg(long, default_value = "inf")]
    snr_db: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Step heights (um), comma separated (step scene)
    #[arg(long)]
    steps_um: Option<String>,
    /// Bar periods (um), comma separated (usaf scene)
    #[arg(long)]
    bar_periods_um: Option<String>,
    /// Lateral PSF full width at half maximum (um)
    #[arg(long, default_value_t = DEFAULT_PSF_FWHM_UM)]
    psf_fwhm_um: f64,
    /// Frequency samples per pixel
    #[arg(long, default_value_t = 1400)]
    n_freq: usize,
    /// Lateral scan step (um)
    #[arg(long, default_value_t = 262.5)]
    lateral_step_um: f64,
    /// Output volume path; the ground truth goes to <out>.truth.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Input volume (frequency domain, or already padded+transformed)
    #[arg(long = "in")]
    input: PathBuf,
    /// Zero-padding factor N
    #[arg(long, default_value_t = 9)]
    pad: usize,
    /// Fitting half-window tau_f in padded samples
    #[arg(long, default_value_t = 45)]
    window: usize,
    /// Carrier slope omega: "nominal", "auto" (estimate from data), or a value
    #[arg(long, default_value = "nominal")]
    omega: String,
    /// Reference zero z-position: "auto" (median over the z0 region) or a
    /// padded-sample index
    #[arg(long, default_value = "auto")]
    z0: String,
    /// Reference region for --z0 auto as x0,x1,y0,y1 (default: whole image)
    #[arg(long)]
    z0_region: Option<String>,
    /// Depth per unpadded sample (um); default c/2B of the 514-640 GHz sweep
    #[arg(long)]
    depth_per_sample_um: Option<f64>,
    /// Output prefix; writes <prefix>params.csv, iu/iv images, depth maps
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DeconvMethod {
    /// Blind: total-variation prior, alternating image/kernel estimation
    TvBlind,
    /// Lucy-Richardson with an assumed Gaussian kernel
    LrGauss,
    /// Lucy-Richardson with a kernel loaded from file
    LrKernel,
}

#[derive(Args)]
struct DeconvArgs {
    /// Input intensity image (CSV)
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    method: DeconvMethod,
    /// TV weight relative to the image maximum (tv-blind)
    #[arg(long, default_value_t = 2e-3)]
    lambda: f64,
    /// Kernel side length (odd)
    #[arg(long, default_value_t = 15)]
    kernel_size: usize,
    /// Kernel CSV (lr-kernel)
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Lucy-Richardson iterations
    #[arg(long, default_value_t = 30)]
    iters: usize,
    /// Gaussian kernel sigma in pixels (lr-gauss)
    #[arg(long, default_value_t = default_psf_sigma_px())]
    psf_sigma_px: f64,
    /// Output prefix; writes <prefix>deconv.csv/.png and <prefix>kernel.csv
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalTask {
    /// Mean/max fit RMSE vs fitting window width, on a volume
    RmseSweep,
    /// Step-ladder depth difference table from two depth maps
    DepthTable,
    /// Bar-group contrast (dB + MTF) and 3 dB resolution, on an image
    Mtf,
    /// Per-row intensity variance of two images over a column range
    Variance,
    /// dB-scaled view of an image
    Db,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BarOrientation {
    /// Vertical bars (horizontal resolution)
    Horizontal,
    /// Horizontal bars (vertical resolution)
    Vertical,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: EvalTask,
    /// Input volume (rmse-sweep) or image CSV (mtf, db)
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Window half-widths to sweep, comma separated (rmse-sweep)
    #[arg(long)]
    taus: Option<String>,
    /// Zero-padding factor (rmse-sweep on a frequency-domain volume)
    #[arg(long, default_value_t = 9)]
    pad: usize,
    /// Curve-fit depth map CSV (depth-table)
    #[arg(long)]
    depth_mu: Option<PathBuf>,
    /// Max-magnitude depth map CSV (depth-table)
    #[arg(long)]
    depth_max: Option<PathBuf>,
    /// Ground-truth step heights (um), comma separated (depth-table)
    #[arg(long)]
    steps_um: Option<String>,
    /// Half-size of the per-band averaging square (depth-table)
    #[arg(long, default_value_t = 3)]
    region: usize,
    /// Bar periods (um) the chart was built with (mtf)
    #[arg(long)]
    bar_periods_um: Option<String>,
    #[arg(long, value_enum)]
    orientation: Option<BarOrientation>,
    /// Lateral scan step (um) the chart was built with (mtf)
    #[arg(long, default_value_t = 262.5)]
    lateral_step_um: f64,
    /// Reference intensity image I_u (variance)
    #[arg(long)]
    iu: Option<PathBuf>,
    /// Fitted intensity image I_v (variance)
    #[arg(long)]
    iv: Option<PathBuf>,
    /// Row range y0:y1 (variance)
    #[arg(long)]
    rows: Option<String>,
    /// Column range x0:x1 (variance; default: full width)
    #[arg(long)]
    cols: Option<String>,
    /// dB floor for the db task
    #[arg(long, default_value_t = -40.0)]
    floor_db: f64,
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Flat key=value config file
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set snr_db=20 (repeatable)
    #[arg(long = "set")]
    overrides: Vec<String>,
}

// ---------------------------------------------------------------------------
// small parsing helpers

fn parse_f64_list(s: &str, what: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad {what} entry {t:?}")))
        })
        .collect()
}

fn parse_usize_list(s: &str, what: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad {what} entry {t:?}")))
        })
        .collect()
}

/// "a:b" -> (a, b)
fn parse_range(s: &str, what: &str) -> CliResult<(usize, usize)> {
    let err = || CliError::Usage(format!("bad {what} range {s:?}, expected lo:hi"));
    let (a, b) = s.split_once(':').ok_or_else(err)?;
    let lo = a.trim().parse::<usize>().map_err(|_| err())?;
    let hi = b.trim().parse::<usize>().map_err(|_| err())?;
    if hi <= lo {
        return Err(err());
    }
    Ok((lo, hi))
}

fn parse_snr(s: &str) -> CliResult<Option<f64>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "none" => Ok(None),
        v => v
            .parse::<f64>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("bad snr value {s:?}, expected dB or inf"))),
    }
}

fn required<'a, T>(opt: &'a Option<T>, flag: &str, task: &str) -> CliResult<&'a T> {
    opt.as_ref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required for {task}")))
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_image(path: &Path) -> CliResult<IntensityImage> {
    let (values, nx, ny) = read_image_csv(path).map_err(data_err)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Data(format!(
            "{}: image contains non-finite values",
            path.display()
        )));
    }
    Ok(IntensityImage::new(nx, ny, values))
}

fn load_depth_map(path: &Path) -> CliResult<DepthMap> {
    let (values, nx, ny) = read_image_csv(path).map_err(data_err)?;
    let valid: Vec<bool> = values.iter().map(|v| v.is_finite()).collect();
    let clean: Vec<f64> = values
        .iter()
        .map(|v| if v.is_finite() { *v } else { 0.0 })
        .collect();
    Ok(DepthMap::new(nx, ny, clean, valid))
}

fn write_depth_csv(map: &DepthMap, path: &Path) -> CliResult<()> {
    let values: Vec<f64> = map
        .raw_values()
        .iter()
        .zip(map.validity())
        .map(|(v, ok)| if *ok { *v } else { f64::NAN })
        .collect();
    write_image_csv(&values, map.nx, map.ny, path).map_err(data_err)
}

fn save_image(img: &IntensityImage, prefix: &Path, stem: &str, png: PngScale) -> CliResult<()> {
    write_image_csv(
        img.values(),
        img.nx,
        img.ny,
        &prefixed(prefix, &format!("{stem}.csv")),
    )
    .map_err(data_err)?;
    write_image_png(img, png, &prefixed(prefix, &format!("{stem}.png"))).map_err(data_err)
}

/// Minimal line plot: one polyline per series on a white canvas, used for
/// the sweep figure. Axes run min..max of the data.
fn plot_series_png(series: &[(&[f64], &[f64])], path: &Path) -> CliResult<()> {
    const W: u32 = 480;
    const H: u32 = 320;
    const PAD: f64 = 24.0;
    let all_x: Vec<f64> = series.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let all_y: Vec<f64> = series.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    let (x0, x1) = (
        all_x.iter().cloned().fold(f64::INFINITY, f64::min),
        all_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = (
        all_y.iter().cloned().fold(f64::INFINITY, f64::min),
        all_y.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0).max(1e-300) * (W as f64 - 2.0 * PAD);
    let sy = |y: f64| H as f64 - PAD - (y - y0) / (y1 - y0).max(1e-300) * (H as f64 - 2.0 * PAD);
    let mut img = image::GrayImage::from_pixel(W, H, image::Luma([255u8]));
    let mut line = |xa: f64, ya: f64, xb: f64, yb: f64, shade: u8| {
        let n = ((xb - xa).abs().max((yb - ya).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let x = (xa + t * (xb - xa)).round() as i64;
            let y = (ya + t * (yb - ya)).round() as i64;
            if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
                img.put_pixel(x as u32, y as u32, image::Luma([shade]));
            }
        }
    };
    // frame
    line(PAD, PAD, PAD, H as f64 - PAD, 128);
    line(PAD, H as f64 - PAD, W as f64 - PAD, H as f64 - PAD, 128);
    for (si, (xs, ys)) in series.iter().enumerate() {
        let shade = if si == 0 { 0 } else { 90 };
        for w in xs.iter().zip(ys.iter()).collect::<Vec<_>>().windows(2) {
            line(sx(*w[0].0), sy(*w[0].1), sx(*w[1].0), sy(*w[1].1), shade);
        }
    }
    img.save(path)
        .map_err(|e| CliError::Data(format!("plot write failed: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

fn build_scene(
    kind: SceneKind,
    cfg: &AcquisitionConfig,
    nx: Option<usize>,
    ny: Option<usize>,
    steps_um: Option<&str>,
    bar_periods_um: Option<&str>,
) -> CliResult<SceneSpec> {
    match kind {
        SceneKind::Step => {
            let steps = match steps_um {
                Some(s) => parse_f64_list(s, "steps_um")?,
                None => DEFAULT_STEPS_UM.to_vec(),
            };
            Ok(make_step_scene(cfg, &steps, nx.unwrap_or(144), ny.unwrap_or(28))?)
        }
        SceneKind::Usaf => {
            if nx.is_some() || ny.is_some() {
                eprintln!("note: the chart scene sizes itself; --nx/--ny ignored");
            }
            let periods = match bar_periods_um {
                Some(s) => parse_f64_list(s, "bar_periods_um")?,
                None => DEFAULT_BAR_PERIODS_UM.to_vec(),
            };
            Ok(make_usaf_scene(cfg, &periods)?)
        }
        SceneKind::Textured => Ok(make_textured_scene(
            cfg,
            nx.unwrap_or(64),
            ny.unwrap_or(64),
        )?),
    }
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut cfg = AcquisitionConfig::default();
    cfg.n_freq = a.n_freq;
    cfg.lateral_step_um = a.lateral_step_um;
    cfg.validate()?;
    let mut scene = build_scene(
        a.scene,
        &cfg,
        a.nx,
        a.ny,
        a.steps_um.as_deref(),
        a.bar_periods_um.as_deref(),
    )?;
    scene.psf_fwhm_um = a.psf_fwhm_um;
    scene.snr_db = parse_snr(&a.snr_db)?;
    scene.rng_seed = a.seed;
    let vol = synthesize(&scene, &cfg)?;
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| data_err(e.into()))?;
        }
    }
    write_volume(&vol, &a.out).map_err(data_err)?;
    let truth = prefixed(&a.out, ".truth.csv");
    write_ground_truth_csv(&scene, &truth).map_err(data_err)?;
    eprintln!(
        "synth: {}x{}x{} volume -> {}, ground truth -> {}",
        vol.nx,
        vol.ny,
        vol.nz,
        a.out.display(),
        truth.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

struct FitProducts {
    grid: FitGrid,
    iu: IntensityImage,
    iv: IntensityImage,
    depth_mu: DepthMap,
    depth_max: DepthMap,
    omega: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_fit(
    raw: &ComplexVolume,
    pad: usize,
    tau_f: usize,
    omega_flag: &str,
    z0_flag: &str,
    z0_region: Option<(usize, usize, usize, usize)>,
    depth_per_sample: Option<f64>,
) -> CliResult<FitProducts> {
    let spatial = match raw.domain {
        Domain::Frequency => pad_and_fft(raw, pad).map_err(data_err)?,
        Domain::Spatial => raw.clone(),
    };
    let mut cfg = AcquisitionConfig::default();
    cfg.pad_factor = pad;
    cfg.n_freq = spatial.nz / pad;
    if spatial.nz % pad != 0 || cfg.n_freq < 2 {
        return Err(CliError::Data(format!(
            "volume depth {} is not a multiple of pad factor {pad}",
            spatial.nz
        )));
    }
    cfg.lateral_step_um = spatial.lateral_step_um as f64;
    cfg.depth_per_sample_um =
        depth_per_sample.unwrap_or_else(|| depth_per_sample_um(cfg.f_start, cfg.f_end));
    cfg.carrier_omega =
        thz3d::config::default_carrier_omega(cfg.n_freq, cfg.pad_factor);
    cfg.validate()?;

    let omega = match omega_flag.trim().to_ascii_lowercase().as_str() {
        "nominal" => cfg.carrier_omega,
        "auto" => {
            let est = estimate_carrier_omega(&spatial, 32).map_err(|e| match e {
                ThzError::Numerical(m) => CliError::Numerical(m),
                other => data_err(other),
            })?;
            eprintln!("fit: estimated omega = {est:.6} rad/sample (nominal {:.6})", cfg.carrier_omega);
            est
        }
        v => v
            .parse::<f64>()
            .map_err(|_| CliError::Usage(format!("bad --omega {omega_flag:?}")))?,
    };

    let mut opts = FitOptions::for_config(&cfg);
    opts.tau_f = tau_f;
    opts.omega = omega;
    let grid = fit_volume(&spatial, &cfg, &opts).map_err(data_err)?;
    eprintln!(
        "fit: {} of {} pixels converged",
        (grid.converged_fraction() * grid.pixels().len() as f64).round() as usize,
        grid.pixels().len()
    );
    let (iu, _) = reference_intensity(&spatial).map_err(data_err)?;
    let iv = reconstruct_intensity(&grid);

    let region = z0_region.unwrap_or((0, grid.nx, 0, grid.ny));
    let z0_for = |method: DepthMethod| -> CliResult<f64> {
        match z0_flag.trim().to_ascii_lowercase().as_str() {
            "auto" => estimate_reference_z0(
                &grid,
                (region.0, region.1),
                (region.2, region.3),
                method,
            )
            .ok_or_else(|| {
                CliError::Numerical("no valid fits in the z0 reference region".into())
            }),
            v => v
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad --z0 {z0_flag:?}"))),
        }
    };
    let depth_mu = reconstruct_depth(&grid, z0_for(DepthMethod::Mu)?, &cfg, DepthMethod::Mu);
    let depth_max = reconstruct_depth(
        &grid,
        z0_for(DepthMethod::MaxMagnitude)?,
        &cfg,
        DepthMethod::MaxMagnitude,
    );
    Ok(FitProducts {
        grid,
        iu,
        iv,
        depth_mu,
        depth_max,
        omega,
    })
}

fn write_params_csv(grid: &FitGrid, path: &Path) -> CliResult<()> {
    use std::io::Write as _;
    let f = std::fs::File::create(path).map_err(|e| data_err(e.into()))?;
    let mut w = std::io::BufWriter::new(f);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "x,y,z_max,amplitude,mu,sigma,phi,rmse,converged")?;
        for y in 0..grid.ny {
            for x in 0..grid.nx {
                let pix = grid.get(x, y);
                match &pix.params {
                    Some(p) => writeln!(
                        w,
                        "{},{},{},{},{},{},{},{},{}",
                        x, y, pix.z_max, p.amplitude, p.mu, p.sigma, p.phi, p.rmse, p.converged
                    )?,
                    None => writeln!(w, "{},{},{},,,,,,false", x, y, pix.z_max)?,
                }
            }
        }
        Ok(())
    })();
    res.map_err(|e| data_err(e.into()))
}

fn write_fit_products(p: &FitProducts, prefix: &Path) -> CliResult<()> {
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| data_err(e.into()))?;
        }
    }
    write_params_csv(&p.grid, &prefixed(prefix, "params.csv"))?;
    save_image(&p.iu, prefix, "iu", PngScale::Db(-40))?;
    save_image(&p.iv, prefix, "iv", PngScale::Db(-40))?;
    write_depth_csv(&p.depth_mu, &prefixed(prefix, "depth_mu.csv"))?;
    write_depth_csv(&p.depth_max, &prefixed(prefix, "depth_max.csv"))?;
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    if a.pad < 1 {
        return Err(CliError::Usage("--pad must be >= 1".into()));
    }
    let raw = read_volume(&a.input).map_err(data_err)?;
    let region = match &a.z0_region {
        Some(s) => {
            let v = parse_usize_list(s, "z0_region")?;
            if v.len() != 4 || v[1] <= v[0] || v[3] <= v[2] {
                return Err(CliError::Usage(
                    "--z0-region expects x0,x1,y0,y1 with x1>x0, y1>y0".into(),
                ));
            }
            Some((v[0], v[1], v[2], v[3]))
        }
        None => None,
    };
    let p = run_fit(
        &raw,
        a.pad,
        a.window,
        &a.omega,
        &a.z0,
        region,
        a.depth_per_sample_um,
    )?;
    write_fit_products(&p, &a.out_prefix)?;
    eprintln!(
        "fit: omega = {:.6}, outputs at {}*",
        p.omega,
        a.out_prefix.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// deconv

fn run_deconv(
    img: &IntensityImage,
    method: DeconvMethod,
    lambda_rel: f64,
    kernel_size: usize,
    kernel_path: Option<&Path>,
    iters: usize,
    psf_sigma_px: f64,
) -> CliResult<(IntensityImage, Kernel)> {
    match method {
        DeconvMethod::TvBlind => {
            let lambda = lambda_rel * img.max_value().max(f64::MIN_POSITIVE);
            let res = blind_tv_deconvolve(img, lambda, kernel_size, &BlindDeconvOptions::default())?;
            if res.diverged {
                eprintln!("deconv: objective rose at the finest scale; kept the best iterate");
            }
            let k = extract_kernel(&res);
            Ok((res.image, k))
        }
        DeconvMethod::LrGauss => {
            let k = gaussian_kernel(kernel_size, psf_sigma_px)?;
            let out = lucy_richardson(img, &k, iters).map_err(data_err)?;
            Ok((out, k))
        }
        DeconvMethod::LrKernel => {
            let path = kernel_path
                .ok_or_else(|| CliError::Usage("--kernel is required for lr-kernel".into()))?;
            let k = Kernel::read_csv(path).map_err(data_err)?;
            let out = lucy_richardson(img, &k, iters).map_err(data_err)?;
            Ok((out, k))
        }
    }
}

fn cmd_deconv(a: &DeconvArgs) -> CliResult<()> {
    let img = load_image(&a.input)?;
    if img.values().iter().any(|&v| v < 0.0) {
        return Err(CliError::Data(format!(
            "{}: negative intensities",
            a.input.display()
        )));
    }
    let (out, kernel) = run_deconv(
        &img,
        a.method,
        a.lambda,
        a.kernel_size,
        a.kernel.as_deref(),
        a.iters,
        a.psf_sigma_px,
    )?;
    if let Some(dir) = a.out_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| data_err(e.into()))?;
        }
    }
    save_image(&out, &a.out_prefix, "deconv", PngScale::Db(-40))?;
    kernel
        .write_csv(&prefixed(&a.out_prefix, "kernel.csv"))
        .map_err(data_err)?;
    eprintln!("deconv: outputs at {}*", a.out_prefix.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    if let Some(dir) = a.out_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| data_err(e.into()))?;
        }
    }
    match a.task {
        EvalTask::RmseSweep => {
            let input = required(&a.input, "in", "rmse-sweep")?;
            let raw = read_volume(input).map_err(data_err)?;
            let spatial = match raw.domain {
                Domain::Frequency => pad_and_fft(&raw, a.pad).map_err(data_err)?,
                Domain::Spatial => raw,
            };
            let mut cfg = AcquisitionConfig::default();
            cfg.pad_factor = a.pad;
            cfg.n_freq = spatial.nz / a.pad;
            cfg.lateral_step_um = spatial.lateral_step_um as f64;
            cfg.carrier_omega =
                thz3d::config::default_carrier_omega(cfg.n_freq, cfg.pad_factor);
            cfg.validate()?;
            let taus = match &a.taus {
                Some(s) => parse_usize_list(s, "taus")?,
                None => DEFAULT_SWEEP_TAUS.to_vec(),
            };
            let rows = window_sweep(&spatial, &cfg, &taus, cfg.carrier_omega)?;
            write_sweep_csv(&rows, &prefixed(&a.out_prefix, "sweep.csv")).map_err(data_err)?;
            let xs: Vec<f64> = rows.iter().map(|r| r.tau_f as f64).collect();
            let means: Vec<f64> = rows.iter().map(|r| r.mean_rmse).collect();
            let maxes: Vec<f64> = rows.iter().map(|r| r.max_rmse).collect();
            plot_series_png(
                &[(&xs, &means), (&xs, &maxes)],
                &prefixed(&a.out_prefix, "sweep.png"),
            )?;
            for r in &rows {
                eprintln!(
                    "eval: tau_f {:>3}: mean RMSE {:.6e}, max RMSE {:.6e}",
                    r.tau_f, r.mean_rmse, r.max_rmse
                );
            }
        }
        EvalTask::DepthTable => {
            let mu = load_depth_map(required(&a.depth_mu, "depth-mu", "depth-table")?)?;
            let mx = load_depth_map(required(&a.depth_max, "depth-max", "depth-table")?)?;
            if (mu.nx, mu.ny) != (mx.nx, mx.ny) {
                return Err(CliError::Data("depth map sizes differ".into()));
            }
            let steps = match &a.steps_um {
                Some(s) => parse_f64_list(s, "steps_um")?,
                None => DEFAULT_STEPS_UM.to_vec(),
            };
            let cfg = AcquisitionConfig::default();
            let scene = make_step_scene(&cfg, &steps, mu.nx, mu.ny)?;
            let bands = match &scene.layout {
                SceneLayout::Steps(b) => b.clone(),
                _ => unreachable!(),
            };
            let rows = depth_step_table(&mu, &mx, &bands, a.region)?;
            write_step_table_csv(&rows, &prefixed(&a.out_prefix, "depth_table.csv"))
                .map_err(data_err)?;
            for r in &rows {
                eprintln!(
                    "eval: step {:>7.1} um: curve-fit err {:>6.2}% ({}), max-magnitude err {:>6.2}% ({})",
                    r.gt_diff_um,
                    100.0 * r.err_mu,
                    if r.resolvable_mu { "resolved" } else { "missed" },
                    100.0 * r.err_max,
                    if r.resolvable_max { "resolved" } else { "missed" },
                );
            }
        }
        EvalTask::Mtf => {
            let img = load_image(required(&a.input, "in", "mtf")?)?;
            let periods = match &a.bar_periods_um {
                Some(s) => parse_f64_list(s, "bar_periods_um")?,
                None => DEFAULT_BAR_PERIODS_UM.to_vec(),
            };
            let orientation = match required(&a.orientation, "orientation", "mtf")? {
                BarOrientation::Horizontal => Orientation::VerticalBars,
                BarOrientation::Vertical => Orientation::HorizontalBars,
            };
            let mut cfg = AcquisitionConfig::default();
            cfg.lateral_step_um = a.lateral_step_um;
            cfg.validate()?;
            let scene = make_usaf_scene(&cfg, &periods)?;
            if (scene.nx, scene.ny) != (img.nx, img.ny) {
                return Err(CliError::Data(format!(
                    "image is {}x{} but the chart for these periods is {}x{}",
                    img.nx, img.ny, scene.nx, scene.ny
                )));
            }
            let groups = match &scene.layout {
                SceneLayout::Usaf { groups, .. } => groups.clone(),
                _ => unreachable!(),
            };
            let rows = line_pattern_contrast(&img, &groups, orientation)?;
            write_contrast_csv(&rows, &prefixed(&a.out_prefix, "mtf.csv")).map_err(data_err)?;
            match resolution_3db_um(&rows) {
                Some(r) => eprintln!("eval: 3 dB resolution = {r:.1} um"),
                None => eprintln!("eval: no group reaches 3 dB"),
            }
        }
        EvalTask::Variance => {
            let iu = load_image(required(&a.iu, "iu", "variance")?)?;
            let iv = load_image(required(&a.iv, "iv", "variance")?)?;
            if (iu.nx, iu.ny) != (iv.nx, iv.ny) {
                return Err(CliError::Data("image sizes differ".into()));
            }
            let (y0, y1) = parse_range(required(&a.rows, "rows", "variance")?, "rows")?;
            let cols = match &a.cols {
                Some(s) => parse_range(s, "cols")?,
                None => (0, iu.nx),
            };
            let rows: Vec<usize> = (y0..y1).collect();
            let vu = region_variance(&iu, &rows, cols)?;
            let vv = region_variance(&iv, &rows, cols)?;
            use std::io::Write as _;
            let path = prefixed(&a.out_prefix, "variance.csv");
            let f = std::fs::File::create(&path).map_err(|e| data_err(e.into()))?;
            let mut w = std::io::BufWriter::new(f);
            writeln!(w, "row,var_iu,var_iv").map_err(|e| data_err(e.into()))?;
            let mut improved = 0usize;
            for ((y, a_), (_, b_)) in vu.iter().zip(&vv) {
                writeln!(w, "{y},{a_},{b_}").map_err(|e| data_err(e.into()))?;
                improved += usize::from(b_ < a_);
            }
            eprintln!(
                "eval: fitted intensity variance below reference on {improved} of {} rows",
                vu.len()
            );
        }
        EvalTask::Db => {
            let img = load_image(required(&a.input, "in", "db")?)?;
            let db = thz3d::metrics::db_image(&img, a.floor_db)?;
            write_image_csv(
                db.values(),
                db.nx,
                db.ny,
                &prefixed(&a.out_prefix, "db.csv"),
            )
            .map_err(data_err)?;
            write_image_png(&img, PngScale::Db(a.floor_db as i32), &prefixed(&a.out_prefix, "db.png"))
                .map_err(data_err)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline

struct Config {
    map: BTreeMap<String, String>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl Config {
    fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Data(format!(
                    "{}: line {}: expected key = value",
                    path.display(),
                    i + 1
                ))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        for ov in overrides {
            let (k, v) = ov.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("bad --set {ov:?}, expected key=value"))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self {
            map,
            used: Default::default(),
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.map.get(key).map(String::as_str);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    fn require(&self, key: &str) -> CliResult<&str> {
        self.raw(key)
            .ok_or_else(|| CliError::Data(format!("missing config key `{key}`")))
    }

    fn get_parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|_| CliError::Data(format!("bad value for config key `{key}`: {v:?}"))),
        }
    }

    fn check_unused(&self) -> CliResult<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.map.keys().filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Data(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

fn cmd_pipeline(a: &PipelineArgs) -> CliResult<()> {
    let cfgfile = Config::load(&a.config, &a.overrides)?;

    // acquisition
    let mut cfg = AcquisitionConfig::default();
    cfg.f_start = cfgfile.get_parsed("f_start_hz", cfg.f_start)?;
    cfg.f_end = cfgfile.get_parsed("f_end_hz", cfg.f_end)?;
    cfg.n_freq = cfgfile.get_parsed("n_freq", cfg.n_freq)?;
    cfg.pad_factor = cfgfile.get_parsed("pad_factor", cfg.pad_factor)?;
    cfg.lateral_step_um = cfgfile.get_parsed("lateral_step_um", cfg.lateral_step_um)?;
    cfg.depth_per_sample_um = cfgfile.get_parsed(
        "depth_per_sample_um",
        depth_per_sample_um(cfg.f_start, cfg.f_end),
    )?;
    cfg.carrier_omega =
        thz3d::config::default_carrier_omega(cfg.n_freq, cfg.pad_factor);
    cfg.validate().map_err(data_err)?;
    let tau_f: usize = cfgfile.get_parsed("tau_f", 45)?;
    let omega_key = cfgfile.raw("carrier_omega").unwrap_or("nominal").to_string();

    // scene
    let scene_kind = match cfgfile.require("scene")? {
        "step" => SceneKind::Step,
        "usaf" => SceneKind::Usaf,
        "textured" => SceneKind::Textured,
        other => {
            return Err(CliError::Data(format!(
                "bad value for config key `scene`: {other:?}"
            )))
        }
    };
    let nx: Option<usize> = match cfgfile.raw("nx") {
        Some(v) => Some(v.parse().map_err(|_| {
            CliError::Data(format!("bad value for config key `nx`: {v:?}"))
        })?),
        None => None,
    };
    let ny: Option<usize> = match cfgfile.raw("ny") {
        Some(v) => Some(v.parse().map_err(|_| {
            CliError::Data(format!("bad value for config key `ny`: {v:?}"))
        })?),
        None => None,
    };
    let steps_key = cfgfile.raw("steps_um").map(str::to_string);
    let periods_key = cfgfile.raw("bar_periods_um").map(str::to_string);
    let mut scene = build_scene(
        scene_kind,
        &cfg,
        nx,
        ny,
        steps_key.as_deref(),
        periods_key.as_deref(),
    )?;
    scene.psf_fwhm_um = cfgfile.get_parsed("psf_fwhm_um", DEFAULT_PSF_FWHM_UM)?;
    scene.snr_db = parse_snr(cfgfile.raw("snr_db").unwrap_or("inf"))?;
    scene.rng_seed = cfgfile.get_parsed("seed", 1u64)?;

    // deconv settings
    let deconv_method = match cfgfile.raw("deconv_method").unwrap_or("none") {
        "none" => None,
        "tv-blind" => Some(DeconvMethod::TvBlind),
        "lr-gauss" => Some(DeconvMethod::LrGauss),
        "lr-kernel" => Some(DeconvMethod::LrKernel),
        other => {
            return Err(CliError::Data(format!(
                "bad value for config key `deconv_method`: {other:?}"
            )))
        }
    };
    let lambda_rel: f64 = cfgfile.get_parsed("lambda_rel", 2e-3)?;
    let kernel_size: usize = cfgfile.get_parsed("kernel_size", 15)?;
    let lr_iters: usize = cfgfile.get_parsed("lr_iters", 30)?;
    let psf_sigma_px: f64 = cfgfile.get_parsed(
        "psf_sigma_px",
        scene.psf_fwhm_um / cfg.lateral_step_um / (8.0 * std::f64::consts::LN_2).sqrt(),
    )?;
    let kernel_file = cfgfile.raw("kernel_file").map(PathBuf::from);
    let taus_key = cfgfile.raw("taus").map(str::to_string);
    let region: usize = cfgfile.get_parsed("region", 3)?;

    let out_dir = PathBuf::from(cfgfile.require("out_dir")?);
    cfgfile.check_unused()?;
    std::fs::create_dir_all(&out_dir).map_err(|e| data_err(e.into()))?;

    // synth
    let vol = synthesize(&scene, &cfg)?;
    write_volume(&vol, &out_dir.join("volume.thz3")).map_err(data_err)?;
    write_ground_truth_csv(&scene, &out_dir.join("volume.thz3.truth.csv")).map_err(data_err)?;
    eprintln!("pipeline: synthesized {}x{}x{}", vol.nx, vol.ny, vol.nz);

    // fit; for the step ladder, calibrate z0 on the reference band
    let z0_region = match &scene.layout {
        SceneLayout::Steps(bands) => Some((bands[0].x0, bands[0].x1, 0, scene.ny)),
        _ => None,
    };
    let prefix = out_dir.join("fit_");
    let products = run_fit(
        &vol,
        cfg.pad_factor,
        tau_f,
        &omega_key,
        "auto",
        z0_region,
        Some(cfg.depth_per_sample_um),
    )?;
    write_fit_products(&products, &prefix)?;
    eprintln!("pipeline: fit complete (omega {:.6})", products.omega);

    // deconv
    let deconv_img = match deconv_method {
        None => None,
        Some(method) => {
            let (img, kernel) = run_deconv(
                &products.iv,
                method,
                lambda_rel,
                kernel_size,
                kernel_file.as_deref(),
                lr_iters,
                psf_sigma_px,
            )?;
            let dprefix = out_dir.join("deconv_");
            save_image(&img, &dprefix, "deconv", PngScale::Db(-40))?;
            kernel
                .write_csv(&prefixed(&dprefix, "kernel.csv"))
                .map_err(data_err)?;
            eprintln!("pipeline: deconvolution complete");
            Some(img)
        }
    };

    // eval, keyed by scene layout
    match &scene.layout {
        SceneLayout::Steps(bands) => {
            let rows = depth_step_table(&products.depth_mu, &products.depth_max, bands, region)?;
            write_step_table_csv(&rows, &out_dir.join("depth_table.csv")).map_err(data_err)?;
            let resolved = rows.iter().filter(|r| r.resolvable_mu).count();
            eprintln!(
                "pipeline: depth table written; curve fit resolves {resolved} of {} steps",
                rows.len()
            );
            if let Some(taus) = &taus_key {
                let taus = parse_usize_list(taus, "taus")?;
                let spatial = pad_and_fft(&vol, cfg.pad_factor).map_err(data_err)?;
                let rows = window_sweep(&spatial, &cfg, &taus, products.omega)?;
                write_sweep_csv(&rows, &out_dir.join("sweep.csv")).map_err(data_err)?;
                let xs: Vec<f64> = rows.iter().map(|r| r.tau_f as f64).collect();
                let means: Vec<f64> = rows.iter().map(|r| r.mean_rmse).collect();
                let maxes: Vec<f64> = rows.iter().map(|r| r.max_rmse).collect();
                plot_series_png(&[(&xs, &means), (&xs, &maxes)], &out_dir.join("sweep.png"))?;
                eprintln!("pipeline: window sweep written");
            }
        }
        SceneLayout::Usaf { groups, tilt_rows } => {
            let eval_img = deconv_img.as_ref().unwrap_or(&products.iv);
            for (orient, stem) in [
                (Orientation::VerticalBars, "mtf_horizontal"),
                (Orientation::HorizontalBars, "mtf_vertical"),
            ] {
                let rows = line_pattern_contrast(eval_img, groups, orient)?;
                write_contrast_csv(&rows, &out_dir.join(format!("{stem}.csv")))
                    .map_err(data_err)?;
                match resolution_3db_um(&rows) {
                    Some(r) => eprintln!("pipeline: {stem} 3 dB resolution = {r:.1} um"),
                    None => eprintln!("pipeline: {stem}: no group reaches 3 dB"),
                }
            }
            let rows: Vec<usize> = (tilt_rows.0..tilt_rows.1).collect();
            let vu = region_variance(&products.iu, &rows, (0, products.iu.nx))?;
            let vv = region_variance(&products.iv, &rows, (0, products.iv.nx))?;
            use std::io::Write as _;
            let f = std::fs::File::create(out_dir.join("variance.csv"))
                .map_err(|e| data_err(e.into()))?;
            let mut w = std::io::BufWriter::new(f);
            writeln!(w, "row,var_iu,var_iv").map_err(|e| data_err(e.into()))?;
            for ((y, a_), (_, b_)) in vu.iter().zip(&vv) {
                writeln!(w, "{y},{a_},{b_}").map_err(|e| data_err(e.into()))?;
            }
            eprintln!("pipeline: variance table written");
        }
        SceneLayout::Flat | SceneLayout::Textured => {
            let eval_img = deconv_img.as_ref().unwrap_or(&products.iv);
            let db = thz3d::metrics::db_image(eval_img, -40.0)?;
            write_image_csv(db.values(), db.nx, db.ny, &out_dir.join("db.csv"))
                .map_err(data_err)?;
            write_image_png(eval_img, PngScale::Db(-40), &out_dir.join("db.png"))
                .map_err(data_err)?;
            eprintln!("pipeline: dB view written");
        }
    }
    eprintln!("pipeline: done, outputs in {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Deconv(a) => cmd_deconv(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Pipeline(a) => cmd_pipeline(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
