//! Evaluation harness: fit-residual maps and window sweeps, depth-step
//! tables, bar-chart contrast / MTF / 3 dB resolution, per-row variance,
//! and dB-scaled images. All functions are pure.

use crate::config::AcquisitionConfig;
use crate::error::{Result, ThzError};
use crate::fitting::{self, FitGrid, FitOptions, FitWindow};
use crate::phantom::{BarGroup, Orientation, StepBand};
use crate::volume::{ComplexVolume, DepthMap, IntensityImage};
use std::io::{BufWriter, Write};
use std::path::Path;

/// Per-pixel residual RMSE recomputed from the volume and the fitted
/// parameters. Pixels without a fit get 0 and are excluded from the
/// aggregates.
pub fn fit_rmse_map(vol: &ComplexVolume, grid: &FitGrid) -> Result<(IntensityImage, f64, f64)> {
    if vol.nx != grid.nx || vol.ny != grid.ny {
        return Err(ThzError::InvalidArgument(format!(
            "grid {}x{} does not match volume {}x{}",
            grid.nx, grid.ny, vol.nx, vol.ny
        )));
    }
    let mut map = vec![0.0; vol.nx * vol.ny];
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut count = 0usize;
    for y in 0..vol.ny {
        for x in 0..vol.nx {
            let pix = grid.get(x, y);
            if let Some(q) = &pix.params {
                let signal = vol.pixel_signal(x, y);
                let lo = pix.z_max.saturating_sub(grid.tau_f);
                let hi = (pix.z_max + grid.tau_f).min(signal.len() - 1);
                let w = FitWindow {
                    z_max: pix.z_max,
                    lo,
                    hi,
                };
                let r = fitting::window_rmse(
                    &signal, &w, q.amplitude, q.mu, q.sigma, q.phi, grid.omega, grid.tau_f,
                );
                map[y * vol.nx + x] = r;
                sum += r;
                max = max.max(r);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(ThzError::Numerical("no valid fits in grid".into()));
    }
    Ok((
        IntensityImage::new(vol.nx, vol.ny, map),
        sum / count as f64,
        max,
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub tau_f: usize,
    pub mean_rmse: f64,
    pub max_rmse: f64,
}

/// Refit the volume for each window half-width and tabulate the RMSE
/// aggregates.
pub fn window_sweep(
    vol: &ComplexVolume,
    cfg: &AcquisitionConfig,
    taus: &[usize],
    omega: f64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(taus.len());
    for &tau_f in taus {
        let opts = FitOptions {
            tau_f,
            omega,
            ..FitOptions::for_config(cfg)
        };
        let grid = fitting::fit_volume(vol, cfg, &opts)?;
        let (_, mean, max) = fit_rmse_map(vol, &grid)?;
        rows.push(SweepRow {
            tau_f,
            mean_rmse: mean,
            max_rmse: max,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "tau_f,mean_rmse,max_rmse")?;
    for r in rows {
        writeln!(w, "{},{:.17e},{:.17e}", r.tau_f, r.mean_rmse, r.max_rmse)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct StepRow {
    /// Ground-truth depth difference between adjacent bands, um.
    pub gt_diff_um: f64,
    /// Measured difference from the fitted-peak depth map, um.
    pub diff_mu_um: f64,
    /// Measured difference from the max-magnitude depth map, um.
    pub diff_max_um: f64,
    /// |diff - gt| / gt for each method.
    pub err_mu: f64,
    pub err_max: f64,
    /// Error below 10% counts as resolvable.
    pub resolvable_mu: bool,
    pub resolvable_max: bool,
}

/// Mean depth over a centered, clamped `region x region` patch of a band.
fn band_mean_depth(map: &DepthMap, band: &StepBand, region: usize) -> Option<f64> {
    let cx = (band.x0 + band.x1) / 2;
    let cy = map.ny / 2;
    let half = region / 2;
    let x_lo = cx.saturating_sub(half).max(band.x0);
    let x_hi = (cx + region - half).min(band.x1);
    let y_lo = cy.saturating_sub(half);
    let y_hi = (cy + region - half).min(map.ny);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if let Some(d) = map.get(x, y) {
                sum += d;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per adjacent-band pair, compare measured depth differences against the
/// ground truth for both reconstruction methods.
pub fn depth_step_table(
    depth_mu: &DepthMap,
    depth_max: &DepthMap,
    bands: &[StepBand],
    region: usize,
) -> Result<Vec<StepRow>> {
    if bands.len() < 2 {
        return Err(ThzError::InvalidArgument(
            "step table needs at least two bands".into(),
        ));
    }
    let mut rows = Vec::new();
    for pair in bands.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let gt = b.depth_um - a.depth_um;
        if gt == 0.0 {
            return Err(ThzError::InvalidArgument(
                "adjacent bands with equal depth".into(),
            ));
        }
        let mu_a = band_mean_depth(depth_mu, a, region);
        let mu_b = band_mean_depth(depth_mu, b, region);
        let mx_a = band_mean_depth(depth_max, a, region);
        let mx_b = band_mean_depth(depth_max, b, region);
        let (mu_a, mu_b, mx_a, mx_b) = match (mu_a, mu_b, mx_a, mx_b) {
            (Some(q), Some(r), Some(s), Some(t)) => (q, r, s, t),
            _ => {
                return Err(ThzError::Numerical(
                    "band region has no valid depth pixels".into(),
                ))
            }
        };
        let diff_mu = mu_b - mu_a;
        let diff_max = mx_b - mx_a;
        let err_mu = ((diff_mu - gt) / gt).abs();
        let err_max = ((diff_max - gt) / gt).abs();
        rows.push(StepRow {
            gt_diff_um: gt,
            diff_mu_um: diff_mu,
            diff_max_um: diff_max,
            err_mu,
            err_max,
            resolvable_mu: err_mu < 0.10,
            resolvable_max: err_max < 0.10,
        });
    }
    Ok(rows)
}

pub fn write_step_table_csv(rows: &[StepRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "gt_diff_um,diff_mu_um,diff_max_um,err_mu,err_max,resolvable_mu,resolvable_max"
    )?;
    for r in rows {
        writeln!(
            w,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.gt_diff_um,
            r.diff_mu_um,
            r.diff_max_um,
            r.err_mu,
            r.err_max,
            r.resolvable_mu,
            r.resolvable_max
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct GroupContrast {
    pub orientation: Orientation,
    pub period_um: f64,
    /// Spatial frequency in line pairs / mm.
    pub freq_lp_mm: f64,
    /// Mean over interior cross-sections of 10 log10(max/min).
    pub mean_db: f64,
    /// Mean (max - min) / (max + min).
    pub mtf: f64,
}

/// Contrast of one bar group: per cross-section min/max over the group
/// extent, with 10% of the cross-sections dropped at each boundary.
fn group_contrast(img: &IntensityImage, g: &BarGroup) -> Result<GroupContrast> {
    let (along_lo, along_hi, cross_lo, cross_hi) = match g.orientation {
        // vertical bars vary along x; each row is a cross-section
        Orientation::VerticalBars => (g.x0, g.x1, g.y0, g.y1),
        Orientation::HorizontalBars => (g.y0, g.y1, g.x0, g.x1),
    };
    let n_cross = cross_hi - cross_lo;
    if n_cross == 0 || along_hi <= along_lo {
        return Err(ThzError::InvalidArgument("empty bar group".into()));
    }
    let drop = (n_cross as f64 * 0.10).ceil() as usize;
    let lo = cross_lo + drop;
    let hi = cross_hi.saturating_sub(drop).max(lo + 1).min(cross_hi);
    let mut db_sum = 0.0;
    let mut mtf_sum = 0.0;
    let mut n = 0usize;
    for c in lo..hi {
        let mut mn = f64::INFINITY;
        let mut mx = f64::NEG_INFINITY;
        for a in along_lo..along_hi {
            let v = match g.orientation {
                Orientation::VerticalBars => img.get(a, c),
                Orientation::HorizontalBars => img.get(c, a),
            };
            mn = mn.min(v);
            mx = mx.max(v);
        }
        if !mn.is_finite() || !mx.is_finite() {
            return Err(ThzError::Numerical("non-finite intensity in group".into()));
        }
        db_sum += 10.0 * (mx / mn.max(1e-300)).log10();
        mtf_sum += if mx + mn > 0.0 {
            (mx - mn) / (mx + mn)
        } else {
            0.0
        };
        n += 1;
    }
    Ok(GroupContrast {
        orientation: g.orientation,
        period_um: g.period_um,
        freq_lp_mm: 1000.0 / g.period_um,
        mean_db: db_sum / n as f64,
        mtf: mtf_sum / n as f64,
    })
}

/// Contrast table for all bar groups of one orientation, sorted coarse to
/// fine.
pub fn line_pattern_contrast(
    img: &IntensityImage,
    groups: &[BarGroup],
    orientation: Orientation,
) -> Result<Vec<GroupContrast>> {
    let mut rows: Vec<GroupContrast> = groups
        .iter()
        .filter(|g| g.orientation == orientation)
        .map(|g| group_contrast(img, g))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(ThzError::InvalidArgument(format!(
            "no {orientation:?} groups in chart"
        )));
    }
    rows.sort_by(|a, b| b.period_um.partial_cmp(&a.period_um).unwrap());
    Ok(rows)
}

/// The 3 dB resolution: the finest bar period still measured at >= 3 dB,
/// refined by linear interpolation in dB between the adjacent groups that
/// bracket the crossing. None when even the coarsest group is below 3 dB.
pub fn resolution_3db_um(rows: &[GroupContrast]) -> Option<f64> {
    const LIMIT: f64 = 3.0;
    if rows.is_empty() || rows[0].mean_db < LIMIT {
        return None;
    }
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.mean_db >= LIMIT && b.mean_db < LIMIT {
            let t = (a.mean_db - LIMIT) / (a.mean_db - b.mean_db);
            return Some(a.period_um + t * (b.period_um - a.period_um));
        }
    }
    // everything resolved: the finest measured period bounds the resolution
    rows.last().map(|r| r.period_um)
}

pub fn write_contrast_csv(rows: &[GroupContrast], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "orientation,period_um,freq_lp_mm,mean_db,mtf")?;
    for r in rows {
        let o = match r.orientation {
            Orientation::VerticalBars => "vertical",
            Orientation::HorizontalBars => "horizontal",
        };
        writeln!(
            w,
            "{o},{:.6},{:.6},{:.6},{:.6}",
            r.period_um, r.freq_lp_mm, r.mean_db, r.mtf
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Population (1/n) variance of each designated row over a column range.
pub fn region_variance(
    img: &IntensityImage,
    rows: &[usize],
    x_range: (usize, usize),
) -> Result<Vec<(usize, f64)>> {
    if x_range.1 <= x_range.0 || x_range.1 > img.nx {
        return Err(ThzError::InvalidArgument(format!(
            "bad column range {:?}",
            x_range
        )));
    }
    let n = (x_range.1 - x_range.0) as f64;
    let mut out = Vec::with_capacity(rows.len());
    for &y in rows {
        if y >= img.ny {
            return Err(ThzError::InvalidArgument(format!("row {y} out of range")));
        }
        let mean: f64 = (x_range.0..x_range.1).map(|x| img.get(x, y)).sum::<f64>() / n;
        let var: f64 = (x_range.0..x_range.1)
            .map(|x| (img.get(x, y) - mean).powi(2))
            .sum::<f64>()
            / n;
        out.push((y, var));
    }
    Ok(out)
}

pub fn write_variance_csv(rows: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "row,variance")?;
    for (y, v) in rows {
        writeln!(w, "{y},{v:.17e}")?;
    }
    w.flush()?;
    Ok(())
}

/// 10 log10(I / max(I)) clamped below at `floor_db`.
pub fn db_image(img: &IntensityImage, floor_db: f64) -> Result<IntensityImage> {
    let max = img.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(ThzError::InvalidArgument(
            "dB image needs a positive maximum".into(),
        ));
    }
    let values: Vec<f64> = img
        .values()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                (10.0 * (v / max).log10()).max(floor_db)
            } else {
                floor_db
            }
        })
        .collect();
    Ok(IntensityImage::new(img.nx, img.ny, values))
}
