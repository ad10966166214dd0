//! Lateral super-resolution: Lucy-Richardson deconvolution with a supplied
//! kernel and TV-regularized blind deconvolution with kernel extraction.
//!
//! All convolutions use symmetric-reflection boundaries, and the adjoint is
//! the exact transpose of the forward operator, which is what makes the
//! Lucy-Richardson flux-conservation identity and the gradient checks hold
//! to near machine precision.

use crate::error::{Result, ThzError};
use crate::volume::IntensityImage;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Odd-sized square convolution kernel: nonnegative weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || size < 1 {
            return Err(ThzError::InvalidArgument(format!(
                "kernel size must be odd, got {size}"
            )));
        }
        if weights.len() != size * size {
            return Err(ThzError::InvalidArgument(format!(
                "kernel needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(ThzError::InvalidArgument(
                "kernel weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ThzError::InvalidArgument(format!(
                "kernel weights must sum to 1, got {sum}"
            )));
        }
        Ok(Self { size, weights })
    }

    /// Project arbitrary weights onto the kernel constraint set: clamp
    /// negatives to zero and renormalize. Falls back to a delta when
    /// everything clamps to zero.
    pub fn project(size: usize, weights: &[f64]) -> Result<Self> {
        let mut w: Vec<f64> = weights
            .iter()
            .map(|&v| if v.is_finite() && v > 0.0 { v } else { 0.0 })
            .collect();
        let sum: f64 = w.iter().sum();
        if sum <= 0.0 {
            return Ok(Self::delta(size));
        }
        for v in &mut w {
            *v /= sum;
        }
        // exact renormalization can still be off by one ulp; fix the center
        let err: f64 = 1.0 - w.iter().sum::<f64>();
        w[size * size / 2] += err;
        Self::new(size, w)
    }

    pub fn delta(size: usize) -> Self {
        assert!(size % 2 == 1);
        let mut weights = vec![0.0; size * size];
        weights[size * size / 2] = 1.0;
        Self { size, weights }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    /// Weight of the center tap.
    pub fn center_mass(&self) -> f64 {
        self.weights[self.size * self.size / 2]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for i in 0..self.size {
            let row: Vec<String> = (0..self.size)
                .map(|j| format!("{:.17e}", self.get(i, j)))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| ThzError::InvalidHeader(format!("bad kernel csv: {e}")))?);
        }
        let size = rows.len();
        if size == 0 || rows.iter().any(|r| r.len() != size) {
            return Err(ThzError::InvalidHeader("kernel csv must be square".into()));
        }
        Self::project(size, &rows.concat())
    }
}

/// Build a sampled isotropic Gaussian kernel, normalized to unit sum.
pub fn gaussian_kernel(size: usize, sigma_px: f64) -> Result<Kernel> {
    if size % 2 == 0 || size < 3 {
        return Err(ThzError::InvalidArgument(format!(
            "gaussian kernel size must be odd and >= 3, got {size}"
        )));
    }
    if !(sigma_px > 0.0) {
        return Err(ThzError::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma_px}"
        )));
    }
    let c = (size / 2) as f64;
    let mut weights = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            weights.push((-r2 / (2.0 * sigma_px * sigma_px)).exp());
        }
    }
    Kernel::project(size, &weights)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // symmetric (half-sample) reflection: -1 -> 0, n -> n-1
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Forward convolution with symmetric-reflection boundary (gather form).
pub fn conv2_reflect(img: &[f64], nx: usize, ny: usize, h: &Kernel) -> Vec<f64> {
    let half = (h.size / 2) as isize;
    let mut out = vec![0.0; nx * ny];
    out.par_chunks_mut(nx).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..h.size {
                let yy = reflect(y as isize + i as isize - half, ny);
                for j in 0..h.size {
                    let xx = reflect(x as isize + j as isize - half, nx);
                    acc += h.get(i, j) * img[yy * nx + xx];
                }
            }
            *o = acc;
        }
    });
    out
}

/// Exact adjoint of `conv2_reflect` (scatter form): for all a, b,
/// <conv(a), b> == <a, conv_adjoint(b)>.
pub fn conv2_reflect_adjoint(img: &[f64], nx: usize, ny: usize, h: &Kernel) -> Vec<f64> {
    let half = (h.size / 2) as isize;
    let mut out = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let v = img[y * nx + x];
            if v == 0.0 {
                continue;
            }
            for i in 0..h.size {
                let yy = reflect(y as isize + i as isize - half, ny);
                for j in 0..h.size {
                    let xx = reflect(x as isize + j as isize - half, nx);
                    out[yy * nx + xx] += h.get(i, j) * v;
                }
            }
        }
    }
    out
}

/// Lucy-Richardson deconvolution: I <- I * adj(h)(obs / conv(h, I)),
/// denominators clamped at 1e-12. iters = 0 returns the input unchanged.
pub fn lucy_richardson(img: &IntensityImage, h: &Kernel, iters: usize) -> Result<IntensityImage> {
    if img.values().iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(ThzError::InvalidArgument(
            "lucy_richardson input must be finite and nonnegative".into(),
        ));
    }
    let (nx, ny) = (img.nx, img.ny);
    let obs = img.values();
    let mut est: Vec<f64> = obs.to_vec();
    for _ in 0..iters {
        let blurred = conv2_reflect(&est, nx, ny, h);
        let ratio: Vec<f64> = obs
            .iter()
            .zip(&blurred)
            .map(|(&o, &b)| o / b.max(1e-12))
            .collect();
        let corr = conv2_reflect_adjoint(&ratio, nx, ny, h);
        for (e, c) in est.iter_mut().zip(&corr) {
            *e *= c;
        }
    }
    Ok(IntensityImage::new(nx, ny, est))
}

#[derive(Debug, Clone)]
pub struct BlindDeconvOptions {
    /// Pyramid levels, coarsest at half-scale^(scales-1).
    pub scales: usize,
    /// Conjugate-gradient iterations per image IRLS pass.
    pub inner_iters: usize,
    /// Alternations (image step + kernel step) per pyramid level.
    pub alternations: usize,
    /// IRLS reweighting passes per image step.
    pub irls_passes: usize,
    /// Smoothing of the L1 terms, relative to the image maximum.
    pub epsilon_rel: f64,
    /// TV weight multiplier used while the kernel is being estimated. An
    /// over-regularized image step flattens blur gradients so the residual
    /// blur lands in the kernel instead of surviving the alternation as the
    /// degenerate delta-kernel solution. The final image is recomputed with
    /// the caller's lambda once the kernel is fixed.
    pub lambda_boost: f64,
}

impl Default for BlindDeconvOptions {
    fn default() -> Self {
        Self {
            scales: 4,
            inner_iters: 30,
            alternations: 10,
            irls_passes: 3,
            epsilon_rel: 1e-4,
            lambda_boost: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlindDeconvResult {
    pub image: IntensityImage,
    pub kernel: Kernel,
    /// Final value of the objective at the finest scale.
    pub objective: f64,
    /// Objective after each accepted alternation at the finest scale
    /// (non-increasing by construction).
    pub accepted_objectives: Vec<f64>,
    /// Set when the finest-scale objective increased across an alternation
    /// and the best-so-far iterate was returned instead.
    pub diverged: bool,
}

/// Smoothed absolute value used by both the objective and the IRLS weights.
#[inline]
fn sabs(t: f64, eps: f64) -> f64 {
    (t * t + eps * eps).sqrt()
}

/// L1 data term plus anisotropic TV prior, both smoothed by eps.
fn objective(
    img: &[f64],
    obs: &[f64],
    nx: usize,
    ny: usize,
    h: &Kernel,
    lambda: f64,
    eps: f64,
) -> f64 {
    let blurred = conv2_reflect(img, nx, ny, h);
    let mut e = 0.0;
    for (b, o) in blurred.iter().zip(obs) {
        e += sabs(b - o, eps);
    }
    for y in 0..ny {
        for x in 0..nx {
            if x + 1 < nx {
                e += lambda * sabs(img[y * nx + x + 1] - img[y * nx + x], eps);
            }
            if y + 1 < ny {
                e += lambda * sabs(img[(y + 1) * nx + x] - img[y * nx + x], eps);
            }
        }
    }
    e
}

/// Apply the IRLS normal operator
/// K^T W_d K + lambda (Dx^T W_x Dx + Dy^T W_y Dy) to `v`.
fn normal_apply(
    v: &[f64],
    nx: usize,
    ny: usize,
    h: &Kernel,
    lambda: f64,
    wd: &[f64],
    wx: &[f64],
    wy: &[f64],
) -> Vec<f64> {
    let mut kv = conv2_reflect(v, nx, ny, h);
    for (k, w) in kv.iter_mut().zip(wd) {
        *k *= w;
    }
    let mut out = conv2_reflect_adjoint(&kv, nx, ny, h);
    for y in 0..ny {
        for x in 0..nx {
            let p = y * nx + x;
            if x + 1 < nx {
                let d = lambda * wx[p] * (v[p + 1] - v[p]);
                out[p] -= d;
                out[p + 1] += d;
            }
            if y + 1 < ny {
                let d = lambda * wy[p] * (v[p + nx] - v[p]);
                out[p] -= d;
                out[p + nx] += d;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Image step: a few IRLS reweightings, each solving the weighted normal
/// equations by conjugate gradients, then clamping to nonnegative.
fn image_step(
    img: &mut Vec<f64>,
    obs: &[f64],
    nx: usize,
    ny: usize,
    h: &Kernel,
    lambda: f64,
    eps: f64,
    opts: &BlindDeconvOptions,
) {
    let n = nx * ny;
    for _ in 0..opts.irls_passes {
        let blurred = conv2_reflect(img, nx, ny, h);
        let wd: Vec<f64> = blurred
            .iter()
            .zip(obs)
            .map(|(&b, &o)| 1.0 / sabs(b - o, eps))
            .collect();
        let mut wx = vec![0.0; n];
        let mut wy = vec![0.0; n];
        for y in 0..ny {
            for x in 0..nx {
                let p = y * nx + x;
                if x + 1 < nx {
                    wx[p] = 1.0 / sabs(img[p + 1] - img[p], eps);
                }
                if y + 1 < ny {
                    wy[p] = 1.0 / sabs(img[p + nx] - img[p], eps);
                }
            }
        }
        // right-hand side K^T W_d obs
        let mut wobs: Vec<f64> = obs.iter().zip(&wd).map(|(&o, &w)| o * w).collect();
        wobs = conv2_reflect_adjoint(&wobs, nx, ny, h);

        let mut r: Vec<f64> = {
            let av = normal_apply(img, nx, ny, h, lambda, &wd, &wx, &wy);
            wobs.iter().zip(&av).map(|(b, a)| b - a).collect()
        };
        let mut p = r.clone();
        let mut rs = dot(&r, &r);
        let rhs_norm = dot(&wobs, &wobs).sqrt().max(1e-300);
        for _ in 0..opts.inner_iters {
            if rs.sqrt() <= 1e-9 * rhs_norm {
                break;
            }
            let ap = normal_apply(&p, nx, ny, h, lambda, &wd, &wx, &wy);
            let pap = dot(&p, &ap);
            if pap <= 0.0 || !pap.is_finite() {
                break;
            }
            let alpha = rs / pap;
            for i in 0..n {
                img[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rs_new = dot(&r, &r);
            let beta = rs_new / rs;
            rs = rs_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        for v in img.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Rudin-Osher shock filter: sharpens blurred ramps into steps. Used to
/// build the sharp "prediction" image for the kernel step; a TV image step
/// alone never steepens an edge, which would leave the degenerate
/// delta-kernel solution as a fixed point of the alternation.
fn shock_filter(img: &[f64], nx: usize, ny: usize, iters: usize, dt: f64) -> Vec<f64> {
    let mut cur = img.to_vec();
    let mut next = vec![0.0; nx * ny];
    let at = |v: &[f64], x: isize, y: isize| -> f64 {
        v[reflect(y, ny) * nx + reflect(x, nx)]
    };
    for _ in 0..iters {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let c = at(&cur, x, y);
                let dxm = c - at(&cur, x - 1, y);
                let dxp = at(&cur, x + 1, y) - c;
                let dym = c - at(&cur, x, y - 1);
                let dyp = at(&cur, x, y + 1) - c;
                let lap = dxp - dxm + dyp - dym;
                // upwind gradient magnitude for the sign of the Laplacian
                let (gx, gy) = if lap > 0.0 {
                    (
                        dxm.max(0.0).max(-dxp.min(0.0)),
                        dym.max(0.0).max(-dyp.min(0.0)),
                    )
                } else {
                    (
                        (-dxm.min(0.0)).max(dxp.max(0.0)),
                        (-dym.min(0.0)).max(dyp.max(0.0)),
                    )
                };
                let grad = (gx * gx + gy * gy).sqrt();
                next[y as usize * nx + x as usize] = c - dt * lap.signum() * grad;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Kernel step: weighted least squares over the kernel taps. The Gram
/// matrix is built from reflect-shifted copies of the current image and the
/// solution is projected back onto the nonnegative unit-sum simplex.
fn kernel_step(
    img: &[f64],
    obs: &[f64],
    nx: usize,
    ny: usize,
    size: usize,
    eps: f64,
    prev: &Kernel,
) -> Kernel {
    let m = size * size;
    let half = (size / 2) as isize;
    let n = nx * ny;
    // weights from the current residual keep the step on the L1 data term
    let blurred = conv2_reflect(img, nx, ny, prev);
    let wd: Vec<f64> = blurred
        .iter()
        .zip(obs)
        .map(|(&b, &o)| 1.0 / sabs(b - o, eps))
        .collect();

    let mut shifted: Vec<Vec<f64>> = Vec::with_capacity(m);
    for i in 0..size {
        for j in 0..size {
            let mut s = vec![0.0; n];
            for y in 0..ny {
                let yy = reflect(y as isize + i as isize - half, ny);
                for x in 0..nx {
                    let xx = reflect(x as isize + j as isize - half, nx);
                    s[y * nx + x] = img[yy * nx + xx];
                }
            }
            shifted.push(s);
        }
    }
    let mut a = DMatrix::<f64>::zeros(m, m);
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|s| {
            (0..m)
                .map(|t| {
                    if t < s {
                        0.0
                    } else {
                        let (ss, st) = (&shifted[s], &shifted[t]);
                        (0..n).map(|q| wd[q] * ss[q] * st[q]).sum()
                    }
                })
                .collect()
        })
        .collect();
    for s in 0..m {
        for t in s..m {
            a[(s, t)] = rows[s][t];
            a[(t, s)] = rows[s][t];
        }
    }
    let mut b = DVector::<f64>::zeros(m);
    for s in 0..m {
        b[s] = (0..n).map(|q| wd[q] * shifted[s][q] * obs[q]).sum();
    }
    // The shifted copies of a blurred image are strongly correlated, so the
    // unconstrained normal equations are near-singular and their solution
    // oscillates wildly. Nonnegative least squares resolves that: the
    // active-set solve is exact on the passive taps and the unit sum comes
    // from the final normalization (a unit-gain kernel already fits the
    // data scale, so the renormalization is a small correction).
    let x = nnls(&a, &b);
    Kernel::project(size, x.as_slice()).unwrap_or_else(|_| prev.clone())
}

/// Lawson-Hanson nonnegative least squares on the normal equations
/// A x = b with A = J^T J (symmetric PSD) and b = J^T y.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let m = a.nrows();
    let mut x = DVector::<f64>::zeros(m);
    let mut passive = vec![false; m];
    let mut w = b.clone();
    let tol = 1e-12 * b.amax().max(1e-300);
    for _ in 0..3 * m {
        let mut best = (tol, None);
        for i in 0..m {
            if !passive[i] && w[i] > best.0 {
                best = (w[i], Some(i));
            }
        }
        let Some(idx) = best.1 else { break };
        passive[idx] = true;
        loop {
            let ids: Vec<usize> = (0..m).filter(|&i| passive[i]).collect();
            let k = ids.len();
            let mut ap = DMatrix::<f64>::zeros(k, k);
            let mut bp = DVector::<f64>::zeros(k);
            for (r, &i) in ids.iter().enumerate() {
                bp[r] = b[i];
                for (c, &j) in ids.iter().enumerate() {
                    ap[(r, c)] = a[(i, j)];
                }
            }
            let ridge = 1e-12 * ap.trace().max(1e-300) / k as f64;
            for d in 0..k {
                ap[(d, d)] += ridge;
            }
            let z = match ap.cholesky() {
                Some(ch) => ch.solve(&bp),
                None => break,
            };
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (r, &i) in ids.iter().enumerate() {
                    x[i] = z[r];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (r, &i) in ids.iter().enumerate() {
                if z[r] <= 0.0 && x[i] > z[r] {
                    alpha = alpha.min(x[i] / (x[i] - z[r]));
                }
            }
            if !alpha.is_finite() {
                break;
            }
            for (r, &i) in ids.iter().enumerate() {
                x[i] += alpha * (z[r] - x[i]);
                if x[i] <= 1e-15 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
        w = b - a * &x;
    }
    x
}

/// Anti-alias with a [1/4 1/2 1/4] binomial filter, then decimate at the
/// even indices. Coarse pixel p sits exactly on fine pixel 2p, which keeps
/// all pyramid levels center-aligned.
fn downsample2(img: &[f64], nx: usize, ny: usize) -> (Vec<f64>, usize, usize) {
    let k = Kernel::new(3, vec![
        0.0625, 0.125, 0.0625, 0.125, 0.25, 0.125, 0.0625, 0.125, 0.0625,
    ])
    .unwrap();
    let smooth = conv2_reflect(img, nx, ny, &k);
    let nx2 = nx.div_ceil(2);
    let ny2 = ny.div_ceil(2);
    let mut out = vec![0.0; nx2 * ny2];
    for y in 0..ny2 {
        for x in 0..nx2 {
            out[y * nx2 + x] = smooth[(2 * y) * nx + 2 * x];
        }
    }
    (out, nx2, ny2)
}

fn kernel_size_at_level(size: usize, level: usize) -> usize {
    let half = (size / 2) >> level;
    (2 * half + 1).max(3)
}

/// Double a kernel's spatial resolution: the fine tap at offset d from the
/// center samples the coarse kernel bilinearly at offset d/2, so the
/// centers stay aligned regardless of the odd sizes involved.
fn resize_kernel(h: &Kernel, new_size: usize) -> Kernel {
    if h.size == new_size {
        return h.clone();
    }
    let hc = (h.size / 2) as f64;
    let hf = (new_size / 2) as isize;
    let sample = |cy: f64, cx: f64| -> f64 {
        if cy < 0.0 || cx < 0.0 || cy > (h.size - 1) as f64 || cx > (h.size - 1) as f64 {
            return 0.0;
        }
        let y0 = cy.floor() as usize;
        let x0 = cx.floor() as usize;
        let y1 = (y0 + 1).min(h.size - 1);
        let x1 = (x0 + 1).min(h.size - 1);
        let (ty, tx) = (cy - y0 as f64, cx - x0 as f64);
        h.get(y0, x0) * (1.0 - ty) * (1.0 - tx)
            + h.get(y0, x1) * (1.0 - ty) * tx
            + h.get(y1, x0) * ty * (1.0 - tx)
            + h.get(y1, x1) * ty * tx
    };
    let mut w = Vec::with_capacity(new_size * new_size);
    for i in 0..new_size {
        for j in 0..new_size {
            let dy = (i as isize - hf) as f64 / 2.0;
            let dx = (j as isize - hf) as f64 / 2.0;
            w.push(sample(hc + dy, hc + dx));
        }
    }
    Kernel::project(new_size, &w).unwrap_or_else(|_| Kernel::delta(new_size))
}

/// Alternating blind deconvolution with an anisotropic TV prior, run
/// coarse-to-fine over `opts.scales` pyramid levels. If the finest-scale
/// objective increases across an alternation, the best-so-far image and
/// kernel are returned with `diverged` set.
pub fn blind_tv_deconvolve(
    img: &IntensityImage,
    lambda: f64,
    kernel_size: usize,
    opts: &BlindDeconvOptions,
) -> Result<BlindDeconvResult> {
    if kernel_size % 2 == 0 || kernel_size < 3 {
        return Err(ThzError::InvalidArgument(format!(
            "kernel size must be odd and >= 3, got {kernel_size}"
        )));
    }
    if !(lambda > 0.0) {
        return Err(ThzError::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if opts.scales == 0 {
        return Err(ThzError::InvalidArgument("scales must be >= 1".into()));
    }
    if img.values().iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(ThzError::InvalidArgument(
            "blind deconvolution input must be finite and nonnegative".into(),
        ));
    }

    // build the observation pyramid, index 0 = finest
    let mut pyr: Vec<(Vec<f64>, usize, usize)> = vec![(img.values().to_vec(), img.nx, img.ny)];
    for _ in 1..opts.scales {
        let (prev, pnx, pny) = pyr.last().unwrap().clone();
        if pnx < 8 || pny < 8 {
            break;
        }
        pyr.push(downsample2(&prev, pnx, pny));
    }

    let max_val = img.values().iter().cloned().fold(0.0, f64::max).max(1e-300);
    let eps = opts.epsilon_rel * max_val;

    let coarsest = pyr.len() - 1;
    let mut kernel = Kernel::delta(kernel_size_at_level(kernel_size, coarsest));
    let mut est: Vec<f64>;
    let mut diverged = false;
    let mut accepted = Vec::new();

    for level in (0..pyr.len()).rev() {
        let (obs, nx, ny) = (&pyr[level].0, pyr[level].1, pyr[level].2);
        // Only the kernel crosses levels; the estimate restarts from the
        // level's own observation, which avoids dragging interpolation
        // artifacts (displaced edges, smeared kernels) into the finer
        // levels. The resized kernel is itself interpolation-smeared, so it
        // only seeds the reweighting of an immediate re-estimate from a
        // shock-sharpened prediction of the observation.
        est = obs.clone();
        if level != coarsest {
            kernel = resize_kernel(&kernel, kernel_size_at_level(kernel_size, level));
        }
        let pred = shock_filter(&est, nx, ny, 10, 0.3);
        kernel = kernel_step(&pred, obs, nx, ny, kernel.size(), eps, &kernel);
        // the TV weight scales with the number of gradient terms per data
        // point, which is scale-invariant, so lambda carries across levels
        let finest = level == 0;
        let lambda_est = lambda * opts.lambda_boost;
        let mut best_obj = objective(&est, obs, nx, ny, &kernel, lambda_est, eps);
        let mut best = (est.clone(), kernel.clone());
        let mut prev_obj = best_obj;
        for _ in 0..opts.alternations {
            image_step(&mut est, obs, nx, ny, &kernel, lambda_est, eps, opts);
            let pred = shock_filter(&est, nx, ny, 10, 0.3);
            kernel = kernel_step(&pred, obs, nx, ny, kernel.size(), eps, &kernel);
            let obj = objective(&est, obs, nx, ny, &kernel, lambda_est, eps);
            if obj < best_obj {
                best_obj = obj;
                best = (est.clone(), kernel.clone());
                if finest {
                    accepted.push(obj);
                }
            }
            if finest && obj > prev_obj * (1.0 + 1e-12) {
                diverged = true;
                break;
            }
            prev_obj = obj;
        }
        kernel = best.1;
    }

    // non-blind finish: with the kernel frozen, redo the image at the
    // caller's lambda and with extra solver effort, since this single pass
    // determines the returned image
    est = img.values().to_vec();
    let (nx, ny) = (img.nx, img.ny);
    let final_opts = BlindDeconvOptions {
        irls_passes: 2 * opts.irls_passes,
        inner_iters: 2 * opts.inner_iters,
        ..opts.clone()
    };
    image_step(&mut est, img.values(), nx, ny, &kernel, lambda, eps, &final_opts);
    let final_obj = objective(&est, img.values(), nx, ny, &kernel, lambda, eps);

    Ok(BlindDeconvResult {
        image: IntensityImage::new(img.nx, img.ny, est),
        kernel,
        objective: final_obj,
        diverged,
        accepted_objectives: accepted,
    })
}

/// Re-normalize the kernel estimated by [`blind_tv_deconvolve`] so it can
/// drive [`lucy_richardson`] as a measured point-spread function.
pub fn extract_kernel(result: &BlindDeconvResult) -> Kernel {
    Kernel::project(result.kernel.size(), result.kernel.weights())
        .unwrap_or_else(|_| Kernel::delta(result.kernel.size()))
}
