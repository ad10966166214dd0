//! Core data containers: complex sample volumes, intensity images, depth
//! maps.
//!
//! `ComplexVolume` stores samples x-fastest, then y, then z (one full xy
//! slice per z bin), matching the on-disk layout. Samples are held as f64
//! pairs in memory; the file format narrows them to f32 (see `io`).
//! Volumes are immutable after construction and safe to share across
//! worker threads.

use num_complex::Complex64;

/// Which axis-space the z dimension of a volume lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Raw beat signals u(x,y)[k] indexed by frequency sample k.
    Frequency,
    /// Deramped profiles u_hat(x,y)[z] indexed by depth bin z.
    Spatial,
}

#[derive(Debug, Clone)]
pub struct ComplexVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub domain: Domain,
    pub lateral_step_um: f32,
    samples: Vec<Complex64>,
}

impl ComplexVolume {
    pub fn new(
        nx: usize,
        ny: usize,
        nz: usize,
        domain: Domain,
        lateral_step_um: f32,
        samples: Vec<Complex64>,
    ) -> Self {
        assert_eq!(
            samples.len(),
            nx * ny * nz,
            "sample count must equal nx*ny*nz"
        );
        Self {
            nx,
            ny,
            nz,
            domain,
            lateral_step_um,
            samples,
        }
    }

    pub fn zeros(nx: usize, ny: usize, nz: usize, domain: Domain, lateral_step_um: f32) -> Self {
        Self::new(
            nx,
            ny,
            nz,
            domain,
            lateral_step_um,
            vec![Complex64::new(0.0, 0.0); nx * ny * nz],
        )
    }

    /// Flat index of (x, y, z); x fastest, z slowest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny && z < self.nz);
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> Complex64 {
        self.samples[self.index(x, y, z)]
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn n_pixels(&self) -> usize {
        self.nx * self.ny
    }

    /// Copy of the z-profile at lateral position (x, y).
    pub fn pixel_signal(&self, x: usize, y: usize) -> Vec<Complex64> {
        let stride = self.nx * self.ny;
        let base = y * self.nx + x;
        (0..self.nz).map(|z| self.samples[base + z * stride]).collect()
    }

    /// Build a volume by evaluating `f(x, y, z)` for every sample.
    pub fn from_fn<F>(
        nx: usize,
        ny: usize,
        nz: usize,
        domain: Domain,
        lateral_step_um: f32,
        mut f: F,
    ) -> Self
    where
        F: FnMut(usize, usize, usize) -> Complex64,
    {
        let mut samples = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    samples.push(f(x, y, z));
                }
            }
        }
        Self::new(nx, ny, nz, domain, lateral_step_um, samples)
    }

    /// Total energy sum of |s|^2 over all samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }
}

/// 2D real nonnegative image in linear power units (squared field
/// amplitude). x fastest.
#[derive(Debug, Clone)]
pub struct IntensityImage {
    pub nx: usize,
    pub ny: usize,
    values: Vec<f64>,
}

impl IntensityImage {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), nx * ny);
        // dB-scaled views share this type, so negatives are allowed here;
        // operations that need nonnegativity validate it themselves
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { nx, ny, values }
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self::new(nx, ny, vec![0.0; nx * ny])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.nx + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.nx + x] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn total_flux(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Per-pixel depth in um relative to a reference zero. Invalid pixels carry
/// NaN and a false validity flag, never a silent zero.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub nx: usize,
    pub ny: usize,
    values_um: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(nx: usize, ny: usize, values_um: Vec<f64>, valid: Vec<bool>) -> Self {
        assert_eq!(values_um.len(), nx * ny);
        assert_eq!(valid.len(), nx * ny);
        Self {
            nx,
            ny,
            values_um,
            valid,
        }
    }

    pub fn invalid(nx: usize, ny: usize) -> Self {
        Self::new(nx, ny, vec![f64::NAN; nx * ny], vec![false; nx * ny])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.nx + x;
        if self.valid[i] {
            Some(self.values_um[i])
        } else {
            None
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        let i = y * self.nx + x;
        self.values_um[i] = v;
        self.valid[i] = true;
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.values_um
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pixel_signal_matches_get() {
        let vol = ComplexVolume::from_fn(3, 2, 4, Domain::Frequency, 262.5, |x, y, z| {
            Complex64::new((x + 10 * y) as f64, z as f64)
        });
        let s = vol.pixel_signal(2, 1);
        for z in 0..4 {
            assert_eq!(s[z], vol.get(2, 1, z));
        }
    }

    #[test]
    fn depth_map_invalid_pixels_are_nan_sentinels() {
        let mut m = DepthMap::invalid(2, 2);
        assert!(m.get(0, 0).is_none());
        assert!(m.raw_values()[0].is_nan());
        m.set(1, 1, 42.0);
        assert_eq!(m.get(1, 1), Some(42.0));
    }

    proptest! {
        // Flat index is a bijection onto [0, nx*ny*nz).
        #[test]
        fn index_bijective(nx in 1usize..6, ny in 1usize..6, nz in 1usize..6) {
            let vol = ComplexVolume::zeros(nx, ny, nz, Domain::Frequency, 1.0);
            let mut seen = vec![false; nx * ny * nz];
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = vol.index(x, y, z);
                        prop_assert!(i < seen.len());
                        prop_assert!(!seen[i]);
                        seen[i] = true;
                    }
                }
            }
            prop_assert!(seen.iter().all(|&b| b));
        }
    }
}
