use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub num_images: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_dim: usize,
    pub num_latent_factors: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self { num_images: 2048, grid_h: 8, grid_w: 8, patch_dim: 12, num_latent_factors: 16, noise_std: 0.05, seed: 7 }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("data: {m}")));
        if self.num_images == 0 || self.patch_dim == 0 {
            return bad("num_images and patch_dim must be >= 1");
        }
        if self.grid_h < 4 || self.grid_w < 4 {
            return Err(Error::GridTooSmall { h: self.grid_h, w: self.grid_w });
        }
        if self.num_latent_factors == 0 {
            return bad("num_latent_factors must be >= 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Images stored as `(grid_h · grid_w) × patch_dim` patch matrices, row-major
/// over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub images: Vec<Matrix>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// One row per image with every patch value concatenated.
    pub fn flattened(&self) -> Matrix {
        let width = self.spec.num_patches() * self.spec.patch_dim;
        let mut m = Matrix::zeros(self.len(), width);
        for (r, img) in self.images.iter().enumerate() {
            m.row_mut(r).copy_from_slice(img.as_slice());
        }
        m
    }
}

/// A low-frequency plane wave over the grid with a random phase and
/// amplitude per patch channel, scaled to unit RMS.
fn smooth_pattern(rng: &mut ChaCha8Rng, spec: &SyntheticDatasetSpec) -> Matrix {
    let ky = rng.random_range(0..=2) as f64;
    let kx = rng.random_range(0..=2) as f64;
    let tau = std::f64::consts::TAU;
    let phase: Vec<f64> = (0..spec.patch_dim).map(|_| rng.random_range(0.0..tau)).collect();
    let amp: Vec<f64> = (0..spec.patch_dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let mut m = Matrix::from_fn(spec.num_patches(), spec.patch_dim, |p, c| {
        let (y, x) = ((p / spec.grid_w) as f64, (p % spec.grid_w) as f64);
        amp[c] * (tau * (ky * y / spec.grid_h as f64 + kx * x / spec.grid_w as f64) + phase[c]).cos()
    });
    let rms = (m.as_slice().iter().map(|v| v * v).sum::<f64>() / m.as_slice().len() as f64).sqrt();
    if rms > 0.0 {
        m = m.scale(1.0 / rms);
    }
    m
}

/// Each image is `Σ_f c_f · pattern_f + noise` with `c_f ~ N(0, 1)`.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns: Vec<Matrix> = (0..spec.num_latent_factors).map(|_| smooth_pattern(&mut rng, spec)).collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut images = Vec::with_capacity(spec.num_images);
    for _ in 0..spec.num_images {
        let mut img = Matrix::zeros(spec.num_patches(), spec.patch_dim);
        for p in &patterns {
            let c: f64 = StandardNormal.sample(&mut rng);
            img.add_scaled(p, c)?;
        }
        if spec.noise_std > 0.0 {
            img.as_mut_slice().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        images.push(img);
    }
    Ok(Dataset { spec: *spec, images })
}
