use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block sampler settings. Scales are fractions of the grid area; aspect is
/// block height over width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub num_targets: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Resampling budget when the targets swallow the whole grid.
    pub max_attempts: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            num_targets: 4,
            scale_min: 0.15,
            scale_max: 0.2,
            aspect_min: 0.75,
            aspect_max: 1.5,
            max_attempts: 16,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("masking: {m}")));
        if self.num_targets == 0 {
            return bad("num_targets must be >= 1");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return bad("scale range must satisfy 0 < min <= max <= 1");
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max && self.aspect_max.is_finite()) {
            return bad("aspect range must satisfy 0 < min <= max");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be >= 1");
        }
        Ok(())
    }
}

/// Context patches plus `M` rectangular target blocks over a `grid_h × grid_w`
/// patch grid. Indices are row-major (`row · grid_w + col`); every index list
/// is sorted. Targets may overlap each other but never the context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMaskSet")]
pub struct BlockMaskSet {
    pub grid_h: usize,
    pub grid_w: usize,
    pub context_indices: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMaskSet {
    grid_h: usize,
    grid_w: usize,
    context_indices: Vec<usize>,
    targets: Vec<Vec<usize>>,
}

impl TryFrom<RawMaskSet> for BlockMaskSet {
    type Error = Error;
    fn try_from(r: RawMaskSet) -> Result<Self> {
        let m = BlockMaskSet {
            grid_h: r.grid_h,
            grid_w: r.grid_w,
            context_indices: r.context_indices,
            targets: r.targets,
        };
        m.validate()?;
        Ok(m)
    }
}

impl BlockMaskSet {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    /// Sorted union of all target indices.
    pub fn target_union(&self) -> Vec<usize> {
        self.targets.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Builds a mask set from explicit rectangles `(top, left, height, width)`;
    /// the context is the complement of their union.
    pub fn from_rects(grid_h: usize, grid_w: usize, rects: &[(usize, usize, usize, usize)]) -> Result<Self> {
        let targets: Vec<Vec<usize>> = rects
            .iter()
            .map(|&(top, left, h, w)| rect_indices(grid_w, top, left, h, w))
            .collect();
        let covered: BTreeSet<usize> = targets.iter().flatten().copied().collect();
        let context_indices = (0..grid_h * grid_w).filter(|i| !covered.contains(i)).collect();
        let m = Self { grid_h, grid_w, context_indices, targets };
        m.validate()?;
        Ok(m)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_patches();
        let bad = |m: String| Err(Error::InvalidConfig(format!("mask set: {m}")));
        if self.targets.is_empty() {
            return bad("no target blocks".into());
        }
        if self.context_indices.is_empty() {
            return Err(Error::EmptyContext { attempts: 0 });
        }
        if !is_strictly_sorted(&self.context_indices) || self.context_indices.iter().any(|&i| i >= n) {
            return bad("context indices must be sorted, unique and < grid size".into());
        }
        for (k, t) in self.targets.iter().enumerate() {
            if t.is_empty() || !is_strictly_sorted(t) || t.iter().any(|&i| i >= n) {
                return bad(format!("target {k} must be a nonempty sorted index list within the grid"));
            }
            let rows: Vec<usize> = t.iter().map(|i| i / self.grid_w).collect();
            let cols: Vec<usize> = t.iter().map(|i| i % self.grid_w).collect();
            let (top, bottom) = (rows[0], *rows.last().unwrap());
            let left = *cols.iter().min().unwrap();
            let right = *cols.iter().max().unwrap();
            let expect = rect_indices(self.grid_w, top, left, bottom - top + 1, right - left + 1);
            if &expect != t {
                return bad(format!("target {k} is not a contiguous rectangle"));
            }
            if t.iter().any(|i| self.context_indices.binary_search(i).is_ok()) {
                return bad(format!("target {k} overlaps the context"));
            }
        }
        Ok(())
    }
}

fn is_strictly_sorted(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn rect_indices(grid_w: usize, top: usize, left: usize, h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w);
    for r in top..top + h {
        for c in left..left + w {
            out.push(r * grid_w + c);
        }
    }
    out
}

/// Draws `cfg.num_targets` rectangles and takes the complement of their union
/// as context. Each block covers `scale · H · W` patches (rounded) with
/// height/width ratio drawn from the aspect range, clamped to the grid.
/// If the union covers the grid the whole draw is repeated, up to
/// `cfg.max_attempts` times.
pub fn sample_masks<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<BlockMaskSet> {
    if grid_h < 4 || grid_w < 4 {
        return Err(Error::GridTooSmall { h: grid_h, w: grid_w });
    }
    cfg.validate()?;
    for _ in 0..cfg.max_attempts {
        let rects: Vec<_> = (0..cfg.num_targets).map(|_| sample_rect(grid_h, grid_w, cfg, rng)).collect();
        let covered: BTreeSet<usize> = rects
            .iter()
            .flat_map(|&(t, l, h, w)| rect_indices(grid_w, t, l, h, w))
            .collect();
        if covered.len() < grid_h * grid_w {
            return BlockMaskSet::from_rects(grid_h, grid_w, &rects);
        }
    }
    Err(Error::EmptyContext { attempts: cfg.max_attempts })
}

fn sample_rect<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let u: f64 = rng.random();
    let scale = cfg.scale_min + u * (cfg.scale_max - cfg.scale_min);
    let u: f64 = rng.random();
    let aspect = cfg.aspect_min + u * (cfg.aspect_max - cfg.aspect_min);
    let area = scale * (grid_h * grid_w) as f64;
    let h = ((area * aspect).sqrt().round() as usize).clamp(1, grid_h);
    let w = ((area / aspect).sqrt().round() as usize).clamp(1, grid_w);
    let top = rng.random_range(0..=grid_h - h);
    let left = rng.random_range(0..=grid_w - w);
    (top, left, h, w)
}
