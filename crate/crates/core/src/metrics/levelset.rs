use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autodiff::Tensor;
use crate::conditioners::{Context, ContextBatch};
use crate::density::ConditionalDensity;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Probability mass inside the 1, 2 and 3 sigma regions of a Gaussian.
pub const SIGMA_COVERAGE: [f64; 3] = [0.6827, 0.9545, 0.9973];

/// Number of model samples used to place the thresholds.
pub const THRESHOLD_SAMPLES: usize = 20_000;

pub const MIN_RESOLUTION: usize = 16;

/// Rectangle `[x_min, x_max] x [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extents {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Extents {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let e = Extents {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        let ok = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) && x_max > x_min && y_max > y_min;
        if !ok {
            return Err(Error::invalid("level_set_grid", format!("degenerate extents {e:?}")));
        }
        Ok(e)
    }

    /// Bounding box of `points` grown by `margin` times its width on each side.
    pub fn around(points: &Tensor, margin: f64) -> Result<Self> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for r in points.rows() {
            for k in 0..2 {
                lo[k] = lo[k].min(r[k]);
                hi[k] = hi[k].max(r[k]);
            }
        }
        let pad = |k: usize| (hi[k] - lo[k]).max(1e-6) * margin;
        Extents::new(lo[0] - pad(0), hi[0] + pad(0), lo[1] - pad(1), hi[1] + pad(1))
    }
}

/// Density on a regular grid of cell centres plus HDR thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetGrid {
    pub extents: Extents,
    pub resolution: usize,
    /// `density[i * resolution + j]` at `(xs[i], ys[j])`.
    pub density: Vec<f64>,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Density levels whose super-level sets hold [`SIGMA_COVERAGE`] of the mass.
    pub thresholds: [f64; 3],
}

impl LevelSetGrid {
    pub fn cell_area(&self) -> f64 {
        (self.xs[1] - self.xs[0]) * (self.ys[1] - self.ys[0])
    }

    /// Midpoint-rule integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_area()
    }

    /// Area of the cells whose density is at least `level`.
    pub fn area_above(&self, level: f64) -> f64 {
        self.density.iter().filter(|&&p| p >= level).count() as f64 * self.cell_area()
    }

    /// CSV `x,y,density`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,density\n");
        for (i, x) in self.xs.iter().enumerate() {
            for (j, y) in self.ys.iter().enumerate() {
                let _ = writeln!(s, "{x},{y},{}", self.density[i * self.resolution + j]);
            }
        }
        s
    }

    /// Sidecar `key=value` metadata.
    pub fn metadata(&self) -> String {
        let e = &self.extents;
        let mut s = String::new();
        let _ = writeln!(s, "x_min={}\nx_max={}\ny_min={}\ny_max={}", e.x_min, e.x_max, e.y_min, e.y_max);
        let _ = writeln!(s, "resolution={}", self.resolution);
        for (i, (c, t)) in SIGMA_COVERAGE.iter().zip(&self.thresholds).enumerate() {
            let _ = writeln!(s, "coverage_{}sigma={c}\nthreshold_{}sigma={t}", i + 1, i + 1);
        }
        s
    }

    /// Writes the grid to `path` and the metadata next to it with a `.meta` suffix.
    pub fn write(&self, path: &Path) -> Result<std::path::PathBuf> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let mut meta = path.as_os_str().to_owned();
        meta.push(".meta");
        let meta = std::path::PathBuf::from(meta);
        std::fs::write(&meta, self.metadata()).map_err(|e| Error::io(&meta, e))?;
        Ok(meta)
    }
}

/// Densities `p(x | context)` for the rows of `points`, evaluated in chunks.
pub fn densities<M: ConditionalDensity>(model: &M, points: &Tensor, ctx: &Context, exec: Execution) -> Result<Vec<f64>> {
    let n = points.shape()[0];
    let chunk = 2048;
    let parts = par::map_chunks(n, chunk, exec, |r| -> Result<Vec<f64>> {
        let x = crate::density::slice_rows(points, r.clone());
        let c = ContextBatch::from_contexts(&vec![ctx.clone(); r.len()])?;
        Ok(model.log_prob_batch(&x, &c)?.into_iter().map(f64::exp).collect())
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Density level `l` such that a fraction `coverage` of `sample_density` is `>= l`.
pub fn hdr_threshold(sample_density: &[f64], coverage: f64) -> f64 {
    let mut s = sample_density.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let idx = ((coverage * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
    s[idx]
}

/// Evaluates a 2-D model on a `resolution x resolution` grid and places the
/// 1/2/3-sigma thresholds from [`THRESHOLD_SAMPLES`] model samples.
pub fn level_set_grid<M: ConditionalDensity, R: Rng + ?Sized>(
    model: &M,
    ctx: &Context,
    extents: Extents,
    resolution: usize,
    rng: &mut R,
    exec: Execution,
) -> Result<LevelSetGrid> {
    if model.dim() != 2 {
        return Err(Error::invalid("level_set_grid", format!("model dimension {} is not 2", model.dim())));
    }
    if resolution < MIN_RESOLUTION {
        return Err(Error::invalid(
            "level_set_grid",
            format!("resolution {resolution} below {MIN_RESOLUTION}"),
        ));
    }
    let extents = Extents::new(extents.x_min, extents.x_max, extents.y_min, extents.y_max)?;
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        let h = (hi - lo) / resolution as f64;
        (0..resolution).map(|i| lo + (i as f64 + 0.5) * h).collect()
    };
    let xs = axis(extents.x_min, extents.x_max);
    let ys = axis(extents.y_min, extents.y_max);
    let mut pts = Vec::with_capacity(resolution * resolution * 2);
    for x in &xs {
        for y in &ys {
            pts.push(*x);
            pts.push(*y);
        }
    }
    let grid = Tensor::new(vec![resolution * resolution, 2], pts)?;
    let density = densities(model, &grid, ctx, exec)?;

    let samples = model.sample(THRESHOLD_SAMPLES, ctx, rng)?;
    let sample_density = densities(model, &samples, ctx, exec)?;
    let thresholds = SIGMA_COVERAGE.map(|c| hdr_threshold(&sample_density, c));
    Ok(LevelSetGrid {
        extents,
        resolution,
        density,
        xs,
        ys,
        thresholds,
    })
}
