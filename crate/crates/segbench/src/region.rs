//! Multi-region perturbation activation: grid partitioning, per-cell
//! rectangle sampling, and mask-batch composition.
//!
//! Everything here is integer geometry driven by an explicit RNG, so masks
//! are bit-reproducible per seed and independent of the scalar type used by
//! the attack math.

use crate::core::{AttackConfig, GridSpec, MaskBatch, RegionMode, RegionSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use ndarray::{s, Array2};
use rand::Rng as _;

/// Splits a `width × height` image into `n_regions` cells.
///
/// Picks the factor pair `(rows, cols)` of `n_regions` whose `cols/rows`
/// ratio is closest to the image aspect ratio (ties toward more columns).
/// Cell sizes come from floor division; leftover pixels join the last
/// column/row so the cells cover the full image.
pub fn partition_grid(width: usize, height: usize, n_regions: usize) -> Result<GridSpec> {
    if n_regions < 1 {
        return Err(Error::InvalidCount(format!(
            "n_regions {n_regions} must be >= 1"
        )));
    }
    if width < 1 || height < 1 {
        return Err(Error::InvalidParams(format!(
            "image {width}x{height} must be at least 1x1"
        )));
    }
    let target = width as f64 / height as f64;
    let mut best: Option<(usize, usize, f64)> = None;
    for rows in 1..=n_regions {
        if n_regions % rows != 0 {
            continue;
        }
        let cols = n_regions / rows;
        let diff = (cols as f64 / rows as f64 - target).abs();
        // Ascending rows means descending cols, so on a tie the earlier
        // (more-columns) pair is kept.
        match best {
            Some((_, _, d)) if diff >= d => {}
            _ => best = Some((rows, cols, diff)),
        }
    }
    let (rows, cols, _) = best.unwrap();
    Ok(GridSpec {
        n_regions,
        rows,
        cols,
        cell_width: width / cols,
        cell_height: height / rows,
        image_width: width,
        image_height: height,
    })
}

/// Draws one rectangle inside cell `cell_index` of `grid`.
///
/// Extents are bounded by the nominal cell size; placement is uniform over
/// the valid offsets of the actual cell (which may be larger along the last
/// row/column). The recorded area ratio is recomputed from the integer
/// extents, never from the sampled target ratio.
pub fn sample_rectangle(
    grid: &GridSpec,
    cell_index: usize,
    mode: RegionMode,
    rng: &mut Rng,
) -> Result<RegionSpec> {
    if cell_index >= grid.n_regions {
        return Err(Error::InvalidParams(format!(
            "cell_index {cell_index} outside [0,{})",
            grid.n_regions
        )));
    }
    let (cell_top, cell_left, cell_h, cell_w) = grid.cell_rect(cell_index);
    let (nom_w, nom_h) = (grid.cell_width, grid.cell_height);
    if cell_h == 0 || cell_w == 0 || nom_w == 0 || nom_h == 0 {
        return Err(Error::EmptyCell(format!(
            "cell {cell_index} has zero area ({cell_w}x{cell_h}, nominal {nom_w}x{nom_h})"
        )));
    }

    let (width, height) = match mode {
        RegionMode::FixedSquare { side } => {
            let s = side.min(nom_w).min(nom_h).max(1);
            (s, s)
        }
        RegionMode::RandomRatio {
            alpha_min,
            alpha_max,
        } => {
            let alpha = if alpha_min == alpha_max {
                alpha_min
            } else {
                rng.gen_range(alpha_min..alpha_max)
            };
            let target_area = alpha * (nom_w * nom_h) as f64;
            let feasible: Vec<usize> = (1..=nom_w)
                .filter(|&l| {
                    let w = (target_area / l as f64).round();
                    w >= 1.0 && w <= nom_h as f64
                })
                .collect();
            match feasible.as_slice() {
                [] => (1, 1),
                choices => {
                    let l = choices[rng.gen_range(0..choices.len())];
                    let w = (target_area / l as f64).round() as usize;
                    (l, w)
                }
            }
        }
    };

    let top = rng.gen_range(0..=cell_h - height);
    let left = rng.gen_range(0..=cell_w - width);
    Ok(RegionSpec {
        cell_index,
        top,
        left,
        width,
        height,
        cell_top,
        cell_left,
        cell_width: nom_w,
        cell_height: nom_h,
    })
}

/// Union of rectangle indicators as a binary mask: 1 = retained, 0 = zeroed.
pub fn compose_mask(regions: &[RegionSpec], width: usize, height: usize) -> Result<Array2<u8>> {
    let mut mask = Array2::<u8>::zeros((height, width));
    for r in regions {
        let (top, left, h, w) = r.abs_rect();
        if top + h > height || left + w > width {
            return Err(Error::RegionOutOfBounds(format!(
                "rectangle at ({top},{left}) size {h}x{w} exceeds image {height}x{width}"
            )));
        }
        mask.slice_mut(s![top..top + h, left..left + w]).fill(1);
    }
    Ok(mask)
}

/// Draws the `T` masks of one attack iteration, each composed from `N`
/// fresh rectangles (one per grid cell). Rectangles of different masks may
/// overlap; no cross-mask constraint is applied.
pub fn sample_mask_batch(
    width: usize,
    height: usize,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<MaskBatch> {
    let grid = partition_grid(width, height, cfg.grid_count)?;
    let mut masks = Vec::with_capacity(cfg.remap_count);
    let mut regions = Vec::with_capacity(cfg.remap_count);
    for _ in 0..cfg.remap_count {
        let batch: Vec<RegionSpec> = (0..grid.n_regions)
            .map(|i| sample_rectangle(&grid, i, cfg.region_mode, rng))
            .collect::<Result<_>>()?;
        masks.push(compose_mask(&batch, width, height)?);
        regions.push(batch);
    }
    Ok(MaskBatch { masks, regions })
}
