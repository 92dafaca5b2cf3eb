//! Shared domain types and validation used by every other module.
//!
//! Images are `(channels, height, width)` arrays of reals in `[0, 1]`;
//! budgets and step sizes are expressed on that scale (8/255 rather than 8).

use crate::attack::LossReport;
use crate::error::{Error, Result};
use crate::Real;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Perturbation budget used throughout the toolkit: 8/255 on the [0,1] scale.
pub const EPS_8_255: f64 = 8.0 / 255.0;
/// Default attack step size: 2/255 on the [0,1] scale.
pub const STEP_2_255: f64 = 2.0 / 255.0;
/// Label value marking pixels excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// A benign input image: `(channels, height, width)`, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<F: Real> {
    data: Array3<F>,
}

impl<F: Real> ImageTensor<F> {
    /// Validates the value range on construction.
    pub fn new(data: Array3<F>) -> Result<Self> {
        for &v in data.iter() {
            if !(v >= F::zero() && v <= F::one()) {
                return Err(Error::ValueOutOfRange(format!(
                    "image pixel {v} outside [0,1]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Skips range validation; for internal hot paths that clip beforehand.
    pub fn from_raw(data: Array3<F>) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn into_data(self) -> Array3<F> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Checks every element lies in `[0, 1]`.
    pub fn in_range(&self) -> bool {
        self.data.iter().all(|&v| v >= F::zero() && v <= F::one())
    }

    /// Converts the scalar type (used when loading f64 checkpoints into f32 runs).
    pub fn convert<G: Real>(&self) -> ImageTensor<G> {
        ImageTensor::from_raw(self.data.mapv(|v| G::cast(v.to_f64())))
    }
}

/// Per-pixel ground-truth classes: `(height, width)` indices below
/// `num_classes`, or `ignore_index` for pixels excluded everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    data: Array2<u8>,
    num_classes: usize,
    ignore_index: u8,
}

impl LabelMap {
    pub fn new(data: Array2<u8>, num_classes: usize) -> Result<Self> {
        Self::with_ignore(data, num_classes, IGNORE_INDEX)
    }

    pub fn with_ignore(data: Array2<u8>, num_classes: usize, ignore_index: u8) -> Result<Self> {
        if num_classes == 0 || num_classes > ignore_index as usize {
            return Err(Error::InvalidParams(format!(
                "num_classes {num_classes} must be in 1..={ignore_index}"
            )));
        }
        for &v in data.iter() {
            if v as usize >= num_classes && v != ignore_index {
                return Err(Error::ValueOutOfRange(format!(
                    "label {v} outside [0,{num_classes}) and not ignore ({ignore_index})"
                )));
            }
        }
        Ok(Self {
            data,
            num_classes,
            ignore_index,
        })
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Accumulated adversarial delta with its ℓ∞ budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<F: Real> {
    pub delta: Array3<F>,
    pub epsilon: f64,
}

impl<F: Real> Perturbation<F> {
    /// Zero perturbation shaped like `image`.
    pub fn zeros_like(image: &ImageTensor<F>, epsilon: f64) -> Self {
        Self {
            delta: Array3::zeros(image.data().raw_dim()),
            epsilon,
        }
    }

    /// Largest absolute entry of the delta.
    pub fn max_abs(&self) -> f64 {
        self.delta
            .iter()
            .fold(0f64, |m, &v| m.max(v.to_f64().abs()))
    }
}

/// Partition of an image into `rows × cols = n_regions` near-identical cells.
///
/// `cell_width`/`cell_height` are the nominal cell sizes from floor division;
/// pixels left over from non-divisible image dimensions join the cells of the
/// last column/row, so the cells cover the full image domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub n_regions: usize,
    pub rows: usize,
    pub cols: usize,
    pub cell_width: usize,
    pub cell_height: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl GridSpec {
    /// Absolute rectangle `(top, left, height, width)` of cell `index`
    /// (row-major), residual pixels included.
    pub fn cell_rect(&self, index: usize) -> (usize, usize, usize, usize) {
        debug_assert!(index < self.n_regions);
        let row = index / self.cols;
        let col = index % self.cols;
        let top = row * self.cell_height;
        let left = col * self.cell_width;
        let height = if row + 1 == self.rows {
            self.image_height - top
        } else {
            self.cell_height
        };
        let width = if col + 1 == self.cols {
            self.image_width - left
        } else {
            self.cell_width
        };
        (top, left, height, width)
    }
}

/// One sampled rectangle inside a grid cell.
///
/// `width`/`height` are the horizontal/vertical pixel extents, bounded by the
/// nominal cell width/height; `top`/`left` are offsets inside the cell. The
/// area ratio is kept as the exact integer pair (`area`, `cell_area`) so the
/// total-area identity over a batch holds without rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionSpec {
    pub cell_index: usize,
    pub top: usize,
    pub left: usize,
    pub width: usize,
    pub height: usize,
    pub cell_top: usize,
    pub cell_left: usize,
    pub cell_width: usize,
    pub cell_height: usize,
}

impl RegionSpec {
    /// Rectangle area in pixels (numerator of the exact area ratio).
    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    /// Nominal cell area (denominator of the exact area ratio).
    pub fn cell_area(&self) -> u64 {
        self.cell_width as u64 * self.cell_height as u64
    }

    /// Area ratio α as a float view of the exact integer ratio.
    pub fn alpha(&self) -> f64 {
        self.area() as f64 / self.cell_area() as f64
    }

    /// Absolute rectangle `(top, left, height, width)` in image coordinates.
    pub fn abs_rect(&self) -> (usize, usize, usize, usize) {
        (
            self.cell_top + self.top,
            self.cell_left + self.left,
            self.height,
            self.width,
        )
    }

    /// Whether the absolute pixel `(y, x)` lies inside the rectangle.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (top, left, h, w) = self.abs_rect();
        y >= top && y < top + h && x >= left && x < left + w
    }
}

/// The `T` binary masks (1 = retained pixel) of one attack iteration and the
/// `T × N` rectangles they were composed from.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    pub masks: Vec<Array2<u8>>,
    pub regions: Vec<Vec<RegionSpec>>,
}

/// How rectangle extents are drawn inside each cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionMode {
    /// Square of the given side, clamped to the nominal cell size when a cell
    /// is smaller than requested.
    FixedSquare { side: usize },
    /// Area ratio drawn uniformly from `[alpha_min, alpha_max]`, extents
    /// chosen uniformly over the feasible integer rectangles.
    RandomRatio { alpha_min: f64, alpha_max: f64 },
}

impl Default for RegionMode {
    fn default() -> Self {
        RegionMode::FixedSquare { side: 32 }
    }
}

/// Whether the perturbation is updated once per mask or once per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// One sign-gradient update per mask (K·T updates).
    #[default]
    Sequential,
    /// Gradients of the T masked samples summed, one update per iteration.
    Aggregated,
}

/// Which pixels enter the cross-entropy loss on a masked sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Loss over every non-ignored pixel, zeroed regions included.
    #[default]
    AllPixels,
    /// Loss restricted to pixels the mask retains.
    RetainedPixels,
}

/// All attack-loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// ℓ∞ budget ε on the [0,1] scale.
    pub epsilon: f64,
    /// Attack iterations K.
    pub iterations: usize,
    /// Semantic-remapping count T: masks drawn per iteration.
    pub remap_count: usize,
    /// Grid count N: cells the image is partitioned into.
    pub grid_count: usize,
    pub region_mode: RegionMode,
    /// Sign-gradient step size.
    pub step_size: f64,
    pub update_mode: UpdateMode,
    pub loss_scope: LossScope,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: EPS_8_255,
            iterations: 10,
            remap_count: 5,
            grid_count: 16,
            region_mode: RegionMode::default(),
            step_size: STEP_2_255,
            update_mode: UpdateMode::default(),
            loss_scope: LossScope::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Checks budget, step and counts. `iterations = 0` is allowed and yields
    /// the zero perturbation.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "epsilon {} outside (0,1]",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "step_size {} outside (0,1]",
                self.step_size
            )));
        }
        if self.remap_count == 0 {
            return Err(Error::InvalidCount("remap_count must be >= 1".into()));
        }
        if self.grid_count == 0 {
            return Err(Error::InvalidCount("grid_count must be >= 1".into()));
        }
        match self.region_mode {
            RegionMode::FixedSquare { side } if side == 0 => {
                Err(Error::InvalidParams("square side must be >= 1".into()))
            }
            RegionMode::RandomRatio {
                alpha_min,
                alpha_max,
            } if !(alpha_min > 0.0 && alpha_min <= alpha_max && alpha_max <= 1.0) => Err(
                Error::InvalidParams(format!("alpha range ({alpha_min},{alpha_max}) invalid")),
            ),
            _ => Ok(()),
        }
    }
}

/// Output of one attack invocation.
#[derive(Debug, Clone)]
pub struct AttackResult<F: Real> {
    pub delta: Perturbation<F>,
    /// `clip(x + delta, 0, 1)`, elementwise.
    pub adversarial_image: ImageTensor<F>,
    pub loss_trace: LossReport,
    pub wall_time_seconds: f64,
}

/// Returns normally iff the pair is mutually consistent: spatial shapes
/// match, pixels lie in `[0,1]`, labels lie in the valid set.
pub fn validate_pair<F: Real>(x: &ImageTensor<F>, y: &LabelMap) -> Result<()> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs labels {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    if !x.in_range() {
        return Err(Error::ValueOutOfRange("image pixel outside [0,1]".into()));
    }
    for &v in y.data().iter() {
        if v as usize >= y.num_classes() && v != y.ignore_index() {
            return Err(Error::ValueOutOfRange(format!(
                "label {v} outside [0,{}) and not ignore",
                y.num_classes()
            )));
        }
    }
    Ok(())
}
