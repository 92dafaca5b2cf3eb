//! Synthetic shapes dataset for desk-scale experiments, plus folder-layout
//! loaders and export for external VOC-style/Cityscapes-style data.
//!
//! Folder contract: `root/images/<stem>.png` (8-bit RGB) paired with
//! `root/labels/<stem>.png` (8-bit single-channel class indices, 255 =
//! ignore), matched by filename stem in lexicographic order.

use crate::core::{validate_pair, ImageTensor, LabelMap};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::Real;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use std::path::{Path, PathBuf};

/// In-memory ordered list of validated (image, labels) pairs.
#[derive(Debug, Clone)]
pub struct DatasetHandle<F: Real> {
    items: Vec<(ImageTensor<F>, LabelMap)>,
    num_classes: usize,
    split: String,
}

impl<F: Real> DatasetHandle<F> {
    pub fn new(
        items: Vec<(ImageTensor<F>, LabelMap)>,
        num_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        for (x, y) in &items {
            validate_pair(x, y)?;
            if y.num_classes() != num_classes {
                return Err(Error::InvalidParams(format!(
                    "item labeled with {} classes in a {num_classes}-class dataset",
                    y.num_classes()
                )));
            }
        }
        Ok(Self {
            items,
            num_classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, index: usize) -> (&ImageTensor<F>, &LabelMap) {
        let (x, y) = &self.items[index];
        (x, y)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ImageTensor<F>, LabelMap)> {
        self.items.iter()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split_tag(&self) -> &str {
        &self.split
    }
}

/// Non-background shape classes of the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    /// Class index rendered into the label map.
    pub fn class(&self) -> u8 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

/// One placed shape; `size` is the radius/half-extent in pixels.
#[derive(Debug, Clone, Copy)]
pub struct ShapeInst {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub color: [f64; 3],
}

impl ShapeInst {
    /// Membership test at the center of pixel `(y, x)`.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        match self.kind {
            ShapeKind::Circle => {
                let dx = px - self.cx;
                let dy = py - self.cy;
                dx * dx + dy * dy <= self.size * self.size
            }
            ShapeKind::Square => {
                (px - self.cx).abs() <= self.size && (py - self.cy).abs() <= self.size
            }
            ShapeKind::Triangle => {
                // Upright isoceles triangle with apex at cy - size.
                let t = py - (self.cy - self.size);
                t >= 0.0 && t <= 2.0 * self.size && (px - self.cx).abs() <= t / 2.0
            }
        }
    }
}

/// Full description of one generated sample; later shapes overdraw earlier.
#[derive(Debug, Clone)]
pub struct Scene {
    pub background: [f64; 3],
    pub shapes: Vec<ShapeInst>,
}

/// Class-tinted random color: one dominant channel per class so shape
/// identity is learnable but color alone never saturates it.
fn shape_color(kind: ShapeKind, rng: &mut Rng) -> [f64; 3] {
    let mut color = [
        rng.gen_range(0.05..0.45),
        rng.gen_range(0.05..0.45),
        rng.gen_range(0.05..0.45),
    ];
    let dominant = rng.gen_range(0.55..0.95);
    match kind {
        ShapeKind::Circle => color[0] = dominant,
        ShapeKind::Square => color[1] = dominant,
        ShapeKind::Triangle => color[2] = dominant,
    }
    color
}

/// Draws a scene for a `size × size` image: textured background plus 1–3
/// shapes. Triangles co-occur with squares: when a square is already placed,
/// a new triangle is put adjacent to it with probability 0.7, coupling the
/// two classes contextually.
pub fn sample_scene(size: usize, rng: &mut Rng) -> Scene {
    let s = size as f64;
    let background = [
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
    ];
    let n_shapes = rng.gen_range(1..=3usize);
    let mut shapes: Vec<ShapeInst> = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let kind = match rng.gen_range(0..3u8) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let half = rng.gen_range(s / 10.0..s / 5.0);
        let anchor_square = shapes
            .iter()
            .rev()
            .find(|sh| sh.kind == ShapeKind::Square)
            .copied();
        let (cx, cy) = match (kind, anchor_square) {
            (ShapeKind::Triangle, Some(sq)) if rng.gen_range(0.0..1.0) < 0.7 => {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let dist = (sq.size + half) * rng.gen_range(1.0..1.3);
                let cx = (sq.cx + dist * angle.cos()).clamp(half, s - half);
                let cy = (sq.cy + dist * angle.sin()).clamp(half, s - half);
                (cx, cy)
            }
            _ => (
                rng.gen_range(half..s - half),
                rng.gen_range(half..s - half),
            ),
        };
        shapes.push(ShapeInst {
            kind,
            cx,
            cy,
            size: half,
            color: shape_color(kind, rng),
        });
    }
    Scene { background, shapes }
}

/// Rasterizes a scene to a pixel-exact (image, labels) pair: the label at a
/// pixel is the class of the topmost shape containing it, else background.
pub fn render_scene<F: Real>(
    scene: &Scene,
    size: usize,
    rng: &mut Rng,
) -> (ImageTensor<F>, LabelMap) {
    let mut image = Array3::<F>::zeros((3, size, size));
    let mut labels = Array2::<u8>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let jitter = rng.gen_range(-0.08..0.08);
            let top = scene.shapes.iter().rev().find(|sh| sh.contains(y, x));
            let (base, class) = match top {
                Some(sh) => (sh.color, sh.kind.class()),
                None => (scene.background, 0),
            };
            for c in 0..3 {
                image[[c, y, x]] = F::cast((base[c] + jitter).clamp(0.0, 1.0));
            }
            labels[[y, x]] = class;
        }
    }
    (
        ImageTensor::from_raw(image),
        LabelMap::new(labels, 4).expect("generator labels are in range"),
    )
}

/// Generates `count` synthetic samples of `size × size` pixels.
///
/// Sample `i` is drawn from substream `(seed, i)`, so the dataset is
/// byte-identical per seed and a prefix of a longer run.
pub fn gen_shapes_dataset<F: Real>(
    count: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<DatasetHandle<F>> {
    if count < 1 {
        return Err(Error::InvalidParams("count must be >= 1".into()));
    }
    if size < 32 {
        return Err(Error::InvalidParams(format!(
            "image size {size} must be >= 32"
        )));
    }
    if num_classes != 4 {
        return Err(Error::InvalidParams(format!(
            "shapes generator produces 4 classes, got num_classes={num_classes}"
        )));
    }
    let items = (0..count)
        .map(|i| {
            let mut rng = rng::substream(seed, i as u64);
            let scene = sample_scene(size, &mut rng);
            render_scene::<F>(&scene, size, &mut rng)
        })
        .collect();
    DatasetHandle::new(items, num_classes, format!("shapes-{count}x{size}-s{seed}"))
}

/// Deterministic shuffled split into disjoint, exhaustive (train, val) parts.
pub fn split<F: Real>(
    handle: &DatasetHandle<F>,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetHandle<F>, DatasetHandle<F>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidFraction(format!(
            "train_fraction {train_fraction} outside (0,1)"
        )));
    }
    let n = handle.len();
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng::master(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let take = |idx: &[usize], tag: &str| -> Result<DatasetHandle<F>> {
        let items = idx
            .iter()
            .map(|&i| handle.items[i].clone())
            .collect::<Vec<_>>();
        DatasetHandle::new(items, handle.num_classes, format!("{}-{tag}", handle.split))
    };
    Ok((
        take(&indices[..n_train], "train")?,
        take(&indices[n_train..], "val")?,
    ))
}

/// Folder layout conventions the loader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FolderLayout {
    /// Flat `images/` and `labels/` directories, stems match exactly.
    VocStyle,
    /// Nested subdirectories (one per city/scene); stems are the relative
    /// paths below `images/`/`labels/` without extension.
    CityscapesStyle,
}

fn png_stems(dir: &Path, recursive: bool) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let abs = dir.join(&rel);
        let entries = std::fs::read_dir(&abs)
            .map_err(|e| Error::UnreadableFile(format!("{}: {e}", abs.display())))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::UnreadableFile(e.to_string()))?;
            let path = entry.path();
            if path.is_dir() {
                if recursive {
                    stack.push(rel.join(entry.file_name()));
                }
            } else if path.extension().is_some_and(|e| e == "png") {
                let stem = rel
                    .join(path.file_stem().unwrap_or_default())
                    .to_string_lossy()
                    .replace('\\', "/");
                out.push((stem, path));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn read_rgb<F: Real>(path: &Path) -> Result<ImageTensor<F>> {
    let img = image::open(path)
        .map_err(|e| Error::UnreadableFile(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<F>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = F::cast(pixel.0[c] as f64 / 255.0);
        }
    }
    Ok(ImageTensor::from_raw(data))
}

fn read_labels(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|e| Error::UnreadableFile(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut data = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        data[[y as usize, x as usize]] = pixel.0[0];
    }
    LabelMap::new(data, num_classes).map_err(|_| {
        Error::LabelValueOutOfRange(format!(
            "{}: label outside [0,{num_classes}) and not 255",
            path.display()
        ))
    })
}

/// Loads a folder dataset; pairs are matched by stem and ordered
/// lexicographically, so the ordering is stable across platforms.
pub fn load_folder_dataset<F: Real>(
    root: &Path,
    layout: FolderLayout,
    num_classes: usize,
) -> Result<DatasetHandle<F>> {
    let recursive = layout == FolderLayout::CityscapesStyle;
    let images = png_stems(&root.join("images"), recursive)?;
    let labels = png_stems(&root.join("labels"), recursive)?;
    let label_map: std::collections::BTreeMap<String, PathBuf> = labels.into_iter().collect();
    let mut items = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let label_path = label_map
            .get(stem)
            .ok_or_else(|| Error::MissingPair(format!("no label for image stem '{stem}'")))?;
        let x = read_rgb::<F>(img_path)?;
        let y = read_labels(label_path, num_classes)?;
        items.push((x, y));
    }
    DatasetHandle::new(items, num_classes, format!("folder:{}", root.display()))
}

/// Exports a dataset to the folder layout (stems `00000`, `00001`, ...).
/// Images are quantized to 8-bit; labels are written exactly.
pub fn export_folder<F: Real>(handle: &DatasetHandle<F>, root: &Path) -> Result<()> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&labels_dir)?;
    for (i, (x, y)) in handle.iter().enumerate() {
        let stem = format!("{i:05}");
        let (h, w) = (x.height(), x.width());
        let img = image::RgbImage::from_fn(w as u32, h as u32, |px, py| {
            let at = |c: usize| {
                (x.data()[[c, py as usize, px as usize]].to_f64() * 255.0).round() as u8
            };
            image::Rgb([at(0), at(1), at(2)])
        });
        img.save(images_dir.join(format!("{stem}.png")))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let lab = image::GrayImage::from_fn(w as u32, h as u32, |px, py| {
            image::Luma([y.data()[[py as usize, px as usize]]])
        });
        lab.save(labels_dir.join(format!("{stem}.png")))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}
