//! Class-color palette and prediction overlays.

use crate::core::{ImageTensor, LabelMap};
use crate::error::{Error, Result};
use crate::Real;
use std::path::Path;

/// Fixed RGB for class `c`: the classic bit-interleave segmentation
/// colormap (class 0 black, 1 maroon, 2 green, 3 olive, ...), deterministic
/// for any index. The first entries are tabulated in the README.
pub fn class_color(class: u8) -> [u8; 3] {
    let mut c = class as u32;
    let mut rgb = [0u32; 3];
    for shift in (0..8).rev() {
        rgb[0] |= (c & 1) << shift;
        rgb[1] |= ((c >> 1) & 1) << shift;
        rgb[2] |= ((c >> 2) & 1) << shift;
        c >>= 3;
    }
    [rgb[0] as u8, rgb[1] as u8, rgb[2] as u8]
}

/// Blends the image with the per-class colors of a prediction; equal weight,
/// computed in 8-bit space so the written PNG decodes to the exact array.
pub fn compose_overlay<F: Real>(x: &ImageTensor<F>, pred: &LabelMap) -> Result<image::RgbImage> {
    if x.height() != pred.height() || x.width() != pred.width() {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs prediction {}x{}",
            x.height(),
            x.width(),
            pred.height(),
            pred.width()
        )));
    }
    let (h, w) = (x.height(), x.width());
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for xx in 0..w {
            let color = class_color(pred.data()[[y, xx]]);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let img = (x.data()[[c, y, xx]].to_f64() * 255.0).round() as u16;
                px[c] = ((img + color[c] as u16 + 1) / 2) as u8;
            }
            out.put_pixel(xx as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(out)
}

/// Writes the overlay PNG for one (image, prediction) pair.
pub fn render_overlay<F: Real>(x: &ImageTensor<F>, pred: &LabelMap, path: &Path) -> Result<()> {
    let overlay = compose_overlay(x, pred)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    overlay
        .save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}
