//! Image files, resizing, dataset folders and the synthetic generator.

mod ppm;
mod resize;
mod synth;

use std::path::{Path, PathBuf};

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use resize::resize_bilinear;
pub use synth::{synth_dataset, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class folder names; the index is the label.
pub const CLASS_DIRS: [&str; 2] = ["low_risk", "high_risk"];

/// Images (`3 x S x S`, values in `[0, 1]`) with labels and where they came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub sources: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Copies of the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sources: indices.iter().map(|&i| self.sources[i].clone()).collect(),
        }
    }
}

fn is_image_file(path: &Path) -> bool {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm") => true,
        Some("png") => cfg!(feature = "png"),
        _ => false,
    }
}

/// Decodes an image file (`.ppm`, or `.png` with the `png` feature).
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm") => read_ppm(path),
        #[cfg(feature = "png")]
        Some("png") => read_png(path),
        _ => Err(Error::invalid(
            "image file",
            format!("{}: unsupported extension (expected .ppm{})", path.display(), if cfg!(feature = "png") { " or .png" } else { "" }),
        )),
    }
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px.0[ch] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Reads an image and resizes it to `size x size`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = read_image(path)?;
    resize_bilinear(&img, size, size)
}

/// Loads `root/low_risk/*` (label 0) and `root/high_risk/*` (label 1),
/// files in lexicographic order, resized to `size x size`.
pub fn load_dataset(root: &Path, size: usize) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for (label, dir) in CLASS_DIRS.iter().enumerate() {
        let class_dir = root.join(dir);
        let entries = std::fs::read_dir(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let mut files: Vec<PathBuf> = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&class_dir, e))?.path();
            if path.is_file() && is_image_file(&path) {
                files.push(path);
            }
        }
        if files.is_empty() {
            return Err(Error::invalid(
                "dataset",
                format!("class folder {} contains no image files", class_dir.display()),
            ));
        }
        files.sort();
        for f in files {
            ds.images.push(load_image(&f, size)?);
            ds.labels.push(label);
            ds.sources.push(f.display().to_string());
        }
    }
    Ok(ds)
}
