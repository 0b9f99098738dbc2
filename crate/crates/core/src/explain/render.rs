use std::path::Path;

use crate::dataio::{resize_bilinear, write_ppm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight of the heat layer in overlays; the base image gets the rest.
pub const HEAT_WEIGHT: f32 = 0.4;

/// "Hot" ramp: black, red, yellow, white as `v` goes from 0 to 1.
pub fn heat_color(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

fn normalize(map: &mut [f32]) {
    let max = map.iter().copied().fold(0.0f32, f32::max);
    for v in map.iter_mut() {
        *v = if max > 0.0 { v.max(0.0) / max } else { 0.0 };
    }
}

/// Colours an `h x w` map at `height x width`: bilinear upsampling, then
/// scaling so the largest value is 1, then the hot ramp.
pub fn heatmap_colors(map: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape("heatmap", format!("map must be 2-D, got {:?}", map.shape())));
    };
    let mut up = resize_bilinear(&map.clone().reshape([1, h, w])?, height, width)?.into_data();
    normalize(&mut up);
    let plane = height * width;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, &v) in up.iter().enumerate() {
        for (ch, c) in heat_color(v).into_iter().enumerate() {
            out[ch * plane + i] = c;
        }
    }
    Tensor::new([3, height, width], out)
}

/// `0.4 * heat + 0.6 * base` at the size of the `3 x H x W` base image.
pub fn overlay_heatmap(map: &Tensor<f32>, base: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[3, h, w] = base.shape() else {
        return Err(Error::shape("overlay", format!("base must be 3 x H x W, got {:?}", base.shape())));
    };
    let heat = heatmap_colors(map, h, w)?;
    let data = heat
        .data()
        .iter()
        .zip(base.data())
        .map(|(&c, &b)| HEAT_WEIGHT * c + (1.0 - HEAT_WEIGHT) * b)
        .collect();
    Tensor::new([3, h, w], data)
}

/// Writes the overlay as a PPM and returns it.
pub fn render_heatmap(map: &Tensor<f32>, base: &Tensor<f32>, out_path: &Path) -> Result<Tensor<f32>> {
    let img = overlay_heatmap(map, base)?;
    write_ppm(out_path, &img)?;
    Ok(img)
}
