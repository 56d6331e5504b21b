// SPDX-License-Identifier: MIT OR Apache-2.0

//! PNG encoding of heatmaps, samples and region maps.

use std::io::Cursor;

use crate::error::{CrpError, Result};
use crate::tensor::Tensor;

/// Maps `v` in `[-1, 1]` to blue (-1), white (0) and red (+1).
pub fn blue_white_red(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if v >= 0.0 {
        [255, fade(v), fade(v)]
    } else {
        [fade(v), fade(v), 255]
    }
}

/// RGB pixels of an `(H, W)` map normalized by its largest absolute value.
/// An all-zero map renders white.
pub fn heatmap_rgb(map: &Tensor<f64>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = spatial(map.shape())?;
    let m = map.max_abs();
    let scale = if m > 0.0 { 1.0 / m } else { 0.0 };
    let rgb = map.data().iter().flat_map(|&v| blue_white_red(v * scale)).collect();
    Ok((h, w, rgb))
}

pub fn heatmap_png(map: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w, rgb) = heatmap_rgb(map)?;
    encode_rgb(w, h, &rgb)
}

/// Renders a `(C, H, W)` sample: one channel as grey, three as RGB, any
/// other count as the channel mean. Values are min-max scaled.
pub fn sample_png(sample: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = sample.chw()?;
    let (lo, hi) = sample
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |v: f32| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
    let d = sample.data();
    let plane = h * w;
    let rgb: Vec<u8> = (0..plane)
        .flat_map(|i| {
            if c == 3 {
                [px(d[i]), px(d[plane + i]), px(d[2 * plane + i])]
            } else {
                let mean = (0..c).map(|ch| d[ch * plane + i]).sum::<f32>() / c as f32;
                let g = px(mean);
                [g, g, g]
            }
        })
        .collect();
    encode_rgb(w, h, &rgb)
}

pub fn encode_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(CrpError::Shape(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(rgb)?;
    }
    Ok(out)
}

/// Decodes an 8-bit indexed or greyscale PNG into raw per-pixel values
/// (palette indices are kept, not expanded). Returns `(height, width, values)`.
pub fn decode_label_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| CrpError::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(CrpError::Image(format!(
            "region masks must be 8-bit indexed or greyscale PNGs, got {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut values = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        values.extend_from_slice(&row[..w]);
    }
    Ok((h, w, values))
}

/// Encodes per-pixel labels as an 8-bit greyscale PNG.
pub fn encode_label_png(width: usize, height: usize, labels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(labels)?;
    }
    Ok(out)
}

/// Distinct colors for categorical fills.
pub fn palette(i: usize) -> [u8; 3] {
    const P: [[u8; 3]; 12] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [127, 127, 127],
        [188, 189, 34],
        [23, 190, 207],
        [174, 199, 232],
        [255, 187, 120],
    ];
    P[i % P.len()]
}

fn spatial(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        [w] => Ok((1, *w)),
        _ => Err(CrpError::Shape(format!("expected an (H, W) map, got {shape:?}"))),
    }
}
