//! PNG output: 8-bit RGB, 16-bit depth (normalized by 4 * d_max), and
//! palette-indexed segmentation images.

use std::error::Error;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use voxelfield_core::label_semantics::AbstractClass;
use voxelfield_core::volume_renderer::FrameBuffers;
use voxelfield_core::LabelScheme;

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let stem = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    prefix.with_file_name(format!("{stem}{suffix}"))
}

pub fn write_frame(
    prefix: &Path,
    buffers: &FrameBuffers,
    scheme: &LabelScheme,
    d_max: f64,
) -> Result<(), Box<dyn Error>> {
    let (w, h) = (buffers.width as u32, buffers.height as u32);

    let rgb = ImageBuffer::from_fn(w, h, |x, y| {
        let px = |ch: usize| {
            (buffers.rgb[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    rgb.save(with_suffix(prefix, "_rgb.png"))?;

    // Depth normalized to [0, 1] by four truncation lengths; sky and
    // saturated pixels clamp to white.
    let scale = 4.0 * d_max;
    let depth = ImageBuffer::from_fn(w, h, |x, y| {
        let d = buffers.depth[y as usize * buffers.width + x as usize];
        let v = if d.is_finite() { (d / scale).clamp(0.0, 1.0) } else { 1.0 };
        Luma([(v * 65535.0).round() as u16])
    });
    depth.save(with_suffix(prefix, "_depth.png"))?;

    write_seg(
        &with_suffix(prefix, "_seg.png"),
        &buffers.seg,
        buffers.width,
        buffers.height,
        scheme,
    )?;
    Ok(())
}

/// Indexed-color PNG: pixel value = class id, palette = class colors.
pub fn write_seg(
    path: &Path,
    labels: &[AbstractClass],
    width: usize,
    height: usize,
    scheme: &LabelScheme,
) -> Result<(), Box<dyn Error>> {
    assert_eq!(labels.len(), width * height);
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    let palette: Vec<u8> = scheme
        .palette_u8()
        .iter()
        .flat_map(|rgb| rgb.iter().copied())
        .collect();
    encoder.set_palette(palette);
    let mut writer = encoder.write_header()?;
    let data: Vec<u8> = labels.iter().map(|l| l.id() as u8).collect();
    writer.write_image_data(&data)?;
    Ok(())
}
