//! 8-bit PNG encoding for image bands and label grids.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{ImagePatch, LabelGrid, VOID};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Writes bands 0..3 as an RGB PNG and, when present, band 3 as a grayscale PNG.
pub fn write_image_png(image: &ImagePatch, rgb_path: &Path, extra_band: Option<&Path>) -> Result<()> {
    if image.bands() < 3 {
        return Err(Error::Shape(format!("need at least 3 bands, got {}", image.bands())));
    }
    let (h, w) = image.dims();
    let (r, g, b) = (image.band(0), image.band(1), image.band(2));
    let rgb: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(r[i]), to_u8(g[i]), to_u8(b[i])])
    });
    ensure_parent(rgb_path)?;
    rgb.save(rgb_path).map_err(|e| Error::image(rgb_path, e))?;
    if let Some(path) = extra_band {
        let band = image.band(3);
        let gray: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([to_u8(band[y as usize * w + x as usize])])
        });
        ensure_parent(path)?;
        gray.save(path).map_err(|e| Error::image(path, e))?;
    }
    Ok(())
}

pub fn write_label_png(label: &LabelGrid, path: &Path) -> Result<()> {
    let (h, w) = label.dims();
    let img = GrayImage::from_raw(w as u32, h as u32, label.as_slice().to_vec())
        .expect("buffer sized from grid");
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Reads an RGB PNG plus optional extra band into an image scaled by 1/255.
pub fn read_image_png(rgb_path: &Path, extra_band: Option<&Path>) -> Result<ImagePatch> {
    let rgb = image::open(rgb_path)
        .map_err(|e| Error::image(rgb_path, e))?
        .into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let extra = match extra_band {
        Some(p) => {
            let g = image::open(p).map_err(|e| Error::image(p, e))?.into_luma8();
            if (g.width() as usize, g.height() as usize) != (w, h) {
                return Err(Error::Shape(format!(
                    "{}: extra band is {}x{}, image is {h}x{w}",
                    p.display(),
                    g.height(),
                    g.width()
                )));
            }
            Some(g)
        }
        None => None,
    };
    let bands = if extra.is_some() { 4 } else { 3 };
    let mut data = Vec::with_capacity(bands * h * w);
    for b in 0..3 {
        data.extend(rgb.pixels().map(|p| p.0[b] as f32 / 255.0));
    }
    if let Some(g) = extra {
        data.extend(g.pixels().map(|p| p.0[0] as f32 / 255.0));
    }
    ImagePatch::from_vec(bands, h, w, data)
}

/// Reads a single-channel label PNG. 8- and 16-bit inputs are accepted;
/// values above 255 are rejected and 255 is void.
pub fn read_label_png(path: &Path) -> Result<LabelGrid> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u8> = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw(),
        image::DynamicImage::ImageLuma16(g) => {
            let raw = g.into_raw();
            if let Some(bad) = raw.iter().find(|&&v| v > VOID as u16) {
                return Err(Error::Shape(format!(
                    "{}: class index {bad} exceeds 255",
                    path.display()
                )));
            }
            raw.into_iter().map(|v| v as u8).collect()
        }
        other => {
            return Err(Error::Shape(format!(
                "{}: expected a single-channel label image, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    LabelGrid::from_vec(h, w, data)
}
