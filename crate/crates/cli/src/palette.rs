//! Fixed class colors and label-map rendering.

use anyhow::Context;
use image::{Rgb, RgbImage};
use paraformer::{LabelGrid, VOID};
use serde::Deserialize;

const PALETTE_TOML: &str = include_str!("../assets/palette.toml");

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub void: [u8; 3],
    pub classes: Vec<[u8; 3]>,
}

impl Palette {
    pub fn shipped() -> anyhow::Result<Self> {
        let p: Self = toml::from_str(PALETTE_TOML).context("parsing the shipped palette")?;
        anyhow::ensure!(!p.classes.is_empty(), "palette has no class colors");
        Ok(p)
    }

    pub fn color(&self, class: u8) -> [u8; 3] {
        if class == VOID {
            self.void
        } else {
            self.classes[class as usize % self.classes.len()]
        }
    }

    pub fn colorize(&self, label: &LabelGrid) -> RgbImage {
        let (h, w) = label.dims();
        RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(self.color(label.get(y as usize, x as usize))))
    }

    /// Coarse label, prediction and truth side by side over a row of class swatches.
    pub fn tri_panel(&self, panels: [&LabelGrid; 3], num_classes: usize) -> RgbImage {
        const GAP: u32 = 4;
        const SWATCH: u32 = 12;
        let (h, w) = panels[0].dims();
        let (h, w) = (h as u32, w as u32);
        let width = 3 * w + 4 * GAP;
        let height = h + 3 * GAP + SWATCH;
        let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        for (k, label) in panels.iter().enumerate() {
            let tile = self.colorize(label);
            let x0 = GAP + k as u32 * (w + GAP);
            image::imageops::replace(&mut img, &tile, x0 as i64, GAP as i64);
        }
        for c in 0..num_classes.min(u8::MAX as usize) as u32 {
            let x0 = GAP + c * (SWATCH + GAP);
            if x0 + SWATCH > width {
                break;
            }
            let color = Rgb(self.color(c as u8));
            for y in 0..SWATCH {
                for x in 0..SWATCH {
                    img.put_pixel(x0 + x, h + 2 * GAP + y, color);
                }
            }
        }
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_palette_parses_with_distinct_colors() {
        let p = Palette::shipped().unwrap();
        let mut c = p.classes.clone();
        c.sort_unstable();
        c.dedup();
        assert_eq!(c.len(), p.classes.len());
        assert_eq!(p.color(VOID), p.void);
    }

    #[test]
    fn panel_layout() {
        let p = Palette::shipped().unwrap();
        let a = LabelGrid::filled(8, 10, 0);
        let b = LabelGrid::filled(8, 10, 1);
        let c = LabelGrid::filled(8, 10, VOID);
        let img = p.tri_panel([&a, &b, &c], 4);
        assert_eq!(img.dimensions(), (3 * 10 + 16, 8 + 12 + 12));
        assert_eq!(img.get_pixel(4, 4).0, p.color(0));
        assert_eq!(img.get_pixel(4 + 14, 4).0, p.color(1));
        assert_eq!(img.get_pixel(4 + 28, 4).0, p.void);
    }
}
