//! Plain raster containers shared by every stage: class-index grids, binary
//! masks and multi-band image patches.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Reserved label value excluded from every loss and metric.
pub const VOID: u8 = 255;

/// Per-pixel class-index grid, row-major. `VOID` marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelGrid {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds a grid from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(height * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            let start = y * self.width + left;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Counts per class value `0..num_classes`; void and out-of-range values are skipped.
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes];
        for &v in &self.data {
            if v != VOID && (v as usize) < num_classes {
                counts[v as usize] += 1;
            }
        }
        counts
    }

    pub fn count_non_void(&self) -> usize {
        self.data.iter().filter(|&&v| v != VOID).count()
    }

    /// Labels as a `u32` tensor of shape `(H, W)`, with void replaced by `fill`.
    pub fn to_index_tensor(&self, fill: u32, device: &Device) -> Result<Tensor> {
        let idx: Vec<u32> = self
            .data
            .iter()
            .map(|&v| if v == VOID { fill } else { v as u32 })
            .collect();
        Ok(Tensor::from_vec(idx, (self.height, self.width), device)?)
    }
}

/// Binary supervision mask; `true` marks pixels kept in the masked loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl MaskGrid {
    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Multi-band image patch stored band-major (`bands × H × W`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImagePatch {
    pub fn from_vec(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != bands * height * width {
            return Err(Error::Shape(format!(
                "image {bands}x{height}x{width} needs {} values, got {}",
                bands * height * width,
                data.len()
            )));
        }
        Ok(Self {
            bands,
            height,
            width,
            data,
        })
    }

    pub fn filled(bands: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            bands,
            height,
            width,
            data: vec![value; bands * height * width],
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.bands * height * width);
        for b in 0..self.bands {
            let plane = self.band(b);
            for y in top..top + height {
                let start = y * self.width + left;
                data.extend_from_slice(&plane[start..start + width]);
            }
        }
        Ok(Self {
            bands: self.bands,
            height,
            width,
            data,
        })
    }

    /// Zero-pads on the bottom/right up to `height × width`.
    pub fn pad_to(&self, height: usize, width: usize) -> Self {
        let mut out = Self::filled(self.bands, height.max(self.height), width.max(self.width), 0.0);
        for b in 0..self.bands {
            let src = self.band(b);
            let w_out = out.width;
            let dst = out.band_mut(b);
            for y in 0..self.height {
                dst[y * w_out..y * w_out + self.width]
                    .copy_from_slice(&src[y * self.width..(y + 1) * self.width]);
            }
        }
        out
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (self.bands, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }
}

/// Stacks patches into a `(B, bands, H, W)` tensor.
pub fn stack_images(images: &[&ImagePatch], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.bands, img.height, img.width) != (first.bands, first.height, first.width) {
            return Err(Error::Shape("batch images differ in shape".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), first.bands, first.height, first.width),
        device,
    )?
    .to_dtype(dtype)?)
}

/// Per-pixel argmax over the class axis of `(B, L, H, W)` logits.
///
/// Ties resolve to the smallest class index.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<LabelGrid>> {
    let (b, l, h, w) = logits.dims4()?;
    if l > VOID as usize {
        return Err(Error::Shape(format!("{l} classes exceed the label range")));
    }
    let values: Vec<f32> = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(b);
    for n in 0..b {
        let base = n * l * plane;
        let mut labels = vec![0u8; plane];
        for (p, label) in labels.iter_mut().enumerate() {
            let mut best = values[base + p];
            let mut best_c = 0usize;
            for c in 1..l {
                let v = values[base + c * plane + p];
                if v > best {
                    best = v;
                    best_c = c;
                }
            }
            *label = best_c as u8;
        }
        out.push(LabelGrid::from_vec(h, w, labels)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_extracts_window() {
        let g = LabelGrid::from_rows(&[[0, 1, 2], [3, 4, 5], [6, 7, 8]]).unwrap();
        let c = g.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.as_slice(), &[4, 5, 7, 8]);
        assert!(g.crop(2, 2, 2, 2).is_err());
    }

    #[test]
    fn argmax_breaks_ties_toward_smallest_index() {
        let t = Tensor::from_vec(vec![1f32, 3.0, 1.0, 3.0, 0.5, 3.0], (1, 3, 1, 2), &Device::Cpu)
            .unwrap();
        let g = argmax_labels(&t).unwrap();
        // pixel 0: [1, 1, 0.5] -> 0; pixel 1: [3, 3, 3] -> 0
        assert_eq!(g[0].as_slice(), &[0, 0]);
    }

    #[test]
    fn forced_argmax_is_constant() {
        let mut v = vec![0f32; 4 * 9];
        for p in 0..9 {
            v[2 * 9 + p] = 10.0;
        }
        let t = Tensor::from_vec(v, (1, 4, 3, 3), &Device::Cpu).unwrap();
        let g = argmax_labels(&t).unwrap();
        assert!(g[0].as_slice().iter().all(|&c| c == 2));
    }

    #[test]
    fn pad_keeps_content_top_left() {
        let img = ImagePatch::from_vec(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = img.pad_to(3, 3);
        assert_eq!(p.as_slice(), &[0.1, 0.2, 0.0, 0.3, 0.4, 0.0, 0.0, 0.0, 0.0]);
    }
}
