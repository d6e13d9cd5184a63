//! Dataset ingestion, synthetic scene generation and multi-crop augmentation.

pub mod augment;
pub mod format;
pub mod geometry;
pub mod synthetic;
pub mod views;

use crate::error::{data_err, Result};

/// RGB image, row-major, channels interleaved, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; h * w * 3] }
    }

    #[inline]
    pub fn px(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.w + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_px(&mut self, y: usize, x: usize, c: [f32; 3]) {
        let o = (y * self.w + x) * 3;
        self.data[o..o + 3].copy_from_slice(&c);
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at pixel-index coordinates, clamped to the border.
    pub fn sample(&self, fx: f32, fy: f32) -> [f32; 3] {
        let fx = fx.clamp(0.0, (self.w - 1) as f32);
        let fy = fy.clamp(0.0, (self.h - 1) as f32);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let ax = fx - x0 as f32;
        let ay = fy - y0 as f32;
        let p00 = self.px(y0, x0);
        let p01 = self.px(y0, x1);
        let p10 = self.px(y1, x0);
        let p11 = self.px(y1, x1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - ax) + p01[c] * ax;
            let bot = p10[c] * (1.0 - ax) + p11[c] * ax;
            out[c] = top * (1.0 - ay) + bot * ay;
        }
        out
    }

    pub fn mean_brightness(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }
}

/// A labelled sample. `composition` lists (class, visible-area fraction) per
/// drawn shape for synthetic scenes, largest first.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub pixels: Image,
    pub label: Option<u8>,
    pub composition: Option<Vec<(u8, f32)>>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(data_err!("pixel outside [0,1]"));
        }
        if let Some(comp) = &self.composition {
            let total: f32 = comp.iter().map(|(_, a)| *a).sum();
            if total > 1.0 + 1e-4 {
                return Err(data_err!("composition fractions sum to {total} > 1"));
            }
        }
        Ok(())
    }
}
