//! Crop rectangles and the view↔source coordinate maps that both resizing and
//! cross-view patch correspondence share. A view coordinate lives in the
//! continuous box [0, out_size]; horizontal flips mirror that box.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    /// Crop rectangle in source-image pixels.
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub flip: bool,
    /// Side length the crop is resized to.
    pub out_size: usize,
}

impl CropGeometry {
    pub fn full(size: usize, out_size: usize) -> Self {
        CropGeometry { x: 0.0, y: 0.0, w: size as f32, h: size as f32, flip: false, out_size }
    }

    /// Map a continuous view coordinate (u, v) ∈ [0, S]² to source pixels.
    pub fn view_to_src(&self, u: f64, v: f64) -> (f64, f64) {
        let s = self.out_size as f64;
        let u = if self.flip { s - u } else { u };
        (self.x as f64 + u * self.w as f64 / s, self.y as f64 + v * self.h as f64 / s)
    }

    /// Inverse of [`CropGeometry::view_to_src`].
    pub fn src_to_view(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.out_size as f64;
        let u = (x - self.x as f64) * s / self.w as f64;
        let v = (y - self.y as f64) * s / self.h as f64;
        (if self.flip { s - u } else { u }, v)
    }

    pub fn rect(&self) -> Rect {
        Rect { x: self.x as f64, y: self.y as f64, w: self.w as f64, h: self.h as f64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 > x0 && y1 > y0 {
            Some(Rect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
        } else {
            None
        }
    }
}

/// Intersection area over the smaller rectangle's area; 0 when disjoint.
pub fn overlap_ratio_smaller(a: &Rect, b: &Rect) -> f64 {
    match a.intersection(b) {
        Some(i) => i.area() / a.area().min(b.area()),
        None => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_geometry_round_trips() {
        let g = CropGeometry::full(32, 32);
        let (x, y) = g.view_to_src(5.25, 7.5);
        assert_eq!((x, y), (5.25, 7.5));
        let (u, v) = g.src_to_view(x, y);
        assert!((u - 5.25).abs() < 1e-12 && (v - 7.5).abs() < 1e-12);
    }

    #[test]
    fn flip_mirrors_horizontal_axis_only() {
        let g = CropGeometry { x: 4.0, y: 2.0, w: 16.0, h: 16.0, flip: true, out_size: 8 };
        // view u=0 maps to the crop's right edge
        let (x, _) = g.view_to_src(0.0, 0.0);
        assert!((x - 20.0).abs() < 1e-12);
        let (x, y) = g.view_to_src(8.0, 8.0);
        assert!((x - 4.0).abs() < 1e-12 && (y - 18.0).abs() < 1e-12);
        // round trip through the flip
        let (u, v) = g.src_to_view(12.0, 10.0);
        let (x2, y2) = g.view_to_src(u, v);
        assert!((x2 - 12.0).abs() < 1e-12 && (y2 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_ratio_uses_smaller_rect() {
        let a = Rect { x: 0.0, y: 0.0, w: 10.0, h: 10.0 };
        let b = Rect { x: 5.0, y: 0.0, w: 5.0, h: 5.0 };
        // intersection 5x5 = whole of b
        assert!((overlap_ratio_smaller(&a, &b) - 1.0).abs() < 1e-12);
        let c = Rect { x: 20.0, y: 20.0, w: 3.0, h: 3.0 };
        assert_eq!(overlap_ratio_smaller(&a, &c), 0.0);
    }
}
