//! Multi-crop view construction with full geometry bookkeeping.
//!
//! The student global crop is sampled first; the teacher global crop is then
//! rejection-sampled at the same scale until it overlaps it (intersection
//! over the smaller rectangle ≥ the configured minimum). Local crops must
//! overlap the teacher∩student intersection. Flips happen here, inside the
//! recorded geometry, so downstream position projection can invert them.

use super::augment::{augment, AugmentParams};
use super::geometry::{overlap_ratio_smaller, CropGeometry, Rect};
use super::Image;
use crate::error::{data_err, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiCropConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub local_count: usize,
    /// Area-fraction range of global crops.
    pub global_scale: (f32, f32),
    /// Area-fraction range of local crops.
    pub local_scale: (f32, f32),
    /// Minimum intersection/smaller-rect ratio between the two globals.
    pub min_global_overlap: f32,
    /// Minimum intersection/local-area ratio against the global intersection.
    pub min_local_overlap: f32,
    pub flip_prob: f32,
    pub max_retries: usize,
}

impl Default for MultiCropConfig {
    fn default() -> Self {
        MultiCropConfig {
            global_size: 32,
            local_size: 16,
            local_count: 6,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            min_global_overlap: 0.25,
            min_local_overlap: 0.25,
            flip_prob: 0.5,
            max_retries: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct View {
    pub image: Image,
    pub geom: CropGeometry,
}

/// The multi-crop bundle: two globals plus `local_count` locals.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub teacher_global: View,
    pub student_global: View,
    pub locals: Vec<View>,
}

impl ViewSet {
    /// Views in canonical order: the two globals, then locals.
    pub fn all_views(&self) -> Vec<&View> {
        let mut v = vec![&self.teacher_global, &self.student_global];
        v.extend(self.locals.iter());
        v
    }
}

/// Photometric parameter sets per view role.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSet {
    pub teacher_global: AugmentParams,
    pub student_global: AugmentParams,
    pub local: AugmentParams,
}

impl AugmentSet {
    pub fn disabled() -> Self {
        AugmentSet {
            teacher_global: AugmentParams::disabled(),
            student_global: AugmentParams::disabled(),
            local: AugmentParams::disabled(),
        }
    }

    /// Asymmetric defaults: heavy blur on the teacher global, solarization on
    /// the student global, lighter treatment for locals.
    pub fn desk_default() -> Self {
        let base = AugmentParams {
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            grayscale_prob: 0.2,
            blur_prob: 1.0,
            blur_sigma: (0.1, 1.2),
            solarize_prob: 0.0,
            solarize_threshold: 0.5,
        };
        AugmentSet {
            teacher_global: base.clone(),
            student_global: AugmentParams { blur_prob: 0.1, solarize_prob: 0.2, ..base.clone() },
            local: AugmentParams { blur_prob: 0.5, ..base },
        }
    }
}

fn sample_rect(
    img_w: usize,
    img_h: usize,
    scale: (f32, f32),
    rng: &mut ChaCha8Rng,
) -> Rect {
    let area_frac = rng.gen_range(scale.0..=scale.1);
    let target = area_frac * (img_w * img_h) as f32;
    let log_ratio = rng.gen_range((0.75f32).ln()..(4.0f32 / 3.0).ln());
    let aspect = log_ratio.exp();
    let w = ((target * aspect).sqrt().round() as usize).clamp(2, img_w);
    let h = ((target / aspect).sqrt().round() as usize).clamp(2, img_h);
    let x = rng.gen_range(0..=img_w - w);
    let y = rng.gen_range(0..=img_h - h);
    Rect { x: x as f64, y: y as f64, w: w as f64, h: h as f64 }
}

fn geom_from_rect(r: Rect, flip: bool, out_size: usize) -> CropGeometry {
    CropGeometry { x: r.x as f32, y: r.y as f32, w: r.w as f32, h: r.h as f32, flip, out_size }
}

/// Resample the crop described by `geom` out of `src` at `geom.out_size`.
pub fn resize_crop(src: &Image, geom: &CropGeometry) -> Image {
    let s = geom.out_size;
    let mut out = Image::new(s, s);
    for i in 0..s {
        for j in 0..s {
            let (x, y) = geom.view_to_src(j as f64 + 0.5, i as f64 + 0.5);
            out.set_px(i, j, src.sample(x as f32 - 0.5, y as f32 - 0.5));
        }
    }
    out
}

pub fn make_views(
    src: &Image,
    cfg: &MultiCropConfig,
    aug: &AugmentSet,
    rng: &mut ChaCha8Rng,
) -> Result<ViewSet> {
    let (iw, ih) = (src.w, src.h);
    let min_side = ((cfg.local_scale.0 * (iw * ih) as f32).sqrt().floor() as usize).max(2);
    if iw < min_side || ih < min_side {
        return Err(data_err!("image {iw}x{ih} too small for the minimum crop"));
    }

    // student global first, then teacher global under the overlap constraint
    let mut student_rect = sample_rect(iw, ih, cfg.global_scale, rng);
    let mut teacher_rect = None;
    for _ in 0..cfg.max_retries {
        let cand = sample_rect(iw, ih, cfg.global_scale, rng);
        if overlap_ratio_smaller(&student_rect, &cand) >= cfg.min_global_overlap as f64 {
            teacher_rect = Some(cand);
            break;
        }
    }
    let teacher_rect = match teacher_rect {
        Some(r) => r,
        None => {
            // deterministic fallback: concentric full-image crops
            student_rect = Rect { x: 0.0, y: 0.0, w: iw as f64, h: ih as f64 };
            student_rect
        }
    };
    let inter = student_rect
        .intersection(&teacher_rect)
        .ok_or_else(|| data_err!("global crops do not intersect"))?;

    let mut local_rects = Vec::with_capacity(cfg.local_count);
    for _ in 0..cfg.local_count {
        let mut chosen = None;
        for _ in 0..cfg.max_retries {
            let cand = sample_rect(iw, ih, cfg.local_scale, rng);
            let ratio = cand.intersection(&inter).map(|i| i.area() / cand.area()).unwrap_or(0.0);
            if ratio >= cfg.min_local_overlap as f64 {
                chosen = Some(cand);
                break;
            }
        }
        let rect = match chosen {
            Some(r) => r,
            None => {
                // centered inside the global intersection at mid scale
                let mid = ((cfg.local_scale.0 + cfg.local_scale.1) * 0.5 * (iw * ih) as f32).sqrt();
                let side = (mid.round() as usize).clamp(2, iw.min(ih));
                let cx = inter.x + inter.w * 0.5;
                let cy = inter.y + inter.h * 0.5;
                let x = (cx - side as f64 * 0.5).clamp(0.0, (iw - side) as f64);
                let y = (cy - side as f64 * 0.5).clamp(0.0, (ih - side) as f64);
                let r = Rect { x: x.round(), y: y.round(), w: side as f64, h: side as f64 };
                let ratio = r.intersection(&inter).map(|i| i.area() / r.area()).unwrap_or(0.0);
                if ratio < cfg.min_local_overlap as f64 {
                    return Err(data_err!(
                        "local crop constraint unsatisfiable after fallback (ratio {ratio:.3})"
                    ));
                }
                r
            }
        };
        local_rects.push(rect);
    }

    let mut build = |rect: Rect, out_size: usize, params: &AugmentParams, rng: &mut ChaCha8Rng| {
        let flip = rng.gen::<f32>() < cfg.flip_prob;
        let geom = geom_from_rect(rect, flip, out_size);
        let mut image = resize_crop(src, &geom);
        augment(&mut image, params, rng);
        image.clamp01();
        View { image, geom }
    };

    let teacher_global = build(teacher_rect, cfg.global_size, &aug.teacher_global, rng);
    let student_global = build(student_rect, cfg.global_size, &aug.student_global, rng);
    let locals: Vec<View> =
        local_rects.into_iter().map(|r| build(r, cfg.local_size, &aug.local, rng)).collect();

    Ok(ViewSet { teacher_global, student_global, locals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_scene, SceneSpec};
    use crate::rng::{stream, Stream};

    fn scene(seed: u64) -> Image {
        let mut rng = stream(seed, Stream::Scene, &[0]);
        generate_scene(&SceneSpec::default(), &mut rng).pixels
    }

    #[test]
    fn global_overlap_constraint_holds() {
        let img = scene(0);
        let cfg = MultiCropConfig::default();
        let aug = AugmentSet::disabled();
        for i in 0..1000u64 {
            let mut rng = stream(5, Stream::Views, &[i]);
            let vs = make_views(&img, &cfg, &aug, &mut rng).unwrap();
            let r = overlap_ratio_smaller(
                &vs.teacher_global.geom.rect(),
                &vs.student_global.geom.rect(),
            );
            assert!(r >= 0.25 - 1e-9, "overlap {r} at draw {i}");
        }
    }

    #[test]
    fn zero_locals_yields_two_views() {
        let img = scene(1);
        let cfg = MultiCropConfig { local_count: 0, ..Default::default() };
        let mut rng = stream(6, Stream::Views, &[0]);
        let vs = make_views(&img, &cfg, &AugmentSet::disabled(), &mut rng).unwrap();
        assert!(vs.locals.is_empty());
        assert_eq!(vs.all_views().len(), 2);
    }

    #[test]
    fn locals_intersect_the_global_intersection() {
        let img = scene(2);
        let cfg = MultiCropConfig::default();
        let aug = AugmentSet::disabled();
        for i in 0..1000u64 {
            let mut rng = stream(7, Stream::Views, &[i]);
            let vs = make_views(&img, &cfg, &aug, &mut rng).unwrap();
            let inter = vs
                .teacher_global
                .geom
                .rect()
                .intersection(&vs.student_global.geom.rect())
                .expect("globals must intersect");
            for l in &vs.locals {
                let a = l.geom.rect().intersection(&inter).map(|r| r.area()).unwrap_or(0.0);
                assert!(a > 0.0, "local crop misses the intersection at draw {i}");
            }
        }
    }

    #[test]
    fn views_have_requested_sizes_and_valid_rects() {
        let img = scene(3);
        let cfg = MultiCropConfig::default();
        for i in 0..200u64 {
            let mut rng = stream(8, Stream::Views, &[i]);
            let vs = make_views(&img, &cfg, &AugmentSet::desk_default(), &mut rng).unwrap();
            assert_eq!(vs.teacher_global.image.h, cfg.global_size);
            for l in &vs.locals {
                assert_eq!(l.image.h, cfg.local_size);
                let g = &l.geom;
                assert!(g.x >= 0.0 && g.y >= 0.0);
                assert!(g.x + g.w <= img.w as f32 + 1e-4 && g.y + g.h <= img.h as f32 + 1e-4);
            }
        }
    }
}
