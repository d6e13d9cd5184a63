//! Photometric augmentation. Geometry (crop + flip) is fixed by `make_views`
//! so geometry metadata stays truthful; everything here is pixel-value only.

use super::Image;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub jitter_prob: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale_prob: f32,
    pub blur_prob: f32,
    pub blur_sigma: (f32, f32),
    pub solarize_prob: f32,
    pub solarize_threshold: f32,
}

impl AugmentParams {
    pub fn disabled() -> Self {
        AugmentParams {
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 1.0),
            solarize_prob: 0.0,
            solarize_threshold: 0.5,
        }
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn brightness(img: &mut Image, factor: f32) {
    for v in &mut img.data {
        *v *= factor;
    }
}

pub fn contrast(img: &mut Image, factor: f32) {
    let mean: f32 = img.data.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f32>()
        / (img.h * img.w) as f32;
    for v in &mut img.data {
        *v = mean + (*v - mean) * factor;
    }
}

pub fn saturation(img: &mut Image, factor: f32) {
    for p in img.data.chunks_exact_mut(3) {
        let g = luma([p[0], p[1], p[2]]);
        for v in p {
            *v = g + (*v - g) * factor;
        }
    }
}

pub fn grayscale(img: &mut Image) {
    saturation(img, 0.0);
}

/// x ↦ 1 − x above the threshold.
pub fn solarize(img: &mut Image, threshold: f32) {
    for v in &mut img.data {
        if *v > threshold {
            *v = 1.0 - *v;
        }
    }
}

/// Separable Gaussian blur with a boundary-normalized kernel: at the edges
/// the kernel is renormalized over in-bounds taps, so constants are preserved
/// exactly and mean brightness moves only marginally.
pub fn gaussian_blur(img: &mut Image, sigma: f32) {
    let radius = (2.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f32 / sigma).powi(2)).exp());
    }
    let pass = |src: &Image, horizontal: bool| -> Image {
        let mut out = Image::new(src.h, src.w);
        for y in 0..src.h as i64 {
            for x in 0..src.w as i64 {
                let mut acc = [0.0f32; 3];
                let mut wsum = 0.0f32;
                for (ki, kw) in kernel.iter().enumerate() {
                    let o = ki as i64 - radius;
                    let (sx, sy) = if horizontal { (x + o, y) } else { (x, y + o) };
                    if sx < 0 || sy < 0 || sx >= src.w as i64 || sy >= src.h as i64 {
                        continue;
                    }
                    let p = src.px(sy as usize, sx as usize);
                    for c in 0..3 {
                        acc[c] += kw * p[c];
                    }
                    wsum += kw;
                }
                out.set_px(y as usize, x as usize, [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum]);
            }
        }
        out
    };
    let tmp = pass(img, true);
    *img = pass(&tmp, false);
}

/// Apply the configured photometric pipeline in a fixed draw order so the
/// stream consumption is identical regardless of which ops fire.
pub fn augment(img: &mut Image, p: &AugmentParams, rng: &mut ChaCha8Rng) {
    let apply_jitter = rng.gen::<f32>() < p.jitter_prob;
    let jb: f32 = rng.gen_range(-1.0..1.0f32);
    let jc: f32 = rng.gen_range(-1.0..1.0f32);
    let js: f32 = rng.gen_range(-1.0..1.0f32);
    if apply_jitter {
        brightness(img, 1.0 + jb * p.brightness);
        contrast(img, 1.0 + jc * p.contrast);
        saturation(img, 1.0 + js * p.saturation);
    }
    if rng.gen::<f32>() < p.grayscale_prob {
        grayscale(img);
    }
    let sigma = rng.gen_range(p.blur_sigma.0..=p.blur_sigma.1);
    if rng.gen::<f32>() < p.blur_prob {
        gaussian_blur(img, sigma);
    }
    if rng.gen::<f32>() < p.solarize_prob {
        solarize(img, p.solarize_threshold);
    }
    img.clamp01();
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_image(seed: u64) -> Image {
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::Augment, &[0]);
        let mut img = Image::new(16, 16);
        for v in &mut img.data {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let img = test_image(1);
        let mut out = img.clone();
        let mut rng = crate::rng::stream(1, crate::rng::Stream::Augment, &[1]);
        augment(&mut out, &AugmentParams::disabled(), &mut rng);
        assert_eq!(img.data, out.data);
    }

    #[test]
    fn solarize_definition() {
        let mut img = Image::new(1, 1);
        img.set_px(0, 0, [0.8, 0.3, 0.5001]);
        solarize(&mut img, 0.5);
        let p = img.px(0, 0);
        assert!((p[0] - 0.2).abs() < 1e-6);
        assert!((p[1] - 0.3).abs() < 1e-6);
        assert!((p[2] - 0.4999).abs() < 1e-6);
    }

    #[test]
    fn blur_preserves_mean_brightness() {
        for seed in 0..8 {
            let mut img = test_image(seed);
            let before = img.mean_brightness();
            gaussian_blur(&mut img, 1.3);
            let after = img.mean_brightness();
            assert!((before - after).abs() < 1e-3, "mean moved {before} -> {after}");
        }
    }

    #[test]
    fn blur_preserves_constants_exactly_at_borders() {
        let mut img = Image::new(8, 8);
        for v in &mut img.data {
            *v = 0.37;
        }
        gaussian_blur(&mut img, 2.0);
        for &v in &img.data {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }
}
