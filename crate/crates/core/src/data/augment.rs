use image::imageops::{self, FilterType};
use image::{DynamicImage, GenericImageView, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::letterbox::PAD_VALUE;
use super::{GroundTruthBox, PairedSample};

const MIN_BOX_SIZE: f64 = 1e-4;

/// Paired geometric augmentation: horizontal flip and zoom about the image
/// center. Both modalities always receive the same transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_min: 0.75,
            scale_max: 1.25,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

fn zoom(img: &DynamicImage, new_w: u32, new_h: u32, off_x: i64, off_y: i64) -> DynamicImage {
    let (w, h) = img.dimensions();
    let resized = img.resize_exact(new_w, new_h, FilterType::Triangle);
    match resized {
        DynamicImage::ImageLuma8(src) => {
            let mut canvas = image::GrayImage::from_pixel(w, h, Luma([PAD_VALUE]));
            imageops::overlay(&mut canvas, &src, off_x, off_y);
            DynamicImage::ImageLuma8(canvas)
        }
        other => {
            let mut canvas = image::RgbImage::from_pixel(w, h, Rgb([PAD_VALUE; 3]));
            imageops::overlay(&mut canvas, &other.to_rgb8(), off_x, off_y);
            DynamicImage::ImageRgb8(canvas)
        }
    }
}

/// Applies a seeded random flip and zoom. The output is a pure function of
/// `(sample, config, seed)`.
pub fn augment(sample: &PairedSample, config: &AugmentConfig, seed: u64) -> PairedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = config.flip_prob > 0.0 && rng.random::<f64>() < config.flip_prob;
    let s = if config.scale_max > config.scale_min {
        rng.random_range(config.scale_min..=config.scale_max)
    } else {
        config.scale_min
    };

    let (w, h) = sample.size();
    let (w, h) = (w as u32, h as u32);
    let new_w = ((w as f64 * s).round() as u32).max(1);
    let new_h = ((h as f64 * s).round() as u32).max(1);
    let off_x = (w as i64 - new_w as i64) / 2;
    let off_y = (h as i64 - new_h as i64) / 2;
    let scaled = (new_w, new_h) != (w, h);

    let transform = |img: &DynamicImage| {
        let mut out = if scaled {
            zoom(img, new_w, new_h, off_x, off_y)
        } else {
            img.clone()
        };
        if flip {
            out = out.fliph();
        }
        out
    };

    let (fw, fh) = (w as f64, h as f64);
    let boxes = sample
        .boxes
        .iter()
        .filter_map(|b| {
            if !scaled {
                let cx = if flip { 1.0 - b.cx } else { b.cx };
                return Some(GroundTruthBox { cx, ..b.clone() });
            }
            let (sx, sy) = (new_w as f64 / fw, new_h as f64 / fh);
            let (ox, oy) = (off_x as f64 / fw, off_y as f64 / fh);
            let mut x1 = (b.cx - b.w / 2.0) * sx + ox;
            let mut x2 = (b.cx + b.w / 2.0) * sx + ox;
            let y1 = ((b.cy - b.h / 2.0) * sy + oy).clamp(0.0, 1.0);
            let y2 = ((b.cy + b.h / 2.0) * sy + oy).clamp(0.0, 1.0);
            x1 = x1.clamp(0.0, 1.0);
            x2 = x2.clamp(0.0, 1.0);
            if x2 <= x1 || y2 <= y1 {
                return None;
            }
            if flip {
                (x1, x2) = (1.0 - x2, 1.0 - x1);
            }
            let bw = (x2 - x1).max(MIN_BOX_SIZE);
            let bh = (y2 - y1).max(MIN_BOX_SIZE);
            Some(GroundTruthBox {
                class_id: b.class_id,
                cx: (x1 + x2) / 2.0,
                cy: (y1 + y2) / 2.0,
                w: bw,
                h: bh,
            })
        })
        .collect();

    PairedSample {
        image_id: sample.image_id.clone(),
        rgb: sample.rgb.as_ref().map(transform),
        ir: sample.ir.as_ref().map(transform),
        boxes,
        source_split: sample.source_split,
    }
}
