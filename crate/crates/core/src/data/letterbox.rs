use image::imageops::{self, FilterType};
use image::{DynamicImage, GenericImageView, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{GroundTruthBox, PairedSample};
use crate::error::{Error, Result};

pub(crate) const PAD_VALUE: u8 = 114;

/// Aspect-preserving resize into a `target`-sided square with centered
/// padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: u32,
    pub pad_y: u32,
    pub target: u32,
    pub src_width: u32,
    pub src_height: u32,
}

impl LetterboxTransform {
    pub fn new(src_width: u32, src_height: u32, target: u32) -> Result<Self> {
        if target == 0 || target % 32 != 0 {
            return Err(Error::config(format!("letterbox target {target} is not divisible by 32")));
        }
        if src_width == 0 || src_height == 0 {
            return Err(Error::Data("cannot letterbox an empty image".into()));
        }
        let t = target as f64;
        let scale = (t / src_width as f64).min(t / src_height as f64);
        let (new_w, new_h) = Self::resized(src_width, src_height, scale, target);
        Ok(Self {
            scale,
            pad_x: (target - new_w) / 2,
            pad_y: (target - new_h) / 2,
            target,
            src_width,
            src_height,
        })
    }

    fn resized(w: u32, h: u32, scale: f64, target: u32) -> (u32, u32) {
        let nw = ((w as f64 * scale).round() as u32).clamp(1, target);
        let nh = ((h as f64 * scale).round() as u32).clamp(1, target);
        (nw, nh)
    }

    pub fn resized_size(&self) -> (u32, u32) {
        Self::resized(self.src_width, self.src_height, self.scale, self.target)
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.pad_x == 0 && self.pad_y == 0
    }

    pub fn apply_box(&self, b: &GroundTruthBox) -> GroundTruthBox {
        let t = self.target as f64;
        let (w, h) = (self.src_width as f64, self.src_height as f64);
        GroundTruthBox {
            class_id: b.class_id,
            cx: (b.cx * w * self.scale + self.pad_x as f64) / t,
            cy: (b.cy * h * self.scale + self.pad_y as f64) / t,
            w: b.w * w * self.scale / t,
            h: b.h * h * self.scale / t,
        }
    }

    pub fn invert_box(&self, b: &GroundTruthBox) -> GroundTruthBox {
        let t = self.target as f64;
        let (w, h) = (self.src_width as f64, self.src_height as f64);
        GroundTruthBox {
            class_id: b.class_id,
            cx: (b.cx * t - self.pad_x as f64) / self.scale / w,
            cy: (b.cy * t - self.pad_y as f64) / self.scale / h,
            w: b.w * t / self.scale / w,
            h: b.h * t / self.scale / h,
        }
    }

    /// Maps a letterboxed pixel coordinate back to the source image.
    pub fn invert_point(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.pad_x as f64) / self.scale,
            (y - self.pad_y as f64) / self.scale,
        )
    }

    pub fn apply_image(&self, img: &DynamicImage) -> DynamicImage {
        if self.is_identity() && img.dimensions() == (self.target, self.target) {
            return img.clone();
        }
        let (nw, nh) = self.resized_size();
        let resized = if (nw, nh) == img.dimensions() {
            img.clone()
        } else {
            img.resize_exact(nw, nh, FilterType::Triangle)
        };
        let t = self.target;
        let (px, py) = (self.pad_x as i64, self.pad_y as i64);
        match resized {
            DynamicImage::ImageLuma8(src) => {
                let mut canvas = image::GrayImage::from_pixel(t, t, Luma([PAD_VALUE]));
                imageops::overlay(&mut canvas, &src, px, py);
                DynamicImage::ImageLuma8(canvas)
            }
            other => {
                let src = other.to_rgb8();
                let mut canvas = image::RgbImage::from_pixel(t, t, Rgb([PAD_VALUE; 3]));
                imageops::overlay(&mut canvas, &src, px, py);
                DynamicImage::ImageRgb8(canvas)
            }
        }
    }
}

/// Letterboxes both modalities with one shared transform and remaps boxes.
pub fn letterbox(sample: &PairedSample, target: u32) -> Result<(PairedSample, LetterboxTransform)> {
    if let (Some(r), Some(i)) = (&sample.rgb, &sample.ir) {
        if r.dimensions() != i.dimensions() {
            return Err(Error::Data(format!(
                "{}: modalities are not aligned ({:?} vs {:?})",
                sample.image_id,
                r.dimensions(),
                i.dimensions()
            )));
        }
    }
    let (w, h) = sample.size();
    let tf = LetterboxTransform::new(w as u32, h as u32, target)?;
    let out = PairedSample {
        image_id: sample.image_id.clone(),
        rgb: sample.rgb.as_ref().map(|i| tf.apply_image(i)),
        ir: sample.ir.as_ref().map(|i| tf.apply_image(i)),
        boxes: sample.boxes.iter().map(|b| tf.apply_box(b)).collect(),
        source_split: sample.source_split,
    };
    Ok((out, tf))
}
