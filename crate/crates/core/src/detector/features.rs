use candle_core::{DType, Tensor};
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    P2,
    P3,
    P4,
    P5,
}

impl Stage {
    pub fn stride(self) -> usize {
        match self {
            Stage::P2 => 4,
            Stage::P3 => 8,
            Stage::P4 => 16,
            Stage::P5 => 32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::P2 => "P2",
            Stage::P3 => "P3",
            Stage::P4 => "P4",
            Stage::P5 => "P5",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P2" => Ok(Stage::P2),
            "P3" => Ok(Stage::P3),
            "P4" => Ok(Stage::P4),
            "P5" => Ok(Stage::P5),
            _ => Err(Error::config(format!("unknown stage {s:?} (expected P2..P5)"))),
        }
    }
}

/// Channel-mean activation of batch item `item`, min-max scaled to 8-bit
/// grayscale at the stage's native resolution. A constant map becomes
/// uniform mid-gray.
pub fn stage_image(features: &Tensor, item: usize) -> Result<GrayImage> {
    let (_, _, h, w) = features.dims4()?;
    let mean = features
        .get(item)?
        .to_dtype(DType::F64)?
        .mean(0)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let pixels: Vec<u8> = if !(range > 1e-12) {
        vec![128; mean.len()]
    } else {
        mean.iter()
            .map(|v| (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    };
    GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::Data("feature map size mismatch".into()))
}
