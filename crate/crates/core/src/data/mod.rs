//! Paired visible/infrared datasets.
//!
//! On-disk layout under a dataset root:
//!
//! ```text
//! dataset.toml
//! images/visible/<split>/<stem>.{png,jpg}
//! images/infrared/<split>/<stem>.{png,jpg}
//! labels/<split>/<stem>.txt        # "class cx cy w h" per line, normalized
//! ```

mod augment;
mod letterbox;
mod synthetic;

pub use augment::{augment, AugmentConfig};
pub use letterbox::{letterbox, LetterboxTransform};
pub use synthetic::{write_synthetic_dataset, SyntheticConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GenericImageView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{Modality, ModelInput};
use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;

pub const MANIFEST_FILE: &str = "dataset.toml";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityPolicy {
    Rgb,
    Ir,
    Both,
}

impl ModalityPolicy {
    pub fn name(self) -> &'static str {
        match self {
            ModalityPolicy::Rgb => "rgb",
            ModalityPolicy::Ir => "ir",
            ModalityPolicy::Both => "both",
        }
    }

    fn needs(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (ModalityPolicy::Both, _) | (ModalityPolicy::Rgb, Modality::Rgb) | (ModalityPolicy::Ir, Modality::Ir)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPaths {
    pub train: String,
    pub val: String,
}

impl Default for SplitPaths {
    fn default() -> Self {
        Self {
            train: "train".into(),
            val: "val".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub names: Vec<String>,
    /// Channel count the infrared stream is normalized to (1 or 3).
    #[serde(default = "default_ir_channels")]
    pub ir_channels: usize,
    #[serde(default)]
    pub splits: SplitPaths,
}

fn default_ir_channels() -> usize {
    3
}

impl DatasetManifest {
    pub fn new(names: Vec<String>, ir_channels: usize) -> Self {
        Self {
            num_classes: names.len(),
            names,
            ir_channels,
            splits: SplitPaths::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("dataset manifest: num_classes must be >= 1"));
        }
        if self.names.len() != self.num_classes {
            return Err(Error::config(format!(
                "dataset manifest: {} class names for num_classes = {}",
                self.names.len(),
                self.num_classes
            )));
        }
        if !matches!(self.ir_channels, 1 | 3) {
            return Err(Error::config("dataset manifest: ir_channels must be 1 or 3"));
        }
        Ok(())
    }

    pub fn split_dir(&self, split: Split) -> &str {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
        }
    }
}

/// One annotation in normalized center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    pub fn to_pixels(&self, width: usize, height: usize) -> BoxXyxy {
        BoxXyxy::from_cxcywh(
            self.cx * width as f64,
            self.cy * height as f64,
            self.w * width as f64,
            self.h * height as f64,
        )
    }

    fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.w > 0.0
            && self.h > 0.0
    }
}

/// An aligned RGB/IR pair with its annotations. A modality is `None` only
/// when the dataset was loaded with a single-modality policy.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub image_id: String,
    pub rgb: Option<DynamicImage>,
    pub ir: Option<DynamicImage>,
    pub boxes: Vec<GroundTruthBox>,
    pub source_split: Split,
}

impl PairedSample {
    pub fn image(&self, m: Modality) -> Option<&DynamicImage> {
        match m {
            Modality::Rgb => self.rgb.as_ref(),
            Modality::Ir => self.ir.as_ref(),
        }
    }

    /// `(width, height)` of the first present modality.
    pub fn size(&self) -> (usize, usize) {
        let img = self.rgb.as_ref().or(self.ir.as_ref()).expect("sample has an image");
        (img.width() as usize, img.height() as usize)
    }

    /// Ground-truth boxes in pixel corners of the current image size.
    pub fn pixel_boxes(&self) -> Vec<(usize, BoxXyxy)> {
        let (w, h) = self.size();
        self.boxes.iter().map(|b| (b.class_id, b.to_pixels(w, h))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Exclusion {
    pub stem: String,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
    /// Stems present on disk but lacking a required modality or label file.
    pub exclusions: Vec<Exclusion>,
    pub manifest: DatasetManifest,
}

fn list_stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::config(format!("missing dataset directory {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        let Some(ext) = ext else { continue };
        if !exts.contains(&ext.as_str()) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("non-UTF-8 file name {}", path.display())))?
            .to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Data(format!(
                "duplicate stem {stem:?}: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Parses a label file. Each non-blank line must hold exactly five
/// whitespace-separated fields `class cx cy w h`.
pub fn parse_labels(path: &Path, text: &str, num_classes: usize) -> Result<Vec<GroundTruthBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Label {
            file: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("invalid class id {:?}", fields[0])))?;
        if class_id >= num_classes {
            return Err(err(format!("class id {class_id} out of range (num_classes = {num_classes})")));
        }
        let mut v = [0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("invalid number {f:?}")))?;
        }
        let b = GroundTruthBox {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        };
        if !b.is_valid() {
            return Err(err(format!("box {v:?} out of range")));
        }
        boxes.push(b);
    }
    Ok(boxes)
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Normalizes an infrared image to `channels` (1 or 3). A three-channel
/// image collapses to one channel only when its channels are identical.
pub fn normalize_ir(img: DynamicImage, channels: usize, path: &Path) -> Result<DynamicImage> {
    match (channels, img.color().channel_count()) {
        (1, 1) => Ok(DynamicImage::ImageLuma8(img.to_luma8())),
        (1, _) => {
            let rgb = img.to_rgb8();
            if rgb.pixels().any(|p| p.0[0] != p.0[1] || p.0[1] != p.0[2]) {
                return Err(Error::Data(format!(
                    "{}: infrared image has distinct channels and cannot be collapsed to one",
                    path.display()
                )));
            }
            Ok(DynamicImage::ImageLuma8(img.to_luma8()))
        }
        _ => Ok(DynamicImage::ImageRgb8(img.to_rgb8())),
    }
}

/// Loads one split of a paired dataset, ordered by stem.
pub fn load_paired_dataset(
    root: &Path,
    split: Split,
    policy: ModalityPolicy,
    manifest: &DatasetManifest,
) -> Result<PairedDataset> {
    manifest.validate()?;
    let dir = manifest.split_dir(split);
    let vis = list_stems(&root.join("images/visible").join(dir), &IMAGE_EXTENSIONS)?;
    let ir = list_stems(&root.join("images/infrared").join(dir), &IMAGE_EXTENSIONS)?;
    let labels = list_stems(&root.join("labels").join(dir), &["txt"])?;

    let stems: BTreeSet<&String> = vis.keys().chain(ir.keys()).chain(labels.keys()).collect();
    let mut jobs = Vec::new();
    let mut exclusions = Vec::new();
    for stem in stems {
        let mut missing = Vec::new();
        if policy.needs(Modality::Rgb) && !vis.contains_key(stem) {
            missing.push("visible".to_string());
        }
        if policy.needs(Modality::Ir) && !ir.contains_key(stem) {
            missing.push("infrared".to_string());
        }
        if !labels.contains_key(stem) {
            missing.push("label".to_string());
        }
        if missing.is_empty() {
            jobs.push(stem.clone());
        } else {
            exclusions.push(Exclusion {
                stem: stem.clone(),
                missing,
            });
        }
    }
    for e in &exclusions {
        log::warn!("excluding {}: missing {}", e.stem, e.missing.join(", "));
    }

    let samples = jobs
        .par_iter()
        .map(|stem| -> Result<PairedSample> {
            let label_path = &labels[stem];
            let text = std::fs::read_to_string(label_path).map_err(|e| Error::io(label_path, e))?;
            let boxes = parse_labels(label_path, &text, manifest.num_classes)?;
            let rgb = if policy.needs(Modality::Rgb) {
                Some(DynamicImage::ImageRgb8(open_image(&vis[stem])?.to_rgb8()))
            } else {
                None
            };
            let ir_img = if policy.needs(Modality::Ir) {
                let p = &ir[stem];
                Some(normalize_ir(open_image(p)?, manifest.ir_channels, p)?)
            } else {
                None
            };
            Ok(PairedSample {
                image_id: stem.clone(),
                rgb,
                ir: ir_img,
                boxes,
                source_split: split,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PairedDataset {
        samples,
        exclusions,
        manifest: manifest.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AlignmentViolation {
    pub image_id: String,
    pub rgb: (u32, u32),
    pub ir: (u32, u32),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AlignmentReport {
    pub violations: Vec<AlignmentViolation>,
    /// Set when the dataset holds no samples at all.
    pub empty_dataset: bool,
}

impl AlignmentReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every pair whose modality sizes differ.
pub fn verify_alignment(samples: &[PairedSample]) -> AlignmentReport {
    let violations = samples
        .iter()
        .filter_map(|s| match (&s.rgb, &s.ir) {
            (Some(r), Some(i)) if r.dimensions() != i.dimensions() => Some(AlignmentViolation {
                image_id: s.image_id.clone(),
                rgb: r.dimensions(),
                ir: i.dimensions(),
            }),
            _ => None,
        })
        .collect();
    if samples.is_empty() {
        log::warn!("alignment check on an empty dataset");
    }
    AlignmentReport {
        violations,
        empty_dataset: samples.is_empty(),
    }
}

/// Stacks one modality of `samples` into an NCHW tensor scaled to [0, 1].
pub fn images_to_tensor(samples: &[&PairedSample], m: Modality, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    for s in samples {
        let img = s
            .image(m)
            .ok_or_else(|| Error::config(format!("sample {} lacks the {} modality", s.image_id, m.name())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let c = img.color().channel_count() as usize;
        match dims {
            None => dims = Some((c, h, w)),
            Some(d) if d != (c, h, w) => {
                return Err(Error::shape(
                    "batch",
                    format!("sample {} has shape {:?}, batch has {:?}", s.image_id, (c, h, w), d),
                ))
            }
            _ => {}
        }
        let bytes = img.as_bytes();
        for ch in 0..c {
            data.extend((0..h * w).map(|i| bytes[i * c + ch] as f32 / 255.0));
        }
    }
    let (c, h, w) = dims.ok_or_else(|| Error::Data("empty batch".into()))?;
    Ok(Tensor::from_vec(data, (samples.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Builds a model input holding every modality present in the samples.
pub fn batch_input(samples: &[&PairedSample], dtype: DType) -> Result<ModelInput> {
    let has = |m: Modality| samples.first().is_some_and(|s| s.image(m).is_some());
    let rgb = if has(Modality::Rgb) {
        Some(images_to_tensor(samples, Modality::Rgb, dtype)?)
    } else {
        None
    };
    let ir = if has(Modality::Ir) {
        Some(images_to_tensor(samples, Modality::Ir, dtype)?)
    } else {
        None
    };
    Ok(ModelInput { rgb, ir })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_centered_box() {
        let b = parse_labels(Path::new("a.txt"), "0 0.5 0.5 0.2 0.3\n", 3).unwrap();
        assert_eq!(
            b,
            vec![GroundTruthBox {
                class_id: 0,
                cx: 0.5,
                cy: 0.5,
                w: 0.2,
                h: 0.3
            }]
        );
    }

    #[test]
    fn empty_label_file_is_background() {
        assert!(parse_labels(Path::new("a.txt"), "", 3).unwrap().is_empty());
        assert!(parse_labels(Path::new("a.txt"), "\n  \n", 3).unwrap().is_empty());
    }

    #[test]
    fn bad_field_count_names_file_and_line() {
        let err = parse_labels(Path::new("x/b.txt"), "0 0.5 0.5 0.2 0.3\n1 0.5 0.5 0.2\n", 3).unwrap_err();
        match err {
            Error::Label { file, line, .. } => {
                assert_eq!(file, Path::new("x/b.txt"));
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(parse_labels(Path::new("a.txt"), "0 1.5 0.5 0.2 0.3", 3).is_err());
        assert!(parse_labels(Path::new("a.txt"), "0 0.5 0.5 0.0 0.3", 3).is_err());
        assert!(parse_labels(Path::new("a.txt"), "3 0.5 0.5 0.2 0.3", 3).is_err());
    }

    #[test]
    fn alignment_flags_mismatched_pair() {
        let mk = |id: &str, ir: (u32, u32)| PairedSample {
            image_id: id.into(),
            rgb: Some(DynamicImage::new_rgb8(640, 512)),
            ir: Some(DynamicImage::new_luma8(ir.0, ir.1)),
            boxes: vec![],
            source_split: Split::Train,
        };
        assert!(verify_alignment(&[mk("a", (640, 512))]).is_clean());
        let r = verify_alignment(&[mk("a", (640, 512)), mk("b", (320, 256))]);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].image_id, "b");
        let empty = verify_alignment(&[]);
        assert!(empty.is_clean() && empty.empty_dataset);
    }
}
