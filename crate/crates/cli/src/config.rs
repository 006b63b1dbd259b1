//! Run configuration file.

use std::path::{Path, PathBuf};

use rgbt_core::data::{DatasetManifest, MANIFEST_FILE};
use rgbt_core::detector::{Modality, ModelSpec, Scale, Topology, DEFAULT_IOU, DEFAULT_PREDICT_CONF};
use rgbt_core::fusion::{FusionMode, DEFAULT_SCORE_MERGE_IOU};
use rgbt_core::mcf::AuxInit;
use rgbt_core::train::TrainConfig;
use rgbt_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: Scale,
    /// One of the seven fusion modes. Mutually exclusive with `modality`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_mode: Option<FusionMode>,
    /// Single-modality detector.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    pub reg_max: usize,
    pub score_merge_iou: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: Scale::N,
            fusion_mode: None,
            modality: None,
            reg_max: 16,
            score_merge_iou: DEFAULT_SCORE_MERGE_IOU,
        }
    }
}

impl ModelConfig {
    /// Mid fusion when neither key is set.
    pub fn topology(&self) -> Result<Topology> {
        match (self.fusion_mode, self.modality) {
            (Some(_), Some(_)) => Err(Error::Config("model: set either fusion_mode or modality, not both".into())),
            (Some(f), None) => Ok(Topology::Fused(f)),
            (None, Some(m)) => Ok(Topology::Single(m)),
            (None, None) => Ok(Topology::Fused(FusionMode::Mid)),
        }
    }

    pub fn set_fusion(&mut self, name: &str) -> Result<()> {
        match name.parse::<Modality>() {
            Ok(m) => {
                self.modality = Some(m);
                self.fusion_mode = None;
            }
            Err(_) => {
                self.fusion_mode = Some(name.parse()?);
                self.modality = None;
            }
        }
        Ok(())
    }

    pub fn spec(&self, num_classes: usize, ir_channels: usize) -> Result<ModelSpec> {
        let spec = ModelSpec::new(self.scale, num_classes, self.topology()?)
            .with_ir_channels(ir_channels)
            .with_reg_max(self.reg_max);
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub conf: f64,
    pub iou: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            conf: DEFAULT_PREDICT_CONF,
            iou: DEFAULT_IOU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McfConfig {
    pub primary: Modality,
    pub aux_init: AuxInit,
}

impl Default for McfConfig {
    fn default() -> Self {
        Self {
            primary: Modality::Rgb,
            aux_init: AuxInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    /// Defaults to `<dataset_root>/dataset.toml`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub nms: NmsConfig,
    #[serde(default)]
    pub mcf: McfConfig,
}

fn absolute(base: &Path, p: &Path) -> Result<PathBuf> {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    joined
        .canonicalize()
        .map_err(|e| Error::Config(format!("{}: {e}", joined.display())))
}

impl RunConfig {
    /// Parses a config file. Relative paths resolve against the file's
    /// directory and are stored absolute; referenced paths must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        cfg.dataset_root = absolute(base, &cfg.dataset_root)?;
        if let Some(m) = &cfg.manifest {
            cfg.manifest = Some(absolute(base, m)?);
        }
        if let Some(o) = &cfg.out_dir {
            if o.is_relative() {
                cfg.out_dir = Some(base.canonicalize().map_err(|e| Error::Config(e.to_string()))?.join(o));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset_root.is_dir() {
            return Err(Error::Config(format!("dataset_root {} is not a directory", self.dataset_root.display())));
        }
        let m = self.manifest_path();
        if !m.is_file() {
            return Err(Error::Config(format!("dataset manifest {} does not exist", m.display())));
        }
        self.model.topology()?;
        self.train.validate()?;
        for (name, v) in [("nms.conf", self.nms.conf), ("nms.iou", self.nms.iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.dataset_root.join(MANIFEST_FILE))
    }

    pub fn dataset_manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(&self.manifest_path())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Writes the effective config as `config.toml` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|source| Error::Io { path, source })
    }
}
