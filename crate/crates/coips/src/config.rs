//! JSON pipeline configuration. Unknown keys are rejected so typos fail
//! fast instead of silently falling back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qa::QaTrainConfig;
use crate::seg::SegTrainConfig;
use crate::synthgen::SynthSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker pool size; `COIPS_THREADS` overrides, else all cores.
    pub threads: Option<usize>,
    /// Field of view in mm for images without per-image metadata.
    pub field_mm: f64,
    pub input_dir: Option<PathBuf>,
    pub input_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub classifier_checkpoint: Option<PathBuf>,
    pub segmenter_checkpoint: Option<PathBuf>,
    pub qa_train: QaTrainConfig,
    pub seg_train: SegTrainConfig,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            threads: None,
            field_mm: 3.0,
            input_dir: None,
            input_manifest: None,
            output_dir: PathBuf::from("coips_out"),
            classifier_checkpoint: None,
            segmenter_checkpoint: None,
            qa_train: QaTrainConfig::default(),
            seg_train: SegTrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.field_mm <= 0.0 {
            return Err(Error::Config(format!(
                "field_mm must be positive, got {}",
                self.field_mm
            )));
        }
        self.synth.validate()?;
        self.qa_train.net.validate()?;
        self.seg_train.net.validate()?;
        for (key, path) in [
            ("input_dir", &self.input_dir),
            ("input_manifest", &self.input_manifest),
            ("classifier_checkpoint", &self.classifier_checkpoint),
            ("segmenter_checkpoint", &self.segmenter_checkpoint),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{key} path does not exist: {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies a command-line seed override to every seeded component.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.qa_train.seed = seed;
        self.seg_train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn effective_threads(&self) -> Option<usize> {
        if let Ok(v) = std::env::var("COIPS_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n > 0 {
                    return Some(n);
                }
            }
        }
        self.threads
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: PipelineConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn emit_config(cfg: &PipelineConfig) -> Result<String> {
    serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
}
