use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::prototypes::HeadKind;

/// Where every artifact of a run lives, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join(crate::phantom::MANIFEST_FILE)
    }

    pub fn denoiser(&self) -> PathBuf {
        self.root.join("checkpoints/denoiser.ckpt")
    }

    pub fn diffusion_log(&self) -> PathBuf {
        self.root.join("checkpoints/diffusion_loss.csv")
    }

    pub fn extractor(&self) -> PathBuf {
        self.root.join("checkpoints/extractor.ckpt")
    }

    pub fn bank(&self, head: HeadKind) -> PathBuf {
        self.root.join(format!("banks/{head}.ckpt"))
    }

    pub fn head_report(&self, head: HeadKind) -> PathBuf {
        self.root.join(format!("banks/{head}_training.json"))
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn samples_index(&self) -> PathBuf {
        self.samples_dir().join("samples.json")
    }

    pub fn trajectory_dir(&self) -> PathBuf {
        self.root.join("trajectory")
    }

    pub fn explanations_dir(&self, head: HeadKind) -> PathBuf {
        self.root.join("explanations").join(head.name())
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn evaluation_json(&self) -> PathBuf {
        self.root.join("evaluation.json")
    }

    pub fn comparison_csv(&self) -> PathBuf {
        self.root.join("comparison.csv")
    }

    pub fn comparison_json(&self) -> PathBuf {
        self.root.join("comparison.json")
    }

    pub fn faithfulness_csv(&self) -> PathBuf {
        self.root.join("faithfulness_per_image.csv")
    }

    pub fn nis_csv(&self) -> PathBuf {
        self.root.join("nis_per_image.csv")
    }

    pub fn metric_summary_csv(&self) -> PathBuf {
        self.root.join("metric_summary.csv")
    }

    pub fn figures_dir(&self) -> PathBuf {
        self.root.join("figures")
    }
}

/// Fails with a missing-prerequisite error naming the command that makes `path`.
pub fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite { path: path.to_path_buf(), hint: format!("run `protodiff {producer}` first") })
    }
}
