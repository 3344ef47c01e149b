//! Fixed relative layout of everything the pipeline writes under `--out`.

use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Effective config of the last command, `config.json`.
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn manifest(&self) -> PathBuf {
        self.corpus_dir().join("manifest.json")
    }

    pub fn aligned_dir(&self) -> PathBuf {
        self.root.join("aligned")
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(stage)
    }

    pub fn loss_log(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}_loss.csv"))
    }

    pub fn generated_dir(&self) -> PathBuf {
        self.root.join("generated")
    }

    pub fn generated_index(&self) -> PathBuf {
        self.generated_dir().join("index.json")
    }

    pub fn generated_signal(&self, pair_id: &str, seed: u64) -> PathBuf {
        self.generated_dir().join(generated_file_name(pair_id, seed))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report").join("report.json")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }
}

pub fn generated_file_name(pair_id: &str, seed: u64) -> String {
    format!("{pair_id}__seed{seed}.vts")
}
