use std::path::{Path, PathBuf};

/// Artifact layout inside a run directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: PathBuf) -> Self {
        Workdir { root }
    }

    pub fn run_config(&self) -> PathBuf {
        self.root.join("run_config.json")
    }

    pub fn env(&self) -> PathBuf {
        self.root.join("env.json")
    }

    pub fn demos(&self) -> PathBuf {
        self.root.join("demos.jsonl")
    }

    pub fn comparisons(&self, k: usize) -> PathBuf {
        self.root.join(format!("comp_k{k}.jsonl"))
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join("splits.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.json"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn oracle(&self, name: &str) -> PathBuf {
        self.root.join("oracle").join(name)
    }

    pub fn eval(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(format!("{name}.json"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// `path` relative to the root when possible, for portable reports.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}
