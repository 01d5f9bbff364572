//! Dataset splits on disk: one manifest per split, pixels regenerated on load.

use std::path::{Path, PathBuf};

use riskseg_core::synthdata::manifest::{parse_manifest, write_manifest};
use riskseg_core::synthdata::{make_split, regenerate, SampleRecord, SplitKind, SplitManifest};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone)]
pub struct Split {
    pub manifest: SplitManifest,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

pub fn manifest_path(dir: &Path, kind: SplitKind) -> PathBuf {
    dir.join(format!("{}.manifest", kind.name()))
}

fn split_size(cfg: &RunConfig, kind: SplitKind) -> usize {
    match kind {
        SplitKind::Train => cfg.n_train,
        SplitKind::Val => cfg.n_val,
        SplitKind::Test => cfg.n_test,
    }
}

fn data_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Data(e.to_string())
}

/// Generates one split in memory.
pub fn generate_split(cfg: &RunConfig, kind: SplitKind) -> Result<Split> {
    let (manifest, records) = make_split(split_size(cfg, kind).max(1), &cfg.scene_config(), cfg.data_seed, kind).map_err(data_err)?;
    Ok(Split { manifest, records })
}

pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_split(cfg, SplitKind::Train)?,
        val: generate_split(cfg, SplitKind::Val)?,
        test: generate_split(cfg, SplitKind::Test)?,
    })
}

pub fn write_manifests(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    for kind in SplitKind::ALL {
        let path = manifest_path(dir, kind);
        std::fs::write(&path, write_manifest(&ds.split(kind).manifest)).map_err(HarnessError::io(&path))?;
    }
    Ok(())
}

/// Reads a split manifest and regenerates its pixels.
pub fn load_split(dir: &Path, kind: SplitKind) -> Result<Split> {
    let path = manifest_path(dir, kind);
    let text = std::fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
    let manifest = parse_manifest(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    if manifest.split != kind {
        return Err(data_err(format!("{} holds the {} split", path.display(), manifest.split.name())));
    }
    let records = regenerate(&manifest).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    Ok(Split { manifest, records })
}

/// Loads the manifests in `dir` when present and consistent with `cfg`,
/// otherwise generates the dataset and writes them.
pub fn load_or_generate(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    let Some(dir) = dir else { return generate(cfg) };
    if !manifest_path(dir, SplitKind::Train).exists() {
        let ds = generate(cfg)?;
        write_manifests(&ds, dir)?;
        return Ok(ds);
    }
    let ds = Dataset {
        train: load_split(dir, SplitKind::Train)?,
        val: load_split(dir, SplitKind::Val)?,
        test: load_split(dir, SplitKind::Test)?,
    };
    for kind in SplitKind::ALL {
        let m = &ds.split(kind).manifest;
        if m.scene != cfg.scene_config() || m.base_seed != cfg.data_seed || m.entries.len() != split_size(cfg, kind).max(1) {
            return Err(data_err(format!(
                "manifests in {} were generated with a different scene config, data_seed or split size",
                dir.display()
            )));
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_reload_to_identical_records() {
        let cfg = RunConfig { n_train: 6, n_val: 3, n_test: 4, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let a = load_or_generate(&cfg, Some(dir.path())).unwrap();
        assert!(manifest_path(dir.path(), SplitKind::Test).exists());
        let b = load_or_generate(&cfg, Some(dir.path())).unwrap();
        assert_eq!(a.train.records, b.train.records);
        assert_eq!(a.test.records, b.test.records);
        let other = RunConfig { data_seed: 1, ..cfg };
        assert!(matches!(load_or_generate(&other, Some(dir.path())), Err(HarnessError::Data(_))));
    }
}
