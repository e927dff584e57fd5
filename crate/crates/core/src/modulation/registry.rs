//! Persistent multi-domain modulation store.
//!
//! One file per domain plus an index file, all bound to a single backbone
//! fingerprint. Writes go through temp-file + atomic rename, so concurrent
//! readers never observe partial files and adding a domain leaves every
//! other entry byte-identical.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::ModulationSet;
use crate::error::{ModarError, Result};

static WRITE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write bytes to a temp file in the target directory, then rename over the
/// destination.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        WRITE_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub file: String,
    pub mode: super::ModulationMode,
    pub seed: u64,
    pub epochs: usize,
    pub final_val_psnr: f64,
    pub param_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryIndex {
    backbone_fingerprint: String,
    entries: BTreeMap<String, RegistryEntry>,
}

/// Directory-backed store mapping domain ids to modulation sets.
#[derive(Debug, Clone)]
pub struct DomainRegistry {
    root: PathBuf,
}

impl DomainRegistry {
    /// Create (or reopen) a registry rooted at `root` for one backbone.
    /// Reopening with a different fingerprint is refused.
    pub fn create(root: impl Into<PathBuf>, backbone_fingerprint: &str) -> Result<Self> {
        let root = root.into();
        let index_path = root.join("index.json");
        if index_path.exists() {
            let reg = DomainRegistry { root };
            let idx = reg.read_index()?;
            if idx.backbone_fingerprint != backbone_fingerprint {
                return Err(ModarError::FingerprintMismatch {
                    expected: idx.backbone_fingerprint,
                    got: backbone_fingerprint.to_string(),
                });
            }
            return Ok(reg);
        }
        std::fs::create_dir_all(root.join("domains"))?;
        let idx = RegistryIndex {
            backbone_fingerprint: backbone_fingerprint.to_string(),
            entries: BTreeMap::new(),
        };
        let reg = DomainRegistry { root };
        reg.write_index(&idx)?;
        Ok(reg)
    }

    /// Open an existing registry.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let reg = DomainRegistry { root };
        reg.read_index()?;
        Ok(reg)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn backbone_fingerprint(&self) -> Result<String> {
        Ok(self.read_index()?.backbone_fingerprint)
    }

    fn read_index(&self) -> Result<RegistryIndex> {
        let text = std::fs::read_to_string(self.root.join("index.json")).map_err(|e| {
            ModarError::Data(format!(
                "registry index not readable at {}: {e}",
                self.root.display()
            ))
        })?;
        serde_json::from_str(&text).map_err(|e| ModarError::Serde(e.to_string()))
    }

    fn write_index(&self, idx: &RegistryIndex) -> Result<()> {
        let text =
            serde_json::to_string_pretty(idx).map_err(|e| ModarError::Serde(e.to_string()))?;
        atomic_write(&self.root.join("index.json"), text.as_bytes())
    }

    fn domain_file(&self, domain_id: &str) -> PathBuf {
        // sanitize for the filesystem; the id itself is stored in the file
        let safe: String = domain_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.root.join("domains").join(format!("{safe}.json"))
    }

    /// Store a modulation set under its domain id (atomic; refuses sets bound
    /// to a different backbone).
    pub fn put(&self, set: &ModulationSet) -> Result<()> {
        let mut idx = self.read_index()?;
        if set.backbone_fingerprint != idx.backbone_fingerprint {
            return Err(ModarError::FingerprintMismatch {
                expected: idx.backbone_fingerprint.clone(),
                got: set.backbone_fingerprint.clone(),
            });
        }
        let file = self.domain_file(&set.domain_id);
        let text =
            serde_json::to_string_pretty(set).map_err(|e| ModarError::Serde(e.to_string()))?;
        atomic_write(&file, text.as_bytes())?;
        idx.entries.insert(
            set.domain_id.clone(),
            RegistryEntry {
                file: file
                    .file_name()
                    .unwrap()
                    .to_string_lossy()
                    .into_owned(),
                mode: set.mode,
                seed: set.meta.seed,
                epochs: set.meta.epochs,
                final_val_psnr: set.meta.final_val_psnr,
                param_count: set.param_count(),
            },
        );
        self.write_index(&idx)
    }

    /// Fetch a bit-exact copy of a stored modulation set, verifying it is
    /// bound to `expected_fingerprint`.
    pub fn get(&self, domain_id: &str, expected_fingerprint: &str) -> Result<ModulationSet> {
        let idx = self.read_index()?;
        let entry = idx.entries.get(domain_id).ok_or_else(|| ModarError::UnknownDomain {
            id: domain_id.to_string(),
            known: idx.entries.keys().cloned().collect::<Vec<_>>().join(", "),
        })?;
        let text = std::fs::read_to_string(self.root.join("domains").join(&entry.file))?;
        let set: ModulationSet =
            serde_json::from_str(&text).map_err(|e| ModarError::Serde(e.to_string()))?;
        if set.backbone_fingerprint != expected_fingerprint {
            return Err(ModarError::FingerprintMismatch {
                expected: expected_fingerprint.to_string(),
                got: set.backbone_fingerprint,
            });
        }
        Ok(set)
    }

    /// Domain ids with their stored metadata, sorted by id.
    pub fn list(&self) -> Result<Vec<(String, RegistryEntry)>> {
        Ok(self.read_index()?.entries.into_iter().collect())
    }
}
