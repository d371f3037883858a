use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::sha256_hex;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the artifact directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    /// Hashes the listed files. Entries are sorted and deduplicated.
    pub fn build(command: &str, config_hash: String, dir: &Path, mut files: Vec<String>) -> Result<Manifest> {
        files.sort();
        files.dedup();
        let files = files
            .into_iter()
            .map(|path| {
                let full = dir.join(&path);
                let bytes = std::fs::read(&full).map_err(|e| Error::io(format!("hashing {}", full.display()), e))?;
                Ok(FileEntry {
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                    path,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Manifest {
            command: command.into(),
            config_hash,
            files,
        })
    }

    /// Re-hashes every listed file and reports the first mismatch.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let bytes = std::fs::read(dir.join(&f.path)).map_err(|e| Error::io(format!("reading {}", f.path), e))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(Error::Validation(format!(
                    "{} does not match its manifest hash",
                    f.path
                )));
            }
        }
        Ok(())
    }
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`,
/// in which case its contents are removed first.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::AlreadyExists(dir.to_path_buf()));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(format!("clearing {}", dir.display()), e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Writes `bytes` to `dir/rel` and returns `rel`.
pub fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(rel.to_string())
}

pub fn write_json<T: Serialize + ?Sized>(dir: &Path, rel: &str, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(dir, rel, &bytes)
}
