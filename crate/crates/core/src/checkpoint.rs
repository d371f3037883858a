//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `NBCK` |
//! | 4     | format version (`u32`, currently 1) |
//! | 8     | manifest length `n` (`u64`) |
//! | n     | UTF-8 JSON [`CheckpointHeader`] |
//! | 8·k·p | `k` vectors of `p` `f64` values each |
//!
//! `p` is the total size of the parameter manifest. A model checkpoint holds
//! one vector; a trajectory holds the initial parameters followed by one
//! vector per epoch.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MlpModel, ParamShape, Task};

pub const MAGIC: &[u8; 4] = b"NBCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub task: Task,
    pub params: Vec<ParamShape>,
    pub vectors: usize,
}

impl CheckpointHeader {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamShape::len).sum()
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, header: &CheckpointHeader, vectors: &[Vec<f64>]) -> Result<()> {
    let p = header.param_count();
    if vectors.len() != header.vectors || vectors.iter().any(|v| v.len() != p) {
        return Err(Error::Dimension(format!(
            "header promises {} vectors of {p} values",
            header.vectors
        )));
    }
    let json = serde_json::to_vec(header)?;
    let io = |e| Error::io("writing checkpoint", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(8 * p);
    for v in vectors {
        buf.clear();
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, Vec<Vec<f64>>)> {
    let io = |e| Error::io("reading checkpoint", e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Validation("not a checkpoint file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Validation(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let p = header.param_count();
    let mut raw = vec![0u8; 8 * p];
    let mut vectors = Vec::with_capacity(header.vectors);
    for _ in 0..header.vectors {
        r.read_exact(&mut raw).map_err(io)?;
        vectors.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    Ok((header, vectors))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    Ok(std::io::BufWriter::new(f))
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(std::io::BufReader::new(f))
}

pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Model,
        task: model.task(),
        params: model.manifest(),
        vectors: 1,
    };
    write_checkpoint(create(path)?, &header, &[model.params_flat()])
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let (h, v) = read_checkpoint(open(path)?)?;
    if h.kind != CheckpointKind::Model {
        return Err(Error::Validation(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    MlpModel::from_manifest(&h.params, &v[0], h.task)
}

/// Parameter vectors of one run: `initial` then one per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: Task,
    pub manifest: Vec<ParamShape>,
    pub initial: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(task: Task, manifest: Vec<ParamShape>, initial: Vec<f64>, snapshots: Vec<Vec<f64>>) -> Result<Self> {
        let p: usize = manifest.iter().map(ParamShape::len).sum();
        if initial.len() != p || snapshots.iter().any(|s| s.len() != p) {
            return Err(Error::Dimension(format!("trajectory vectors must all have {p} values")));
        }
        Ok(Trajectory {
            task,
            manifest,
            initial,
            snapshots,
        })
    }

    pub fn final_params(&self) -> &[f64] {
        self.snapshots.last().map_or(&self.initial, Vec::as_slice)
    }

    /// Initial vector followed by the per-epoch snapshots.
    pub fn all(&self) -> Vec<&[f64]> {
        std::iter::once(self.initial.as_slice())
            .chain(self.snapshots.iter().map(Vec::as_slice))
            .collect()
    }

    pub fn model_at(&self, params: &[f64]) -> Result<MlpModel> {
        MlpModel::from_manifest(&self.manifest, params, self.task)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut vectors = vec![self.initial.clone()];
        vectors.extend(self.snapshots.iter().cloned());
        let header = CheckpointHeader {
            kind: CheckpointKind::Trajectory,
            task: self.task,
            params: self.manifest.clone(),
            vectors: vectors.len(),
        };
        write_checkpoint(create(path)?, &header, &vectors)
    }

    pub fn load(path: &Path) -> Result<Trajectory> {
        let (h, mut v) = read_checkpoint(open(path)?)?;
        if h.kind != CheckpointKind::Trajectory || v.is_empty() {
            return Err(Error::Validation(format!(
                "{} is not a trajectory file",
                path.display()
            )));
        }
        let initial = v.remove(0);
        Trajectory::new(h.task, h.params, initial, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_in_memory() {
        let m = MlpModel::init(3, &[4], Task::Classification { classes: 2 }, &mut Rng::new(0)).unwrap();
        let header = CheckpointHeader {
            kind: CheckpointKind::Model,
            task: m.task(),
            params: m.manifest(),
            vectors: 1,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &header, &[m.params_flat()]).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let (h, v) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(MlpModel::from_manifest(&h.params, &v[0], h.task).unwrap(), m);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            read_checkpoint(&b"XXXX\x01\0\0\0"[..]),
            Err(Error::Validation(_))
        ));
    }
}
