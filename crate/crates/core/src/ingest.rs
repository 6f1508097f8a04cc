//! Binary trial container.
//!
//! ```text
//! offset  size            field
//! 0       8               magic "EDAPTC01"
//! 8       4               n_subjects (u32)
//! 12      8 * n_subjects  per subject: subject_id (u32), n_trials (u32)
//! ..      4               C  channels   (u32)
//! ..      4               T  timepoints (u32)
//! ..      4               K  classes    (u32)
//! ..      4               fs sampling rate (f32)
//! ..      4 * N           labels, one u32 per trial, subject-major
//! ..      4 * N * C * T   samples, f32, layout [subject][trial][channel][time]
//! ```
//!
//! All values are little-endian; `N` is the total trial count. The trial
//! order in the file is the online session order.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{PopulationDataset, Subject, Trial};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EDAPTC01";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated: header declares {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing bytes: header declares {expected} bytes, file has {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("label {label} >= {classes} classes (subject {subject}, trial {trial})")]
    LabelOutOfRange {
        subject: u32,
        trial: usize,
        label: u32,
        classes: u32,
    },
    #[error("dataset has no subjects")]
    Empty,
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Encodes a dataset to container bytes after validating it.
pub fn encode(dataset: &PopulationDataset) -> Result<Vec<u8>, ContainerError> {
    if dataset.subjects.is_empty() {
        return Err(ContainerError::Empty);
    }
    let (c, t, k) = (dataset.n_channels, dataset.n_timepoints, dataset.n_classes);
    let n = dataset.n_trials();
    let mut out =
        Vec::with_capacity(expected_len(dataset.subjects.len() as u64, n as u64, c as u64, t as u64) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dataset.subjects.len() as u32).to_le_bytes());
    for s in &dataset.subjects {
        out.extend_from_slice(&s.id.to_le_bytes());
        out.extend_from_slice(&(s.trials.len() as u32).to_le_bytes());
    }
    for v in [c as u32, t as u32, k as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&dataset.sampling_rate.to_le_bytes());
    for s in &dataset.subjects {
        for (i, trial) in s.trials.iter().enumerate() {
            if trial.label >= k {
                return Err(ContainerError::LabelOutOfRange {
                    subject: s.id,
                    trial: i,
                    label: trial.label as u32,
                    classes: k as u32,
                });
            }
            out.extend_from_slice(&(trial.label as u32).to_le_bytes());
        }
    }
    for s in &dataset.subjects {
        for (i, trial) in s.trials.iter().enumerate() {
            if trial.data.shape() != [c, t] {
                return Err(ContainerError::Inconsistent(format!(
                    "subject {} trial {i} has shape {:?}, expected [{c}, {t}]",
                    s.id,
                    trial.data.shape()
                )));
            }
            for v in trial.data.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn expected_len(subjects: u64, trials: u64, c: u64, t: u64) -> u64 {
    8 + 4 + 8 * subjects + 16 + 4 * trials * (1 + c * t)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32, ContainerError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or(ContainerError::Truncated {
                expected: self.pos as u64 + 4,
                actual: self.bytes.len() as u64,
            })?;
        self.pos += 4;
        Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
    }
}

/// Decodes and validates container bytes.
pub fn decode(bytes: &[u8]) -> Result<PopulationDataset, ContainerError> {
    let actual = bytes.len() as u64;
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 8 };
    let n_subjects = cur.u32()?;
    if n_subjects == 0 {
        return Err(ContainerError::Empty);
    }
    // Bound the header read by the file size before allocating.
    let header_end = 12 + 8 * n_subjects as u64 + 16;
    if header_end > actual {
        return Err(ContainerError::Truncated {
            expected: header_end,
            actual,
        });
    }
    let mut records = Vec::with_capacity(n_subjects as usize);
    for _ in 0..n_subjects {
        records.push((cur.u32()?, cur.u32()?));
    }
    let c = cur.u32()?;
    let t = cur.u32()?;
    let k = cur.u32()?;
    let fs = f32::from_bits(cur.u32()?);
    let n_trials: u64 = records.iter().map(|&(_, n)| n as u64).sum();
    let expected = (c as u64)
        .checked_mul(t as u64)
        .and_then(|ct| ct.checked_add(1))
        .and_then(|per| per.checked_mul(4 * n_trials))
        .and_then(|body| body.checked_add(header_end))
        .ok_or(ContainerError::Inconsistent("declared sizes overflow".into()))?;
    if actual < expected {
        return Err(ContainerError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(ContainerError::TrailingBytes { expected, actual });
    }
    if c == 0 || t == 0 {
        return Err(ContainerError::Inconsistent("zero channels or timepoints".into()));
    }
    let mut labels = Vec::with_capacity(n_trials as usize);
    for &(id, n) in &records {
        for i in 0..n as usize {
            let label = cur.u32()?;
            if label >= k {
                return Err(ContainerError::LabelOutOfRange {
                    subject: id,
                    trial: i,
                    label,
                    classes: k,
                });
            }
            labels.push(label as usize);
        }
    }
    let per_trial = (c * t) as usize;
    let mut body = bytes[cur.pos..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    let mut label_iter = labels.into_iter();
    let mut subjects = Vec::with_capacity(records.len());
    for &(id, n) in &records {
        let mut trials = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let data: Vec<f32> = body.by_ref().take(per_trial).collect();
            let label = label_iter.next().expect("label count checked");
            trials.push(Trial {
                data: Tensor::new(vec![c as usize, t as usize], data)
                    .map_err(|e| ContainerError::Inconsistent(e.to_string()))?,
                label,
            });
        }
        subjects.push(Subject { id, trials });
    }
    Ok(PopulationDataset {
        subjects,
        n_channels: c as usize,
        n_timepoints: t as usize,
        n_classes: k as usize,
        sampling_rate: fs,
    })
}

pub fn write_container(dataset: &PopulationDataset, path: &Path) -> Result<(), ContainerError> {
    let bytes = encode(dataset)?;
    std::fs::write(path, bytes).map_err(|source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_container(path: &Path) -> Result<PopulationDataset, ContainerError> {
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
