//! Demonstration data: transitions, trajectories, datasets, segmentation and
//! the on-disk dataset format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic + version, ASCII "SWBTDS01"
//! 8       4     u32 metadata length M
//! 12      M     metadata JSON (dtype, role, dims, generator line, seed)
//! 12+M    4     u32 trajectory count
//! ...           trajectory records
//! end-32  32    SHA-256 over every preceding byte
//! ```
//!
//! Each trajectory record is: u32 transition count, u8 success flag, u16 tag
//! length + tag bytes, u64 episode seed, then the packed little-endian value
//! arrays (all observations, then all proprios, then all actions).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::util::sha256_raw;
use crate::{Dtype, Scalar};

const MAGIC: &[u8; 6] = b"SWBTDS";
const VERSION: &[u8; 2] = b"01";

/// Image observation dimensions: cameras x channels x height x width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsDims {
    pub cameras: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ObsDims {
    pub fn flat(&self) -> usize {
        self.cameras * self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub obs: ObsDims,
    pub proprio: usize,
    pub action: usize,
}

/// The desk-scale manipulation setup: two 2-channel 8x8 views, an
/// 8-dimensional proprio vector and a 3-dimensional action.
pub const DESK_DIMS: DataDims = DataDims {
    obs: ObsDims {
        cameras: 2,
        channels: 2,
        height: 8,
        width: 8,
    },
    proprio: 8,
    action: 3,
};

/// One environment step: multi-view observation (values in [0, 1]), proprio
/// vector (agent x/y, velocity x/y, gripper flag, goal x/y, held flag) and
/// the action taken (components in [-1, 1]).
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S: Scalar> {
    pub obs: Vec<S>,
    pub proprio: Vec<S>,
    pub action: Vec<S>,
}

/// An episode. `success` is set by the environment at rollout time and is
/// never recomputed downstream; `source_tag` names the generating policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S: Scalar> {
    pub transitions: Vec<Transition<S>>,
    pub success: bool,
    pub source_tag: String,
    pub episode_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Expert,
    Imperfect,
    Union,
    Filtered,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Expert => "expert",
            Role::Imperfect => "imperfect",
            Role::Union => "union",
            Role::Filtered => "filtered",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dtype: Dtype,
    pub role: Role,
    pub dims: DataDims,
    /// Human-readable generation provenance (policy level, knobs, episode
    /// count). Unions concatenate the inputs' lines.
    pub generator: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset<S: Scalar> {
    pub trajectories: Vec<Trajectory<S>>,
    pub role: Role,
    pub meta: DatasetMeta,
}

/// Where a segment came from: trajectory index within its dataset and the
/// start offset of the window (0 for padded segments).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOrigin {
    pub trajectory: usize,
    pub start: usize,
}

/// A fixed-length window of `l` transitions. Trajectories shorter than `l`
/// are left-padded by repeating their first transition; `padded_prefix`
/// counts those synthetic leading positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment<S: Scalar> {
    pub transitions: Vec<Transition<S>>,
    pub origin: SegmentOrigin,
    pub padded_prefix: usize,
}

/// Index-only segment handle; resolves against its dataset on demand so
/// samplers never clone transition data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentRef {
    pub trajectory: usize,
    pub start: usize,
    pub padded_prefix: usize,
}

impl SegmentRef {
    pub fn origin(&self) -> SegmentOrigin {
        SegmentOrigin {
            trajectory: self.trajectory,
            start: self.start,
        }
    }
}

#[derive(Debug)]
pub enum DataError {
    EmptyTrajectory,
    EmptyDataset,
    BadWindow {
        l: usize,
    },
    /// Dataset declared expert but contains a failed episode.
    ExpertContainsFailure {
        trajectory: usize,
    },
    RoleMismatch {
        expected: Role,
        got: Role,
    },
    DimsMismatch,
    /// A transition's buffer length does not match the declared dims.
    WrongArity {
        trajectory: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    /// A value violates its documented range or is not finite.
    ValueOutOfRange {
        trajectory: usize,
        field: &'static str,
        value: f64,
    },
    Io(std::io::Error),
    VersionMismatch {
        found: String,
    },
    Truncated {
        needed: usize,
        have: usize,
    },
    ChecksumMismatch,
    DtypeMismatch {
        expected: Dtype,
        found: Dtype,
    },
    Malformed(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::EmptyTrajectory => write!(f, "trajectory has no transitions"),
            DataError::EmptyDataset => write!(f, "dataset has no trajectories"),
            DataError::BadWindow { l } => write!(f, "segment window length {l} must be positive"),
            DataError::ExpertContainsFailure { trajectory } => {
                write!(f, "expert dataset contains failed trajectory {trajectory}")
            }
            DataError::RoleMismatch { expected, got } => {
                write!(f, "expected a {expected} dataset, got {got}")
            }
            DataError::DimsMismatch => write!(f, "datasets have different dims"),
            DataError::WrongArity {
                trajectory,
                field,
                expected,
                got,
            } => write!(
                f,
                "trajectory {trajectory}: {field} has {got} values, dims say {expected}"
            ),
            DataError::ValueOutOfRange {
                trajectory,
                field,
                value,
            } => write!(f, "trajectory {trajectory}: {field} value {value} out of range"),
            DataError::Io(e) => write!(f, "dataset io: {e}"),
            DataError::VersionMismatch { found } => {
                write!(f, "not a supported dataset header: {found:?}")
            }
            DataError::Truncated { needed, have } => {
                write!(f, "dataset truncated: need {needed} bytes, have {have}")
            }
            DataError::ChecksumMismatch => write!(f, "dataset checksum mismatch"),
            DataError::DtypeMismatch { expected, found } => {
                write!(f, "dataset dtype {found}, expected {expected}")
            }
            DataError::Malformed(m) => write!(f, "malformed dataset: {m}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

impl<S: Scalar> DemoDataset<S> {
    /// Validates role and value invariants on construction: expert datasets
    /// hold only successes, observations sit in [0, 1], actions in [-1, 1],
    /// everything finite, buffer lengths match dims.
    pub fn new(
        trajectories: Vec<Trajectory<S>>,
        role: Role,
        meta: DatasetMeta,
    ) -> Result<Self, DataError> {
        for (ti, traj) in trajectories.iter().enumerate() {
            if traj.transitions.is_empty() {
                return Err(DataError::EmptyTrajectory);
            }
            if role == Role::Expert && !traj.success {
                return Err(DataError::ExpertContainsFailure { trajectory: ti });
            }
            for tr in &traj.transitions {
                check_arity(ti, "obs", meta.dims.obs.flat(), tr.obs.len())?;
                check_arity(ti, "proprio", meta.dims.proprio, tr.proprio.len())?;
                check_arity(ti, "action", meta.dims.action, tr.action.len())?;
                check_range(ti, "obs", &tr.obs, 0.0, 1.0)?;
                check_finite(ti, "proprio", &tr.proprio)?;
                check_range(ti, "action", &tr.action, -1.0, 1.0)?;
            }
        }
        Ok(DemoDataset {
            trajectories,
            role,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }

    /// Resolves a segment handle to `l` transition references, repeating the
    /// first transition for the padded prefix.
    pub fn resolve(&self, r: &SegmentRef, l: usize) -> Vec<&Transition<S>> {
        let traj = &self.trajectories[r.trajectory];
        let mut out = Vec::with_capacity(l);
        for _ in 0..r.padded_prefix {
            out.push(&traj.transitions[r.start]);
        }
        for i in 0..l - r.padded_prefix {
            out.push(&traj.transitions[r.start + i]);
        }
        out
    }
}

fn check_arity(
    trajectory: usize,
    field: &'static str,
    expected: usize,
    got: usize,
) -> Result<(), DataError> {
    if expected != got {
        return Err(DataError::WrongArity {
            trajectory,
            field,
            expected,
            got,
        });
    }
    Ok(())
}

fn check_range<S: Scalar>(
    trajectory: usize,
    field: &'static str,
    values: &[S],
    lo: f64,
    hi: f64,
) -> Result<(), DataError> {
    for v in values {
        let x = v.as_f64();
        if !x.is_finite() || x < lo || x > hi {
            return Err(DataError::ValueOutOfRange {
                trajectory,
                field,
                value: x,
            });
        }
    }
    Ok(())
}

fn check_finite<S: Scalar>(
    trajectory: usize,
    field: &'static str,
    values: &[S],
) -> Result<(), DataError> {
    for v in values {
        let x = v.as_f64();
        if !x.is_finite() {
            return Err(DataError::ValueOutOfRange {
                trajectory,
                field,
                value: x,
            });
        }
    }
    Ok(())
}

/// All length-`l` windows of a trajectory at stride 1. A trajectory shorter
/// than `l` yields exactly one segment, left-padded by repeating its first
/// transition; the padding never reorders or drops real transitions.
pub fn segment<S: Scalar>(
    traj: &Trajectory<S>,
    trajectory_id: usize,
    l: usize,
) -> Result<Vec<TrajectorySegment<S>>, DataError> {
    let refs = segment_refs_one(traj, trajectory_id, l)?;
    let out = refs
        .into_iter()
        .map(|r| {
            let mut transitions = Vec::with_capacity(l);
            for _ in 0..r.padded_prefix {
                transitions.push(traj.transitions[r.start].clone());
            }
            for i in 0..l - r.padded_prefix {
                transitions.push(traj.transitions[r.start + i].clone());
            }
            TrajectorySegment {
                transitions,
                origin: r.origin(),
                padded_prefix: r.padded_prefix,
            }
        })
        .collect();
    Ok(out)
}

fn segment_refs_one<S: Scalar>(
    traj: &Trajectory<S>,
    trajectory_id: usize,
    l: usize,
) -> Result<Vec<SegmentRef>, DataError> {
    if l == 0 {
        return Err(DataError::BadWindow { l });
    }
    let t = traj.transitions.len();
    if t == 0 {
        return Err(DataError::EmptyTrajectory);
    }
    if t >= l {
        Ok((0..=t - l)
            .map(|start| SegmentRef {
                trajectory: trajectory_id,
                start,
                padded_prefix: 0,
            })
            .collect())
    } else {
        Ok(vec![SegmentRef {
            trajectory: trajectory_id,
            start: 0,
            padded_prefix: l - t,
        }])
    }
}

/// Segment handles for every trajectory of a dataset, in trajectory order
/// then start order.
pub fn segment_refs<S: Scalar>(ds: &DemoDataset<S>, l: usize) -> Result<Vec<SegmentRef>, DataError> {
    if ds.trajectories.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut out = Vec::new();
    for (ti, traj) in ds.trajectories.iter().enumerate() {
        out.extend(segment_refs_one(traj, ti, l)?);
    }
    Ok(out)
}

/// Merges an expert and an imperfect dataset into one union dataset for
/// pretraining. Trajectories keep their source tags; expert episodes come
/// first. Roles are checked strictly.
pub fn union<S: Scalar>(
    expert: &DemoDataset<S>,
    imperfect: &DemoDataset<S>,
) -> Result<DemoDataset<S>, DataError> {
    if expert.role != Role::Expert {
        return Err(DataError::RoleMismatch {
            expected: Role::Expert,
            got: expert.role,
        });
    }
    if imperfect.role != Role::Imperfect {
        return Err(DataError::RoleMismatch {
            expected: Role::Imperfect,
            got: imperfect.role,
        });
    }
    if expert.meta.dims != imperfect.meta.dims {
        return Err(DataError::DimsMismatch);
    }
    let mut trajectories = expert.trajectories.clone();
    trajectories.extend(imperfect.trajectories.iter().cloned());
    let meta = DatasetMeta {
        dtype: S::DTYPE,
        role: Role::Union,
        dims: expert.meta.dims,
        generator: format!(
            "union(expert: {} [seed {}]; imperfect: {} [seed {}])",
            expert.meta.generator, expert.meta.seed, imperfect.meta.generator, imperfect.meta.seed
        ),
        seed: 0,
    };
    DemoDataset::new(trajectories, Role::Union, meta)
}

pub fn save_dataset<S: Scalar>(path: &Path, ds: &DemoDataset<S>) -> Result<(), DataError> {
    let mut meta = ds.meta.clone();
    meta.dtype = S::DTYPE;
    meta.role = ds.role;
    let mjson = serde_json::to_vec(&meta).map_err(|e| DataError::Malformed(e.to_string()))?;
    let elem = S::DTYPE.size();
    let payload: usize = ds
        .trajectories
        .iter()
        .map(|t| {
            4 + 1 + 2 + t.source_tag.len() + 8
                + t.transitions.len() * (meta.dims.obs.flat() + meta.dims.proprio + meta.dims.action) * elem
        })
        .sum();
    let mut bytes = Vec::with_capacity(8 + 4 + mjson.len() + 4 + payload + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(VERSION);
    bytes.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&mjson);
    bytes.extend_from_slice(&(ds.trajectories.len() as u32).to_le_bytes());
    for traj in &ds.trajectories {
        bytes.extend_from_slice(&(traj.transitions.len() as u32).to_le_bytes());
        bytes.push(u8::from(traj.success));
        let tag = traj.source_tag.as_bytes();
        bytes.extend_from_slice(&(tag.len() as u16).to_le_bytes());
        bytes.extend_from_slice(tag);
        bytes.extend_from_slice(&traj.episode_seed.to_le_bytes());
        for tr in &traj.transitions {
            for v in &tr.obs {
                v.write_le(&mut bytes);
            }
        }
        for tr in &traj.transitions {
            for v in &tr.proprio {
                v.write_le(&mut bytes);
            }
        }
        for tr in &traj.transitions {
            for v in &tr.action {
                v.write_le(&mut bytes);
            }
        }
    }
    let digest = sha256_raw(&bytes);
    bytes.extend_from_slice(&digest);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset<S: Scalar>(path: &Path) -> Result<DemoDataset<S>, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(DataError::Truncated {
            needed: 12,
            have: bytes.len(),
        });
    }
    if &bytes[0..6] != MAGIC || &bytes[6..8] != VERSION {
        return Err(DataError::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[0..8]).into_owned(),
        });
    }
    // Checksum first: all structural errors below then refer to intact data.
    if bytes.len() < 44 {
        return Err(DataError::Truncated {
            needed: 44,
            have: bytes.len(),
        });
    }
    let content_end = bytes.len() - 32;
    let digest = sha256_raw(&bytes[..content_end]);
    if digest != bytes[content_end..] {
        // A short read can also land here if the tail was cut exactly at a
        // record boundary; disambiguate by re-checking declared sizes below
        // only when the digest matches. A corrupted byte anywhere shows up
        // as a checksum failure, a missing tail as truncation.
        return match declared_size(&bytes) {
            Some(needed) if needed > bytes.len() => Err(DataError::Truncated {
                needed,
                have: bytes.len(),
            }),
            Some(_) => Err(DataError::ChecksumMismatch),
            // The length walk itself ran off the end: structure incomplete.
            None => Err(DataError::Truncated {
                needed: bytes.len() + 1,
                have: bytes.len(),
            }),
        };
    }
    let mut r = Cursor::new(&bytes[..content_end], 8);
    let mlen = r.u32()? as usize;
    let mbytes = r.take(mlen)?;
    let meta: DatasetMeta =
        serde_json::from_slice(mbytes).map_err(|e| DataError::Malformed(e.to_string()))?;
    if meta.dtype != S::DTYPE {
        return Err(DataError::DtypeMismatch {
            expected: S::DTYPE,
            found: meta.dtype,
        });
    }
    let elem = S::DTYPE.size();
    let n_traj = r.u32()? as usize;
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let t = r.u32()? as usize;
        let success = r.u8()? != 0;
        let tag_len = r.u16()? as usize;
        let tag = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|e| DataError::Malformed(e.to_string()))?;
        let episode_seed = r.u64()?;
        let read_block = |r: &mut Cursor, n: usize| -> Result<Vec<Vec<S>>, DataError> {
            let mut rows = Vec::with_capacity(t);
            for _ in 0..t {
                let raw = r.take(n * elem)?;
                let mut row = Vec::with_capacity(n);
                for i in 0..n {
                    row.push(S::read_le(&raw[i * elem..(i + 1) * elem]));
                }
                rows.push(row);
            }
            Ok(rows)
        };
        let obs = read_block(&mut r, meta.dims.obs.flat())?;
        let proprio = read_block(&mut r, meta.dims.proprio)?;
        let action = read_block(&mut r, meta.dims.action)?;
        let transitions = obs
            .into_iter()
            .zip(proprio)
            .zip(action)
            .map(|((o, p), a)| Transition {
                obs: o,
                proprio: p,
                action: a,
            })
            .collect();
        trajectories.push(Trajectory {
            transitions,
            success,
            source_tag: tag,
            episode_seed,
        });
    }
    if r.pos != content_end {
        return Err(DataError::Malformed(format!(
            "{} unread bytes after last trajectory",
            content_end - r.pos
        )));
    }
    let role = meta.role;
    DemoDataset::new(trajectories, role, meta)
}

/// Walks the length fields of an (unchecked) file image and returns the total
/// size it claims, including the digest. None if the walk itself runs out.
fn declared_size(bytes: &[u8]) -> Option<usize> {
    let mut r = Cursor::new(bytes, 8);
    let mlen = r.u32().ok()? as usize;
    let mbytes = r.take(mlen).ok()?;
    let meta: DatasetMeta = serde_json::from_slice(mbytes).ok()?;
    let elem = meta.dtype.size();
    let per = meta.dims.obs.flat() + meta.dims.proprio + meta.dims.action;
    let n_traj = r.u32().ok()? as usize;
    for _ in 0..n_traj {
        let t = r.u32().ok()? as usize;
        r.take(1).ok()?;
        let tag_len = r.u16().ok()? as usize;
        r.take(tag_len + 8).ok()?;
        r.take(t * per * elem).ok()?;
    }
    Some(r.pos + 32)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Cursor { bytes, pos }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated {
                needed: self.pos + n,
                have: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DataError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}
