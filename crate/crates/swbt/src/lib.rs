//! Offline imitation learning from mixed-quality demonstrations.
//!
//! The pipeline has three stages that share one transformer over
//! (observation, proprioception, action) token triples:
//!
//! 1. self-supervised pretraining on every demonstration, labels unused
//!    (masked-slot prediction + reconstruction + causal action prediction),
//! 2. quality scoring of imperfect demonstrations by feature-space
//!    similarity to expert segments,
//! 3. behavior cloning on expert data plus quality-weighted filtered data.
//!
//! Everything is generic over the float type through [`Scalar`]; `f64` is the
//! verification profile (gradient checks, oracle tests), `f32` the training
//! profile. Concrete aliases live at the crate root.

use std::fmt;

pub mod cli;
pub mod datamodel;
pub mod envsim;
pub mod finetune;
pub mod numcore;
pub mod pretrain;
pub mod scoring;
pub mod transformer;
pub mod util;

/// Element type of every tensor, dataset and environment value.
///
/// `from_f64`/`as_f64` are infallible lossy conversions used at profile
/// boundaries (configs and reports are always `f64`). The byte methods fix
/// little-endian order for the on-disk formats.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// On-disk element type tag for checkpoints and datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type Tensor32 = numcore::Tensor<f32>;
pub type Tensor64 = numcore::Tensor<f64>;
pub type Graph32 = numcore::Graph<f32>;
pub type Graph64 = numcore::Graph<f64>;
pub type Model32 = transformer::SwbtModel<f32>;
pub type Model64 = transformer::SwbtModel<f64>;
pub type Dataset32 = datamodel::DemoDataset<f32>;
pub type Dataset64 = datamodel::DemoDataset<f64>;
