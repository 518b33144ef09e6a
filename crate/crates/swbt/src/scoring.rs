//! Stage 2: score imperfect segments by feature similarity to the expert set.
//!
//! Every segment is pushed through the pretrained trunk bidirectionally with
//! nothing masked; its per-modality features (by default the last timestep
//! only) are compared against every expert segment's features. The best
//! similarity becomes the segment's raw weight, weights are min-max
//! normalized into quality scores on [0,1], and a strict threshold picks the
//! reserved set that fine-tuning is allowed to learn from.
//!
//! All similarity arithmetic runs in `f64` regardless of the model's scalar
//! type, so keep/drop decisions are identical across training profiles.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    segment_refs, DataError, DemoDataset, SegmentOrigin, SegmentRef, TrajectorySegment,
};
use crate::numcore::Graph;
use crate::transformer::{BatchItem, SegmentBatch, Slot, SwbtModel, TokenMaskSpec, TransformerError};
use crate::util::fmt_f64;
use crate::Scalar;

/// Bin count of the persisted score-distribution histogram.
pub const SCORE_HISTOGRAM_BINS: usize = 20;

/// Segments scored per forward pass during feature extraction.
const EXTRACT_CHUNK: usize = 32;

#[derive(Debug)]
pub enum ScoringError {
    EmptyExpertSet,
    ShapeMismatch,
    ZeroVector,
    BadBeta(f64),
    BadTableRow { trajectory: usize, start: usize },
    Parse(String),
    Transformer(TransformerError),
    Data(DataError),
    Io(io::Error),
}

impl fmt::Display for ScoringError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoringError::EmptyExpertSet => write!(f, "expert set has no segments to match against"),
            ScoringError::ShapeMismatch => write!(f, "feature vectors have mismatched shapes"),
            ScoringError::ZeroVector => {
                write!(f, "cosine similarity is undefined for a zero feature vector")
            }
            ScoringError::BadBeta(b) => write!(f, "threshold {b} is outside [0, 1]"),
            ScoringError::BadTableRow { trajectory, start } => write!(
                f,
                "quality row (trajectory {trajectory}, start {start}) does not match the dataset"
            ),
            ScoringError::Parse(detail) => write!(f, "malformed quality table: {detail}"),
            ScoringError::Transformer(e) => write!(f, "feature extraction failed: {e}"),
            ScoringError::Data(e) => write!(f, "dataset error: {e}"),
            ScoringError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for ScoringError {}

impl From<TransformerError> for ScoringError {
    fn from(e: TransformerError) -> Self {
        ScoringError::Transformer(e)
    }
}

impl From<DataError> for ScoringError {
    fn from(e: DataError) -> Self {
        ScoringError::Data(e)
    }
}

impl From<io::Error> for ScoringError {
    fn from(e: io::Error) -> Self {
        ScoringError::Io(e)
    }
}

/// Which trunk outputs represent a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureScope {
    /// Features at the final timestep only (the shipped default).
    LastStep,
    /// All `l` timesteps concatenated per modality (ablation alternative).
    WholeSegment,
}

/// How two feature triples are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMetric {
    /// Sum over modalities of the negative Euclidean distance. Always <= 0,
    /// 0 exactly when the features coincide.
    NegL2,
    /// Sum over modalities of the cosine similarity, in [-3, 3]. Errors on a
    /// zero vector.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub scope: FeatureScope,
    pub metric: SimilarityMetric,
    /// Quality threshold: a segment is reserved when q > beta, strictly.
    pub beta: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            scope: FeatureScope::LastStep,
            metric: SimilarityMetric::NegL2,
            beta: 0.9,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        check_beta(self.beta)
    }
}

fn check_beta(beta: f64) -> Result<(), ScoringError> {
    if !(0.0..=1.0).contains(&beta) || beta.is_nan() {
        return Err(ScoringError::BadBeta(beta));
    }
    Ok(())
}

/// Per-modality feature vectors for one segment, always `f64`. Under
/// last-step scope each vector has `d_model` entries; under whole-segment
/// scope, `l * d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub obs: Vec<f64>,
    pub prop: Vec<f64>,
    pub act: Vec<f64>,
}

fn slice_features<S: Scalar>(
    z: &[S],
    seg: usize,
    l: usize,
    d: usize,
    scope: FeatureScope,
) -> ModalityFeatures {
    let steps = match scope {
        FeatureScope::LastStep => (l - 1)..l,
        FeatureScope::WholeSegment => 0..l,
    };
    let grab = |slot: Slot| -> Vec<f64> {
        let mut v = Vec::with_capacity(steps.len() * d);
        for t in steps.clone() {
            let row = seg * 3 * l + 3 * t + slot.index();
            v.extend(z[row * d..(row + 1) * d].iter().map(|x| x.as_f64()));
        }
        v
    };
    ModalityFeatures {
        obs: grab(Slot::Obs),
        prop: grab(Slot::Prop),
        act: grab(Slot::Act),
    }
}

/// Features of a single segment from an unmasked bidirectional forward.
pub fn extract_features<S: Scalar>(
    model: &SwbtModel<S>,
    segment: &TrajectorySegment<S>,
    scope: FeatureScope,
) -> Result<ModalityFeatures, ScoringError> {
    let spec = TokenMaskSpec::unmasked(model.cfg.l);
    let feats = model.encode(segment, &spec)?;
    Ok(slice_features(
        &feats.z,
        0,
        model.cfg.l,
        model.cfg.d_model,
        scope,
    ))
}

/// Features for every referenced segment, batched through the trunk in
/// chunks. Row-independent ops make the result identical to segment-at-a-time
/// extraction.
pub fn extract_all<S: Scalar>(
    model: &SwbtModel<S>,
    ds: &DemoDataset<S>,
    refs: &[SegmentRef],
    scope: FeatureScope,
) -> Result<Vec<ModalityFeatures>, ScoringError> {
    let l = model.cfg.l;
    let d = model.cfg.d_model;
    let spec = TokenMaskSpec::unmasked(l);
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(EXTRACT_CHUNK) {
        let items: Vec<BatchItem<'_, S>> = chunk
            .iter()
            .map(|r| BatchItem {
                transitions: ds.resolve(r, l),
                padded_prefix: r.padded_prefix,
                spec: &spec,
            })
            .collect();
        let batch = SegmentBatch::build(&model.cfg.dims, l, &items)?;
        let mut g = Graph::new();
        let bnd = model.bind(&mut g);
        let id = model.forward_features(&mut g, &bnd, &batch)?;
        let z = g.value(id);
        for i in 0..chunk.len() {
            out.push(slice_features(z, i, l, d, scope));
        }
    }
    Ok(out)
}

fn l2(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn cosine(x: &[f64], y: &[f64]) -> Result<f64, ScoringError> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(ScoringError::ZeroVector);
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(dot / (nx * ny))
}

/// Similarity of two feature triples: per-modality distances or cosines,
/// summed. Symmetric in its arguments.
pub fn similarity(
    a: &ModalityFeatures,
    b: &ModalityFeatures,
    metric: SimilarityMetric,
) -> Result<f64, ScoringError> {
    if a.obs.len() != b.obs.len() || a.prop.len() != b.prop.len() || a.act.len() != b.act.len() {
        return Err(ScoringError::ShapeMismatch);
    }
    match metric {
        SimilarityMetric::NegL2 => {
            Ok(0.0 - l2(&a.obs, &b.obs) - l2(&a.prop, &b.prop) - l2(&a.act, &b.act))
        }
        SimilarityMetric::Cosine => Ok(cosine(&a.obs, &b.obs)?
            + cosine(&a.prop, &b.prop)?
            + cosine(&a.act, &b.act)?),
    }
}

/// Raw weight of one imperfect segment: the best similarity over every
/// expert segment, found by an exact linear scan. Ties keep the lowest
/// expert index so tables are reproducible.
pub fn segment_weight(
    features: &ModalityFeatures,
    expert: &[ModalityFeatures],
    metric: SimilarityMetric,
) -> Result<(f64, usize), ScoringError> {
    if expert.is_empty() {
        return Err(ScoringError::EmptyExpertSet);
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0usize;
    for (i, e) in expert.iter().enumerate() {
        let s = similarity(features, e, metric)?;
        if s > best {
            best = s;
            best_idx = i;
        }
    }
    Ok((best, best_idx))
}

/// Min-max normalization of raw weights onto [0,1], computed over the whole
/// imperfect population at once. Degenerate inputs (one weight, or all
/// weights equal) map everything to 1.
pub fn normalize_scores(weights: &[f64]) -> Vec<f64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![1.0; weights.len()];
    }
    weights.iter().map(|w| (w - lo) / (hi - lo)).collect()
}

/// One scored imperfect segment.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityRow {
    pub origin: SegmentOrigin,
    /// Raw similarity weight, <= 0 under the negative-L2 metric.
    pub w: f64,
    /// Normalized quality score in [0,1].
    pub q: f64,
    /// Expert segment attaining the max.
    pub best_match: SegmentOrigin,
    /// q > beta, strictly.
    pub kept: bool,
}

/// Scores for every imperfect segment plus the threshold they were filtered
/// at. Row order follows the imperfect dataset's segment enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityTable {
    pub beta: f64,
    pub rows: Vec<QualityRow>,
}

impl QualityTable {
    /// Re-applies the keep rule at a different threshold without rescoring.
    pub fn refilter(&mut self, beta: f64) -> Result<(), ScoringError> {
        check_beta(beta)?;
        self.beta = beta;
        for row in &mut self.rows {
            row.kept = row.q > beta;
        }
        Ok(())
    }

    pub fn kept_count(&self) -> usize {
        self.rows.iter().filter(|r| r.kept).count()
    }

    /// Histogram of quality scores over [0,1]; q = 1 lands in the top bin.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut counts = vec![0usize; bins];
        for row in &self.rows {
            let idx = ((row.q.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        counts
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("trajectory,start,w,q,best_match,kept\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}:{},{}\n",
                r.origin.trajectory,
                r.origin.start,
                fmt_f64(r.w),
                fmt_f64(r.q),
                r.best_match.trajectory,
                r.best_match.start,
                r.kept
            ));
        }
        out
    }

    /// Parses a table persisted by [`QualityTable::to_csv`]; `beta` is not
    /// stored in the file, so the caller re-supplies it and kept flags are
    /// recomputed against it. Leading `#` lines (provenance comments) are
    /// skipped.
    pub fn from_csv(text: &str, beta: f64) -> Result<Self, ScoringError> {
        check_beta(beta)?;
        let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
        match lines.next() {
            Some("trajectory,start,w,q,best_match,kept") => {}
            other => {
                return Err(ScoringError::Parse(format!(
                    "unexpected header {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(ScoringError::Parse(format!(
                    "row {}: expected 6 fields, got {}",
                    n + 2,
                    fields.len()
                )));
            }
            let bad = |what: &str| ScoringError::Parse(format!("row {}: bad {what}", n + 2));
            let (bt, bs) = fields[4]
                .split_once(':')
                .ok_or_else(|| bad("best_match"))?;
            let q: f64 = fields[3].parse().map_err(|_| bad("q"))?;
            rows.push(QualityRow {
                origin: SegmentOrigin {
                    trajectory: fields[0].parse().map_err(|_| bad("trajectory"))?,
                    start: fields[1].parse().map_err(|_| bad("start"))?,
                },
                w: fields[2].parse().map_err(|_| bad("w"))?,
                q,
                best_match: SegmentOrigin {
                    trajectory: bt.parse().map_err(|_| bad("best_match"))?,
                    start: bs.parse().map_err(|_| bad("best_match"))?,
                },
                kept: q > beta,
            });
        }
        Ok(QualityTable { beta, rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), ScoringError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path, beta: f64) -> Result<Self, ScoringError> {
        Self::from_csv(&fs::read_to_string(path)?, beta)
    }

    /// The 20-bin score distribution as CSV, for picking a threshold by eye.
    pub fn histogram_csv(&self) -> String {
        let bins = SCORE_HISTOGRAM_BINS;
        let counts = self.histogram(bins);
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in counts.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_f64(i as f64 / bins as f64),
                fmt_f64((i + 1) as f64 / bins as f64),
                c
            ));
        }
        out
    }

    pub fn save_histogram(&self, path: &Path) -> Result<(), ScoringError> {
        fs::write(path, self.histogram_csv())?;
        Ok(())
    }
}

/// Scores every imperfect segment against every expert segment and filters
/// at `cfg.beta`. An imperfect dataset with no trajectories yields an empty
/// table; an expert dataset with no segments is an error.
pub fn score_segments<S: Scalar>(
    model: &SwbtModel<S>,
    expert: &DemoDataset<S>,
    imperfect: &DemoDataset<S>,
    cfg: &SimilarityConfig,
) -> Result<QualityTable, ScoringError> {
    cfg.validate()?;
    let l = model.cfg.l;
    let exp_refs = segment_refs(expert, l).map_err(|e| match e {
        DataError::EmptyDataset => ScoringError::EmptyExpertSet,
        other => ScoringError::Data(other),
    })?;
    let imp_refs = match segment_refs(imperfect, l) {
        Ok(refs) => refs,
        Err(DataError::EmptyDataset) => Vec::new(),
        Err(e) => return Err(ScoringError::Data(e)),
    };
    let exp_feats = extract_all(model, expert, &exp_refs, cfg.scope)?;
    let imp_feats = extract_all(model, imperfect, &imp_refs, cfg.scope)?;

    let mut weights = Vec::with_capacity(imp_feats.len());
    let mut matches = Vec::with_capacity(imp_feats.len());
    for f in &imp_feats {
        let (w, idx) = segment_weight(f, &exp_feats, cfg.metric)?;
        weights.push(w);
        matches.push(idx);
    }
    let scores = normalize_scores(&weights);

    let rows = imp_refs
        .iter()
        .zip(weights.iter().zip(scores.iter().zip(matches.iter())))
        .map(|(r, (&w, (&q, &m)))| QualityRow {
            origin: r.origin(),
            w,
            q,
            best_match: exp_refs[m].origin(),
            kept: q > cfg.beta,
        })
        .collect();
    Ok(QualityTable {
        beta: cfg.beta,
        rows,
    })
}

/// Resolves the kept rows back into segment handles on `ds`, pairing each
/// with its quality score for use as a cloning weight. Rejects rows that do
/// not describe a valid window of `ds`, which catches a table loaded against
/// the wrong dataset.
pub fn filtered_refs<S: Scalar>(
    table: &QualityTable,
    ds: &DemoDataset<S>,
    l: usize,
) -> Result<Vec<(SegmentRef, f64)>, ScoringError> {
    let mut out = Vec::with_capacity(table.kept_count());
    for row in table.rows.iter().filter(|r| r.kept) {
        let bad = || ScoringError::BadTableRow {
            trajectory: row.origin.trajectory,
            start: row.origin.start,
        };
        let traj = ds
            .trajectories
            .get(row.origin.trajectory)
            .ok_or_else(bad)?;
        let len = traj.transitions.len();
        let padded_prefix = if len < l {
            if row.origin.start != 0 {
                return Err(bad());
            }
            l - len
        } else {
            if row.origin.start + l > len {
                return Err(bad());
            }
            0
        };
        out.push((
            SegmentRef {
                trajectory: row.origin.trajectory,
                start: row.origin.start,
                padded_prefix,
            },
            row.q,
        ));
    }
    Ok(out)
}
