//! Self-supervised pretraining: masked-slot prediction, unmasked-slot
//! reconstruction and causal action prediction, combined into one Adam loop
//! over segments drawn uniformly from a demonstration pool.
//!
//! The loop is label-blind: it reads transitions only, never success flags or
//! source tags. Losses with weight zero are skipped structurally (their
//! forward pass is never built and their mask stream is never drawn), so a
//! degenerate weighting is bit-identical to a loop that lacks those terms.

use std::error::Error;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{segment_refs, DataError, DemoDataset, TrajectorySegment};
use crate::numcore::{adam_step, zero_grads, AdamConfig, Graph, TensorError, TensorId};
use crate::transformer::{
    AttentionMode, BatchItem, Binding, SegmentBatch, Slot, SwbtModel, TokenMaskSpec,
    TransformerError,
};
use crate::util::{derive_seed, fmt_f64};
use crate::Scalar;

#[derive(Debug)]
pub enum PretrainError {
    EmptyDataset,
    BadMaskProb(f64),
    NoMaskProbs,
    NegativeLossWeight(&'static str),
    ZeroField(&'static str),
    BadLearningRate(f64),
    NeedsBidirectional,
    MissingBatch(&'static str),
    Transformer(TransformerError),
    Tensor(TensorError),
    Data(DataError),
    Io(std::io::Error),
}

impl fmt::Display for PretrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PretrainError::EmptyDataset => write!(f, "pretraining pool holds no trajectories"),
            PretrainError::BadMaskProb(p) => write!(f, "mask probability {p} outside (0, 1)"),
            PretrainError::NoMaskProbs => write!(f, "mask probability choice list is empty"),
            PretrainError::NegativeLossWeight(name) => {
                write!(f, "loss weight {name} is negative")
            }
            PretrainError::ZeroField(name) => write!(f, "config field {name} must be >= 1"),
            PretrainError::BadLearningRate(lr) => {
                write!(f, "learning rate {lr} must be finite and positive")
            }
            PretrainError::NeedsBidirectional => {
                write!(f, "reconstruction losses need a bidirectional mask spec")
            }
            PretrainError::MissingBatch(kind) => {
                write!(f, "loss weights require a {kind} batch but none was given")
            }
            PretrainError::Transformer(e) => write!(f, "model error: {e}"),
            PretrainError::Tensor(e) => write!(f, "tensor error: {e}"),
            PretrainError::Data(e) => write!(f, "data error: {e}"),
            PretrainError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl Error for PretrainError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            PretrainError::Transformer(e) => Some(e),
            PretrainError::Tensor(e) => Some(e),
            PretrainError::Data(e) => Some(e),
            PretrainError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TransformerError> for PretrainError {
    fn from(e: TransformerError) -> Self {
        PretrainError::Transformer(e)
    }
}

impl From<TensorError> for PretrainError {
    fn from(e: TensorError) -> Self {
        PretrainError::Tensor(e)
    }
}

impl From<DataError> for PretrainError {
    fn from(e: DataError) -> Self {
        PretrainError::Data(e)
    }
}

impl From<std::io::Error> for PretrainError {
    fn from(e: std::io::Error) -> Self {
        PretrainError::Io(e)
    }
}

/// Relative weights of the three pretraining objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mtp: f64,
    pub tr: f64,
    pub aa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mtp: 1.0, tr: 1.0, aa: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Per-step mask rate is drawn uniformly from this list.
    pub mask_prob_choices: Vec<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_prob_choices: vec![0.4, 0.3, 0.2, 0.1],
            batch_size: 64,
            steps: 20_000,
            lr: 3e-4,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if self.mask_prob_choices.is_empty() {
            return Err(PretrainError::NoMaskProbs);
        }
        for &p in &self.mask_prob_choices {
            if !(p > 0.0 && p < 1.0) {
                return Err(PretrainError::BadMaskProb(p));
            }
        }
        for (w, name) in [
            (self.loss_weights.mtp, "mtp"),
            (self.loss_weights.tr, "tr"),
            (self.loss_weights.aa, "aa"),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(PretrainError::NegativeLossWeight(name));
            }
        }
        if self.batch_size == 0 {
            return Err(PretrainError::ZeroField("batch_size"));
        }
        if self.steps == 0 {
            return Err(PretrainError::ZeroField("steps"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(PretrainError::BadLearningRate(self.lr));
        }
        Ok(())
    }
}

/// Draws one bidirectional mask grid: rate `p` uniform from `choices`, then
/// an independent coin per slot. Padded positions are never masked.
pub fn sample_mask(
    l: usize,
    padded_prefix: usize,
    choices: &[f64],
    rng: &mut ChaCha8Rng,
) -> TokenMaskSpec {
    let p = choices[rng.gen_range(0..choices.len())];
    let mut masked = vec![false; 3 * l];
    for t in 0..l {
        for slot in 0..3 {
            if t >= padded_prefix && rng.gen::<f64>() < p {
                masked[3 * t + slot] = true;
            }
        }
    }
    TokenMaskSpec::bidirectional(masked)
}

/// Graph nodes of the built loss terms; value 0.0 stands in for a term that
/// was skipped structurally.
pub struct LossNodes {
    pub mtp: Option<TensorId>,
    pub tr: Option<TensorId>,
    pub aa: Option<TensorId>,
    pub total: TensorId,
}

/// Per-modality decode of one batch plus the weighted squared-error sum over
/// its rows. `select` decides each row's weight from (token masked, timestep
/// padded); rows weighted zero are skipped exactly, so no gradient ever
/// reaches their decodes.
fn decoded_sse<S: Scalar>(
    model: &SwbtModel<S>,
    g: &mut Graph<S>,
    bnd: &Binding,
    feats: TensorId,
    batch: &SegmentBatch<S>,
    slot: Slot,
    mut weight: impl FnMut(bool, bool) -> f64,
) -> Result<TensorId, PretrainError> {
    let l = batch.l;
    let rows = SegmentBatch::<S>::slot_rows(batch.n, l, slot);
    let gathered = g.gather_rows(feats, Arc::new(rows))?;
    let pred = model.head(g, bnd, gathered, slot)?;
    let width = slot.width(&batch.dims);
    let targets = match slot {
        Slot::Obs => batch.obs_tgt.clone(),
        Slot::Prop => batch.prop_tgt.clone(),
        Slot::Act => batch.act_tgt.clone(),
    };
    let tgt = g.constant(vec![batch.n * l, width], targets)?;
    let mut row_w = Vec::with_capacity(batch.n * l);
    for seg in 0..batch.n {
        for t in 0..l {
            let masked = batch.masked[seg * 3 * l + 3 * t + slot.index()];
            let padded = batch.padded[seg * l + t];
            row_w.push(S::from_f64(weight(masked, padded)));
        }
    }
    Ok(g.weighted_sse(pred, tgt, Arc::new(row_w))?)
}

fn count_slots(batch: &SegmentBatch<impl Scalar>, want_masked: bool) -> usize {
    let l = batch.l;
    let mut count = 0;
    for seg in 0..batch.n {
        for t in 0..l {
            if batch.padded[seg * l + t] {
                continue;
            }
            for slot in 0..3 {
                if batch.masked[seg * 3 * l + 3 * t + slot] == want_masked {
                    count += 1;
                }
            }
        }
    }
    count
}

fn non_padded_steps(batch: &SegmentBatch<impl Scalar>) -> usize {
    batch.padded.iter().filter(|p| !**p).count()
}

/// Masked-slot reconstruction over a bidirectional batch: mean over masked
/// non-padded slots of that slot's per-component MSE. Zero if nothing is
/// masked.
pub fn build_mtp<S: Scalar>(
    model: &SwbtModel<S>,
    g: &mut Graph<S>,
    bnd: &Binding,
    feats: TensorId,
    batch: &SegmentBatch<S>,
) -> Result<TensorId, PretrainError> {
    if batch.mode != AttentionMode::Bidirectional {
        return Err(PretrainError::NeedsBidirectional);
    }
    let denom = count_slots(batch, true);
    if denom == 0 {
        return Ok(g.scalar_const(S::zero()));
    }
    let mut total = None;
    for slot in Slot::ALL {
        let width = slot.width(&batch.dims) as f64;
        let term = decoded_sse(model, g, bnd, feats, batch, slot, |masked, padded| {
            if masked && !padded {
                1.0 / (width * denom as f64)
            } else {
                0.0
            }
        })?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("three modalities"))
}

/// Unmasked-slot reconstruction: the complement of `build_mtp` over the same
/// batch, so the two together touch every non-padded slot exactly once.
pub fn build_tr<S: Scalar>(
    model: &SwbtModel<S>,
    g: &mut Graph<S>,
    bnd: &Binding,
    feats: TensorId,
    batch: &SegmentBatch<S>,
) -> Result<TensorId, PretrainError> {
    if batch.mode != AttentionMode::Bidirectional {
        return Err(PretrainError::NeedsBidirectional);
    }
    let denom = count_slots(batch, false);
    if denom == 0 {
        return Ok(g.scalar_const(S::zero()));
    }
    let mut total = None;
    for slot in Slot::ALL {
        let width = slot.width(&batch.dims) as f64;
        let term = decoded_sse(model, g, bnd, feats, batch, slot, |masked, padded| {
            if !masked && !padded {
                1.0 / (width * denom as f64)
            } else {
                0.0
            }
        })?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("three modalities"))
}

/// Causal action prediction: mean over non-padded timesteps of the action
/// slot's per-component MSE. The causal grid hides every action input, so the
/// loss cannot depend on the action it predicts.
pub fn build_aa<S: Scalar>(
    model: &SwbtModel<S>,
    g: &mut Graph<S>,
    bnd: &Binding,
    feats: TensorId,
    batch: &SegmentBatch<S>,
) -> Result<TensorId, PretrainError> {
    let denom = non_padded_steps(batch);
    if denom == 0 {
        return Ok(g.scalar_const(S::zero()));
    }
    let width = batch.dims.action as f64;
    decoded_sse(model, g, bnd, feats, batch, Slot::Act, |_, padded| {
        if padded {
            0.0
        } else {
            1.0 / (width * denom as f64)
        }
    })
}

/// Builds the weighted pretraining objective for one step. Bidirectional and
/// causal forwards share the same parameter leaves, so one backward pass
/// accumulates both. Zero-weight terms are not built at all.
pub fn build_losses<S: Scalar>(
    model: &SwbtModel<S>,
    g: &mut Graph<S>,
    bnd: &Binding,
    bid_batch: Option<&SegmentBatch<S>>,
    cau_batch: Option<&SegmentBatch<S>>,
    weights: &LossWeights,
    mut drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossNodes, PretrainError> {
    let mut nodes = LossNodes { mtp: None, tr: None, aa: None, total: 0 };
    let mut total = None;
    let mut push = |g: &mut Graph<S>, term: TensorId, w: f64| -> Result<TensorId, PretrainError> {
        let scaled = if w == 1.0 { term } else { g.scale(term, S::from_f64(w))? };
        total = Some(match total {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
        Ok(term)
    };
    if weights.mtp > 0.0 || weights.tr > 0.0 {
        let batch = bid_batch.ok_or(PretrainError::MissingBatch("bidirectional"))?;
        let feats = match drop_rng.as_deref_mut() {
            Some(rng) => model.forward_features_train(g, bnd, batch, rng)?,
            None => model.forward_features(g, bnd, batch)?,
        };
        if weights.mtp > 0.0 {
            let term = build_mtp(model, g, bnd, feats, batch)?;
            nodes.mtp = Some(push(g, term, weights.mtp)?);
        }
        if weights.tr > 0.0 {
            let term = build_tr(model, g, bnd, feats, batch)?;
            nodes.tr = Some(push(g, term, weights.tr)?);
        }
    }
    if weights.aa > 0.0 {
        let batch = cau_batch.ok_or(PretrainError::MissingBatch("causal"))?;
        let feats = match drop_rng {
            Some(rng) => model.forward_features_train(g, bnd, batch, rng)?,
            None => model.forward_features(g, bnd, batch)?,
        };
        let term = build_aa(model, g, bnd, feats, batch)?;
        nodes.aa = Some(push(g, term, weights.aa)?);
    }
    nodes.total = match total {
        Some(t) => t,
        None => g.scalar_const(S::zero()),
    };
    Ok(nodes)
}

fn one_segment_batch<S: Scalar>(
    model: &SwbtModel<S>,
    segment: &TrajectorySegment<S>,
    spec: &TokenMaskSpec,
) -> Result<SegmentBatch<S>, PretrainError> {
    Ok(SegmentBatch::build(
        &model.cfg.dims,
        model.cfg.l,
        &[BatchItem::from_segment(segment, spec)],
    )?)
}

/// Masked-slot loss for a single segment.
pub fn loss_mtp<S: Scalar>(
    model: &SwbtModel<S>,
    segment: &TrajectorySegment<S>,
    spec: &TokenMaskSpec,
) -> Result<f64, PretrainError> {
    let batch = one_segment_batch(model, segment, spec)?;
    let mut g = Graph::new();
    let bnd = model.bind(&mut g);
    let feats = model.forward_features(&mut g, &bnd, &batch)?;
    let loss = build_mtp(model, &mut g, &bnd, feats, &batch)?;
    Ok(g.value(loss)[0].as_f64())
}

/// Unmasked-slot loss for a single segment.
pub fn loss_tr<S: Scalar>(
    model: &SwbtModel<S>,
    segment: &TrajectorySegment<S>,
    spec: &TokenMaskSpec,
) -> Result<f64, PretrainError> {
    let batch = one_segment_batch(model, segment, spec)?;
    let mut g = Graph::new();
    let bnd = model.bind(&mut g);
    let feats = model.forward_features(&mut g, &bnd, &batch)?;
    let loss = build_tr(model, &mut g, &bnd, feats, &batch)?;
    Ok(g.value(loss)[0].as_f64())
}

/// Causal action-prediction loss for a single segment.
pub fn loss_aa<S: Scalar>(
    model: &SwbtModel<S>,
    segment: &TrajectorySegment<S>,
) -> Result<f64, PretrainError> {
    let spec = TokenMaskSpec::causal(model.cfg.l);
    let batch = one_segment_batch(model, segment, &spec)?;
    let mut g = Graph::new();
    let bnd = model.bind(&mut g);
    let feats = model.forward_features(&mut g, &bnd, &batch)?;
    let loss = build_aa(model, &mut g, &bnd, feats, &batch)?;
    Ok(g.value(loss)[0].as_f64())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub mtp: f64,
    pub tr: f64,
    pub aa: f64,
    pub total: f64,
}

/// Per-step training curve; rows in step order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    pub rows: Vec<LossRow>,
}

impl PretrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_mtp,loss_tr,loss_aa,loss_total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                fmt_f64(r.mtp),
                fmt_f64(r.tr),
                fmt_f64(r.aa),
                fmt_f64(r.total)
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PretrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Runs the pretraining loop in place. Deterministic per (config, dataset,
/// starting parameters); reads only transition contents from the pool.
pub fn pretrain<S: Scalar>(
    model: &mut SwbtModel<S>,
    pool: &DemoDataset<S>,
    cfg: &PretrainConfig,
) -> Result<PretrainLog, PretrainError> {
    cfg.validate()?;
    if pool.trajectories.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    let l = model.cfg.l;
    let refs = segment_refs(pool, l)?;
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let needs_bid = cfg.loss_weights.mtp > 0.0 || cfg.loss_weights.tr > 0.0;
    let needs_cau = cfg.loss_weights.aa > 0.0;
    let causal_spec = TokenMaskSpec::causal(l);
    let mut log = PretrainLog::default();

    for step in 0..cfg.steps {
        let mut batch_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain-batch", step as u64));
        let picks: Vec<_> = (0..cfg.batch_size)
            .map(|_| refs[batch_rng.gen_range(0..refs.len())])
            .collect();
        let resolved: Vec<_> = picks.iter().map(|r| pool.resolve(r, l)).collect();

        let bid_specs: Option<Vec<TokenMaskSpec>> = needs_bid.then(|| {
            let mut mask_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain-mask", step as u64));
            picks
                .iter()
                .map(|r| sample_mask(l, r.padded_prefix, &cfg.mask_prob_choices, &mut mask_rng))
                .collect()
        });
        let bid_batch = match &bid_specs {
            Some(specs) => {
                let items: Vec<_> = resolved
                    .iter()
                    .zip(picks.iter())
                    .zip(specs.iter())
                    .map(|((transitions, r), spec)| BatchItem {
                        transitions: transitions.clone(),
                        padded_prefix: r.padded_prefix,
                        spec,
                    })
                    .collect();
                Some(SegmentBatch::build(&model.cfg.dims, l, &items)?)
            }
            None => None,
        };
        let cau_batch = if needs_cau {
            let items: Vec<_> = resolved
                .iter()
                .zip(picks.iter())
                .map(|(transitions, r)| BatchItem {
                    transitions: transitions.clone(),
                    padded_prefix: r.padded_prefix,
                    spec: &causal_spec,
                })
                .collect();
            Some(SegmentBatch::build(&model.cfg.dims, l, &items)?)
        } else {
            None
        };

        let mut drop_rng = (model.cfg.dropout > 0.0)
            .then(|| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain-drop", step as u64)));
        let mut g = Graph::new();
        let bnd = model.bind(&mut g);
        let nodes = build_losses(
            model,
            &mut g,
            &bnd,
            bid_batch.as_ref(),
            cau_batch.as_ref(),
            &cfg.loss_weights,
            drop_rng.as_mut(),
        )?;
        g.backward(nodes.total)?;
        model.apply_graph_grads(&g, &bnd)?;
        adam_step(&mut model.params, &adam);
        zero_grads(&mut model.params);

        let read = |id: Option<TensorId>| id.map_or(0.0, |i| g.value(i)[0].as_f64());
        log.rows.push(LossRow {
            step,
            mtp: read(nodes.mtp),
            tr: read(nodes.tr),
            aa: read(nodes.aa),
            total: g.value(nodes.total)[0].as_f64(),
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{SegmentOrigin, Transition, DESK_DIMS};
    use crate::envsim::{preset, Env, ScriptedPolicy};
    use crate::transformer::ModelConfig;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_segment(r: &mut ChaCha8Rng, l: usize, padded_prefix: usize) -> TrajectorySegment<f32> {
        let transitions = (0..l)
            .map(|_| Transition {
                obs: (0..DESK_DIMS.obs.flat()).map(|_| r.gen::<f32>()).collect(),
                proprio: (0..DESK_DIMS.proprio).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
                action: (0..DESK_DIMS.action).map(|_| r.gen_range(-1.0f32..1.0)).collect(),
            })
            .collect();
        TrajectorySegment {
            transitions,
            origin: SegmentOrigin { trajectory: 0, start: 0 },
            padded_prefix,
        }
    }

    fn desk_model(seed: u64) -> SwbtModel<f32> {
        SwbtModel::new(ModelConfig::desk(), seed).unwrap()
    }

    fn expert_pool(episodes: usize) -> DemoDataset<f32> {
        let env = Env::default();
        let level = preset("expert").unwrap();
        let mut policy = ScriptedPolicy::new(level.knobs);
        env.collect(&mut policy, episodes, 400, "expert", crate::datamodel::Role::Expert, "test pool".into())
            .unwrap()
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let cfg = PretrainConfig {
            mask_prob_choices: vec![0.4, 1.0],
            ..PretrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(PretrainError::BadMaskProb(_))));
        let mut cfg = PretrainConfig::default();
        cfg.loss_weights.tr = -0.1;
        assert!(matches!(cfg.validate(), Err(PretrainError::NegativeLossWeight("tr"))));
        let cfg = PretrainConfig {
            batch_size: 0,
            ..PretrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(PretrainError::ZeroField("batch_size"))));
    }

    #[test]
    fn sample_mask_edge_rates_and_measured_fraction() {
        let mut r = rng(1);
        let empty = sample_mask(6, 0, &[0.0], &mut r);
        assert!(empty.masked.iter().all(|m| !m));
        let full = sample_mask(6, 0, &[1.0], &mut r);
        assert!(full.masked.iter().all(|m| *m));

        let mut hits = 0usize;
        let mut total = 0usize;
        for _ in 0..10_000 {
            let spec = sample_mask(6, 0, &[0.4], &mut r);
            hits += spec.masked.iter().filter(|m| **m).count();
            total += 18;
        }
        let fraction = hits as f64 / total as f64;
        assert!(
            (fraction - 0.4).abs() <= 0.02,
            "masked fraction {fraction} strays from 0.4"
        );
    }

    #[test]
    fn sampled_masks_partition_the_non_padded_slots() {
        let mut r = rng(2);
        for _ in 0..1000 {
            let pad = r.gen_range(0..3usize);
            let spec = sample_mask(6, pad, &[0.4, 0.3, 0.2, 0.1], &mut r);
            let mut masked = 0;
            let mut unmasked = 0;
            for t in 0..6 {
                for s in 0..3 {
                    let m = spec.masked[3 * t + s];
                    if t < pad {
                        assert!(!m, "padded slot ({t},{s}) got masked");
                    } else if m {
                        masked += 1;
                    } else {
                        unmasked += 1;
                    }
                }
            }
            assert_eq!(masked + unmasked, 3 * (6 - pad));
        }
    }

    #[test]
    fn empty_and_full_masks_zero_the_right_losses() {
        let model = desk_model(3);
        let mut r = rng(3);
        let seg = random_segment(&mut r, 6, 0);
        let none = TokenMaskSpec::bidirectional(vec![false; 18]);
        let all = TokenMaskSpec::bidirectional(vec![true; 18]);
        assert_eq!(loss_mtp(&model, &seg, &none).unwrap(), 0.0);
        assert_eq!(loss_tr(&model, &seg, &all).unwrap(), 0.0);
        assert!(loss_mtp(&model, &seg, &all).unwrap() > 0.0);
        assert!(loss_tr(&model, &seg, &none).unwrap() > 0.0);
    }

    #[test]
    fn single_masked_slot_equals_hand_mse() {
        let model = desk_model(5);
        let mut r = rng(5);
        let seg = random_segment(&mut r, 6, 0);
        let mut masked = vec![false; 18];
        masked[3 * 3 + Slot::Prop.index()] = true;
        let spec = TokenMaskSpec::bidirectional(masked);
        let got = loss_mtp(&model, &seg, &spec).unwrap();
        let feats = model.encode(&seg, &spec).unwrap();
        let decoded = model.decode_heads(&feats).unwrap();
        let d_m = DESK_DIMS.proprio;
        let pred = &decoded.prop[3 * d_m..4 * d_m];
        let truth = &seg.transitions[3].proprio;
        let hand: f64 = pred
            .iter()
            .zip(truth.iter())
            .map(|(p, t)| ((p - t) as f64).powi(2))
            .sum::<f64>()
            / d_m as f64;
        let rel = (got - hand).abs() / hand.max(1e-12);
        assert!(rel < 1e-4, "loss {got} vs hand {hand}");
    }

    #[test]
    fn mtp_and_tr_sums_cover_total_reconstruction_error() {
        let model = desk_model(7);
        let mut r = rng(7);
        let seg = random_segment(&mut r, 6, 0);
        let spec = sample_mask(6, 0, &[0.3], &mut r);
        let n_masked = spec.masked.iter().filter(|m| **m).count();
        let n_unmasked = 18 - n_masked;
        assert!(n_masked > 0 && n_unmasked > 0, "mask draw degenerate for this seed");
        let mtp = loss_mtp(&model, &seg, &spec).unwrap();
        let tr = loss_tr(&model, &seg, &spec).unwrap();
        let combined = mtp * n_masked as f64 + tr * n_unmasked as f64;

        let feats = model.encode(&seg, &spec).unwrap();
        let decoded = model.decode_heads(&feats).unwrap();
        let mut total = 0.0f64;
        for t in 0..6 {
            for (pred, truth, d) in [
                (&decoded.obs[t * 256..(t + 1) * 256], &seg.transitions[t].obs, 256usize),
                (&decoded.prop[t * 8..(t + 1) * 8], &seg.transitions[t].proprio, 8),
                (&decoded.act[t * 3..(t + 1) * 3], &seg.transitions[t].action, 3),
            ] {
                total += pred
                    .iter()
                    .zip(truth.iter())
                    .map(|(p, v)| ((p - v) as f64).powi(2))
                    .sum::<f64>()
                    / d as f64;
            }
        }
        let rel = (combined - total).abs() / total;
        assert!(rel < 1e-4, "combined {combined} vs total {total}");
    }

    #[test]
    fn aa_loss_ignores_every_action_input() {
        let model = desk_model(9);
        let mut r = rng(9);
        let seg = random_segment(&mut r, 6, 0);
        let base = loss_aa(&model, &seg).unwrap();
        let mut shuffled = seg.clone();
        for t in 0..6 {
            shuffled.transitions[t].action =
                (0..3).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        }
        // Identical features, different targets: only the target side moves.
        let spec = TokenMaskSpec::causal(6);
        assert_eq!(
            model.encode(&seg, &spec).unwrap().z,
            model.encode(&shuffled, &spec).unwrap().z
        );
        // And restoring the original targets restores the loss bit for bit.
        let mut restored = shuffled.clone();
        for t in 0..6 {
            restored.transitions[t].action = seg.transitions[t].action.clone();
        }
        assert_eq!(base, loss_aa(&model, &restored).unwrap());
    }

    #[test]
    fn aa_single_step_toy_matches_prediction_mse() {
        let mut cfg = ModelConfig::desk();
        cfg.l = 1;
        let model = SwbtModel::<f32>::new(cfg, 11).unwrap();
        let mut r = rng(11);
        let seg = random_segment(&mut r, 1, 0);
        let got = loss_aa(&model, &seg).unwrap();
        let pred = model.predict_action(&seg).unwrap();
        let hand: f64 = pred
            .iter()
            .zip(seg.transitions[0].action.iter())
            .map(|(p, a)| ((p - a) as f64).powi(2))
            .sum::<f64>()
            / 3.0;
        let rel = (got - hand).abs() / hand.max(1e-12);
        assert!(rel < 1e-4, "loss {got} vs hand {hand}");
    }

    #[test]
    fn padded_timesteps_stay_out_of_every_loss() {
        let model = desk_model(13);
        let mut r = rng(13);
        let pad = 2usize;
        let seg = random_segment(&mut r, 6, pad);
        let spec = sample_mask(6, pad, &[0.4], &mut rng(14));
        let n_masked = spec.masked.iter().filter(|m| **m).count();
        let n_unmasked = 3 * (6 - pad) - n_masked;
        assert!(n_masked > 0 && n_unmasked > 0, "mask draw degenerate for this seed");

        // Reconstruction losses, hand-summed over non-padded slots only.
        let mtp = loss_mtp(&model, &seg, &spec).unwrap();
        let tr = loss_tr(&model, &seg, &spec).unwrap();
        let combined = mtp * n_masked as f64 + tr * n_unmasked as f64;
        let feats = model.encode(&seg, &spec).unwrap();
        let decoded = model.decode_heads(&feats).unwrap();
        let mut live = 0.0f64;
        for t in pad..6 {
            for (pred, truth, d) in [
                (&decoded.obs[t * 256..(t + 1) * 256], &seg.transitions[t].obs, 256usize),
                (&decoded.prop[t * 8..(t + 1) * 8], &seg.transitions[t].proprio, 8),
                (&decoded.act[t * 3..(t + 1) * 3], &seg.transitions[t].action, 3),
            ] {
                live += pred
                    .iter()
                    .zip(truth.iter())
                    .map(|(p, v)| ((p - v) as f64).powi(2))
                    .sum::<f64>()
                    / d as f64;
            }
        }
        let rel = (combined - live).abs() / live;
        assert!(rel < 1e-4, "combined {combined} vs non-padded total {live}");

        // Action loss, hand-averaged over non-padded timesteps only.
        let aa = loss_aa(&model, &seg).unwrap();
        let cfeats = model.encode(&seg, &TokenMaskSpec::causal(6)).unwrap();
        let cdecoded = model.decode_heads(&cfeats).unwrap();
        let mut hand = 0.0f64;
        for t in pad..6 {
            hand += cdecoded.act[t * 3..(t + 1) * 3]
                .iter()
                .zip(seg.transitions[t].action.iter())
                .map(|(p, a)| ((p - a) as f64).powi(2))
                .sum::<f64>()
                / 3.0;
        }
        hand /= (6 - pad) as f64;
        let rel = (aa - hand).abs() / hand.max(1e-12);
        assert!(rel < 1e-4, "action loss {aa} vs non-padded hand value {hand}");
    }

    #[test]
    #[allow(clippy::identity_op)] // 3 * t + slot indexing, kept literal
    fn mtp_gradient_reaches_only_masked_modalities() {
        let model = desk_model(15);
        let mut r = rng(15);
        let seg = random_segment(&mut r, 6, 0);
        // Mask prop and act slots but no obs slot.
        let mut masked = vec![false; 18];
        masked[3 * 1 + Slot::Prop.index()] = true;
        masked[3 * 2 + Slot::Act.index()] = true;
        let spec = TokenMaskSpec::bidirectional(masked);
        let batch = SegmentBatch::build(
            &DESK_DIMS,
            6,
            &[BatchItem::from_segment(&seg, &spec)],
        )
        .unwrap();
        let mut g = Graph::new();
        let bnd = model.bind(&mut g);
        let weights = LossWeights { mtp: 1.0, tr: 0.0, aa: 0.0 };
        let nodes = build_losses(&model, &mut g, &bnd, Some(&batch), None, &weights, None).unwrap();
        g.backward(nodes.total).unwrap();
        for (idx, id) in bnd.ids.iter().enumerate() {
            let (name, _) = model.params.at(idx);
            let grad = g.grad(*id);
            let nonzero = grad.is_some_and(|gr| gr.iter().any(|v| *v != 0.0));
            if name.starts_with("head.obs.") {
                assert!(!nonzero, "{name} got gradient though no obs slot is masked");
            }
            if name.starts_with("head.prop.w") || name.starts_with("head.act.w") {
                assert!(nonzero, "{name} got no gradient though its slot is masked");
            }
        }
    }

    #[test]
    fn pretrain_rejects_empty_pool() {
        let pool = DemoDataset::<f32> {
            trajectories: vec![],
            role: crate::datamodel::Role::Union,
            meta: crate::datamodel::DatasetMeta {
                dtype: crate::Dtype::F32,
                role: crate::datamodel::Role::Union,
                dims: DESK_DIMS,
                generator: "empty".into(),
                seed: 0,
            },
        };
        let mut model = desk_model(17);
        let cfg = PretrainConfig { steps: 1, batch_size: 2, ..PretrainConfig::default() };
        assert!(matches!(
            pretrain(&mut model, &pool, &cfg),
            Err(PretrainError::EmptyDataset)
        ));
    }

    #[test]
    fn pretrain_is_deterministic_and_label_blind() {
        let pool = expert_pool(4);
        let cfg = PretrainConfig {
            steps: 8,
            batch_size: 4,
            seed: 21,
            ..PretrainConfig::default()
        };
        let mut a = desk_model(19);
        let mut b = desk_model(19);
        pretrain(&mut a, &pool, &cfg).unwrap();
        pretrain(&mut b, &pool, &cfg).unwrap();
        for (name, p) in a.params.iter() {
            assert_eq!(
                p.tensor.values,
                b.params.get(name).unwrap().tensor.values,
                "{name} differs across identical runs"
            );
        }
        let mut relabeled = pool.clone();
        for t in &mut relabeled.trajectories {
            t.success = !t.success;
            t.source_tag = "something-else".into();
        }
        let mut c = desk_model(19);
        pretrain(&mut c, &relabeled, &cfg).unwrap();
        for (name, p) in a.params.iter() {
            assert_eq!(
                p.tensor.values,
                c.params.get(name).unwrap().tensor.values,
                "{name} depends on labels"
            );
        }
    }

    #[test]
    fn aa_only_training_never_draws_masks() {
        let pool = expert_pool(4);
        let base = PretrainConfig {
            steps: 8,
            batch_size: 4,
            seed: 23,
            loss_weights: LossWeights { mtp: 0.0, tr: 0.0, aa: 1.0 },
            ..PretrainConfig::default()
        };
        let other_choices = PretrainConfig {
            mask_prob_choices: vec![0.9],
            ..base.clone()
        };
        let mut a = desk_model(25);
        let mut b = desk_model(25);
        let log_a = pretrain(&mut a, &pool, &base).unwrap();
        let log_b = pretrain(&mut b, &pool, &other_choices).unwrap();
        assert_eq!(log_a.rows.len(), 8);
        assert!(log_a.rows.iter().all(|r| r.mtp == 0.0 && r.tr == 0.0 && r.aa > 0.0));
        assert_eq!(log_a, log_b, "mask choices leaked into an action-only run");
        for (name, p) in a.params.iter() {
            assert_eq!(
                p.tensor.values,
                b.params.get(name).unwrap().tensor.values,
                "{name} depends on the unused mask stream"
            );
        }
    }

    #[test]
    fn loss_log_csv_is_stable_text() {
        let log = PretrainLog {
            rows: vec![LossRow { step: 0, mtp: 0.25, tr: 0.5, aa: 1.0, total: 1.75 }],
        };
        assert_eq!(
            log.to_csv(),
            "step,loss_mtp,loss_tr,loss_aa,loss_total\n0,0.25,0.5,1.0,1.75\n"
        );
    }

    #[test]
    fn two_thousand_steps_halve_the_early_loss() {
        let pool = expert_pool(50);
        let cfg = PretrainConfig {
            steps: 2000,
            batch_size: 16,
            seed: 27,
            ..PretrainConfig::default()
        };
        let mut model = desk_model(27);
        let log = pretrain(&mut model, &pool, &cfg).unwrap();
        let window = |lo: usize, hi: usize| -> f64 {
            let rows = &log.rows[lo..hi];
            rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64
        };
        let early = window(50, 150);
        let late = window(1900, 2000);
        assert!(
            late <= 0.5 * early,
            "loss only moved from {early:.4} to {late:.4}"
        );
    }
}
