//! Multi-modal segment encoder with three decoder heads.
//!
//! A trajectory segment of `l` transitions becomes `3l` tokens in
//! (observation, proprio, action) interleaved order. One shared trunk serves
//! two attention modes: bidirectional (masked-reconstruction pretraining,
//! feature extraction) and causal (action prediction, where token `j` attends
//! to tokens `<= j`). In causal mode every action slot carries the learned
//! MASK embedding, so a single forward pass predicts the action at every
//! timestep without seeing any action input; the same pass serves inference.

use std::collections::{BTreeMap, VecDeque};
use std::error::Error;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{DataDims, SegmentOrigin, Transition, TrajectorySegment, DESK_DIMS};
use crate::envsim::{Env, EnvState, Policy};
use crate::numcore::{
    load_checkpoint, save_checkpoint, CheckpointError, Graph, ParamStore, Tensor, TensorError,
    TensorId,
};
use crate::util::derive_seed;
use crate::Scalar;

/// Epsilon inside every layer-norm denominator.
pub const LN_EPS: f64 = 1e-5;

const INIT_STD: f64 = 0.02;

#[derive(Debug)]
pub enum TransformerError {
    HeadSplit { d_model: usize, n_heads: usize },
    ZeroField(&'static str),
    BadDropout(f64),
    BadMaskSpec { detail: String },
    SegmentLength { expected: usize, got: usize },
    SlotWidth { slot: &'static str, expected: usize, got: usize },
    BadPadding { padded_prefix: usize, l: usize },
    MixedAttentionModes,
    EmptyBatch,
    BatchMismatch { field: &'static str },
    MetaMissing { key: &'static str },
    BadMeta { key: &'static str, detail: String },
    MissingParam { name: String },
    WrongParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    UnexpectedParamCount { expected: usize, got: usize },
    Tensor(TensorError),
    Checkpoint(CheckpointError),
}

impl fmt::Display for TransformerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformerError::HeadSplit { d_model, n_heads } => {
                write!(f, "d_model {d_model} not divisible by n_heads {n_heads}")
            }
            TransformerError::ZeroField(name) => write!(f, "config field {name} must be >= 1"),
            TransformerError::BadDropout(p) => write!(f, "dropout {p} outside [0, 1)"),
            TransformerError::BadMaskSpec { detail } => write!(f, "bad mask spec: {detail}"),
            TransformerError::SegmentLength { expected, got } => {
                write!(f, "segment holds {got} transitions, model expects {expected}")
            }
            TransformerError::SlotWidth { slot, expected, got } => {
                write!(f, "{slot} vector has {got} values, dims say {expected}")
            }
            TransformerError::BadPadding { padded_prefix, l } => {
                write!(f, "padded prefix {padded_prefix} exceeds segment length {l}")
            }
            TransformerError::MixedAttentionModes => {
                write!(f, "all segments in one batch must share an attention mode")
            }
            TransformerError::EmptyBatch => write!(f, "batch holds no segments"),
            TransformerError::BatchMismatch { field } => {
                write!(f, "batch {field} does not match the model config")
            }
            TransformerError::MetaMissing { key } => {
                write!(f, "checkpoint metadata lacks key {key}")
            }
            TransformerError::BadMeta { key, detail } => {
                write!(f, "checkpoint metadata key {key} unusable: {detail}")
            }
            TransformerError::MissingParam { name } => {
                write!(f, "checkpoint lacks parameter {name}")
            }
            TransformerError::WrongParamShape { name, expected, got } => {
                write!(f, "parameter {name} has shape {got:?}, expected {expected:?}")
            }
            TransformerError::UnexpectedParamCount { expected, got } => {
                write!(f, "checkpoint holds {got} parameters, model expects {expected}")
            }
            TransformerError::Tensor(e) => write!(f, "tensor error: {e}"),
            TransformerError::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
        }
    }
}

impl Error for TransformerError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            TransformerError::Tensor(e) => Some(e),
            TransformerError::Checkpoint(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for TransformerError {
    fn from(e: TensorError) -> Self {
        TransformerError::Tensor(e)
    }
}

impl From<CheckpointError> for TransformerError {
    fn from(e: CheckpointError) -> Self {
        TransformerError::Checkpoint(e)
    }
}

/// Token order within a timestep. `index()` is the offset inside the
/// interleaved layout: token row = `3 * t + slot.index()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Obs,
    Prop,
    Act,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Obs, Slot::Prop, Slot::Act];

    pub fn index(self) -> usize {
        match self {
            Slot::Obs => 0,
            Slot::Prop => 1,
            Slot::Act => 2,
        }
    }

    pub fn width(self, dims: &DataDims) -> usize {
        match self {
            Slot::Obs => dims.obs.flat(),
            Slot::Prop => dims.proprio,
            Slot::Act => dims.action,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Slot::Obs => "obs",
            Slot::Prop => "prop",
            Slot::Act => "act",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

/// Which of the `3l` input slots are hidden behind the MASK embedding, plus
/// the attention mode of the forward pass. In causal mode the grid is fixed:
/// every action slot masked, nothing else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMaskSpec {
    /// Length `3l`, index `3 * t + slot`.
    pub masked: Vec<bool>,
    pub mode: AttentionMode,
}

impl TokenMaskSpec {
    pub fn bidirectional(masked: Vec<bool>) -> Self {
        TokenMaskSpec {
            masked,
            mode: AttentionMode::Bidirectional,
        }
    }

    /// Bidirectional with nothing masked; the feature-extraction setting.
    pub fn unmasked(l: usize) -> Self {
        TokenMaskSpec {
            masked: vec![false; 3 * l],
            mode: AttentionMode::Bidirectional,
        }
    }

    /// The canonical causal grid: action slots masked at every timestep.
    pub fn causal(l: usize) -> Self {
        let mut masked = vec![false; 3 * l];
        for t in 0..l {
            masked[3 * t + Slot::Act.index()] = true;
        }
        TokenMaskSpec { masked, mode: AttentionMode::Causal }
    }

    pub fn is_masked(&self, t: usize, slot: Slot) -> bool {
        self.masked[3 * t + slot.index()]
    }

    pub fn validate(&self, l: usize) -> Result<(), TransformerError> {
        if self.masked.len() != 3 * l {
            return Err(TransformerError::BadMaskSpec {
                detail: format!("grid has {} entries, expected {}", self.masked.len(), 3 * l),
            });
        }
        if self.mode == AttentionMode::Causal {
            for t in 0..l {
                for slot in Slot::ALL {
                    let want = slot == Slot::Act;
                    if self.is_masked(t, slot) != want {
                        return Err(TransformerError::BadMaskSpec {
                            detail: format!(
                                "causal grid must mask exactly the action slots; \
                                 slot ({t}, {}) breaks that",
                                slot.name()
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Segment length: transitions per input window.
    pub l: usize,
    pub dims: DataDims,
    pub dropout: f64,
}

impl ModelConfig {
    /// The desk-scale default: small enough to train in minutes on one core.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            l: 6,
            dims: DESK_DIMS,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TransformerError> {
        for (value, name) in [
            (self.d_model, "d_model"),
            (self.n_layers, "n_layers"),
            (self.n_heads, "n_heads"),
            (self.l, "l"),
            (self.dims.obs.flat(), "dims.obs"),
            (self.dims.proprio, "dims.proprio"),
            (self.dims.action, "dims.action"),
        ] {
            if value == 0 {
                return Err(TransformerError::ZeroField(name));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(TransformerError::HeadSplit {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TransformerError::BadDropout(self.dropout));
        }
        Ok(())
    }

    pub fn tokens_per_segment(&self) -> usize {
        3 * self.l
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

/// Per-element trunk output for one segment: row `3 * t + slot` of `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatures<S: Scalar> {
    pub l: usize,
    pub d: usize,
    pub z: Vec<S>,
}

impl<S: Scalar> SegmentFeatures<S> {
    pub fn at(&self, t: usize, slot: Slot) -> &[S] {
        let row = 3 * t + slot.index();
        &self.z[row * self.d..(row + 1) * self.d]
    }

    /// The (z_obs, z_prop, z_act) triple at the final timestep.
    pub fn last_step(&self) -> (&[S], &[S], &[S]) {
        let t = self.l - 1;
        (self.at(t, Slot::Obs), self.at(t, Slot::Prop), self.at(t, Slot::Act))
    }
}

/// Decoded per-timestep reconstructions, one row-major matrix per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedHeads<S: Scalar> {
    /// `[l, obs.flat()]`
    pub obs: Vec<S>,
    /// `[l, proprio]`
    pub prop: Vec<S>,
    /// `[l, action]`, already through tanh.
    pub act: Vec<S>,
}

/// One segment plus its mask spec, ready for batch assembly.
pub struct BatchItem<'a, S: Scalar> {
    pub transitions: Vec<&'a Transition<S>>,
    pub padded_prefix: usize,
    pub spec: &'a TokenMaskSpec,
}

impl<'a, S: Scalar> BatchItem<'a, S> {
    pub fn from_segment(seg: &'a TrajectorySegment<S>, spec: &'a TokenMaskSpec) -> Self {
        BatchItem {
            transitions: seg.transitions.iter().collect(),
            padded_prefix: seg.padded_prefix,
            spec,
        }
    }
}

/// Flattened model input for `n` segments sharing one attention mode.
///
/// `*_in` matrices are what the trunk sees: masked slots are zeroed here, so
/// hidden values never enter the graph at all (mask opacity is structural,
/// not numerical). `*_tgt` keep the true values for loss targets.
#[derive(Debug, Clone)]
pub struct SegmentBatch<S: Scalar> {
    pub n: usize,
    pub l: usize,
    pub dims: DataDims,
    pub mode: AttentionMode,
    /// `[n*l, obs.flat()]`, masked slots zeroed.
    pub obs_in: Vec<S>,
    /// `[n*l, proprio]`, masked slots zeroed.
    pub prop_in: Vec<S>,
    /// `[n*l, action]`, masked slots zeroed.
    pub act_in: Vec<S>,
    /// `[n*l, obs.flat()]`, true values.
    pub obs_tgt: Vec<S>,
    pub prop_tgt: Vec<S>,
    pub act_tgt: Vec<S>,
    /// Token-level mask flags, length `n*3l`, index `seg*3l + 3t + slot`.
    pub masked: Vec<bool>,
    /// Timestep-level padding flags, length `n*l`.
    pub padded: Vec<bool>,
}

impl<S: Scalar> SegmentBatch<S> {
    pub fn build(
        dims: &DataDims,
        l: usize,
        items: &[BatchItem<'_, S>],
    ) -> Result<Self, TransformerError> {
        if items.is_empty() {
            return Err(TransformerError::EmptyBatch);
        }
        let mode = items[0].spec.mode;
        let n = items.len();
        let (d_o, d_m, d_a) = (dims.obs.flat(), dims.proprio, dims.action);
        let mut batch = SegmentBatch {
            n,
            l,
            dims: *dims,
            mode,
            obs_in: Vec::with_capacity(n * l * d_o),
            prop_in: Vec::with_capacity(n * l * d_m),
            act_in: Vec::with_capacity(n * l * d_a),
            obs_tgt: Vec::with_capacity(n * l * d_o),
            prop_tgt: Vec::with_capacity(n * l * d_m),
            act_tgt: Vec::with_capacity(n * l * d_a),
            masked: Vec::with_capacity(n * 3 * l),
            padded: Vec::with_capacity(n * l),
        };
        for item in items {
            item.spec.validate(l)?;
            if item.spec.mode != mode {
                return Err(TransformerError::MixedAttentionModes);
            }
            if item.transitions.len() != l {
                return Err(TransformerError::SegmentLength {
                    expected: l,
                    got: item.transitions.len(),
                });
            }
            if item.padded_prefix > l {
                return Err(TransformerError::BadPadding {
                    padded_prefix: item.padded_prefix,
                    l,
                });
            }
            for (t, tr) in item.transitions.iter().enumerate() {
                for (slot, values, want) in [
                    (Slot::Obs, &tr.obs, d_o),
                    (Slot::Prop, &tr.proprio, d_m),
                    (Slot::Act, &tr.action, d_a),
                ] {
                    if values.len() != want {
                        return Err(TransformerError::SlotWidth {
                            slot: slot.name(),
                            expected: want,
                            got: values.len(),
                        });
                    }
                    let hidden = item.spec.is_masked(t, slot);
                    let (input, target) = match slot {
                        Slot::Obs => (&mut batch.obs_in, &mut batch.obs_tgt),
                        Slot::Prop => (&mut batch.prop_in, &mut batch.prop_tgt),
                        Slot::Act => (&mut batch.act_in, &mut batch.act_tgt),
                    };
                    target.extend_from_slice(values);
                    if hidden {
                        input.extend(std::iter::repeat_n(S::zero(), want));
                    } else {
                        input.extend_from_slice(values);
                    }
                    batch.masked.push(hidden);
                }
                batch.padded.push(t < item.padded_prefix);
            }
        }
        Ok(batch)
    }

    /// Gather indices of one modality's token rows across the whole batch.
    pub fn slot_rows(n: usize, l: usize, slot: Slot) -> Vec<usize> {
        let mut rows = Vec::with_capacity(n * l);
        for seg in 0..n {
            for t in 0..l {
                rows.push(seg * 3 * l + 3 * t + slot.index());
            }
        }
        rows
    }
}

/// Attention-permission matrix for one segment in causal mode: query `q` may
/// read key `k` iff `k <= q` in interleaved token order.
pub fn causal_allowed(tokens: usize) -> Arc<Vec<bool>> {
    let mut allowed = vec![false; tokens * tokens];
    for q in 0..tokens {
        for k in 0..=q {
            allowed[q * tokens + k] = true;
        }
    }
    Arc::new(allowed)
}

/// Graph leaves for every parameter, in store order.
pub struct Binding {
    pub ids: Vec<TensorId>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn inventory(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let (d_o, d_m, d_a) = (cfg.dims.obs.flat(), cfg.dims.proprio, cfg.dims.action);
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    for (tag, width) in [("obs", d_o), ("prop", d_m), ("act", d_a)] {
        push(format!("embed.{tag}.w"), vec![width, d], Init::Normal);
        push(format!("embed.{tag}.b"), vec![d], Init::Zeros);
    }
    push("embed.mask".into(), vec![1, d], Init::Normal);
    push("embed.pos".into(), vec![cfg.l, d], Init::Normal);
    push("embed.type".into(), vec![3, d], Init::Normal);
    for i in 0..cfg.n_layers {
        push(format!("layers.{i}.ln1.g"), vec![d], Init::Ones);
        push(format!("layers.{i}.ln1.b"), vec![d], Init::Zeros);
        for proj in ["q", "k", "v", "o"] {
            push(format!("layers.{i}.attn.w{proj}"), vec![d, d], Init::Normal);
            push(format!("layers.{i}.attn.b{proj}"), vec![d], Init::Zeros);
        }
        push(format!("layers.{i}.ln2.g"), vec![d], Init::Ones);
        push(format!("layers.{i}.ln2.b"), vec![d], Init::Zeros);
        push(format!("layers.{i}.mlp.w1"), vec![d, 4 * d], Init::Normal);
        push(format!("layers.{i}.mlp.b1"), vec![4 * d], Init::Zeros);
        push(format!("layers.{i}.mlp.w2"), vec![4 * d, d], Init::Normal);
        push(format!("layers.{i}.mlp.b2"), vec![d], Init::Zeros);
    }
    push("ln_f.g".into(), vec![d], Init::Ones);
    push("ln_f.b".into(), vec![d], Init::Zeros);
    for (tag, width) in [("obs", d_o), ("prop", d_m), ("act", d_a)] {
        push(format!("head.{tag}.w1"), vec![d, d], Init::Normal);
        push(format!("head.{tag}.b1"), vec![d], Init::Zeros);
        push(format!("head.{tag}.w2"), vec![d, width], Init::Normal);
        push(format!("head.{tag}.b2"), vec![width], Init::Zeros);
    }
    out
}

/// The encoder trunk, embeddings and decoder heads as one parameter store.
#[derive(Debug, Clone)]
pub struct SwbtModel<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> SwbtModel<S> {
    /// Fresh parameters: weights and embeddings N(0, 0.02), biases zero,
    /// layer-norm gains one. Deterministic per seed.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, TransformerError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model-init", 0));
        let normal = Normal::new(0.0, INIT_STD).expect("finite std");
        let mut params = ParamStore::new();
        for (name, shape, init) in inventory(&cfg) {
            let count = shape.iter().product::<usize>();
            let values: Vec<S> = match init {
                Init::Normal => (0..count)
                    .map(|_| S::from_f64(normal.sample(&mut rng)))
                    .collect(),
                Init::Zeros => vec![S::zero(); count],
                Init::Ones => vec![S::one(); count],
            };
            let tensor = Tensor::new(shape, values)?;
            params.insert(&name, tensor)?;
        }
        Ok(SwbtModel { cfg, params })
    }

    /// Wraps an existing store, checking it holds exactly the parameters this
    /// config expects.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore<S>) -> Result<Self, TransformerError> {
        cfg.validate()?;
        let model = SwbtModel { cfg, params };
        model.check_inventory()?;
        Ok(model)
    }

    fn check_inventory(&self) -> Result<(), TransformerError> {
        let expected = inventory(&self.cfg);
        if self.params.len() != expected.len() {
            return Err(TransformerError::UnexpectedParamCount {
                expected: expected.len(),
                got: self.params.len(),
            });
        }
        for (name, shape, _) in expected {
            let p = self
                .params
                .get(&name)
                .map_err(|_| TransformerError::MissingParam { name: name.clone() })?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(TransformerError::WrongParamShape {
                    name,
                    expected: shape,
                    got: p.tensor.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn total_params(&self) -> usize {
        self.params.total_values()
    }

    /// Creates one graph leaf per parameter. Call once per graph.
    pub fn bind(&self, g: &mut Graph<S>) -> Binding {
        Binding {
            ids: self.params.iter().map(|(_, p)| g.param_leaf(p)).collect(),
        }
    }

    fn p(&self, b: &Binding, name: &str) -> TensorId {
        let idx = self.params.index_of(name).expect("known parameter name");
        b.ids[idx]
    }

    fn check_batch(&self, batch: &SegmentBatch<S>) -> Result<(), TransformerError> {
        if batch.l != self.cfg.l {
            return Err(TransformerError::BatchMismatch { field: "l" });
        }
        if batch.dims != self.cfg.dims {
            return Err(TransformerError::BatchMismatch { field: "dims" });
        }
        Ok(())
    }

    /// Builds the `[n*3l, d]` token matrix: per-modality linear projections,
    /// interleaved, masked slots swapped for the MASK embedding, plus
    /// positional and modality-type embeddings.
    fn token_rows(
        &self,
        g: &mut Graph<S>,
        b: &Binding,
        batch: &SegmentBatch<S>,
    ) -> Result<TensorId, TransformerError> {
        let (n, l, d) = (batch.n, self.cfg.l, self.cfg.d_model);
        let nrows = n * l;
        let mut projected = Vec::with_capacity(3);
        for (slot, input) in [
            (Slot::Obs, &batch.obs_in),
            (Slot::Prop, &batch.prop_in),
            (Slot::Act, &batch.act_in),
        ] {
            let raw = g.constant(vec![nrows, slot.width(&self.cfg.dims)], input.clone())?;
            let w = self.p(b, &format!("embed.{}.w", slot.name()));
            let bias = self.p(b, &format!("embed.{}.b", slot.name()));
            let mm = g.matmul(raw, w)?;
            projected.push(g.add_row(mm, bias)?);
        }
        let stacked = g.concat_rows(&projected)?;

        let nn = n * 3 * l;
        let mut interleave = Vec::with_capacity(nn);
        let mut pos_idx = Vec::with_capacity(nn);
        let mut typ_idx = Vec::with_capacity(nn);
        let mut sel_idx = Vec::with_capacity(nn);
        let mut keep = Vec::with_capacity(nn * d);
        for seg in 0..n {
            for t in 0..l {
                for slot in 0..3 {
                    interleave.push(slot * nrows + seg * l + t);
                    pos_idx.push(t);
                    typ_idx.push(slot);
                    let hidden = batch.masked[seg * 3 * l + 3 * t + slot];
                    sel_idx.push(usize::from(!hidden));
                    let fill = if hidden { S::zero() } else { S::one() };
                    keep.extend(std::iter::repeat_n(fill, d));
                }
            }
        }
        let content = g.gather_rows(stacked, Arc::new(interleave))?;
        let keep_c = g.constant(vec![nn, d], keep)?;
        let kept = g.mul(content, keep_c)?;
        let zero_row = g.constant(vec![1, d], vec![S::zero(); d])?;
        let mask_table = g.concat_rows(&[self.p(b, "embed.mask"), zero_row])?;
        let mask_part = g.gather_rows(mask_table, Arc::new(sel_idx))?;
        let pos = g.gather_rows(self.p(b, "embed.pos"), Arc::new(pos_idx))?;
        let typ = g.gather_rows(self.p(b, "embed.type"), Arc::new(typ_idx))?;
        let with_mask = g.add(kept, mask_part)?;
        let with_pos = g.add(with_mask, pos)?;
        Ok(g.add(with_pos, typ)?)
    }

    /// Trunk output `[n*3l, d]` after the final layer norm. Inference
    /// semantics: dropout off regardless of config.
    pub fn forward_features(
        &self,
        g: &mut Graph<S>,
        b: &Binding,
        batch: &SegmentBatch<S>,
    ) -> Result<TensorId, TransformerError> {
        self.forward_impl(g, b, batch, None)
    }

    /// Training forward: applies dropout when the config asks for it.
    pub fn forward_features_train(
        &self,
        g: &mut Graph<S>,
        b: &Binding,
        batch: &SegmentBatch<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId, TransformerError> {
        self.forward_impl(g, b, batch, Some(rng))
    }

    fn forward_impl(
        &self,
        g: &mut Graph<S>,
        b: &Binding,
        batch: &SegmentBatch<S>,
        mut drop_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId, TransformerError> {
        self.check_batch(batch)?;
        let (n, d) = (batch.n, self.cfg.d_model);
        let l3 = 3 * self.cfg.l;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let allowed = match batch.mode {
            AttentionMode::Bidirectional => None,
            AttentionMode::Causal => Some(causal_allowed(l3)),
        };

        let mut x = self.token_rows(g, b, batch)?;
        for i in 0..self.cfg.n_layers {
            let pre = g.layer_norm(
                x,
                self.p(b, &format!("layers.{i}.ln1.g")),
                self.p(b, &format!("layers.{i}.ln1.b")),
                LN_EPS,
            )?;
            let mut qkv = [0usize; 3];
            for (j, proj) in ["q", "k", "v"].into_iter().enumerate() {
                let w = self.p(b, &format!("layers.{i}.attn.w{proj}"));
                let bias = self.p(b, &format!("layers.{i}.attn.b{proj}"));
                let mm = g.matmul(pre, w)?;
                qkv[j] = g.add_row(mm, bias)?;
            }
            let mut seg_outs = Vec::with_capacity(n);
            for seg in 0..n {
                let qs = g.narrow(qkv[0], 0, seg * l3, l3)?;
                let ks = g.narrow(qkv[1], 0, seg * l3, l3)?;
                let vs = g.narrow(qkv[2], 0, seg * l3, l3)?;
                let mut head_outs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qh = g.narrow(qs, 1, h * dh, dh)?;
                    let kh = g.narrow(ks, 1, h * dh, dh)?;
                    let vh = g.narrow(vs, 1, h * dh, dh)?;
                    let kt = g.transpose(kh)?;
                    let raw = g.matmul(qh, kt)?;
                    let scores = g.scale(raw, scale)?;
                    let probs = g.softmax_rows(scores, allowed.clone())?;
                    head_outs.push(g.matmul(probs, vh)?);
                }
                seg_outs.push(g.concat_cols(&head_outs)?);
            }
            let cat = g.concat_rows(&seg_outs)?;
            let proj = g.matmul(cat, self.p(b, &format!("layers.{i}.attn.wo")))?;
            let mut attn = g.add_row(proj, self.p(b, &format!("layers.{i}.attn.bo")))?;
            attn = self.maybe_dropout(g, attn, &mut drop_rng)?;
            x = g.add(x, attn)?;

            let pre2 = g.layer_norm(
                x,
                self.p(b, &format!("layers.{i}.ln2.g")),
                self.p(b, &format!("layers.{i}.ln2.b")),
                LN_EPS,
            )?;
            let mm1 = g.matmul(pre2, self.p(b, &format!("layers.{i}.mlp.w1")))?;
            let h1 = g.add_row(mm1, self.p(b, &format!("layers.{i}.mlp.b1")))?;
            let h1 = g.gelu(h1)?;
            let mm2 = g.matmul(h1, self.p(b, &format!("layers.{i}.mlp.w2")))?;
            let mut m2 = g.add_row(mm2, self.p(b, &format!("layers.{i}.mlp.b2")))?;
            m2 = self.maybe_dropout(g, m2, &mut drop_rng)?;
            x = g.add(x, m2)?;
        }
        Ok(g.layer_norm(x, self.p(b, "ln_f.g"), self.p(b, "ln_f.b"), LN_EPS)?)
    }

    fn maybe_dropout(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
        drop_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId, TransformerError> {
        if self.cfg.dropout <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = drop_rng.as_deref_mut() else {
            return Ok(x);
        };
        use rand::Rng;
        let keep_prob = 1.0 - self.cfg.dropout;
        let count = g.value(x).len();
        let keep: Vec<bool> = (0..count).map(|_| rng.gen::<f64>() < keep_prob).collect();
        Ok(g.dropout(x, Arc::new(keep), keep_prob)?)
    }

    /// One decoder head applied to `[rows, d]` features. The action head ends
    /// in tanh so outputs respect the action bounds.
    pub fn head(
        &self,
        g: &mut Graph<S>,
        b: &Binding,
        rows: TensorId,
        slot: Slot,
    ) -> Result<TensorId, TransformerError> {
        let tag = slot.name();
        let mm1 = g.matmul(rows, self.p(b, &format!("head.{tag}.w1")))?;
        let h = g.add_row(mm1, self.p(b, &format!("head.{tag}.b1")))?;
        let h = g.gelu(h)?;
        let mm2 = g.matmul(h, self.p(b, &format!("head.{tag}.w2")))?;
        let out = g.add_row(mm2, self.p(b, &format!("head.{tag}.b2")))?;
        Ok(match slot {
            Slot::Act => g.tanh(out)?,
            _ => out,
        })
    }

    /// Token embeddings for one segment, `[3l, d]`.
    pub fn tokenize(
        &self,
        segment: &TrajectorySegment<S>,
        spec: &TokenMaskSpec,
    ) -> Result<Tensor<S>, TransformerError> {
        let batch = SegmentBatch::build(
            &self.cfg.dims,
            self.cfg.l,
            &[BatchItem::from_segment(segment, spec)],
        )?;
        let mut g = Graph::new().with_debug_checks(true);
        let b = self.bind(&mut g);
        let x = self.token_rows(&mut g, &b, &batch)?;
        Ok(g.to_tensor(x))
    }

    /// Trunk features for one segment.
    pub fn encode(
        &self,
        segment: &TrajectorySegment<S>,
        spec: &TokenMaskSpec,
    ) -> Result<SegmentFeatures<S>, TransformerError> {
        let batch = SegmentBatch::build(
            &self.cfg.dims,
            self.cfg.l,
            &[BatchItem::from_segment(segment, spec)],
        )?;
        let mut g = Graph::new().with_debug_checks(true);
        let b = self.bind(&mut g);
        let f = self.forward_features(&mut g, &b, &batch)?;
        Ok(SegmentFeatures {
            l: self.cfg.l,
            d: self.cfg.d_model,
            z: g.value(f).to_vec(),
        })
    }

    /// All three heads over one segment's features.
    pub fn decode_heads(
        &self,
        features: &SegmentFeatures<S>,
    ) -> Result<DecodedHeads<S>, TransformerError> {
        if features.l != self.cfg.l || features.d != self.cfg.d_model {
            return Err(TransformerError::BatchMismatch { field: "features" });
        }
        let mut g = Graph::new().with_debug_checks(true);
        let b = self.bind(&mut g);
        let feats = Tensor::new(vec![3 * self.cfg.l, self.cfg.d_model], features.z.clone())?;
        let leaf = g.leaf(&feats, false);
        let mut out: [Vec<S>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for slot in Slot::ALL {
            let rows = SegmentBatch::<S>::slot_rows(1, self.cfg.l, slot);
            let gathered = g.gather_rows(leaf, Arc::new(rows))?;
            let decoded = self.head(&mut g, &b, gathered, slot)?;
            out[slot.index()] = g.value(decoded).to_vec();
        }
        let [obs, prop, act] = out;
        Ok(DecodedHeads { obs, prop, act })
    }

    /// The deployment-time policy output: causal forward with every action
    /// slot masked, action head at the final timestep.
    pub fn predict_action(
        &self,
        segment: &TrajectorySegment<S>,
    ) -> Result<Vec<S>, TransformerError> {
        let spec = TokenMaskSpec::causal(self.cfg.l);
        let batch = SegmentBatch::build(
            &self.cfg.dims,
            self.cfg.l,
            &[BatchItem::from_segment(segment, &spec)],
        )?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let f = self.forward_features(&mut g, &b, &batch)?;
        let last_act_row = 3 * (self.cfg.l - 1) + Slot::Act.index();
        let row = g.narrow(f, 0, last_act_row, 1)?;
        let a = self.head(&mut g, &b, row, Slot::Act)?;
        Ok(g.value(a).to_vec())
    }

    /// Pulls gradients off a graph's parameter leaves into the store,
    /// accumulating over repeated calls.
    pub fn apply_graph_grads(
        &mut self,
        g: &Graph<S>,
        b: &Binding,
    ) -> Result<(), TransformerError> {
        for (idx, id) in b.ids.iter().enumerate() {
            if let Some(grad) = g.grad(*id) {
                let grad = grad.to_vec();
                self.params.at_mut(idx).tensor.accumulate_grad(&grad)?;
            }
        }
        Ok(())
    }

    /// Writes parameters plus config (and caller metadata) to a checkpoint.
    pub fn save(
        &self,
        path: &Path,
        extra: &BTreeMap<String, String>,
    ) -> Result<(), TransformerError> {
        let mut meta = extra.clone();
        meta.insert(
            "model_config".to_string(),
            serde_json::to_string(&self.cfg).expect("config serializes"),
        );
        save_checkpoint(path, &self.params, &meta)?;
        Ok(())
    }

    /// Restores a model saved by `save`, returning the stored metadata too.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>), TransformerError> {
        let (params, manifest) = load_checkpoint::<S>(path)?;
        let cfg_json = manifest
            .meta
            .get("model_config")
            .ok_or(TransformerError::MetaMissing { key: "model_config" })?;
        let cfg: ModelConfig =
            serde_json::from_str(cfg_json).map_err(|e| TransformerError::BadMeta {
                key: "model_config",
                detail: e.to_string(),
            })?;
        let model = SwbtModel::from_parts(cfg, params)?;
        Ok((model, manifest.meta))
    }
}

/// Drives the simulator with a trained model: keeps a rolling window of the
/// last `l` rendered observations and predicts each action causally. Action
/// history entries are stored as zeros; causal mode masks them anyway.
pub struct PolicyFromModel<S: Scalar> {
    model: SwbtModel<S>,
    env: Env,
    history: VecDeque<Transition<S>>,
}

impl<S: Scalar> PolicyFromModel<S> {
    /// The model must match the simulator's data dims and emit 3-dof actions.
    pub fn new(model: SwbtModel<S>, env: Env) -> Result<Self, TransformerError> {
        if model.cfg.dims != DESK_DIMS {
            return Err(TransformerError::BatchMismatch { field: "dims" });
        }
        Ok(PolicyFromModel {
            model,
            env,
            history: VecDeque::new(),
        })
    }

    pub fn model(&self) -> &SwbtModel<S> {
        &self.model
    }

    pub fn into_model(self) -> SwbtModel<S> {
        self.model
    }
}

impl<S: Scalar> Policy for PolicyFromModel<S> {
    fn begin_episode(&mut self, _rng: &mut ChaCha8Rng) {
        self.history.clear();
    }

    fn act(&mut self, state: &EnvState, _rng: &mut ChaCha8Rng) -> [f64; 3] {
        let l = self.model.cfg.l;
        let (obs, proprio) = self.env.render_obs::<S>(state);
        self.history.push_back(Transition {
            obs,
            proprio,
            action: vec![S::zero(); self.model.cfg.dims.action],
        });
        if self.history.len() > l {
            self.history.pop_front();
        }
        let padded_prefix = l - self.history.len();
        let mut transitions = Vec::with_capacity(l);
        let first = self.history.front().expect("just pushed").clone();
        for _ in 0..padded_prefix {
            transitions.push(first.clone());
        }
        transitions.extend(self.history.iter().cloned());
        let segment = TrajectorySegment {
            transitions,
            origin: SegmentOrigin { trajectory: 0, start: 0 },
            padded_prefix,
        };
        let a = self
            .model
            .predict_action(&segment)
            .expect("dims validated at construction");
        [a[0].as_f64(), a[1].as_f64(), a[2].as_f64()]
    }
}
