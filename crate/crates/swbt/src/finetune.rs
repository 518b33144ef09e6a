//! Stage 3: behavior cloning on expert segments plus quality-weighted
//! reserved segments, with the degenerate baseline configurations.
//!
//! Each step draws an expert batch and (when the weight and the reserved set
//! allow it) an equally sized reserved batch, runs the trunk causally, and
//! supervises only the final-timestep action: the loss is the mean squared
//! action error over the expert batch plus `lambda` times the quality-score
//! weighted mean over the reserved batch. Setting `lambda` to zero, or
//! fine-tuning with an empty reserved set, never builds the reserved branch,
//! so such runs are bit-identical to expert-only cloning.
//!
//! [`run_swbt`] chains the whole pipeline: pretrain on the union, score and
//! filter the imperfect set, then fine-tune from the configured init.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{segment_refs, DataError, DemoDataset, Role, SegmentRef};
use crate::envsim::Env;
use crate::numcore::{
    adam_step, zero_grads, AdamConfig, Graph, TensorError, TensorId,
};
use crate::pretrain::{pretrain, PretrainConfig, PretrainError, PretrainLog};
use crate::scoring::{
    filtered_refs, score_segments, QualityTable, ScoringError, SimilarityConfig,
};
use crate::transformer::{
    AttentionMode, BatchItem, Binding, ModelConfig, PolicyFromModel, SegmentBatch, Slot,
    SwbtModel, TokenMaskSpec, TransformerError,
};
use crate::util::{derive_seed, fmt_f64};
use crate::Scalar;

#[derive(Debug)]
pub enum FinetuneError {
    EmptyExpertSet,
    ZeroField(&'static str),
    BadLambda(f64),
    BadBeta(f64),
    BadLearningRate(f64),
    BadQuality(f64),
    WeightCount { rows: usize, weights: usize },
    NeedsCausal,
    Pretrain(PretrainError),
    Scoring(ScoringError),
    Transformer(TransformerError),
    Tensor(TensorError),
    Data(DataError),
    Io(io::Error),
}

impl fmt::Display for FinetuneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FinetuneError::EmptyExpertSet => {
                write!(f, "fine-tuning needs at least one expert segment")
            }
            FinetuneError::ZeroField(name) => write!(f, "{name} must be at least 1"),
            FinetuneError::BadLambda(v) => {
                write!(f, "imperfect-term weight {v} must be finite and >= 0")
            }
            FinetuneError::BadBeta(v) => write!(f, "threshold {v} is outside [0, 1]"),
            FinetuneError::BadLearningRate(v) => {
                write!(f, "learning rate {v} must be finite and positive")
            }
            FinetuneError::BadQuality(v) => {
                write!(f, "quality weight {v} is outside [0, 1]")
            }
            FinetuneError::WeightCount { rows, weights } => {
                write!(f, "reserved batch has {rows} segments but {weights} weights")
            }
            FinetuneError::NeedsCausal => {
                write!(f, "cloning batches must use causal attention")
            }
            FinetuneError::Pretrain(e) => write!(f, "pretraining stage: {e}"),
            FinetuneError::Scoring(e) => write!(f, "scoring stage: {e}"),
            FinetuneError::Transformer(e) => write!(f, "model error: {e}"),
            FinetuneError::Tensor(e) => write!(f, "tensor error: {e}"),
            FinetuneError::Data(e) => write!(f, "dataset error: {e}"),
            FinetuneError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for FinetuneError {}

impl From<PretrainError> for FinetuneError {
    fn from(e: PretrainError) -> Self {
        FinetuneError::Pretrain(e)
    }
}

impl From<ScoringError> for FinetuneError {
    fn from(e: ScoringError) -> Self {
        FinetuneError::Scoring(e)
    }
}

impl From<TransformerError> for FinetuneError {
    fn from(e: TransformerError) -> Self {
        FinetuneError::Transformer(e)
    }
}

impl From<TensorError> for FinetuneError {
    fn from(e: TensorError) -> Self {
        FinetuneError::Tensor(e)
    }
}

impl From<DataError> for FinetuneError {
    fn from(e: DataError) -> Self {
        FinetuneError::Data(e)
    }
}

impl From<io::Error> for FinetuneError {
    fn from(e: io::Error) -> Self {
        FinetuneError::Io(e)
    }
}

/// Where fine-tuning starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Parameters from the pretraining stage (the full method, and the
    /// pretrain-only ablation when combined with lambda = 0).
    Pretrained,
    /// Fresh random parameters (the plain cloning baselines).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Weight on the reserved-segment cloning term.
    pub lambda: f64,
    /// Quality threshold the reserved set was (re)filtered at. Recorded in
    /// artifacts; [`run_swbt`] applies it to the quality table.
    pub beta: f64,
    /// Segments per term per step; expert and reserved batches are the same
    /// size.
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub init: InitMode,
    pub seed: u64,
    /// Evaluation cadence in optimizer steps.
    pub eval_every: usize,
    /// Episodes per evaluation point.
    pub eval_episodes: usize,
    /// Seed for the fixed evaluation episode set; shared by every checkpoint
    /// of a run so success rates are comparable.
    pub eval_seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lambda: 0.1,
            beta: 0.9,
            batch_size: 64,
            steps: 20_000,
            lr: 3e-4,
            init: InitMode::Pretrained,
            seed: 0,
            eval_every: 1000,
            eval_episodes: 50,
            eval_seed: 777_000,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(FinetuneError::BadLambda(self.lambda));
        }
        if !(0.0..=1.0).contains(&self.beta) || self.beta.is_nan() {
            return Err(FinetuneError::BadBeta(self.beta));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(FinetuneError::BadLearningRate(self.lr));
        }
        for (v, name) in [
            (self.batch_size, "batch_size"),
            (self.steps, "steps"),
            (self.eval_every, "eval_every"),
            (self.eval_episodes, "eval_episodes"),
        ] {
            if v == 0 {
                return Err(FinetuneError::ZeroField(name));
            }
        }
        Ok(())
    }
}

/// Feature rows of each segment's final action slot in a causal batch.
fn final_action_rows(n: usize, l: usize) -> Vec<usize> {
    (0..n).map(|seg| seg * 3 * l + 3 * (l - 1) + Slot::Act.index()).collect()
}

/// Builds one cloning term: forward the batch causally, decode the final
/// action of every segment, and sum per-row weighted squared errors.
fn cloning_term<S: Scalar>(
    model: &SwbtModel<S>,
    g: &mut Graph<S>,
    bnd: &Binding,
    batch: &SegmentBatch<S>,
    row_weights: Vec<f64>,
    drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, FinetuneError> {
    if batch.mode != AttentionMode::Causal {
        return Err(FinetuneError::NeedsCausal);
    }
    let (n, l) = (batch.n, batch.l);
    let feats = match drop_rng {
        Some(rng) => model.forward_features_train(g, bnd, batch, rng)?,
        None => model.forward_features(g, bnd, batch)?,
    };
    let rows = g.gather_rows(feats, Arc::new(final_action_rows(n, l)))?;
    let pred = model.head(g, bnd, rows, Slot::Act)?;
    let width = batch.dims.action;
    let mut targets = Vec::with_capacity(n * width);
    for seg in 0..n {
        let base = (seg * l + (l - 1)) * width;
        targets.extend_from_slice(&batch.act_tgt[base..base + width]);
    }
    let tgt = g.constant(vec![n, width], targets)?;
    let w: Vec<S> = row_weights.into_iter().map(S::from_f64).collect();
    Ok(g.weighted_sse(pred, tgt, Arc::new(w))?)
}

/// Similarity-weighted cloning loss: `mean_e ||a_hat - a||^2 + lambda *
/// mean_f q * ||a_hat - a||^2`, final-timestep actions only. The reserved
/// term is skipped structurally when `lambda` is zero or `reserved` is
/// absent, leaving a graph identical to expert-only cloning.
pub fn loss_weighted_bc<S: Scalar>(
    model: &SwbtModel<S>,
    g: &mut Graph<S>,
    bnd: &Binding,
    batch_e: &SegmentBatch<S>,
    reserved: Option<(&SegmentBatch<S>, &[f64])>,
    lambda: f64,
    mut drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, FinetuneError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(FinetuneError::BadLambda(lambda));
    }
    let expert_w = vec![1.0 / batch_e.n as f64; batch_e.n];
    let expert = cloning_term(model, g, bnd, batch_e, expert_w, drop_rng.as_deref_mut())?;
    let reserved = match reserved {
        Some((batch, qs)) if lambda > 0.0 => {
            if qs.len() != batch.n {
                return Err(FinetuneError::WeightCount {
                    rows: batch.n,
                    weights: qs.len(),
                });
            }
            if let Some(&q) = qs.iter().find(|q| !(0.0..=1.0).contains(*q)) {
                return Err(FinetuneError::BadQuality(q));
            }
            let w: Vec<f64> = qs.iter().map(|q| lambda * q / batch.n as f64).collect();
            Some(cloning_term(model, g, bnd, batch, w, drop_rng)?)
        }
        _ => None,
    };
    match reserved {
        Some(r) => Ok(g.add(expert, r)?),
        None => Ok(expert),
    }
}

/// One training-time evaluation: success rate and the mean training loss
/// since the previous point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub success_rate: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalLog {
    pub points: Vec<EvalPoint>,
}

impl EvalLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,success_rate,loss\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{}\n",
                p.step,
                fmt_f64(p.success_rate),
                fmt_f64(p.loss)
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), io::Error> {
        fs::write(path, self.to_csv())
    }

    /// Mean success rate of the last `k` checkpoints (or all, if fewer).
    pub fn final_metric(&self, k: usize) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let tail = &self.points[self.points.len().saturating_sub(k)..];
        tail.iter().map(|p| p.success_rate).sum::<f64>() / tail.len() as f64
    }
}

/// Checkpoints averaged into the reported final success rate.
pub const FINAL_METRIC_CHECKPOINTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub eval: EvalLog,
    /// Mean success over the last [`FINAL_METRIC_CHECKPOINTS`] eval points.
    pub final_success: f64,
}

/// Rolls the current parameters out as a policy for a batch of episodes.
pub fn evaluate_model<S: Scalar>(
    model: &SwbtModel<S>,
    env: &Env,
    episodes: usize,
    seed: u64,
) -> Result<f64, FinetuneError> {
    let mut policy = PolicyFromModel::new(model.clone(), env.clone())?;
    Ok(env.evaluate(&mut policy, episodes, seed))
}

/// Adam on the weighted cloning loss, evaluating every `eval_every` steps
/// and once at the end. `reserved` points into `imperfect`; pass an empty
/// slice for the expert-only baselines. Deterministic per config: segment
/// draws come from per-step derived streams, and the expert stream is
/// independent of whether the reserved branch runs.
pub fn finetune<S: Scalar>(
    model: &mut SwbtModel<S>,
    env: &Env,
    expert: &DemoDataset<S>,
    reserved: &[(SegmentRef, f64)],
    imperfect: &DemoDataset<S>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome, FinetuneError> {
    cfg.validate()?;
    let l = model.cfg.l;
    let exp_refs = segment_refs(expert, l).map_err(|e| match e {
        DataError::EmptyDataset => FinetuneError::EmptyExpertSet,
        other => FinetuneError::Data(other),
    })?;
    let use_reserved = cfg.lambda > 0.0 && !reserved.is_empty();
    let spec = TokenMaskSpec::causal(l);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };

    let mut eval = EvalLog::default();
    let mut window_loss = 0.0f64;
    let mut window_n = 0usize;
    for step in 0..cfg.steps {
        let mut rng_e =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "finetune-expert", step as u64));
        let items_e: Vec<BatchItem<'_, S>> = (0..cfg.batch_size)
            .map(|_| {
                let r = &exp_refs[rng_e.gen_range(0..exp_refs.len())];
                BatchItem {
                    transitions: expert.resolve(r, l),
                    padded_prefix: r.padded_prefix,
                    spec: &spec,
                }
            })
            .collect();
        let batch_e = SegmentBatch::build(&model.cfg.dims, l, &items_e)?;

        let picked: Option<(Vec<BatchItem<'_, S>>, Vec<f64>)> = if use_reserved {
            let mut rng_f = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                "finetune-reserved",
                step as u64,
            ));
            let mut items = Vec::with_capacity(cfg.batch_size);
            let mut qs = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (r, q) = &reserved[rng_f.gen_range(0..reserved.len())];
                items.push(BatchItem {
                    transitions: imperfect.resolve(r, l),
                    padded_prefix: r.padded_prefix,
                    spec: &spec,
                });
                qs.push(*q);
            }
            Some((items, qs))
        } else {
            None
        };
        let batch_f = match &picked {
            Some((items, qs)) => Some((SegmentBatch::build(&model.cfg.dims, l, items)?, qs)),
            None => None,
        };

        let mut g = Graph::new();
        let bnd = model.bind(&mut g);
        let mut drop_rng = (model.cfg.dropout > 0.0).then(|| {
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "finetune-drop", step as u64))
        });
        let total = loss_weighted_bc(
            model,
            &mut g,
            &bnd,
            &batch_e,
            batch_f.as_ref().map(|(b, qs)| (b, qs.as_slice())),
            cfg.lambda,
            drop_rng.as_mut(),
        )?;
        g.backward(total)?;
        model.apply_graph_grads(&g, &bnd)?;
        adam_step(&mut model.params, &adam);
        zero_grads(&mut model.params);
        window_loss += g.value(total)[0].as_f64();
        window_n += 1;

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let rate = evaluate_model(model, env, cfg.eval_episodes, cfg.eval_seed)?;
            eval.points.push(EvalPoint {
                step: step + 1,
                success_rate: rate,
                loss: window_loss / window_n as f64,
            });
            window_loss = 0.0;
            window_n = 0;
        }
    }
    let final_success = eval.final_metric(FINAL_METRIC_CHECKPOINTS);
    Ok(FinetuneOutcome {
        eval,
        final_success,
    })
}

/// Everything the pipeline produces besides the policy itself.
#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub pretrain_log: PretrainLog,
    pub quality: QualityTable,
    pub outcome: FinetuneOutcome,
}

/// The full three-stage pipeline: pretrain on the union of both datasets,
/// score and filter the imperfect segments with the pretrained features,
/// fine-tune from the configured init. The quality table is filtered at
/// `fin_cfg.beta`. When `out` is given, each stage's artifacts are persisted
/// there as they complete.
#[allow(clippy::too_many_arguments)] // one config per stage, by design
pub fn run_swbt<S: Scalar>(
    env: &Env,
    expert: &DemoDataset<S>,
    imperfect: &DemoDataset<S>,
    model_cfg: &ModelConfig,
    pre_cfg: &PretrainConfig,
    sim_cfg: &SimilarityConfig,
    fin_cfg: &FinetuneConfig,
    out: Option<&Path>,
) -> Result<(SwbtModel<S>, PipelineArtifacts), FinetuneError> {
    fin_cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }

    let mut pool = expert.clone();
    pool.role = Role::Union;
    pool.meta.role = Role::Union;
    pool.trajectories
        .extend(imperfect.trajectories.iter().cloned());

    let mut pre_model = SwbtModel::<S>::new(model_cfg.clone(), pre_cfg.seed)?;
    let pretrain_log = pretrain(&mut pre_model, &pool, pre_cfg)?;
    if let Some(dir) = out {
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "pretrain".to_string());
        meta.insert("seed".to_string(), pre_cfg.seed.to_string());
        pre_model.save(&dir.join("pretrained.ckpt"), &meta)?;
        pretrain_log.save(&dir.join("pretrain_log.csv"))?;
    }

    let mut quality = if imperfect.trajectories.is_empty() {
        QualityTable {
            beta: fin_cfg.beta,
            rows: Vec::new(),
        }
    } else {
        score_segments(&pre_model, expert, imperfect, sim_cfg)?
    };
    quality.refilter(fin_cfg.beta).map_err(FinetuneError::Scoring)?;
    let reserved = filtered_refs(&quality, imperfect, model_cfg.l)?;
    if let Some(dir) = out {
        quality.save(&dir.join("quality.csv"))?;
        quality.save_histogram(&dir.join("quality_histogram.csv"))?;
    }

    let mut model = match fin_cfg.init {
        InitMode::Pretrained => pre_model,
        InitMode::Random => SwbtModel::new(model_cfg.clone(), fin_cfg.seed)?,
    };
    let outcome = finetune(&mut model, env, expert, &reserved, imperfect, fin_cfg)?;
    if let Some(dir) = out {
        outcome.eval.save(&dir.join("eval_log.csv"))?;
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "finetune".to_string());
        meta.insert("seed".to_string(), fin_cfg.seed.to_string());
        meta.insert(
            "final_success".to_string(),
            fmt_f64(outcome.final_success),
        );
        model.save(&dir.join("policy.ckpt"), &meta)?;
    }

    Ok((
        model,
        PipelineArtifacts {
            pretrain_log,
            quality,
            outcome,
        },
    ))
}
