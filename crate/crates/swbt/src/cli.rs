//! Command-line experiment runner.
//!
//! Every pipeline stage is a subcommand working through files on disk, so a
//! full experiment is a short shell script: `gen-data` rolls out scripted
//! policies, `pretrain` fits the encoder on the pooled demonstrations,
//! `score` writes the segment quality table, `finetune` trains the policy
//! and drops a run report, `eval` measures any checkpoint, `sweep` repeats
//! fine-tuning across one varied parameter, and `report` aggregates run
//! reports into a comparison table.
//!
//! Experiments are described by a sectioned key = value config file:
//!
//! ```text
//! [experiment]
//! seed = 7
//!
//! [model]
//! d_model = 64
//! l = 6
//!
//! [pretrain]
//! steps = 3000
//! mask_probs = 0.4, 0.3, 0.2, 0.1
//!
//! [scoring]
//! metric = neg-l2
//! beta = 0.9
//!
//! [finetune]
//! lambda = 0.1
//! steps = 4000
//! ```
//!
//! Missing keys fall back to the desk-scale defaults, and stage seeds
//! default to the global `experiment.seed`. Every artifact a run writes
//! embeds the hash of the config that produced it: CSV files carry a
//! leading `# config_hash=...` comment and checkpoints store it in their
//! metadata, so any result file can be traced back to its exact recipe.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{
    load_dataset, save_dataset, DataError, DatasetMeta, DemoDataset, Role,
};
use crate::envsim::{preset, preset_names, Env, ScriptedPolicy};
use crate::finetune::{
    evaluate_model, finetune, run_swbt, EvalLog, FinetuneConfig, FinetuneError, FinetuneOutcome,
    InitMode,
};
use crate::pretrain::{pretrain, PretrainConfig, PretrainError};
use crate::scoring::{
    filtered_refs, score_segments, FeatureScope, QualityTable, ScoringError, SimilarityConfig,
    SimilarityMetric, SCORE_HISTOGRAM_BINS,
};
use crate::transformer::{ModelConfig, SwbtModel, TransformerError};
use crate::util::{derive_seed, fmt_f64};
use crate::Scalar;

/// The command line trains in the f32 profile; f64 stays a library-only
/// verification mode.
type Model = SwbtModel<f32>;
type Dataset = DemoDataset<f32>;

#[derive(Debug)]
pub enum CliError {
    /// Config file or argument combination problems, with the offending
    /// detail spelled out.
    Config(String),
    UnknownLevel(String),
    UnknownSweepParam(String),
    BadSweepValue { param: &'static str, value: String },
    /// A required input file is absent; names the subcommand that creates it.
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        produced_by: &'static str,
    },
    /// Checkpoint model shape disagrees with the config file.
    CheckpointMismatch(PathBuf),
    /// Any lower-level failure, tagged with the pipeline stage it hit.
    Stage { stage: &'static str, detail: String },
    Pretrain(PretrainError),
    Scoring(ScoringError),
    Finetune(FinetuneError),
    Transformer(TransformerError),
    Data(DataError),
    Io(io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(detail) => write!(f, "config: {detail}"),
            CliError::UnknownLevel(name) => write!(
                f,
                "unknown policy level {name:?}; known levels: {}",
                preset_names().join(", ")
            ),
            CliError::UnknownSweepParam(p) => write!(
                f,
                "unknown sweep parameter {p:?}; supported: beta, metric, level, ratio"
            ),
            CliError::BadSweepValue { param, value } => {
                write!(f, "sweep value {value:?} is not a valid {param}")
            }
            CliError::MissingArtifact {
                what,
                path,
                produced_by,
            } => write!(
                f,
                "missing {what}: {} (produce it with `swbt {produced_by}`)",
                path.display()
            ),
            CliError::CheckpointMismatch(path) => write!(
                f,
                "checkpoint {} was trained with a different model configuration than the config file",
                path.display()
            ),
            CliError::Stage { stage, detail } => write!(f, "{stage}: {detail}"),
            CliError::Pretrain(e) => write!(f, "{e}"),
            CliError::Scoring(e) => write!(f, "{e}"),
            CliError::Finetune(e) => write!(f, "{e}"),
            CliError::Transformer(e) => write!(f, "{e}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "io: {e}"),
            CliError::Json(e) => write!(f, "json: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    /// Wraps the error with the stage name once; existing tags are kept.
    fn with_stage(self, stage: &'static str) -> CliError {
        match self {
            CliError::Stage { .. } => self,
            other => CliError::Stage {
                stage,
                detail: other.to_string(),
            },
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        CliError::Pretrain(e)
    }
}

impl From<ScoringError> for CliError {
    fn from(e: ScoringError) -> Self {
        CliError::Scoring(e)
    }
}

impl From<FinetuneError> for CliError {
    fn from(e: FinetuneError) -> Self {
        CliError::Finetune(e)
    }
}

impl From<TransformerError> for CliError {
    fn from(e: TransformerError) -> Self {
        CliError::Transformer(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Json(e)
    }
}

/// Parses `[section]` / `key = value` text. Blank lines and `#` comments are
/// skipped; a repeated key keeps its last value.
fn parse_sections(text: &str) -> Result<BTreeMap<String, BTreeMap<String, String>>, CliError> {
    let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = inner.trim().to_string();
            out.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "line {}: expected `key = value` or `[section]`, got {raw:?}",
                ln + 1
            ))
        })?;
        let section = current.clone().ok_or_else(|| {
            CliError::Config(format!("line {}: key {:?} outside any [section]", ln + 1, k.trim()))
        })?;
        out.get_mut(&section)
            .expect("section entry exists")
            .insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("[{section}] {key}: cannot parse {v:?}")))
}

fn parse_f64_list(section: &str, key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(section, key, s))
        .collect()
}

fn parse_name_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn unknown_key(section: &str, key: &str) -> CliError {
    CliError::Config(format!("[{section}] has no key {key:?}"))
}

fn parse_scope(v: &str) -> Result<FeatureScope, CliError> {
    match v {
        "last-step" => Ok(FeatureScope::LastStep),
        "whole-segment" => Ok(FeatureScope::WholeSegment),
        _ => Err(CliError::Config(format!(
            "[scoring] scope must be last-step or whole-segment, got {v:?}"
        ))),
    }
}

fn parse_metric(v: &str) -> Result<SimilarityMetric, CliError> {
    match v {
        "neg-l2" => Ok(SimilarityMetric::NegL2),
        "cosine" => Ok(SimilarityMetric::Cosine),
        _ => Err(CliError::Config(format!(
            "[scoring] metric must be neg-l2 or cosine, got {v:?}"
        ))),
    }
}

fn parse_init(v: &str) -> Result<InitMode, CliError> {
    match v {
        "pretrained" => Ok(InitMode::Pretrained),
        "random" => Ok(InitMode::Random),
        _ => Err(CliError::Config(format!(
            "[finetune] init must be pretrained or random, got {v:?}"
        ))),
    }
}

/// How sweeps source their imperfect demonstrations when they generate data
/// themselves (the `level` and `ratio` parameters).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSpec {
    pub expert_episodes: usize,
    pub expert_seed: u64,
    pub imperfect_levels: Vec<String>,
    pub imperfect_episodes: usize,
    pub imperfect_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            expert_episodes: 50,
            expert_seed: 100,
            imperfect_levels: vec!["level090".to_string()],
            imperfect_episodes: 150,
            imperfect_seed: 200,
        }
    }
}

/// One experiment recipe: every stage's configuration in one place.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env_preset: String,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub scoring: SimilarityConfig,
    pub finetune: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            env_preset: "desk".to_string(),
            data: DataSpec::default(),
            model: ModelConfig::desk(),
            pretrain: PretrainConfig::default(),
            scoring: SimilarityConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Parses config text over the desk defaults. Stage seeds left unset
    /// fall back to the global seed.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let sections = parse_sections(text)?;
        let mut cfg = ExperimentConfig::default();
        let mut pretrain_seed_set = false;
        let mut finetune_seed_set = false;
        for (section, pairs) in &sections {
            match section.as_str() {
                "experiment" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "seed" => cfg.seed = parse_value(section, k, v)?,
                            _ => return Err(unknown_key(section, k)),
                        }
                    }
                }
                "env" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "preset" => cfg.env_preset = v.clone(),
                            _ => return Err(unknown_key(section, k)),
                        }
                    }
                }
                "data" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "expert_episodes" => {
                                cfg.data.expert_episodes = parse_value(section, k, v)?
                            }
                            "expert_seed" => cfg.data.expert_seed = parse_value(section, k, v)?,
                            "imperfect_levels" => cfg.data.imperfect_levels = parse_name_list(v),
                            "imperfect_episodes" => {
                                cfg.data.imperfect_episodes = parse_value(section, k, v)?
                            }
                            "imperfect_seed" => {
                                cfg.data.imperfect_seed = parse_value(section, k, v)?
                            }
                            _ => return Err(unknown_key(section, k)),
                        }
                    }
                }
                "model" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "d_model" => cfg.model.d_model = parse_value(section, k, v)?,
                            "n_layers" => cfg.model.n_layers = parse_value(section, k, v)?,
                            "n_heads" => cfg.model.n_heads = parse_value(section, k, v)?,
                            "l" => cfg.model.l = parse_value(section, k, v)?,
                            "dropout" => cfg.model.dropout = parse_value(section, k, v)?,
                            _ => return Err(unknown_key(section, k)),
                        }
                    }
                }
                "pretrain" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "mask_probs" => {
                                cfg.pretrain.mask_prob_choices = parse_f64_list(section, k, v)?
                            }
                            "batch_size" => cfg.pretrain.batch_size = parse_value(section, k, v)?,
                            "steps" => cfg.pretrain.steps = parse_value(section, k, v)?,
                            "lr" => cfg.pretrain.lr = parse_value(section, k, v)?,
                            "weight_mtp" => {
                                cfg.pretrain.loss_weights.mtp = parse_value(section, k, v)?
                            }
                            "weight_tr" => {
                                cfg.pretrain.loss_weights.tr = parse_value(section, k, v)?
                            }
                            "weight_aa" => {
                                cfg.pretrain.loss_weights.aa = parse_value(section, k, v)?
                            }
                            "seed" => {
                                cfg.pretrain.seed = parse_value(section, k, v)?;
                                pretrain_seed_set = true;
                            }
                            _ => return Err(unknown_key(section, k)),
                        }
                    }
                }
                "scoring" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "scope" => cfg.scoring.scope = parse_scope(v)?,
                            "metric" => cfg.scoring.metric = parse_metric(v)?,
                            "beta" => cfg.scoring.beta = parse_value(section, k, v)?,
                            _ => return Err(unknown_key(section, k)),
                        }
                    }
                }
                "finetune" => {
                    for (k, v) in pairs {
                        match k.as_str() {
                            "lambda" => cfg.finetune.lambda = parse_value(section, k, v)?,
                            "beta" => cfg.finetune.beta = parse_value(section, k, v)?,
                            "batch_size" => cfg.finetune.batch_size = parse_value(section, k, v)?,
                            "steps" => cfg.finetune.steps = parse_value(section, k, v)?,
                            "lr" => cfg.finetune.lr = parse_value(section, k, v)?,
                            "init" => cfg.finetune.init = parse_init(v)?,
                            "seed" => {
                                cfg.finetune.seed = parse_value(section, k, v)?;
                                finetune_seed_set = true;
                            }
                            "eval_every" => cfg.finetune.eval_every = parse_value(section, k, v)?,
                            "eval_episodes" => {
                                cfg.finetune.eval_episodes = parse_value(section, k, v)?
                            }
                            "eval_seed" => cfg.finetune.eval_seed = parse_value(section, k, v)?,
                            _ => return Err(unknown_key(section, k)),
                        }
                    }
                }
                _ => return Err(CliError::Config(format!("unknown section [{section}]"))),
            }
        }
        if !pretrain_seed_set {
            cfg.pretrain.seed = cfg.seed;
        }
        if !finetune_seed_set {
            cfg.finetune.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Re-seeds the whole recipe: global and both stage seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.env_preset != "desk" {
            return Err(CliError::Config(format!(
                "[env] preset {:?} is not available; this build ships only \"desk\"",
                self.env_preset
            )));
        }
        for level in &self.data.imperfect_levels {
            if preset(level).is_none() {
                return Err(CliError::UnknownLevel(level.clone()));
            }
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.scoring.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&bytes)[..16].to_string()
    }

    /// Like [`config_hash`](Self::config_hash) but with every seed zeroed,
    /// so runs that differ only in randomness share a group.
    pub fn group_hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.pretrain.seed = 0;
        c.finetune.seed = 0;
        c.finetune.eval_seed = 0;
        c.data.expert_seed = 0;
        c.data.imperfect_seed = 0;
        c.config_hash()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path)?)[..16].to_string())
}

/// Writes a CSV body behind a `# config_hash=...` provenance line.
fn write_tagged_csv(path: &Path, config_hash: &str, body: &str) -> Result<(), CliError> {
    fs::write(path, format!("# config_hash={config_hash}\n{body}"))?;
    Ok(())
}

fn require_file(
    path: &Path,
    what: &'static str,
    produced_by: &'static str,
) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            what,
            path: path.to_path_buf(),
            produced_by,
        })
    }
}

fn load_expert(path: &Path) -> Result<Dataset, CliError> {
    require_file(path, "expert dataset", "gen-data --level expert")?;
    let ds: Dataset = load_dataset(path)?;
    if ds.role != Role::Expert {
        return Err(CliError::Config(format!(
            "--expert file {} holds a {:?} dataset, expected Expert",
            path.display(),
            ds.role
        )));
    }
    Ok(ds)
}

/// Loads and concatenates the imperfect datasets; an empty list yields an
/// empty dataset shaped like the expert one.
fn load_imperfect(paths: &[PathBuf], expert: &Dataset) -> Result<Dataset, CliError> {
    let mut parts = Vec::with_capacity(paths.len());
    for p in paths {
        require_file(p, "imperfect dataset", "gen-data")?;
        let ds: Dataset = load_dataset(p)?;
        if ds.role != Role::Imperfect {
            return Err(CliError::Config(format!(
                "--imperfect file {} holds a {:?} dataset, expected Imperfect",
                p.display(),
                ds.role
            )));
        }
        if ds.meta.dims != expert.meta.dims {
            return Err(CliError::Config(format!(
                "--imperfect file {} disagrees with the expert dataset on dimensions",
                p.display()
            )));
        }
        parts.push(ds);
    }
    merge_imperfect(parts, expert)
}

fn merge_imperfect(parts: Vec<Dataset>, expert: &Dataset) -> Result<Dataset, CliError> {
    let mut iter = parts.into_iter();
    let Some(mut merged) = iter.next() else {
        return Ok(DemoDataset {
            trajectories: Vec::new(),
            role: Role::Imperfect,
            meta: DatasetMeta {
                dtype: <f32 as Scalar>::DTYPE,
                role: Role::Imperfect,
                dims: expert.meta.dims,
                generator: "empty".to_string(),
                seed: 0,
            },
        });
    };
    for part in iter {
        merged.trajectories.extend(part.trajectories);
        merged.meta.generator.push('\n');
        merged.meta.generator.push_str(&part.meta.generator);
    }
    Ok(merged)
}

fn dataset_hashes(
    expert: &Path,
    imperfect: &[PathBuf],
) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    out.insert("expert".to_string(), hash_file(expert)?);
    for (i, p) in imperfect.iter().enumerate() {
        out.insert(format!("imperfect{i}"), hash_file(p)?);
    }
    Ok(out)
}

fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<Model, CliError> {
    require_file(path, "pretrained checkpoint", "pretrain")?;
    let (model, _meta) = Model::load(path)?;
    if &model.cfg != cfg {
        return Err(CliError::CheckpointMismatch(path.to_path_buf()));
    }
    Ok(model)
}

/// Builds the union pool pretraining runs on: expert plus imperfect, with
/// expert trajectories first.
fn union_pool(expert: &Dataset, imperfect: &Dataset) -> Dataset {
    let mut pool = expert.clone();
    pool.role = Role::Union;
    pool.meta.role = Role::Union;
    pool.trajectories
        .extend(imperfect.trajectories.iter().cloned());
    pool
}

/// Everything one fine-tuning run leaves behind, as stored in report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub config_hash: String,
    pub group_hash: String,
    pub env_preset: String,
    pub seed: u64,
    pub dataset_hashes: BTreeMap<String, String>,
    pub reserved_segments: usize,
    pub final_success: f64,
    pub checkpoints: EvalLog,
    pub quality_histogram: Vec<usize>,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        require_file(path, "run report", "finetune")?;
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "swbt",
    version,
    about = "Similarity-weighted behavior cloning on a scripted desk manipulation task"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Roll out one scripted policy level and save the demonstrations.
    GenData {
        /// Policy level name, e.g. expert or level090.
        #[arg(long)]
        level: String,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining on the pooled demonstrations.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        /// Repeatable; the pool is expert plus all imperfect files.
        #[arg(long = "imperfect")]
        imperfect: Vec<PathBuf>,
        /// Output directory for pretrained.ckpt and pretrain_log.csv.
        #[arg(long)]
        out: PathBuf,
        /// Re-seed the whole recipe, overriding the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score imperfect segments by similarity to expert behavior.
    Score {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained checkpoint the features come from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long = "imperfect", required = true)]
        imperfect: Vec<PathBuf>,
        /// Output directory for quality.csv and quality_histogram.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavior cloning weighted by segment quality.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long = "imperfect")]
        imperfect: Vec<PathBuf>,
        /// quality.csv from `score` over the same --imperfect files in the
        /// same order; required when lambda > 0 with imperfect data.
        #[arg(long)]
        quality: Option<PathBuf>,
        /// pretrained.ckpt; required when init = pretrained.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for policy.ckpt, eval_log.csv and report.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Report label; defaults to the output directory name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Success rate of a policy checkpoint or a scripted level.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        level: Option<String>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Repeat fine-tuning across one varied parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: beta, metric, level, ratio.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. "0.0,0.5,0.9" or "1:1,1:3".
        #[arg(long)]
        values: String,
        #[arg(long)]
        expert: PathBuf,
        /// Swept data sources for beta and metric; level and ratio generate
        /// their own.
        #[arg(long = "imperfect")]
        imperfect: Vec<PathBuf>,
        /// Output directory; each point gets a subdirectory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run reports into a comparison table.
    Report {
        /// Run directory or report.json path; repeatable.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Optional directory for report.txt and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Collects demonstrations from one scripted level. Returns the number of
/// trajectories kept and the level's measured success rate on a fresh
/// episode stream.
pub fn cmd_gen_data(
    level: &str,
    episodes: usize,
    seed: u64,
    out: &Path,
) -> Result<(usize, f64), CliError> {
    let lv = preset(level).ok_or_else(|| CliError::UnknownLevel(level.to_string()))?;
    let env = Env::default();
    let role = if level == "expert" {
        Role::Expert
    } else {
        Role::Imperfect
    };
    let mut policy = ScriptedPolicy::new(lv.knobs);
    let ds: Dataset = env.collect(
        &mut policy,
        episodes,
        seed,
        level,
        role,
        format!("scripted:{level} episodes={episodes} seed={seed}"),
    )?;
    ensure_parent(out)?;
    save_dataset(out, &ds)?;
    let mut fresh = ScriptedPolicy::new(lv.knobs);
    let measured = env.evaluate(&mut fresh, episodes, derive_seed(seed, "gen-data-measure", 0));
    Ok((ds.trajectories.len(), measured))
}

/// Pretrains on expert plus imperfect data. Returns the checkpoint path and
/// the mean total loss over the last logged steps.
pub fn cmd_pretrain(
    config: &Path,
    expert_path: &Path,
    imperfect_paths: &[PathBuf],
    out: &Path,
    seed: Option<u64>,
) -> Result<(PathBuf, f64), CliError> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    let expert = load_expert(expert_path)?;
    let imperfect = load_imperfect(imperfect_paths, &expert)?;
    let pool = union_pool(&expert, &imperfect);
    let mut model = Model::new(cfg.model.clone(), cfg.pretrain.seed)?;
    let log = pretrain(&mut model, &pool, &cfg.pretrain)?;
    ensure_dir(out)?;
    let hash = cfg.config_hash();
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_string(), hash.clone());
    meta.insert("stage".to_string(), "pretrain".to_string());
    meta.insert("seed".to_string(), cfg.pretrain.seed.to_string());
    let ckpt = out.join("pretrained.ckpt");
    model.save(&ckpt, &meta)?;
    write_tagged_csv(&out.join("pretrain_log.csv"), &hash, &log.to_csv())?;
    let tail = log.rows.len().saturating_sub(100);
    let recent = &log.rows[tail..];
    let final_loss = if recent.is_empty() {
        f64::NAN
    } else {
        recent.iter().map(|r| r.total).sum::<f64>() / recent.len() as f64
    };
    Ok((ckpt, final_loss))
}

/// Scores every imperfect segment against the expert set. Returns (rows,
/// kept, beta).
pub fn cmd_score(
    config: &Path,
    checkpoint: &Path,
    expert_path: &Path,
    imperfect_paths: &[PathBuf],
    out: &Path,
) -> Result<(usize, usize, f64), CliError> {
    let cfg = ExperimentConfig::from_file(config)?;
    if imperfect_paths.is_empty() {
        return Err(CliError::Config(
            "score requires at least one --imperfect dataset".to_string(),
        ));
    }
    let model = load_checkpoint(checkpoint, &cfg.model)?;
    let expert = load_expert(expert_path)?;
    let imperfect = load_imperfect(imperfect_paths, &expert)?;
    let table = score_segments(&model, &expert, &imperfect, &cfg.scoring)?;
    ensure_dir(out)?;
    let hash = cfg.config_hash();
    write_tagged_csv(&out.join("quality.csv"), &hash, &table.to_csv())?;
    write_tagged_csv(
        &out.join("quality_histogram.csv"),
        &hash,
        &table.histogram_csv(),
    )?;
    Ok((table.rows.len(), table.kept_count(), cfg.scoring.beta))
}

/// Writes the uniform artifact set for one fine-tuned run and returns its
/// report.
#[allow(clippy::too_many_arguments)]
fn write_run_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    label: &str,
    hashes: BTreeMap<String, String>,
    model: &Model,
    table: &QualityTable,
    outcome: &FinetuneOutcome,
    reserved: usize,
) -> Result<RunReport, CliError> {
    ensure_dir(dir)?;
    let hash = cfg.config_hash();
    write_tagged_csv(&dir.join("quality.csv"), &hash, &table.to_csv())?;
    write_tagged_csv(
        &dir.join("quality_histogram.csv"),
        &hash,
        &table.histogram_csv(),
    )?;
    write_tagged_csv(&dir.join("eval_log.csv"), &hash, &outcome.eval.to_csv())?;
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_string(), hash.clone());
    meta.insert("stage".to_string(), "finetune".to_string());
    meta.insert("seed".to_string(), cfg.finetune.seed.to_string());
    meta.insert("label".to_string(), label.to_string());
    meta.insert(
        "final_success".to_string(),
        fmt_f64(outcome.final_success),
    );
    model.save(&dir.join("policy.ckpt"), &meta)?;
    let report = RunReport {
        label: label.to_string(),
        config_hash: hash,
        group_hash: cfg.group_hash(),
        env_preset: cfg.env_preset.clone(),
        seed: cfg.finetune.seed,
        dataset_hashes: hashes,
        reserved_segments: reserved,
        final_success: outcome.final_success,
        checkpoints: outcome.eval.clone(),
        quality_histogram: table.histogram(SCORE_HISTOGRAM_BINS),
    };
    report.save(&dir.join("report.json"))?;
    Ok(report)
}

fn label_for(label: Option<String>, out: &Path) -> String {
    label.unwrap_or_else(|| {
        out.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string())
    })
}

/// Fine-tunes a policy from saved artifacts and writes a run directory.
#[allow(clippy::too_many_arguments)]
pub fn cmd_finetune(
    config: &Path,
    expert_path: &Path,
    imperfect_paths: &[PathBuf],
    quality_path: Option<&Path>,
    checkpoint_path: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    label: Option<String>,
) -> Result<RunReport, CliError> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    let expert = load_expert(expert_path)?;
    let imperfect = load_imperfect(imperfect_paths, &expert)?;
    let mut model = match (cfg.finetune.init, checkpoint_path) {
        (InitMode::Pretrained, Some(ck)) => load_checkpoint(ck, &cfg.model)?,
        (InitMode::Pretrained, None) => {
            return Err(CliError::Config(
                "finetune.init = pretrained requires --checkpoint from `swbt pretrain`"
                    .to_string(),
            ))
        }
        (InitMode::Random, None) => Model::new(cfg.model.clone(), cfg.finetune.seed)?,
        (InitMode::Random, Some(_)) => {
            return Err(CliError::Config(
                "config sets finetune.init = random but --checkpoint was given; drop one"
                    .to_string(),
            ))
        }
    };
    let needs_quality = cfg.finetune.lambda > 0.0 && !imperfect.trajectories.is_empty();
    let mut table = match (quality_path, needs_quality) {
        (Some(q), _) => {
            require_file(q, "quality table", "score")?;
            QualityTable::load(q, cfg.finetune.beta)?
        }
        (None, true) => {
            return Err(CliError::Config(
                "lambda > 0 with imperfect data requires --quality from `swbt score`"
                    .to_string(),
            ))
        }
        (None, false) => QualityTable {
            beta: cfg.finetune.beta,
            rows: Vec::new(),
        },
    };
    table.refilter(cfg.finetune.beta)?;
    let reserved = filtered_refs(&table, &imperfect, cfg.model.l)?;
    let env = Env::default();
    let outcome = finetune(
        &mut model,
        &env,
        &expert,
        &reserved,
        &imperfect,
        &cfg.finetune,
    )?;
    let hashes = dataset_hashes(expert_path, imperfect_paths)?;
    write_run_artifacts(
        out,
        &cfg,
        &label_for(label, out),
        hashes,
        &model,
        &table,
        &outcome,
        reserved.len(),
    )
}

/// Success rate of either a saved policy or a scripted level over a fixed
/// episode stream.
pub fn cmd_eval(
    checkpoint: Option<&Path>,
    level: Option<&str>,
    episodes: usize,
    seed: u64,
) -> Result<f64, CliError> {
    let env = Env::default();
    match (checkpoint, level) {
        (Some(ck), None) => {
            require_file(ck, "policy checkpoint", "finetune")?;
            let (model, _meta) = Model::load(ck)?;
            Ok(evaluate_model(&model, &env, episodes, seed)?)
        }
        (None, Some(lv)) => {
            let p = preset(lv).ok_or_else(|| CliError::UnknownLevel(lv.to_string()))?;
            let mut policy = ScriptedPolicy::new(p.knobs);
            Ok(env.evaluate(&mut policy, episodes, seed))
        }
        _ => Err(CliError::Config(
            "eval needs exactly one of --checkpoint or --level".to_string(),
        )),
    }
}

/// One sweep point's summary line.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub success_rate: f64,
    pub reserved_segments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepParam {
    Beta,
    Metric,
    Level,
    Ratio,
}

fn parse_sweep_param(p: &str) -> Result<SweepParam, CliError> {
    match p {
        "beta" => Ok(SweepParam::Beta),
        "metric" => Ok(SweepParam::Metric),
        "level" => Ok(SweepParam::Level),
        "ratio" => Ok(SweepParam::Ratio),
        _ => Err(CliError::UnknownSweepParam(p.to_string())),
    }
}

fn parse_beta_value(v: &str) -> Result<f64, CliError> {
    let bad = || CliError::BadSweepValue {
        param: "beta in [0, 1]",
        value: v.to_string(),
    };
    let b: f64 = v.parse().map_err(|_| bad())?;
    if (0.0..=1.0).contains(&b) {
        Ok(b)
    } else {
        Err(bad())
    }
}

fn parse_metric_value(v: &str) -> Result<(FeatureScope, SimilarityMetric), CliError> {
    match v {
        "last-l2" => Ok((FeatureScope::LastStep, SimilarityMetric::NegL2)),
        "last-cosine" => Ok((FeatureScope::LastStep, SimilarityMetric::Cosine)),
        "seg-l2" => Ok((FeatureScope::WholeSegment, SimilarityMetric::NegL2)),
        "seg-cosine" => Ok((FeatureScope::WholeSegment, SimilarityMetric::Cosine)),
        _ => Err(CliError::BadSweepValue {
            param: "metric (last-l2, last-cosine, seg-l2, seg-cosine)",
            value: v.to_string(),
        }),
    }
}

/// "a:b" giving b imperfect episodes per a expert episodes; a must be
/// nonzero.
fn parse_ratio_value(v: &str) -> Result<(u32, u32), CliError> {
    let bad = || CliError::BadSweepValue {
        param: "ratio of the form a:b with a > 0",
        value: v.to_string(),
    };
    let (a, b) = v.split_once(':').ok_or_else(bad)?;
    let a: u32 = a.trim().parse().map_err(|_| bad())?;
    let b: u32 = b.trim().parse().map_err(|_| bad())?;
    if a == 0 {
        return Err(bad());
    }
    Ok((a, b))
}

/// Directory-safe form of a sweep value.
fn slug(v: &str) -> String {
    v.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// One fine-tuned sweep point on a shared pretrained model. `table` reuses
/// an existing scoring pass; None scores here with `sim`.
#[allow(clippy::too_many_arguments)]
fn finetune_point(
    env: &Env,
    cfg: &ExperimentConfig,
    expert: &Dataset,
    imperfect: &Dataset,
    pre_model: &Model,
    table: Option<&QualityTable>,
    sim: &SimilarityConfig,
    fin: &FinetuneConfig,
    label: &str,
    hashes: BTreeMap<String, String>,
    dir: &Path,
) -> Result<RunReport, CliError> {
    let mut table = match table {
        Some(t) => t.clone(),
        None => {
            if imperfect.trajectories.is_empty() {
                QualityTable {
                    beta: fin.beta,
                    rows: Vec::new(),
                }
            } else {
                score_segments(pre_model, expert, imperfect, sim)?
            }
        }
    };
    table.refilter(fin.beta)?;
    let reserved = filtered_refs(&table, imperfect, cfg.model.l)?;
    let mut model = match fin.init {
        InitMode::Pretrained => pre_model.clone(),
        InitMode::Random => Model::new(cfg.model.clone(), fin.seed)?,
    };
    let outcome = finetune(&mut model, env, expert, &reserved, imperfect, fin)?;
    let mut effective = cfg.clone();
    effective.scoring = *sim;
    effective.finetune = fin.clone();
    write_run_artifacts(
        dir,
        &effective,
        label,
        hashes,
        &model,
        &table,
        &outcome,
        reserved.len(),
    )
}

/// Full pipeline for one sweep point that owns its data (level and ratio
/// sweeps): pretrain, score, fine-tune, then write the run directory plus
/// the pretraining artifacts.
#[allow(clippy::too_many_arguments)]
fn pipeline_point(
    env: &Env,
    cfg: &ExperimentConfig,
    expert: &Dataset,
    imperfect: &Dataset,
    label: &str,
    hashes: BTreeMap<String, String>,
    dir: &Path,
) -> Result<RunReport, CliError> {
    ensure_dir(dir)?;
    let (model, artifacts) = run_swbt(
        env,
        expert,
        imperfect,
        &cfg.model,
        &cfg.pretrain,
        &cfg.scoring,
        &cfg.finetune,
        None,
    )?;
    let hash = cfg.config_hash();
    write_tagged_csv(
        &dir.join("pretrain_log.csv"),
        &hash,
        &artifacts.pretrain_log.to_csv(),
    )?;
    write_run_artifacts(
        dir,
        cfg,
        label,
        hashes,
        &model,
        &artifacts.quality,
        &artifacts.outcome,
        artifacts.quality.kept_count(),
    )
}

/// Runs one point per swept value and writes `sweep_summary.csv`.
pub fn cmd_sweep(
    config: &Path,
    param: &str,
    values: &str,
    expert_path: &Path,
    imperfect_paths: &[PathBuf],
    out: &Path,
) -> Result<Vec<SweepRow>, CliError> {
    let cfg = ExperimentConfig::from_file(config)?;
    let param = parse_sweep_param(param)?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if values.is_empty() {
        return Err(CliError::Config("sweep got an empty --values list".to_string()));
    }
    let expert = load_expert(expert_path)?;
    let env = Env::default();
    ensure_dir(out)?;
    let mut rows = Vec::with_capacity(values.len());

    match param {
        SweepParam::Beta | SweepParam::Metric => {
            if imperfect_paths.is_empty() {
                return Err(CliError::Config(
                    "beta and metric sweeps require --imperfect data".to_string(),
                ));
            }
            let imperfect = load_imperfect(imperfect_paths, &expert)?;
            let hashes = dataset_hashes(expert_path, imperfect_paths)?;
            // One pretraining pass feeds every point.
            let pool = union_pool(&expert, &imperfect);
            let mut pre_model = Model::new(cfg.model.clone(), cfg.pretrain.seed)?;
            let log = pretrain(&mut pre_model, &pool, &cfg.pretrain)?;
            let hash = cfg.config_hash();
            let mut meta = BTreeMap::new();
            meta.insert("config_hash".to_string(), hash.clone());
            meta.insert("stage".to_string(), "pretrain".to_string());
            meta.insert("seed".to_string(), cfg.pretrain.seed.to_string());
            pre_model.save(&out.join("pretrained.ckpt"), &meta)?;
            write_tagged_csv(&out.join("pretrain_log.csv"), &hash, &log.to_csv())?;
            let base_table = match param {
                // Beta points refilter one shared table.
                SweepParam::Beta => {
                    Some(score_segments(&pre_model, &expert, &imperfect, &cfg.scoring)?)
                }
                _ => None,
            };
            for v in &values {
                let (sim, fin, dir_name) = match param {
                    SweepParam::Beta => {
                        let beta = parse_beta_value(v)?;
                        let mut fin = cfg.finetune.clone();
                        fin.beta = beta;
                        (cfg.scoring, fin, format!("beta-{}", slug(v)))
                    }
                    _ => {
                        let (scope, metric) = parse_metric_value(v)?;
                        let mut sim = cfg.scoring;
                        sim.scope = scope;
                        sim.metric = metric;
                        (sim, cfg.finetune.clone(), format!("metric-{}", slug(v)))
                    }
                };
                let report = finetune_point(
                    &env,
                    &cfg,
                    &expert,
                    &imperfect,
                    &pre_model,
                    base_table.as_ref(),
                    &sim,
                    &fin,
                    v,
                    hashes.clone(),
                    &out.join(dir_name),
                )?;
                rows.push(SweepRow {
                    value: v.clone(),
                    success_rate: report.final_success,
                    reserved_segments: report.reserved_segments,
                });
            }
        }
        SweepParam::Level | SweepParam::Ratio => {
            if !imperfect_paths.is_empty() {
                return Err(CliError::Config(
                    "level and ratio sweeps generate their own imperfect data; drop --imperfect"
                        .to_string(),
                ));
            }
            // (level name, episode count, point label) per point.
            let mut points = Vec::new();
            for v in &values {
                match param {
                    SweepParam::Level => {
                        if preset(v).is_none() {
                            return Err(CliError::UnknownLevel(v.clone()));
                        }
                        points.push((v.clone(), cfg.data.imperfect_episodes, v.clone()));
                    }
                    _ => {
                        let (a, b) = parse_ratio_value(v)?;
                        let episodes =
                            cfg.data.expert_episodes * b as usize / a as usize;
                        for level in &cfg.data.imperfect_levels {
                            points.push((level.clone(), episodes, format!("{v}@{level}")));
                        }
                    }
                }
            }
            for (level, episodes, label) in points {
                let dir = out.join(slug(&label));
                ensure_dir(&dir)?;
                let lv = preset(&level).ok_or_else(|| CliError::UnknownLevel(level.clone()))?;
                let mut policy = ScriptedPolicy::new(lv.knobs);
                let imperfect: Dataset = env.collect(
                    &mut policy,
                    episodes,
                    derive_seed(cfg.data.imperfect_seed, &level, 0),
                    &level,
                    Role::Imperfect,
                    format!("scripted:{level} episodes={episodes}"),
                )?;
                let data_path = dir.join("imperfect.swbtds");
                save_dataset(&data_path, &imperfect)?;
                let mut hashes = BTreeMap::new();
                hashes.insert("expert".to_string(), hash_file(expert_path)?);
                hashes.insert("imperfect0".to_string(), hash_file(&data_path)?);
                let report =
                    pipeline_point(&env, &cfg, &expert, &imperfect, &label, hashes, &dir)?;
                rows.push(SweepRow {
                    value: label,
                    success_rate: report.final_success,
                    reserved_segments: report.reserved_segments,
                });
            }
        }
    }

    let mut body = String::from("value,success_rate,reserved_segments\n");
    for r in &rows {
        body.push_str(&format!(
            "{},{:.6},{}\n",
            r.value, r.success_rate, r.reserved_segments
        ));
    }
    write_tagged_csv(&out.join("sweep_summary.csv"), &cfg.config_hash(), &body)?;
    Ok(rows)
}

/// Renders grouped run reports as an aligned text table and a CSV.
/// Groups follow first appearance order; runs with the same group hash
/// (config modulo seeds) aggregate into one row.
pub fn render_report(reports: &[RunReport]) -> (String, String) {
    let mut groups: Vec<(String, Vec<&RunReport>)> = Vec::new();
    for r in reports {
        match groups.iter_mut().find(|(g, _)| *g == r.group_hash) {
            Some((_, members)) => members.push(r),
            None => groups.push((r.group_hash.clone(), vec![r])),
        }
    }

    let mut table: Vec<[String; 8]> = vec![[
        "label".to_string(),
        "env".to_string(),
        "runs".to_string(),
        "seeds".to_string(),
        "mean".to_string(),
        "min".to_string(),
        "max".to_string(),
        "reserved".to_string(),
    ]];
    let mut csv = String::from(
        "group_hash,label,env,runs,seeds,mean_success,min_success,max_success,mean_reserved\n",
    );
    let mut histograms = Vec::new();
    for (hash, members) in &groups {
        let n = members.len();
        let mean = members.iter().map(|r| r.final_success).sum::<f64>() / n as f64;
        let min = members
            .iter()
            .map(|r| r.final_success)
            .fold(f64::INFINITY, f64::min);
        let max = members
            .iter()
            .map(|r| r.final_success)
            .fold(f64::NEG_INFINITY, f64::max);
        let reserved =
            members.iter().map(|r| r.reserved_segments).sum::<usize>() as f64 / n as f64;
        let seeds: Vec<String> = members.iter().map(|r| r.seed.to_string()).collect();
        let seeds = seeds.join("+");
        let label = &members[0].label;
        let env = &members[0].env_preset;
        table.push([
            label.clone(),
            env.clone(),
            n.to_string(),
            seeds.clone(),
            format!("{mean:.3}"),
            format!("{min:.3}"),
            format!("{max:.3}"),
            format!("{reserved:.1}"),
        ]);
        csv.push_str(&format!(
            "{hash},{label},{env},{n},{seeds},{mean:.6},{min:.6},{max:.6},{reserved:.1}\n"
        ));
        let mut agg = vec![0usize; SCORE_HISTOGRAM_BINS];
        for r in members {
            for (i, c) in r.quality_histogram.iter().enumerate() {
                if i < agg.len() {
                    agg[i] += c;
                }
            }
        }
        if agg.iter().any(|&c| c > 0) {
            histograms.push((label.clone(), agg));
        }
    }

    let mut widths = [0usize; 8];
    for row in &table {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    let presets: Vec<&String> = {
        let mut seen = Vec::new();
        for r in reports {
            if !seen.contains(&&r.env_preset) {
                seen.push(&r.env_preset);
            }
        }
        seen
    };
    if presets.len() > 1 {
        let names: Vec<&str> = presets.iter().map(|s| s.as_str()).collect();
        text.push_str(&format!(
            "warning: runs span multiple environment presets: {}\n\n",
            names.join(", ")
        ));
    }
    text.push_str(&format!(
        "{} runs in {} groups (success from the final eval checkpoints)\n\n",
        reports.len(),
        groups.len()
    ));
    for row in &table {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{cell:<w$}", w = widths[i]));
        }
        text.push_str(line.trim_end());
        text.push('\n');
    }
    for (label, agg) in &histograms {
        let counts: Vec<String> = agg.iter().map(|c| c.to_string()).collect();
        text.push_str(&format!(
            "\nquality histogram {} (20 bins over [0, 1]): {}\n",
            label,
            counts.join(" ")
        ));
    }
    (text, csv)
}

/// Loads reports from run directories or report.json paths and aggregates
/// them. Returns the rendered text.
pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<String, CliError> {
    let mut reports = Vec::with_capacity(runs.len());
    for p in runs {
        let path = if p.is_dir() { p.join("report.json") } else { p.clone() };
        reports.push(RunReport::load(&path)?);
    }
    let (text, csv) = render_report(&reports);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        fs::write(dir.join("report.txt"), &text)?;
        fs::write(dir.join("report.csv"), &csv)?;
    }
    Ok(text)
}

/// Dispatches a parsed command line, printing each command's summary.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            level,
            episodes,
            seed,
            out,
        } => {
            let (kept, measured) = cmd_gen_data(&level, episodes, seed, &out)
                .map_err(|e| e.with_stage("gen-data"))?;
            println!(
                "wrote {kept} trajectories from {episodes} episodes of {level} to {}; measured success {}",
                out.display(),
                fmt_f64(measured)
            );
        }
        Command::Pretrain {
            config,
            expert,
            imperfect,
            out,
            seed,
        } => {
            let (ckpt, loss) = cmd_pretrain(&config, &expert, &imperfect, &out, seed)
                .map_err(|e| e.with_stage("pretrain"))?;
            println!(
                "pretraining done; final loss {:.4}; checkpoint {}",
                loss,
                ckpt.display()
            );
        }
        Command::Score {
            config,
            checkpoint,
            expert,
            imperfect,
            out,
        } => {
            let (rows, kept, beta) = cmd_score(&config, &checkpoint, &expert, &imperfect, &out)
                .map_err(|e| e.with_stage("score"))?;
            println!(
                "scored {rows} segments; {kept} reserved at beta {}; table in {}",
                fmt_f64(beta),
                out.display()
            );
        }
        Command::Finetune {
            config,
            expert,
            imperfect,
            quality,
            checkpoint,
            out,
            seed,
            label,
        } => {
            let report = cmd_finetune(
                &config,
                &expert,
                &imperfect,
                quality.as_deref(),
                checkpoint.as_deref(),
                &out,
                seed,
                label,
            )
            .map_err(|e| e.with_stage("finetune"))?;
            println!(
                "fine-tuned {}; final success {}; {} reserved segments; artifacts in {}",
                report.label,
                fmt_f64(report.final_success),
                report.reserved_segments,
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            level,
            episodes,
            seed,
        } => {
            let rate = cmd_eval(checkpoint.as_deref(), level.as_deref(), episodes, seed)
                .map_err(|e| e.with_stage("eval"))?;
            println!("success rate {} over {episodes} episodes", fmt_f64(rate));
        }
        Command::Sweep {
            config,
            param,
            values,
            expert,
            imperfect,
            out,
        } => {
            let rows = cmd_sweep(&config, &param, &values, &expert, &imperfect, &out)
                .map_err(|e| e.with_stage("sweep"))?;
            for r in &rows {
                println!(
                    "{}: success {:.3}, {} reserved segments",
                    r.value, r.success_rate, r.reserved_segments
                );
            }
            println!("summary in {}", out.join("sweep_summary.csv").display());
        }
        Command::Report { runs, out } => {
            let text = cmd_report(&runs, out.as_deref()).map_err(|e| e.with_stage("report"))?;
            print!("{text}");
        }
    }
    Ok(())
}
