//! Pipeline configuration and the in-memory stages the command line drives.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cache::{local_search, CacheConfig, SearchOutcome, SearchProblem};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::compression::CompressionSpec;
use crate::corpus::{bins_from_ends, BinRange, SyntheticCorpus, TokenId, Vocabulary};
use crate::eval::{evaluate, CacheParams, EvalOptions};
use crate::model::{Activation, Engine, HebbianConfig, ModelConfig, ModelState, SoftmaxMode};
use crate::prune::{plan, prune_train, PruneConfig, PrunePlan, SensitivityCurve};
use crate::quant::{quantize_model, QuantConfig};
use crate::score::{score_model, BinProfile, ScoreReport, SparseFormat};
use crate::train::{extract_teacher_labels, train, TeacherLabels, TrainConfig, TrainData, TrainOutcome, TEACHER_TOP_K};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic,
    /// Directory holding `train.txt`, `valid.txt` and `test.txt`.
    Text(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    pub train_tokens: usize,
    pub valid_tokens: usize,
    pub test_tokens: usize,
    /// Fractions of the vocabulary per frequency bin, most frequent first.
    pub bin_fractions: Vec<f64>,
    pub reserve_unk: bool,
    pub language_seed: u64,
    pub seed: u64,
    pub synthetic: SyntheticCorpus,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            source: CorpusSource::Synthetic,
            train_tokens: 2_000_000,
            valid_tokens: 50_000,
            test_tokens: 50_000,
            bin_fractions: vec![0.05, 0.2, 0.75],
            reserve_unk: true,
            language_seed: 1,
            seed: 2,
            synthetic: SyntheticCorpus::default(),
        }
    }
}

/// Architecture, with vocabulary bins either fixed here or taken from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Inclusive last id of each bin; empty means use the corpus bins.
    pub bin_ends: Vec<usize>,
    pub embed_dims: Vec<usize>,
    pub context: usize,
    pub extended_context: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::full_scale();
        ModelSection {
            bin_ends: m.bins.iter().map(|b| b.last as usize).collect(),
            embed_dims: m.bins.iter().map(|b| b.dim).collect(),
            context: m.context,
            extended_context: m.extended_context,
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_k: m.d_k,
            d_v: m.d_v,
            d_ff: m.d_ff,
            dropout: m.dropout,
            activation: m.activation,
            layer_norm_eps: m.layer_norm_eps,
            init_std: m.init_std,
            seed: 1,
        }
    }
}

impl ModelSection {
    /// Model configuration over `data_bins`, or over `bin_ends` when set.
    pub fn build(&self, data_bins: Option<&[BinRange]>) -> Result<ModelConfig> {
        let bins = match (self.bin_ends.is_empty(), data_bins) {
            (false, data) => {
                let v = *self.bin_ends.last().expect("non-empty");
                let own = bins_from_ends(v, &self.bin_ends).map_err(|e| Error::config(e.to_string()))?;
                if let Some(d) = data {
                    let dv = d.last().map_or(0, |b| b.last as usize);
                    if dv != v {
                        return Err(Error::config(format!(
                            "model.bin_ends cover {v} ids but the corpus vocabulary has {dv}"
                        )));
                    }
                }
                own
            }
            (true, Some(d)) => d.to_vec(),
            (true, None) => return Err(Error::config("model.bin_ends is empty and no corpus is available")),
        };
        let cfg = ModelConfig {
            bins: ModelConfig::bins_from_ranges(&bins, &self.embed_dims)?,
            context: self.context,
            extended_context: self.extended_context,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_k: self.d_k,
            d_v: self.d_v,
            d_ff: self.d_ff,
            dropout: self.dropout,
            activation: self.activation,
            layer_norm_eps: self.layer_norm_eps,
            init_std: self.init_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub top_k: usize,
    /// Training-stream prefix labelled by the teacher and used for
    /// distillation; 0 labels the whole stream.
    pub label_tokens: usize,
    pub teacher_model: ModelSection,
    pub teacher_train: TrainConfig,
    /// The teacher trains without the cache.
    pub teacher_cache: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            top_k: TEACHER_TOP_K,
            label_tokens: 0,
            teacher_model: ModelSection {
                embed_dims: vec![512, 256, 16],
                n_layers: 16,
                d_model: 512,
                n_heads: 8,
                d_k: 64,
                d_v: 64,
                d_ff: 1536,
                dropout: 0.1,
                ..ModelSection::default()
            },
            teacher_train: TrainConfig {
                lr: 5e-4,
                ..TrainConfig::default()
            },
            teacher_cache: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub sparse_format: SparseFormat,
    pub softmax_mode: SoftmaxMode,
    /// Cache entries charged per token; 0 uses `cache.search_size`.
    pub cache_size: usize,
    /// Validation tokens for stage metrics; 0 uses the whole split.
    pub eval_tokens: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            sparse_format: SparseFormat::Bitmask,
            softmax_mode: SoftmaxMode::Full,
            cache_size: 0,
            eval_tokens: 0,
        }
    }
}

pub const STAGES: [&str; 10] = [
    "prepare-data",
    "train",
    "train-teacher",
    "distill",
    "prune",
    "search-cache",
    "quantize",
    "eval",
    "score",
    "analyze",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    /// Stages this run intends to execute, in order.
    pub stages: Vec<String>,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig {
            stages: ["prepare-data", "train-teacher", "distill", "prune", "search-cache", "quantize", "score"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub prune: PruneConfig,
    pub quantize: QuantConfig,
    pub cache: CacheConfig,
    pub score: ScoreConfig,
    pub pipeline: StagesConfig,
}

impl PipelineConfig {
    /// Reference-scale settings.
    pub fn full_scale() -> Self {
        PipelineConfig::default()
    }

    /// A configuration that runs end to end on one CPU in minutes.
    pub fn desk() -> Self {
        let student = ModelSection {
            bin_ends: Vec::new(),
            embed_dims: vec![32, 16, 4],
            context: 8,
            extended_context: 32,
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_k: 16,
            d_v: 16,
            d_ff: 64,
            dropout: 0.0,
            activation: Activation::Relu,
            layer_norm_eps: 1e-5,
            init_std: 0.05,
            seed: 1,
        };
        let train = TrainConfig {
            steps: 300,
            lr: 3e-3,
            warmup: 30,
            batch: 16,
            eval_every: 100,
            eval_tokens: 5000,
            hebbian: HebbianConfig {
                enabled: false,
                ..HebbianConfig::default()
            },
            ..TrainConfig::default()
        };
        PipelineConfig {
            corpus: CorpusConfig::default(),
            model: student.clone(),
            distill: DistillConfig {
                top_k: TEACHER_TOP_K,
                label_tokens: 150_000,
                teacher_model: ModelSection {
                    embed_dims: vec![64, 32, 8],
                    n_layers: 4,
                    d_model: 64,
                    n_heads: 4,
                    d_ff: 128,
                    ..student
                },
                teacher_train: TrainConfig {
                    steps: 600,
                    lr: 2e-3,
                    warmup: 60,
                    eval_every: 200,
                    ..train.clone()
                },
                teacher_cache: false,
            },
            train,
            prune: PruneConfig {
                steps: 100,
                ramp_steps: 80,
                frequency: 10,
                sensitivity_tokens: 3000,
                ..PruneConfig::default()
            },
            quantize: QuantConfig::default(),
            cache: CacheConfig {
                train_size: 32,
                search_size: 500,
                ..CacheConfig::default()
            },
            score: ScoreConfig {
                eval_tokens: 20_000,
                ..ScoreConfig::default()
            },
            pipeline: StagesConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Applies `section.key=value` overrides; values parse as TOML and fall
    /// back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let keys: Vec<&str> = path.trim().split('.').collect();
            let mut node = &mut doc;
            for (i, k) in keys.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("{path}: {} is not a section", keys[..i].join("."))))?;
                if i + 1 == keys.len() {
                    if !table.contains_key(*k) {
                        return Err(Error::config(format!("unknown configuration key {path}")));
                    }
                    table.insert(k.to_string(), value.clone());
                    break;
                }
                node = table
                    .get_mut(*k)
                    .ok_or_else(|| Error::config(format!("unknown configuration key {path}")))?;
            }
        }
        let cfg: PipelineConfig = doc.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.distill.teacher_train.validate()?;
        for s in &self.pipeline.stages {
            if !STAGES.contains(&s.as_str()) {
                return Err(Error::config(format!("unknown stage {s:?}")));
            }
        }
        let pos = |name: &str| self.pipeline.stages.iter().position(|s| s == name);
        if let (Some(q), Some(s)) = (pos("quantize"), pos("search-cache")) {
            if q < s {
                return Err(Error::config("cache search must run before quantization"));
            }
        }
        if !(0.0..1.0).contains(&self.prune.target) || !(0.0..=self.prune.target).contains(&self.prune.initial_sparsity) {
            return Err(Error::config("need 0 <= prune.initial_sparsity <= prune.target < 1"));
        }
        if self.prune.frequency == 0 || self.prune.ramp_steps % self.prune.frequency != 0 {
            return Err(Error::config("prune.frequency must divide prune.ramp_steps"));
        }
        if self.distill.top_k == 0 {
            return Err(Error::config("distill.top_k must be positive"));
        }
        if !(2..=16).contains(&self.quantize.bits) {
            return Err(Error::config(format!("quantize.bits {} outside [2, 16]", self.quantize.bits)));
        }
        Ok(())
    }

    /// Hex digest of the canonical serialized form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }

    pub fn score_cache_size(&self) -> usize {
        if self.score.cache_size == 0 {
            self.cache.search_size
        } else {
            self.score.cache_size
        }
    }
}

pub struct PreparedData {
    pub vocab: Vocabulary,
    pub train: Vec<TokenId>,
    pub valid: Vec<TokenId>,
    pub test: Vec<TokenId>,
}

pub fn prepare_data(cfg: &CorpusConfig) -> Result<PreparedData> {
    let (train_txt, valid_txt, test_txt) = match &cfg.source {
        CorpusSource::Synthetic => {
            let g = &cfg.synthetic;
            (
                g.generate(cfg.train_tokens, cfg.language_seed, cfg.seed),
                g.generate(cfg.valid_tokens, cfg.language_seed, cfg.seed.wrapping_add(1)),
                g.generate(cfg.test_tokens, cfg.language_seed, cfg.seed.wrapping_add(2)),
            )
        }
        CorpusSource::Text(dir) => {
            let read = |name: &str| {
                let p = dir.join(name);
                std::fs::read_to_string(&p).map_err(|e| Error::input(format!("cannot read {}: {e}", p.display())))
            };
            (read("train.txt")?, read("valid.txt")?, read("test.txt")?)
        }
    };
    let vocab = Vocabulary::build(&train_txt, &cfg.bin_fractions, cfg.reserve_unk)?;
    Ok(PreparedData {
        train: vocab.encode(&train_txt)?,
        valid: vocab.encode(&valid_txt)?,
        test: vocab.encode(&test_txt)?,
        vocab,
    })
}

/// The first `n` tokens of a split, or all of it for `n = 0`.
pub fn prefix(ids: &[TokenId], n: usize) -> &[TokenId] {
    if n == 0 {
        ids
    } else {
        &ids[..n.min(ids.len())]
    }
}

fn meta(cfg: &PipelineConfig, stage: &str, parents: Vec<String>, val_ppl: f64) -> CheckpointMeta {
    CheckpointMeta {
        stage: stage.into(),
        config_hash: cfg.hash(),
        parents,
        cache_searched: false,
        cache_frozen: false,
        val_ppl: Some(val_ppl),
    }
}

fn checked(outcome: TrainOutcome, what: &str) -> Result<TrainOutcome> {
    match &outcome.aborted {
        Some(msg) if !outcome.val_ppl.is_finite() => Err(Error::numerical(format!("{what} diverged: {msg}"))),
        _ => Ok(outcome),
    }
}

/// Trains the student from scratch on hard labels.
pub fn train_student(cfg: &PipelineConfig, bins: &[BinRange], train_ids: &[TokenId], valid: &[TokenId]) -> Result<(Checkpoint, TrainOutcome)> {
    let state = ModelState::new(cfg.model.build(Some(bins))?, cfg.model.seed)?;
    let data = TrainData {
        train: train_ids,
        valid,
        teacher: None,
    };
    let out = checked(train(state, &cfg.train, &cfg.cache, &data)?, "training")?;
    let ck = Checkpoint::dense(out.state.clone(), meta(cfg, "train", vec![], out.val_ppl));
    Ok((ck, out))
}

pub fn train_teacher(cfg: &PipelineConfig, bins: &[BinRange], train_ids: &[TokenId], valid: &[TokenId]) -> Result<(Checkpoint, TrainOutcome)> {
    let d = &cfg.distill;
    let state = ModelState::new(d.teacher_model.build(Some(bins))?, d.teacher_model.seed)?;
    let cache = CacheConfig {
        enabled: d.teacher_cache,
        ..cfg.cache.clone()
    };
    let data = TrainData {
        train: train_ids,
        valid,
        teacher: None,
    };
    let out = checked(train(state, &d.teacher_train, &cache, &data)?, "teacher training")?;
    let ck = Checkpoint::dense(out.state.clone(), meta(cfg, "train-teacher", vec![], out.val_ppl));
    Ok((ck, out))
}

/// Labels the distillation prefix of `train_ids` with the teacher's top-k.
pub fn teacher_labels(cfg: &PipelineConfig, teacher: &Checkpoint, train_ids: &[TokenId]) -> Result<TeacherLabels> {
    let engine = Engine::new(&teacher.state, &teacher.comp)?;
    extract_teacher_labels(&engine, prefix(train_ids, cfg.distill.label_tokens), cfg.distill.top_k)
}

/// Trains the student on the labelled prefix with the distillation loss.
pub fn distill(
    cfg: &PipelineConfig,
    bins: &[BinRange],
    labels: &TeacherLabels,
    train_ids: &[TokenId],
    valid: &[TokenId],
) -> Result<(Checkpoint, TrainOutcome)> {
    let state = ModelState::new(cfg.model.build(Some(bins))?, cfg.model.seed)?;
    if labels.len() != prefix(train_ids, cfg.distill.label_tokens).len() {
        return Err(Error::input("teacher labels do not cover the distillation prefix"));
    }
    let data = TrainData {
        train: prefix(train_ids, cfg.distill.label_tokens),
        valid,
        teacher: Some(labels),
    };
    let out = checked(train(state, &cfg.train, &cfg.cache, &data)?, "distillation")?;
    let ck = Checkpoint::dense(out.state.clone(), meta(cfg, "distill", vec![], out.val_ppl));
    Ok((ck, out))
}

pub struct PruneResult {
    pub checkpoint: Checkpoint,
    pub plan: PrunePlan,
    pub curves: Vec<SensitivityCurve>,
    pub outcome: TrainOutcome,
}

pub fn prune(cfg: &PipelineConfig, input: &Checkpoint, train_ids: &[TokenId], valid: &[TokenId]) -> Result<PruneResult> {
    if input.comp.is_quantized() {
        return Err(Error::config("pruning a quantized model is not supported"));
    }
    let vcache = crate::train::train_cache(&cfg.cache, &input.state);
    let (plan, curves) = plan(&input.state, &input.comp, &cfg.prune, valid, vcache)?;
    let data = TrainData {
        train: train_ids,
        valid,
        teacher: None,
    };
    let (outcome, comp) = prune_train(input.state.clone(), input.comp.clone(), &plan, &cfg.prune, &cfg.train, &cfg.cache, &data)?;
    let outcome = checked(outcome, "pruning")?;
    let mut m = meta(cfg, "prune", vec![], outcome.val_ppl);
    m.cache_searched = input.meta.cache_searched;
    Ok(PruneResult {
        checkpoint: Checkpoint::new(outcome.state.clone(), comp, m),
        plan,
        curves,
        outcome,
    })
}

/// Evaluation cache for a model: search capacity and the model's scalars.
pub fn eval_cache(cfg: &PipelineConfig, state: &ModelState) -> Option<CacheParams> {
    cfg.cache.enabled.then(|| CacheParams {
        capacity: cfg.cache.search_size,
        theta: state.cache_theta() as f32,
        lambda: state.cache_lambda() as f32,
    })
}

/// Local search over the cache scalars with the search capacity on `valid`.
pub fn search_cache(cfg: &PipelineConfig, input: &Checkpoint, valid: &[TokenId]) -> Result<(Checkpoint, SearchOutcome)> {
    if !cfg.cache.enabled {
        return Err(Error::config("cache search requested with the cache disabled"));
    }
    if input.meta.cache_frozen {
        return Err(Error::config("cache search must run before quantization"));
    }
    let engine = Engine::new(&input.state, &input.comp)?;
    let out = evaluate(&engine, valid, &EvalOptions {
        collect: true,
        ..Default::default()
    })?;
    let problem = SearchProblem::new(&out.hiddens, &valid[1..], out.p_soft, cfg.cache.search_size)?;
    let found = local_search(
        |t, l| Ok(problem.perplexity(t, l)),
        input.state.cache_theta(),
        input.state.cache_lambda(),
        &cfg.cache.search,
    )?;
    let mut state = input.state.clone();
    state.set_cache_scalars(found.theta, found.lambda);
    let mut m = meta(cfg, "search-cache", vec![], found.perplexity);
    m.cache_searched = true;
    Ok((Checkpoint::new(state, input.comp.clone(), m), found))
}

pub fn quantize(cfg: &PipelineConfig, input: &Checkpoint, train_ids: &[TokenId], valid: &[TokenId]) -> Result<Checkpoint> {
    if cfg.cache.enabled && cfg.pipeline.stages.iter().any(|s| s == "search-cache") && !input.meta.cache_searched {
        return Err(Error::config("cache search must run before quantization"));
    }
    let data = TrainData {
        train: train_ids,
        valid,
        teacher: None,
    };
    let out = quantize_model(
        input.state.clone(),
        input.comp.clone(),
        &cfg.quantize,
        &cfg.train,
        &cfg.cache,
        &data,
        eval_cache(cfg, &input.state),
    )?;
    let mut m = meta(cfg, "quantize", vec![], out.val_ppl);
    m.cache_searched = input.meta.cache_searched;
    m.cache_frozen = true;
    Ok(Checkpoint::new(out.state, out.comp, m))
}

/// Validation perplexity with the evaluation cache.
pub fn validation(cfg: &PipelineConfig, state: &ModelState, comp: &CompressionSpec, valid: &[TokenId]) -> Result<f64> {
    crate::train::validation_perplexity(state, comp, valid, eval_cache(cfg, state))
}

pub fn score(cfg: &PipelineConfig, ck: &Checkpoint, profile: &BinProfile) -> Result<ScoreReport> {
    let cache = if cfg.cache.enabled { cfg.score_cache_size() } else { 0 };
    score_model(&ck.state, &ck.comp, cfg.score.sparse_format, cfg.score.softmax_mode, cache, profile)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_desk_presets_validate_and_round_trip() {
        for cfg in [PipelineConfig::full_scale(), PipelineConfig::desk()] {
            cfg.validate().unwrap();
            let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn full_scale_model_matches_reference() {
        let cfg = PipelineConfig::full_scale();
        assert_eq!(cfg.model.build(None).unwrap(), ModelConfig::full_scale());
        assert_eq!(cfg.cache.train_size, 2000);
        assert_eq!(cfg.cache.search_size, 3000);
        assert_eq!(cfg.quantize.bits, 9);
        assert_eq!(cfg.prune.target, 0.358);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(PipelineConfig::from_toml("[train]\nstepz = 3\n"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("[bogus]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = PipelineConfig::desk();
        let o = cfg
            .with_overrides(&["train.steps=7".into(), "model.activation=gelu".into(), "corpus.source=synthetic".into()])
            .unwrap();
        assert_eq!(o.train.steps, 7);
        assert_eq!(o.model.activation, Activation::Gelu);
        assert_ne!(o.hash(), cfg.hash());
        assert!(matches!(cfg.with_overrides(&["train.nope=1".into()]), Err(Error::Config(_))));
        assert!(matches!(cfg.with_overrides(&["train.steps".into()]), Err(Error::Config(_))));
        assert!(matches!(cfg.with_overrides(&["train.steps=0".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn quantize_before_search_is_rejected() {
        let mut cfg = PipelineConfig::desk();
        cfg.pipeline.stages = vec!["quantize".into(), "search-cache".into()];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
