use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use microlm::analysis::{binned_loss_diff, loss_trace, read_trace, write_trace, Binning};
use microlm::checkpoint::Checkpoint;
use microlm::compression::CompressionSpec;
use microlm::corpus::{BinRange, DataManifest, Split, TokenId, TokenStream};
use microlm::eval::{evaluate, EvalOptions};
use microlm::model::{Engine, ModelState};
use microlm::pipeline::{self, prefix, PipelineConfig};
use microlm::score::{score_model, BinProfile, ScoreReport};
use microlm::train::TeacherLabels;
use microlm::Error;
use serde_json::{json, Value};

/// Environment variable naming the artifact root directory.
const ARTIFACT_ROOT: &str = "MICROLM_ARTIFACTS";

#[derive(Parser)]
#[command(name = "microlm", version, about = "Compact transformer language model pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults to the reference-scale settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the reference settings.
    #[arg(long, global = true, conflicts_with = "config")]
    desk: bool,
    /// Override one key, e.g. `--set train.steps=100`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Rerun a stage even when its outputs exist.
    #[arg(long, global = true)]
    force: bool,
    /// Input checkpoint directory instead of the latest one in the run.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Stage {
    /// Build the vocabulary and the train/valid/test id streams.
    PrepareData,
    /// Train the student on hard labels.
    Train,
    /// Train the larger teacher model.
    TrainTeacher,
    /// Extract teacher labels and train the student against them.
    Distill,
    /// Sensitivity analysis, then gradual magnitude pruning.
    Prune,
    /// Tune the cache interpolation and temperature on validation data.
    SearchCache,
    /// Calibrate, run one quantization-aware step and snap weights to the grid.
    Quantize,
    /// Perplexity of a checkpoint, with a per-token loss trace.
    Eval {
        #[arg(long, value_enum, default_value = "valid")]
        split: SplitArg,
    },
    /// Parameter and operation counts and the resulting score.
    Score {
        /// Score a freshly initialised model of the configured architecture.
        #[arg(long)]
        fresh: bool,
    },
    /// Per-bin loss difference between two eval traces.
    Analyze {
        /// Trace of model A (from `eval`).
        #[arg(long)]
        a: PathBuf,
        /// Trace of model B.
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value = "index")]
        binning: BinningArg,
        /// Table path; defaults to `curve.tsv` in the analysis directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration and its run directory.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum BinningArg {
    Index,
    Gap,
}

struct Run {
    cfg: PipelineConfig,
    dir: PathBuf,
    force: bool,
    input: Option<PathBuf>,
}

struct Data {
    manifest: DataManifest,
    train: Vec<TokenId>,
    valid: Vec<TokenId>,
    test: Vec<TokenId>,
}

impl Run {
    fn stage_dir(&self, stage: &str) -> PathBuf {
        self.dir.join(stage)
    }

    fn done(&self, dir: &Path) -> bool {
        !self.force && dir.join("metrics.json").exists()
    }

    fn data(&self) -> Result<Data, Error> {
        let d = self.dir.join("prepare-data");
        if !d.join("manifest.json").exists() {
            return Err(Error::input(format!("no prepared data in {}; run prepare-data first", d.display())));
        }
        let manifest = DataManifest::load(&d.join("manifest.json"))?;
        let load = |split: Split| -> Result<Vec<TokenId>, Error> {
            let s = TokenStream::load(split, &d.join(format!("{}.bin", split.name())))?;
            s.validate(manifest.vocab_size)?;
            Ok(s.ids)
        };
        Ok(Data {
            train: load(Split::Train)?,
            valid: load(Split::Valid)?,
            test: load(Split::Test)?,
            manifest,
        })
    }

    /// The explicit `--input`, else the latest existing checkpoint among `candidates`.
    fn input_dir(&self, candidates: &[&str]) -> Result<PathBuf, Error> {
        if let Some(p) = &self.input {
            return Ok(p.clone());
        }
        candidates
            .iter()
            .map(|s| self.stage_dir(s))
            .find(|d| d.join(microlm::checkpoint::MANIFEST).exists())
            .ok_or_else(|| Error::input(format!("no input checkpoint; run one of {} first", candidates.join(", "))))
    }

    fn load_input(&self, candidates: &[&str]) -> Result<(Checkpoint, String), Error> {
        let dir = self.input_dir(candidates)?;
        let ck = Checkpoint::load(&dir)?;
        Ok((ck, Checkpoint::manifest_hash(&dir)?))
    }

    fn save_checkpoint(&self, stage: &str, mut ck: Checkpoint, parents: Vec<String>) -> Result<Checkpoint, Error> {
        ck.meta.parents = parents;
        ck.save(&self.stage_dir(stage))?;
        Ok(ck)
    }

    /// Writes `metrics.json` into `dir` and appends it to the run's log.
    fn record(
        &self,
        stage: &str,
        dir: &Path,
        started: Instant,
        ck: Option<&Checkpoint>,
        val_ppl: Option<f64>,
        extra: Value,
    ) -> Result<Value, Error> {
        let mut m = json!({
            "stage": stage,
            "config_hash": self.cfg.hash(),
            "elapsed_s": started.elapsed().as_secs_f64(),
            "val_ppl": val_ppl,
        });
        if let Some(ck) = ck {
            let r = self.report(&ck.state, &ck.comp)?;
            m["params"] = json!(r.param_storage);
            m["ops"] = json!(r.mul_ops + r.add_ops);
            m["score"] = json!(r.score);
        }
        if let (Value::Object(m), Value::Object(e)) = (&mut m, extra) {
            m.extend(e);
        }
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&m)?)?;
        use std::io::Write;
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("metrics.jsonl"))?;
        writeln!(log, "{}", serde_json::to_string(&m)?)?;
        println!("{}", serde_json::to_string(&m)?);
        Ok(m)
    }

    fn report(&self, state: &ModelState, comp: &CompressionSpec) -> Result<ScoreReport, Error> {
        let cfg = &self.cfg;
        let cache = if cfg.cache.enabled { cfg.score_cache_size() } else { 0 };
        score_model(
            state,
            comp,
            cfg.score.sparse_format,
            cfg.score.softmax_mode,
            cache,
            &BinProfile::zipf(&state.config),
        )
    }

    fn skip(&self, stage: &str) -> bool {
        self.skip_dir(stage, &self.stage_dir(stage))
    }

    fn skip_dir(&self, stage: &str, dir: &Path) -> bool {
        if self.done(dir) {
            println!("{stage}: outputs exist in {}, skipping (use --force to rerun)", dir.display());
            true
        } else {
            false
        }
    }
}

const TRAINED: [&str; 5] = ["quantize", "search-cache", "prune", "distill", "train"];

fn bins(d: &Data) -> &[BinRange] {
    &d.manifest.bins
}

fn prepare_data(run: &Run) -> Result<(), Error> {
    let stage = "prepare-data";
    if run.skip(stage) {
        return Ok(());
    }
    let t = Instant::now();
    let p = pipeline::prepare_data(&run.cfg.corpus)?;
    let dir = run.stage_dir(stage);
    std::fs::create_dir_all(&dir)?;
    for (split, ids) in [(Split::Train, &p.train), (Split::Valid, &p.valid), (Split::Test, &p.test)] {
        TokenStream::new(split, ids.clone()).save(&dir.join(format!("{}.bin", split.name())))?;
    }
    p.vocab.save(&dir.join("vocab.tsv"))?;
    DataManifest {
        vocab_size: p.vocab.len(),
        bins: p.vocab.bins().to_vec(),
        has_unk: p.vocab.unk_id().is_some(),
        train_tokens: p.train.len(),
        valid_tokens: p.valid.len(),
        test_tokens: p.test.len(),
        config_hash: run.cfg.hash(),
    }
    .save(&dir.join("manifest.json"))?;
    run.record(
        stage,
        &run.stage_dir(stage),
        t,
        None,
        None,
        json!({"vocab_size": p.vocab.len(), "train_tokens": p.train.len(), "valid_tokens": p.valid.len(), "test_tokens": p.test.len()}),
    )?;
    Ok(())
}

fn valid_prefix<'a>(run: &Run, d: &'a Data) -> &'a [TokenId] {
    prefix(&d.valid, run.cfg.score.eval_tokens)
}

fn train(run: &Run, teacher: bool) -> Result<(), Error> {
    let stage = if teacher { "train-teacher" } else { "train" };
    if run.skip(stage) {
        return Ok(());
    }
    let t = Instant::now();
    let d = run.data()?;
    let valid = valid_prefix(run, &d);
    let (ck, out) = if teacher {
        pipeline::train_teacher(&run.cfg, bins(&d), &d.train, valid)?
    } else {
        pipeline::train_student(&run.cfg, bins(&d), &d.train, valid)?
    };
    let ck = run.save_checkpoint(stage, ck, vec![])?;
    run.record(stage, &run.stage_dir(stage), t, Some(&ck), Some(out.val_ppl), json!({"aborted": out.aborted, "steps": out.records.len()}))?;
    Ok(())
}

fn distill(run: &Run) -> Result<(), Error> {
    let stage = "distill";
    if run.skip(stage) {
        return Ok(());
    }
    let t = Instant::now();
    let d = run.data()?;
    let teacher_dir = run.input.clone().unwrap_or_else(|| run.stage_dir("train-teacher"));
    if !teacher_dir.join(microlm::checkpoint::MANIFEST).exists() {
        return Err(Error::input(format!("no teacher checkpoint in {}; run train-teacher first", teacher_dir.display())));
    }
    let teacher = Checkpoint::load(&teacher_dir)?;
    let labels_dir = run.stage_dir(stage).join("labels");
    let v = d.manifest.vocab_size;
    let labels = match TeacherLabels::load(&labels_dir, v) {
        Ok(l) if !run.force && l.len() == prefix(&d.train, run.cfg.distill.label_tokens).len() => l,
        _ => {
            let l = pipeline::teacher_labels(&run.cfg, &teacher, &d.train)?;
            l.save(&labels_dir, v)?;
            l
        }
    };
    let (ck, out) = pipeline::distill(&run.cfg, bins(&d), &labels, &d.train, valid_prefix(run, &d))?;
    let ck = run.save_checkpoint(stage, ck, vec![Checkpoint::manifest_hash(&teacher_dir)?])?;
    run.record(stage, &run.stage_dir(stage), t, Some(&ck), Some(out.val_ppl), json!({"aborted": out.aborted, "label_positions": labels.len()}))?;
    Ok(())
}

fn prune(run: &Run) -> Result<(), Error> {
    let stage = "prune";
    if run.skip(stage) {
        return Ok(());
    }
    let t = Instant::now();
    let d = run.data()?;
    let (input, parent) = run.load_input(&["distill", "train"])?;
    let r = pipeline::prune(&run.cfg, &input, &d.train, valid_prefix(run, &d))?;
    let ck = run.save_checkpoint(stage, r.checkpoint, vec![parent])?;
    let dir = run.stage_dir(stage);
    let curves: Vec<Value> = r
        .curves
        .iter()
        .map(|c| json!({"param": c.name, "sparsity": c.sparsity, "perplexity": c.perplexity, "fitted": c.fitted}))
        .collect();
    std::fs::write(dir.join("sensitivity.json"), serde_json::to_string_pretty(&curves)?)?;
    let sparsity = microlm::prune::global_sparsity(&ck.state, &ck.comp, &run.cfg.prune);
    run.record(
        stage,
        &run.stage_dir(stage),
        t,
        Some(&ck),
        Some(r.outcome.val_ppl),
        json!({"threshold": r.plan.threshold, "targets": r.plan.targets, "sparsity": sparsity, "aborted": r.outcome.aborted}),
    )?;
    Ok(())
}

fn search_cache(run: &Run) -> Result<(), Error> {
    let stage = "search-cache";
    if run.skip(stage) {
        return Ok(());
    }
    let t = Instant::now();
    let d = run.data()?;
    let (input, parent) = run.load_input(&TRAINED[2..])?;
    let before = (input.state.cache_theta(), input.state.cache_lambda());
    let (ck, found) = pipeline::search_cache(&run.cfg, &input, valid_prefix(run, &d))?;
    let ck = run.save_checkpoint(stage, ck, vec![parent])?;
    run.record(
        stage,
        &run.stage_dir(stage),
        t,
        Some(&ck),
        Some(found.perplexity),
        json!({"theta_before": before.0, "lambda_before": before.1, "theta": found.theta, "lambda": found.lambda}),
    )?;
    Ok(())
}

fn quantize(run: &Run) -> Result<(), Error> {
    let stage = "quantize";
    if run.skip(stage) {
        return Ok(());
    }
    let t = Instant::now();
    let d = run.data()?;
    let (input, parent) = run.load_input(&TRAINED[1..])?;
    let ck = pipeline::quantize(&run.cfg, &input, &d.train, valid_prefix(run, &d))?;
    let ppl = ck.meta.val_ppl;
    let ck = run.save_checkpoint(stage, ck, vec![parent])?;
    run.record(stage, &run.stage_dir(stage), t, Some(&ck), ppl, json!({"bits": run.cfg.quantize.bits}))?;
    Ok(())
}

fn short(hash: &str) -> &str {
    &hash[..16.min(hash.len())]
}

fn eval(run: &Run, split: SplitArg) -> Result<(), Error> {
    let (ck, parent) = run.load_input(&TRAINED)?;
    let name = match split {
        SplitArg::Valid => "valid",
        SplitArg::Test => "test",
    };
    let dir = run.stage_dir("eval").join(format!("{}-{name}", short(&parent)));
    if run.skip_dir("eval", &dir) {
        return Ok(());
    }
    let t = Instant::now();
    let d = run.data()?;
    let ids = match split {
        SplitArg::Valid => valid_prefix(run, &d),
        SplitArg::Test => &d.test[..],
    };
    let engine = Engine::new(&ck.state, &ck.comp)?;
    let out = evaluate(&engine, ids, &EvalOptions {
        cache: pipeline::eval_cache(&run.cfg, &ck.state),
        ..Default::default()
    })?;
    let ppl = out.perplexity();
    if !ppl.is_finite() {
        return Err(Error::numerical("non-finite perplexity"));
    }
    std::fs::create_dir_all(&dir)?;
    let trace = dir.join("loss.trace");
    write_trace(&trace, &loss_trace(ids, &out.nll)?)?;
    run.record(
        "eval",
        &dir,
        t,
        Some(&ck),
        Some(ppl),
        json!({"split": name, "perplexity": ppl, "checkpoint": parent, "stage_evaluated": ck.meta.stage, "trace": trace}),
    )?;
    Ok(())
}

fn score(run: &Run, fresh: bool) -> Result<(), Error> {
    let (ck, parent) = if fresh {
        let data_bins = run.data().ok().map(|d| d.manifest.bins);
        let cfg = run.cfg.model.build(data_bins.as_deref())?;
        let state = ModelState::new(cfg, run.cfg.model.seed)?;
        (Checkpoint::dense(state, Default::default()), String::from("fresh"))
    } else {
        run.load_input(&TRAINED)?
    };
    let dir = run.stage_dir("score").join(short(&parent));
    if run.skip_dir("score", &dir) {
        return Ok(());
    }
    let t = Instant::now();
    let report = run.report(&ck.state, &ck.comp)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(dir.join("components.tsv"), report.component_table())?;
    run.record(
        "score",
        &dir,
        t,
        Some(&ck),
        ck.meta.val_ppl,
        json!({"fresh": fresh, "checkpoint": parent, "dense_params": ck.state.num_params(), "mul_ops": report.mul_ops, "add_ops": report.add_ops}),
    )?;
    Ok(())
}

fn analyze(run: &Run, a: &Path, b: &Path, binning: BinningArg, out: Option<PathBuf>) -> Result<(), Error> {
    let binning = match binning {
        BinningArg::Index => Binning::Index,
        BinningArg::Gap => Binning::Gap,
    };
    let tag = |p: &Path| {
        p.parent()
            .and_then(|d| d.file_name())
            .map_or_else(|| "trace".to_string(), |n| n.to_string_lossy().into_owned())
    };
    let dir = run
        .stage_dir("analyze")
        .join(format!("{}-vs-{}-{binning:?}", tag(a), tag(b)).to_lowercase());
    if run.skip_dir("analyze", &dir) {
        return Ok(());
    }
    let t = Instant::now();
    let (ta, tb) = (read_trace(a)?, read_trace(b)?);
    let max = match binning {
        Binning::Index => ta.iter().map(|r| r.id as usize).max().unwrap_or(1),
        Binning::Gap => ta.last().map_or(1, |r| r.position as usize),
    };
    let diff = binned_loss_diff(&ta, &tb, binning, &binning.default_edges(max))?;
    let table = out.unwrap_or_else(|| dir.join("curve.tsv"));
    if let Some(p) = table.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(&table, diff.to_table())?;
    run.record(
        "analyze",
        &dir,
        t,
        None,
        None,
        json!({"table": table, "total_diff": diff.cumulative_diff.last(), "records": ta.len(), "first_occurrence": diff.first_occurrence}),
    )?;
    Ok(())
}

fn load_config(c: &Common) -> Result<PipelineConfig, Error> {
    let base = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            PipelineConfig::from_toml(&text)?
        }
        None if c.desk => PipelineConfig::desk(),
        None => PipelineConfig::full_scale(),
    };
    base.with_overrides(&c.overrides)
}

fn execute(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.common)?;
    let root = std::env::var_os(ARTIFACT_ROOT).map_or_else(|| PathBuf::from("artifacts"), PathBuf::from);
    let run = Run {
        dir: root.join(cfg.hash()),
        cfg,
        force: cli.common.force,
        input: cli.common.input,
    };
    std::fs::create_dir_all(&run.dir)?;
    std::fs::write(run.dir.join("config.toml"), run.cfg.to_toml()?)?;
    match cli.stage {
        Stage::PrepareData => prepare_data(&run),
        Stage::Train => train(&run, false),
        Stage::TrainTeacher => train(&run, true),
        Stage::Distill => distill(&run),
        Stage::Prune => prune(&run),
        Stage::SearchCache => search_cache(&run),
        Stage::Quantize => quantize(&run),
        Stage::Eval { split } => eval(&run, split),
        Stage::Score { fresh } => score(&run, fresh),
        Stage::Analyze { a, b, binning, out } => analyze(&run, &a, &b, binning, out),
        Stage::Config => {
            print!("{}", run.cfg.to_toml()?);
            println!("# run directory: {}", run.dir.display());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Range { .. } => 2,
        Error::Input(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("microlm: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
