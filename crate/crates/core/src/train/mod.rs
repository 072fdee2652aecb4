//! Adam training over random extended-context windows with the in-window
//! cache, optional distillation, Hebbian output updates and masks.

mod loss;
mod schedule;
mod teacher;

use microlm_autograd::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::CacheConfig;
use crate::compression::CompressionSpec;
use crate::corpus::{sample_window_starts, TokenId};
use crate::eval::{evaluate, CacheParams, EvalOptions};
use crate::model::{bind, hebbian_update, Engine, ForwardOptions, HebbianConfig, ModelState, ParamKind};
use crate::{Error, Result};

pub use loss::{total_loss, window_loss, LossSpec, WindowLoss};
pub use schedule::{lambda_soft, lr_at, Adam, AdamConfig};
pub use teacher::{extract_teacher_labels, top_k, TeacherLabels, TEACHER_TOP_K};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub batch: usize,
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Validation interval in steps; 0 validates only at the end.
    pub eval_every: usize,
    /// Validation tokens used during training; 0 uses the whole split.
    pub eval_tokens: usize,
    pub adam: AdamConfig,
    pub hebbian: HebbianConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200_000,
            lr: 1e-4,
            warmup: 1000,
            batch: 8,
            lambda_max: 0.5,
            lambda_min: 0.05,
            clip_norm: 0.25,
            seed: 0,
            eval_every: 0,
            eval_tokens: 0,
            adam: AdamConfig::default(),
            hebbian: HebbianConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::config("train.steps and train.batch must be positive"));
        }
        if !(0.0 <= self.lambda_min && self.lambda_min <= self.lambda_max && self.lambda_max <= 1.0) {
            return Err(Error::config("need 0 <= lambda_min <= lambda_max <= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Streams a training run reads.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [TokenId],
    pub valid: &'a [TokenId],
    pub teacher: Option<&'a TeacherLabels>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub hard: f64,
    pub soft: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ppl: Option<f64>,
}

pub struct TrainOutcome {
    /// Final state, or the last state that validated cleanly after a divergence.
    pub state: ModelState,
    pub records: Vec<TrainRecord>,
    pub val_ppl: f64,
    pub aborted: Option<String>,
}

/// Cache settings used while training and validating.
pub fn train_cache(cache: &CacheConfig, state: &ModelState) -> Option<CacheParams> {
    cache.enabled.then(|| CacheParams {
        capacity: cache.train_size,
        theta: state.cache_theta() as f32,
        lambda: state.cache_lambda() as f32,
    })
}

/// Validation perplexity of `state` under `comp` on `ids`.
pub fn validation_perplexity(
    state: &ModelState,
    comp: &CompressionSpec,
    ids: &[TokenId],
    cache: Option<CacheParams>,
) -> Result<f64> {
    let engine = Engine::new(state, comp)?;
    let out = evaluate(&engine, ids, &EvalOptions { cache, ..Default::default() })?;
    Ok(out.perplexity())
}

/// One optimizer's view of a model being trained.
pub struct Session {
    pub state: ModelState,
    pub comp: CompressionSpec,
    pub cfg: TrainConfig,
    pub cache: CacheConfig,
    /// Cache scalars receive no updates.
    pub freeze_cache: bool,
    adam: Adam,
    step: usize,
    sampler: ChaCha8Rng,
}

struct WindowResult {
    loss: f64,
    hard: f64,
    soft: f64,
    grads: Vec<Option<Vec<f32>>>,
    hidden: Vec<f32>,
}

impl Session {
    pub fn new(state: ModelState, comp: CompressionSpec, cfg: TrainConfig, cache: CacheConfig) -> Result<Self> {
        cfg.validate()?;
        if comp.masks.len() != state.params.len() || comp.weight_quant.len() != state.params.len() {
            return Err(Error::contract("compression spec does not match the model"));
        }
        let adam = Adam::new(cfg.adam.clone(), state.params.iter().map(|p| p.tensor.numel()));
        let sampler = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
        Ok(Session {
            state,
            comp,
            cfg,
            cache,
            freeze_cache: false,
            adam,
            step: 0,
            sampler,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn run_window(&self, ids: &[TokenId], start: usize, data: &TrainData<'_>, w: usize) -> Result<WindowResult> {
        let n = ids.len() - 1;
        let teacher_rows: Option<Vec<Vec<(TokenId, f32)>>> =
            data.teacher.map(|t| (start + 1..start + 1 + n).map(|p| t.at(p).collect()).collect());
        let spec = LossSpec {
            cache: self.cache.enabled.then_some(self.cache.train_size),
            lambda_soft: if data.teacher.is_some() {
                lambda_soft(self.step, self.cfg.lambda_max, self.cfg.lambda_min, self.cfg.steps)
            } else {
                0.0
            },
            teacher: teacher_rows.as_deref(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream((self.step * self.cfg.batch + w) as u64);
        let mut tape = Tape::<f32>::new();
        let quant = self.comp.weight_quant.iter().any(Option::is_some);
        let bound = bind(&mut tape, &self.state, quant.then_some(self.comp.weight_quant.as_slice()))?;
        let mut opts = ForwardOptions {
            dropout: Some(&mut rng),
            act_quant: self.comp.act_quant.as_ref(),
            stats: None,
        };
        let out = window_loss(&mut tape, &self.state, &bound, ids, &spec, &mut opts)?;
        tape.backward(out.loss)?;
        let grads = self
            .state
            .ids()
            .map(|id| tape.grad(bound.leaf(id)).map(<[f32]>::to_vec))
            .collect();
        Ok(WindowResult {
            loss: tape.scalar(out.loss) as f64,
            hard: out.hard,
            soft: out.soft,
            grads,
            hidden: tape.value(out.hidden).to_vec(),
        })
    }

    /// Samples a batch, takes one Adam step and applies Hebbian updates.
    pub fn step(&mut self, data: &TrainData<'_>) -> Result<TrainRecord> {
        let ce = self.state.config.extended_context;
        let starts = sample_window_starts(data.train.len(), ce, self.cfg.batch, &mut self.sampler)?;
        let results = starts
            .par_iter()
            .enumerate()
            .map(|(w, &s)| self.run_window(&data.train[s..s + ce + 1], s, data, w))
            .collect::<Result<Vec<_>>>()?;
        let b = results.len() as f32;
        let mut grads: Vec<Vec<f32>> = self.state.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        let (mut loss, mut hard, mut soft) = (0.0, 0.0, 0.0);
        for r in &results {
            loss += r.loss / b as f64;
            hard += r.hard / b as f64;
            soft += r.soft / b as f64;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                if let Some(g) = g {
                    for (a, &x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
            }
        }
        for (i, g) in grads.iter_mut().enumerate() {
            g.iter_mut().for_each(|x| *x /= b);
            if let Some(m) = self.comp.mask(crate::model::ParamId(i)) {
                for (x, &k) in g.iter_mut().zip(m) {
                    if !k {
                        *x = 0.0;
                    }
                }
            }
            if self.freeze_cache && self.state.params[i].kind == ParamKind::CacheScalar {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        if !loss.is_finite() || grads.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!("non-finite loss or gradient at step {}", self.step)));
        }
        if self.cfg.clip_norm > 0.0 {
            let norm = grads.iter().flatten().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if norm > self.cfg.clip_norm {
                let s = (self.cfg.clip_norm / norm) as f32;
                grads.iter_mut().flatten().for_each(|x| *x *= s);
            }
        }
        let lr = lr_at(self.step, self.cfg.lr, self.cfg.warmup, self.cfg.steps);
        {
            let mut params: Vec<&mut [f32]> = self.state.params.iter_mut().map(|p| p.tensor.data_mut()).collect();
            self.adam.step(&mut params, &grads, lr);
        }
        if self.cfg.hebbian.enabled {
            let d = self.state.config.d_model;
            for (r, &s) in results.iter().zip(&starts) {
                for (i, h) in r.hidden.chunks(d).enumerate() {
                    hebbian_update(&mut self.state, data.train[s + 1 + i], h, &self.cfg.hebbian)?;
                }
            }
        }
        self.apply_masks();
        self.step += 1;
        Ok(TrainRecord {
            step: self.step,
            loss,
            hard,
            soft,
            lr,
            val_ppl: None,
        })
    }

    /// Zeroes every masked entry of the stored weights.
    pub fn apply_masks(&mut self) {
        for (p, m) in self.state.params.iter_mut().zip(&self.comp.masks) {
            if let Some(m) = m {
                for (x, &k) in p.tensor.data_mut().iter_mut().zip(m) {
                    if !k {
                        *x = 0.0;
                    }
                }
            }
        }
    }

    pub fn validate(&self, valid: &[TokenId]) -> Result<f64> {
        let n = if self.cfg.eval_tokens == 0 {
            valid.len()
        } else {
            self.cfg.eval_tokens.min(valid.len())
        };
        validation_perplexity(&self.state, &self.comp, &valid[..n], train_cache(&self.cache, &self.state))
    }
}

/// Runs `session` for its configured steps. `hook` runs before every step
/// (pruning schedules adjust masks there). On divergence the outcome holds
/// the last state that validated cleanly.
pub fn run(
    mut session: Session,
    data: &TrainData<'_>,
    mut hook: impl FnMut(&mut Session) -> Result<()>,
) -> Result<(TrainOutcome, Session)> {
    let mut records = Vec::new();
    let mut good = session.state.clone();
    let mut good_ppl = f64::NAN;
    let mut aborted = None;
    while session.step < session.cfg.steps {
        hook(&mut session)?;
        let mut rec = match session.step(data) {
            Ok(r) => r,
            Err(Error::Numerical(msg)) => {
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        let last = session.step == session.cfg.steps;
        if last || (session.cfg.eval_every > 0 && session.step % session.cfg.eval_every == 0) {
            let ppl = session.validate(data.valid)?;
            rec.val_ppl = Some(ppl);
            if !ppl.is_finite() {
                aborted = Some(format!("validation perplexity {ppl} at step {}", session.step));
                records.push(rec);
                break;
            }
            good = session.state.clone();
            good_ppl = ppl;
        }
        records.push(rec);
    }
    let (state, val_ppl) = if aborted.is_some() {
        (good, good_ppl)
    } else {
        (session.state.clone(), good_ppl)
    };
    Ok((
        TrainOutcome {
            state,
            records,
            val_ppl,
            aborted,
        },
        session,
    ))
}

/// Trains a dense model from `state`.
pub fn train(
    state: ModelState,
    cfg: &TrainConfig,
    cache: &CacheConfig,
    data: &TrainData<'_>,
) -> Result<TrainOutcome> {
    let comp = CompressionSpec::dense(&state);
    let session = Session::new(state, comp, cfg.clone(), cache.clone())?;
    Ok(run(session, data, |_| Ok(()))?.0)
}
