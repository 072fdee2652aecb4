use microlm_autograd::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_bits, compute_scale, fake_quantize, plan_weights, ActQuant, ActStats, QuantConfig, QuantParams};
use crate::cache::CacheConfig;
use crate::compression::CompressionSpec;
use crate::corpus::{sample_window_starts, TokenId};
use crate::eval::CacheParams;
use crate::model::{bind, hidden, ForwardOptions, ModelState};
use crate::train::{validation_perplexity, Session, TrainConfig, TrainData, TrainRecord};
use crate::{Error, Result};

pub struct QuantizeOutcome {
    /// Weights snapped to their quantization grids.
    pub state: ModelState,
    pub comp: CompressionSpec,
    pub record: TrainRecord,
    pub val_ppl: f64,
}

/// Running max-abs of every activation site over `batches × batch` random
/// training windows, with weights quantized per `weight_quant`.
pub fn calibrate_activations(
    state: &ModelState,
    weight_quant: &[Option<QuantParams>],
    train: &[TokenId],
    batches: usize,
    batch: usize,
    seed: u64,
) -> Result<ActStats> {
    let ce = state.config.extended_context;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xca1));
    let mut stats = ActStats::new(state.config.n_layers);
    for _ in 0..batches {
        for s in sample_window_starts(train.len(), ce, batch, &mut rng)? {
            let mut tape = Tape::<f32>::new();
            let bound = bind(&mut tape, state, Some(weight_quant))?;
            let mut opts = ForwardOptions {
                stats: Some(&mut stats),
                ..Default::default()
            };
            hidden(&mut tape, state, &bound, &train[s..s + ce], &mut opts)?;
        }
    }
    Ok(stats)
}

/// Calibrates scales, runs one quantization-aware step with the cache
/// scalars frozen, then rescales and snaps every quantized tensor to its
/// grid. Masked entries stay exactly zero.
pub fn quantize_model(
    state: ModelState,
    mut comp: CompressionSpec,
    qcfg: &QuantConfig,
    train: &TrainConfig,
    cache: &CacheConfig,
    data: &TrainData<'_>,
    eval_cache: Option<CacheParams>,
) -> Result<QuantizeOutcome> {
    check_bits(qcfg.bits)?;
    if comp.is_quantized() {
        return Err(Error::input("model is already quantized"));
    }
    comp.weight_quant = plan_weights(&state, qcfg)?;
    let stats = calibrate_activations(
        &state,
        &comp.weight_quant,
        data.train,
        qcfg.calibration_batches,
        train.batch,
        train.seed,
    )?;
    comp.act_quant = (!qcfg.sites.is_empty())
        .then(|| ActQuant::from_stats(&stats, qcfg.bits, &qcfg.sites))
        .transpose()?;
    let mut cfg = train.clone();
    cfg.steps = 1;
    cfg.warmup = 0;
    cfg.hebbian.enabled = false;
    let mut session = Session::new(state, comp, cfg, cache.clone())?;
    session.freeze_cache = true;
    let record = session.step(data)?;
    let Session { mut state, mut comp, .. } = session;
    for (i, p) in state.params.iter_mut().enumerate() {
        if comp.weight_quant[i].is_some() {
            let q = compute_scale(p.tensor.data(), qcfg.bits)?;
            // `+ 0.0` turns the -0.0 of small negatives into the grid's zero code
            let snapped = fake_quantize(p.tensor.data(), q);
            for (d, s) in p.tensor.data_mut().iter_mut().zip(snapped) {
                *d = s + 0.0;
            }
            comp.weight_quant[i] = Some(q);
        }
    }
    let val_ppl = validation_perplexity(&state, &comp, data.valid, eval_cache)?;
    Ok(QuantizeOutcome {
        state,
        comp,
        record,
        val_ppl,
    })
}
