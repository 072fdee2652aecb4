//! Differentiable full-window forward pass recorded on a [`Tape`].

use microlm_autograd::{Element, NodeTag, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{Activation, Site};
use super::state::{relative_encoding, LayerParams, ModelState, ParamId};
use crate::corpus::TokenId;
use crate::quant::{ActQuant, ActStats, QuantParams};
use crate::{Error, Result};

/// Tape handles for every parameter of a model, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
    leaves: Vec<Var>,
}

impl Bound {
    /// The value the forward pass uses (fake-quantized when requested).
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// The trainable leaf holding the raw parameter; gradients land here.
    pub fn leaf(&self, id: ParamId) -> Var {
        self.leaves[id.0]
    }
}

/// Places every parameter on the tape. Parameters with an entry in
/// `weight_quant` are fake-quantized once here; embedding tables keep their
/// exemption tag unless they are themselves quantized.
pub fn bind<T: Element>(
    tape: &mut Tape<T>,
    state: &ModelState,
    weight_quant: Option<&[Option<QuantParams>]>,
) -> Result<Bound> {
    bind_inner(tape, state, weight_quant, None)
}

/// Like [`bind`], with parameter values taken from `values` (one flat
/// array per parameter) instead of the stored `f32` tensors.
pub fn bind_values<T: Element>(tape: &mut Tape<T>, state: &ModelState, values: &[Vec<T>]) -> Result<Bound> {
    if values.len() != state.params.len() {
        return Err(Error::contract("one value array per parameter"));
    }
    bind_inner(tape, state, None, Some(values))
}

fn bind_inner<T: Element>(
    tape: &mut Tape<T>,
    state: &ModelState,
    weight_quant: Option<&[Option<QuantParams>]>,
    values: Option<&[Vec<T>]>,
) -> Result<Bound> {
    let mut vars = Vec::with_capacity(state.params.len());
    let mut leaves = Vec::with_capacity(state.params.len());
    for (i, p) in state.params.iter().enumerate() {
        let q = weight_quant.and_then(|w| w.get(i).copied().flatten());
        let tag = if p.kind.is_embedding() && q.is_none() {
            NodeTag::Embedding
        } else {
            NodeTag::Plain
        };
        let leaf = match values {
            Some(v) => tape.variable_tagged(p.tensor.shape().to_vec(), v[i].clone(), tag)?,
            None => tape.param_tagged(&p.tensor, tag),
        };
        leaves.push(leaf);
        vars.push(match q {
            Some(q) => tape.fake_quantize(leaf, T::from_f32(q.inv_scale), q.bits)?,
            None => leaf,
        });
    }
    Ok(Bound { vars, leaves })
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Dropout is active only when an rng is supplied and the config rate is positive.
    pub dropout: Option<&'a mut ChaCha8Rng>,
    pub act_quant: Option<&'a ActQuant>,
    pub stats: Option<&'a mut ActStats>,
}

fn site<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    layer: usize,
    s: Site,
    opts: &mut ForwardOptions<'_>,
) -> Result<Var> {
    if let Some(stats) = opts.stats.as_deref_mut() {
        let m = tape.value(x).iter().fold(0f32, |m, v| m.max(v.abs().to_f32()));
        stats.observe(layer, s, m);
    }
    match opts.act_quant {
        Some(q) if q.enabled(layer, s) => {
            let inv = T::from_f32(q.inv_scales[layer][s.index()]);
            Ok(tape.fake_quantize(x, inv, q.bits)?)
        }
        _ => Ok(x),
    }
}

fn dropout<T: Element>(tape: &mut Tape<T>, x: Var, p: f64, opts: &mut ForwardOptions<'_>) -> Result<Var> {
    match opts.dropout.as_deref_mut() {
        Some(rng) if p > 0.0 => {
            let keep: Vec<bool> = (0..tape.value(x).len()).map(|_| rng.random::<f64>() >= p).collect();
            Ok(tape.dropout(x, &keep, p)?)
        }
        _ => Ok(x),
    }
}

fn linear<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(match b {
        Some(b) => tape.add_row(y, b)?,
        None => y,
    })
}

fn check_ids(state: &ModelState, ids: &[TokenId]) -> Result<()> {
    let v = state.config.vocab_size();
    match ids.iter().find(|&&id| id == 0 || id as usize > v) {
        Some(id) => Err(Error::input(format!("token id {id} outside [1, {v}]"))),
        None if ids.is_empty() => Err(Error::input("empty token sequence")),
        None => Ok(()),
    }
}

/// Adaptive input embedding: per-bin lookup followed by the bin's
/// up-projection, reassembled in sequence order. `[n × d_model]`.
pub fn adaptive_embed<T: Element>(
    tape: &mut Tape<T>,
    state: &ModelState,
    bound: &Bound,
    ids: &[TokenId],
) -> Result<Var> {
    check_ids(state, ids)?;
    let cfg = &state.config;
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(ids.len());
    let mut placed = vec![0usize; ids.len()];
    for (b, bin) in cfg.bins.iter().enumerate() {
        let mut rows = Vec::new();
        for (pos, &id) in ids.iter().enumerate() {
            if bin.range().contains(id) {
                placed[pos] = order.len();
                order.push(pos);
                rows.push((id - bin.first) as usize);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let bp = &state.layout.bins[b];
        let mut e = tape.gather_rows(bound.var(bp.table), &rows)?;
        if let Some(proj) = bp.proj {
            e = tape.matmul(e, bound.var(proj))?;
        }
        parts.push(e);
    }
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    if order.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(stacked);
    }
    Ok(tape.gather_rows(stacked, &placed)?)
}

/// `allowed[i·n + j]` iff `i − window < j ≤ i`.
pub fn band_mask(n: usize, window: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in i.saturating_sub(window.saturating_sub(1))..=i {
            m[i * n + j] = window > 0;
        }
    }
    m
}

/// Relative-position multi-head self-attention over a causal band of
/// `window` positions (no carried memory). Returns the per-head context
/// `[n × h·d_v]` and the attention probabilities of each head.
pub fn windowed_rel_attention<T: Element>(
    tape: &mut Tape<T>,
    state: &ModelState,
    bound: &Bound,
    layer: usize,
    x: Var,
    window: usize,
    opts: &mut ForwardOptions<'_>,
) -> Result<(Var, Vec<Var>)> {
    let cfg = &state.config;
    let lp: &LayerParams = &state.layout.layers[layer];
    let n = tape.shape(x)[0];
    let (h, dk, dv) = (cfg.n_heads, cfg.d_k, cfg.d_v);
    let q = linear(tape, x, bound.var(lp.wq), Some(bound.var(lp.bq)))?;
    let q = site(tape, q, layer, Site::Query, opts)?;
    let k = linear(tape, x, bound.var(lp.wk), Some(bound.var(lp.bk)))?;
    let k = site(tape, k, layer, Site::Key, opts)?;
    let v = linear(tape, x, bound.var(lp.wv), Some(bound.var(lp.bv)))?;
    let v = site(tape, v, layer, Site::Value, opts)?;
    let r = tape.constant_tensor(&relative_encoding(window.max(1), cfg.d_model));
    let rk = tape.matmul(r, bound.var(lp.wr))?;
    let allowed = band_mask(n, window);
    let inv_sqrt = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut ctx = Vec::with_capacity(h);
    let mut probs = Vec::with_capacity(h);
    for head in 0..h {
        let qh = tape.slice_cols(q, head * dk, dk)?;
        let kh = tape.slice_cols(k, head * dk, dk)?;
        let vh = tape.slice_cols(v, head * dv, dv)?;
        let rkh = tape.slice_cols(rk, head * dk, dk)?;
        let uh = tape.slice_cols(bound.var(state.layout.pos_u), head * dk, dk)?;
        let vbh = tape.slice_cols(bound.var(state.layout.pos_v), head * dk, dk)?;
        let qu = tape.add_row(qh, uh)?;
        let content = tape.matmul_nt(qu, kh)?;
        let qv = tape.add_row(qh, vbh)?;
        let by_dist = tape.matmul_nt(qv, rkh)?;
        let position = tape.band_gather(by_dist, 0)?;
        let scores = tape.add(content, position)?;
        let scores = tape.scale(scores, inv_sqrt);
        let p = tape.masked_softmax_rows(scores, &allowed)?;
        ctx.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let ctx = if h == 1 { ctx[0] } else { tape.concat_cols(&ctx)? };
    Ok((ctx, probs))
}

fn layer_forward<T: Element>(
    tape: &mut Tape<T>,
    state: &ModelState,
    bound: &Bound,
    layer: usize,
    x: Var,
    opts: &mut ForwardOptions<'_>,
) -> Result<Var> {
    let cfg = &state.config;
    let lp = &state.layout.layers[layer];
    let (ctx, _) = windowed_rel_attention(tape, state, bound, layer, x, cfg.context, opts)?;
    let ctx = site(tape, ctx, layer, Site::Context, opts)?;
    let o = linear(tape, ctx, bound.var(lp.wo), Some(bound.var(lp.bo)))?;
    let o = site(tape, o, layer, Site::AttnOut, opts)?;
    let o = dropout(tape, o, cfg.dropout, opts)?;
    let res = tape.add(x, o)?;
    let x1 = tape.layer_norm(res, bound.var(lp.ln1_gain), bound.var(lp.ln1_bias), cfg.layer_norm_eps)?;
    let f = linear(tape, x1, bound.var(lp.w1), Some(bound.var(lp.b1)))?;
    let f = match cfg.activation {
        Activation::Relu => tape.relu(f),
        Activation::Gelu => tape.gelu(f),
    };
    let f = site(tape, f, layer, Site::FfnHidden, opts)?;
    let f2 = linear(tape, f, bound.var(lp.w2), Some(bound.var(lp.b2)))?;
    let f2 = site(tape, f2, layer, Site::FfnOut, opts)?;
    let f2 = dropout(tape, f2, cfg.dropout, opts)?;
    let res = tape.add(x1, f2)?;
    Ok(tape.layer_norm(res, bound.var(lp.ln2_gain), bound.var(lp.ln2_bias), cfg.layer_norm_eps)?)
}

/// Final hidden states `[n × d_model]` for a window of input ids; position
/// `i` sees at most `L·(C−1)+1` tokens ending at `i`.
pub fn hidden<T: Element>(
    tape: &mut Tape<T>,
    state: &ModelState,
    bound: &Bound,
    ids: &[TokenId],
    opts: &mut ForwardOptions<'_>,
) -> Result<Var> {
    let e = adaptive_embed(tape, state, bound, ids)?;
    let mut x = dropout(tape, e, state.config.dropout, opts)?;
    for layer in 0..state.config.n_layers {
        x = layer_forward(tape, state, bound, layer, x, opts)?;
    }
    Ok(x)
}

/// Adaptive-softmax log-probabilities over the whole vocabulary, `[n × V]`,
/// with column `id − 1` holding token `id`.
pub fn full_logprobs<T: Element>(tape: &mut Tape<T>, state: &ModelState, bound: &Bound, h: Var) -> Result<Var> {
    let cfg = &state.config;
    let lay = &state.layout;
    let project = |tape: &mut Tape<T>, b: usize| -> Result<Var> {
        Ok(match lay.bins[b].proj {
            Some(p) => tape.matmul_nt(h, bound.var(p))?,
            None => h,
        })
    };
    let h0 = project(tape, 0)?;
    let head_tokens = tape.matmul_nt(h0, bound.var(lay.bins[0].table))?;
    let n_tail = cfg.bins.len() - 1;
    if n_tail == 0 {
        return Ok(tape.log_softmax_rows(head_tokens));
    }
    let (cw, cb) = (lay.cluster_weight.expect("tail bins"), lay.cluster_bias.expect("tail bins"));
    let clusters = tape.matmul_nt(h, bound.var(cw))?;
    let clusters = tape.add_row(clusters, bound.var(cb))?;
    let head = tape.concat_cols(&[head_tokens, clusters])?;
    let head = tape.log_softmax_rows(head);
    let v0 = cfg.bins[0].len();
    let mut parts = vec![tape.slice_cols(head, 0, v0)?];
    for b in 1..cfg.bins.len() {
        let z = project(tape, b)?;
        let logits = tape.matmul_nt(z, bound.var(lay.bins[b].table))?;
        let lp = tape.log_softmax_rows(logits);
        let cluster = tape.slice_cols(head, v0 + b - 1, 1)?;
        parts.push(tape.add_col(lp, cluster)?);
    }
    Ok(tape.concat_cols(&parts)?)
}
