//! Streaming single-token inference with per-layer memories and exact
//! operation tallies.
//!
//! Arithmetic mirrors the tape forward term by term (same summation order),
//! so streaming and full-window hidden states agree to rounding.

use std::collections::VecDeque;

use microlm_autograd::kernels::{fake_quant_value, gelu};
use microlm_autograd::Tensor;

use super::config::{Activation, ModelConfig, Site};
use super::state::{relative_encoding, ModelState, ParamId};
use crate::compression::CompressionSpec;
use crate::corpus::TokenId;
use crate::ops::{Component, OpCounts};
use crate::quant::{ActQuant, QuantParams};
use crate::{Error, Result};

/// `y = x·W (+ b)` over a row-major `[in × out]` weight, skipping pruned entries.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    w: Vec<f32>,
    bias: Option<Vec<f32>>,
    /// Surviving column indices per input row, when masked.
    rows_nz: Option<Vec<Vec<u32>>>,
    bits: u32,
}

impl Linear {
    /// `w` is `[in × out]` row-major, `keep` (same layout) marks survivors.
    pub fn new(in_dim: usize, out_dim: usize, w: Vec<f32>, bias: Option<Vec<f32>>, keep: Option<Vec<bool>>, bits: u32) -> Self {
        let rows_nz = keep.map(|k| {
            (0..in_dim)
                .map(|i| (0..out_dim).filter(|&j| k[i * out_dim + j]).map(|j| j as u32).collect())
                .collect()
        });
        Linear {
            in_dim,
            out_dim,
            w,
            bias,
            rows_nz,
            bits,
        }
    }

    /// From a stored `[in × out]` parameter.
    fn from_param(t: &Tensor, bias: Option<&Tensor>, keep: Option<&[bool]>, bits: u32) -> Self {
        Linear::new(
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            bias.map(|b| b.data().to_vec()),
            keep.map(<[bool]>::to_vec),
            bits,
        )
    }

    /// From a stored `[out × in]` parameter used as `x·Pᵀ`.
    fn from_param_transposed(t: &Tensor, bias: Option<&Tensor>, keep: Option<&[bool]>, bits: u32) -> Self {
        let (out_dim, in_dim) = (t.rows(), t.cols());
        let tr = |v: &[f32]| microlm_autograd::kernels::transpose(v, out_dim, in_dim);
        let keep_t = keep.map(|k| {
            let mut o = vec![false; k.len()];
            for r in 0..out_dim {
                for c in 0..in_dim {
                    o[c * out_dim + r] = k[r * in_dim + c];
                }
            }
            o
        });
        Linear::new(in_dim, out_dim, tr(t.data()), bias.map(|b| b.data().to_vec()), keep_t, bits)
    }

    pub fn apply(&self, x: &[f32], ops: &mut OpCounts, comp: Component) -> Vec<f32> {
        let n = self.out_dim;
        let mut acc = vec![0f32; n];
        let mut touched = vec![false; n];
        let mut muls = 0;
        let mut adds = 0;
        for (i, &xi) in x.iter().enumerate().take(self.in_dim) {
            let row = &self.w[i * n..(i + 1) * n];
            match &self.rows_nz {
                None => {
                    for j in 0..n {
                        acc[j] += xi * row[j];
                        adds += touched[j] as usize;
                        touched[j] = true;
                    }
                    muls += n;
                }
                Some(nz) => {
                    for &j in &nz[i] {
                        let j = j as usize;
                        acc[j] += xi * row[j];
                        adds += touched[j] as usize;
                        touched[j] = true;
                    }
                    muls += nz[i].len();
                }
            }
        }
        if let Some(b) = &self.bias {
            for j in 0..n {
                acc[j] += b[j];
                adds += touched[j] as usize;
            }
        }
        ops.mul_w(comp, muls, self.bits);
        ops.add(comp, adds);
        acc
    }
}

struct LayerNorm {
    gain: Vec<f32>,
    bias: Vec<f32>,
    eps: f32,
}

impl LayerNorm {
    fn apply(&self, x: &[f32], ops: &mut OpCounts, comp: Component) -> Vec<f32> {
        let d = x.len();
        let inv_d = 1.0 / d as f32;
        let mut mu = 0f32;
        for &v in x {
            mu += v;
        }
        mu *= inv_d;
        let mut var = 0f32;
        let mut c = Vec::with_capacity(d);
        for &v in x {
            let cv = v - mu;
            var += cv * cv;
            c.push(cv);
        }
        var *= inv_d;
        let r = 1.0 / (var + self.eps).sqrt();
        let out = c
            .iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(&cv, (&g, &b))| cv * r * g + b)
            .collect();
        // sums (d−1 each), centring, eps, bias; mean/var scalings, squares,
        // sqrt, reciprocal, normalise, gain
        ops.add(comp, 4 * d - 1);
        ops.mul(comp, 3 * d + 4);
        out
    }
}

struct EngineLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    w1: Linear,
    w2: Linear,
    /// `R·W_r`, `[C × h·d_k]`, fixed per model.
    rk: Vec<f32>,
    ln1: LayerNorm,
    ln2: LayerNorm,
}

struct Slot {
    hidden: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Per-layer FIFO memories of the last `C−1` positions.
pub struct StreamState {
    layers: Vec<VecDeque<Slot>>,
    capacity: usize,
    position: usize,
}

impl StreamState {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn occupancy(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    /// Layer-input hidden vectors held by one layer, oldest first.
    pub fn memory(&self, layer: usize) -> impl Iterator<Item = &[f32]> {
        self.layers[layer].iter().map(|s| s.hidden.as_slice())
    }
}

/// Whether the output cost covers the whole predictive distribution or only
/// what the target's probability needs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxMode {
    #[default]
    Full,
    TargetPath,
}

/// A frozen model prepared for token-by-token evaluation.
pub struct Engine {
    cfg: ModelConfig,
    tables: Vec<Tensor>,
    in_proj: Vec<Option<Linear>>,
    layers: Vec<EngineLayer>,
    pos_u: Vec<f32>,
    pos_v: Vec<f32>,
    out_proj: Vec<Option<Linear>>,
    out_tables: Vec<Linear>,
    cluster: Option<Linear>,
    act: Option<ActQuant>,
}

impl Engine {
    pub fn new(state: &ModelState, comp: &CompressionSpec) -> Result<Self> {
        let cfg = state.config.clone();
        let lay = &state.layout;
        let t = |id: ParamId| state.tensor(id);
        let lin = |w: ParamId, b: Option<ParamId>| {
            Linear::from_param(t(w), b.map(t), comp.mask(w), comp.bits(w))
        };
        let r = relative_encoding(cfg.context, cfg.d_model);
        let layers = lay
            .layers
            .iter()
            .map(|lp| {
                let wr = t(lp.wr);
                let mut rk = vec![0f32; cfg.context * wr.cols()];
                microlm_autograd::kernels::matmul_acc(r.data(), wr.data(), &mut rk, cfg.context, cfg.d_model, wr.cols());
                let ln = |g: ParamId, b: ParamId| LayerNorm {
                    gain: t(g).data().to_vec(),
                    bias: t(b).data().to_vec(),
                    eps: cfg.layer_norm_eps as f32,
                };
                EngineLayer {
                    wq: lin(lp.wq, Some(lp.bq)),
                    wk: lin(lp.wk, Some(lp.bk)),
                    wv: lin(lp.wv, Some(lp.bv)),
                    wo: lin(lp.wo, Some(lp.bo)),
                    w1: lin(lp.w1, Some(lp.b1)),
                    w2: lin(lp.w2, Some(lp.b2)),
                    rk,
                    ln1: ln(lp.ln1_gain, lp.ln1_bias),
                    ln2: ln(lp.ln2_gain, lp.ln2_bias),
                }
            })
            .collect();
        let in_proj = lay.bins.iter().map(|b| b.proj.map(|p| lin(p, None))).collect();
        let out_proj = lay
            .bins
            .iter()
            .map(|b| b.proj.map(|p| Linear::from_param_transposed(t(p), None, comp.mask(p), comp.bits(p))))
            .collect();
        let out_tables = lay
            .bins
            .iter()
            .map(|b| Linear::from_param_transposed(t(b.table), None, comp.mask(b.table), comp.bits(b.table)))
            .collect();
        let cluster = lay.cluster_weight.map(|w| {
            let b = lay.cluster_bias.expect("cluster bias");
            Linear::from_param_transposed(t(w), Some(t(b)), comp.mask(w), comp.bits(w))
        });
        if let Some(a) = &comp.act_quant {
            if a.inv_scales.len() != cfg.n_layers {
                return Err(Error::input("activation scales do not match layer count"));
            }
        }
        Ok(Engine {
            tables: lay.bins.iter().map(|b| t(b.table).clone()).collect(),
            in_proj,
            layers,
            pos_u: t(lay.pos_u).data().to_vec(),
            pos_v: t(lay.pos_v).data().to_vec(),
            out_proj,
            out_tables,
            cluster,
            act: comp.act_quant.clone(),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn new_stream(&self) -> StreamState {
        StreamState {
            layers: (0..self.cfg.n_layers).map(|_| VecDeque::new()).collect(),
            capacity: self.cfg.context - 1,
            position: 0,
        }
    }

    fn site(&self, x: &mut [f32], layer: usize, s: Site) {
        if let Some(q) = self.act.as_ref().and_then(|a| a.params(layer, s)) {
            quantize_in_place(x, q);
        }
    }

    fn embed(&self, id: TokenId, ops: &mut OpCounts) -> Result<Vec<f32>> {
        let b = self
            .cfg
            .bin_of(id)
            .ok_or_else(|| Error::input(format!("token id {id} outside [1, {}]", self.cfg.vocab_size())))?;
        let row = self.tables[b].row((id - self.cfg.bins[b].first) as usize);
        Ok(match &self.in_proj[b] {
            Some(p) => p.apply(row, ops, Component::Embedding),
            None => row.to_vec(),
        })
    }

    /// Consumes one token and returns the final hidden state of its position.
    pub fn infer_next(&self, id: TokenId, st: &mut StreamState, ops: &mut OpCounts) -> Result<Vec<f32>> {
        let mut x = self.embed(id, ops)?;
        for l in 0..self.cfg.n_layers {
            x = self.layer_step(l, x, &mut st.layers[l], st.capacity, ops);
        }
        st.position += 1;
        Ok(x)
    }

    fn layer_step(&self, l: usize, x: Vec<f32>, mem: &mut VecDeque<Slot>, capacity: usize, ops: &mut OpCounts) -> Vec<f32> {
        let cfg = &self.cfg;
        let layer = &self.layers[l];
        let a = Component::Attention;
        let (h, dk, dv) = (cfg.n_heads, cfg.d_k, cfg.d_v);
        let hk = h * dk;
        let mut q = layer.wq.apply(&x, ops, a);
        self.site(&mut q, l, Site::Query);
        let mut k = layer.wk.apply(&x, ops, a);
        self.site(&mut k, l, Site::Key);
        let mut v = layer.wv.apply(&x, ops, a);
        self.site(&mut v, l, Site::Value);
        let m = mem.len() + 1;
        let key = |j: usize| if j < mem.len() { &mem[j].k } else { &k };
        let val = |j: usize| if j < mem.len() { &mem[j].v } else { &v };
        let inv_sqrt = 1.0 / (dk as f32).sqrt();
        let mut ctx = vec![0f32; h * dv];
        let mut scores = vec![0f32; m];
        for head in 0..h {
            let qh = &q[head * dk..(head + 1) * dk];
            let qu: Vec<f32> = qh.iter().zip(&self.pos_u[head * dk..]).map(|(a, b)| a + b).collect();
            let qv: Vec<f32> = qh.iter().zip(&self.pos_v[head * dk..]).map(|(a, b)| a + b).collect();
            ops.add(a, 2 * dk);
            for (j, s) in scores.iter_mut().enumerate() {
                let dist = m - 1 - j;
                let kj = &key(j)[head * dk..(head + 1) * dk];
                let rj = &layer.rk[dist * hk + head * dk..dist * hk + (head + 1) * dk];
                *s = (dot(&qu, kj) + dot(&qv, rj)) * inv_sqrt;
            }
            ops.mul(a, m * (2 * dk + 1));
            ops.add(a, m * (2 * (dk - 1) + 1));
            softmax_in_place(&mut scores, ops, a);
            let ch = &mut ctx[head * dv..(head + 1) * dv];
            for (j, &p) in scores.iter().enumerate() {
                let vj = &val(j)[head * dv..(head + 1) * dv];
                for (c, &vv) in ch.iter_mut().zip(vj) {
                    *c += p * vv;
                }
            }
            ops.mul(a, m * dv);
            ops.add(a, (m - 1) * dv);
        }
        self.site(&mut ctx, l, Site::Context);
        let mut o = layer.wo.apply(&ctx, ops, a);
        self.site(&mut o, l, Site::AttnOut);
        let res: Vec<f32> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        ops.add(a, res.len());
        let x1 = layer.ln1.apply(&res, ops, a);

        let f = Component::FeedForward;
        let mut hid = layer.w1.apply(&x1, ops, f);
        match cfg.activation {
            Activation::Relu => hid.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Gelu => {
                hid.iter_mut().for_each(|v| *v = gelu(*v));
                ops.mul(f, 7 * hid.len());
                ops.add(f, 2 * hid.len());
            }
        }
        self.site(&mut hid, l, Site::FfnHidden);
        let mut f2 = layer.w2.apply(&hid, ops, f);
        self.site(&mut f2, l, Site::FfnOut);
        let res: Vec<f32> = x1.iter().zip(&f2).map(|(a, b)| a + b).collect();
        ops.add(f, res.len());
        let out = layer.ln2.apply(&res, ops, f);

        mem.push_back(Slot { hidden: x, k, v });
        while mem.len() > capacity {
            mem.pop_front();
        }
        out
    }

    fn head_logits(&self, h: &[f32], ops: &mut OpCounts) -> Vec<f32> {
        let s = Component::Softmax;
        let h0 = match &self.out_proj[0] {
            Some(p) => p.apply(h, ops, s),
            None => h.to_vec(),
        };
        let mut logits = self.out_tables[0].apply(&h0, ops, s);
        if let Some(c) = &self.cluster {
            logits.extend(c.apply(h, ops, s));
        }
        logits
    }

    fn tail_logits(&self, h: &[f32], b: usize, ops: &mut OpCounts) -> Vec<f32> {
        let s = Component::Softmax;
        let z = match &self.out_proj[b] {
            Some(p) => p.apply(h, ops, s),
            None => h.to_vec(),
        };
        self.out_tables[b].apply(&z, ops, s)
    }

    /// Full predictive distribution over the vocabulary (index `id − 1`).
    pub fn distribution(&self, h: &[f32], ops: &mut OpCounts) -> Vec<f32> {
        let s = Component::Softmax;
        let mut head = self.head_logits(h, ops);
        softmax_in_place(&mut head, ops, s);
        let v0 = self.cfg.bins[0].len();
        let mut p = head[..v0].to_vec();
        for b in 1..self.cfg.bins.len() {
            let mut tail = self.tail_logits(h, b, ops);
            softmax_in_place(&mut tail, ops, s);
            let pc = head[v0 + b - 1];
            p.extend(tail.iter().map(|t| pc * t));
            ops.mul(s, tail.len());
        }
        p
    }

    /// Probability of one target, computing only the normalizers it needs.
    pub fn target_prob(&self, h: &[f32], target: TokenId, ops: &mut OpCounts) -> Result<f32> {
        let s = Component::Softmax;
        let b = self
            .cfg
            .bin_of(target)
            .ok_or_else(|| Error::input(format!("target id {target} out of range")))?;
        let head = self.head_logits(h, ops);
        let head_col = if b == 0 {
            (target - 1) as usize
        } else {
            self.cfg.bins[0].len() + b - 1
        };
        let ph = normalized_entry(&head, head_col, ops, s);
        if b == 0 {
            return Ok(ph);
        }
        let tail = self.tail_logits(h, b, ops);
        let pt = normalized_entry(&tail, (target - self.cfg.bins[b].first) as usize, ops, s);
        ops.mul(s, 1);
        Ok(ph * pt)
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0f32;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn quantize_in_place(x: &mut [f32], q: QuantParams) {
    let qm = q.qmax() as f32;
    for v in x.iter_mut() {
        *v = fake_quant_value(*v, q.inv_scale, qm).0;
    }
}

/// Max-subtracted softmax; `n` subtractions, exponentials and divisions plus `n−1` sum adds.
pub(crate) fn softmax_in_place(x: &mut [f32], ops: &mut OpCounts, comp: Component) {
    let n = x.len();
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
    ops.add(comp, 2 * n - 1);
    ops.mul(comp, 2 * n);
}

/// `softmax(x)[i]` without normalising the other entries.
pub(crate) fn normalized_entry(x: &[f32], i: usize, ops: &mut OpCounts, comp: Component) -> f32 {
    let n = x.len();
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f32;
    let mut e_i = 0f32;
    for (j, &v) in x.iter().enumerate() {
        let e = (v - max).exp();
        sum += e;
        if j == i {
            e_i = e;
        }
    }
    ops.add(comp, 2 * n - 1);
    ops.mul(comp, n + 1);
    e_i / sum
}
