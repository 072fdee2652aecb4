use std::collections::HashMap;

use microlm_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::{Error, Result};

/// Initial cache inverse temperature and mixture weight.
pub const CACHE_THETA_INIT: f64 = 0.016;
pub const CACHE_LAMBDA_INIT: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Per-bin token table, shared by the input embedding and the output softmax.
    EmbeddingTable,
    /// Per-bin map between the bin width and `d_model`.
    EmbeddingProjection,
    Weight,
    Bias,
    Norm,
    PositionBias,
    /// Raw (reparameterized) cache scalar.
    CacheScalar,
}

impl ParamKind {
    pub fn is_embedding(self) -> bool {
        matches!(self, ParamKind::EmbeddingTable | ParamKind::EmbeddingProjection)
    }

    pub fn is_matrix(self) -> bool {
        matches!(
            self,
            ParamKind::EmbeddingTable | ParamKind::EmbeddingProjection | ParamKind::Weight
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinParams {
    pub table: ParamId,
    /// `[dim × d_model]`; absent when the bin width equals `d_model`.
    pub proj: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub wr: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub bins: Vec<BinParams>,
    pub layers: Vec<LayerParams>,
    /// Global content and position biases of the relative attention score.
    pub pos_u: ParamId,
    pub pos_v: ParamId,
    /// `[n_tail × d_model]` cluster logits of the head softmax.
    pub cluster_weight: Option<ParamId>,
    pub cluster_bias: Option<ParamId>,
    pub cache_log_theta: ParamId,
    pub cache_logit_lambda: ParamId,
}

/// Every trainable array of a model plus the Hebbian class counters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub layout: Layout,
    pub hebbian_counts: Vec<u32>,
    index: HashMap<String, ParamId>,
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder {
    fn add(&mut self, name: String, kind: ParamKind, shape: Vec<usize>) -> ParamId {
        let tensor = match kind {
            ParamKind::Bias | ParamKind::PositionBias | ParamKind::CacheScalar => Tensor::zeros(shape),
            ParamKind::Norm if name.ends_with("gain") => Tensor::filled(shape, 1.0),
            ParamKind::Norm => Tensor::zeros(shape),
            _ => {
                let (rng, normal) = (&mut self.rng, self.normal);
                Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
            }
        };
        self.params.push(Param { name, kind, tensor });
        ParamId(self.params.len() - 1)
    }
}

impl ModelState {
    /// Fresh model: normal(0, init_std) matrices, zero biases, unit gains,
    /// cache scalars at their initial values.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config(e.to_string()))?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
        };
        let d = config.d_model;
        let hk = config.n_heads * config.d_k;
        let hv = config.n_heads * config.d_v;
        let bins = config
            .bins
            .iter()
            .enumerate()
            .map(|(i, bin)| BinParams {
                table: b.add(format!("emb.{i}.table"), ParamKind::EmbeddingTable, vec![bin.len(), bin.dim]),
                proj: (bin.dim != d)
                    .then(|| b.add(format!("emb.{i}.proj"), ParamKind::EmbeddingProjection, vec![bin.dim, d])),
            })
            .collect();
        let layers = (0..config.n_layers)
            .map(|l| {
                let mut p = |n: &str, kind, shape| b.add(format!("layer.{l}.{n}"), kind, shape);
                LayerParams {
                    wq: p("attn.wq", ParamKind::Weight, vec![d, hk]),
                    bq: p("attn.bq", ParamKind::Bias, vec![hk]),
                    wk: p("attn.wk", ParamKind::Weight, vec![d, hk]),
                    bk: p("attn.bk", ParamKind::Bias, vec![hk]),
                    wv: p("attn.wv", ParamKind::Weight, vec![d, hv]),
                    bv: p("attn.bv", ParamKind::Bias, vec![hv]),
                    wo: p("attn.wo", ParamKind::Weight, vec![hv, d]),
                    bo: p("attn.bo", ParamKind::Bias, vec![d]),
                    wr: p("attn.wr", ParamKind::Weight, vec![d, hk]),
                    ln1_gain: p("ln1.gain", ParamKind::Norm, vec![d]),
                    ln1_bias: p("ln1.bias", ParamKind::Norm, vec![d]),
                    w1: p("ffn.w1", ParamKind::Weight, vec![d, config.d_ff]),
                    b1: p("ffn.b1", ParamKind::Bias, vec![config.d_ff]),
                    w2: p("ffn.w2", ParamKind::Weight, vec![config.d_ff, d]),
                    b2: p("ffn.b2", ParamKind::Bias, vec![d]),
                    ln2_gain: p("ln2.gain", ParamKind::Norm, vec![d]),
                    ln2_bias: p("ln2.bias", ParamKind::Norm, vec![d]),
                }
            })
            .collect();
        let pos_u = b.add("attn.pos_u".into(), ParamKind::PositionBias, vec![hk]);
        let pos_v = b.add("attn.pos_v".into(), ParamKind::PositionBias, vec![hk]);
        let n_tail = config.bins.len() - 1;
        let (cluster_weight, cluster_bias) = if n_tail > 0 {
            (
                Some(b.add("softmax.cluster.weight".into(), ParamKind::Weight, vec![n_tail, d])),
                Some(b.add("softmax.cluster.bias".into(), ParamKind::Bias, vec![n_tail])),
            )
        } else {
            (None, None)
        };
        let cache_log_theta = b.add("cache.log_theta".into(), ParamKind::CacheScalar, vec![1]);
        let cache_logit_lambda = b.add("cache.logit_lambda".into(), ParamKind::CacheScalar, vec![1]);
        let layout = Layout {
            bins,
            layers,
            pos_u,
            pos_v,
            cluster_weight,
            cluster_bias,
            cache_log_theta,
            cache_logit_lambda,
        };
        let vocab = config.vocab_size();
        let mut state = Self::from_parts(config, b.params, layout, vec![0; vocab]);
        state.set_cache_scalars(CACHE_THETA_INIT, CACHE_LAMBDA_INIT);
        Ok(state)
    }

    fn from_parts(config: ModelConfig, params: Vec<Param>, layout: Layout, hebbian_counts: Vec<u32>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), ParamId(i)))
            .collect();
        ModelState {
            config,
            params,
            layout,
            hebbian_counts,
            index,
        }
    }

    /// Rebuilds a model from stored arrays; every parameter of the layout
    /// implied by `config` must be present with the expected shape.
    pub fn from_arrays(
        config: ModelConfig,
        mut arrays: HashMap<String, Tensor>,
        hebbian_counts: Vec<u32>,
    ) -> Result<Self> {
        let mut state = ModelState::new(config, 0)?;
        for p in &mut state.params {
            let t = arrays
                .remove(&p.name)
                .ok_or_else(|| Error::input(format!("checkpoint lacks array {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::input(format!(
                    "array {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
        if let Some(name) = arrays.keys().next() {
            return Err(Error::input(format!("checkpoint has unknown array {name}")));
        }
        if hebbian_counts.len() != state.config.vocab_size() {
            return Err(Error::input("hebbian counter length does not match vocabulary"));
        }
        state.hebbian_counts = hebbian_counts;
        Ok(state)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Stored values over every parameter, cache scalars included.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cache_theta(&self) -> f64 {
        (self.tensor(self.layout.cache_log_theta).data()[0] as f64).exp()
    }

    pub fn cache_lambda(&self) -> f64 {
        let z = self.tensor(self.layout.cache_logit_lambda).data()[0] as f64;
        1.0 / (1.0 + (-z).exp())
    }

    pub fn set_cache_scalars(&mut self, theta: f64, lambda: f64) {
        let lt = theta.ln() as f32;
        let ll = (lambda / (1.0 - lambda)).ln() as f32;
        self.tensor_mut(self.layout.cache_log_theta).data_mut()[0] = lt;
        self.tensor_mut(self.layout.cache_logit_lambda).data_mut()[0] = ll;
    }
}

/// Sinusoidal encodings of relative distances `0..c`, `[c × d]`.
pub fn relative_encoding(c: usize, d: usize) -> Tensor {
    Tensor::from_fn(vec![c, d], |i| {
        let (dist, j) = (i / d, i % d);
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let a = dist as f64 * freq;
        (if j % 2 == 0 { a.sin() } else { a.cos() }) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_config() {
        let s = ModelState::new(crate::model::tests::tiny_config(), 1).unwrap();
        let c = &s.config;
        assert_eq!(s.tensor(s.layout.bins[0].table).shape(), &[c.bins[0].len(), c.bins[0].dim]);
        assert!(s.layout.bins[0].proj.is_none());
        assert_eq!(
            s.tensor(s.layout.bins[1].proj.unwrap()).shape(),
            &[c.bins[1].dim, c.d_model]
        );
        assert_eq!(s.layout.layers.len(), c.n_layers);
        assert_eq!(s.hebbian_counts.len(), c.vocab_size());
        assert!((s.cache_theta() - CACHE_THETA_INIT).abs() < 1e-6);
        assert!((s.cache_lambda() - CACHE_LAMBDA_INIT).abs() < 1e-6);
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelState::new(crate::model::tests::tiny_config(), 5).unwrap();
        let b = ModelState::new(crate::model::tests::tiny_config(), 5).unwrap();
        let c = ModelState::new(crate::model::tests::tiny_config(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn encoding_at_distance_zero() {
        let r = relative_encoding(3, 4);
        assert_eq!(r.row(0), &[0.0, 1.0, 0.0, 1.0]);
    }
}
