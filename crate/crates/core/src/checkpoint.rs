//! Checkpoints on disk: `manifest.json` describing every array and
//! `blob.bin` holding them back to back, little-endian.
//!
//! Quantized tensors are stored as integer codes at the narrowest byte
//! width holding their bits; masks as bitsets, least significant bit first.

use std::collections::HashMap;
use std::path::Path;

use microlm_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::compression::CompressionSpec;
use crate::model::{ModelConfig, ModelState, ParamKind};
use crate::quant::{dequantize, quantize_codes, ActQuant, QuantParams};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "blob.bin";
const FORMAT_VERSION: u32 = 1;

/// Provenance and pipeline facts carried alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub stage: String,
    pub config_hash: String,
    /// Manifest hashes of the checkpoints this one was derived from.
    pub parents: Vec<String>,
    pub cache_searched: bool,
    /// Cache scalars no longer move (set once the model is quantized).
    pub cache_frozen: bool,
    pub val_ppl: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Encoding {
    F32,
    I8,
    I16,
}

impl Encoding {
    fn width(self) -> usize {
        match self {
            Encoding::F32 => 4,
            Encoding::I8 => 1,
            Encoding::I16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    encoding: Encoding,
    offset: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    quant: Option<QuantParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_offset: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    act_quant: Option<ActQuant>,
    hebbian_offset: u64,
    blob_bytes: u64,
    blob_sha256: String,
}

pub struct Checkpoint {
    pub state: ModelState,
    pub comp: CompressionSpec,
    pub meta: CheckpointMeta,
}

fn pack_bits(bits: &[bool], out: &mut Vec<u8>) {
    for chunk in bits.chunks(8) {
        out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &k)| b | ((k as u8) << i)));
    }
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(state: ModelState, comp: CompressionSpec, meta: CheckpointMeta) -> Self {
        Checkpoint { state, comp, meta }
    }

    pub fn dense(state: ModelState, meta: CheckpointMeta) -> Self {
        let comp = CompressionSpec::dense(&state);
        Checkpoint { state, comp, meta }
    }

    /// Writes the checkpoint into `dir` (created if needed) and returns the
    /// manifest's hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut arrays = Vec::with_capacity(self.state.params.len());
        for id in self.state.ids() {
            let p = self.state.param(id);
            let data = p.tensor.data();
            let quant = self.comp.quant(id);
            let offset = blob.len() as u64;
            let encoding = match quant {
                None => {
                    data.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
                    Encoding::F32
                }
                Some(q) => {
                    let codes = quantize_codes(data, q);
                    let back = dequantize(&codes, q);
                    if back.iter().zip(data).any(|(a, b)| a.to_bits() != b.to_bits()) {
                        return Err(Error::contract(format!("{} is not on its quantization grid", p.name)));
                    }
                    if q.bits <= 8 {
                        codes.iter().for_each(|&c| blob.push(c as i8 as u8));
                        Encoding::I8
                    } else {
                        codes.iter().for_each(|&c| blob.extend_from_slice(&(c as i16).to_le_bytes()));
                        Encoding::I16
                    }
                }
            };
            let mask_offset = self.comp.mask(id).map(|m| {
                let o = blob.len() as u64;
                pack_bits(m, &mut blob);
                o
            });
            arrays.push(ArrayEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.tensor.shape().to_vec(),
                encoding,
                offset,
                quant,
                mask_offset,
            });
        }
        let hebbian_offset = blob.len() as u64;
        self.state.hebbian_counts.iter().for_each(|c| blob.extend_from_slice(&c.to_le_bytes()));
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: self.state.config.clone(),
            meta: self.meta.clone(),
            arrays,
            act_quant: self.comp.act_quant.clone(),
            hebbian_offset,
            blob_bytes: blob.len() as u64,
            blob_sha256: sha256_hex(&blob),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join(BLOB), &blob)?;
        std::fs::write(dir.join(MANIFEST), &text)?;
        Ok(sha256_hex(text.as_bytes()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&mpath)
            .map_err(|e| Error::input(format!("cannot read checkpoint {}: {e}", mpath.display())))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("malformed manifest {}: {e}", mpath.display())))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::input(format!("unsupported checkpoint format {}", m.format_version)));
        }
        let blob = std::fs::read(dir.join(BLOB))
            .map_err(|e| Error::input(format!("cannot read checkpoint blob in {}: {e}", dir.display())))?;
        if blob.len() as u64 != m.blob_bytes || sha256_hex(&blob) != m.blob_sha256 {
            return Err(Error::input(format!("checkpoint blob in {} is corrupt", dir.display())));
        }
        let slice = |off: u64, len: usize| -> Result<&[u8]> {
            let off = off as usize;
            blob.get(off..off + len)
                .ok_or_else(|| Error::input("checkpoint array runs past the blob"))
        };
        let mut arrays = HashMap::new();
        let mut masks = HashMap::new();
        let mut quants = HashMap::new();
        for a in &m.arrays {
            let n: usize = a.shape.iter().product();
            let bytes = slice(a.offset, n * a.encoding.width())?;
            let data: Vec<f32> = match (a.encoding, a.quant) {
                (Encoding::F32, None) => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
                (Encoding::I8, Some(q)) => dequantize(&bytes.iter().map(|&b| b as i8 as i32).collect::<Vec<_>>(), q),
                (Encoding::I16, Some(q)) => dequantize(
                    &bytes
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes(c.try_into().expect("2 bytes")) as i32)
                        .collect::<Vec<_>>(),
                    q,
                ),
                _ => return Err(Error::input(format!("array {} has inconsistent encoding", a.name))),
            };
            if let Some(o) = a.mask_offset {
                masks.insert(a.name.clone(), unpack_bits(slice(o, n.div_ceil(8))?, n));
            }
            if let Some(q) = a.quant {
                quants.insert(a.name.clone(), q);
            }
            arrays.insert(a.name.clone(), Tensor::new(a.shape.clone(), data)?);
        }
        let vocab = m.model.vocab_size();
        let counts = slice(m.hebbian_offset, vocab * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let state = ModelState::from_arrays(m.model, arrays, counts)?;
        let mut comp = CompressionSpec::dense(&state);
        for id in state.ids() {
            let name = &state.param(id).name;
            comp.masks[id.0] = masks.remove(name);
            comp.weight_quant[id.0] = quants.remove(name);
        }
        comp.act_quant = m.act_quant;
        if let Some(a) = &comp.act_quant {
            if a.inv_scales.len() != state.config.n_layers {
                return Err(Error::input("activation scales do not match layer count"));
            }
        }
        Ok(Checkpoint {
            state,
            comp,
            meta: m.meta,
        })
    }

    /// Hash of a saved checkpoint's manifest.
    pub fn manifest_hash(dir: &Path) -> Result<String> {
        let text = std::fs::read(dir.join(MANIFEST))
            .map_err(|e| Error::input(format!("cannot read checkpoint in {}: {e}", dir.display())))?;
        Ok(sha256_hex(&text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::Site;
    use crate::prune::magnitude_mask;
    use crate::quant::{compute_scale, fake_quantize, ActStats};

    fn bits_of(s: &ModelState) -> Vec<Vec<u32>> {
        s.params.iter().map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect()).collect()
    }

    #[test]
    fn dense_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ModelState::new(tiny_config(), 3).unwrap();
        s.hebbian_counts[4] = 17;
        let meta = CheckpointMeta {
            stage: "train".into(),
            val_ppl: Some(12.5),
            ..Default::default()
        };
        let h = Checkpoint::dense(s.clone(), meta.clone()).save(dir.path()).unwrap();
        assert_eq!(h, Checkpoint::manifest_hash(dir.path()).unwrap());
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(bits_of(&back.state), bits_of(&s));
        assert_eq!(back.state.hebbian_counts, s.hebbian_counts);
        assert_eq!(back.meta, meta);
        assert_eq!(back.comp, CompressionSpec::dense(&s));
    }

    #[test]
    fn sparse_quantized_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ModelState::new(tiny_config(), 4).unwrap();
        let mut comp = CompressionSpec::dense(&s);
        for (k, id) in s.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let kind = s.param(id).kind;
            if kind == ParamKind::Weight {
                let keep = magnitude_mask(s.tensor(id).data(), 0.358);
                let t = s.tensor_mut(id).data_mut();
                for (x, &kp) in t.iter_mut().zip(&keep) {
                    if !kp {
                        *x = 0.0;
                    }
                }
                comp.masks[id.0] = Some(keep);
                let bits = if k % 2 == 0 { 9 } else { 8 };
                let q = compute_scale(s.tensor(id).data(), bits).unwrap();
                let snapped = fake_quantize(s.tensor(id).data(), q);
                s.tensor_mut(id).data_mut().copy_from_slice(&snapped);
                comp.weight_quant[id.0] = Some(q);
            }
        }
        let mut stats = ActStats::new(2);
        stats.observe(1, Site::FfnHidden, 3.0);
        comp.act_quant = Some(ActQuant::from_stats(&stats, 9, &[Site::FfnHidden]).unwrap());
        Checkpoint::new(s.clone(), comp.clone(), CheckpointMeta::default()).save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(bits_of(&back.state), bits_of(&s));
        assert_eq!(back.comp, comp);
    }

    #[test]
    fn off_grid_weights_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let s = ModelState::new(tiny_config(), 5).unwrap();
        let mut comp = CompressionSpec::dense(&s);
        let id = s.layout.layers[0].wq;
        comp.weight_quant[id.0] = Some(compute_scale(s.tensor(id).data(), 4).unwrap());
        let r = Checkpoint::new(s, comp, CheckpointMeta::default()).save(dir.path());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn corrupt_or_missing_checkpoint_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Input(_))));
        let s = ModelState::new(tiny_config(), 6).unwrap();
        Checkpoint::dense(s, CheckpointMeta::default()).save(dir.path()).unwrap();
        let mut blob = std::fs::read(dir.path().join(BLOB)).unwrap();
        blob[10] ^= 1;
        std::fs::write(dir.path().join(BLOB), blob).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Input(_))));
    }
}
