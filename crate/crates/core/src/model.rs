//! The full speech translation model and its checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "SSTC" | version u32 | header_len u64 | header JSON
//! count u32 | count × (name_len u32 | name | ndim u32 | dims u64… | f64…)
//! ```
//!
//! The header holds the model config and vocabulary. Tensors are listed in
//! parameter-visit order.

use crate::decoder::{Decoder, DecoderConfig, FrozenDecoder, TokenId, Vocab};
use crate::encoder::{Adapter, AdapterConfig, Encoder, EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::nn::{join, Params};
use crate::tensor::Tensor;
use crate::trainer::{lora_wrap, LoraConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// System instruction, whitespace-tokenized against the vocabulary.
    pub instruction: String,
    /// Present once low-rank adapters have been attached to the decoder.
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

#[derive(Clone, Debug)]
pub struct SpeechTranslator {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub encoder: Encoder,
    pub adapter: Adapter,
    pub decoder: Decoder,
}

impl SpeechTranslator {
    pub fn new(mut cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.decoder.vocab_size = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(cfg.encoder.clone(), &mut rng)?;
        let adapter = Adapter::new(AdapterConfig { d_model: cfg.encoder.d_model, d_llm: cfg.decoder.d_llm }, &mut rng)?;
        let decoder = Decoder::new(cfg.decoder.clone(), &mut rng)?;
        vocab.encode(&cfg.instruction)?;
        let lora = cfg.lora.take();
        let mut m = Self { cfg, vocab, encoder, adapter, decoder };
        if let Some(l) = lora {
            m.attach_lora(&l, seed)?;
        }
        Ok(m)
    }

    pub fn instruction_ids(&self) -> Vec<TokenId> {
        self.vocab.encode(&self.cfg.instruction).expect("instruction checked at construction")
    }

    /// Wraps every decoder linear map (attention, feed-forward, output head).
    pub fn attach_lora(&mut self, lora: &LoraConfig, seed: u64) -> Result<()> {
        if self.cfg.lora.is_some() {
            return Err(Error::Contract("low-rank adapters are already attached".into()));
        }
        lora.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10_4a);
        for b in &mut self.decoder.blocks {
            for l in b.linears_mut() {
                lora_wrap(l, lora, &mut rng)?;
            }
        }
        lora_wrap(&mut self.decoder.head, lora, &mut rng)?;
        self.cfg.lora = Some(lora.clone());
        Ok(())
    }

    pub fn frozen(&self) -> FrozenTranslator {
        FrozenTranslator {
            vocab: self.vocab.clone(),
            instruction: self.instruction_ids(),
            encoder: self.encoder.frozen(),
            adapter: self.adapter.clone(),
            decoder: self.decoder.frozen(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader { config: self.cfg.clone(), vocab: self.vocab.clone() })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        self.visit("", &mut |name, t| tensors.push((name.to_string(), t.clone())));
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4).map_err(&bad)? != CKPT_MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let version = r.u32().map_err(&bad)?;
        if version != CKPT_VERSION {
            return Err(Error::UnknownVersion(version));
        }
        let hlen = r.u64().map_err(&bad)? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen).map_err(&bad)?).map_err(|e| bad(e.to_string()))?;
        let mut model = Self::new(header.config, header.vocab, 0)?;
        let count = r.u32().map_err(&bad)? as usize;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32().map_err(&bad)? as usize;
            let name = String::from_utf8(r.take(nlen).map_err(&bad)?.to_vec()).map_err(|e| bad(e.to_string()))?;
            let ndim = r.u32().map_err(&bad)? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>().map_err(&bad)?;
            let n: usize = shape.iter().product();
            let data = r.take(n * 8).map_err(&bad)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let mut err = None;
        model.visit_mut("", &mut |name, t| match tensors.remove(name) {
            Some(src) if src.shape == t.shape => t.data = src.data,
            Some(_) => err = Some(bad(format!("tensor {name} has the wrong shape"))),
            None => err = Some(bad(format!("tensor {name} is missing"))),
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"SSTC";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    vocab: Vocab,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("unexpected end of file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Params for SpeechTranslator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.adapter.visit(&join(prefix, "adapter"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Inference view of a [`SpeechTranslator`] with adapters merged.
#[derive(Clone, Debug)]
pub struct FrozenTranslator {
    pub vocab: Vocab,
    pub instruction: Vec<TokenId>,
    pub encoder: FrozenEncoder,
    pub adapter: Adapter,
    pub decoder: FrozenDecoder,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> SpeechTranslator {
        let vocab = Vocab::new(["translate", "a", "b"]).unwrap();
        let cfg = ModelConfig {
            encoder: EncoderConfig { d_in: 3, d_model: 4, n_layers: 1, n_heads: 2, chunk_frames: 8, ..Default::default() },
            decoder: DecoderConfig { d_llm: 4, n_layers: 1, n_heads: 2, recent_window: 64, turn_reserve: 8, ..Default::default() },
            instruction: "translate".into(),
            lora: None,
        };
        SpeechTranslator::new(cfg, vocab, 3).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny();
        m.attach_lora(&LoraConfig { rank: 2, alpha: 4.0, dropout: 0.0 }, 1).unwrap();
        m.decoder.blocks[0].wq.lora.as_mut().unwrap().b.data[0] = 0.5;
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = SpeechTranslator::load(&p).unwrap();
        assert_eq!(back.cfg, m.cfg);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        m.visit("", &mut |n, t| a.push((n.to_string(), t.data.clone())));
        back.visit("", &mut |n, t| b.push((n.to_string(), t.data.clone())));
        assert_eq!(a, b);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 2;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(SpeechTranslator::load(&p), Err(Error::UnknownVersion(2))));
        bytes[4] = 1;
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(SpeechTranslator::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_instruction_word_is_rejected() {
        let mut cfg = tiny().cfg;
        cfg.instruction = "hello".into();
        assert!(SpeechTranslator::new(cfg, Vocab::new(["a"]).unwrap(), 0).is_err());
    }
}
