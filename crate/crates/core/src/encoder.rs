//! Streaming speech encoder and the speech-to-embedding adapter.
//!
//! The encoder consumes acoustic feature frames (one vector per 20 ms) in
//! chunks of 48 frames. Each frame attends to its own chunk and to the
//! preceding chunks inside a sliding window, so chunk `i` can be encoded as
//! soon as it arrives and its output never changes when later audio shows up.
//! The adapter halves the frame rate twice (kernel 2, stride 2) and projects
//! to the decoder width, turning one 48-frame chunk into 12 embeddings.

use crate::attention::{incremental_attend, ChunkMaskSpec, LayerKVCache, RopeConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Block, FrozenBlock, FrozenLinear, LayerNormP, Linear, Params, TapeCtx};
use crate::tensor::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub chunk_frames: usize,
    pub frame_ms: u64,
    pub window_chunks: usize,
    pub rope_base: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            chunk_frames: 48,
            frame_ms: 20,
            window_chunks: 10,
            rope_base: 10000.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.n_layers == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) || !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.n_heads
            )));
        }
        if self.chunk_frames == 0 || !self.chunk_frames.is_multiple_of(ADAPTER_FACTOR) {
            return Err(Error::Config(format!("chunk_frames {} must be a positive multiple of 4", self.chunk_frames)));
        }
        self.mask_spec().validate()?;
        self.rope().validate()
    }

    pub fn chunk_ms(&self) -> u64 {
        self.chunk_frames as u64 * self.frame_ms
    }

    pub fn mask_spec(&self) -> ChunkMaskSpec {
        ChunkMaskSpec { chunk_frames: self.chunk_frames, window_chunks: self.window_chunks }
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig { head_dim: self.d_model / self.n_heads.max(1), base: self.rope_base }
    }

    /// Embeddings the adapter produces per chunk.
    pub fn embeddings_per_chunk(&self) -> usize {
        self.chunk_frames / ADAPTER_FACTOR
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormP,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let input = Linear::new(cfg.d_in, cfg.d_model, rng);
        let blocks = (0..cfg.n_layers).map(|_| Block::new(cfg.d_model, cfg.n_heads, rng)).collect::<Result<_>>()?;
        Ok(Self { ln_f: LayerNormP::new(cfg.d_model), cfg, input, blocks })
    }

    /// Tape forward over frames at positions `0..T` under the chunkwise mask.
    pub fn forward(&self, ctx: &mut TapeCtx, frames: Var) -> Result<Var> {
        let t = ctx.tape.shape(frames)[0];
        if t == 0 || !t.is_multiple_of(self.cfg.chunk_frames) {
            return shape_err(format!("{t} frames is not a multiple of chunk size {}", self.cfg.chunk_frames));
        }
        let spec = self.cfg.mask_spec();
        let positions: Vec<usize> = (0..t).collect();
        let ranges: Vec<(usize, usize)> = positions.iter().map(|&p| spec.key_range(p)).collect();
        let mut x = self.input.forward(ctx, frames)?;
        for b in &self.blocks {
            x = b.forward(ctx, x, &positions, &ranges, self.cfg.rope_base)?;
        }
        self.ln_f.forward(ctx, x)
    }

    /// One-shot encoding of a whole stream (`T` a multiple of the chunk size).
    pub fn encode_full(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.cols() != self.cfg.d_in {
            return shape_err(format!("frames have {} features, encoder expects {}", frames.cols(), self.cfg.d_in));
        }
        let mut ctx = TapeCtx::new();
        let x = ctx.tape.input(vec![frames.rows(), frames.cols()], frames.data.clone())?;
        let y = self.forward(&mut ctx, x)?;
        Ok(ctx.tape.value(y))
    }

    pub fn frozen(&self) -> FrozenEncoder {
        FrozenEncoder {
            cfg: self.cfg.clone(),
            input: self.input.frozen(),
            blocks: self.blocks.iter().map(|b| b.frozen(self.cfg.rope_base)).collect(),
            ln_f: self.ln_f.clone(),
        }
    }
}

impl Params for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
    }
}

/// Per-stream encoder state: one bounded cache per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub caches: Vec<LayerKVCache>,
    pub chunks_seen: usize,
}

impl EncoderState {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let cap = cfg.window_chunks * cfg.chunk_frames;
        Self { caches: (0..cfg.n_layers).map(|_| LayerKVCache::new(cfg.d_model, cap)).collect(), chunks_seen: 0 }
    }

    /// Retained cache entries summed over layers.
    pub fn retained_entries(&self) -> usize {
        self.caches.iter().map(LayerKVCache::len).sum()
    }
}

/// Inference weights of an [`Encoder`].
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    pub cfg: EncoderConfig,
    input: FrozenLinear,
    blocks: Vec<FrozenBlock>,
    ln_f: LayerNormP,
}

impl FrozenEncoder {
    /// Encodes exactly one chunk, attending to the cached window.
    pub fn encode_chunk(&self, state: &mut EncoderState, frames: &Tensor) -> Result<Tensor> {
        let cf = self.cfg.chunk_frames;
        if frames.rows() != cf || frames.cols() != self.cfg.d_in {
            return shape_err(format!(
                "chunk must be {cf}x{}, got {}x{}",
                self.cfg.d_in,
                frames.rows(),
                frames.cols()
            ));
        }
        let spec = self.cfg.mask_spec();
        let pos0 = state.chunks_seen * cf;
        let d = self.cfg.d_model;
        let mut x = self.input.apply(&frames.data);
        for (block, cache) in self.blocks.iter().zip(state.caches.iter_mut()) {
            let (q, k, v) = block.qkv(&x);
            let [q, k, v] = [q, k, v].map(|data| Tensor::new(vec![cf, d], data).expect("block width"));
            let attn = incremental_attend(cache, pos0, &q, &k, &v, &spec, &block.rope)?;
            x = block.finish(&x, &attn.data);
        }
        state.chunks_seen += 1;
        Tensor::new(vec![cf, d], self.ln_f.apply(&x))
    }
}

/// Total temporal downsampling of the adapter.
pub const ADAPTER_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub d_model: usize,
    pub d_llm: usize,
}

impl AdapterConfig {
    pub const KERNEL: usize = 2;
    pub const STRIDE: usize = 2;
    pub const STAGES: usize = 2;

    pub fn downsampling(&self) -> usize {
        Self::STRIDE.pow(Self::STAGES as u32)
    }
}

/// Two kernel-2/stride-2 convolutions (GELU after each) and a projection.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    pub conv1: Tensor,
    pub bias1: Tensor,
    pub conv2: Tensor,
    pub bias2: Tensor,
    pub proj: Linear,
}

impl Adapter {
    pub fn new<R: Rng>(cfg: AdapterConfig, rng: &mut R) -> Result<Self> {
        if cfg.d_model == 0 || cfg.d_llm == 0 {
            return Err(Error::Config("adapter dims must be positive".into()));
        }
        let d = cfg.d_model;
        let std = 1.0 / ((AdapterConfig::KERNEL * d) as f64).sqrt();
        Ok(Self {
            conv1: Tensor::randn(&[AdapterConfig::KERNEL, d, d], std, rng),
            bias1: Tensor::zeros(&[d]),
            conv2: Tensor::randn(&[AdapterConfig::KERNEL, d, d], std, rng),
            bias2: Tensor::zeros(&[d]),
            proj: Linear::new(d, cfg.d_llm, rng),
            cfg,
        })
    }

    pub fn forward(&self, ctx: &mut TapeCtx, features: Var) -> Result<Var> {
        let t = ctx.tape.shape(features)[0];
        if !t.is_multiple_of(ADAPTER_FACTOR) {
            return shape_err(format!("adapter input length {t} is not divisible by {ADAPTER_FACTOR}"));
        }
        let mut x = features;
        for (k, b) in [(&self.conv1, &self.bias1), (&self.conv2, &self.bias2)] {
            let (kv, bv) = (ctx.bind(k), ctx.bind(b));
            let y = ctx.tape.conv1d(x, kv, AdapterConfig::STRIDE)?;
            let y = ctx.tape.add_row(y, bv)?;
            x = ctx.tape.gelu(y);
        }
        self.proj.forward(ctx, x)
    }

    /// `T×d_model` features to `(T/4)×d_llm` embeddings.
    pub fn adapt(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.cfg.d_model {
            return shape_err("adapter input width");
        }
        let mut ctx = TapeCtx::new();
        let x = ctx.tape.input(vec![features.rows(), features.cols()], features.data.clone())?;
        let y = self.forward(&mut ctx, x)?;
        Ok(ctx.tape.value(y))
    }
}

impl Params for Adapter {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "conv1"), &self.conv1);
        f(&join(prefix, "bias1"), &self.bias1);
        f(&join(prefix, "conv2"), &self.conv2);
        f(&join(prefix, "bias2"), &self.bias2);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "conv1"), &mut self.conv1);
        f(&join(prefix, "bias1"), &mut self.bias1);
        f(&join(prefix, "conv2"), &mut self.conv2);
        f(&join(prefix, "bias2"), &mut self.bias2);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}
