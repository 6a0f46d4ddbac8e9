//! Streaming inference over unbounded speech.
//!
//! Frames are pulled from a source, cut into chunks and encoded as they
//! complete. Every `k` chunks the adapter embeddings become one speech turn
//! and the decoder writes its reply. Each emitted token is logged with two
//! times: the source time of the speech it was conditioned on (ideal) and
//! that time plus the compute backlog (computation-aware).

use crate::decoder::DialogueState;
use crate::encoder::EncoderState;
use crate::error::{contract_err, Error, Result};
use crate::generation::GenConfig;
use crate::model::FrozenTranslator;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

/// One feature frame stamped with its source start time.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub time_ms: u64,
    pub values: Vec<f64>,
}

/// Pull-based frame source; `Ok(None)` marks the end of the stream.
pub trait StreamSource {
    fn frame_ms(&self) -> u64;
    fn pull(&mut self) -> Result<Option<Frame>>;
}

/// Frames of an in-memory matrix, the first starting at `start_ms`.
#[derive(Clone, Debug)]
pub struct TensorSource {
    frames: Tensor,
    frame_ms: u64,
    start_ms: u64,
    next: usize,
}

impl TensorSource {
    pub fn new(frames: Tensor, frame_ms: u64, start_ms: u64) -> Self {
        Self { frames, frame_ms, start_ms, next: 0 }
    }
}

impl StreamSource for TensorSource {
    fn frame_ms(&self) -> u64 {
        self.frame_ms
    }

    fn pull(&mut self) -> Result<Option<Frame>> {
        if self.next >= self.frames.rows() {
            return Ok(None);
        }
        let i = self.next;
        self.next += 1;
        Ok(Some(Frame { time_ms: self.start_ms + i as u64 * self.frame_ms, values: self.frames.row(i).to_vec() }))
    }
}

/// Simulated compute time per turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostModel {
    Zero,
    Linear { per_turn_ms: f64, per_embedding_ms: f64, per_token_ms: f64 },
    /// Real elapsed time. Machine dependent.
    Measured,
}

impl Default for CostModel {
    fn default() -> Self {
        Self::Linear { per_turn_ms: 40.0, per_embedding_ms: 2.0, per_token_ms: 25.0 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if let Self::Linear { per_turn_ms, per_embedding_ms, per_token_ms } = self {
            if [per_turn_ms, per_embedding_ms, per_token_ms].iter().any(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::Config("cost model coefficients must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    fn prefill(&self, n_embeddings: usize) -> f64 {
        match self {
            Self::Linear { per_turn_ms, per_embedding_ms, .. } => per_turn_ms + per_embedding_ms * n_embeddings as f64,
            _ => 0.0,
        }
    }

    fn token(&self) -> f64 {
        match self {
            Self::Linear { per_token_ms, .. } => *per_token_ms,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub token: String,
    pub ideal_ms: f64,
    pub ca_ms: f64,
    pub turn: usize,
    /// Set on tokens of a turn closed by the length limit.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub forced: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmissionLog {
    pub records: Vec<Emission>,
    /// Source time at the end of the stream.
    pub source_ms: f64,
    pub turns: usize,
    pub forced_turns: usize,
}

impl EmissionLog {
    pub fn tokens(&self) -> Vec<String> {
        self.records.iter().map(|r| r.token.clone()).collect()
    }

    /// One JSON object per emitted token.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut log = Self::default();
        for (n, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Emission = serde_json::from_str(&line)
                .map_err(|e| Error::Format { path: path.to_path_buf(), reason: format!("line {}: {e}", n + 1) })?;
            log.source_ms = log.source_ms.max(r.ideal_ms);
            log.turns = log.turns.max(r.turn + 1);
            log.records.push(r);
        }
        Ok(log)
    }
}

/// Consumer side of a stream: encoder, dialogue and clocks.
pub struct StreamEngine<'m> {
    model: &'m FrozenTranslator,
    gen: GenConfig,
    cost: CostModel,
    k: usize,
    pub encoder_state: EncoderState,
    pub dialogue: DialogueState,
    compute_clock: f64,
    log: EmissionLog,
}

impl<'m> StreamEngine<'m> {
    pub fn new(model: &'m FrozenTranslator, gen: GenConfig, k: usize, cost: CostModel) -> Result<Self> {
        if k == 0 {
            return contract_err("latency multiplier must be at least 1");
        }
        gen.validate()?;
        cost.validate()?;
        Ok(Self {
            encoder_state: EncoderState::new(&model.encoder.cfg),
            dialogue: model.decoder.init_dialogue(&model.instruction)?,
            model,
            gen,
            cost,
            k,
            compute_clock: 0.0,
            log: EmissionLog::default(),
        })
    }

    pub fn multiplier(&self) -> usize {
        self.k
    }

    /// One encoder, adapter and decoder cycle over a chunk group that ends
    /// at source time `end_ms`. Only the last group may be ragged; it is
    /// zero-padded to whole chunks.
    pub fn step(&mut self, group: &Tensor, end_ms: f64, last: bool) -> Result<Vec<Emission>> {
        let cf = self.model.encoder.cfg.chunk_frames;
        let d_in = self.model.encoder.cfg.d_in;
        if group.cols() != d_in {
            return Err(Error::Shape(format!("frames have {} features, expected {d_in}", group.cols())));
        }
        if group.rows() == 0 {
            return contract_err("chunk group is empty");
        }
        if !group.rows().is_multiple_of(cf) && !last {
            return contract_err(format!("{} frames is not a whole number of {cf}-frame chunks", group.rows()));
        }
        let started = Instant::now();
        let n_chunks = group.rows().div_ceil(cf);
        let mut emb = Vec::new();
        for c in 0..n_chunks {
            let mut chunk = Tensor::zeros(&[cf, d_in]);
            let lo = c * cf;
            let hi = (lo + cf).min(group.rows());
            chunk.data[..(hi - lo) * d_in].copy_from_slice(&group.data[lo * d_in..hi * d_in]);
            let h = self.model.encoder.encode_chunk(&mut self.encoder_state, &chunk)?;
            emb.extend(self.model.adapter.adapt(&h)?.data);
        }
        let d = self.model.decoder.cfg.d_llm;
        let n_emb = emb.len() / d;
        let turn = self.log.turns;
        self.model.decoder.append_speech_turn(&mut self.dialogue, &Tensor::new(vec![n_emb, d], emb)?)?;
        let out = self.model.decoder.generate_turn(&mut self.dialogue, &self.gen)?;
        self.model.decoder.evict_cache(&mut self.dialogue)?;

        let mut clock = self.compute_clock.max(end_ms);
        let measured = matches!(self.cost, CostModel::Measured);
        clock += if measured { started.elapsed().as_secs_f64() * 1e3 } else { self.cost.prefill(n_emb) };
        let per_token = if measured && !out.tokens.is_empty() {
            0.0
        } else {
            self.cost.token()
        };
        let mut emitted = Vec::with_capacity(out.tokens.len());
        for &t in &out.tokens {
            clock += per_token;
            emitted.push(Emission {
                token: self.model.vocab.symbol(t).unwrap_or("<unk>").to_string(),
                ideal_ms: end_ms,
                ca_ms: clock,
                turn,
                forced: out.forced,
            });
        }
        // the read token costs a decoding step as well
        clock += per_token;
        self.compute_clock = clock;
        self.log.turns += 1;
        self.log.forced_turns += out.forced as usize;
        self.log.source_ms = end_ms;
        self.log.records.extend(emitted.iter().cloned());
        Ok(emitted)
    }

    pub fn finish(self) -> EmissionLog {
        self.log
    }
}

/// Runs a whole stream with latency multiplier `k`.
pub fn run_stream(
    src: &mut dyn StreamSource,
    model: &FrozenTranslator,
    k: usize,
    gen: &GenConfig,
    cost: &CostModel,
) -> Result<EmissionLog> {
    let mut engine = StreamEngine::new(model, gen.clone(), k, cost.clone())?;
    let cf = model.encoder.cfg.chunk_frames;
    let d_in = model.encoder.cfg.d_in;
    let frame_ms = src.frame_ms();
    let group_frames = k * cf;
    let mut buf: Vec<f64> = Vec::with_capacity(group_frames * d_in);
    let mut first: Option<u64> = None;
    let mut expected: Option<u64> = None;
    let mut end_ms = 0.0;
    while let Some(f) = src.pull()? {
        if f.values.len() != d_in {
            return Err(Error::Stream(format!("frame at {} ms has {} features, expected {d_in}", f.time_ms, f.values.len())));
        }
        if let Some(e) = expected {
            if f.time_ms != e {
                return Err(Error::Stream(format!("discontinuity: expected a frame at {e} ms, got {} ms", f.time_ms)));
            }
        }
        let t0 = *first.get_or_insert(f.time_ms);
        expected = Some(f.time_ms + frame_ms);
        end_ms = (f.time_ms + frame_ms - t0) as f64;
        buf.extend_from_slice(&f.values);
        if buf.len() == group_frames * d_in {
            let group = Tensor::new(vec![group_frames, d_in], std::mem::take(&mut buf))?;
            engine.step(&group, end_ms, false)?;
        }
    }
    if !buf.is_empty() {
        let rows = buf.len() / d_in;
        engine.step(&Tensor::new(vec![rows, d_in], buf)?, end_ms, true)?;
    }
    let mut log = engine.finish();
    log.source_ms = end_ms;
    Ok(log)
}

/// Independent streams in parallel, one thread each, results in input order.
pub fn run_streams(
    sources: Vec<Box<dyn StreamSource + Send>>,
    model: &FrozenTranslator,
    k: usize,
    gen: &GenConfig,
    cost: &CostModel,
) -> Result<Vec<EmissionLog>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = sources
            .into_iter()
            .map(|mut src| s.spawn(move || run_stream(src.as_mut(), model, k, gen, cost)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Stream("stream worker panicked".into()))))
            .collect()
    })
}
