//! Chunk-level translation trajectories and robust training segments.
//!
//! Every target token gets a right boundary `m_i`: the end of the last
//! source word it is aligned to. After making the boundaries monotone, a
//! token becomes emittable after chunk `j = max(1, ceil(m_i / chunk_ms))`.
//! Training segments are 30-chunk windows over long recordings, or
//! concatenations of short utterances with silence in between.

use crate::error::{contract_err, Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceWord {
    pub text: String,
    /// Milliseconds from the start of the utterance.
    pub start_ms: u64,
    pub end_ms: u64,
}

/// A transcribed, translated and word-aligned utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedUtterance {
    pub id: String,
    pub source_words: Vec<SourceWord>,
    pub target_tokens: Vec<String>,
    /// `(source_index, target_index)` pairs.
    pub word_alignment: Vec<(usize, usize)>,
    /// Start and end within the recording, in milliseconds.
    pub utterance_span: (u64, u64),
}

impl AlignedUtterance {
    pub fn duration_ms(&self) -> u64 {
        self.utterance_span.1.saturating_sub(self.utterance_span.0)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, e) = self.utterance_span;
        if e < s {
            return contract_err(format!("utterance {}: span ends before it starts", self.id));
        }
        let mut prev_end = 0;
        for w in &self.source_words {
            if w.end_ms < w.start_ms || w.start_ms < prev_end {
                return contract_err(format!("utterance {}: word {:?} overlaps or is reversed", self.id, w.text));
            }
            if w.end_ms > e - s {
                return contract_err(format!("utterance {}: word {:?} ends after the utterance", self.id, w.text));
            }
            prev_end = w.end_ms;
        }
        for &(si, ti) in &self.word_alignment {
            if si >= self.source_words.len() || ti >= self.target_tokens.len() {
                return contract_err(format!("utterance {}: alignment pair ({si}, {ti}) out of range", self.id));
            }
        }
        Ok(())
    }
}

/// Reads one utterance per line, validating each.
pub fn read_alignments(path: &Path) -> Result<Vec<AlignedUtterance>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt = |reason: String| Error::Format { path: path.to_path_buf(), reason: format!("line {}: {reason}", n + 1) };
        let u: AlignedUtterance = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
        u.validate().map_err(|e| fmt(e.to_string()))?;
        out.push(u);
    }
    Ok(out)
}

/// Right boundary of every target token; unaligned tokens get 0.
pub fn word_boundaries(u: &AlignedUtterance) -> Vec<u64> {
    let mut m = vec![0; u.target_tokens.len()];
    for &(si, ti) in &u.word_alignment {
        if let (Some(w), Some(slot)) = (u.source_words.get(si), m.get_mut(ti)) {
            *slot = (*slot).max(w.end_ms);
        }
    }
    m
}

/// Running maximum.
pub fn enforce_monotonic(m: &[u64]) -> Vec<u64> {
    let mut acc = 0;
    m.iter()
        .map(|&x| {
            acc = acc.max(x);
            acc
        })
        .collect()
}

/// Duration of inserted silence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SilenceModel {
    /// Exponential with the given mean, redrawn above `max_ms`.
    Exponential { mean_ms: f64, max_ms: f64 },
    Fixed { ms: u64 },
}

impl Default for SilenceModel {
    fn default() -> Self {
        Self::Exponential { mean_ms: 1000.0, max_ms: 5000.0 }
    }
}

impl SilenceModel {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        match *self {
            Self::Fixed { ms } => ms,
            Self::Exponential { mean_ms, max_ms } => {
                if mean_ms <= 0.0 || max_ms <= 0.0 {
                    return 0;
                }
                let exp = Exp::new(1.0 / mean_ms).expect("positive rate");
                loop {
                    let x: f64 = exp.sample(rng);
                    if x <= max_ms {
                        return x.round() as u64;
                    }
                }
            }
        }
    }

    fn valid(&self) -> bool {
        match *self {
            Self::Fixed { .. } => true,
            Self::Exponential { mean_ms, max_ms } => mean_ms >= 0.0 && max_ms >= 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub chunk_ms: u64,
    pub seg_chunks: usize,
    pub max_multiplier: usize,
    pub silence: SilenceModel,
    /// Chance of silence before the first utterance of a simulated segment.
    pub leading_silence_prob: f64,
    pub context_sentences: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            chunk_ms: 960,
            seg_chunks: 30,
            max_multiplier: 12,
            silence: SilenceModel::default(),
            leading_silence_prob: 0.5,
            context_sentences: 3,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_ms == 0 || self.seg_chunks == 0 || self.max_multiplier == 0 || self.context_sentences == 0 {
            return Err(Error::Config("synthesis sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.leading_silence_prob) || !self.silence.valid() {
            return Err(Error::Config("invalid silence model".into()));
        }
        Ok(())
    }

    pub fn segment_ms(&self) -> u64 {
        self.chunk_ms * self.seg_chunks as u64
    }

    /// Uniform over `1..=max_multiplier`.
    pub fn sample_multiplier<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(1..=self.max_multiplier)
    }
}

/// Hours of audio in `count` segments.
pub fn segment_hours(count: usize, cfg: &SynthesisConfig) -> f64 {
    count as f64 * cfg.segment_ms() as f64 / 3_600_000.0
}

/// Tokens `start..end` become emittable after chunks
/// `first_chunk..first_chunk + n_chunks` (0-based) have been heard.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub first_chunk: usize,
    pub n_chunks: usize,
    pub start: usize,
    pub end: usize,
}

impl Step {
    pub fn end_chunk(&self) -> usize {
        self.first_chunk + self.n_chunks
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub chunk_ms: u64,
    pub tokens: Vec<String>,
    /// Monotone right boundaries, relative to the trajectory start.
    pub boundaries: Vec<u64>,
    pub steps: Vec<Step>,
    /// Some boundary lay past the last chunk and was clamped into it.
    #[serde(default)]
    pub clamped: bool,
}

impl Trajectory {
    /// Assigns every token to the earliest chunk whose end covers its
    /// boundary, over `n_chunks` one-chunk steps.
    pub fn from_boundaries(tokens: Vec<String>, boundaries: Vec<u64>, n_chunks: usize, chunk_ms: u64) -> Result<Self> {
        if tokens.len() != boundaries.len() {
            return contract_err("one boundary per token required");
        }
        if boundaries.windows(2).any(|w| w[1] < w[0]) {
            return contract_err("boundaries must be nondecreasing");
        }
        if chunk_ms == 0 || n_chunks == 0 {
            return contract_err("a trajectory needs at least one chunk");
        }
        let mut clamped = false;
        let mut steps: Vec<Step> =
            (0..n_chunks).map(|c| Step { first_chunk: c, n_chunks: 1, start: 0, end: 0 }).collect();
        let mut idx = 0;
        for (c, step) in steps.iter_mut().enumerate() {
            step.start = idx;
            let last = c + 1 == n_chunks;
            while idx < boundaries.len() && (last || emit_chunk(boundaries[idx], chunk_ms) <= c + 1) {
                clamped |= emit_chunk(boundaries[idx], chunk_ms) > n_chunks;
                idx += 1;
            }
            step.end = idx;
        }
        Ok(Self { chunk_ms, tokens, boundaries, steps, clamped })
    }

    pub fn n_chunks(&self) -> usize {
        self.steps.last().map_or(0, Step::end_chunk)
    }

    pub fn span(&self, i: usize) -> &[String] {
        let s = &self.steps[i];
        &self.tokens[s.start..s.end]
    }

    /// Tokens in step order.
    pub fn flatten(&self) -> Vec<String> {
        self.steps.iter().flat_map(|s| self.tokens[s.start..s.end].iter().cloned()).collect()
    }

    /// Spans tile the tokens in order and every token's boundary falls
    /// inside its step (up to clamping).
    pub fn check(&self) -> Result<()> {
        let mut idx = 0;
        let mut chunk = 0;
        for s in &self.steps {
            if s.start != idx || s.end < s.start || s.first_chunk != chunk || s.n_chunks == 0 {
                return contract_err("steps do not tile the trajectory");
            }
            if !self.clamped && self.boundaries[s.start..s.end].iter().any(|&m| m > s.end_chunk() as u64 * self.chunk_ms) {
                return contract_err("token scheduled before its speech ends");
            }
            idx = s.end;
            chunk = s.end_chunk();
        }
        if idx != self.tokens.len() {
            return contract_err("steps do not cover all tokens");
        }
        Ok(())
    }
}

/// `max(1, ceil(m / chunk_ms))`.
pub fn emit_chunk(m: u64, chunk_ms: u64) -> usize {
    (m.div_ceil(chunk_ms)).max(1) as usize
}

/// Trajectory of a single utterance over the chunks covering its duration.
pub fn build_trajectory(u: &AlignedUtterance, m: &[u64], cfg: &SynthesisConfig) -> Result<Trajectory> {
    let n_chunks = (u.duration_ms().div_ceil(cfg.chunk_ms)).max(1) as usize;
    Trajectory::from_boundaries(u.target_tokens.clone(), m.to_vec(), n_chunks, cfg.chunk_ms)
}

/// Groups every `m` consecutive steps into one.
pub fn merge_chunks(t: &Trajectory, m: usize) -> Result<Trajectory> {
    if m < 1 {
        return contract_err("latency multiplier must be at least 1");
    }
    let steps = t
        .steps
        .chunks(m)
        .map(|g| Step {
            first_chunk: g[0].first_chunk,
            n_chunks: g.iter().map(|s| s.n_chunks).sum(),
            start: g[0].start,
            end: g[g.len() - 1].end,
        })
        .collect();
    Ok(Trajectory { steps, ..t.clone() })
}

/// Where a stretch of segment audio comes from. Anything not covered by a
/// piece is silence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePiece {
    /// Utterance or recording id.
    pub source: String,
    pub source_start_ms: u64,
    pub seg_start_ms: u64,
    pub duration_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub utterance_id: String,
    /// Utterance start relative to the segment start.
    pub offset_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustSegment {
    pub id: String,
    pub n_chunks: usize,
    pub pieces: Vec<FramePiece>,
    pub trajectory: Trajectory,
    pub provenance: Vec<Provenance>,
    /// `padded`, `truncated_tail`, `clamped`.
    #[serde(default)]
    pub flags: Vec<String>,
}

fn flag(flags: &mut Vec<String>, f: &str) {
    if !flags.iter().any(|x| x == f) {
        flags.push(f.to_string());
    }
}

/// Member utterance of a segment with its offset from the segment start.
fn assemble(
    id: String,
    members: &[(&AlignedUtterance, u64)],
    pieces: Vec<FramePiece>,
    cfg: &SynthesisConfig,
    mut flags: Vec<String>,
) -> Result<RobustSegment> {
    let seg_ms = cfg.segment_ms();
    let mut tokens = Vec::new();
    let mut bounds = Vec::new();
    let mut provenance = Vec::new();
    for &(u, off) in members {
        let m = enforce_monotonic(&word_boundaries(u));
        let mut kept = 0;
        for (tok, b) in u.target_tokens.iter().zip(&m) {
            if off + b > seg_ms {
                break;
            }
            tokens.push(tok.clone());
            bounds.push(off + b);
            kept += 1;
        }
        if kept < m.len() {
            flag(&mut flags, "truncated_tail");
        }
        provenance.push(Provenance { utterance_id: u.id.clone(), offset_ms: off });
    }
    // Utterances follow each other, so the running maximum only matters
    // for unaligned leading tokens of a later utterance.
    let bounds = enforce_monotonic(&bounds);
    let trajectory = Trajectory::from_boundaries(tokens, bounds, cfg.seg_chunks, cfg.chunk_ms)?;
    if trajectory.clamped {
        flag(&mut flags, "clamped");
    }
    Ok(RobustSegment { id, n_chunks: cfg.seg_chunks, pieces, trajectory, provenance, flags })
}

/// Cuts a long recording into 30-chunk windows. A window that would start
/// inside an utterance starts at that utterance instead.
pub fn slice_robust_segments(
    recording_id: &str,
    recording_ms: u64,
    utterances: &[AlignedUtterance],
    cfg: &SynthesisConfig,
) -> Result<Vec<RobustSegment>> {
    cfg.validate()?;
    if utterances.windows(2).any(|w| w[1].utterance_span.0 < w[0].utterance_span.1) {
        return contract_err("utterances must be ordered and non-overlapping");
    }
    for u in utterances {
        u.validate()?;
    }
    let seg_ms = cfg.segment_ms();
    let mut out = Vec::new();
    let mut start = 0u64;
    let mut prev: Option<u64> = None;
    while start < recording_ms || out.is_empty() {
        if let Some(u) = utterances.iter().find(|u| u.utterance_span.0 < start && start < u.utterance_span.1) {
            start = if prev.is_some_and(|p| u.utterance_span.0 <= p) { u.utterance_span.1 } else { u.utterance_span.0 };
            if start >= recording_ms && !out.is_empty() {
                break;
            }
        }
        let end = start + seg_ms;
        let members: Vec<(&AlignedUtterance, u64)> = utterances
            .iter()
            .filter(|u| u.utterance_span.0 >= start && u.utterance_span.0 < end)
            .map(|u| (u, u.utterance_span.0 - start))
            .collect();
        let mut flags = Vec::new();
        let avail = recording_ms.saturating_sub(start).min(seg_ms);
        if avail < seg_ms {
            flag(&mut flags, "padded");
        }
        let pieces = if avail > 0 {
            vec![FramePiece { source: recording_id.to_string(), source_start_ms: start, seg_start_ms: 0, duration_ms: avail }]
        } else {
            Vec::new()
        };
        out.push(assemble(format!("{recording_id}@{start}"), &members, pieces, cfg, flags)?);
        prev = Some(start);
        start = end;
    }
    Ok(out)
}

/// Concatenates randomly drawn utterances with silence in between until the
/// segment is full.
pub fn simulate_robust_segment<R: Rng>(
    id: &str,
    pool: &[AlignedUtterance],
    cfg: &SynthesisConfig,
    rng: &mut R,
) -> Result<RobustSegment> {
    cfg.validate()?;
    if pool.is_empty() {
        return contract_err("utterance pool is empty");
    }
    let seg_ms = cfg.segment_ms();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut cursor = if rng.gen::<f64>() < cfg.leading_silence_prob { cfg.silence.sample(rng) } else { 0 };
    let mut members = Vec::new();
    let mut pieces = Vec::new();
    for &i in &order {
        let u = &pool[i];
        u.validate()?;
        let dur = u.duration_ms();
        let fits = cursor + dur <= seg_ms;
        if !fits && !members.is_empty() || cursor >= seg_ms {
            break;
        }
        members.push((u, cursor));
        pieces.push(FramePiece {
            source: u.id.clone(),
            source_start_ms: 0,
            seg_start_ms: cursor,
            duration_ms: dur.min(seg_ms - cursor),
        });
        cursor += dur + cfg.silence.sample(rng);
        if !fits {
            break;
        }
    }
    assemble(id.to_string(), &members, pieces, cfg, Vec::new())
}
