//! Synthetic translation task for offline runs.
//!
//! Source words `s0..sN` map one-to-one onto target words by a fixed
//! permutation. A recording is a sequence of sentences separated by pauses.
//! Each frame inside a word is that word's prototype vector plus Gaussian
//! noise; a word's last frame also carries a shared end marker, so a causal
//! encoder can tell a finished word from one cut by a chunk boundary. Frames
//! between words are noise only.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trajectory::{AlignedUtterance, SourceWord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub n_symbols: usize,
    pub d_in: usize,
    pub frame_ms: u64,
    pub train_recordings: usize,
    pub heldout_recordings: usize,
    /// Sentences per recording.
    pub sentences: (usize, usize),
    pub sentence_words: (usize, usize),
    pub word_ms: (u64, u64),
    pub gap_ms: (u64, u64),
    pub pause_ms: (u64, u64),
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_symbols: 16,
            d_in: 8,
            frame_ms: 40,
            train_recordings: 60,
            heldout_recordings: 6,
            sentences: (6, 9),
            sentence_words: (3, 7),
            word_ms: (160, 400),
            gap_ms: (160, 320),
            pause_ms: (480, 1600),
            noise: 0.3,
            seed: 1,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.sentences, self.sentence_words];
        let ms = [self.word_ms, self.gap_ms, self.pause_ms];
        if self.n_symbols == 0 || self.d_in == 0 || self.frame_ms == 0 || self.train_recordings == 0 {
            return Err(Error::Config("toy sizes must be positive".into()));
        }
        if ranges.iter().any(|r| r.0 == 0 || r.0 > r.1) || ms.iter().any(|r| r.0 == 0 || r.0 > r.1) {
            return Err(Error::Config("toy ranges must be positive and ordered".into()));
        }
        if ms.iter().any(|r| r.0 % self.frame_ms != 0 || r.1 % self.frame_ms != 0) {
            return Err(Error::Config("toy durations must be whole frames".into()));
        }
        Ok(())
    }

    pub fn source_words(&self) -> Vec<String> {
        (0..self.n_symbols).map(|i| format!("s{i}")).collect()
    }

    pub fn target_words(&self) -> Vec<String> {
        (0..self.n_symbols).map(|i| format!("t{i}")).collect()
    }

    /// Target word of source symbol `i`.
    pub fn translate_symbol(&self, i: usize) -> String {
        let n = self.n_symbols;
        // any stride coprime with n is a permutation
        let stride = (2..n).rev().find(|s| gcd(*s, n) == 1 && *s != n - 1).unwrap_or(1);
        format!("t{}", (i * stride + 3) % n)
    }

    /// Word-by-word translation of a whitespace-separated sentence.
    pub fn translate(&self, sentence: &str) -> Result<String> {
        sentence
            .split_whitespace()
            .map(|w| {
                w.strip_prefix('s')
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|&i| i < self.n_symbols)
                    .map(|i| self.translate_symbol(i))
                    .ok_or_else(|| Error::Contract(format!("{w:?} is not a toy source word")))
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.join(" "))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug)]
pub struct ToyRecording {
    pub id: String,
    pub duration_ms: u64,
    pub frames: Tensor,
    pub utterances: Vec<AlignedUtterance>,
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub train: Vec<ToyRecording>,
    pub heldout: Vec<ToyRecording>,
}

fn draw<R: Rng>(rng: &mut R, r: (u64, u64), step: u64) -> u64 {
    r.0 + step * rng.gen_range(0..=(r.1 - r.0) / step)
}

fn recording<R: Rng>(cfg: &ToyConfig, id: String, protos: &[Vec<f64>], end_mark: &[f64], rng: &mut R) -> ToyRecording {
    let fm = cfg.frame_ms;
    let mut t = draw(rng, cfg.pause_ms, fm);
    let mut utterances = Vec::new();
    let mut spans: Vec<(u64, u64, usize)> = Vec::new();
    for s in 0..rng.gen_range(cfg.sentences.0..=cfg.sentences.1) {
        let start = t;
        let mut words = Vec::new();
        let mut targets = Vec::new();
        for k in 0..rng.gen_range(cfg.sentence_words.0..=cfg.sentence_words.1) {
            if k > 0 {
                t += draw(rng, cfg.gap_ms, fm);
            }
            let sym = rng.gen_range(0..cfg.n_symbols);
            let d = draw(rng, cfg.word_ms, fm);
            words.push(SourceWord { text: format!("s{sym}"), start_ms: t - start, end_ms: t + d - start });
            targets.push(cfg.translate_symbol(sym));
            spans.push((t, t + d, sym));
            t += d;
        }
        let n = words.len();
        utterances.push(AlignedUtterance {
            id: format!("{id}-u{s:02}"),
            source_words: words,
            target_tokens: targets,
            word_alignment: (0..n).map(|i| (i, i)).collect(),
            utterance_span: (start, t),
        });
        t += draw(rng, cfg.pause_ms, fm);
    }
    let n_frames = (t / fm) as usize;
    let noise = Normal::new(0.0, cfg.noise).expect("finite noise");
    let mut frames = Tensor::zeros(&[n_frames, cfg.d_in]);
    for (i, row) in frames.data.chunks_mut(cfg.d_in).enumerate() {
        for v in row.iter_mut() {
            *v = noise.sample(rng);
        }
        let time = i as u64 * fm;
        if let Some(&(_, b, sym)) = spans.iter().find(|(a, b, _)| *a <= time && time < *b) {
            for (v, p) in row.iter_mut().zip(&protos[sym]) {
                *v += p;
            }
            if time + fm >= b {
                for (v, e) in row.iter_mut().zip(end_mark) {
                    *v += e;
                }
            }
        }
    }
    ToyRecording { id, duration_ms: t, frames, utterances }
}

/// Generates the corpus deterministically from `cfg.seed`.
pub fn generate(cfg: &ToyConfig) -> Result<ToyCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let protos: Vec<Vec<f64>> = (0..cfg.n_symbols).map(|_| (0..cfg.d_in).map(|_| unit.sample(&mut rng)).collect()).collect();
    let end_mark: Vec<f64> = (0..cfg.d_in).map(|_| unit.sample(&mut rng)).collect();
    let train = (0..cfg.train_recordings).map(|i| recording(cfg, format!("rec{i:03}"), &protos, &end_mark, &mut rng)).collect();
    let heldout = (0..cfg.heldout_recordings).map(|i| recording(cfg, format!("test{i:02}"), &protos, &end_mark, &mut rng)).collect();
    Ok(ToyCorpus { train, heldout })
}
