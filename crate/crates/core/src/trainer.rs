//! Supervised training on robust segments.
//!
//! Stage 0 warms up the decoder on text alone: speech slots are filled with
//! the decoder embedding of the source word heard in each slot. It stands in
//! for a pretrained language model. Stage 1 trains the encoder and adapter
//! through the frozen decoder. Stage 2 trains low-rank adapters on the
//! decoder's linear maps with everything else frozen.

use crate::decoder::{TokenId, Vocab};
use crate::error::{contract_err, Error, Result};
use crate::model::SpeechTranslator;
use crate::nn::{Linear, LoraAdapter, Params, TapeCtx};
use crate::tensor::{Tensor, Var};
use crate::trajectory::{merge_chunks, AlignedUtterance, RobustSegment};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0, dropout: 0.1 }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} must be in [0, 1)", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("LoRA alpha must be finite".into()));
        }
        Ok(())
    }
}

/// Adds a low-rank adapter to `l`: `A` Gaussian, `B` zero, scale
/// `alpha / rank`.
pub fn lora_wrap<R: Rng>(l: &mut Linear, cfg: &LoraConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let (d_in, d_out) = (l.d_in(), l.d_out());
    if cfg.rank > d_in.min(d_out) {
        return Err(Error::Config(format!("LoRA rank {} exceeds min({d_out}, {d_in})", cfg.rank)));
    }
    if l.lora.is_some() {
        return contract_err("linear map already carries an adapter");
    }
    l.lora = Some(LoraAdapter {
        a: Tensor::randn(&[cfg.rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
        b: Tensor::zeros(&[d_out, cfg.rank]),
        scale: cfg.alpha / cfg.rank as f64,
        dropout: cfg.dropout,
    });
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Sequence positions per optimizer step (gradient accumulation).
    pub batch_token_budget: usize,
    /// Per-segment latency multipliers are drawn from `1..=max_multiplier`.
    pub max_multiplier: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_stage(1)
    }
}

impl TrainConfig {
    pub fn for_stage(stage: u8) -> Self {
        Self {
            stage,
            max_lr: match stage {
                0 => 1e-3,
                1 => 2e-4,
                _ => 1e-4,
            },
            warmup_steps: 50,
            epochs: 1,
            batch_token_budget: 4096,
            max_multiplier: 12,
            seed: 0,
            max_grad_norm: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage > 2 {
            return Err(Error::Config(format!("unknown stage {}", self.stage)));
        }
        if !(self.max_lr > 0.0) || self.epochs == 0 || self.batch_token_budget == 0 || self.max_multiplier == 0 {
            return Err(Error::Config("max_lr, epochs, batch_token_budget and max_multiplier must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `max_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return contract_err(format!("step {step} is past the end of training ({total_steps})"));
    }
    let w = cfg.warmup_steps.min(total_steps);
    if step < w {
        return Ok(cfg.max_lr * step as f64 / w as f64);
    }
    let span = total_steps - w;
    if span == 0 {
        return Ok(if step == total_steps && w == 0 { 0.0 } else { cfg.max_lr });
    }
    let progress = (step - w) as f64 / span as f64;
    Ok(0.5 * cfg.max_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqItem {
    Token(TokenId),
    /// Row of the segment's speech embeddings.
    Speech(usize),
}

/// Decoder input for one segment and the positions that are supervised.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSequence {
    pub items: Vec<SeqItem>,
    /// True on target tokens and on the read token closing each reply.
    pub loss_mask: Vec<bool>,
    pub multiplier: usize,
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&b| b).count()
    }

    /// Supervised token ids in order.
    pub fn supervised_tokens(&self) -> Vec<TokenId> {
        self.items
            .iter()
            .zip(&self.loss_mask)
            .filter_map(|(it, &m)| match (it, m) {
                (SeqItem::Token(t), true) => Some(*t),
                _ => None,
            })
            .collect()
    }
}

/// Instruction, then for every merged step a speech turn of
/// `m × per_chunk` embeddings followed by its target span and the read
/// token.
pub fn build_training_sequence(
    seg: &RobustSegment,
    m: usize,
    vocab: &Vocab,
    instruction: &[TokenId],
    per_chunk: usize,
) -> Result<TrainingSequence> {
    let traj = merge_chunks(&seg.trajectory, m)?;
    let sp = vocab.specials();
    let mut items: Vec<SeqItem> = instruction.iter().map(|&t| SeqItem::Token(t)).collect();
    let mut mask = vec![false; items.len()];
    for step in &traj.steps {
        items.push(SeqItem::Token(sp.speech_open));
        items.extend((step.first_chunk * per_chunk..step.end_chunk() * per_chunk).map(SeqItem::Speech));
        items.push(SeqItem::Token(sp.speech_close));
        mask.resize(items.len(), false);
        for w in &traj.tokens[step.start..step.end] {
            let id = vocab.id(w).ok_or_else(|| Error::Contract(format!("target token {w:?} is not in the vocabulary")))?;
            items.push(SeqItem::Token(id));
            mask.push(true);
        }
        items.push(SeqItem::Token(sp.read));
        mask.push(true);
    }
    Ok(TrainingSequence { items, loss_mask: mask, multiplier: m })
}

/// Stage-0 stand-in for speech: one token per embedding slot. A source
/// word fills the slot in which it ends; every other slot is `<sil>`.
pub fn pseudo_speech(
    seg: &RobustSegment,
    utterances: &BTreeMap<String, AlignedUtterance>,
    vocab: &Vocab,
    slot_ms: u64,
    slots: usize,
) -> Result<Vec<TokenId>> {
    let sil = vocab.specials().sil;
    let mut out = vec![sil; slots];
    for p in &seg.provenance {
        let u = utterances.get(&p.utterance_id).ok_or_else(|| Error::Contract(format!("unknown utterance {}", p.utterance_id)))?;
        for w in &u.source_words {
            let id = vocab.id(&w.text).ok_or_else(|| Error::Contract(format!("source word {:?} is not in the vocabulary", w.text)))?;
            let k = ((p.offset_ms + w.end_ms).saturating_sub(1) / slot_ms) as usize;
            if k < slots {
                out[k] = id;
            }
        }
    }
    Ok(out)
}

/// A training segment with its inputs.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub segment: RobustSegment,
    /// Feature frames for stages 1 and 2.
    pub frames: Option<Tensor>,
    /// Slot tokens for stage 0.
    pub pseudo: Option<Vec<TokenId>>,
}

/// Builds the loss of one sequence on `ctx`; returns the scalar and the
/// number of supervised positions.
pub fn sequence_loss(ctx: &mut TapeCtx, model: &SpeechTranslator, ex: &TrainExample, seq: &TrainingSequence, stage: u8) -> Result<Var> {
    let speech = if stage == 0 {
        let ids = ex.pseudo.as_ref().ok_or_else(|| Error::Contract("stage 0 needs pseudo-speech tokens".into()))?;
        model.decoder.embed_ids(ctx, ids)?
    } else {
        let f = ex.frames.as_ref().ok_or_else(|| Error::Contract("stages 1 and 2 need feature frames".into()))?;
        let x = ctx.tape.input(f.shape.clone(), f.data.clone())?;
        let h = model.encoder.forward(ctx, x)?;
        model.adapter.forward(ctx, h)?
    };
    let n_speech = ctx.tape.shape(speech)[0];
    let ids: Vec<TokenId> = seq
        .items
        .iter()
        .filter_map(|it| match it {
            SeqItem::Token(t) => Some(*t),
            SeqItem::Speech(_) => None,
        })
        .collect();
    let tok = model.decoder.embed_ids(ctx, &ids)?;
    let mut k = 0;
    let mut picks = Vec::with_capacity(seq.len());
    for it in &seq.items {
        match *it {
            SeqItem::Token(_) => {
                picks.push((tok, k));
                k += 1;
            }
            SeqItem::Speech(r) => {
                if r >= n_speech {
                    return contract_err(format!("speech row {r} beyond {n_speech} embeddings"));
                }
                picks.push((speech, r));
            }
        }
    }
    let x = ctx.tape.stack_rows(&picks)?;
    let logits = model.decoder.forward(ctx, x)?;
    // Position p predicts item p + 1.
    let n = seq.len();
    let mut targets = vec![0usize; n];
    let mut mask = vec![false; n];
    for p in 0..n.saturating_sub(1) {
        if seq.loss_mask[p + 1] {
            if let SeqItem::Token(t) = seq.items[p + 1] {
                targets[p] = t as usize;
                mask[p] = true;
            }
        }
    }
    ctx.tape.cross_entropy(logits, &targets, &mask)
}

/// Marks exactly the parameters a stage may update as trainable.
pub fn set_trainable(model: &mut SpeechTranslator, stage: u8) -> Result<()> {
    if stage == 2 && model.cfg.lora.is_none() {
        return contract_err("stage 2 requires low-rank adapters");
    }
    model.visit_mut("", &mut |name, t| {
        t.requires_grad = match stage {
            0 => name.starts_with("decoder.") && !name.contains("lora_"),
            1 => name.starts_with("encoder.") || name.starts_with("adapter."),
            _ => name.contains(".lora_"),
        };
        t.grad = None;
    });
    Ok(())
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, t: 0, moments: BTreeMap::new() }
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm<P: Params + ?Sized>(model: &P) -> f64 {
        let mut s = 0.0;
        model.visit("", &mut |_, t| {
            if let Some(g) = &t.grad {
                s += g.iter().map(|v| v * v).sum::<f64>();
            }
        });
        s.sqrt()
    }

    /// Applies one update to every trainable tensor and clears gradients.
    pub fn step<P: Params + ?Sized>(&mut self, model: &mut P, lr: f64, grad_scale: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let moments = &mut self.moments;
        model.visit_mut("", &mut |name, t| {
            if !t.requires_grad {
                return;
            }
            let Some(g) = t.grad.take() else { return };
            let (m, v) = moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                let gi = g[i] * grad_scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                t.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        });
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Supervised positions in the step.
    pub tokens: usize,
    /// All sequence positions in the step.
    pub positions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub mean_loss: f64,
}

struct Planned {
    example: usize,
    seq: TrainingSequence,
}

/// Trains `model` in place for `cfg.stage`. For stage 2, `lora` attaches
/// adapters first unless the model already carries them.
pub fn train(
    model: &mut SpeechTranslator,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    lora: Option<&LoraConfig>,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return contract_err("training set is empty");
    }
    if cfg.stage == 2 && model.cfg.lora.is_none() {
        match lora {
            Some(l) => model.attach_lora(l, cfg.seed)?,
            None => return contract_err("stage 2 requires a LoRA config"),
        }
    }
    set_trainable(model, cfg.stage)?;

    let instruction = model.instruction_ids();
    let per_chunk = model.cfg.encoder.embeddings_per_chunk();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batches: Vec<Vec<Planned>> = Vec::new();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut cur: Vec<Planned> = Vec::new();
        let mut used = 0;
        for i in order {
            let m = rng.gen_range(1..=cfg.max_multiplier);
            let seq = build_training_sequence(&examples[i].segment, m, &model.vocab, &instruction, per_chunk)?;
            if !cur.is_empty() && used + seq.len() > cfg.batch_token_budget {
                batches.push(std::mem::take(&mut cur));
                used = 0;
            }
            used += seq.len();
            cur.push(Planned { example: i, seq });
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
    }

    let total = batches.len();
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut losses = Vec::with_capacity(total);
    for (step, batch) in batches.iter().enumerate() {
        let lr = lr_at(step + 1, total, cfg)?;
        let mut loss_sum = 0.0;
        let (mut tokens, mut positions) = (0, 0);
        for (j, p) in batch.iter().enumerate() {
            let drop_seed = cfg.seed ^ ((step as u64) << 20) ^ j as u64;
            let mut ctx = TapeCtx::training(ChaCha8Rng::seed_from_u64(drop_seed));
            let loss = sequence_loss(&mut ctx, model, &examples[p.example], &p.seq, cfg.stage)?;
            let value = ctx.tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            let grads = ctx.tape.backward(loss)?;
            ctx.accumulate(model, &grads);
            loss_sum += value;
            tokens += p.seq.supervised();
            positions += p.seq.len();
        }
        let inv = 1.0 / batch.len() as f64;
        let mut scale = inv;
        if let Some(clip) = cfg.max_grad_norm {
            let norm = Adam::grad_norm(model) * inv;
            if norm > clip {
                scale *= clip / norm;
            }
        }
        adam.step(model, lr, scale);
        let loss = loss_sum * inv;
        losses.push(loss);
        let rec = LogRecord { stage: cfg.stage, step, lr, loss, tokens, positions };
        serde_json::to_writer(&mut *log, &rec)?;
        log.write_all(b"\n")?;
    }
    model.visit_mut("", &mut |_, t| {
        t.requires_grad = false;
        t.grad = None;
    });
    Ok(TrainReport {
        steps: total,
        first_loss: losses[0],
        last_loss: *losses.last().expect("at least one step"),
        mean_loss: losses.iter().sum::<f64>() / total as f64,
    })
}

/// Mean loss over examples at a fixed multiplier, without updates.
pub fn evaluate_loss(model: &SpeechTranslator, examples: &[TrainExample], stage: u8, multiplier: usize) -> Result<f64> {
    let instruction = model.instruction_ids();
    let per_chunk = model.cfg.encoder.embeddings_per_chunk();
    let mut total = 0.0;
    for ex in examples {
        let seq = build_training_sequence(&ex.segment, multiplier, &model.vocab, &instruction, per_chunk)?;
        let mut ctx = TapeCtx::new();
        let loss = sequence_loss(&mut ctx, model, ex, &seq, stage)?;
        total += ctx.tape.scalar(loss);
    }
    Ok(total / examples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::trajectory::{FramePiece, Provenance, SourceWord, Trajectory};

    fn vocab() -> Vocab {
        Vocab::new(["go", "sa", "sb", "ta", "tb"]).unwrap()
    }

    fn tiny_model() -> SpeechTranslator {
        let cfg = ModelConfig {
            encoder: EncoderConfig { d_in: 2, d_model: 4, n_layers: 1, n_heads: 2, chunk_frames: 4, window_chunks: 2, ..Default::default() },
            decoder: DecoderConfig { d_llm: 4, n_layers: 1, n_heads: 2, recent_window: 64, turn_reserve: 8, ..Default::default() },
            instruction: "go".into(),
            lora: None,
        };
        SpeechTranslator::new(cfg, vocab(), 5).unwrap()
    }

    fn segment(n_chunks: usize) -> RobustSegment {
        // chunk 80 ms, four 20 ms frames per chunk
        let toks = vec!["ta".to_string(), "tb".to_string(), "ta".to_string()];
        let traj = Trajectory::from_boundaries(toks, vec![70, 90, 200], n_chunks, 80).unwrap();
        RobustSegment {
            id: "s".into(),
            n_chunks,
            pieces: vec![FramePiece { source: "u".into(), source_start_ms: 0, seg_start_ms: 0, duration_ms: 200 }],
            trajectory: traj,
            provenance: vec![Provenance { utterance_id: "u".into(), offset_ms: 0 }],
            flags: vec![],
        }
    }

    fn example(n_chunks: usize, seed: u64) -> TrainExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainExample { segment: segment(n_chunks), frames: Some(Tensor::randn(&[n_chunks * 4, 2], 1.0, &mut rng)), pseudo: Some(vec![6, 4, 7][..n_chunks.min(3)].iter().copied().chain(std::iter::repeat(4)).take(n_chunks).collect()) }
    }

    fn snapshot(m: &SpeechTranslator) -> BTreeMap<String, Vec<f64>> {
        let mut s = BTreeMap::new();
        m.visit("", &mut |n, t| {
            s.insert(n.to_string(), t.data.clone());
        });
        s
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig { warmup_steps: 10, max_lr: 2e-4, ..TrainConfig::for_stage(1) };
        assert_eq!(lr_at(0, 100, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(10, 100, &cfg).unwrap(), 2e-4);
        assert!(lr_at(100, 100, &cfg).unwrap().abs() < 1e-12);
        assert!(lr_at(5, 100, &cfg).unwrap() < lr_at(6, 100, &cfg).unwrap());
        assert!(lr_at(50, 100, &cfg).unwrap() > lr_at(60, 100, &cfg).unwrap());
        assert!(lr_at(101, 100, &cfg).is_err());
    }

    #[test]
    fn sequence_structure_and_mask() {
        let v = vocab();
        let seg = segment(3);
        let s1 = build_training_sequence(&seg, 1, &v, &[5], 1).unwrap();
        for (it, &m) in s1.items.iter().zip(&s1.loss_mask) {
            if let SeqItem::Speech(_) = it {
                assert!(!m);
            }
        }
        assert_eq!(s1.supervised(), seg.trajectory.tokens.len() + 3);
        let s3 = build_training_sequence(&seg, 3, &v, &[5], 1).unwrap();
        assert_eq!(s3.supervised(), seg.trajectory.tokens.len() + 1);
        let strip = |s: &TrainingSequence| {
            let mut t: Vec<_> = s.supervised_tokens().into_iter().filter(|&t| t != v.specials().read).collect();
            t.sort();
            t
        };
        assert_eq!(strip(&s1), strip(&s3));
        assert_ne!(s1.items.len(), s3.items.len());
        let speech: Vec<usize> = s3.items.iter().filter_map(|i| if let SeqItem::Speech(r) = i { Some(*r) } else { None }).collect();
        assert_eq!(speech, vec![0, 1, 2]);
    }

    #[test]
    fn lora_wrap_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Linear::new(4, 3, &mut rng);
        let before = l.frozen();
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        lora_wrap(&mut l, &LoraConfig { rank: 2, alpha: 4.0, dropout: 0.0 }, &mut rng).unwrap();
        assert_eq!(l.frozen().apply(&x.data), before.apply(&x.data));
        let mut ctx = TapeCtx::new();
        let xv = ctx.tape.input(x.shape.clone(), x.data.clone()).unwrap();
        let y = l.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.data(y), &before.apply(&x.data)[..]);
        assert!(lora_wrap(&mut Linear::new(2, 2, &mut rng), &LoraConfig { rank: 3, ..Default::default() }, &mut rng).is_err());
        assert!(lora_wrap(&mut l, &LoraConfig { rank: 1, ..Default::default() }, &mut rng).is_err());
    }

    #[test]
    fn merged_weight_matches_wrapped_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for alpha in [0.0, 3.0] {
            let mut l = Linear::new(5, 4, &mut rng);
            lora_wrap(&mut l, &LoraConfig { rank: 2, alpha, dropout: 0.0 }, &mut rng).unwrap();
            l.lora.as_mut().unwrap().b = Tensor::randn(&[4, 2], 1.0, &mut rng);
            let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
            let mut ctx = TapeCtx::new();
            let xv = ctx.tape.input(x.shape.clone(), x.data.clone()).unwrap();
            let y = l.forward(&mut ctx, xv).unwrap();
            let merged = l.frozen().apply(&x.data);
            for (a, b) in ctx.tape.data(y).iter().zip(&merged) {
                assert!((a - b).abs() < 1e-10);
            }
            if alpha == 0.0 {
                l.lora = None;
                assert_eq!(l.frozen().apply(&x.data), merged);
            }
        }
    }

    #[test]
    fn freeze_contracts_hold() {
        let exs: Vec<_> = (0..3).map(|s| example(3, s)).collect();
        let mut sink = Vec::new();
        let mut m = tiny_model();
        let before = snapshot(&m);
        let cfg = TrainConfig { warmup_steps: 1, batch_token_budget: 64, ..TrainConfig::for_stage(1) };
        train(&mut m, &exs, &cfg, None, &mut sink).unwrap();
        let after = snapshot(&m);
        for (k, v) in &before {
            if k.starts_with("decoder.") {
                assert_eq!(&after[k], v, "{k}");
            }
        }
        assert!(before.iter().any(|(k, v)| k.starts_with("encoder.") && &after[k] != v));

        let before = snapshot(&m);
        let cfg2 = TrainConfig { stage: 2, warmup_steps: 1, batch_token_budget: 64, max_lr: 1e-2, ..TrainConfig::for_stage(2) };
        assert!(train(&mut m.clone(), &exs, &cfg2, None, &mut sink).is_err());
        train(&mut m, &exs, &cfg2, Some(&LoraConfig { rank: 2, alpha: 4.0, dropout: 0.1 }), &mut sink).unwrap();
        let after = snapshot(&m);
        for (k, v) in &before {
            assert_eq!(&after[k], v, "{k}");
        }
        assert!(after.iter().any(|(k, v)| k.contains("lora_b") && v.iter().any(|x| *x != 0.0)));
        let lines = String::from_utf8(sink).unwrap();
        let rec: LogRecord = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(rec.stage, 1);
    }

    #[test]
    fn batches_respect_the_budget() {
        let exs: Vec<_> = (0..4).map(|s| example(3, s)).collect();
        let mut sink = Vec::new();
        let mut m = tiny_model();
        let cfg = TrainConfig { warmup_steps: 0, batch_token_budget: 20, ..TrainConfig::for_stage(0) };
        let rep = train(&mut m, &exs, &cfg, None, &mut sink).unwrap();
        let recs: Vec<LogRecord> = String::from_utf8(sink).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), rep.steps);
        for r in &recs {
            // a single sequence longer than the budget still forms a step
            assert!(r.positions <= 20 || r.tokens <= 7);
        }
        assert!(train(&mut m, &[], &cfg, None, &mut Vec::new()).is_err());
    }

    #[test]
    fn pseudo_speech_marks_words() {
        let v = vocab();
        let u = AlignedUtterance {
            id: "u".into(),
            source_words: vec![SourceWord { text: "sa".into(), start_ms: 0, end_ms: 70 }, SourceWord { text: "sb".into(), start_ms: 120, end_ms: 200 }],
            target_tokens: vec![],
            word_alignment: vec![],
            utterance_span: (0, 200),
        };
        let map = [("u".to_string(), u)].into_iter().collect();
        let ids = pseudo_speech(&segment(3), &map, &v, 80, 3).unwrap();
        assert_eq!(ids, vec![v.id("sa").unwrap(), v.specials().sil, v.id("sb").unwrap()]);
        // a word ending exactly on a slot boundary belongs to the earlier slot
        let ids = pseudo_speech(&segment(3), &map, &v, 100, 3).unwrap();
        assert_eq!(ids, vec![v.id("sa").unwrap(), v.id("sb").unwrap(), v.specials().sil]);
    }

    #[test]
    fn masked_loss_ignores_unsupervised_positions() {
        let m = tiny_model();
        let ex = example(3, 9);
        let seq = build_training_sequence(&ex.segment, 1, &m.vocab, &m.instruction_ids(), 1).unwrap();
        let mut ctx = TapeCtx::new();
        let l1 = sequence_loss(&mut ctx, &m, &ex, &seq, 1).unwrap();
        let a = ctx.tape.scalar(l1);
        // Changing a token that is only ever input (the instruction) at a
        // position whose prediction is unsupervised changes the context but
        // the cross-entropy itself only reads masked rows: perturbing the
        // logits of the first row must not matter.
        let logits_rows = seq.len();
        let targets: Vec<usize> = vec![0; logits_rows];
        let mut mask = vec![false; logits_rows];
        mask[logits_rows - 2] = true;
        let mut t = crate::tensor::Tape::new();
        let base = Tensor::zeros(&[logits_rows, m.vocab.len()]);
        let mut bumped = base.clone();
        bumped.data[0] = 50.0;
        let lv = t.constant(base);
        let bv = t.constant(bumped);
        let x = t.cross_entropy(lv, &targets, &mask).unwrap();
        let y = t.cross_entropy(bv, &targets, &mask).unwrap();
        assert_eq!(t.scalar(x), t.scalar(y));
        assert!(a.is_finite());
    }
}
