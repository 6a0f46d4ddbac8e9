//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines are always printed; exits nonzero if any fails.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;
use streamst::decoder::{CachePolicy, Decoder, DecoderConfig, TokenId, Vocab};
use streamst::encoder::{Adapter, AdapterConfig, Encoder, EncoderConfig, EncoderState};
use streamst::generation::{beam_search, GenConfig};
use streamst::metrics::{corpus_bleu, edit_distance, evaluate, laal_segment, resegment, RefSegment};
use streamst::model::{ModelConfig, SpeechTranslator};
use streamst::nn::{Params, TapeCtx};
use streamst::pipeline::{self, Layout};
use streamst::streaming::{run_stream, CostModel, Emission, EmissionLog, TensorSource};
use streamst::tensor::Tensor;
use streamst::trainer::{build_training_sequence, sequence_loss, LoraConfig, TrainExample};
use streamst::trajectory::{
    build_trajectory, enforce_monotonic, merge_chunks, simulate_robust_segment, slice_robust_segments, word_boundaries,
    AlignedUtterance, FramePiece, Provenance, RobustSegment, SourceWord, SynthesisConfig, Trajectory,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn row_range(t: &Tensor, a: usize, b: usize) -> Tensor {
    let c = t.cols();
    Tensor::new(vec![b - a, c], t.data[a * c..b * c].to_vec()).unwrap()
}

// 1 -------------------------------------------------------------------------

fn incremental_encoder() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let streams = 120;
    for case in 0..streams {
        let n_heads = rng.gen_range(1..=4);
        let head_dim = 2 * rng.gen_range(1..=16 / n_heads);
        let cfg = EncoderConfig {
            d_in: rng.gen_range(1..=16),
            d_model: n_heads * head_dim,
            n_layers: rng.gen_range(1..=3),
            n_heads,
            chunk_frames: 4 * rng.gen_range(1..=3),
            frame_ms: 20,
            window_chunks: rng.gen_range(1..=12),
            ..Default::default()
        };
        let enc = Encoder::new(cfg.clone(), &mut rng).map_err(|e| e.to_string())?;
        let n_chunks = rng.gen_range(1..=20);
        let frames = Tensor::randn(&[n_chunks * cfg.chunk_frames, cfg.d_in], 1.0, &mut rng);
        let full = enc.encode_full(&frames).map_err(|e| e.to_string())?;
        let frozen = enc.frozen();
        let mut st = EncoderState::new(&cfg);
        for c in 0..n_chunks {
            let (a, b) = (c * cfg.chunk_frames, (c + 1) * cfg.chunk_frames);
            let out = frozen.encode_chunk(&mut st, &row_range(&frames, a, b)).map_err(|e| e.to_string())?;
            let d = max_diff(&out.data, &full.data[a * cfg.d_model..b * cfg.d_model]);
            worst = worst.max(d);
            ensure(d <= 1e-10, || format!("stream {case}, chunk {c}: max abs diff {d:e}"))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{streams} streams, max abs diff {worst:.1e}, {secs:.1} s"))
}

// 2 -------------------------------------------------------------------------

fn cache_policies() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (policy, layers) = if seed % 2 == 0 { (CachePolicy::ConcatKv, 1) } else { (CachePolicy::Recompute, rng.gen_range(1..=3)) };
        let n_heads = rng.gen_range(1..=2);
        let cfg = DecoderConfig {
            vocab_size: rng.gen_range(6..=12),
            d_llm: 4 * n_heads,
            n_layers: layers,
            n_heads,
            recent_window: rng.gen_range(20..=40),
            turn_reserve: 4,
            cache_policy: policy,
            ..Default::default()
        };
        let d = cfg.d_llm;
        let m = Decoder::new(cfg, &mut rng).map_err(|e| e.to_string())?;
        let dec = m.frozen();
        let gen = GenConfig { beam_size: rng.gen_range(1..=3), max_new_tokens: 3, ..Default::default() };
        let instruction: Vec<TokenId> = (0..rng.gen_range(1..=3)).map(|_| 5).collect();
        let mut st = dec.init_dialogue(&instruction).map_err(|e| e.to_string())?;
        let mut evicted = false;
        for _ in 0..10 {
            let n = rng.gen_range(1..=6);
            dec.append_speech_turn(&mut st, &Tensor::randn(&[n, d], 1.0, &mut rng)).map_err(|e| e.to_string())?;
            // explicit recomputation over instruction plus the retained window
            let full = m.full_logits(&st.context_rows()).map_err(|e| e.to_string())?;
            let last = &full.data[full.data.len() - full.cols()..];
            let diff = max_diff(&softmax(st.pending_logits()), &softmax(last)).max(max_diff(st.pending_logits(), last));
            worst = worst.max(diff);
            ensure(diff <= 1e-10, || format!("case {seed}: next-token distribution differs by {diff:e}"))?;
            dec.generate_turn(&mut st, &gen).map_err(|e| e.to_string())?;
            let before = st.total_appended() as usize;
            dec.evict_cache(&mut st).map_err(|e| e.to_string())?;
            evicted |= st.rolling_len() + st.instruction_len() < before;
        }
        ensure(evicted, || format!("case {seed} never evicted"))?;
        cases += 1;
    }
    Ok(format!("{cases} cases with eviction, max diff {worst:.1e}"))
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

// 3 -------------------------------------------------------------------------

fn tiny_segment(n_chunks: usize) -> RobustSegment {
    let toks = vec!["ta".to_string(), "tb".to_string(), "ta".to_string()];
    let trajectory = Trajectory::from_boundaries(toks, vec![70, 90, 200], n_chunks, 80).unwrap();
    RobustSegment {
        id: "g".into(),
        n_chunks,
        pieces: vec![FramePiece { source: "u".into(), source_start_ms: 0, seg_start_ms: 0, duration_ms: 200 }],
        trajectory,
        provenance: vec![Provenance { utterance_id: "u".into(), offset_ms: 0 }],
        flags: vec![],
    }
}

fn gradient_audit() -> Outcome {
    let cfg = ModelConfig {
        encoder: EncoderConfig { d_in: 3, d_model: 4, n_layers: 1, n_heads: 2, chunk_frames: 4, frame_ms: 20, window_chunks: 2, ..Default::default() },
        decoder: DecoderConfig { d_llm: 4, n_layers: 1, n_heads: 2, recent_window: 64, turn_reserve: 8, ..Default::default() },
        instruction: "go".into(),
        lora: Some(LoraConfig { rank: 2, alpha: 4.0, dropout: 0.0 }),
    };
    let vocab = Vocab::new(["go", "ta", "tb"]).unwrap();
    let mut model = SpeechTranslator::new(cfg, vocab, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    // move away from the zero-initialized LoRA factors and unit norms
    model.visit_mut("", &mut |_, t| {
        for v in t.data.iter_mut() {
            *v += 0.3 * (rng.gen::<f64>() - 0.5);
        }
        t.requires_grad = true;
        t.grad = None;
    });
    let n_chunks = 3;
    let ex = TrainExample { segment: tiny_segment(n_chunks), frames: Some(Tensor::randn(&[n_chunks * 4, 3], 1.0, &mut rng)), pseudo: None };
    let seq = build_training_sequence(&ex.segment, 2, &model.vocab, &model.instruction_ids(), 1).map_err(|e| e.to_string())?;
    let loss_of = |m: &SpeechTranslator| -> f64 {
        let mut ctx = TapeCtx::new();
        let l = sequence_loss(&mut ctx, m, &ex, &seq, 1).unwrap();
        ctx.tape.scalar(l)
    };
    let mut ctx = TapeCtx::new();
    let loss = sequence_loss(&mut ctx, &model, &ex, &seq, 1).map_err(|e| e.to_string())?;
    let grads = ctx.tape.backward(loss).map_err(|e| e.to_string())?;
    ctx.accumulate(&mut model, &grads);
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit("", &mut |n, t| analytic.push((n.to_string(), t.grad.clone().unwrap_or_else(|| vec![0.0; t.data.len()]))));

    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0);
    for (name, g) in &analytic {
        for (i, &a) in g.iter().enumerate() {
            let mut eval = |delta: f64| {
                model.visit_mut("", &mut |n, t| {
                    if n == name {
                        t.data[i] += delta;
                    }
                });
                let l = loss_of(&model);
                model.visit_mut("", &mut |n, t| {
                    if n == name {
                        t.data[i] -= delta;
                    }
                });
                l
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
            ensure(rel < 1e-4, || format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}"))?;
        }
    }
    Ok(format!("{checked} parameters across encoder, adapter, decoder and LoRA, max rel error {worst:.1e}"))
}

// 4 -------------------------------------------------------------------------

fn adapter_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ad = Adapter::new(AdapterConfig { d_model: 6, d_llm: 5 }, &mut rng).map_err(|e| e.to_string())?;
    let out = ad.adapt(&Tensor::randn(&[48, 6], 1.0, &mut rng)).map_err(|e| e.to_string())?;
    ensure(out.shape == vec![12, 5], || format!("48 frames gave shape {:?}", out.shape))?;
    ensure(EncoderConfig::default().embeddings_per_chunk() == 12, || "default chunk does not give 12 embeddings".into())?;
    for n in 1..=40 {
        let r = ad.adapt(&Tensor::zeros(&[4 * n, 6])).map_err(|e| e.to_string())?;
        ensure(r.shape == vec![n, 5], || format!("{} frames gave {:?}", 4 * n, r.shape))?;
        for off in 1..4 {
            ensure(ad.adapt(&Tensor::zeros(&[4 * n + off, 6])).is_err(), || format!("{} frames accepted", 4 * n + off))?;
        }
    }
    Ok("48 -> 12; 4n -> n for n <= 40; other lengths rejected".into())
}

// 5 -------------------------------------------------------------------------

fn random_utterance(rng: &mut ChaCha8Rng, id: String, start: u64) -> AlignedUtterance {
    let mut t = rng.gen_range(0..400);
    let words: Vec<SourceWord> = (0..rng.gen_range(0..8))
        .map(|i| {
            let s = t + rng.gen_range(0..300);
            let e = s + rng.gen_range(0..700);
            t = e;
            SourceWord { text: format!("w{i}"), start_ms: s, end_ms: e }
        })
        .collect();
    let n_tgt = rng.gen_range(0..10);
    let mut align = Vec::new();
    if !words.is_empty() {
        for ti in 0..n_tgt {
            for _ in 0..rng.gen_range(0..=2) {
                align.push((rng.gen_range(0..words.len()), ti));
            }
        }
    }
    let dur = t + rng.gen_range(0..1500);
    AlignedUtterance {
        id,
        source_words: words,
        target_tokens: (0..n_tgt).map(|i| format!("t{i}")).collect(),
        word_alignment: align,
        utterance_span: (start, start + dur),
    }
}

/// Token i goes to the smallest 1-based chunk j with m_i <= chunk_ms * j,
/// clamped into the last chunk.
fn brute_force_chunks(u: &AlignedUtterance, chunk_ms: u64) -> (Vec<u64>, Vec<usize>) {
    let mut m = vec![0u64; u.target_tokens.len()];
    for (ti, slot) in m.iter_mut().enumerate() {
        for &(si, tj) in &u.word_alignment {
            if tj == ti {
                *slot = (*slot).max(u.source_words[si].end_ms);
            }
        }
    }
    for i in 1..m.len() {
        m[i] = m[i].max(m[i - 1]);
    }
    let n_chunks = (u.duration_ms().div_ceil(chunk_ms)).max(1) as usize;
    let chunks = m
        .iter()
        .map(|&b| {
            let mut j = 1;
            while b > chunk_ms * j as u64 {
                j += 1;
            }
            j.min(n_chunks)
        })
        .collect();
    (m, chunks)
}

fn kept_tokens(u: &AlignedUtterance, off: u64, seg_ms: u64) -> Vec<String> {
    let (m, _) = brute_force_chunks(u, 1);
    u.target_tokens.iter().zip(m).take_while(|(_, b)| off + b <= seg_ms).map(|(t, _)| t.clone()).collect()
}

fn check_merges(t: &Trajectory) -> Result<(), String> {
    for k in 1..=13 {
        let mt = merge_chunks(t, k).map_err(|e| e.to_string())?;
        ensure(mt.flatten() == t.flatten(), || format!("merge by {k} changed the tokens"))?;
        ensure(mt.steps.len() == t.steps.len().div_ceil(k), || format!("merge by {k} gave {} steps", mt.steps.len()))?;
        ensure(mt.n_chunks() == t.n_chunks(), || format!("merge by {k} changed the chunk count"))?;
        mt.check().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn trajectory_oracle() -> Outcome {
    let cfg = SynthesisConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let n = 1200;
    for case in 0..n {
        let u = random_utterance(&mut rng, format!("u{case}"), 0);
        u.validate().map_err(|e| e.to_string())?;
        let (oracle_m, oracle_j) = brute_force_chunks(&u, cfg.chunk_ms);
        let m = enforce_monotonic(&word_boundaries(&u));
        ensure(m == oracle_m, || format!("case {case}: boundaries {m:?} vs {oracle_m:?}"))?;
        ensure(enforce_monotonic(&m) == m, || format!("case {case}: monotonic enforcement is not idempotent"))?;
        let raw = word_boundaries(&u);
        ensure(enforce_monotonic(&enforce_monotonic(&raw)) == enforce_monotonic(&raw), || format!("case {case}: not idempotent"))?;
        let t = build_trajectory(&u, &m, &cfg).map_err(|e| e.to_string())?;
        for (c, s) in t.steps.iter().enumerate() {
            for i in s.start..s.end {
                ensure(oracle_j[i] == c + 1, || format!("case {case}: token {i} in chunk {} not {}", c + 1, oracle_j[i]))?;
            }
        }
        ensure(t.flatten() == u.target_tokens, || format!("case {case}: tokens not conserved"))?;
        check_merges(&t)?;
    }

    let seg_ms = cfg.segment_ms();
    let mut sliced = 0;
    for rec in 0..60 {
        let mut utts = Vec::new();
        let mut t = rng.gen_range(0..2000);
        for i in 0..rng.gen_range(1..25) {
            let u = random_utterance(&mut rng, format!("r{rec}-{i}"), t);
            t = u.utterance_span.1 + rng.gen_range(0..3000);
            utts.push(u);
        }
        let segs = slice_robust_segments(&format!("r{rec}"), t, &utts, &cfg).map_err(|e| e.to_string())?;
        let by_id: BTreeMap<&str, &AlignedUtterance> = utts.iter().map(|u| (u.id.as_str(), u)).collect();
        // utterance id -> tokens kept by each segment it appears in
        let mut seen: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for s in &segs {
            let mut want = Vec::new();
            for p in &s.provenance {
                let kept = kept_tokens(by_id[p.utterance_id.as_str()], p.offset_ms, seg_ms);
                seen.entry(p.utterance_id.clone()).or_default().push(kept.len());
                want.extend(kept);
            }
            ensure(s.trajectory.flatten() == want, || format!("segment {}: tokens not conserved", s.id))?;
            check_merges(&s.trajectory)?;
            sliced += 1;
        }
        // An utterance crossing a window end is repeated whole in the next window.
        for u in &utts {
            let counts = seen.get(&u.id).cloned().unwrap_or_default();
            let full = u.target_tokens.len();
            ensure(counts.last() == Some(&full), || format!("recording {rec}: {} ends with {counts:?} of {full} tokens", u.id))?;
            ensure(counts.len() <= 2, || format!("recording {rec}: {} repeated {counts:?}", u.id))?;
        }
    }

    let pool: Vec<AlignedUtterance> = (0..40).map(|i| random_utterance(&mut rng, format!("p{i}"), 0)).collect();
    let by_id: BTreeMap<&str, &AlignedUtterance> = pool.iter().map(|u| (u.id.as_str(), u)).collect();
    for i in 0..200 {
        let s = simulate_robust_segment(&format!("sim{i}"), &pool, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let want: Vec<String> = s.provenance.iter().flat_map(|p| kept_tokens(by_id[p.utterance_id.as_str()], p.offset_ms, seg_ms)).collect();
        ensure(s.trajectory.flatten() == want, || format!("simulated segment {i}: tokens not conserved"))?;
        check_merges(&s.trajectory)?;
    }
    Ok(format!("{n} utterances match brute force; {sliced} sliced and 200 simulated segments conserve tokens under merging"))
}

// 6 -------------------------------------------------------------------------

/// Logits after a prefix, drawn from a seed per (case, prefix).
fn table_logits(case: u64, prefix: &[TokenId], v: usize) -> Vec<f64> {
    let mut seed = case.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &t in prefix {
        seed = seed.wrapping_mul(31).wrapping_add(t as u64 + 1);
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..v).map(|_| r.gen_range(-3.0..3.0)).collect()
}

/// Scores one step without the library's scoring helpers.
fn oracle_step(logits: &[f64], context: &[TokenId], read: TokenId, penalty: f64, ngram: usize) -> Vec<f64> {
    let seq: Vec<TokenId> = context.iter().copied().filter(|&t| t != read).collect();
    let mut l = logits.to_vec();
    for (t, x) in l.iter_mut().enumerate() {
        if seq.contains(&(t as TokenId)) {
            *x = if *x > 0.0 { *x / penalty } else { *x * penalty };
        }
    }
    let z = l.iter().map(|x| x.exp()).sum::<f64>().ln();
    let mut lp: Vec<f64> = l.iter().map(|x| x - z).collect();
    if ngram > 0 && seq.len() >= ngram {
        for (t, s) in lp.iter_mut().enumerate() {
            if t as TokenId == read {
                continue;
            }
            let mut ext = seq.clone();
            ext.push(t as TokenId);
            let tail = &ext[ext.len() - ngram..];
            if seq.windows(ngram).any(|w| w == tail) {
                *s = f64::NEG_INFINITY;
            }
        }
    }
    lp
}

fn exhaustive(case: u64, v: usize, read: TokenId, hist: &[TokenId], cfg: &GenConfig) -> (Vec<TokenId>, bool, f64) {
    // (rank, full sequence, tokens, completed, score)
    let mut best: Option<(f64, Vec<TokenId>, Vec<TokenId>, bool, f64)> = None;
    let mut consider = |rank: f64, full: Vec<TokenId>, toks: Vec<TokenId>, done: bool, score: f64| {
        let better = match &best {
            None => true,
            Some((r, f, ..)) => rank > *r + 1e-12 || ((rank - r).abs() <= 1e-12 && full < *f),
        };
        if better {
            best = Some((rank, full, toks, done, score));
        }
    };
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let ctx: Vec<TokenId> = hist.iter().chain(&prefix).copied().collect();
        let lp = oracle_step(&table_logits(case, &prefix, v), &ctx, read, cfg.repetition_penalty, cfg.no_repeat_ngram);
        for t in 0..v as TokenId {
            let s = score + lp[t as usize];
            if s == f64::NEG_INFINITY {
                continue;
            }
            let len = prefix.len() + 1;
            let rank = if cfg.length_normalize { s / len as f64 } else { s };
            let mut q = prefix.clone();
            if t == read {
                let mut full = q.clone();
                full.push(read);
                consider(rank, full, q, true, s);
            } else {
                q.push(t);
                if len == cfg.max_new_tokens {
                    consider(rank, q.clone(), q, false, s);
                } else {
                    stack.push((q, s));
                }
            }
        }
    }
    let (_, _, toks, done, score) = best.expect("some sequence");
    (toks, done, score)
}

fn beam_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let cases = 240;
    let mut penalized = 0;
    let mut blocked = 0;
    for case in 0..cases as u64 {
        let v = rng.gen_range(2..=4);
        let read = rng.gen_range(0..v) as TokenId;
        let cfg = GenConfig {
            beam_size: 400,
            repetition_penalty: [1.0, 1.3, 2.0][rng.gen_range(0..3)],
            no_repeat_ngram: rng.gen_range(0..=3),
            max_new_tokens: rng.gen_range(1..=4),
            length_normalize: rng.gen_bool(0.5),
            ..Default::default()
        };
        let hist: Vec<TokenId> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..v) as TokenId).collect();
        penalized += usize::from(cfg.repetition_penalty != 1.0 && !hist.is_empty());
        blocked += usize::from(cfg.no_repeat_ngram > 0 && hist.len() >= cfg.no_repeat_ngram);
        let got = beam_search(Vec::<TokenId>::new(), table_logits(case, &[], v), &hist, read, &cfg, |p: &Vec<TokenId>, t| {
            let mut q = p.clone();
            q.push(t);
            let l = table_logits(case, &q, v);
            Ok((q, l))
        })
        .map_err(|e| e.to_string())?;
        let (toks, done, score) = exhaustive(case, v, read, &hist, &cfg);
        ensure(got.tokens == toks && got.completed == done, || format!("case {case}: beam {:?}/{} vs exhaustive {toks:?}/{done}", got.tokens, got.completed))?;
        ensure((got.score - score).abs() < 1e-9, || format!("case {case}: score {} vs {score}", got.score))?;
    }
    Ok(format!("{cases} logit tables ({penalized} with penalty, {blocked} with n-gram blocking)"))
}

// 7 -------------------------------------------------------------------------

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn brute_force_cuts(h: &[String], r: &[Vec<String>]) -> Vec<usize> {
    let n = h.len();
    let cost = |b: &[usize]| -> usize { (0..r.len()).map(|s| edit_distance(&h[b[s]..b[s + 1]], &r[s])).sum() };
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut try_cuts = |cuts: Vec<usize>| {
        let mut b = vec![0];
        b.extend(&cuts);
        b.push(n);
        let c = cost(&b);
        if best.as_ref().is_none_or(|(x, _)| c < *x) {
            best = Some((c, cuts));
        }
    };
    match r.len() {
        1 => try_cuts(vec![]),
        2 => (0..=n).for_each(|a| try_cuts(vec![a])),
        _ => {
            for a in 0..=n {
                for b in a..=n {
                    try_cuts(vec![a, b]);
                }
            }
        }
    }
    best.unwrap().1
}

fn metric_oracles() -> Outcome {
    let b = corpus_bleu(&[words("a b c d")], &[words("a b c d e")]).map_err(|e| e.to_string())?;
    ensure((b - 77.88).abs() < 0.01, || format!("hand BLEU {b}"))?;

    let d: Vec<f64> = (0..4).map(|i| i as f64 * 250.0).collect();
    let zero = laal_segment(&d, 1000.0, 4).map_err(|e| e.to_string())?;
    ensure(zero == 0.0, || format!("ideal-pace LAAL {zero}"))?;
    let forced = laal_segment(&[1000.0; 3], 1000.0, 5).map_err(|e| e.to_string())?;
    ensure(forced == 1000.0, || format!("all-at-end LAAL {forced}"))?;
    let empty = laal_segment(&[], 700.0, 2).map_err(|e| e.to_string())?;
    ensure(empty == 700.0, || format!("empty LAAL {empty}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for case in 0..300 {
        let k = rng.gen_range(1..=3);
        let hyp: Vec<String> = (0..rng.gen_range(0..9)).map(|_| rng.gen_range(0..3).to_string()).collect();
        let refs: Vec<Vec<String>> = (0..k).map(|_| (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..3).to_string()).collect()).collect();
        let got: Vec<usize> = resegment(&hyp, &refs)[..k - 1].iter().map(|r| r.end).collect();
        let want = brute_force_cuts(&hyp, &refs);
        ensure(got == want, || format!("case {case}: cuts {got:?} vs {want:?}"))?;
    }

    // CA never earlier than ideal under nonnegative costs
    let vocab = Vocab::new(["go", "ta", "tb", "tc"]).unwrap();
    let mc = ModelConfig {
        encoder: EncoderConfig { d_in: 3, d_model: 8, n_layers: 1, n_heads: 2, chunk_frames: 8, frame_ms: 20, window_chunks: 4, ..Default::default() },
        decoder: DecoderConfig { d_llm: 8, n_layers: 1, n_heads: 2, recent_window: 200, turn_reserve: 5, ..Default::default() },
        instruction: "go".into(),
        lora: None,
    };
    let mut streams = 0;
    for seed in 0..12u64 {
        let model = SpeechTranslator::new(mc.clone(), vocab.clone(), seed).map_err(|e| e.to_string())?.frozen();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::randn(&[8 * 12, 3], 1.0, &mut r);
        let cost = CostModel::Linear { per_turn_ms: r.gen_range(0.0..100.0), per_embedding_ms: r.gen_range(0.0..5.0), per_token_ms: r.gen_range(0.0..50.0) };
        let gen = GenConfig { beam_size: 2, max_new_tokens: 4, repetition_penalty: 1.0, no_repeat_ngram: 0, ..Default::default() };
        let log = run_stream(&mut TensorSource::new(frames, 20, 0), &model, 1 + (seed as usize % 3), &gen, &cost).map_err(|e| e.to_string())?;
        let refs = vec![
            RefSegment { tokens: words("ta tb"), t0_ms: 0.0, t1_ms: 900.0 },
            RefSegment { tokens: words("tc ta tb"), t0_ms: 900.0, t1_ms: 1920.0 },
        ];
        let rep = evaluate(&log, &refs).map_err(|e| e.to_string())?;
        ensure(rep.stream_laal_ca_ms >= rep.stream_laal_ms, || format!("stream {seed}: CA {} < ideal {}", rep.stream_laal_ca_ms, rep.stream_laal_ms))?;
        streams += 1;
    }
    for case in 0..200 {
        let n = rng.gen_range(0..8);
        let mut ideal: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3000.0)).collect();
        ideal.sort_by(f64::total_cmp);
        let mut clock: f64 = 0.0;
        let records = ideal
            .iter()
            .map(|&i| {
                clock = clock.max(i) + rng.gen_range(0.0..200.0);
                Emission { token: "ta".into(), ideal_ms: i, ca_ms: clock, turn: 0, forced: false }
            })
            .collect();
        let log = EmissionLog { records, ..Default::default() };
        let refs = vec![RefSegment { tokens: words("ta ta ta"), t0_ms: 0.0, t1_ms: 3000.0 }];
        let rep = evaluate(&log, &refs).map_err(|e| e.to_string())?;
        ensure(rep.stream_laal_ca_ms >= rep.stream_laal_ms, || format!("log {case}: CA below ideal"))?;
    }
    Ok(format!("BLEU {b:.2}; LAAL 0 / 1000 / 700; 300 resegmentations; CA >= ideal on {streams} streams and 200 logs"))
}

// 8 -------------------------------------------------------------------------

fn toy_end_to_end(root: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = common::toy_config(root);
    common::prepare(&cfg).map_err(|e| e.to_string())?;
    let ckpt = Layout::new(&cfg).checkpoint(2);
    let mut lines = Vec::new();
    let mut laal = Vec::new();
    let mut acc = BTreeMap::new();
    for k in 1..=3 {
        pipeline::translate(&cfg, &ckpt, k).map_err(|e| e.to_string())?;
        let r = pipeline::evaluate_run(&cfg, k).map_err(|e| e.to_string())?;
        lines.push(format!("k={k}: acc {:.3}, {} ms", r.token_accuracy, r.summary()));
        laal.push(r.stream_laal_ms);
        acc.insert(k, r.token_accuracy);
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{}; {secs:.0} s", lines.join("; "));
    let k = cfg.latency_multiplier;
    ensure(acc[&k] >= 0.95, || format!("token accuracy {:.3} at k={k} ({detail})", acc[&k]))?;
    ensure(laal.windows(2).all(|w| w[0] <= w[1]), || format!("StreamLAAL not nondecreasing ({detail})"))?;
    ensure(secs < 900.0, || format!("over 15 minutes ({detail})"))?;
    Ok(detail)
}

// 9 -------------------------------------------------------------------------

fn collect_outputs(cfg: &streamst::config::RunConfig) -> BTreeMap<String, Vec<u8>> {
    let lay = Layout::new(cfg);
    let mut files = vec![lay.manifest(), lay.vocab(), lay.report(1), lay.checkpoint(2), lay.train_log(1)];
    for e in std::fs::read_dir(lay.emissions(1)).unwrap() {
        files.push(e.unwrap().path());
    }
    files.sort();
    files
        .into_iter()
        .map(|p| (p.strip_prefix(&cfg.data.work_dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism(root: &Path) -> Outcome {
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let cfg = common::mini_config(&root.join(run));
        common::prepare(&cfg).map_err(|e| e.to_string())?;
        pipeline::translate(&cfg, &Layout::new(&cfg).checkpoint(2), 1).map_err(|e| e.to_string())?;
        pipeline::evaluate_run(&cfg, 1).map_err(|e| e.to_string())?;
        outputs.push(collect_outputs(&cfg));
    }
    ensure(outputs[0].keys().eq(outputs[1].keys()), || "different output files".into())?;
    for (name, bytes) in &outputs[0] {
        ensure(*bytes == outputs[1][name], || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical across two runs", outputs[0].len()))
}

fn main() -> std::process::ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let toy_dir = tmp.path().join("toy");
    let det_dir = tmp.path().join("det");
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("incremental encoder equals full encoding", Box::new(incremental_encoder)),
        ("cache policies equal truncated recomputation", Box::new(cache_policies)),
        ("full-pipeline gradients equal finite differences", Box::new(gradient_audit)),
        ("adapter downsamples by four", Box::new(adapter_arithmetic)),
        ("trajectories equal the brute-force assignment", Box::new(trajectory_oracle)),
        ("beam search equals exhaustive search", Box::new(beam_oracle)),
        ("metric oracles", Box::new(metric_oracles)),
        ("toy end-to-end accuracy and latency", Box::new(move || toy_end_to_end(&toy_dir))),
        ("repeated runs are byte-identical", Box::new(move || determinism(&det_dir))),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        match check() {
            Ok(detail) => println!("criterion {n}: PASS  {name}: {detail}"),
            Err(why) => {
                println!("criterion {n}: FAIL  {name}: {why}");
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        println!("all {} criteria passed", checks.len());
        std::process::ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
