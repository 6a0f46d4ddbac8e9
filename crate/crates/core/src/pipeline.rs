//! End-to-end runs: data synthesis, staged training, streaming translation
//! and evaluation, all driven by a [`RunConfig`].
//!
//! Input directory layout:
//!
//! ```text
//! recordings.jsonl   {id, duration_ms, split, utterances}
//! alignments.jsonl   one aligned utterance per line
//! features/<id>.feat frames of each recording
//! ```
//!
//! Everything written goes under the configured work directory.

use crate::config::RunConfig;
use crate::data::{read_manifest, segment_frames, write_features, write_manifest, DirFeatureStore, FeatureStore, ManifestRecord, MemoryFeatureStore, MANIFEST_VERSION};
use crate::decoder::Vocab;
use crate::error::{contract_err, Error, Result};
use crate::metrics::{corpus_bleu, edit_distance, evaluate, read_refs, write_refs, LatencyReport, RefSegment};
use crate::model::{ModelConfig, SpeechTranslator};
use crate::prompt::{requests_for, translate_all, ChatClient};
use crate::streaming::{run_streams, EmissionLog, StreamSource, TensorSource};
use crate::toy::{generate, ToyConfig};
use crate::trainer::{pseudo_speech, train, TrainExample, TrainReport};
use crate::trajectory::{read_alignments, segment_hours, simulate_robust_segment, slice_robust_segments, AlignedUtterance, RobustSegment};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub id: String,
    pub duration_ms: u64,
    pub split: Split,
    /// Utterance ids in temporal order.
    pub utterances: Vec<String>,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Format { path: path.to_path_buf(), reason: format!("line {}: {e}", n + 1) })?);
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_recordings(path: &Path) -> Result<Vec<RecordingEntry>> {
    read_jsonl(path)
}

/// File locations derived from the configured directories.
#[derive(Clone, Debug)]
pub struct Layout {
    pub data: PathBuf,
    pub work: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { data: cfg.data.data_dir.clone(), work: cfg.data.work_dir.clone() }
    }
    pub fn recordings(&self) -> PathBuf {
        self.data.join("recordings.jsonl")
    }
    pub fn alignments(&self) -> PathBuf {
        self.data.join("alignments.jsonl")
    }
    pub fn features(&self) -> DirFeatureStore {
        DirFeatureStore { dir: self.data.join("features") }
    }
    pub fn mock_answers(&self) -> PathBuf {
        self.data.join("mock_answers.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.work.join("manifest.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.work.join("vocab.json")
    }
    pub fn refs(&self, recording: &str) -> PathBuf {
        self.work.join("refs").join(format!("{recording}.jsonl"))
    }
    pub fn checkpoint(&self, stage: u8) -> PathBuf {
        self.work.join(format!("stage{stage}.ckpt"))
    }
    pub fn train_log(&self, stage: u8) -> PathBuf {
        self.work.join(format!("train_stage{stage}.jsonl"))
    }
    pub fn emissions(&self, k: usize) -> PathBuf {
        self.work.join(format!("emissions_k{k}"))
    }
    pub fn report(&self, k: usize) -> PathBuf {
        self.work.join(format!("report_k{k}.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySummary {
    pub train_recordings: usize,
    pub heldout_recordings: usize,
    pub utterances: usize,
    pub hours: f64,
}

/// Writes the synthetic corpus, plus canned translations for a mock
/// endpoint, into `dir`.
pub fn write_toy_data(cfg: &ToyConfig, dir: &Path) -> Result<ToySummary> {
    let corpus = generate(cfg)?;
    std::fs::create_dir_all(dir.join("features"))?;
    let mut entries = Vec::new();
    let mut utts = Vec::new();
    let mut answers = BTreeMap::new();
    let mut ms = 0;
    for (split, recs) in [(Split::Train, &corpus.train), (Split::Heldout, &corpus.heldout)] {
        for r in recs {
            write_features(&dir.join("features").join(format!("{}.feat", r.id)), &r.frames)?;
            entries.push(RecordingEntry { id: r.id.clone(), duration_ms: r.duration_ms, split, utterances: r.utterances.iter().map(|u| u.id.clone()).collect() });
            for u in &r.utterances {
                let src: Vec<&str> = u.source_words.iter().map(|w| w.text.as_str()).collect();
                answers.insert(src.join(" "), u.target_tokens.join(" "));
            }
            utts.extend(r.utterances.iter().cloned());
            ms += r.duration_ms;
        }
    }
    write_jsonl(&dir.join("recordings.jsonl"), &entries)?;
    write_jsonl(&dir.join("alignments.jsonl"), &utts)?;
    write_json(&dir.join("mock_answers.json"), &answers)?;
    Ok(ToySummary {
        train_recordings: corpus.train.len(),
        heldout_recordings: corpus.heldout.len(),
        utterances: utts.len(),
        hours: ms as f64 / 3_600_000.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub utterance_id: String,
    pub sentence: String,
    pub translation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub segments: usize,
    pub sliced: usize,
    pub simulated: usize,
    pub hours: f64,
    pub target_tokens: usize,
    pub flags: BTreeMap<String, usize>,
    /// Utterances whose endpoint translation equals the aligned target.
    pub translations_matching: Option<usize>,
    pub vocab_size: usize,
}

fn sentence_of(u: &AlignedUtterance) -> String {
    u.source_words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ")
}

/// Builds the training manifest, vocabulary and held-out references.
/// With a client, every sentence is also translated; utterances that arrive
/// without target tokens take the translation with a diagonal alignment.
pub fn synthesize(cfg: &RunConfig, client: Option<&dyn ChatClient>) -> Result<SynthSummary> {
    let lay = Layout::new(cfg);
    RunConfig::require(&lay.recordings())?;
    RunConfig::require(&lay.alignments())?;
    let recordings = read_recordings(&lay.recordings())?;
    let mut utts: BTreeMap<String, AlignedUtterance> = read_alignments(&lay.alignments())?.into_iter().map(|u| (u.id.clone(), u)).collect();
    std::fs::create_dir_all(&lay.work)?;

    let mut matching = None;
    if let Some(client) = client {
        let mut records = Vec::new();
        let mut same = 0;
        for r in &recordings {
            let members: Vec<&AlignedUtterance> = r.utterances.iter().map(|id| utts.get(id).ok_or_else(|| Error::Contract(format!("unknown utterance {id}")))).collect::<Result<_>>()?;
            let sentences: Vec<String> = members.iter().map(|u| sentence_of(u)).collect();
            let reqs = requests_for(&sentences, cfg.synthesis.context_sentences);
            let out = translate_all(client, &reqs, &cfg.data.target_language, cfg.data.translation_concurrency)?;
            for ((id, s), t) in r.utterances.iter().zip(sentences).zip(out) {
                records.push(TranslationRecord { utterance_id: id.clone(), sentence: s, translation: t });
            }
        }
        for rec in &records {
            let u = utts.get_mut(&rec.utterance_id).expect("checked above");
            let toks: Vec<String> = rec.translation.split_whitespace().map(String::from).collect();
            if u.target_tokens.is_empty() {
                let n = toks.len().min(u.source_words.len());
                u.word_alignment = (0..n).map(|i| (i, i)).collect();
                u.target_tokens = toks;
            } else if u.target_tokens == toks {
                same += 1;
            }
        }
        write_jsonl(&lay.work.join("translations.jsonl"), &records)?;
        matching = Some(same);
    }

    let mut segments: Vec<RobustSegment> = Vec::new();
    let mut pool = Vec::new();
    let mut where_is: BTreeMap<String, (String, u64)> = BTreeMap::new();
    for r in recordings.iter().filter(|r| r.split == Split::Train) {
        let members: Vec<AlignedUtterance> = r.utterances.iter().map(|id| utts[id].clone()).collect();
        for u in &members {
            where_is.insert(u.id.clone(), (r.id.clone(), u.utterance_span.0));
        }
        segments.extend(slice_robust_segments(&r.id, r.duration_ms, &members, &cfg.synthesis)?);
        pool.extend(members);
    }
    let sliced = segments.len();
    if sliced == 0 {
        return contract_err("no training recordings");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    for i in 0..cfg.data.simulated_segments {
        let mut seg = simulate_robust_segment(&format!("sim{i:05}"), &pool, &cfg.synthesis, &mut rng)?;
        for p in &mut seg.pieces {
            let (rec, start) = where_is[&p.source].clone();
            p.source = rec;
            p.source_start_ms += start;
        }
        segments.push(seg);
    }

    let mut words: BTreeSet<String> = BTreeSet::new();
    for u in utts.values() {
        words.extend(u.source_words.iter().map(|w| w.text.clone()));
        words.extend(u.target_tokens.iter().cloned());
    }
    let instr: Vec<String> = cfg.model.instruction.split_whitespace().map(String::from).collect();
    let mut ordered: Vec<String> = Vec::new();
    for w in instr.iter().chain(words.iter()) {
        if !ordered.contains(w) {
            ordered.push(w.clone());
        }
    }
    let vocab = Vocab::new(ordered)?;
    write_json(&lay.vocab(), &vocab)?;

    let records: Vec<ManifestRecord> = segments.iter().map(|s| ManifestRecord { version: MANIFEST_VERSION, segment: s.clone() }).collect();
    write_manifest(&lay.manifest(), &records)?;
    for r in recordings.iter().filter(|r| r.split == Split::Heldout) {
        let refs: Vec<RefSegment> = r
            .utterances
            .iter()
            .map(|id| {
                let u = &utts[id];
                RefSegment { tokens: u.target_tokens.clone(), t0_ms: u.utterance_span.0 as f64, t1_ms: u.utterance_span.1 as f64 }
            })
            .collect();
        std::fs::create_dir_all(lay.work.join("refs"))?;
        write_refs(&lay.refs(&r.id), &refs)?;
    }
    write_jsonl(&lay.work.join("utterances.jsonl"), &pool)?;

    let mut flags = BTreeMap::new();
    for s in &segments {
        for f in &s.flags {
            *flags.entry(f.clone()).or_insert(0) += 1;
        }
    }
    let summary = SynthSummary {
        segments: segments.len(),
        sliced,
        simulated: segments.len() - sliced,
        hours: segment_hours(segments.len(), &cfg.synthesis),
        target_tokens: segments.iter().map(|s| s.trajectory.tokens.len()).sum(),
        flags,
        translations_matching: matching,
        vocab_size: vocab.len(),
    };
    write_json(&lay.work.join("synth_summary.json"), &summary)?;
    Ok(summary)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

fn load_store(lay: &Layout, sources: &BTreeSet<String>) -> Result<MemoryFeatureStore> {
    let dir = lay.features();
    let mut store = MemoryFeatureStore::default();
    for s in sources {
        store.frames.insert(s.clone(), dir.frames(s)?);
    }
    Ok(store)
}

/// Inputs of every manifest segment for `stage`.
pub fn training_examples(cfg: &RunConfig, vocab: &Vocab, stage: u8) -> Result<Vec<TrainExample>> {
    let lay = Layout::new(cfg);
    let segs: Vec<RobustSegment> = read_manifest(&lay.manifest())?.into_iter().map(|r| r.segment).collect();
    let enc = &cfg.model.encoder;
    let per_chunk = enc.embeddings_per_chunk();
    if stage == 0 {
        let utts: BTreeMap<String, AlignedUtterance> =
            read_jsonl::<AlignedUtterance>(&lay.work.join("utterances.jsonl"))?.into_iter().map(|u| (u.id.clone(), u)).collect();
        let slot_ms = enc.chunk_ms() / per_chunk as u64;
        segs.into_iter()
            .map(|s| {
                let pseudo = pseudo_speech(&s, &utts, vocab, slot_ms, s.n_chunks * per_chunk)?;
                Ok(TrainExample { segment: s, frames: None, pseudo: Some(pseudo) })
            })
            .collect()
    } else {
        let sources: BTreeSet<String> = segs.iter().flat_map(|s| s.pieces.iter().map(|p| p.source.clone())).collect();
        let store = load_store(&lay, &sources)?;
        segs.into_iter()
            .map(|s| {
                let f = segment_frames(&s, &store, enc.d_in, enc.frame_ms, enc.chunk_frames)?;
                Ok(TrainExample { segment: s, frames: Some(f), pseudo: None })
            })
            .collect()
    }
}

/// Runs one training stage. Stage 0 starts from fresh weights; later
/// stages continue from `init`, by default the previous stage's checkpoint.
pub fn train_stage(cfg: &RunConfig, stage: u8, init: Option<&Path>, out: Option<&Path>) -> Result<TrainReport> {
    let lay = Layout::new(cfg);
    let vocab = read_vocab(&lay.vocab())?;
    let mut model = if stage == 0 {
        let mc = ModelConfig { encoder: cfg.model.encoder.clone(), decoder: cfg.model.decoder.clone(), instruction: cfg.model.instruction.clone(), lora: None };
        SpeechTranslator::new(mc, vocab.clone(), cfg.model.seed)?
    } else {
        let p = init.map(Path::to_path_buf).unwrap_or_else(|| lay.checkpoint(stage - 1));
        RunConfig::require(&p)?;
        SpeechTranslator::load(&p)?
    };
    let examples = training_examples(cfg, &model.vocab, stage)?;
    let tc = cfg.train.stage(stage)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(lay.train_log(stage))?);
    let report = train(&mut model, &examples, tc, Some(&cfg.train.lora), &mut log)?;
    log.flush()?;
    model.save(out.unwrap_or(&lay.checkpoint(stage)))?;
    Ok(report)
}

/// Streams every held-out recording through the model and writes one
/// emission log per recording.
pub fn translate(cfg: &RunConfig, checkpoint: &Path, k: usize) -> Result<Vec<(String, EmissionLog)>> {
    let lay = Layout::new(cfg);
    RunConfig::require(checkpoint)?;
    let model = SpeechTranslator::load(checkpoint)?.frozen();
    let recs: Vec<RecordingEntry> = read_recordings(&lay.recordings())?.into_iter().filter(|r| r.split == Split::Heldout).collect();
    let store = lay.features();
    let sources = recs
        .iter()
        .map(|r| Ok(Box::new(TensorSource::new(store.frames(&r.id)?, cfg.model.encoder.frame_ms, 0)) as Box<dyn StreamSource + Send>))
        .collect::<Result<Vec<_>>>()?;
    let logs = run_streams(sources, &model, k, &cfg.generation, &cfg.cost)?;
    let dir = lay.emissions(k);
    std::fs::create_dir_all(&dir)?;
    for (r, log) in recs.iter().zip(&logs) {
        log.write_jsonl(&dir.join(format!("{}.jsonl", r.id)))?;
    }
    Ok(recs.into_iter().map(|r| r.id).zip(logs).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub id: String,
    pub token_accuracy: f64,
    pub report: LatencyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub latency_multiplier: usize,
    pub bleu: f64,
    pub stream_laal_ms: f64,
    pub stream_laal_ca_ms: f64,
    /// `1 − Σ edit distance / Σ reference length` over whole streams.
    pub token_accuracy: f64,
    pub streams: Vec<StreamReport>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!("{:.2} / {:.0} / {:.0}", self.bleu, self.stream_laal_ms, self.stream_laal_ca_ms)
    }
}

/// Scores emission logs against references. Segment latencies are
/// averaged uniformly over all segments of all streams.
pub fn evaluate_logs(streams: &[(String, EmissionLog, Vec<RefSegment>)], k: usize) -> Result<EvalReport> {
    if streams.is_empty() {
        return contract_err("nothing to evaluate");
    }
    let mut out = Vec::new();
    let (mut hyps, mut refs) = (Vec::new(), Vec::new());
    let (mut laal, mut laal_ca, mut n) = (0.0, 0.0, 0usize);
    let (mut dist, mut ref_len) = (0usize, 0usize);
    for (id, log, rs) in streams {
        let rep = evaluate(log, rs)?;
        for (s, r) in rep.segments.iter().zip(rs) {
            hyps.push(s.hyp.clone());
            refs.push(r.tokens.clone());
            laal += s.laal_ms;
            laal_ca += s.laal_ca_ms;
            n += 1;
        }
        let all_ref: Vec<String> = rs.iter().flat_map(|r| r.tokens.iter().cloned()).collect();
        let d = edit_distance(&log.tokens(), &all_ref);
        dist += d;
        ref_len += all_ref.len();
        out.push(StreamReport { id: id.clone(), token_accuracy: 1.0 - d as f64 / all_ref.len().max(1) as f64, report: rep });
    }
    Ok(EvalReport {
        latency_multiplier: k,
        bleu: corpus_bleu(&hyps, &refs)?,
        stream_laal_ms: laal / n as f64,
        stream_laal_ca_ms: laal_ca / n as f64,
        token_accuracy: (1.0 - dist as f64 / ref_len.max(1) as f64).max(0.0),
        streams: out,
    })
}

/// Reads the logs written by [`translate`] and writes the report.
pub fn evaluate_run(cfg: &RunConfig, k: usize) -> Result<EvalReport> {
    let lay = Layout::new(cfg);
    let recs: Vec<RecordingEntry> = read_recordings(&lay.recordings())?.into_iter().filter(|r| r.split == Split::Heldout).collect();
    let mut streams = Vec::new();
    for r in &recs {
        let log = EmissionLog::read_jsonl(&lay.emissions(k).join(format!("{}.jsonl", r.id)))?;
        streams.push((r.id.clone(), log, read_refs(&lay.refs(&r.id))?));
    }
    let report = evaluate_logs(&streams, k)?;
    write_json(&lay.report(k), &report)?;
    Ok(report)
}

/// Per-record outcome of manifest validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordCheck {
    pub line: usize,
    pub ok: bool,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub kind: String,
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
    pub records: Vec<RecordCheck>,
}

/// Validates each line of a manifest or alignment file on its own. The
/// file kind is detected from the first record. An unknown manifest
/// version fails the whole file.
pub fn validate_file(path: &Path) -> Result<ValidationReport> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut kind = String::from("empty");
    for (n, line) in text.lines().enumerate() {
        let check = |ok: bool, reason: Option<String>| RecordCheck { line: n + 1, ok, reason };
        let v: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                records.push(check(false, Some(format!("not JSON: {e}"))));
                continue;
            }
        };
        let res = if v.get("segment").is_some() || v.get("version").is_some() {
            kind = "manifest".into();
            let version = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0);
            if version != MANIFEST_VERSION as u64 {
                return Err(Error::UnknownVersion(version as u32));
            }
            serde_json::from_value::<ManifestRecord>(v).map_err(|e| e.to_string()).and_then(|r| r.segment.trajectory.check().map_err(|e| e.to_string()))
        } else {
            kind = "alignments".into();
            serde_json::from_value::<AlignedUtterance>(v).map_err(|e| e.to_string()).and_then(|u| u.validate().map_err(|e| e.to_string()))
        };
        records.push(match res {
            Ok(()) => check(true, None),
            Err(e) => check(false, Some(e)),
        });
    }
    let passed = records.iter().filter(|r| r.ok).count();
    Ok(ValidationReport { kind, total: records.len(), passed, failed: records.len() - passed, records })
}
