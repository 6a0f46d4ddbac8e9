//! Quality and latency metrics over token sequences.
//!
//! Latency is stream-level length-adaptive average lagging: the stream
//! hypothesis is split against the reference segments by minimum edit
//! distance, LAAL is computed per segment against that segment's source
//! start, and the segment values are averaged uniformly.

use crate::error::{contract_err, Error, Result};
use crate::streaming::EmissionLog;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for g in toks.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with one reference per hypothesis, n-grams up to 4, no
/// smoothing.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if hyps.is_empty() {
        return contract_err("BLEU needs at least one sentence pair");
    }
    if hyps.len() != refs.len() {
        return contract_err(format!("{} hypotheses against {} references", hyps.len(), refs.len()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            matched[n - 1] += hc.iter().map(|(g, k)| (*k).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if c == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * log_p.exp())
}

/// Token-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + (x != y) as usize).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − edit_distance / |ref|`, floored at zero.
pub fn token_accuracy(hyp: &[String], reference: &[String]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 1.0 } else { 0.0 };
    }
    (1.0 - edit_distance(hyp, reference) as f64 / reference.len() as f64).max(0.0)
}

/// Splits `hyp` into `refs.len()` contiguous blocks with minimum total edit
/// distance. Among optimal splits the lexicographically earliest wins.
pub fn resegment<T: AsRef<str>>(hyp: &[T], refs: &[Vec<String>]) -> Vec<Range<usize>> {
    let n = hyp.len();
    let s_count = refs.len();
    if s_count == 0 {
        return Vec::new();
    }
    // cost[s][i][j - i]: distance of hyp[i..j] to refs[s]
    let mut cost: Vec<Vec<Vec<usize>>> = Vec::with_capacity(s_count);
    for rf in refs {
        let mut per_start = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let mut prev: Vec<usize> = (0..=rf.len()).collect();
            let mut row = vec![prev[rf.len()]];
            for x in &hyp[i..] {
                let mut cur = vec![prev[0] + 1; rf.len() + 1];
                for (k, y) in rf.iter().enumerate() {
                    cur[k + 1] = (prev[k] + (x.as_ref() != y) as usize).min(prev[k + 1] + 1).min(cur[k] + 1);
                }
                row.push(cur[rf.len()]);
                prev = cur;
            }
            per_start.push(row);
        }
        cost.push(per_start);
    }
    // best[s][i]: cheapest split of hyp[i..] into refs[s..]
    let mut best = vec![vec![usize::MAX; n + 1]; s_count + 1];
    best[s_count][n] = 0;
    for s in (0..s_count).rev() {
        for i in 0..=n {
            let lo = if s + 1 == s_count { n } else { i };
            for j in lo..=n {
                if best[s + 1][j] != usize::MAX {
                    best[s][i] = best[s][i].min(cost[s][i][j - i] + best[s + 1][j]);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(s_count);
    let mut i = 0;
    for s in 0..s_count {
        let lo = if s + 1 == s_count { n } else { i };
        let j = (lo..=n)
            .find(|&j| best[s + 1][j] != usize::MAX && cost[s][i][j - i] + best[s + 1][j] == best[s][i])
            .expect("an optimal split exists");
        out.push(i..j);
        i = j;
    }
    out
}

/// Length-adaptive average lagging of one segment. `delays` are emission
/// times relative to the segment's source start.
pub fn laal_segment(delays: &[f64], t_ms: f64, ref_len: usize) -> Result<f64> {
    if !(t_ms > 0.0) {
        return contract_err(format!("segment duration must be positive, got {t_ms}"));
    }
    if delays.windows(2).any(|w| w[1] < w[0]) {
        return contract_err("emission delays must be nondecreasing");
    }
    if delays.is_empty() {
        return Ok(t_ms);
    }
    let rate = t_ms / ref_len.max(delays.len()) as f64;
    let tau = delays.iter().position(|&d| d >= t_ms).map_or(delays.len(), |i| i + 1);
    Ok(delays[..tau].iter().enumerate().map(|(i, d)| d - i as f64 * rate).sum::<f64>() / tau as f64)
}

/// A reference sentence and its span in the source stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefSegment {
    pub tokens: Vec<String>,
    pub t0_ms: f64,
    pub t1_ms: f64,
}

pub fn read_refs(path: &Path) -> Result<Vec<RefSegment>> {
    let mut out: Vec<RefSegment> = Vec::new();
    for (n, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason: format!("line {}: {reason}", n + 1) };
        let r: RefSegment = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if !(r.t1_ms > r.t0_ms) || out.last().is_some_and(|p| p.t1_ms > r.t0_ms) {
            return Err(bad("reference spans must be nonempty, ordered and disjoint".into()));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_refs(path: &Path, refs: &[RefSegment]) -> Result<()> {
    let mut s = String::new();
    for r in refs {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeChannel {
    Ideal,
    Ca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub hyp: Vec<String>,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub laal_ms: f64,
    pub laal_ca_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub bleu: f64,
    pub stream_laal_ms: f64,
    pub stream_laal_ca_ms: f64,
    pub segments: Vec<SegmentReport>,
}

impl LatencyReport {
    /// `BLEU / StreamLAAL / StreamLAAL_CA`.
    pub fn summary(&self) -> String {
        format!("{:.2} / {:.0} / {:.0}", self.bleu, self.stream_laal_ms, self.stream_laal_ca_ms)
    }
}

fn segment_laals(log: &EmissionLog, refs: &[RefSegment], split: &[Range<usize>], ch: TimeChannel) -> Result<Vec<f64>> {
    refs.iter()
        .zip(split)
        .map(|(r, span)| {
            let delays: Vec<f64> = log.records[span.clone()]
                .iter()
                .map(|e| match ch {
                    TimeChannel::Ideal => e.ideal_ms,
                    TimeChannel::Ca => e.ca_ms,
                } - r.t0_ms)
                .collect();
            laal_segment(&delays, r.t1_ms - r.t0_ms, r.tokens.len())
        })
        .collect()
}

fn split_log(log: &EmissionLog, refs: &[RefSegment]) -> Vec<Range<usize>> {
    let toks: Vec<&str> = log.records.iter().map(|r| r.token.as_str()).collect();
    let rt: Vec<Vec<String>> = refs.iter().map(|r| r.tokens.clone()).collect();
    resegment(&toks, &rt)
}

/// Uniform mean of per-segment LAAL on one time channel.
pub fn stream_laal(log: &EmissionLog, refs: &[RefSegment], channel: TimeChannel) -> Result<f64> {
    if refs.is_empty() {
        return contract_err("no reference segments");
    }
    let v = segment_laals(log, refs, &split_log(log, refs), channel)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// BLEU of the resegmented stream and both latency channels.
pub fn evaluate(log: &EmissionLog, refs: &[RefSegment]) -> Result<LatencyReport> {
    if refs.is_empty() {
        return contract_err("no reference segments");
    }
    let split = split_log(log, refs);
    let ideal = segment_laals(log, refs, &split, TimeChannel::Ideal)?;
    let ca = segment_laals(log, refs, &split, TimeChannel::Ca)?;
    let hyps: Vec<Vec<String>> = split.iter().map(|s| log.records[s.clone()].iter().map(|r| r.token.clone()).collect()).collect();
    let rts: Vec<Vec<String>> = refs.iter().map(|r| r.tokens.clone()).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(LatencyReport {
        bleu: corpus_bleu(&hyps, &rts)?,
        stream_laal_ms: mean(&ideal),
        stream_laal_ca_ms: mean(&ca),
        segments: (0..refs.len())
            .map(|i| SegmentReport { hyp: hyps[i].clone(), hyp_len: split[i].len(), ref_len: rts[i].len(), laal_ms: ideal[i], laal_ca_ms: ca[i] })
            .collect(),
    })
}
