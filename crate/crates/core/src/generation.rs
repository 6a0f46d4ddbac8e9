//! Decoding controls and beam search.

use crate::decoder::TokenId;
use crate::error::{Error, Result};
use crate::tensor::kernels;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub beam_size: usize,
    pub repetition_penalty: f64,
    pub no_repeat_ngram: usize,
    /// Upper bound on text tokens per turn; a turn that reaches it is
    /// force-closed.
    pub max_new_tokens: usize,
    /// Divide hypothesis scores by their token count when ranking.
    pub length_normalize: bool,
    /// Previous-turn tokens visible to the repetition controls.
    pub history_window: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            repetition_penalty: 1.2,
            no_repeat_ngram: 5,
            max_new_tokens: 64,
            length_normalize: true,
            history_window: 32,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.repetition_penalty > 0.0) || !self.repetition_penalty.is_finite() {
            return Err(Error::Config(format!("repetition_penalty must be positive, got {}", self.repetition_penalty)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Divides positive and multiplies negative logits of every token in
/// `history` by `penalty` (each distinct token once).
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[TokenId], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &t in history {
        let t = t as usize;
        if t < logits.len() && !seen[t] {
            seen[t] = true;
            let v = &mut logits[t];
            *v = if *v > 0.0 { *v / penalty } else { *v * penalty };
        }
    }
}

/// Sets to `-inf` every candidate that would complete an `n`-gram already
/// present in `history`.
pub fn block_repeat_ngrams(scores: &mut [f64], history: &[TokenId], n: usize) {
    if n == 0 || history.len() < n {
        return;
    }
    let prefix = &history[history.len() - (n - 1)..];
    for w in history.windows(n) {
        if &w[..n - 1] == prefix {
            if let Some(s) = scores.get_mut(w[n - 1] as usize) {
                *s = f64::NEG_INFINITY;
            }
        }
    }
}

/// Log-probabilities of the next token after `tokens`, with the repetition
/// controls applied. The read token is exempt from both controls.
pub fn step_scores(logits: &[f64], history: &[TokenId], tokens: &[TokenId], read: TokenId, cfg: &GenConfig) -> Vec<f64> {
    let seq: Vec<TokenId> = history.iter().chain(tokens).copied().filter(|&t| t != read).collect();
    let mut l = logits.to_vec();
    apply_repetition_penalty(&mut l, &seq, cfg.repetition_penalty);
    let mut lp = kernels::log_softmax(&l);
    let keep = lp.get(read as usize).copied();
    block_repeat_ngrams(&mut lp, &seq, cfg.no_repeat_ngram);
    if let Some(v) = keep {
        lp[read as usize] = v;
    }
    lp
}

/// Best hypothesis of a beam search.
#[derive(Clone, Debug)]
pub struct BeamOutcome<S> {
    /// Generated tokens, read token excluded.
    pub tokens: Vec<TokenId>,
    /// False when the hypothesis hit `max_new_tokens` without a read token.
    pub completed: bool,
    pub score: f64,
    /// Model state after the last returned token.
    pub state: S,
}

struct Hyp<S> {
    tokens: Vec<TokenId>,
    score: f64,
    state: S,
    logits: Vec<f64>,
}

struct Done<S> {
    tokens: Vec<TokenId>,
    completed: bool,
    score: f64,
    rank: f64,
    order: usize,
    state: S,
}

/// Ranking used for the final choice: normalized score, then the
/// lexicographically smaller sequence (read token included), then the
/// earlier completion.
fn better<S>(a: &Done<S>, b: &Done<S>, read: TokenId) -> bool {
    match a.rank.partial_cmp(&b.rank).unwrap_or(Ordering::Equal) {
        Ordering::Greater => return true,
        Ordering::Less => return false,
        Ordering::Equal => {}
    }
    let full = |d: &Done<S>| {
        let mut t = d.tokens.clone();
        if d.completed {
            t.push(read);
        }
        t
    };
    match full(a).cmp(&full(b)) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => a.order < b.order,
    }
}

/// Beam search over a step function. `step(state, token)` returns the state
/// after consuming `token` and the logits for the following position.
///
/// Each round ranks every expansion of every live hypothesis by cumulative
/// log-probability (ties: smaller token sequence) and keeps the best
/// `beam_size`; kept expansions ending in `read` are finished. Hypotheses
/// reaching `max_new_tokens` without reading are force-closed. There is no
/// early stopping, so a beam at least as wide as the number of sequences is
/// exhaustive.
pub fn beam_search<S: Clone, F>(
    root: S,
    root_logits: Vec<f64>,
    history: &[TokenId],
    read: TokenId,
    cfg: &GenConfig,
    mut step: F,
) -> Result<BeamOutcome<S>>
where
    F: FnMut(&S, TokenId) -> Result<(S, Vec<f64>)>,
{
    cfg.validate()?;
    if (read as usize) >= root_logits.len() {
        return Err(Error::Contract(format!("read token {read} outside vocabulary of {}", root_logits.len())));
    }
    let mut alive = vec![Hyp { tokens: Vec::new(), score: 0.0, state: root, logits: root_logits }];
    let mut done: Vec<Done<S>> = Vec::new();
    let rank = |score: f64, len: usize| if cfg.length_normalize { score / len as f64 } else { score };

    for len in 1..=cfg.max_new_tokens {
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (hi, h) in alive.iter().enumerate() {
            let lp = step_scores(&h.logits, history, &h.tokens, read, cfg);
            for (t, &s) in lp.iter().enumerate() {
                if s > f64::NEG_INFINITY {
                    cands.push((h.score + s, hi, t as TokenId));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| {
                let (ta, tb) = (&alive[a.1].tokens, &alive[b.1].tokens);
                ta.iter().chain([&a.2]).cmp(tb.iter().chain([&b.2]))
            })
        });
        cands.truncate(cfg.beam_size);

        let mut next = Vec::new();
        for (score, hi, t) in cands {
            let h = &alive[hi];
            if t == read {
                done.push(Done {
                    tokens: h.tokens.clone(),
                    completed: true,
                    score,
                    rank: rank(score, len),
                    order: done.len(),
                    state: h.state.clone(),
                });
                continue;
            }
            let (state, logits) = step(&h.state, t)?;
            let mut tokens = h.tokens.clone();
            tokens.push(t);
            next.push(Hyp { tokens, score, state, logits });
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    for h in alive {
        let n = h.tokens.len();
        done.push(Done { rank: rank(h.score, n), tokens: h.tokens, completed: false, score: h.score, order: done.len(), state: h.state });
    }

    let mut best = 0;
    for i in 1..done.len() {
        if better(&done[i], &done[best], read) {
            best = i;
        }
    }
    let d = done.swap_remove(best);
    Ok(BeamOutcome { tokens: d.tokens, completed: d.completed, score: d.score, state: d.state })
}
