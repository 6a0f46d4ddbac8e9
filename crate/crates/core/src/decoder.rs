//! Multi-turn language-model decoder.
//!
//! Speech arrives as dialogue turns: `<speech>`, the adapter embeddings,
//! `</speech>`. The decoder then writes target tokens and closes its reply
//! with the read token, which asks for more speech. Inference keeps the
//! system instruction's keys and values for the whole stream and a rolling
//! cache of the most recent positions. Keys are cached unrotated so the
//! rolling block can be renumbered after eviction and rotated again.

use crate::attention::{LayerKVCache, RopeConfig};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::generation::{beam_search, GenConfig};
use crate::nn::{join, Block, FrozenBlock, FrozenLinear, LayerNormP, Linear, Params, TapeCtx};
use crate::tensor::{kernels, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

pub type TokenId = u32;

/// Reserved ids. They occupy the first slots of every [`Vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: TokenId,
    /// Emitted by the decoder when it needs more speech.
    pub read: TokenId,
    pub speech_open: TokenId,
    pub speech_close: TokenId,
    /// Placeholder for silent input slots in text-only warm-up.
    pub sil: TokenId,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self { pad: 0, read: 1, speech_open: 2, speech_close: 3, sil: 4 }
    }
}

impl SpecialTokens {
    pub const SYMBOLS: [&'static str; 5] = ["<pad>", "<read>", "<speech>", "</speech>", "<sil>"];

    pub fn is_special(&self, t: TokenId) -> bool {
        (t as usize) < Self::SYMBOLS.len()
    }
}

/// Symbol vocabulary with the special tokens first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    symbols: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from the non-special symbols, in order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = SpecialTokens::SYMBOLS.iter().map(|s| s.to_string()).chain(words.into_iter().map(Into::into));
        let mut v = Self { symbols: Vec::new(), index: BTreeMap::new() };
        for s in all {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary symbol {s:?}")));
            }
            if v.index.insert(s.clone(), v.symbols.len() as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary symbol {s:?}")));
            }
            v.symbols.push(s);
        }
        Ok(v)
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::default()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Whitespace tokenization; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Contract(format!("word {w:?} is not in the vocabulary"))))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().filter_map(|&i| self.symbol(i)).collect::<Vec<_>>().join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;
    fn try_from(all: Vec<String>) -> Result<Self> {
        let n = SpecialTokens::SYMBOLS.len();
        if all.len() < n || all[..n].iter().zip(SpecialTokens::SYMBOLS).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with the special symbols".into()));
        }
        Vocab::new(all.into_iter().skip(n))
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.symbols
    }
}

/// What happens to the rolling cache when old exchanges are dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    /// Keep the surviving keys and values and renumber their positions.
    #[default]
    ConcatKv,
    /// Re-run the surviving inputs after the instruction.
    Recompute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Rolling cache capacity in positions (speech embeddings and tokens).
    pub recent_window: usize,
    /// Room kept free for the reply when a speech turn is appended.
    pub turn_reserve: usize,
    pub rope_base: f64,
    pub cache_policy: CachePolicy,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_llm: 64,
            n_layers: 2,
            n_heads: 4,
            recent_window: 1024,
            turn_reserve: 65,
            rope_base: 10000.0,
            cache_policy: CachePolicy::ConcatKv,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= SpecialTokens::SYMBOLS.len() || self.d_llm == 0 || self.n_layers == 0 {
            return Err(Error::Config("decoder vocab and dims must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_llm.is_multiple_of(self.n_heads) || !(self.d_llm / self.n_heads).is_multiple_of(2) {
            return Err(Error::Config(format!("d_llm {} must split into {} heads of even width", self.d_llm, self.n_heads)));
        }
        if self.turn_reserve == 0 || self.turn_reserve >= self.recent_window {
            return Err(Error::Config("turn_reserve must be in 1..recent_window".into()));
        }
        Ok(())
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig { head_dim: self.d_llm / self.n_heads.max(1), base: self.rope_base }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormP,
    pub head: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.n_layers).map(|_| Block::new(cfg.d_llm, cfg.n_heads, rng)).collect::<Result<_>>()?;
        Ok(Self {
            embed: Tensor::randn(&[cfg.vocab_size, cfg.d_llm], 1.0, rng),
            ln_f: LayerNormP::new(cfg.d_llm),
            head: Linear::new(cfg.d_llm, cfg.vocab_size, rng),
            blocks,
            cfg,
        })
    }

    pub fn embed_ids(&self, ctx: &mut TapeCtx, ids: &[TokenId]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            return contract_err(format!("token {bad} outside vocabulary"));
        }
        let table = ctx.bind(&self.embed);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        ctx.tape.gather_rows(table, &ids)
    }

    /// Causal forward over input rows at positions `0..n`; returns `n×V`
    /// logits.
    pub fn forward(&self, ctx: &mut TapeCtx, x: Var) -> Result<Var> {
        let n = ctx.tape.shape(x)[0];
        let positions: Vec<usize> = (0..n).collect();
        let ranges: Vec<(usize, usize)> = (0..n).map(|i| (0, i + 1)).collect();
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(ctx, h, &positions, &ranges, self.cfg.rope_base)?;
        }
        let h = self.ln_f.forward(ctx, h)?;
        self.head.forward(ctx, h)
    }

    /// Logits for every position of an explicit input sequence, computed
    /// from scratch without any cache.
    pub fn full_logits(&self, rows: &Tensor) -> Result<Tensor> {
        if rows.cols() != self.cfg.d_llm {
            return shape_err("input rows must have width d_llm");
        }
        let mut ctx = TapeCtx::new();
        let x = ctx.tape.input(vec![rows.rows(), rows.cols()], rows.data.clone())?;
        let y = self.forward(&mut ctx, x)?;
        Ok(ctx.tape.value(y))
    }

    pub fn frozen(&self) -> FrozenDecoder {
        FrozenDecoder {
            cfg: self.cfg.clone(),
            specials: SpecialTokens::default(),
            embed: self.embed.data.clone(),
            blocks: self.blocks.iter().map(|b| b.frozen(self.cfg.rope_base)).collect(),
            ln_f: self.ln_f.clone(),
            head: self.head.frozen(),
        }
    }
}

impl Params for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "embed"), &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "embed"), &mut self.embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Keys (raw and rotated) and values produced for new rows in one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerRows {
    k: Vec<f64>,
    k_rot: Vec<f64>,
    v: Vec<f64>,
}

impl LayerRows {
    fn extend(&mut self, other: &LayerRows) {
        self.k.extend_from_slice(&other.k);
        self.k_rot.extend_from_slice(&other.k_rot);
        self.v.extend_from_slice(&other.v);
    }
}

/// One layer of cached context: the unrotated store plus its rotated keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextLayer {
    pub cache: LayerKVCache,
    rotated: Vec<f64>,
}

impl ContextLayer {
    fn new(width: usize, capacity: usize, first: usize) -> Self {
        Self { cache: LayerKVCache::starting_at(width, capacity, first), rotated: Vec::new() }
    }

    fn push(&mut self, rows: &LayerRows) -> Result<()> {
        let first = self.cache.next_position();
        self.cache.append(first, &rows.k, &rows.v)?;
        self.rotated.extend_from_slice(&rows.k_rot);
        Ok(())
    }

    fn rerotate(&mut self, rope: &RopeConfig) {
        self.rotated = rotate(self.cache.keys(), self.cache.first_logical_position(), self.cache.width(), rope);
    }
}

fn rotate(rows: &[f64], pos0: usize, width: usize, rope: &RopeConfig) -> Vec<f64> {
    let mut out = rows.to_vec();
    for (row, p) in out.chunks_mut(width).zip(pos0..) {
        kernels::rope_rotate_row(row, p, rope.head_dim, rope.base, 1.0);
    }
    out
}

/// One speech turn and the reply that followed it.
#[derive(Clone, Debug, PartialEq)]
struct Exchange {
    rows: Vec<f64>,
}

/// Per-stream decoder state.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueState {
    instruction: Vec<ContextLayer>,
    rolling: Vec<ContextLayer>,
    instruction_rows: Vec<f64>,
    exchanges: VecDeque<Exchange>,
    pending_logits: Vec<f64>,
    open_turn: bool,
    history: VecDeque<TokenId>,
    appended: u64,
    width: usize,
}

const HISTORY_CAP: usize = 256;

impl DialogueState {
    pub fn instruction_len(&self) -> usize {
        self.instruction[0].cache.len()
    }

    /// Entries currently held by the rolling cache (per layer).
    pub fn rolling_len(&self) -> usize {
        self.rolling[0].cache.len()
    }

    pub fn recent_window(&self) -> usize {
        self.rolling[0].cache.capacity()
    }

    /// Position the next appended item will take.
    pub fn logical_position(&self) -> usize {
        self.rolling[0].cache.next_position()
    }

    /// Items appended since the dialogue started, evicted ones included.
    pub fn total_appended(&self) -> u64 {
        self.appended
    }

    pub fn exchanges(&self) -> usize {
        self.exchanges.len()
    }

    /// Entries of each retained exchange, oldest first.
    pub fn exchange_lengths(&self) -> Vec<usize> {
        self.exchanges.iter().map(|e| e.rows.len() / self.width).collect()
    }

    pub fn history(&self) -> Vec<TokenId> {
        self.history.iter().copied().collect()
    }

    /// Next-token logits after the last appended item.
    pub fn pending_logits(&self) -> &[f64] {
        &self.pending_logits
    }

    pub fn rolling_layers(&self) -> &[ContextLayer] {
        &self.rolling
    }

    pub fn instruction_layers(&self) -> &[ContextLayer] {
        &self.instruction
    }

    /// The explicit input rows the cache stands for: instruction, then
    /// every retained exchange.
    pub fn context_rows(&self) -> Tensor {
        let mut rows = self.instruction_rows.clone();
        for e in &self.exchanges {
            rows.extend_from_slice(&e.rows);
        }
        let n = rows.len() / self.width;
        Tensor::new(vec![n, self.width], rows).expect("context rows")
    }
}

/// Result of one generation turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnOutput {
    /// Text tokens, read token excluded.
    pub tokens: Vec<TokenId>,
    /// True when the turn hit `max_new_tokens` and was closed without the
    /// decoder asking for more speech.
    pub forced: bool,
}

/// Inference weights of a [`Decoder`].
#[derive(Clone, Debug)]
pub struct FrozenDecoder {
    pub cfg: DecoderConfig,
    pub specials: SpecialTokens,
    embed: Vec<f64>,
    blocks: Vec<FrozenBlock>,
    ln_f: LayerNormP,
    head: FrozenLinear,
}

impl FrozenDecoder {
    pub fn token_rows(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let d = self.cfg.d_llm;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            let i = i as usize;
            if i >= self.cfg.vocab_size {
                return contract_err(format!("token {i} outside vocabulary"));
            }
            out.extend_from_slice(&self.embed[i * d..(i + 1) * d]);
        }
        Ok(out)
    }

    /// Runs new input rows at positions `pos0..` against cached context.
    /// Returns the logits of the last row and the new keys/values per layer.
    fn run(&self, x: &[f64], pos0: usize, ctx: &[&[ContextLayer]], suffix: Option<&[LayerRows]>) -> (Vec<f64>, Vec<LayerRows>) {
        let d = self.cfg.d_llm;
        let rope = self.cfg.rope();
        let mut x = x.to_vec();
        let mut out = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (q, k, v) = block.qkv(&x);
            let q_rot = rotate(&q, pos0, d, &rope);
            let k_rot = rotate(&k, pos0, d, &rope);
            let mut segs: Vec<(&[f64], &[f64])> = ctx.iter().map(|c| (&c[l].rotated[..], c[l].cache.values())).collect();
            if let Some(s) = suffix {
                segs.push((&s[l].k_rot, &s[l].v));
            }
            let attn = attend_segments(&q_rot, &segs, &k_rot, &v, d, rope.head_dim);
            x = block.finish(&x, &attn);
            out.push(LayerRows { k, k_rot, v });
        }
        let last = &x[x.len() - d..];
        let h = self.ln_f.apply(last);
        (self.head.apply(&h), out)
    }

    /// Encodes the system instruction once.
    pub fn init_dialogue(&self, instruction: &[TokenId]) -> Result<DialogueState> {
        if instruction.is_empty() {
            return contract_err("instruction must not be empty");
        }
        let d = self.cfg.d_llm;
        let rows = self.token_rows(instruction)?;
        let (logits, layers) = self.run(&rows, 0, &[], None);
        let l = instruction.len();
        let mut instr: Vec<ContextLayer> = (0..self.blocks.len()).map(|_| ContextLayer::new(d, l, 0)).collect();
        for (c, r) in instr.iter_mut().zip(&layers) {
            c.push(r)?;
        }
        Ok(DialogueState {
            instruction: instr,
            rolling: (0..self.blocks.len()).map(|_| ContextLayer::new(d, self.cfg.recent_window, l)).collect(),
            instruction_rows: rows,
            exchanges: VecDeque::new(),
            pending_logits: logits,
            open_turn: false,
            history: VecDeque::new(),
            appended: l as u64,
            width: d,
        })
    }

    /// Appends `<speech>` embeddings `</speech>` as a new user turn,
    /// first evicting old exchanges so the turn and a reply fit.
    pub fn append_speech_turn(&self, state: &mut DialogueState, embeddings: &Tensor) -> Result<()> {
        let d = self.cfg.d_llm;
        if embeddings.cols() != d || embeddings.shape.len() != 2 {
            return shape_err(format!("speech embeddings must be n×{d}, got {:?}", embeddings.shape));
        }
        if embeddings.rows() == 0 {
            return contract_err("speech turn must carry at least one embedding");
        }
        if state.open_turn {
            return contract_err("previous speech turn has not been answered");
        }
        let sp = self.specials;
        let mut rows = self.token_rows(&[sp.speech_open])?;
        rows.extend_from_slice(&embeddings.data);
        rows.extend(self.token_rows(&[sp.speech_close])?);
        let n = rows.len() / d;
        self.evict_for(state, n + self.cfg.turn_reserve)?;
        self.push_rows(state, &rows)?;
        state.exchanges.push_back(Exchange { rows });
        state.open_turn = true;
        Ok(())
    }

    fn push_rows(&self, state: &mut DialogueState, rows: &[f64]) -> Result<()> {
        let pos0 = state.logical_position();
        let (logits, layers) = self.run(rows, pos0, &[&state.instruction, &state.rolling], None);
        for (c, r) in state.rolling.iter_mut().zip(&layers) {
            c.push(r)?;
        }
        state.pending_logits = logits;
        state.appended += (rows.len() / self.cfg.d_llm) as u64;
        Ok(())
    }

    /// Drops the oldest whole exchanges until the rolling cache holds at
    /// most `recent_window` entries.
    pub fn evict_cache(&self, state: &mut DialogueState) -> Result<()> {
        self.evict_for(state, 0)
    }

    /// Drops the oldest whole exchanges until `incoming` more entries fit.
    fn evict_for(&self, state: &mut DialogueState, incoming: usize) -> Result<()> {
        let cap = state.recent_window();
        if incoming > cap {
            return contract_err(format!("turn of {incoming} positions exceeds the recent window of {cap}"));
        }
        let d = self.cfg.d_llm;
        let mut drop = 0;
        while state.rolling_len() - drop + incoming > cap {
            match state.exchanges.pop_front() {
                Some(e) => drop += e.rows.len() / d,
                None => return contract_err("rolling cache cannot be trimmed to whole exchanges"),
            }
        }
        if drop == 0 {
            return Ok(());
        }
        let first = state.instruction_len();
        match self.cfg.cache_policy {
            CachePolicy::ConcatKv => {
                let rope = self.cfg.rope();
                for c in &mut state.rolling {
                    c.cache.evict_front(drop);
                    c.cache.reindex(first);
                    c.rerotate(&rope);
                }
            }
            CachePolicy::Recompute => {
                for c in &mut state.rolling {
                    c.cache.clear_at(first);
                    c.rotated.clear();
                }
                let rows: Vec<f64> = state.exchanges.iter().flat_map(|e| e.rows.iter().copied()).collect();
                if !rows.is_empty() {
                    let (logits, layers) = self.run(&rows, first, &[&state.instruction], None);
                    for (c, r) in state.rolling.iter_mut().zip(&layers) {
                        c.push(r)?;
                    }
                    state.pending_logits = logits;
                }
            }
        }
        Ok(())
    }

    /// Beam-searches the reply to the last speech turn and commits it,
    /// read token included, to the rolling cache.
    pub fn generate_turn(&self, state: &mut DialogueState, gen: &GenConfig) -> Result<TurnOutput> {
        gen.validate()?;
        if !state.open_turn {
            return contract_err("generation requires a pending speech turn");
        }
        let room = state.recent_window() - state.rolling_len();
        if gen.max_new_tokens + 1 > room {
            return contract_err(format!("reply of up to {} tokens does not fit in {room} free positions", gen.max_new_tokens + 1));
        }
        let read = self.specials.read;
        let hist: Vec<TokenId> = {
            let skip = state.history.len().saturating_sub(gen.history_window);
            state.history.iter().skip(skip).copied().collect()
        };
        let pos0 = state.logical_position();
        let root: Vec<LayerRows> = vec![LayerRows::default(); self.blocks.len()];
        let step = |suffix: &Vec<LayerRows>, tok: TokenId| -> Result<(Vec<LayerRows>, Vec<f64>)> {
            let x = self.token_rows(&[tok])?;
            let pos = pos0 + suffix[0].v.len() / self.cfg.d_llm;
            let (logits, new) = self.run(&x, pos, &[&state.instruction, &state.rolling], Some(suffix));
            let mut next = suffix.clone();
            for (s, n) in next.iter_mut().zip(&new) {
                s.extend(n);
            }
            Ok((next, logits))
        };
        let out = beam_search(root, state.pending_logits.clone(), &hist, read, gen, step)?;
        let (suffix, logits) = step(&out.state, read)?;

        for (c, r) in state.rolling.iter_mut().zip(&suffix) {
            c.push(r)?;
        }
        let mut ids = out.tokens.clone();
        ids.push(read);
        let rows = self.token_rows(&ids)?;
        state.exchanges.back_mut().expect("open turn has an exchange").rows.extend_from_slice(&rows);
        state.appended += ids.len() as u64;
        state.pending_logits = logits;
        state.open_turn = false;
        for &t in &out.tokens {
            if state.history.len() == HISTORY_CAP {
                state.history.pop_front();
            }
            state.history.push_back(t);
        }
        Ok(TurnOutput { tokens: out.tokens, forced: !out.completed })
    }
}

/// Attention of new query rows over cached segments followed by the new
/// rows themselves (causal among the new rows).
fn attend_segments(
    q_rot: &[f64],
    segs: &[(&[f64], &[f64])],
    new_k: &[f64],
    new_v: &[f64],
    width: usize,
    head_dim: usize,
) -> Vec<f64> {
    let n_q = q_rot.len() / width;
    let n_heads = width / head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; q_rot.len()];
    let mut w = Vec::new();
    for i in 0..n_q {
        for h in 0..n_heads {
            let c = h * head_dim;
            let q = &q_rot[i * width + c..i * width + c + head_dim];
            w.clear();
            let mut rows = Vec::new();
            for &(k, v) in segs {
                for j in 0..k.len() / width {
                    w.push(kernels::dot(q, &k[j * width + c..j * width + c + head_dim]) * scale);
                    rows.push(&v[j * width + c..j * width + c + head_dim]);
                }
            }
            for j in 0..=i {
                w.push(kernels::dot(q, &new_k[j * width + c..j * width + c + head_dim]) * scale);
                rows.push(&new_v[j * width + c..j * width + c + head_dim]);
            }
            kernels::softmax_in_place(&mut w);
            let o = &mut out[i * width + c..i * width + c + head_dim];
            for (wj, vr) in w.iter().zip(rows) {
                for (a, b) in o.iter_mut().zip(vr) {
                    *a += wj * b;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(layers: usize, window: usize, policy: CachePolicy, seed: u64) -> Decoder {
        let cfg = DecoderConfig {
            vocab_size: 12,
            d_llm: 8,
            n_layers: layers,
            n_heads: 2,
            recent_window: window,
            turn_reserve: 5,
            cache_policy: policy,
            ..Default::default()
        };
        Decoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn last_row(t: &Tensor) -> &[f64] {
        let c = t.cols();
        &t.data[t.data.len() - c..]
    }

    fn plain_gen() -> GenConfig {
        GenConfig { beam_size: 3, max_new_tokens: 4, repetition_penalty: 1.2, no_repeat_ngram: 2, ..Default::default() }
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::new(["a", "b"]).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("<read>"), Some(v.specials().read));
        assert_eq!(v.encode("a b a").unwrap(), vec![5, 6, 5]);
        assert!(Vocab::new(["a", "a"]).is_err());
        assert!(Vocab::new(["<read>"]).is_err());
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }

    #[test]
    fn init_is_deterministic_and_positions_follow_instruction() {
        let dec = model(2, 64, CachePolicy::ConcatKv, 1).frozen();
        let a = dec.init_dialogue(&[5, 6, 7]).unwrap();
        let b = dec.init_dialogue(&[5, 6, 7]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logical_position(), 3);
        assert_eq!(a.rolling_len(), 0);
        assert!(matches!(dec.init_dialogue(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn speech_turn_positions() {
        let dec = model(2, 64, CachePolicy::ConcatKv, 2).frozen();
        let mut st = dec.init_dialogue(&[5, 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        dec.append_speech_turn(&mut st, &Tensor::randn(&[12, 8], 1.0, &mut rng)).unwrap();
        assert_eq!(st.logical_position(), 2 + 12 + 2);
        dec.generate_turn(&mut st, &plain_gen()).unwrap();
        let before = st.logical_position();
        let m3 = Tensor::randn(&[36, 8], 1.0, &mut rng);
        dec.append_speech_turn(&mut st, &m3).unwrap();
        assert_eq!(st.logical_position() - before, 38);
        assert!(matches!(dec.generate_turn(&mut st, &plain_gen()).map(|_| ()), Ok(())));
        assert!(matches!(dec.append_speech_turn(&mut st, &Tensor::zeros(&[3, 5])), Err(Error::Shape(_))));
    }

    #[test]
    fn turn_protocol_errors() {
        let dec = model(1, 64, CachePolicy::ConcatKv, 3).frozen();
        let mut st = dec.init_dialogue(&[5]).unwrap();
        assert!(matches!(dec.generate_turn(&mut st, &plain_gen()), Err(Error::Contract(_))));
        dec.append_speech_turn(&mut st, &Tensor::zeros(&[2, 8])).unwrap();
        assert!(matches!(dec.append_speech_turn(&mut st, &Tensor::zeros(&[2, 8])), Err(Error::Contract(_))));
    }

    #[test]
    fn cached_logits_match_full_recompute() {
        let m = model(2, 200, CachePolicy::ConcatKv, 4);
        let dec = m.frozen();
        let mut st = dec.init_dialogue(&[5, 6, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for turn in 0..3 {
            dec.append_speech_turn(&mut st, &Tensor::randn(&[4 + turn, 8], 1.0, &mut rng)).unwrap();
            let full = m.full_logits(&st.context_rows()).unwrap();
            assert!(max_diff(st.pending_logits(), last_row(&full)) < 1e-12);
            let out = dec.generate_turn(&mut st, &plain_gen()).unwrap();
            assert!(!out.tokens.contains(&dec.specials.read));
            let full = m.full_logits(&st.context_rows()).unwrap();
            assert!(max_diff(st.pending_logits(), last_row(&full)) < 1e-12);
        }
    }

    /// Beam search where every step re-runs the whole context from scratch.
    fn uncached_turn(m: &Decoder, ctx: &Tensor, hist: &[TokenId], gen: &GenConfig) -> TurnOutput {
        let dec = m.frozen();
        let read = dec.specials.read;
        let logits_after = |prefix: &Vec<TokenId>| {
            let mut rows = ctx.data.clone();
            rows.extend(dec.token_rows(prefix).unwrap());
            let t = Tensor::new(vec![rows.len() / 8, 8], rows).unwrap();
            last_row(&m.full_logits(&t).unwrap()).to_vec()
        };
        let root = logits_after(&vec![]);
        let out = beam_search(Vec::new(), root, hist, read, gen, |p: &Vec<TokenId>, t| {
            let mut q = p.clone();
            q.push(t);
            let l = logits_after(&q);
            Ok((q, l))
        })
        .unwrap();
        TurnOutput { tokens: out.tokens, forced: !out.completed }
    }

    #[test]
    fn generated_turns_match_uncached_decoding() {
        let m = model(2, 300, CachePolicy::ConcatKv, 6);
        let dec = m.frozen();
        let gen = plain_gen();
        let mut st = dec.init_dialogue(&[5, 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            dec.append_speech_turn(&mut st, &Tensor::randn(&[3, 8], 1.0, &mut rng)).unwrap();
            let want = uncached_turn(&m, &st.context_rows(), &st.history(), &gen);
            let got = dec.generate_turn(&mut st, &gen).unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn eviction_keeps_whole_exchanges_and_exact_counts() {
        // Speech turn of 4 embeddings (6 entries) plus a reply of exactly
        // 2 entries: exchanges of 8, window 24 holds 3.
        let mut m = model(2, 24, CachePolicy::ConcatKv, 7);
        m.cfg.turn_reserve = 2;
        // Never read: every reply is one forced token plus the read token.
        m.head.b.data[SpecialTokens::default().read as usize] = -1e9;
        let dec = m.frozen();
        let gen = GenConfig { beam_size: 1, max_new_tokens: 1, repetition_penalty: 1.0, no_repeat_ngram: 0, ..Default::default() };
        let mut st = dec.init_dialogue(&[5]).unwrap();
        dec.evict_cache(&mut st).unwrap();
        assert_eq!(st.rolling_len(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..6 {
            dec.append_speech_turn(&mut st, &Tensor::randn(&[4, 8], 1.0, &mut rng)).unwrap();
            let out = dec.generate_turn(&mut st, &gen).unwrap();
            assert!(out.forced && out.tokens.len() == 1);
            assert_eq!(st.exchange_lengths(), vec![8; (i + 1).min(3)]);
            assert_eq!(st.rolling_len(), 8 * (i + 1).min(3));
            assert_eq!(st.logical_position(), 1 + st.rolling_len());
        }
        assert!(st.total_appended() as usize > st.rolling_len() + 1);
    }

    fn evicting_run(policy: CachePolicy, layers: usize, seed: u64) -> f64 {
        let m = model(layers, 30, policy, seed);
        let dec = m.frozen();
        let gen = GenConfig { beam_size: 2, max_new_tokens: 3, ..Default::default() };
        let mut st = dec.init_dialogue(&[5, 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut worst: f64 = 0.0;
        let mut evicted = false;
        for _ in 0..8 {
            let before = st.exchanges();
            dec.append_speech_turn(&mut st, &Tensor::randn(&[5, 8], 1.0, &mut rng)).unwrap();
            evicted |= st.exchanges() <= before;
            let full = m.full_logits(&st.context_rows()).unwrap();
            worst = worst.max(max_diff(st.pending_logits(), last_row(&full)));
            dec.generate_turn(&mut st, &gen).unwrap();
        }
        assert!(evicted);
        worst
    }

    #[test]
    fn one_layer_concat_matches_truncated_context() {
        for seed in 0..4 {
            assert!(evicting_run(CachePolicy::ConcatKv, 1, seed) < 1e-10);
        }
    }

    #[test]
    fn recompute_policy_matches_truncated_context() {
        for seed in 0..4 {
            assert!(evicting_run(CachePolicy::Recompute, 3, seed) < 1e-10);
        }
    }

    #[test]
    fn concat_policy_reuses_stale_deep_keys() {
        // Deeper layers still carry evicted context, so logits drift from a
        // truncated recompute; this documents the difference between the
        // two policies.
        let d = evicting_run(CachePolicy::ConcatKv, 2, 0);
        assert!(d > 1e-8, "{d}");
    }

    #[test]
    fn concat_eviction_renumbers_positions() {
        let m = model(2, 30, CachePolicy::ConcatKv, 8);
        let dec = m.frozen();
        let mut st = dec.init_dialogue(&[5, 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = GenConfig { beam_size: 1, max_new_tokens: 2, ..Default::default() };
        for _ in 0..6 {
            dec.append_speech_turn(&mut st, &Tensor::randn(&[5, 8], 1.0, &mut rng)).unwrap();
            dec.generate_turn(&mut st, &gen).unwrap();
            for c in st.rolling_layers() {
                assert_eq!(c.cache.first_logical_position(), 2);
                let rope = m.cfg.rope();
                assert_eq!(c.rotated, rotate(c.cache.keys(), 2, 8, &rope));
            }
        }
    }
}
