//! Parameterized layers shared by the encoder and decoder, with both a
//! tape-recorded training path and a plain inference path.

use crate::attention::RopeConfig;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Grads, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub const LN_EPS: f64 = 1e-5;

/// Visitor over named parameters in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Owns a tape for one forward pass and binds model parameters as leaves.
pub struct TapeCtx {
    pub tape: Tape,
    bound: HashMap<usize, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl TapeCtx {
    /// Inference-style context: LoRA dropout disabled.
    pub fn new() -> Self {
        Self { tape: Tape::new(), bound: HashMap::new(), dropout_rng: None }
    }

    /// Training context; LoRA dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self { tape: Tape::new(), bound: HashMap::new(), dropout_rng: Some(rng) }
    }

    pub fn bind(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(v) = self.bound.get(&key) {
            return *v;
        }
        let v = self.tape.leaf(t);
        self.bound.insert(key, v);
        v
    }

    fn dropout_mask(&mut self, n: usize, p: f64) -> Option<Vec<f64>> {
        let rng = self.dropout_rng.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        Some((0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect())
    }

    /// Adds the gradients of every bound trainable parameter of `model`.
    pub fn accumulate<P: Params + ?Sized>(&self, model: &mut P, grads: &Grads) {
        model.visit_mut("", &mut |_, t| {
            if !t.requires_grad {
                return;
            }
            let key = t as *const Tensor as usize;
            if let Some(v) = self.bound.get(&key) {
                if let Some(g) = grads.get_ref(*v) {
                    t.accumulate_grad(g);
                }
            }
        });
    }
}

impl Default for TapeCtx {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormP {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormP {
    pub fn new(d: usize) -> Self {
        Self { gain: Tensor::ones(&[d]), bias: Tensor::zeros(&[d]) }
    }

    pub fn forward(&self, ctx: &mut TapeCtx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.bind(&self.gain), ctx.bind(&self.bias));
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        kernels::layer_norm_rows(x, self.gain.len(), &self.gain.data, &self.bias.data, LN_EPS)
    }
}

impl Params for LayerNormP {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Low-rank additive update `scale · B(A x)` on a frozen linear map.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// `rank × in`, seeded Gaussian.
    pub a: Tensor,
    /// `out × rank`, zero at initialization.
    pub b: Tensor,
    pub scale: f64,
    pub dropout: f64,
}

/// Affine map `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_out]),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape[1]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward(&self, ctx: &mut TapeCtx, x: Var) -> Result<Var> {
        let w = ctx.bind(&self.w);
        let b = ctx.bind(&self.b);
        let y = ctx.tape.matmul_nt(x, w)?;
        let mut y = ctx.tape.add_row(y, b)?;
        if let Some(l) = &self.lora {
            let n = ctx.tape.data(x).len();
            let xd = match ctx.dropout_mask(n, l.dropout) {
                Some(mask) => ctx.tape.mul_const(x, mask)?,
                None => x,
            };
            let (a, bb) = (ctx.bind(&l.a), ctx.bind(&l.b));
            let low = ctx.tape.matmul_nt(xd, a)?;
            let up = ctx.tape.matmul_nt(low, bb)?;
            let up = ctx.tape.scale(up, l.scale);
            y = ctx.tape.add(y, up)?;
        }
        Ok(y)
    }

    /// `W + scale · B A`, the weight the wrapped map is equivalent to.
    pub fn merged_weight(&self) -> Vec<f64> {
        let mut w = self.w.data.clone();
        if let Some(l) = &self.lora {
            let (out, r, inp) = (l.b.shape[0], l.b.shape[1], l.a.shape[1]);
            let ba = kernels::matmul(&l.b.data, &l.a.data, out, r, inp);
            for (x, d) in w.iter_mut().zip(ba) {
                *x += l.scale * d;
            }
        }
        w
    }

    pub fn frozen(&self) -> FrozenLinear {
        FrozenLinear { w: self.merged_weight(), b: self.b.data.clone(), d_in: self.d_in(), d_out: self.d_out() }
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
        if let Some(l) = &self.lora {
            f(&join(prefix, "lora_a"), &l.a);
            f(&join(prefix, "lora_b"), &l.b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
        if let Some(l) = &mut self.lora {
            f(&join(prefix, "lora_a"), &mut l.a);
            f(&join(prefix, "lora_b"), &mut l.b);
        }
    }
}

/// Inference copy of a linear map with any adapter merged in.
#[derive(Clone, Debug)]
pub struct FrozenLinear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
}

impl FrozenLinear {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        kernels::linear(x, x.len() / self.d_in, &self.w, Some(&self.b), self.d_in, self.d_out)
    }
}

/// Pre-norm transformer block with rotary self-attention and a GELU
/// feed-forward of width `4 × d_model`.
#[derive(Clone, Debug)]
pub struct Block {
    pub n_heads: usize,
    pub ln1: LayerNormP,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNormP,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn new<R: Rng>(d: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) || !(d / n_heads).is_multiple_of(2) {
            return Err(Error::Config(format!("d_model {d} must split into {n_heads} heads of even width")));
        }
        Ok(Self {
            n_heads,
            ln1: LayerNormP::new(d),
            wq: Linear::new(d, d, rng),
            wk: Linear::new(d, d, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            ln2: LayerNormP::new(d),
            ff1: Linear::new(d, 4 * d, rng),
            ff2: Linear::new(4 * d, d, rng),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.wq.d_out() / self.n_heads
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.ff1, &mut self.ff2]
    }

    /// Query row `i` (at `positions[i]`) attends key rows `ranges[i]`.
    pub fn forward(
        &self,
        ctx: &mut TapeCtx,
        x: Var,
        positions: &[usize],
        ranges: &[(usize, usize)],
        rope_base: f64,
    ) -> Result<Var> {
        let hd = self.head_dim();
        let h = self.ln1.forward(ctx, x)?;
        let q = self.wq.forward(ctx, h)?;
        let k = self.wk.forward(ctx, h)?;
        let v = self.wv.forward(ctx, h)?;
        let q = ctx.tape.rope(q, positions, hd, rope_base)?;
        let k = ctx.tape.rope(k, positions, hd, rope_base)?;
        let a = ctx.tape.attend(q, (k, v), self.n_heads, ranges)?;
        let o = self.wo.forward(ctx, a)?;
        let x = ctx.tape.add(x, o)?;
        let h = self.ln2.forward(ctx, x)?;
        let f = self.ff1.forward(ctx, h)?;
        let f = ctx.tape.gelu(f);
        let f = self.ff2.forward(ctx, f)?;
        ctx.tape.add(x, f)
    }

    pub fn frozen(&self, rope_base: f64) -> FrozenBlock {
        FrozenBlock {
            rope: RopeConfig { head_dim: self.head_dim(), base: rope_base },
            ln1: self.ln1.clone(),
            wq: self.wq.frozen(),
            wk: self.wk.frozen(),
            wv: self.wv.frozen(),
            wo: self.wo.frozen(),
            ln2: self.ln2.clone(),
            ff1: self.ff1.frozen(),
            ff2: self.ff2.frozen(),
        }
    }
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ff1.visit_mut(&join(prefix, "ff1"), f);
        self.ff2.visit_mut(&join(prefix, "ff2"), f);
    }
}

/// Inference weights of a [`Block`].
#[derive(Clone, Debug)]
pub struct FrozenBlock {
    pub rope: RopeConfig,
    ln1: LayerNormP,
    wq: FrozenLinear,
    wk: FrozenLinear,
    wv: FrozenLinear,
    wo: FrozenLinear,
    ln2: LayerNormP,
    ff1: FrozenLinear,
    ff2: FrozenLinear,
}

impl FrozenBlock {
    pub fn width(&self) -> usize {
        self.wq.d_out
    }

    /// Unrotated query, key and value rows for the block input `x`.
    pub fn qkv(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.ln1.apply(x);
        (self.wq.apply(&h), self.wk.apply(&h), self.wv.apply(&h))
    }

    /// Output projection, residuals and feed-forward.
    pub fn finish(&self, x: &[f64], attn: &[f64]) -> Vec<f64> {
        let o = self.wo.apply(attn);
        let x: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h = self.ln2.apply(&x);
        let mut f = self.ff1.apply(&h);
        f.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let f = self.ff2.apply(&f);
        x.iter().zip(&f).map(|(a, b)| a + b).collect()
    }
}
