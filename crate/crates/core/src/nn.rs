//! Layers composed from the autograd primitives. Layers only hold parameter
//! ids, so one layout serves every element type.

use rand::{Rng, RngCore};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Per-forward state: the dropout stream (absent in evaluation mode) and an
/// optional sink for attention probabilities.
pub struct ForwardCtx<'r> {
    rng: Option<&'r mut dyn RngCore>,
    dropout: f64,
    pub attention: Option<Vec<Var>>,
}

impl<'r> ForwardCtx<'r> {
    /// Evaluation mode: dropout disabled.
    pub fn eval() -> Self {
        Self {
            rng: None,
            dropout: 0.0,
            attention: None,
        }
    }

    pub fn train(rng: &'r mut dyn RngCore, dropout: f64) -> Self {
        Self {
            rng: Some(rng),
            dropout,
            attention: None,
        }
    }

    pub fn recording_attention(mut self) -> Self {
        self.attention = Some(Vec::new());
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.dropout > 0.0
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mask = g.constant(Tensor::from_rows(rows, cols, mask));
        g.mul(x, mask)
    }

    fn record(&mut self, probs: Var) {
        if let Some(sink) = self.attention.as_mut() {
            sink.push(probs);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), input, output, std, false, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, output), false));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, width, T::one()), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, width), false),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

/// Gated recurrent unit.
///
/// `z = σ(x·Wz + h·Uz + bz)`, `r = σ(x·Wr + h·Ur + br)`,
/// `n = tanh(x·Wn + r ⊙ (h·Un) + bn)`, `h' = n + z ⊙ (h − n)`.
#[derive(Clone, Debug)]
pub struct Gru {
    input: Linear,
    hidden: Linear,
    width: usize,
}

impl Gru {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        width: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), input, 3 * width, true, std, rng),
            hidden: Linear::new(store, &format!("{name}.hidden"), width, 3 * width, false, std, rng),
            width,
        }
    }

    /// Runs over the rows of `x` in order; returns every hidden state.
    pub fn run<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.value(x).rows();
        let h_w = self.width;
        let projected = self.input.forward(g, x)?;
        let mut h = g.constant(Tensor::zeros(1, h_w));
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let xt = g.slice_rows(projected, t, 1)?;
            let ht = self.hidden.forward(g, h)?;
            let (xz, xr, xn) = (g.slice_cols(xt, 0, h_w)?, g.slice_cols(xt, h_w, h_w)?, g.slice_cols(xt, 2 * h_w, h_w)?);
            let (hz, hr, hn) = (g.slice_cols(ht, 0, h_w)?, g.slice_cols(ht, h_w, h_w)?, g.slice_cols(ht, 2 * h_w, h_w)?);
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let gated = g.mul(r, hn)?;
            let cand = g.add(xn, gated)?;
            let cand = g.tanh(cand);
            let neg = g.scale(cand, -1.0);
            let diff = g.add(h, neg)?;
            let carry = g.mul(z, diff)?;
            h = g.add(cand, carry)?;
            states.push(h);
        }
        g.concat_rows(&states)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "heads must divide width");
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, false, std, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, false, std, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, false, std, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, true, std, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        causal: bool,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let width = g.value(x).cols();
        let head = width / self.heads;
        let scale = 1.0 / (head as f64).sqrt();
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head, head)?,
                    g.slice_cols(k, h * head, head)?,
                    g.slice_cols(v, h * head, head)?,
                )
            };
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores, causal);
            ctx.record(probs);
            outs.push(g.matmul(probs, vh)?);
        }
        let merged = g.concat_cols(&outs)?;
        self.out.forward(g, merged)
    }
}

/// Pre-normalization block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, std, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), width),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), width, 4 * width, true, std, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 4 * width, width, true, std, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        causal: bool,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let a = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, a, causal, ctx)?;
        let a = ctx.dropout(g, a)?;
        let x = g.add(x, a)?;
        let f = self.ln_ff.forward(g, x)?;
        let f = self.ff_in.forward(g, f)?;
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, f)?;
        let f = ctx.dropout(g, f)?;
        g.add(x, f)
    }
}
