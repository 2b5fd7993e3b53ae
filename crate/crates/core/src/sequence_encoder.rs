//! Session-based sequence encoder: causal encoding of session tokens into one
//! user-interest vector per position.
//!
//! Backbones implement [`SequenceBackbone`]; row `i` of the output may depend
//! on input rows `0..=i` only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Gru, LayerNorm, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Recurrent,
    CausalAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SseConfig {
    pub backbone: BackboneKind,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl Default for SseConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::CausalAttention,
            layers: 4,
            heads: 2,
            dropout: 0.2,
            max_positions: 256,
        }
    }
}

impl SseConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("sse.heads = {} must divide d = {d}", self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("sse.dropout = {} outside [0, 1)", self.dropout)));
        }
        if self.layers == 0 || self.max_positions == 0 {
            return Err(Error::Config("sse.layers and sse.max_positions must be positive".into()));
        }
        Ok(())
    }
}

/// A causal sequence model over `m × d` session tokens.
pub trait SequenceBackbone {
    fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var>;
}

/// Learned absolute positions, pre-norm masked self-attention blocks, final
/// layer norm.
#[derive(Clone, Debug)]
pub struct AttentionBackbone {
    positions: ParamId,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
}

impl AttentionBackbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &SseConfig,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            positions: store.add_normal("sse.positions", cfg.max_positions, d, std, true, rng),
            blocks: (0..cfg.layers)
                .map(|l| TransformerBlock::new(store, &format!("sse.block{l}"), d, cfg.heads, std, rng))
                .collect(),
            final_ln: LayerNorm::new(store, "sse.ln_final", d),
        }
    }
}

impl SequenceBackbone for AttentionBackbone {
    fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let m = g.value(tokens).rows();
        let table = g.param(self.positions);
        let pos = g.gather_rows(table, (0..m).collect())?;
        let mut x = g.add(tokens, pos)?;
        x = ctx.dropout(g, x)?;
        for block in &self.blocks {
            x = block.forward(g, x, true, ctx)?;
        }
        self.final_ln.forward(g, x)
    }
}

/// Stacked GRU layers.
#[derive(Clone, Debug)]
pub struct RecurrentBackbone {
    layers: Vec<Gru>,
}

impl RecurrentBackbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &SseConfig,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: (0..cfg.layers)
                .map(|l| Gru::new(store, &format!("sse.gru{l}"), d, d, std, rng))
                .collect(),
        }
    }
}

impl SequenceBackbone for RecurrentBackbone {
    fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let mut x = ctx.dropout(g, tokens)?;
        for (l, gru) in self.layers.iter().enumerate() {
            if l > 0 {
                x = ctx.dropout(g, x)?;
            }
            x = gru.run(g, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Attention(AttentionBackbone),
    Recurrent(RecurrentBackbone),
}

#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    config: SseConfig,
    backbone: Backbone,
}

impl SequenceEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &SseConfig,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(d)?;
        let backbone = match cfg.backbone {
            BackboneKind::CausalAttention => Backbone::Attention(AttentionBackbone::new(store, cfg, d, std, rng)),
            BackboneKind::Recurrent => Backbone::Recurrent(RecurrentBackbone::new(store, cfg, d, std, rng)),
        };
        Ok(Self {
            config: cfg.clone(),
            backbone,
        })
    }

    pub fn config(&self) -> &SseConfig {
        &self.config
    }

    /// `m × d` tokens to `m × d` causal outputs.
    pub fn encode_sequence<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let m = g.value(tokens).rows();
        if m == 0 {
            return Err(Error::Invalid("empty session sequence".into()));
        }
        if m > self.config.max_positions {
            return Err(Error::Invalid(format!(
                "sequence of {m} sessions exceeds max_positions = {}; truncate to the most recent sessions first",
                self.config.max_positions
            )));
        }
        match &self.backbone {
            Backbone::Attention(b) => b.encode(g, tokens, ctx),
            Backbone::Recurrent(b) => b.encode(g, tokens, ctx),
        }
    }

    /// Last row of [`Self::encode_sequence`].
    pub fn user_vector<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let out = self.encode_sequence(g, tokens, ctx)?;
        let m = g.value(out).rows();
        g.slice_rows(out, m - 1, 1)
    }
}
