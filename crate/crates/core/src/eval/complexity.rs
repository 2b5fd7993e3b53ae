//! Attention cost of item-level versus session-level sequences.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::ForwardCtx;
use crate::params::ParamStore;
use crate::sequence_encoder::{BackboneKind, SequenceEncoder, SseConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub n_items: usize,
    pub session_len: usize,
    pub item_level_pairs: u64,
    pub session_level_pairs: u64,
    pub pair_ratio: f64,
    pub item_level_secs: f64,
    pub session_level_secs: f64,
    pub time_ratio: f64,
}

/// Fastest of `repeats` forward passes of a causal-attention encoder over
/// `len` random tokens.
fn time_forward(encoder: &SequenceEncoder, store: &ParamStore<f32>, len: usize, d: usize, repeats: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
    let tokens = Tensor::from_rows(len, d, (0..len * d).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let mut g = Graph::inference(store);
        let x = g.constant(tokens.clone());
        let start = Instant::now();
        let out = encoder.encode_sequence(&mut g, x, &mut ForwardCtx::eval())?;
        std::hint::black_box(g.value(out));
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Counts attention pairs analytically (`n²` against `(n/M)²`) and times one
/// causal-attention layer at both granularities.
///
/// The encoder is deliberately narrow (`d = 8`, one head, one layer) so the
/// quadratic attention term dominates the linear projections.
pub fn complexity_bench(n_items: usize, session_len: usize, repeats: usize) -> Result<ComplexityReport> {
    if session_len == 0 || n_items == 0 || n_items % session_len != 0 {
        return Err(Error::Invalid(format!(
            "session length {session_len} must divide item count {n_items}"
        )));
    }
    let sessions = n_items / session_len;
    let item_level_pairs = (n_items as u64).pow(2);
    let session_level_pairs = (sessions as u64).pow(2);

    let d = 8;
    let cfg = SseConfig {
        backbone: BackboneKind::CausalAttention,
        layers: 1,
        heads: 1,
        dropout: 0.0,
        max_positions: n_items,
    };
    let mut store = ParamStore::<f32>::new();
    let encoder = SequenceEncoder::new(&mut store, &cfg, d, 0.02, &mut ChaCha8Rng::seed_from_u64(0))?;
    // Short sequences are timed more often to beat timer noise.
    let item_level_secs = time_forward(&encoder, &store, n_items, d, repeats)?;
    let session_level_secs = time_forward(&encoder, &store, sessions, d, repeats * 8)?;
    Ok(ComplexityReport {
        n_items,
        session_len,
        item_level_pairs,
        session_level_pairs,
        pair_ratio: item_level_pairs as f64 / session_level_pairs as f64,
        item_level_secs,
        session_level_secs,
        time_ratio: item_level_secs / session_level_secs,
    })
}
