//! Item-based session encoder: collapses each session's item vectors into one
//! session token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ReduceMode, Var};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Gru, TransformerBlock};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IseKind {
    Mean,
    Max,
    /// ReLU on every item vector, then max pooling.
    MaxRelu,
    /// GRU over the session's items in log order; last hidden state.
    Recurrent,
    /// Unmasked self-attention inside the session, then mean pooling.
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IseConfig {
    pub kind: IseKind,
    pub layers: usize,
    pub heads: usize,
}

impl Default for IseConfig {
    fn default() -> Self {
        Self {
            kind: IseKind::Mean,
            layers: 1,
            heads: 1,
        }
    }
}

impl IseConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.kind == IseKind::Attention && (self.heads == 0 || d % self.heads != 0) {
            return Err(Error::Config(format!(
                "ise.heads = {} must divide d = {d}",
                self.heads
            )));
        }
        if matches!(self.kind, IseKind::Recurrent | IseKind::Attention) && self.layers == 0 {
            return Err(Error::Config("ise.layers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SessionEncoder {
    kind: IseKind,
    grus: Vec<Gru>,
    blocks: Vec<TransformerBlock>,
}

impl SessionEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &IseConfig,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(d)?;
        let mut grus = Vec::new();
        let mut blocks = Vec::new();
        match cfg.kind {
            IseKind::Recurrent => {
                for l in 0..cfg.layers {
                    grus.push(Gru::new(store, &format!("ise.gru{l}"), d, d, std, rng));
                }
            }
            IseKind::Attention => {
                for l in 0..cfg.layers {
                    blocks.push(TransformerBlock::new(store, &format!("ise.block{l}"), d, cfg.heads, std, rng));
                }
            }
            _ => {}
        }
        Ok(Self { kind: cfg.kind, grus, blocks })
    }

    pub fn kind(&self) -> IseKind {
        self.kind
    }

    /// `item_vecs` rows are partitioned into consecutive sessions of the given
    /// lengths; returns one row per session.
    pub fn encode_sessions<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        item_vecs: Var,
        session_lengths: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        if let Some(pos) = session_lengths.iter().position(|&l| l == 0) {
            return Err(Error::Invalid(format!("session {pos} is empty")));
        }
        let total: usize = session_lengths.iter().sum();
        if total != g.value(item_vecs).rows() || session_lengths.is_empty() {
            return Err(Error::Shape(format!(
                "session lengths sum to {total}, item rows = {}",
                g.value(item_vecs).rows()
            )));
        }
        let mut runs = Vec::with_capacity(session_lengths.len());
        let mut start = 0;
        for &len in session_lengths {
            runs.push((start, len));
            start += len;
        }
        match self.kind {
            IseKind::Mean => g.segment_reduce_runs(item_vecs, runs, ReduceMode::Mean),
            IseKind::Max => g.segment_reduce_runs(item_vecs, runs, ReduceMode::Max),
            IseKind::MaxRelu => {
                let r = g.relu(item_vecs);
                g.segment_reduce_runs(r, runs, ReduceMode::Max)
            }
            IseKind::Recurrent => {
                let mut tokens = Vec::with_capacity(runs.len());
                for &(start, len) in &runs {
                    let mut h = g.slice_rows(item_vecs, start, len)?;
                    for gru in &self.grus {
                        h = gru.run(g, h)?;
                    }
                    tokens.push(g.slice_rows(h, len - 1, 1)?);
                }
                g.concat_rows(&tokens)
            }
            IseKind::Attention => {
                let mut tokens = Vec::with_capacity(runs.len());
                for &(start, len) in &runs {
                    let mut h = g.slice_rows(item_vecs, start, len)?;
                    for block in &self.blocks {
                        h = block.forward(g, h, false, ctx)?;
                    }
                    tokens.push(g.segment_reduce_runs(h, vec![(0, len)], ReduceMode::Mean)?);
                }
                g.concat_rows(&tokens)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(kind: IseKind, store: &mut ParamStore<f64>, d: usize) -> SessionEncoder {
        let cfg = IseConfig {
            kind,
            layers: 1,
            heads: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        SessionEncoder::new(store, &cfg, d, 0.3, &mut rng).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn run(enc: &SessionEncoder, store: &ParamStore<f64>, x: &Tensor<f64>, lens: &[usize]) -> Tensor<f64> {
        let mut g = Graph::inference(store);
        let xv = g.constant(x.clone());
        let out = enc.encode_sessions(&mut g, xv, lens, &mut ForwardCtx::eval()).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn mean_of_singletons_is_identity() {
        let mut store = ParamStore::new();
        let enc = encoder(IseKind::Mean, &mut store, 4);
        let x = random(5, 4, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(run(&enc, &store, &x, &[1; 5]), x);
    }

    #[test]
    fn max_pools() {
        let mut store = ParamStore::new();
        let enc = encoder(IseKind::Max, &mut store, 2);
        let x = Tensor::from_f64(2, 2, &[1., 3., 3., 1.]);
        assert_eq!(run(&enc, &store, &x, &[2]).data(), &[3.0, 3.0]);
    }

    #[test]
    fn max_relu_applies_relu_before_pooling() {
        let mut store = ParamStore::new();
        let enc = encoder(IseKind::MaxRelu, &mut store, 2);
        let x = Tensor::from_f64(2, 2, &[-1., -3., -3., 2.]);
        assert_eq!(run(&enc, &store, &x, &[2]).data(), &[0.0, 2.0]);
    }

    #[test]
    fn empty_session_rejected() {
        let mut store = ParamStore::new();
        let enc = encoder(IseKind::Mean, &mut store, 2);
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(2, 2));
        assert!(enc.encode_sessions(&mut g, x, &[2, 0], &mut ForwardCtx::eval()).is_err());
    }

    #[test]
    fn pooling_is_permutation_invariant_within_sessions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lens = [3, 1, 4, 2];
        for kind in [IseKind::Mean, IseKind::Max, IseKind::MaxRelu, IseKind::Attention] {
            let mut store = ParamStore::new();
            let enc = encoder(kind, &mut store, 4);
            for _ in 0..20 {
                let x = random(10, 4, &mut rng);
                let base = run(&enc, &store, &x, &lens);
                let mut perm: Vec<usize> = Vec::new();
                let mut start = 0;
                for &l in &lens {
                    let mut idx: Vec<usize> = (start..start + l).collect();
                    idx.shuffle(&mut rng);
                    perm.extend(idx);
                    start += l;
                }
                let shuffled = Tensor::from_rows(10, 4, perm.iter().flat_map(|&r| x.row(r).to_vec()).collect());
                let out = run(&enc, &store, &shuffled, &lens);
                for (a, b) in base.data().iter().zip(out.data()) {
                    assert!((a - b).abs() < 1e-6, "{kind:?}");
                }
            }
        }
    }

    #[test]
    fn no_cross_session_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lens = [2, 3, 1];
        for kind in [IseKind::Mean, IseKind::Max, IseKind::MaxRelu, IseKind::Recurrent, IseKind::Attention] {
            let mut store = ParamStore::new();
            let enc = encoder(kind, &mut store, 4);
            let x = random(6, 4, &mut rng);
            let base = run(&enc, &store, &x, &lens);
            let mut y = x.clone();
            // perturb session 1 (rows 2..5)
            for v in &mut y.data_mut()[8..20] {
                *v += rng.random_range(-1.0..1.0);
            }
            let out = run(&enc, &store, &y, &lens);
            assert_eq!(base.row(0), out.row(0), "{kind:?}");
            assert_eq!(base.row(2), out.row(2), "{kind:?}");
            assert_ne!(base.row(1), out.row(1), "{kind:?}");
        }
    }
}
