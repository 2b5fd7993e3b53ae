//! The full encoder stack: item embeddings, session encoder, sequence encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{Catalog, Session};
use crate::embedding::{EmbeddingConfig, EmbeddingSpace, FeatureSpec};
use crate::error::{Error, Result};
use crate::nn::ForwardCtx;
use crate::params::ParamStore;
use crate::sequence_encoder::{SequenceEncoder, SseConfig};
use crate::session_encoder::{IseConfig, SessionEncoder};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    /// Item-ID embedding width; 0 means `d`.
    pub d_id: usize,
    pub feature_dim: usize,
    pub polarity_dim: usize,
    pub init_std: f64,
    pub ise: IseConfig,
    pub sse: SseConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_id: 0,
            feature_dim: 16,
            polarity_dim: 16,
            init_std: 0.02,
            ise: IseConfig::default(),
            sse: SseConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn embedding_config(&self, catalog: &Catalog) -> EmbeddingConfig {
        EmbeddingConfig {
            num_items: catalog.len(),
            d_id: if self.d_id == 0 { self.d } else { self.d_id },
            features: catalog
                .features
                .iter()
                .map(|f| FeatureSpec {
                    name: f.name.clone(),
                    vocab: f.values.len(),
                    dim: self.feature_dim,
                })
                .collect(),
            polarity_dim: self.polarity_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("model.d must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config(format!("model.init_std = {} must be positive", self.init_std)));
        }
        self.ise.validate(self.d)?;
        self.sse.validate(self.d)
    }
}

/// Parameters plus the layer layout that indexes them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embedding: EmbeddingSpace,
    pub ise: SessionEncoder,
    pub sse: SequenceEncoder,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, catalog: &Catalog, seed: u64) -> Result<Self> {
        let emb = config.embedding_config(catalog);
        Self::with_embedding(config, emb, catalog.item_features.clone(), seed)
    }

    pub fn with_embedding(
        config: ModelConfig,
        embedding: EmbeddingConfig,
        item_features: Vec<Vec<u32>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let std = config.init_std;
        let embedding = EmbeddingSpace::new(&mut params, embedding, item_features, config.d, std, &mut rng)?;
        let ise = SessionEncoder::new(&mut params, &config.ise, config.d, std, &mut rng)?;
        let sse = SequenceEncoder::new(&mut params, &config.sse, config.d, std, &mut rng)?;
        Ok(Self {
            config,
            params,
            embedding,
            ise,
            sse,
        })
    }

    pub fn num_items(&self) -> usize {
        self.embedding.num_items()
    }

    /// Same layout with parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            embedding: self.embedding.clone(),
            ise: self.ise.clone(),
            sse: self.sse.clone(),
        }
    }

    /// The most recent sessions that fit the sequence encoder.
    pub fn context_window<'s>(&self, sessions: &'s [Session]) -> &'s [Session] {
        let max = self.config.sse.max_positions;
        &sessions[sessions.len().saturating_sub(max)..]
    }

    /// Fused input vectors for every interaction in `sessions`, in order, and
    /// the per-session lengths.
    pub fn embed_interactions(&self, g: &mut Graph<'_, T>, sessions: &[Session]) -> Result<(Var, Vec<usize>)> {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut lengths = Vec::with_capacity(sessions.len());
        for s in sessions {
            lengths.push(s.items.len());
            for it in &s.items {
                if it.item as usize >= self.num_items() {
                    return Err(Error::OutOfVocabulary {
                        table: "item".into(),
                        id: it.item as usize,
                        size: self.num_items(),
                    });
                }
                ids.push(it.item);
                rows.push(self.embedding.row_for(it.item, it.polarity));
            }
        }
        let vecs = self.embedding.embed_items(g, &ids, &rows)?;
        Ok((vecs, lengths))
    }

    /// `m × d` per-position user-interest vectors; row `i` summarizes
    /// sessions `0..=i`.
    pub fn encode_user(&self, g: &mut Graph<'_, T>, sessions: &[Session], ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        if sessions.is_empty() {
            return Err(Error::Invalid("user has no sessions to encode".into()));
        }
        let (items, lengths) = self.embed_interactions(g, sessions)?;
        let tokens = self.ise.encode_sessions(g, items, &lengths, ctx)?;
        self.sse.encode_sequence(g, tokens, ctx)
    }

    /// Item-level pipeline: every interaction is its own token and the
    /// session encoder is skipped.
    pub fn encode_items_flat(
        &self,
        g: &mut Graph<'_, T>,
        sessions: &[Session],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let (items, _) = self.embed_interactions(g, sessions)?;
        self.sse.encode_sequence(g, items, ctx)
    }

    /// Inference-time user vector from the most recent context window.
    pub fn user_vector(&self, sessions: &[Session]) -> Result<Vec<T>> {
        let mut g = Graph::inference(&self.params);
        let out = self.encode_user(&mut g, self.context_window(sessions), &mut ForwardCtx::eval())?;
        let value = g.value(out);
        Ok(value.row(value.rows() - 1).to_vec())
    }

    /// All catalog-side scoring vectors, `|V| × d`.
    pub fn item_vectors(&self) -> Result<crate::tensor::Tensor<T>> {
        let mut g = Graph::inference(&self.params);
        let v = self.embedding.output_item_vectors(&mut g)?;
        Ok(g.value(v).clone())
    }
}
