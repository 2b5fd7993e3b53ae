//! Item embeddings: an ID table plus one table per discrete side feature,
//! concatenated and fused by a one-hidden-layer perceptron into width `d`.
//!
//! The same path produces input-side vectors (from interaction rows) and the
//! catalog-side vectors used for scoring, so the two are tied by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Polarity;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

/// A side-feature table: `vocab` rows of width `dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub num_items: usize,
    pub d_id: usize,
    /// Item attributes, looked up from the catalog for every row.
    pub features: Vec<FeatureSpec>,
    /// Width of the interaction polarity embedding; 0 disables it.
    /// Catalog-side rows always use the positive polarity.
    pub polarity_dim: usize,
}

impl EmbeddingConfig {
    pub fn fused_input_width(&self) -> usize {
        self.d_id + self.features.iter().map(|f| f.dim).sum::<usize>() + self.polarity_dim
    }

    /// Number of values in one row's feature list: item features, then the
    /// polarity index when enabled.
    pub fn row_width(&self) -> usize {
        self.features.len() + usize::from(self.polarity_dim > 0)
    }
}

pub fn polarity_index(p: Polarity) -> u32 {
    match p {
        Polarity::Positive => 0,
        Polarity::Negative => 1,
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingSpace {
    config: EmbeddingConfig,
    pub item_table: ParamId,
    pub feature_tables: Vec<ParamId>,
    pub polarity_table: Option<ParamId>,
    hidden: Linear,
    output: Linear,
    /// Catalog attribute values, `item_features[item][f]`.
    item_features: Vec<Vec<u32>>,
}

impl EmbeddingSpace {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: EmbeddingConfig,
        item_features: Vec<Vec<u32>>,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if item_features.len() != config.num_items {
            return Err(Error::Invalid(format!(
                "{} catalog feature rows for {} items",
                item_features.len(),
                config.num_items
            )));
        }
        for (i, row) in item_features.iter().enumerate() {
            check_row(&config.features, row, i)?;
        }
        let item_table = store.add_normal("embedding.item", config.num_items, config.d_id, std, true, rng);
        let feature_tables = config
            .features
            .iter()
            .map(|f| store.add_normal(format!("embedding.feature.{}", f.name), f.vocab, f.dim, std, true, rng))
            .collect();
        let polarity_table = (config.polarity_dim > 0)
            .then(|| store.add_normal("embedding.polarity", 2, config.polarity_dim, std, true, rng));
        let width = config.fused_input_width();
        let hidden = Linear::new(store, "embedding.fusion.hidden", width, 2 * d, true, std, rng);
        let output = Linear::new(store, "embedding.fusion.output", 2 * d, d, true, std, rng);
        Ok(Self {
            config,
            item_table,
            feature_tables,
            polarity_table,
            hidden,
            output,
            item_features,
        })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.config.num_items
    }

    pub fn item_features(&self) -> &[Vec<u32>] {
        &self.item_features
    }

    /// Catalog-side feature row for `item` (positive polarity).
    pub fn catalog_row(&self, item: u32) -> Vec<u32> {
        self.row_for(item, Polarity::Positive)
    }

    /// Input-side feature row for an interaction with `item`.
    pub fn row_for(&self, item: u32, polarity: Polarity) -> Vec<u32> {
        let mut row = self.item_features[item as usize].clone();
        if self.polarity_table.is_some() {
            row.push(polarity_index(polarity));
        }
        row
    }

    /// `E_v = MLP([E_id ‖ E_f1 ‖ … ‖ E_fc])` for each row.
    pub fn embed_items<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[u32],
        features: &[Vec<u32>],
    ) -> Result<Var> {
        if ids.len() != features.len() {
            return Err(Error::Invalid(format!(
                "{} ids but {} feature rows",
                ids.len(),
                features.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.num_items) {
            return Err(Error::OutOfVocabulary {
                table: "item".into(),
                id: bad as usize,
                size: self.config.num_items,
            });
        }
        let expected = self.config.row_width();
        for (i, row) in features.iter().enumerate() {
            if row.len() != expected {
                return Err(Error::Invalid(format!(
                    "row {i} has {} feature values, schema expects {expected}",
                    row.len()
                )));
            }
            check_row(&self.config.features, &row[..self.config.features.len()], i)?;
            if self.polarity_table.is_some() && row[expected - 1] > 1 {
                return Err(Error::OutOfVocabulary {
                    table: "polarity".into(),
                    id: row[expected - 1] as usize,
                    size: 2,
                });
            }
        }

        let table = g.param(self.item_table);
        let mut parts = vec![g.gather_rows(table, ids.iter().map(|&i| i as usize).collect())?];
        for (f, &tid) in self.feature_tables.iter().enumerate() {
            let table = g.param(tid);
            parts.push(g.gather_rows(table, features.iter().map(|r| r[f] as usize).collect())?);
        }
        if let Some(pid) = self.polarity_table {
            let table = g.param(pid);
            parts.push(g.gather_rows(table, features.iter().map(|r| r[expected - 1] as usize).collect())?);
        }
        let x = g.concat_cols(&parts)?;
        let h = self.hidden.forward(g, x)?;
        let h = g.gelu(h);
        self.output.forward(g, h)
    }

    /// Catalog-side vectors for `ids`.
    pub fn embed_catalog<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[u32]) -> Result<Var> {
        let rows: Vec<Vec<u32>> = ids
            .iter()
            .map(|&i| {
                if (i as usize) < self.config.num_items {
                    Ok(self.catalog_row(i))
                } else {
                    Err(Error::OutOfVocabulary {
                        table: "item".into(),
                        id: i as usize,
                        size: self.config.num_items,
                    })
                }
            })
            .collect::<Result<_>>()?;
        self.embed_items(g, ids, &rows)
    }

    /// All `|V| × d` scoring vectors.
    pub fn output_item_vectors<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let ids: Vec<u32> = (0..self.config.num_items as u32).collect();
        self.embed_catalog(g, &ids)
    }
}

fn check_row(specs: &[FeatureSpec], row: &[u32], at: usize) -> Result<()> {
    if row.len() != specs.len() {
        return Err(Error::Invalid(format!(
            "row {at} has {} item features, schema has {}",
            row.len(),
            specs.len()
        )));
    }
    for (spec, &v) in specs.iter().zip(row) {
        if v as usize >= spec.vocab {
            return Err(Error::OutOfVocabulary {
                table: spec.name.clone(),
                id: v as usize,
                size: spec.vocab,
            });
        }
    }
    Ok(())
}
