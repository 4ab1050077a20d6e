//! Self-contained model file: configuration, resolved shape, vocabularies and
//! parameter values, as JSON.

use std::path::Path;

use him_autograd::{Checkpoint, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::HimConfig;
use crate::data::{Dataset, Interaction, ItemMeta, Vocabulary};
use crate::error::{invalid, io_err, Result};
use crate::model::{HimModel, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub config: HimConfig,
    pub spec: ModelSpec,
    pub has_real_negatives: bool,
    /// users, items, categories, brands, shops, prices.
    pub vocabularies: [Vocabulary; 6],
    pub params: Checkpoint,
}

impl ModelCheckpoint {
    pub const VERSION: u32 = 1;

    pub fn capture<S: Scalar>(config: &HimConfig, model: &HimModel<S>, data: &Dataset) -> Self {
        Self {
            version: Self::VERSION,
            config: config.clone(),
            spec: model.spec.clone(),
            has_real_negatives: data.has_real_negatives,
            vocabularies: [
                data.users.clone(),
                data.items.clone(),
                data.categories.clone(),
                data.brands.clone(),
                data.shops.clone(),
                data.prices.clone(),
            ],
            params: model.store.to_checkpoint(),
        }
    }

    /// Rebuilds the model with the stored values.
    pub fn model<S: Scalar>(&self) -> Result<HimModel<S>> {
        let mut model = HimModel::new(self.spec.clone(), self.config.seed)?;
        model.store.load_checkpoint(&self.params)?;
        Ok(model)
    }

    /// Indexes `interactions` and `meta` with the stored item-side vocabularies
    /// (unknown ids map to PAD). Users are indexed afresh since the model has
    /// no per-user parameters.
    pub fn dataset(&self, interactions: &[Interaction], meta: &[ItemMeta]) -> Dataset {
        let [_, items, categories, brands, shops, prices] = &self.vocabularies;
        let mut users = Vocabulary::new("user");
        for i in interactions {
            users.insert(&i.user_id);
        }
        let mut data = Dataset::with_vocabularies(
            users,
            items.clone(),
            interactions,
            meta,
            self.has_real_negatives,
        );
        data.remap_meta(meta, [categories, brands, shops, prices]);
        data
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        if ckpt.version != Self::VERSION {
            return Err(invalid(
                "checkpoint",
                format!("unsupported version {}", ckpt.version),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}
