//! Datasets, file formats, the cold-start split protocol, and a synthetic
//! multimodal generator.

mod io;
mod split;
mod synth;

pub use io::{
    load_dataset, read_feature_matrix, read_id_list, read_interactions_file, save_dataset,
    write_feature_matrix, write_id_list, write_interactions_file, Manifest, ModeEntry,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use split::{make_cold_split, ColdSplit, SplitParams, SplitSummary};
pub use synth::{generate_synthetic, SynthConfig};

use crate::compute::ops::l2_normalize_rowwise;
use crate::compute::Tensor2D;
use crate::error::{Error, Result};
use crate::model::InteractionMatrix;

/// One content modality: a dense `|I| × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMode {
    pub name: String,
    pub features: Tensor2D<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub interactions: InteractionMatrix,
    pub modes: Vec<FeatureMode>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Duplicate `(user, item)` lines dropped while loading.
    pub duplicates_collapsed: usize,
    inputs: Vec<Tensor2D<f32>>,
}

impl Dataset {
    /// Validates shapes and precomputes the per-mode L2-normalized encoder
    /// inputs. `modes` keep the features exactly as given.
    pub fn new(
        name: impl Into<String>,
        interactions: InteractionMatrix,
        modes: Vec<FeatureMode>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        let n_items = interactions.n_items();
        if modes.is_empty() {
            return Err(Error::InvalidArgument("dataset has no feature modes".into()));
        }
        if item_ids.len() != n_items || user_ids.len() != interactions.n_users() {
            return Err(Error::InvalidArgument(format!(
                "id maps ({} users, {} items) disagree with interactions ({}x{})",
                user_ids.len(),
                item_ids.len(),
                interactions.n_users(),
                n_items
            )));
        }
        for m in &modes {
            if m.features.rows() != n_items {
                return Err(Error::DimensionMismatch {
                    mode: m.name.clone(),
                    detail: format!("{} feature rows for {} items", m.features.rows(), n_items),
                });
            }
        }
        let inputs = modes.iter().map(|m| l2_normalize_rowwise(&m.features).0).collect();
        Ok(Dataset {
            name: name.into(),
            interactions,
            modes,
            user_ids,
            item_ids,
            duplicates_collapsed: 0,
            inputs,
        })
    }

    pub fn n_users(&self) -> usize {
        self.interactions.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.interactions.n_items()
    }

    pub fn mode_dims(&self) -> Vec<usize> {
        self.modes.iter().map(|m| m.features.cols()).collect()
    }

    /// Normalized encoder inputs for all items, one tensor per mode.
    pub fn inputs(&self) -> &[Tensor2D<f32>] {
        &self.inputs
    }

    /// Normalized encoder inputs for the given items.
    pub fn gather_inputs(&self, items: &[usize]) -> Vec<Tensor2D<f32>> {
        self.inputs.iter().map(|x| x.gather_rows(items)).collect()
    }
}
