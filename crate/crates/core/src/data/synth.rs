//! Synthetic two-modality dataset with informative class semantics.
//!
//! Each class gets a unit semantic vector drawn from a low-rank subspace, a
//! latent that is a fixed linear map of that vector, and one prototype per
//! modality obtained through a modality-specific random linear map of the
//! latent. Items repeat the prototype at every location with independent
//! Gaussian noise. Semantically close classes therefore have close latents
//! and close prototypes in both modalities.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::features::{FeatureItem, FeatureSet, FeatureStore, Modality};
use super::semantics::SemanticTable;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub n_classes: usize,
    /// Items per class and modality.
    pub per_class: usize,
    pub locations: usize,
    pub channels: usize,
    pub semantic_dim: usize,
    pub latent_dim: usize,
    /// Rank of the subspace semantic vectors are drawn from.
    pub semantic_rank: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_classes: 10,
            per_class: 50,
            locations: 4,
            channels: 32,
            semantic_dim: 32,
            latent_dim: 16,
            semantic_rank: 4,
            noise: 0.2,
            seed: 0,
        }
    }
}

/// Generated data plus the hidden class latents (rows in class-id order).
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub store: FeatureStore,
    pub semantics: SemanticTable,
    pub latents: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

/// `latents[c] = projection · semantics[c]`, one class per row.
pub(crate) fn latents_from_semantics(semantics: &Array2<f64>, projection: &Array2<f64>) -> Array2<f64> {
    semantics.dot(&projection.t())
}

pub fn synth_dataset(p: &SynthParams) -> Result<Synthetic> {
    if p.n_classes == 0
        || p.per_class == 0
        || p.locations == 0
        || p.channels == 0
        || p.semantic_dim == 0
        || p.latent_dim == 0
        || p.semantic_rank == 0
    {
        return Err(Error::Config("synthetic dataset sizes must be positive".into()));
    }
    if !p.noise.is_finite() || p.noise < 0.0 {
        return Err(Error::Config(format!("noise must be nonnegative, got {}", p.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let basis = gaussian(&mut rng, p.semantic_dim, p.semantic_rank, 1.0);
    let coords = gaussian(&mut rng, p.n_classes, p.semantic_rank, 1.0);
    let mut semantics = coords.dot(&basis.t());
    for mut row in semantics.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }

    let projection = gaussian(&mut rng, p.latent_dim, p.semantic_dim, 1.0);
    let latents = latents_from_semantics(&semantics, &projection);

    let scale = 1.0 / (p.latent_dim as f64).sqrt();
    let to_sketch = gaussian(&mut rng, p.channels, p.latent_dim, scale);
    let to_image = gaussian(&mut rng, p.channels, p.latent_dim, scale);

    let mut class_names = BTreeMap::new();
    let mut table = SemanticTable::new(p.semantic_dim);
    for c in 0..p.n_classes {
        class_names.insert(c as u32, format!("class_{c:03}"));
        table.insert(c as u32, semantics.row(c).to_vec())?;
    }

    let mut sets = Vec::with_capacity(2);
    for (modality, map) in [(Modality::Sketch, &to_sketch), (Modality::Image, &to_image)] {
        let protos = latents.dot(&map.t());
        let mut set = FeatureSet::new(modality, p.locations, p.channels);
        for c in 0..p.n_classes {
            for k in 0..p.per_class {
                let mut data = Vec::with_capacity(p.locations * p.channels);
                for _ in 0..p.locations {
                    for ch in 0..p.channels {
                        let z: f64 = rng.sample(StandardNormal);
                        data.push((protos[[c, ch]] + p.noise * z) as f32);
                    }
                }
                set.push(FeatureItem {
                    id: (c * p.per_class + k) as u64,
                    class: c as u32,
                    data,
                })?;
            }
        }
        sets.push(set);
    }
    let images = sets.pop().expect("two modalities");
    let sketches = sets.pop().expect("two modalities");

    Ok(Synthetic {
        store: FeatureStore::new(sketches, images, class_names)?,
        semantics: table,
        latents,
    })
}
