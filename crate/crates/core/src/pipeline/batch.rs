//! Category-coherent mini-batches and the in-batch semantic adjacency.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::data::{FeatureSet, FeatureStore, SemanticTable, ZeroShotSplit};
use crate::error::{Error, Result};

/// `N_B` sketch/image pairs that share a label, with their class semantics.
///
/// Feature maps are stacked: item `i` occupies rows
/// `i·L .. (i+1)·L` of the corresponding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub sketch_feats: Tensor,
    pub sketch_locations: usize,
    pub image_feats: Tensor,
    pub image_locations: usize,
    pub semantics: Tensor,
    pub labels: Vec<u32>,
    /// Indices into the training set's sketch and image lists.
    pub sketch_items: Vec<usize>,
    pub image_items: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Seen-class training data indexed by class.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub sketches: FeatureSet,
    pub images: FeatureSet,
    pub semantics: SemanticTable,
    classes: Vec<u32>,
    by_class: BTreeMap<u32, (Vec<usize>, Vec<usize>)>,
}

impl TrainingSet {
    /// Builds the training set from a store that must contain seen classes
    /// only. Any item from an unseen class is a hard error.
    pub fn new(store: &FeatureStore, semantics: &SemanticTable, split: &ZeroShotSplit) -> Result<Self> {
        split.validate()?;
        let mut leaked: Vec<u32> = Vec::new();
        let mut by_class: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (which, set) in [&store.sketches, &store.images].into_iter().enumerate() {
            for (idx, item) in set.items.iter().enumerate() {
                if split.unseen.contains(&item.class) {
                    leaked.push(item.class);
                    continue;
                }
                if !split.seen.contains(&item.class) {
                    return Err(Error::Dataset(format!(
                        "item {} has class {} outside the split",
                        item.id, item.class
                    )));
                }
                let entry = by_class.entry(item.class).or_default();
                if which == 0 {
                    entry.0.push(idx);
                } else {
                    entry.1.push(idx);
                }
            }
        }
        if !leaked.is_empty() {
            leaked.sort_unstable();
            leaked.dedup();
            return Err(Error::Leakage(leaked));
        }
        Self::from_parts(store.sketches.clone(), store.images.clone(), semantics, by_class)
    }

    fn from_parts(
        sketches: FeatureSet,
        images: FeatureSet,
        semantics: &SemanticTable,
        by_class: BTreeMap<u32, (Vec<usize>, Vec<usize>)>,
    ) -> Result<Self> {
        for (class, (sk, im)) in &by_class {
            if sk.is_empty() || im.is_empty() {
                return Err(Error::Dataset(format!(
                    "class {class} has {} sketches and {} images; both modalities are required",
                    sk.len(),
                    im.len()
                )));
            }
            if semantics.get(*class).is_none() {
                return Err(Error::Dataset(format!("class {class} has no semantic vector")));
            }
        }
        if by_class.is_empty() {
            return Err(Error::Dataset("training set has no classes".into()));
        }
        let mut table = SemanticTable::new(semantics.dim);
        for class in by_class.keys() {
            table.insert(*class, semantics.get(*class).expect("checked").to_vec())?;
        }
        Ok(Self {
            sketches,
            images,
            semantics: table,
            classes: by_class.keys().copied().collect(),
            by_class,
        })
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }
}

fn stack(set: &FeatureSet, picks: &[usize]) -> Tensor {
    let width = set.channels;
    let rows = picks.len() * set.locations;
    let mut out = Array2::zeros((rows, width));
    for (slot, &idx) in picks.iter().enumerate() {
        let data = &set.items[idx].data;
        for loc in 0..set.locations {
            let mut row = out.row_mut(slot * set.locations + loc);
            for (dst, &src) in row.iter_mut().zip(&data[loc * width..(loc + 1) * width]) {
                *dst = src as f64;
            }
        }
    }
    out
}

/// Draws `n_b` classes with replacement, then one sketch and one image from
/// each drawn class.
pub fn sample_batch(set: &TrainingSet, n_b: usize, rng: &mut impl Rng) -> Result<TripletBatch> {
    if n_b == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut labels = Vec::with_capacity(n_b);
    let mut sketch_items = Vec::with_capacity(n_b);
    let mut image_items = Vec::with_capacity(n_b);
    for _ in 0..n_b {
        let class = set.classes[rng.random_range(0..set.classes.len())];
        let (sk, im) = &set.by_class[&class];
        sketch_items.push(sk[rng.random_range(0..sk.len())]);
        image_items.push(im[rng.random_range(0..im.len())]);
        labels.push(class);
    }
    let mut semantics = Array2::zeros((n_b, set.semantics.dim));
    for (i, class) in labels.iter().enumerate() {
        for (dst, &src) in semantics
            .row_mut(i)
            .iter_mut()
            .zip(set.semantics.get(*class).expect("validated"))
        {
            *dst = src;
        }
    }
    Ok(TripletBatch {
        sketch_feats: stack(&set.sketches, &sketch_items),
        sketch_locations: set.sketches.locations,
        image_feats: stack(&set.images, &image_items),
        image_locations: set.images.locations,
        semantics,
        labels,
        sketch_items,
        image_items,
    })
}

/// Stacks every item of a feature set, in order.
pub(crate) fn stack_all(set: &FeatureSet, range: std::ops::Range<usize>) -> Tensor {
    let picks: Vec<usize> = range.collect();
    stack(set, &picks)
}

/// `A[j][k] = exp(−‖s_j − s_k‖² / t)`, exactly symmetric with unit diagonal.
pub fn build_adjacency(semantics: &Tensor, t: f64) -> Result<Tensor> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::Config(format!("adjacency bandwidth t must be positive, got {t}")));
    }
    let n = semantics.nrows();
    let mut a = Array2::zeros((n, n));
    for j in 0..n {
        a[[j, j]] = 1.0;
        for k in (j + 1)..n {
            let d2: f64 = semantics
                .row(j)
                .iter()
                .zip(semantics.row(k).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let v = (-d2 / t).exp();
            a[[j, k]] = v;
            a[[k, j]] = v;
        }
    }
    Ok(a)
}
