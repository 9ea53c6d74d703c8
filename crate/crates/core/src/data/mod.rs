//! Dataset containers: clean image batches, perturbation budgets and
//! poisoned clean/poison pairs.

mod cifar;
pub mod container;
mod toy;

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cifar::{load_cifar_format, CifarSplit};
pub use container::{load_dataset, save_dataset, save_dataset_with_meta, DatasetFile};
pub use toy::{make_toy_dataset, make_toy_split, ToyRecipe};

/// Tolerance used when checking stored pixels against a declared budget.
pub const BUDGET_TOLERANCE: f64 = 1e-6;

/// N images in `[0,1]` with class labels and stable identifiers.
///
/// Batches are immutable once built; every constructor validates the pixel
/// range, label range and id uniqueness.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pixels: Array4<f32>,
    labels: Vec<usize>,
    ids: Vec<String>,
    num_classes: usize,
}

impl ImageBatch {
    pub fn new(
        pixels: Array4<f32>,
        labels: Vec<usize>,
        ids: Vec<String>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = pixels.shape()[0];
        if labels.len() != n {
            return Err(Error::arg(format!(
                "labels length {} does not match {} images",
                labels.len(),
                n
            )));
        }
        if ids.len() != n {
            return Err(Error::arg(format!(
                "ids length {} does not match {} images",
                ids.len(),
                n
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::arg(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("pixel value {v} outside [0,1]")));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::arg(format!("duplicate sample id `{id}`")));
            }
        }
        Ok(Self {
            pixels,
            labels,
            ids,
            num_classes,
        })
    }

    /// Same labels and ids, new pixels (clamped to `[0,1]`).
    pub fn with_pixels(&self, mut pixels: Array4<f32>) -> Result<Self> {
        if pixels.shape()[0] != self.len() {
            return Err(Error::arg(format!(
                "replacement pixels hold {} images, batch has {}",
                pixels.shape()[0],
                self.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel value".into()));
        }
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(Self {
            pixels,
            labels: self.labels.clone(),
            ids: self.ids.clone(),
            num_classes: self.num_classes,
        })
    }

    /// Rebuild from a flattened `N × C·H·W` model input.
    pub fn with_input(&self, input: &Array2<f64>) -> Result<Self> {
        let [_, c, h, w] = self.dims();
        let pixels = input
            .mapv(|v| v as f32)
            .into_shape_with_order((input.nrows(), c, h, w))
            .map_err(|e| Error::arg(format!("input reshape: {e}")))?;
        self.with_pixels(pixels)
    }

    pub fn empty_like(&self) -> Self {
        let [_, c, h, w] = self.dims();
        Self {
            pixels: Array4::zeros((0, c, h, w)),
            labels: Vec::new(),
            ids: Vec::new(),
            num_classes: self.num_classes,
        }
    }

    pub fn pixels(&self) -> &Array4<f32> {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.pixels.index_axis(Axis(0), i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[N, C, H, W]`
    pub fn dims(&self) -> [usize; 4] {
        let s = self.pixels.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.dims();
        [c, h, w]
    }

    /// Flattened `N × C·H·W` model input in f64.
    pub fn to_input(&self) -> Array2<f64> {
        let [n, c, h, w] = self.dims();
        let flat = self.pixels.mapv(f64::from);
        flat.into_shape_with_order((n, c * h * w))
            .expect("standard layout")
    }

    /// Sub-batch holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            pixels: self.pixels.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Concatenate two batches with matching image shape; ids must stay unique.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.image_shape() != other.image_shape() {
            return Err(Error::arg("cannot concatenate batches of different shape"));
        }
        let pixels = ndarray::concatenate(Axis(0), &[self.pixels.view(), other.pixels.view()])
            .map_err(|e| Error::arg(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.ids.clone();
        ids.extend(other.ids.iter().cloned());
        Self::new(
            pixels,
            labels,
            ids,
            self.num_classes.max(other.num_classes),
        )
    }

    /// Indices of the samples of each class, by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }
}

/// Norm family of a perturbation budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
    /// Counts spatial positions where any channel differs.
    L0,
    /// Any distortion allowed (non-additive generators).
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBudget {
    pub norm: Norm,
    /// Infinite for unbounded budgets; written as `null` since JSON has no infinity.
    #[serde(with = "infinite_as_null")]
    pub epsilon: f64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl PerturbationBudget {
    pub fn linf(epsilon: f64) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon,
        }
    }

    pub fn unbounded() -> Self {
        Self {
            norm: Norm::Unbounded,
            epsilon: f64::INFINITY,
        }
    }

    pub fn one_pixel() -> Self {
        Self {
            norm: Norm::L0,
            epsilon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.norm != Norm::Unbounded && !(self.epsilon >= 0.0) {
            return Err(Error::arg(format!(
                "budget epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Distance between two images under this budget's norm. Unbounded
    /// budgets report the L∞ distortion.
    pub fn distance(&self, a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>) -> f64 {
        image_distance(self.norm, a, b)
    }

    pub fn is_checked(&self) -> bool {
        self.norm != Norm::Unbounded
    }
}

pub fn image_distance(norm: Norm, a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>) -> f64 {
    match norm {
        Norm::Linf | Norm::Unbounded => a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
            .fold(0.0, f64::max),
        Norm::L2 => a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
            .sum::<f64>()
            .sqrt(),
        Norm::L0 => {
            let (c, h, w) = a.dim();
            let mut count = 0usize;
            for r in 0..h {
                for col in 0..w {
                    if (0..c).any(|ch| a[[ch, r, col]] != b[[ch, r, col]]) {
                        count += 1;
                    }
                }
            }
            count as f64
        }
    }
}

/// Clean/poison pairs plus crafting provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedDataset {
    clean: ImageBatch,
    poisoned: ImageBatch,
    budget: PerturbationBudget,
    generator_tag: String,
    generator_config: BTreeMap<String, serde_json::Value>,
}

impl PoisonedDataset {
    /// Validates id/label alignment and, for checked budgets, that every
    /// pair lies within `epsilon` (plus [`BUDGET_TOLERANCE`]).
    pub fn new(
        clean: ImageBatch,
        poisoned: ImageBatch,
        budget: PerturbationBudget,
        generator_tag: impl Into<String>,
        generator_config: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self> {
        budget.validate()?;
        if clean.ids != poisoned.ids {
            return Err(Error::Integrity(
                "clean and poisoned ids are not aligned".into(),
            ));
        }
        if clean.labels != poisoned.labels {
            return Err(Error::Integrity(
                "poisoned labels differ from clean labels".into(),
            ));
        }
        if clean.image_shape() != poisoned.image_shape() {
            return Err(Error::Integrity(
                "clean and poisoned image shapes differ".into(),
            ));
        }
        let ds = Self {
            clean,
            poisoned,
            budget,
            generator_tag: generator_tag.into(),
            generator_config,
        };
        if budget.is_checked() {
            for i in 0..ds.len() {
                let d = budget.distance(ds.poisoned.image(i), ds.clean.image(i));
                if d > budget.epsilon + BUDGET_TOLERANCE {
                    return Err(Error::Integrity(format!(
                        "sample `{}` violates {:?} budget {}: distance {}",
                        ds.clean.ids[i], budget.norm, budget.epsilon, d
                    )));
                }
            }
        }
        Ok(ds)
    }

    pub fn clean(&self) -> &ImageBatch {
        &self.clean
    }

    pub fn poisoned(&self) -> &ImageBatch {
        &self.poisoned
    }

    pub fn budget(&self) -> PerturbationBudget {
        self.budget
    }

    pub fn generator_tag(&self) -> &str {
        &self.generator_tag
    }

    pub fn generator_config(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.generator_config
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Aligned sub-dataset.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            clean: self.clean.select(indices),
            poisoned: self.poisoned.select(indices),
            budget: self.budget,
            generator_tag: self.generator_tag.clone(),
            generator_config: self.generator_config.clone(),
        }
    }

    /// Bypasses budget validation; used by loaders that report violations
    /// themselves.
    pub(crate) fn from_parts_unchecked(
        clean: ImageBatch,
        poisoned: ImageBatch,
        budget: PerturbationBudget,
        generator_tag: String,
        generator_config: BTreeMap<String, serde_json::Value>,
    ) -> Self {
        Self {
            clean,
            poisoned,
            budget,
            generator_tag,
            generator_config,
        }
    }
}
