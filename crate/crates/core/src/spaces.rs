//! Frozen class centers, nearest-class-mean classification and slow/fast
//! feature space composition.
//!
//! A composite feature is `[z_slow ‖ z_fast]`. In simple mode the metric is
//! `blockdiag((1−a)·I, a·I)`, so `a = 0` uses only the slow space and `a = 1`
//! only the fast one. In PCA mode both halves go through the same projection
//! `P` and the metric is `QᵀQ` with `Q = blockdiag(P, P)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingModel;
use crate::error::{Error, Result};
use crate::linalg::{mean, pca_fit, squared_distance, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCenter {
    pub u_slow: Vec<f64>,
    pub u_fast: Vec<f64>,
    pub introduced_at: usize,
}

impl ClassCenter {
    pub fn composite(&self) -> Vec<f64> {
        compose(&self.u_slow, &self.u_fast)
    }
}

/// Insert-once store of class centers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CenterRegistry {
    centers: BTreeMap<usize, ClassCenter>,
}

impl CenterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class_id: usize, center: ClassCenter) -> Result<()> {
        if center.u_slow.len() != center.u_fast.len() {
            return Err(Error::invalid("slow and fast centers differ in length"));
        }
        if let Some(existing) = self.centers.values().next() {
            if existing.u_slow.len() != center.u_slow.len() {
                return Err(Error::invalid("center length differs from registered centers"));
            }
        }
        if self.centers.contains_key(&class_id) {
            return Err(Error::state(format!("class {class_id} already has a frozen center")));
        }
        self.centers.insert(class_id, center);
        Ok(())
    }

    pub fn get(&self, class_id: usize) -> Option<&ClassCenter> {
        self.centers.get(&class_id)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ClassCenter)> {
        self.centers.iter().map(|(c, v)| (*c, v))
    }

    /// Length of one half of a composite center.
    pub fn half_dim(&self) -> Option<usize> {
        self.centers.values().next().map(|c| c.u_slow.len())
    }

    pub fn slow_centers(&self) -> BTreeMap<usize, Vec<f64>> {
        self.iter().map(|(c, v)| (c, v.u_slow.clone())).collect()
    }

    pub fn fast_centers(&self) -> BTreeMap<usize, Vec<f64>> {
        self.iter().map(|(c, v)| (c, v.u_fast.clone())).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Mean embedding of a class's samples under the slow and the fast model.
pub fn compute_centers(
    samples: &[&[f64]],
    slow: &EmbeddingModel,
    fast: &EmbeddingModel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot compute a center from zero samples"));
    }
    let u_slow = mean(&slow.forward_batch(samples)?)?;
    let u_fast = mean(&fast.forward_batch(samples)?)?;
    Ok((u_slow, u_fast))
}

/// Nearest center by Euclidean distance; ties go to the lowest class id.
pub fn ncm_classify(z: &[f64], centers: &BTreeMap<usize, Vec<f64>>) -> Result<usize> {
    if centers.is_empty() {
        return Err(Error::state("no class centers registered"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (&c, u) in centers {
        if u.len() != z.len() {
            return Err(Error::invalid(format!(
                "embedding has {} entries, center of class {c} has {}",
                z.len(),
                u.len()
            )));
        }
        let d = squared_distance(z, u);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((c, d));
        }
    }
    Ok(best.unwrap().0)
}

/// Concatenation `[z_slow ‖ z_fast]`.
pub fn compose(z_slow: &[f64], z_fast: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(z_slow.len() + z_fast.len());
    out.extend_from_slice(z_slow);
    out.extend_from_slice(z_fast);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositionMode {
    Simple,
    Pca,
}

/// User-facing composition settings; PCA projections are fit at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionConfig {
    pub mode: CompositionMode,
    /// Weight of the fast space in simple mode.
    pub a: f64,
    /// Projection rows in PCA mode; defaults to half the embedding size.
    #[serde(default)]
    pub pca_target_dim: Option<usize>,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            mode: CompositionMode::Simple,
            a: 0.5,
            pca_target_dim: None,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) {
            return Err(Error::invalid("composition scalar a must lie in [0, 1]"));
        }
        if self.pca_target_dim == Some(0) {
            return Err(Error::invalid("pca_target_dim must be positive"));
        }
        Ok(())
    }
}

/// Metric used for classification in the composite space.
#[derive(Clone, Debug, PartialEq)]
pub enum Composition {
    /// `A = blockdiag((1−a)·I, a·I)`.
    Simple { a: f64 },
    /// `A = QᵀQ` with `Q = blockdiag(P, P)`.
    Pca { projection: Matrix },
    /// Any symmetric positive semi-definite `A` over the full composite vector.
    Metric(Matrix),
}

impl Composition {
    pub fn identity(composite_dim: usize) -> Self {
        Composition::Metric(Matrix::identity(composite_dim))
    }
}

impl Composition {
    /// Quadratic form `(z̃ − ũ)ᵀ A (z̃ − ũ)`.
    pub fn quadratic_form(&self, z: &[f64], u: &[f64]) -> Result<f64> {
        if z.len() != u.len() || !z.len().is_multiple_of(2) {
            return Err(Error::invalid("composite vectors must have equal, even lengths"));
        }
        let half = z.len() / 2;
        match self {
            Composition::Simple { a } => {
                let slow = squared_distance(&z[..half], &u[..half]);
                let fast = squared_distance(&z[half..], &u[half..]);
                Ok((1.0 - a) * slow + a * fast)
            }
            Composition::Pca { projection } => {
                if projection.cols() != half {
                    return Err(Error::invalid(format!(
                        "projection expects {} features per space, got {half}",
                        projection.cols()
                    )));
                }
                let ds = projection.matvec(&crate::linalg::sub(&z[..half], &u[..half]))?;
                let df = projection.matvec(&crate::linalg::sub(&z[half..], &u[half..]))?;
                Ok(ds.iter().chain(&df).map(|v| v * v).sum())
            }
            Composition::Metric(a) => {
                if a.rows() != z.len() || a.cols() != z.len() {
                    return Err(Error::invalid(format!(
                        "metric is {}×{}, composite vectors have {} entries",
                        a.rows(),
                        a.cols(),
                        z.len()
                    )));
                }
                let d = crate::linalg::sub(z, u);
                Ok(crate::linalg::dot(&d, &a.matvec(&d)?))
            }
        }
    }
}

/// Argmin of the composite quadratic form over registered classes; ties go to
/// the lowest class id.
pub fn composite_classify(z: &[f64], registry: &CenterRegistry, composition: &Composition) -> Result<usize> {
    if registry.is_empty() {
        return Err(Error::state("no class centers registered"));
    }
    let half = registry.half_dim().unwrap();
    if z.len() != 2 * half {
        return Err(Error::invalid(format!(
            "composite feature has {} entries, registry expects {}",
            z.len(),
            2 * half
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for (c, center) in registry.iter() {
        let d = composition.quadratic_form(z, &center.composite())?;
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((c, d));
        }
    }
    Ok(best.unwrap().0)
}

/// Fits the shared projection on slow-space embeddings; the fast space reuses it.
pub fn fit_pca_composition(slow_pool: &[Vec<f64>], target_dim: usize) -> Result<Composition> {
    let projection = pca_fit(slow_pool, target_dim)?;
    Ok(Composition::Pca { projection })
}

/// Batch classifier that precomputes composite (or projected) centers once.
pub struct CompositeClassifier {
    composition: Composition,
    classes: Vec<usize>,
    centers: Vec<Vec<f64>>,
}

impl CompositeClassifier {
    pub fn new(registry: &CenterRegistry, composition: Composition) -> Result<Self> {
        if registry.is_empty() {
            return Err(Error::state("no class centers registered"));
        }
        let (classes, centers) = registry
            .iter()
            .map(|(c, center)| (c, center.composite()))
            .unzip();
        Ok(Self {
            composition,
            classes,
            centers,
        })
    }

    pub fn classify(&self, z_slow: &[f64], z_fast: &[f64]) -> Result<usize> {
        let z = compose(z_slow, z_fast);
        let mut best: Option<(usize, f64)> = None;
        for (c, u) in self.classes.iter().zip(&self.centers) {
            let d = self.composition.quadratic_form(&z, u)?;
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((*c, d));
            }
        }
        Ok(best.unwrap().0)
    }
}
