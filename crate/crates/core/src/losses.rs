//! Metric-learning and distillation objectives with analytic gradients.
//!
//! All per-embedding gradients are with respect to the embedding itself;
//! [`session_loss`] chains them through the network with
//! [`EmbeddingModel::backward`].

use serde::{Deserialize, Serialize};

use crate::dct::{group_partition, DctBasis};
use crate::embed::{EmbeddingModel, GradientSet};
use crate::error::{Error, Result};
use crate::linalg::{distance, norm, sub};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 0.5 }
    }
}

/// One non-negative weight per contiguous frequency group, low to high.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FrequencyWeights {
    gamma: Vec<f64>,
}

impl FrequencyWeights {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::invalid("frequency weights need at least one group"));
        }
        if gamma.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::invalid("frequency weights must be finite and non-negative"));
        }
        if !gamma.iter().any(|g| *g > 0.0) {
            return Err(Error::invalid("at least one frequency weight must be positive"));
        }
        Ok(Self { gamma })
    }

    /// Weight 1 on the lowest group only.
    pub fn low_pass(n_groups: usize) -> Result<Self> {
        Self::new((0..n_groups).map(|g| if g == 0 { 1.0 } else { 0.0 }).collect())
    }

    /// Weight 1 on every group but the lowest. A single group keeps weight 1.
    pub fn high_pass(n_groups: usize) -> Result<Self> {
        if n_groups == 1 {
            return Self::uniform(1);
        }
        Self::new((0..n_groups).map(|g| if g == 0 { 0.0 } else { 1.0 }).collect())
    }

    pub fn uniform(n_groups: usize) -> Result<Self> {
        Self::new(vec![1.0; n_groups])
    }

    /// `2^{-g}` for group `g` (zero-based).
    pub fn geometric(n_groups: usize) -> Result<Self> {
        Self::new((0..n_groups).map(|g| 0.5f64.powi(g as i32)).collect())
    }

    pub fn one_hot(n_groups: usize, group: usize) -> Result<Self> {
        if group >= n_groups {
            return Err(Error::invalid(format!("group {group} out of range for {n_groups} groups")));
        }
        Self::new((0..n_groups).map(|g| if g == group { 1.0 } else { 0.0 }).collect())
    }

    pub fn n_groups(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }
}

impl TryFrom<Vec<f64>> for FrequencyWeights {
    type Error = Error;
    fn try_from(gamma: Vec<f64>) -> Result<Self> {
        Self::new(gamma)
    }
}

impl From<FrequencyWeights> for Vec<f64> {
    fn from(w: FrequencyWeights) -> Self {
        w.gamma
    }
}

/// Which regularizer ties the current model to its previous snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distillation {
    /// Plain L2 distance between current and previous embeddings.
    Unified,
    /// Group-weighted L2 distances between DCT spectra.
    Frequency(FrequencyWeights),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub triplet: TripletConfig,
    pub distillation: Distillation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            triplet: TripletConfig::default(),
            distillation: Distillation::Unified,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

/// `max(0, d₊ − d₋ + r)` over non-squared Euclidean distances.
///
/// The gradient is zero when the hinge is inactive or exactly at the kink,
/// and each distance term contributes nothing when its distance is zero.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    cfg: &TripletConfig,
) -> Result<TripletOutput> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::invalid("triplet embeddings differ in length"));
    }
    let n = anchor.len();
    let ap = sub(anchor, positive);
    let an = sub(anchor, negative);
    let d_pos = norm(&ap);
    let d_neg = norm(&an);
    let margin_term = d_pos - d_neg + cfg.margin;
    let mut out = TripletOutput {
        loss: margin_term.max(0.0),
        grad_anchor: vec![0.0; n],
        grad_positive: vec![0.0; n],
        grad_negative: vec![0.0; n],
    };
    if margin_term <= 0.0 {
        return Ok(out);
    }
    if d_pos > 0.0 {
        for k in 0..n {
            let u = ap[k] / d_pos;
            out.grad_anchor[k] += u;
            out.grad_positive[k] -= u;
        }
    }
    if d_neg > 0.0 {
        for k in 0..n {
            let u = an[k] / d_neg;
            out.grad_anchor[k] -= u;
            out.grad_negative[k] += u;
        }
    }
    Ok(out)
}

/// `‖z_t − z_prev‖₂` and its gradient with respect to `z_t`.
pub fn unified_distill(current: &[f64], previous: &[f64]) -> Result<(f64, Vec<f64>)> {
    if current.len() != previous.len() {
        return Err(Error::invalid("distillation embeddings differ in length"));
    }
    let diff = sub(current, previous);
    let d = norm(&diff);
    if d == 0.0 {
        return Ok((0.0, vec![0.0; diff.len()]));
    }
    Ok((d, diff.iter().map(|v| v / d).collect()))
}

/// Frequency-aware distillation for a fixed embedding length and weight profile.
#[derive(Clone, Debug)]
pub struct FrequencyDistiller {
    basis: DctBasis,
    groups: Vec<(usize, usize)>,
    gamma: Vec<f64>,
}

impl FrequencyDistiller {
    pub fn new(dim: usize, weights: &FrequencyWeights) -> Result<Self> {
        Ok(Self {
            basis: DctBasis::new(dim)?,
            groups: group_partition(dim, weights.n_groups())?,
            gamma: weights.gamma().to_vec(),
        })
    }

    /// `Σ_g γ_g ‖(T z_t − T z_prev)_g‖₂` and its gradient with respect to `z_t`.
    pub fn eval(&self, current: &[f64], previous: &[f64]) -> Result<(f64, Vec<f64>)> {
        if current.len() != previous.len() || current.len() != self.basis.len() {
            return Err(Error::invalid(format!(
                "frequency distillation expects embeddings of length {}",
                self.basis.len()
            )));
        }
        // T is linear, so T z_t − T z_prev = T (z_t − z_prev).
        let spectral = self.basis.forward(&sub(current, previous))?;
        let mut loss = 0.0;
        let mut grad_spectral = vec![0.0; spectral.len()];
        for (&(s, e), &gamma) in self.groups.iter().zip(&self.gamma) {
            if gamma == 0.0 {
                continue;
            }
            let n = norm(&spectral[s..e]);
            loss += gamma * n;
            if n > 0.0 {
                for k in s..e {
                    grad_spectral[k] = gamma * spectral[k] / n;
                }
            }
        }
        let grad = self.basis.inverse(&grad_spectral)?;
        Ok((loss, grad))
    }
}

pub fn freq_distill(current: &[f64], previous: &[f64], weights: &FrequencyWeights) -> Result<(f64, Vec<f64>)> {
    if current.len() != previous.len() {
        return Err(Error::invalid("distillation embeddings differ in length"));
    }
    FrequencyDistiller::new(current.len(), weights)?.eval(current, previous)
}

/// Value and parameter gradients of the combined objective on one mini-batch.
#[derive(Clone, Debug)]
pub struct SessionLoss {
    pub total: f64,
    pub triplet: f64,
    pub distill: f64,
    pub n_triplets: usize,
    pub grads: GradientSet,
}

/// Anchor/positive/negative batch indices.
pub type Triplet = (usize, usize, usize);

/// Every same-class pair `(a, p)` paired with the closest different-class
/// sample to `a` (lowest index on ties).
pub fn mine_triplets(embeddings: &[Vec<f64>], labels: &[usize]) -> Vec<Triplet> {
    let mut triplets = Vec::new();
    for a in 0..embeddings.len() {
        let mut hardest: Option<(usize, f64)> = None;
        for (n, z) in embeddings.iter().enumerate() {
            if labels[n] == labels[a] {
                continue;
            }
            let d = distance(&embeddings[a], z);
            if hardest.is_none_or(|(_, best)| d < best) {
                hardest = Some((n, d));
            }
        }
        let Some((neg, _)) = hardest else { continue };
        for p in 0..embeddings.len() {
            if p != a && labels[p] == labels[a] {
                triplets.push((a, p, neg));
            }
        }
    }
    triplets
}

/// Mean mined-triplet loss plus `λ` times the mean distillation loss against
/// `previous`, with gradients for every parameter of `model`.
pub fn session_loss(
    inputs: &[&[f64]],
    labels: &[usize],
    model: &EmbeddingModel,
    previous: Option<&EmbeddingModel>,
    cfg: &LossConfig,
) -> Result<SessionLoss> {
    if inputs.len() != labels.len() {
        return Err(Error::invalid("inputs and labels differ in length"));
    }
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::invalid("lambda must be finite and non-negative"));
    }
    if cfg.triplet.margin < 0.0 {
        return Err(Error::invalid("margin must be non-negative"));
    }
    let distilling = cfg.lambda > 0.0;
    if distilling && previous.is_none() {
        return Err(Error::state("distillation requested without a previous model"));
    }

    let embeddings = model.forward_batch(inputs)?;
    let dim = model.embed_dim();
    let mut out_grads = vec![vec![0.0; dim]; inputs.len()];

    let triplets = mine_triplets(&embeddings, labels);
    let mut triplet_total = 0.0;
    if !triplets.is_empty() {
        let scale = 1.0 / triplets.len() as f64;
        for &(a, p, n) in &triplets {
            let t = triplet_loss(&embeddings[a], &embeddings[p], &embeddings[n], &cfg.triplet)?;
            triplet_total += t.loss;
            for k in 0..dim {
                out_grads[a][k] += scale * t.grad_anchor[k];
                out_grads[p][k] += scale * t.grad_positive[k];
                out_grads[n][k] += scale * t.grad_negative[k];
            }
        }
        triplet_total *= scale;
    }

    let mut distill_total = 0.0;
    if let (true, Some(prev)) = (distilling, previous) {
        if prev.embed_dim() != dim {
            return Err(Error::invalid("previous model has a different embedding size"));
        }
        let distiller = match &cfg.distillation {
            Distillation::Unified => None,
            Distillation::Frequency(w) => Some(FrequencyDistiller::new(dim, w)?),
        };
        let scale = cfg.lambda / inputs.len() as f64;
        for (i, x) in inputs.iter().enumerate() {
            let target = prev.forward(x)?;
            let (loss, grad) = match &distiller {
                None => unified_distill(&embeddings[i], &target)?,
                Some(d) => d.eval(&embeddings[i], &target)?,
            };
            distill_total += loss;
            for (g, v) in out_grads[i].iter_mut().zip(grad) {
                *g += scale * v;
            }
        }
        distill_total /= inputs.len() as f64;
    }

    let grads = model.backward(inputs, &out_grads)?;
    Ok(SessionLoss {
        total: triplet_total + cfg.lambda * distill_total,
        triplet: triplet_total,
        distill: distill_total,
        n_triplets: triplets.len(),
        grads,
    })
}
