//! Accuracy bookkeeping, average forgetting and the per-frequency-group
//! forgetting profile.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FrequencyWeights;
use crate::protocol::{Dataset, SessionPlan};
use crate::trainer::{run_experiment_with_base, train_base_for_plan, ExperimentSettings, Mode};

/// Lower-triangular accuracy table: row `k` (1-based) holds the accuracy on
/// each task `j ≤ k` measured after session `k`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the row for the next session; it must hold one entry per seen task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let k = self.rows.len() + 1;
        if row.len() != k {
            return Err(Error::invalid(format!(
                "row for session {k} needs {k} entries, got {}",
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("accuracies must lie in [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn sessions(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy on task `j` after session `k`, both 1-based.
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.rows[k - 1][j - 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("session,task,accuracy\n");
        for (k, row) in self.rows.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{a}", k + 1, j + 1);
            }
        }
        out
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty prediction set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// `F_k = 1/(k−1) Σ_{j<k} [max_{j≤l<k} a[l][j] − a[k][j]]`. Not clamped:
/// backward transfer can make it negative.
pub fn average_forgetting(m: &AccuracyMatrix, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::invalid("forgetting needs at least two sessions"));
    }
    if k > m.sessions() {
        return Err(Error::invalid(format!(
            "session {k} not recorded (have {})",
            m.sessions()
        )));
    }
    let total: f64 = (1..k)
        .map(|j| {
            let best = (j..k).map(|l| m.get(l, j)).fold(f64::NEG_INFINITY, f64::max);
            best - m.get(k, j)
        })
        .sum();
    Ok(total / (k - 1) as f64)
}

/// `F_k` for every `k ≥ 2`.
pub fn forgetting_curve(m: &AccuracyMatrix) -> Vec<f64> {
    (2..=m.sessions())
        .map(|k| average_forgetting(m, k).expect("k within recorded range"))
        .collect()
}

pub fn forgetting_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("session,forgetting\n");
    for (i, f) in curve.iter().enumerate() {
        let _ = writeln!(out, "{},{f}", i + 2);
    }
    out
}

pub fn freq_profile_csv(profile: &[f64]) -> String {
    let mut out = String::from("group,forgetting\n");
    for (g, f) in profile.iter().enumerate() {
        let _ = writeln!(out, "{},{f}", g + 1);
    }
    out
}

/// Fractional ranks (1-based); ties share their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; zero when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of length ≥ 2"));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Final-session average forgetting of single-lineage runs that each distill
/// exactly one frequency group, ordered low to high frequency.
pub fn frequency_forgetting_profile(
    dataset: &Dataset,
    plan: &SessionPlan,
    settings: &ExperimentSettings,
    n_groups: usize,
) -> Result<Vec<f64>> {
    if n_groups < 2 {
        return Err(Error::invalid("a frequency profile needs at least two groups"));
    }
    if plan.n_sessions() < 2 {
        return Err(Error::invalid("a frequency profile needs incremental sessions"));
    }
    let base = train_base_for_plan(dataset, plan, &settings.train)?;
    profile_from_base(dataset, plan, settings, n_groups, &base)
}

/// Same as [`frequency_forgetting_profile`] with a pre-trained base model.
pub fn profile_from_base(
    dataset: &Dataset,
    plan: &SessionPlan,
    settings: &ExperimentSettings,
    n_groups: usize,
    base: &crate::embed::EmbeddingModel,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    (0..n_groups)
        .into_par_iter()
        .map(|g| {
            let mut s = settings.clone();
            s.train.mode = Mode::Intra;
            s.train.n_groups = n_groups;
            s.train.gamma_intra = Some(FrequencyWeights::one_hot(n_groups, g)?);
            s.a_sweep.clear();
            let record = run_experiment_with_base(dataset, plan, &s, base, &mut |_| {})?;
            record
                .final_forgetting
                .ok_or_else(|| Error::state("run produced no forgetting value"))
        })
        .collect()
}
