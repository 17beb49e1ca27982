//! Session lifecycle: base training, slow/fast lineage updates, center
//! registration and evaluation.
//!
//! Both lineages start from the single base model. Each then continues from,
//! and distills against, its own end-of-previous-session snapshot. Centers of
//! a class are computed once, at the end of the session that introduces it,
//! and never recomputed.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{Adam, EmbeddingModel};
use crate::error::{Error, Result};
use crate::losses::{session_loss, Distillation, FrequencyWeights, LossConfig, TripletConfig};
use crate::metrics::{accuracy, forgetting_curve, AccuracyMatrix};
use crate::protocol::{derive_seed, session_batch, Dataset, SessionBatch, SessionPlan};
use crate::spaces::{
    compute_centers, fit_pca_composition, ncm_classify, CenterRegistry, ClassCenter, Composition,
    CompositeClassifier, CompositionConfig, CompositionMode,
};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

const STREAM_INIT: u64 = 10;
const STREAM_BASE_BATCHES: u64 = 11;
const STREAM_SESSION_BATCHES: u64 = 12;

/// Ablation ladder: one or two feature spaces, unified or frequency-aware distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Unified,
    Intra,
    Inter,
    Mgsvf,
}

impl Mode {
    pub fn two_spaces(self) -> bool {
        matches!(self, Mode::Inter | Mode::Mgsvf)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Unified => "unified",
            Mode::Intra => "intra",
            Mode::Inter => "inter",
            Mode::Mgsvf => "mgsvf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Slow,
    Fast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Epochs for the base session and for every incremental session.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_slow: f64,
    pub lr_fast: f64,
    pub lambda: f64,
    pub margin: f64,
    pub n_groups: usize,
    /// Slow-lineage weights in `mgsvf` mode; defaults to weight on the lowest group only.
    pub gamma_slow: Option<FrequencyWeights>,
    /// Fast-lineage weights in `mgsvf` mode; defaults to every group but the lowest.
    pub gamma_fast: Option<FrequencyWeights>,
    /// Single-lineage weights in `intra` mode; defaults to `2^{-g}`.
    pub gamma_intra: Option<FrequencyWeights>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Mgsvf,
            hidden: vec![64, 64],
            embed_dim: 32,
            epochs: 50,
            batch_size: 32,
            lr_base: 1e-3,
            lr_slow: 1e-4,
            lr_fast: 1e-3,
            lambda: 1.0,
            margin: 0.5,
            n_groups: 8,
            gamma_slow: None,
            gamma_fast: None,
            gamma_intra: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, lr) in [("lr_base", self.lr_base), ("lr_slow", self.lr_slow), ("lr_fast", self.lr_fast)] {
            if !(lr > 0.0 && lr.is_finite()) {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.lr_fast < self.lr_slow {
            problems.push("lr_fast must be at least lr_slow".into());
        }
        if self.batch_size < 2 {
            problems.push("batch_size must be at least 2".into());
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            problems.push("layer sizes must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push("lambda must be non-negative".into());
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            problems.push("margin must be non-negative".into());
        }
        if self.n_groups == 0 || self.n_groups > self.embed_dim {
            problems.push(format!("n_groups must be in 1..={}", self.embed_dim));
        }
        for (name, w) in [
            ("gamma_slow", &self.gamma_slow),
            ("gamma_fast", &self.gamma_fast),
            ("gamma_intra", &self.gamma_intra),
        ] {
            if let Some(w) = w {
                if w.n_groups() != self.n_groups {
                    problems.push(format!("{name} has {} weights but n_groups is {}", w.n_groups(), self.n_groups));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(problems.join("; ")))
        }
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.embed_dim);
        sizes
    }

    fn weights_or(&self, w: &Option<FrequencyWeights>, preset: fn(usize) -> Result<FrequencyWeights>) -> Result<FrequencyWeights> {
        match w {
            Some(w) => Ok(w.clone()),
            None => preset(self.n_groups),
        }
    }

    /// Learning rate and distillation of each lineage the mode trains.
    pub fn lineage_plans(&self) -> Result<Vec<(Role, f64, Distillation)>> {
        Ok(match self.mode {
            Mode::Unified => vec![(Role::Fast, self.lr_fast, Distillation::Unified)],
            Mode::Intra => vec![(
                Role::Fast,
                self.lr_fast,
                Distillation::Frequency(self.weights_or(&self.gamma_intra, FrequencyWeights::geometric)?),
            )],
            Mode::Inter => vec![
                (Role::Slow, self.lr_slow, Distillation::Unified),
                (Role::Fast, self.lr_fast, Distillation::Unified),
            ],
            Mode::Mgsvf => vec![
                (
                    Role::Slow,
                    self.lr_slow,
                    Distillation::Frequency(self.weights_or(&self.gamma_slow, FrequencyWeights::low_pass)?),
                ),
                (
                    Role::Fast,
                    self.lr_fast,
                    Distillation::Frequency(self.weights_or(&self.gamma_fast, FrequencyWeights::high_pass)?),
                ),
            ],
        })
    }
}

/// Everything one run needs beyond data and plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSettings {
    pub train: TrainConfig,
    #[serde(default)]
    pub composition: CompositionConfig,
    /// Extra values of `a` evaluated on the same trained models (two-space modes).
    #[serde(default)]
    pub a_sweep: Vec<f64>,
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.composition.validate()?;
        if self.a_sweep.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Schema("a_sweep values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One model trajectory together with its frozen distillation target.
#[derive(Clone, Debug)]
pub struct LineageState {
    pub role: Role,
    pub model: EmbeddingModel,
    pub snapshot: Option<EmbeddingModel>,
    pub optimizer: Adam,
    pub distillation: Distillation,
}

impl LineageState {
    pub fn from_base(base: &EmbeddingModel, role: Role, learning_rate: f64, distillation: Distillation) -> Self {
        Self {
            role,
            model: base.clone(),
            snapshot: Some(base.snapshot()),
            optimizer: Adam::new(base, learning_rate),
            distillation,
        }
    }
}

fn gather<'a>(dataset: &'a Dataset, indices: &[usize]) -> (Vec<&'a [f64]>, Vec<usize>) {
    indices
        .iter()
        .map(|&i| {
            let s = &dataset.samples()[i];
            (s.features.as_slice(), s.class_id)
        })
        .unzip()
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut EmbeddingModel,
    optimizer: &mut Adam,
    previous: Option<&EmbeddingModel>,
    inputs: &[&[f64]],
    labels: &[usize],
    loss: &LossConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = session_loss(&xs, &ys, model, previous, loss)?;
            optimizer.step(model, &out.grads)?;
        }
    }
    Ok(())
}

/// Trains the base embedding model with the triplet loss alone.
pub fn train_base(inputs: &[&[f64]], labels: &[usize], input_dim: usize, cfg: &TrainConfig) -> Result<EmbeddingModel> {
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("base training needs at least two classes"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_INIT]));
    let mut model = EmbeddingModel::new(&cfg.layer_sizes(input_dim), &mut init_rng)?;
    let mut optimizer = Adam::new(&model, cfg.lr_base);
    let loss = LossConfig {
        lambda: 0.0,
        triplet: TripletConfig { margin: cfg.margin },
        distillation: Distillation::Unified,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_BASE_BATCHES]));
    run_epochs(&mut model, &mut optimizer, None, inputs, labels, &loss, cfg, &mut rng)?;
    Ok(model)
}

/// Base model for the first session of `plan`.
pub fn train_base_for_plan(dataset: &Dataset, plan: &SessionPlan, cfg: &TrainConfig) -> Result<EmbeddingModel> {
    cfg.validate()?;
    let batch = session_batch(dataset, plan, 1, cfg.seed)?;
    let (xs, ys) = gather(dataset, &batch.train);
    train_base(&xs, &ys, dataset.input_dim(), cfg)
}

/// Trains one lineage on a session's data, then makes the result its new snapshot.
pub fn train_session(
    lineage: &mut LineageState,
    dataset: &Dataset,
    batch: &SessionBatch,
    cfg: &TrainConfig,
) -> Result<()> {
    if batch.session < 2 {
        return Err(Error::invalid("incremental training starts at session 2"));
    }
    let snapshot = lineage
        .snapshot
        .take()
        .ok_or_else(|| Error::state("lineage has no snapshot to distill against"))?;
    let (xs, ys) = gather(dataset, &batch.train);
    let loss = LossConfig {
        lambda: cfg.lambda,
        triplet: TripletConfig { margin: cfg.margin },
        distillation: lineage.distillation.clone(),
    };
    // Both lineages see the same mini-batch order.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SESSION_BATCHES, batch.session as u64]));
    lineage.optimizer = Adam::new(&lineage.model, lineage.optimizer.learning_rate);
    let result = run_epochs(
        &mut lineage.model,
        &mut lineage.optimizer,
        Some(&snapshot),
        &xs,
        &ys,
        &loss,
        cfg,
        &mut rng,
    );
    if let Err(e) = result {
        lineage.snapshot = Some(snapshot);
        return Err(e);
    }
    lineage.snapshot = Some(lineage.model.snapshot());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageAccuracy {
    /// Per session: slow-space NCM accuracy on that session's own classes.
    pub slow: Vec<f64>,
    /// Per session: fast-space NCM accuracy on that session's own classes.
    pub fast: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub a: f64,
    pub per_session_accuracy: Vec<f64>,
    pub average_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub wall_time_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub config: ExperimentSettings,
    pub plan: SessionPlan,
    pub accuracy_matrix: AccuracyMatrix,
    /// Accuracy on the cumulative test set after each session.
    pub per_session_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    pub last_accuracy: f64,
    /// `F_k` for sessions `k = 2..=T`.
    pub average_forgetting_curve: Vec<f64>,
    pub final_forgetting: Option<f64>,
    pub lineage_current_task: Option<LineageAccuracy>,
    pub composition_sweep: Vec<SweepPoint>,
    pub completed: bool,
    pub run_info: RunInfo,
}

impl ResultRecord {
    fn refresh_summary(&mut self) {
        let n = self.per_session_accuracy.len().max(1) as f64;
        self.average_accuracy = self.per_session_accuracy.iter().sum::<f64>() / n;
        self.last_accuracy = self.per_session_accuracy.last().copied().unwrap_or(0.0);
        self.average_forgetting_curve = forgetting_curve(&self.accuracy_matrix);
        self.final_forgetting = self.average_forgetting_curve.last().copied();
        for p in &mut self.composition_sweep {
            p.average_accuracy = p.per_session_accuracy.iter().sum::<f64>() / n;
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Test-set embeddings and labels for the classes seen so far.
struct Evaluation {
    labels: Vec<usize>,
    slow: Vec<Vec<f64>>,
    fast: Vec<Vec<f64>>,
}

fn evaluate_batch(dataset: &Dataset, batch: &SessionBatch, slow: &EmbeddingModel, fast: &EmbeddingModel) -> Result<Evaluation> {
    let (xs, labels) = gather(dataset, &batch.test);
    let slow_z = slow.forward_batch(&xs)?;
    let fast_z = if std::ptr::eq(slow, fast) {
        slow_z.clone()
    } else {
        fast.forward_batch(&xs)?
    };
    Ok(Evaluation {
        labels,
        slow: slow_z,
        fast: fast_z,
    })
}

fn per_task_accuracy(plan: &SessionPlan, k: usize, labels: &[usize], predictions: &[usize]) -> Result<(f64, Vec<f64>)> {
    let overall = accuracy(predictions, labels)?;
    let row = (1..=k)
        .map(|j| {
            let task = &plan.sessions[j - 1];
            let (p, l): (Vec<usize>, Vec<usize>) = predictions
                .iter()
                .zip(labels)
                .filter(|(_, l)| task.contains(l))
                .map(|(p, l)| (*p, *l))
                .unzip();
            accuracy(&p, &l)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((overall, row))
}

fn current_task_ncm(
    plan: &SessionPlan,
    k: usize,
    labels: &[usize],
    embeddings: &[Vec<f64>],
    centers: &std::collections::BTreeMap<usize, Vec<f64>>,
) -> Result<f64> {
    let task = &plan.sessions[k - 1];
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for (z, l) in embeddings.iter().zip(labels) {
        if task.contains(l) {
            preds.push(ncm_classify(z, centers)?);
            truth.push(*l);
        }
    }
    accuracy(&preds, &truth)
}

/// Trains the base model and runs every session of `plan`.
pub fn run_experiment(dataset: &Dataset, plan: &SessionPlan, settings: &ExperimentSettings) -> Result<ResultRecord> {
    let base = train_base_for_plan(dataset, plan, &settings.train)?;
    run_experiment_with_base(dataset, plan, settings, &base, &mut |_| {})
}

/// Runs every session starting from an already trained base model.
/// `on_session` receives the partial record after each session.
pub fn run_experiment_with_base(
    dataset: &Dataset,
    plan: &SessionPlan,
    settings: &ExperimentSettings,
    base: &EmbeddingModel,
    on_session: &mut dyn FnMut(&ResultRecord),
) -> Result<ResultRecord> {
    settings.validate()?;
    let cfg = &settings.train;
    if base.input_dim() != dataset.input_dim() || base.layer_sizes() != cfg.layer_sizes(dataset.input_dim()).as_slice() {
        return Err(Error::invalid("base model does not match the configured architecture"));
    }
    let started = Instant::now();
    let two_spaces = cfg.mode.two_spaces();
    let mut lineages: Vec<LineageState> = cfg
        .lineage_plans()?
        .into_iter()
        .map(|(role, lr, distill)| LineageState::from_base(base, role, lr, distill))
        .collect();

    let mut record = ResultRecord {
        schema_version: RESULT_SCHEMA_VERSION,
        mode: cfg.mode,
        seed: cfg.seed,
        config: settings.clone(),
        plan: plan.clone(),
        accuracy_matrix: AccuracyMatrix::new(),
        per_session_accuracy: Vec::new(),
        average_accuracy: 0.0,
        last_accuracy: 0.0,
        average_forgetting_curve: Vec::new(),
        final_forgetting: None,
        lineage_current_task: two_spaces.then(|| LineageAccuracy {
            slow: Vec::new(),
            fast: Vec::new(),
        }),
        composition_sweep: if two_spaces {
            settings
                .a_sweep
                .iter()
                .map(|&a| SweepPoint {
                    a,
                    per_session_accuracy: Vec::new(),
                    average_accuracy: 0.0,
                })
                .collect()
        } else {
            Vec::new()
        },
        completed: false,
        run_info: RunInfo { wall_time_seconds: 0.0 },
    };

    let mut registry = CenterRegistry::new();
    let mut composition: Option<Composition> = None;

    for t in 1..=plan.n_sessions() {
        let batch = session_batch(dataset, plan, t, cfg.seed)?;
        if t > 1 {
            if let [slow, fast] = lineages.as_mut_slice() {
                let (a, b) = rayon::join(
                    || train_session(slow, dataset, &batch, cfg),
                    || train_session(fast, dataset, &batch, cfg),
                );
                a?;
                b?;
            } else {
                train_session(&mut lineages[0], dataset, &batch, cfg)?;
            }
        }
        let slow_model = &lineages[0].model;
        let fast_model = &lineages[lineages.len() - 1].model;

        for &c in &batch.classes {
            let idx: Vec<usize> = batch
                .train
                .iter()
                .copied()
                .filter(|&i| dataset.samples()[i].class_id == c)
                .collect();
            let (xs, _) = gather(dataset, &idx);
            let (u_slow, u_fast) = compute_centers(&xs, slow_model, fast_model)?;
            registry.insert(
                c,
                ClassCenter {
                    u_slow,
                    u_fast,
                    introduced_at: t,
                },
            )?;
        }

        if t == 1 && two_spaces && settings.composition.mode == CompositionMode::Pca {
            let (xs, _) = gather(dataset, &batch.train);
            let pool = slow_model.forward_batch(&xs)?;
            let target = settings.composition.pca_target_dim.unwrap_or(cfg.embed_dim / 2).max(1);
            composition = Some(fit_pca_composition(&pool, target)?);
        }

        let eval = evaluate_batch(dataset, &batch, slow_model, fast_model)?;
        let predictions: Vec<usize> = if two_spaces {
            let comp = composition.clone().unwrap_or(Composition::Simple {
                a: settings.composition.a,
            });
            let clf = CompositeClassifier::new(&registry, comp)?;
            eval.slow
                .iter()
                .zip(&eval.fast)
                .map(|(s, f)| clf.classify(s, f))
                .collect::<Result<_>>()?
        } else {
            let centers = registry.fast_centers();
            eval.fast.iter().map(|z| ncm_classify(z, &centers)).collect::<Result<_>>()?
        };
        let (overall, row) = per_task_accuracy(plan, t, &eval.labels, &predictions)?;
        record.accuracy_matrix.push_row(row)?;
        record.per_session_accuracy.push(overall);

        if let Some(gap) = record.lineage_current_task.as_mut() {
            gap.slow.push(current_task_ncm(plan, t, &eval.labels, &eval.slow, &registry.slow_centers())?);
            gap.fast.push(current_task_ncm(plan, t, &eval.labels, &eval.fast, &registry.fast_centers())?);
        }
        for point in &mut record.composition_sweep {
            let clf = CompositeClassifier::new(&registry, Composition::Simple { a: point.a })?;
            let preds: Vec<usize> = eval
                .slow
                .iter()
                .zip(&eval.fast)
                .map(|(s, f)| clf.classify(s, f))
                .collect::<Result<_>>()?;
            point.per_session_accuracy.push(accuracy(&preds, &eval.labels)?);
        }

        record.refresh_summary();
        record.run_info.wall_time_seconds = started.elapsed().as_secs_f64();
        on_session(&record);
    }
    record.completed = true;
    record.run_info.wall_time_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}
