//! The phase loop: sequential training over the schedule with replayed
//! exemplars, per-class update reweighting, and teacher distillation.
//!
//! Each phase follows the same shape. New classifier columns are appended,
//! the replay pool is assembled, and every mini-batch is processed as:
//! forward, losses, FC gradients, accumulate per-class magnitudes, derive
//! the correction factors (class balance, task balance, loss balance),
//! apply the reweighted update, then the plain backbone update. At the
//! phase boundary the learner is evaluated on everything seen, snapshotted
//! as the next phase's teacher, and the finished classes are folded into
//! the exemplar store.
//!
//! Determinism contract: for a fixed config and seed, two runs produce
//! bit-identical weights, metrics, and trace records. All randomness flows
//! through derived ChaCha streams and iteration order never touches hash
//! maps.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;

use crate::datagen::LongTailDataset;
use crate::error::{Error, Result};
use crate::losses::{ce_loss, dakd_loss, kd_loss, lambda_weight, DakdLoss, LossBreakdown};
use crate::memory::{replay_union, ExemplarStore, MemoryRegime};
use crate::metrics::{gradient_magnitude, weight_norm_stats, MetricsLog, PhaseMetrics};
use crate::model::{grad_fc_batch, LearnerState};
use crate::protocol::{phase_view, seen_classes, TaskSchedule};
use crate::reweight::{
    backbone_update, beta_ratio, column_norms, dgr_update, GradAccumulator, ReweightRatios,
};
use crate::rng::{derive_seed, seeded_rng};

/// Named training method presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full reweighted method: grouped class balance, task balance, loss
    /// balance, blended distillation, prior-offset softmax.
    Ours,
    /// Plain cross-entropy fine-tuning on the replay pool.
    Finetune,
    /// Cross-entropy plus plain distillation, no reweighting.
    KdOnly,
}

/// Hyperparameters of one experiment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs_per_phase: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    /// `(epoch, divisor)` pairs; from each epoch on, the rate is divided.
    pub lr_drops: Vec<(usize, f64)>,
    /// Attenuation strength of the new-class task-balance factor.
    pub gamma: f64,
    /// Base distillation weight for the backbone objective.
    pub lambda_b: f64,
    /// Distillation temperature.
    pub tau: f64,
    /// Prior-offset softmax in the cross-entropy loss (full method only).
    pub rs_enabled: bool,
    pub method: Method,
    pub seed: u64,
    /// Hidden width of the feature extractor; `None` trains the classifier
    /// directly on raw inputs.
    pub hidden_dim: Option<usize>,
    /// Derive the softmax prior from accumulated gradient magnitudes
    /// instead of class counts. On by default: count-based priors flatten
    /// to uniform once every class is capped by the exemplar budget, while
    /// gradient-derived priors keep correcting the logit bias in later
    /// phases.
    pub pi_from_gradients: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: 20 epochs per phase with tenfold rate drops at
    /// epochs 10 and 15.
    pub fn desk_default() -> Self {
        Self {
            epochs_per_phase: 20,
            batch_size: 16,
            lr_init: 0.5,
            lr_drops: vec![(10, 10.0), (15, 10.0)],
            gamma: 1.0,
            lambda_b: 1.0,
            tau: 2.0,
            rs_enabled: true,
            method: Method::Ours,
            seed: 1993,
            hidden_dim: None,
            pi_from_gradients: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_phase == 0 {
            return Err(Error::parameter("epochs_per_phase must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::parameter("batch_size must be positive"));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::parameter(format!(
                "lr_init must be finite and positive, got {}",
                self.lr_init
            )));
        }
        for &(epoch, div) in &self.lr_drops {
            if !(div > 0.0) || !div.is_finite() {
                return Err(Error::parameter(format!(
                    "lr drop at epoch {epoch} has invalid divisor {div}"
                )));
            }
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::parameter(format!("gamma must be finite and non-negative, got {}", self.gamma)));
        }
        if !(self.lambda_b >= 0.0) || !self.lambda_b.is_finite() {
            return Err(Error::parameter(format!(
                "lambda_b must be finite and non-negative, got {}",
                self.lambda_b
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::parameter(format!("tau must be finite and positive, got {}", self.tau)));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::parameter("hidden_dim must be positive when present"));
        }
        Ok(())
    }
}

/// Prefix numeric failures with where in the run they happened; other
/// error kinds pass through untouched.
fn numeric_context(e: Error, phase: usize, epoch: usize, iteration: usize) -> Error {
    match e {
        Error::Numeric(msg) => {
            Error::numeric(format!("phase {phase} epoch {epoch} iteration {iteration}: {msg}"))
        }
        other => other,
    }
}

/// Learning rate at a given epoch: the initial rate divided by every drop
/// whose epoch has been reached.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = config.lr_init;
    for &(drop_epoch, divisor) in &config.lr_drops {
        if epoch >= drop_epoch {
            lr /= divisor;
        }
    }
    lr
}

/// Fine-grained method switches; the named presets map onto these, and
/// ablation runs toggle them individually.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSpec {
    /// Per-class balance factors on the cross-entropy update.
    pub reweight: bool,
    /// Split classes into old/new groups and apply task-balance factors
    /// (off: one global group, no task factors).
    pub dgr: bool,
    /// Distill from the previous phase's snapshot.
    pub distill: bool,
    /// Blend the distillation loss by the lost-data entropy gate (off:
    /// plain distillation).
    pub dakd: bool,
    /// Prior-offset softmax in the cross-entropy.
    pub rs: bool,
    /// Deliberately wrong variant: also rescale distillation gradient
    /// columns per class. Kept for the ablation that shows it hurts.
    pub reweight_kd: bool,
}

impl MethodSpec {
    pub fn ours(rs: bool) -> Self {
        Self {
            reweight: true,
            dgr: true,
            distill: true,
            dakd: true,
            rs,
            reweight_kd: false,
        }
    }

    pub fn finetune() -> Self {
        Self {
            reweight: false,
            dgr: false,
            distill: false,
            dakd: false,
            rs: false,
            reweight_kd: false,
        }
    }

    pub fn kd_only() -> Self {
        Self {
            distill: true,
            ..Self::finetune()
        }
    }

    /// The switches implied by a config's named method. The two baselines
    /// are plain by definition and ignore the prior-offset flag.
    pub fn from_config(config: &TrainConfig) -> Self {
        match config.method {
            Method::Ours => Self::ours(config.rs_enabled),
            Method::Finetune => Self::finetune(),
            Method::KdOnly => Self::kd_only(),
        }
    }
}

/// Per-iteration record of the correction factors, written when tracing is
/// enabled.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub phase: usize,
    pub epoch: usize,
    /// Iteration within the phase (1-based, matches the accumulator).
    pub iteration: usize,
    /// Per active class, in column order.
    pub alpha: Vec<f64>,
    pub r: Vec<f64>,
    pub phi: Vec<f64>,
    pub beta: f64,
    /// Frobenius norm of the class/task-reweighted cross-entropy gradient.
    pub ce_reweighted_norm: f64,
    /// `beta` times the Frobenius norm of the distillation gradient — by
    /// construction equal to `ce_reweighted_norm` whenever both are active.
    pub kd_scaled_norm: f64,
    pub loss_total: f64,
}

/// Accuracy tallies from one evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// `(class id, correct, total)` in classifier column order.
    pub per_class: Vec<(usize, usize, usize)>,
}

impl EvalOutcome {
    pub fn overall(&self) -> f64 {
        let (c, t) = self
            .per_class
            .iter()
            .fold((0usize, 0usize), |(c, t), &(_, cc, tt)| (c + cc, t + tt));
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }

    pub fn class_accuracy(&self, class: usize) -> Option<f64> {
        self.per_class
            .iter()
            .find(|&&(id, _, _)| id == class)
            .map(|&(_, c, t)| c as f64 / t as f64)
    }

    /// Joint accuracy over a subset of classes (a task's classes).
    pub fn subset_accuracy(&self, classes: &[usize]) -> Result<f64> {
        let mut correct = 0;
        let mut total = 0;
        for &class in classes {
            let &(_, c, t) = self
                .per_class
                .iter()
                .find(|&&(id, _, _)| id == class)
                .ok_or_else(|| {
                    Error::parameter(format!("class {class} absent from evaluation"))
                })?;
            correct += c;
            total += t;
        }
        if total == 0 {
            return Err(Error::parameter("subset has no test samples"));
        }
        Ok(correct as f64 / total as f64)
    }
}

/// Top-1 evaluation on raw logits. The training-time prior offset is a
/// loss-shaping device and plays no role here; predictions argmax the
/// logits as-is, ties resolved toward the earliest column.
pub fn evaluate(learner: &LearnerState, test: &LongTailDataset) -> Result<EvalOutcome> {
    let mut tallies: Vec<(usize, usize, usize)> = learner
        .column_classes()
        .iter()
        .map(|&c| (c, 0usize, 0usize))
        .collect();
    for (i, &label) in test.labels().iter().enumerate() {
        let column = learner.column_of(label).ok_or_else(|| {
            Error::parameter(format!(
                "test row {i} has class {label}, which the learner has not seen"
            ))
        })?;
        let z = learner.forward(test.features().row(i))?;
        let mut best = 0;
        for j in 1..z.len() {
            if z[j] > z[best] {
                best = j;
            }
        }
        tallies[column].2 += 1;
        if best == column {
            tallies[column].1 += 1;
        }
    }
    Ok(EvalOutcome {
        per_class: tallies,
    })
}

/// One experiment: datasets, schedule, memory, learner, and the record of
/// everything measured.
pub struct ExperimentRun {
    config: TrainConfig,
    method: MethodSpec,
    schedule: TaskSchedule,
    train: LongTailDataset,
    test: LongTailDataset,
    store: ExemplarStore,
    learner: LearnerState,
    teacher: Option<LearnerState>,
    metrics: MetricsLog,
    trace: Option<Vec<TraceRecord>>,
    next_phase: usize,
}

impl ExperimentRun {
    pub fn new(
        config: TrainConfig,
        method: MethodSpec,
        schedule: TaskSchedule,
        train: LongTailDataset,
        test: LongTailDataset,
        regime: MemoryRegime,
    ) -> Result<Self> {
        config.validate()?;
        if train.dim() != test.dim() {
            return Err(Error::parameter(format!(
                "train features have {} dims, test has {}",
                train.dim(),
                test.dim()
            )));
        }
        if train.num_classes() != test.num_classes() {
            return Err(Error::parameter(format!(
                "train covers {} classes, test covers {}",
                train.num_classes(),
                test.num_classes()
            )));
        }
        let scheduled: usize = schedule.phases().iter().map(Vec::len).sum();
        if scheduled != train.num_classes() {
            return Err(Error::parameter(format!(
                "schedule covers {scheduled} classes, dataset has {}",
                train.num_classes()
            )));
        }
        let learner = LearnerState::new(train.dim(), config.hidden_dim, false, config.seed)?;
        let store = ExemplarStore::new(regime)?;
        Ok(Self {
            config,
            method,
            schedule,
            train,
            test,
            store,
            learner,
            teacher: None,
            metrics: MetricsLog::new(),
            trace: None,
            next_phase: 0,
        })
    }

    /// Enable per-iteration trace records.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn method(&self) -> MethodSpec {
        self.method
    }

    pub fn schedule(&self) -> &TaskSchedule {
        &self.schedule
    }

    pub fn learner(&self) -> &LearnerState {
        &self.learner
    }

    /// The frozen snapshot distilled from during the *next* phase; equal to
    /// the learner as it stood at the last phase boundary.
    pub fn teacher(&self) -> Option<&LearnerState> {
        self.teacher.as_ref()
    }

    pub fn store(&self) -> &ExemplarStore {
        &self.store
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    /// Run every phase in order.
    pub fn run(&mut self) -> Result<()> {
        for t in self.next_phase..self.schedule.num_phases() {
            self.run_phase(t)?;
        }
        Ok(())
    }

    /// Execute phase `t`. Phases must run strictly in order.
    pub fn run_phase(&mut self, t: usize) -> Result<()> {
        if t != self.next_phase {
            return Err(Error::parameter(format!(
                "phases must run strictly in order; expected phase {}, got {t}",
                self.next_phase
            )));
        }
        let phase_classes: Vec<usize> = self.schedule.phase_classes(t)?.to_vec();
        let n_old = self.learner.active_classes();
        self.learner
            .add_classes(&phase_classes, derive_seed(self.config.seed, "columns", t as u64))?;
        let c_active = self.learner.active_classes();

        let phase_data = phase_view(&self.schedule, &self.train, t)?;
        let pool = replay_union(&self.store, &phase_data)?;
        let pool_columns: Vec<usize> = pool
            .labels()
            .iter()
            .map(|&y| {
                self.learner.column_of(y).ok_or_else(|| {
                    Error::parameter(format!("pool sample of class {y} has no column"))
                })
            })
            .collect::<Result<_>>()?;

        // Effective per-column training counts: full phase data for new
        // classes, retained exemplars for old ones.
        let effective_counts: Vec<usize> = self
            .learner
            .column_classes()
            .iter()
            .enumerate()
            .map(|(col, &class)| {
                if col < n_old {
                    self.store.retained_count(class).ok_or_else(|| {
                        Error::parameter(format!("old class {class} missing from the store"))
                    })
                } else {
                    Ok(phase_data.class_counts()[class])
                }
            })
            .collect::<Result<_>>()?;
        let prior_cap = match self.store.regime() {
            MemoryRegime::Growing { n_eps } => n_eps,
            MemoryRegime::Fixed { budget } => (budget / c_active).max(1),
        };
        let count_priors = if self.method.rs {
            crate::model::class_priors(&effective_counts, prior_cap, t == 0)?
        } else {
            Vec::new()
        };

        // Original-data totals drive both the distillation weight and the
        // task-balance attenuation.
        let n_old_original: usize = self.learner.column_classes()[..n_old]
            .iter()
            .map(|&c| self.train.class_counts()[c])
            .sum();
        let n_new_original: usize = self.learner.column_classes()[n_old..]
            .iter()
            .map(|&c| self.train.class_counts()[c])
            .sum();
        let distill_active = t > 0 && self.method.distill;
        let lambda = if distill_active {
            lambda_weight(n_old_original, n_new_original, self.config.lambda_b)?
        } else {
            0.0
        };
        let lost: Vec<f64> = self.learner.column_classes()[..n_old]
            .iter()
            .map(|&class| {
                self.store
                    .lost_count(class)
                    .map(|n| n as f64)
                    .ok_or_else(|| {
                        Error::parameter(format!("old class {class} missing from the store"))
                    })
            })
            .collect::<Result<_>>()?;

        let mut accumulator = GradAccumulator::new(c_active);
        let mut reweighted_accum = vec![0.0; c_active];
        let mut iteration = 0usize;

        let phase_stream = derive_seed(self.config.seed, "batch-order", t as u64);
        for epoch in 0..self.config.epochs_per_phase {
            let lr = lr_at(&self.config, epoch);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            let mut rng = seeded_rng(derive_seed(phase_stream, "epoch", epoch as u64));
            order.shuffle(&mut rng);

            for batch_rows in order.chunks(self.config.batch_size) {
                iteration += 1;
                let b = batch_rows.len();
                let mut batch_x = Array2::zeros((b, pool.dim()));
                let mut batch_cols = Vec::with_capacity(b);
                for (out, &row) in batch_rows.iter().enumerate() {
                    batch_x.row_mut(out).assign(&pool.features().row(row));
                    batch_cols.push(pool_columns[row]);
                }

                let fb = self.learner.forward_batch(&batch_x)?;

                // The prior either comes from counts (fixed per phase) or
                // from the accumulated gradient magnitudes (per iteration).
                let gradient_priors;
                let priors: &[f64] = if self.method.rs
                    && self.config.pi_from_gradients
                    && accumulator.phi().iter().all(|&p| p > 0.0)
                {
                    let total: f64 = accumulator.phi().iter().sum();
                    gradient_priors = accumulator.phi().iter().map(|p| p / total).collect::<Vec<_>>();
                    &gradient_priors
                } else {
                    &count_priors
                };
                let ce = ce_loss(&fb.logits, &batch_cols, priors, self.method.rs)?;

                let distill = if distill_active {
                    let teacher = self.teacher.as_ref().ok_or_else(|| {
                        Error::parameter("no teacher snapshot available after phase 0")
                    })?;
                    let teacher_fb = teacher.forward_batch(&batch_x)?;
                    Some(if self.method.dakd {
                        dakd_loss(&fb.logits, &teacher_fb.logits, n_old, &lost, self.config.tau)?
                    } else {
                        let plain =
                            kd_loss(&fb.logits, &teacher_fb.logits, n_old, self.config.tau)?;
                        DakdLoss {
                            sigma: 1.0,
                            l_balanced: plain.loss,
                            l_imbalanced: 0.0,
                            loss: plain.loss,
                            grad_logits: plain.grad_logits,
                        }
                    })
                } else {
                    None
                };

                let breakdown = LossBreakdown::assemble(&ce, distill.as_ref(), lambda);
                if !breakdown.is_finite() {
                    return Err(Error::numeric(self.divergence_dump(t, epoch, iteration, &breakdown)));
                }

                let grad_ce_fc = grad_fc_batch(&fb.embeddings, &ce.grad_logits)?;
                let mut grad_kd_fc = match &distill {
                    Some(d) => Some(grad_fc_batch(&fb.embeddings, &d.grad_logits)?),
                    None => None,
                };

                // Backbone gradients use the pre-update weights, so they
                // are assembled before the classifier step is applied.
                let backbone_grads = if self.learner.extractor.is_some() {
                    Some(self.backbone_gradients(&batch_x, &fb, &ce.grad_logits, distill.as_ref(), lambda)?)
                } else {
                    None
                };

                // Magnitude accounting comes first: the factors for this
                // iteration are derived from totals that include it.
                accumulator
                    .accumulate(&grad_ce_fc)
                    .map_err(|e| numeric_context(e, t, epoch, iteration))?;

                let alpha = if self.method.reweight {
                    let groups: Vec<Vec<usize>> = if t > 0 && self.method.dgr {
                        vec![(0..n_old).collect(), (n_old..c_active).collect()]
                    } else {
                        vec![(0..c_active).collect()]
                    };
                    accumulator.alpha_ratios(&groups)?
                } else {
                    vec![1.0; c_active]
                };
                let r = if self.method.reweight && self.method.dgr && t > 0 {
                    accumulator.task_ratios(
                        n_old,
                        n_old_original,
                        n_old_original + n_new_original,
                        self.config.gamma,
                    )?
                } else {
                    vec![1.0; c_active]
                };

                if let (true, Some(grad_kd)) = (self.method.reweight_kd, grad_kd_fc.as_mut()) {
                    for j in 0..n_old {
                        let scale = alpha[j] * r[j];
                        grad_kd.column_mut(j).mapv_inplace(|v| scale * v);
                    }
                }

                let beta = match &grad_kd_fc {
                    Some(grad_kd) => {
                        if self.method.reweight {
                            beta_ratio(&grad_ce_fc, &alpha, &r, grad_kd)?
                        } else {
                            lambda
                        }
                    }
                    None => 0.0,
                };

                let ce_norms = column_norms(&grad_ce_fc);
                for j in 0..c_active {
                    reweighted_accum[j] += alpha[j] * r[j] * ce_norms[j];
                }

                if self.trace.is_some() {
                    let ce_reweighted_norm = ce_norms
                        .iter()
                        .enumerate()
                        .map(|(j, n)| (alpha[j] * r[j] * n).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let kd_scaled_norm = grad_kd_fc
                        .as_ref()
                        .map(|g| beta * g.iter().map(|v| v * v).sum::<f64>().sqrt())
                        .unwrap_or(0.0);
                    let record = TraceRecord {
                        phase: t,
                        epoch,
                        iteration,
                        alpha: alpha.clone(),
                        r: r.clone(),
                        phi: accumulator.phi().to_vec(),
                        beta,
                        ce_reweighted_norm,
                        kd_scaled_norm,
                        loss_total: breakdown.total,
                    };
                    self.trace.as_mut().unwrap().push(record);
                }

                let ratios = ReweightRatios {
                    alpha,
                    r,
                    beta,
                    eta: lr,
                };
                dgr_update(
                    &mut self.learner.w,
                    &grad_ce_fc,
                    grad_kd_fc.as_ref().map(|g| (g, n_old)),
                    &ratios,
                )
                .map_err(|e| numeric_context(e, t, epoch, iteration))?;
                if let Some((gw, gb)) = backbone_grads {
                    let ext = self.learner.extractor.as_mut().expect("checked above");
                    backbone_update(ext, &gw, &gb, lr)
                        .map_err(|e| numeric_context(e, t, epoch, iteration))?;
                }
            }
        }

        // Phase boundary: evaluate on all seen classes, snapshot the
        // teacher, then fold the finished classes into the store.
        let seen = seen_classes(&self.schedule, t)?;
        let test_seen = self.filter_test(&seen)?;
        let outcome = evaluate(&self.learner, &test_seen)?;
        let mut task_acc = Vec::with_capacity(t + 1);
        for u in 0..=t {
            task_acc.push(outcome.subset_accuracy(self.schedule.phase_classes(u)?)?);
        }
        let class_acc: Vec<(usize, f64)> = self
            .learner
            .column_classes()
            .iter()
            .map(|&c| (c, outcome.class_accuracy(c).unwrap_or(0.0)))
            .collect();
        let grad_mag = gradient_magnitude(accumulator.phi(), accumulator.iterations())?;
        self.metrics.push_phase(PhaseMetrics {
            task_acc,
            seen_acc: outcome.overall(),
            class_acc,
            weight_norms: weight_norm_stats(&self.learner.w, self.learner.column_classes())?,
            grad_magnitude: self
                .learner
                .column_classes()
                .iter()
                .copied()
                .zip(grad_mag)
                .collect(),
            reweighted_magnitude: self
                .learner
                .column_classes()
                .iter()
                .copied()
                .zip(reweighted_accum.iter().copied())
                .collect(),
        })?;

        self.teacher = Some(self.learner.clone());
        let learner = &self.learner;
        self.store
            .update_store(&phase_data, |x| learner.embed(x))?;
        self.next_phase = t + 1;
        Ok(())
    }

    /// Extractor-parameter gradients of the total objective
    /// `L_ce + lambda * L_distill`, averaged over the batch.
    fn backbone_gradients(
        &self,
        batch_x: &Array2<f64>,
        fb: &crate::model::ForwardBatch,
        ce_grads: &Array2<f64>,
        distill: Option<&DakdLoss>,
        lambda: f64,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let b = batch_x.nrows();
        let c = ce_grads.ncols();
        let mut dz = ce_grads.clone();
        if let Some(d) = distill {
            for k in 0..b {
                for j in 0..d.grad_logits.ncols() {
                    dz[[k, j]] += lambda * d.grad_logits[[k, j]];
                }
            }
        }
        debug_assert_eq!(c, self.learner.w.ncols());
        // d_embedding = dz W^T, masked by the ReLU derivative.
        let mut dh = dz.dot(&self.learner.w.t());
        if let Some(pre) = &fb.pre_activation {
            for k in 0..b {
                for j in 0..dh.ncols() {
                    if pre[[k, j]] <= 0.0 {
                        dh[[k, j]] = 0.0;
                    }
                }
            }
        }
        let grad_w = batch_x.t().dot(&dh) / b as f64;
        let grad_b = dh.sum_axis(ndarray::Axis(0)) / b as f64;
        Ok((grad_w, grad_b))
    }

    /// Rows of the test split whose class is in `classes`.
    fn filter_test(&self, classes: &[usize]) -> Result<LongTailDataset> {
        let mut member = vec![false; self.test.num_classes()];
        for &c in classes {
            member[c] = true;
        }
        let rows: Vec<usize> = self
            .test
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &y)| member[y])
            .map(|(i, _)| i)
            .collect();
        self.test.subset(&rows)
    }

    fn divergence_dump(
        &self,
        phase: usize,
        epoch: usize,
        iteration: usize,
        breakdown: &LossBreakdown,
    ) -> String {
        let w_norm: f64 = self.learner.w.iter().map(|v| v * v).sum::<f64>().sqrt();
        format!(
            "phase {phase} epoch {epoch} iteration {iteration}: loss became non-finite \
             (ce {}, distill {}, total {}); |W|_F = {w_norm}, {} active classes, method {:?}",
            breakdown.l_ce,
            breakdown.l_dakd,
            breakdown.total,
            self.learner.active_classes(),
            self.config.method
        )
    }
}
