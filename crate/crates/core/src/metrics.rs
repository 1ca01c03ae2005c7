//! Continual-learning measurements: the phase-by-task accuracy matrix, its
//! two standard aggregates, per-class forgetting, and diagnostic statistics
//! over classifier weights and accumulated gradients.
//!
//! Everything here also defines the engine's reporting surface: a long-form
//! CSV (`phase,metric,key,value`) whose row order is fixed so that repeated
//! runs of the same experiment produce byte-identical files, plus a compact
//! JSON summary.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::reweight::column_norms;

/// Lower-triangular accuracy record: `a[t][u]` is the accuracy on task
/// `u`'s test classes after finishing phase `t`, and `a_seen[t]` the
/// accuracy over all classes seen by phase `t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccMatrix {
    a: Vec<Vec<f64>>,
    a_seen: Vec<f64>,
}

impl AccMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append one phase's row; must have exactly `t + 1` task accuracies.
    pub fn push_phase(&mut self, task_acc: Vec<f64>, seen_acc: f64) -> Result<()> {
        let t = self.a.len();
        if task_acc.len() != t + 1 {
            return Err(Error::parameter(format!(
                "phase {t} row needs {} task accuracies, got {}",
                t + 1,
                task_acc.len()
            )));
        }
        if task_acc.iter().chain([&seen_acc]).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::parameter(format!(
                "accuracies must lie in [0, 1]; phase {t} row was {task_acc:?} / {seen_acc}"
            )));
        }
        self.a.push(task_acc);
        self.a_seen.push(seen_acc);
        Ok(())
    }

    pub fn num_phases(&self) -> usize {
        self.a.len()
    }

    pub fn task_accuracy(&self, t: usize, u: usize) -> Option<f64> {
        self.a.get(t).and_then(|row| row.get(u)).copied()
    }

    pub fn seen_accuracy(&self) -> &[f64] {
        &self.a_seen
    }

    /// Mean over phases of the seen-classes accuracy.
    pub fn average_accuracy(&self) -> Result<f64> {
        if self.a.is_empty() {
            return Err(Error::parameter("accuracy matrix is empty"));
        }
        Ok(self.a_seen.iter().sum::<f64>() / self.a_seen.len() as f64)
    }

    /// Mean drop from each task's just-trained accuracy to its accuracy
    /// after phase `t`. Defined for `t >= 1`.
    pub fn forgetting_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t >= self.a.len() {
            return Err(Error::parameter(format!(
                "forgetting needs 1 <= t < {}, got {t}",
                self.a.len()
            )));
        }
        let drops: f64 = (0..t).map(|u| self.a[u][u] - self.a[t][u]).sum();
        Ok(drops / t as f64)
    }

    /// Final forgetting: mean over all earlier tasks of the drop between
    /// just-trained and end-of-run accuracy. Needs at least two phases.
    pub fn forgetting(&self) -> Result<f64> {
        if self.a.len() < 2 {
            return Err(Error::parameter(
                "forgetting needs at least two phases",
            ));
        }
        self.forgetting_at(self.a.len() - 1)
    }
}

/// Per-class classifier column norms with their mean and spread. A skewed
/// spread is the weight-space signature of class imbalance.
#[derive(Debug, Clone, Serialize)]
pub struct WeightNormStats {
    /// `(class id, column norm)` in column order.
    pub per_class: Vec<(usize, f64)>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Column norms of the classifier weights, keyed by class id.
pub fn weight_norm_stats(w: &Array2<f64>, column_classes: &[usize]) -> Result<WeightNormStats> {
    if w.ncols() != column_classes.len() {
        return Err(Error::parameter(format!(
            "weights have {} columns but {} class ids were given",
            w.ncols(),
            column_classes.len()
        )));
    }
    if w.ncols() == 0 {
        return Err(Error::parameter("weight matrix has no columns"));
    }
    let norms = column_norms(w);
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let var = norms.iter().map(|n| (n - mean) * (n - mean)).sum::<f64>() / norms.len() as f64;
    Ok(WeightNormStats {
        per_class: column_classes.iter().copied().zip(norms).collect(),
        mean,
        std: var.sqrt(),
    })
}

/// Per-class average gradient magnitude over a phase: accumulated column
/// norms divided by the iteration count.
pub fn gradient_magnitude(phi: &[f64], iterations: usize) -> Result<Vec<f64>> {
    if iterations == 0 {
        return Err(Error::parameter(
            "gradient magnitude needs at least one iteration",
        ));
    }
    Ok(phi.iter().map(|p| p / iterations as f64).collect())
}

/// Everything recorded about one finished phase.
#[derive(Debug, Clone)]
pub struct PhaseMetrics {
    /// Accuracy per task `0..=t` after this phase.
    pub task_acc: Vec<f64>,
    /// Accuracy over all seen classes.
    pub seen_acc: f64,
    /// Accuracy per seen class, in introduction order.
    pub class_acc: Vec<(usize, f64)>,
    pub weight_norms: WeightNormStats,
    /// `(class, phi_j / iterations)` for classes active this phase.
    pub grad_magnitude: Vec<(usize, f64)>,
    /// `(class, sum over iterations of alpha * r * column norm)`.
    pub reweighted_magnitude: Vec<(usize, f64)>,
}

/// The full metrics record of a run.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    acc: AccMatrix,
    phases: Vec<PhaseMetrics>,
    /// Phase at which each class was first evaluated.
    first_seen: BTreeMap<usize, usize>,
    /// Class accuracy at the phase the class was introduced.
    first_acc: BTreeMap<usize, f64>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_phase(&mut self, metrics: PhaseMetrics) -> Result<()> {
        let t = self.phases.len();
        self.acc.push_phase(metrics.task_acc.clone(), metrics.seen_acc)?;
        for &(class, acc) in &metrics.class_acc {
            self.first_seen.entry(class).or_insert(t);
            self.first_acc.entry(class).or_insert(acc);
        }
        self.phases.push(metrics);
        Ok(())
    }

    pub fn acc(&self) -> &AccMatrix {
        &self.acc
    }

    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn phase(&self, t: usize) -> Option<&PhaseMetrics> {
        self.phases.get(t)
    }

    pub fn phases(&self) -> &[PhaseMetrics] {
        &self.phases
    }

    /// Drop in a class's accuracy since the phase that introduced it:
    /// `first-phase accuracy - accuracy after phase t`. Only classes
    /// introduced strictly before `t` appear — a class seen once has had no
    /// opportunity to be forgotten.
    pub fn per_class_forgetting(&self, t: usize) -> Result<Vec<(usize, f64)>> {
        let phase = self
            .phases
            .get(t)
            .ok_or_else(|| Error::parameter(format!("phase {t} not recorded")))?;
        let mut out = Vec::new();
        for &(class, acc_now) in &phase.class_acc {
            match self.first_seen.get(&class) {
                Some(&intro) if intro < t => {
                    out.push((class, self.first_acc[&class] - acc_now));
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Long-form CSV of the whole log. Row order is fixed; reruns of the
    /// same experiment serialize byte-identically.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,metric,key,value\n");
        for (t, phase) in self.phases.iter().enumerate() {
            let mut push = |metric: &str, key: &str, value: f64| {
                out.push_str(&format!("{t},{metric},{key},{value}\n"));
            };
            push("acc_seen", "all", phase.seen_acc);
            for (u, &acc) in phase.task_acc.iter().enumerate() {
                push("acc_task", &u.to_string(), acc);
            }
            for &(class, acc) in &phase.class_acc {
                push("class_acc", &class.to_string(), acc);
            }
            if t >= 1 {
                if let Ok(f) = self.acc.forgetting_at(t) {
                    push("forgetting", "all", f);
                }
                if let Ok(per_class) = self.per_class_forgetting(t) {
                    for (class, f) in per_class {
                        push("class_forgetting", &class.to_string(), f);
                    }
                }
            }
            for &(class, norm) in &phase.weight_norms.per_class {
                push("weight_norm", &class.to_string(), norm);
            }
            push("weight_norm_mean", "all", phase.weight_norms.mean);
            push("weight_norm_std", "all", phase.weight_norms.std);
            for &(class, mag) in &phase.grad_magnitude {
                push("grad_mag", &class.to_string(), mag);
            }
            for &(class, mag) in &phase.reweighted_magnitude {
                push("reweighted_grad_mag", &class.to_string(), mag);
            }
        }
        out
    }

    /// Compact end-of-run summary.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary {
            average_accuracy: f64,
            forgetting: Option<f64>,
            seen_accuracy: Vec<f64>,
        }
        let summary = Summary {
            average_accuracy: self.acc.average_accuracy()?,
            forgetting: self.acc.forgetting().ok(),
            seen_accuracy: self.acc.seen_accuracy().to_vec(),
        };
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::parameter(format!("summary serialization failed: {e}")))
    }
}

/// One parsed row of the long-form metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsCsvRow {
    pub phase: usize,
    pub metric: String,
    pub key: String,
    pub value: f64,
}

/// Parse a metrics CSV produced by [`MetricsLog::to_csv`]. Errors name the
/// 1-based row number that failed.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsCsvRow>> {
    let mut rows = Vec::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == "phase,metric,key,value" => {}
        Some((_, header)) => {
            return Err(Error::parameter(format!(
                "row 1: unexpected header {header:?}"
            )))
        }
        None => return Err(Error::parameter("metrics CSV is empty")),
    }
    for (idx, line) in lines {
        let row_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::parameter(format!(
                "row {row_no}: expected 4 fields, found {}",
                fields.len()
            )));
        }
        let phase = fields[0].parse().map_err(|_| {
            Error::parameter(format!("row {row_no}: bad phase {:?}", fields[0]))
        })?;
        let value = fields[3].parse().map_err(|_| {
            Error::parameter(format!("row {row_no}: bad value {:?}", fields[3]))
        })?;
        rows.push(MetricsCsvRow {
            phase,
            metric: fields[1].to_string(),
            key: fields[2].to_string(),
            value,
        });
    }
    Ok(rows)
}
