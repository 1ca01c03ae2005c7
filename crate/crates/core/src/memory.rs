//! Exemplar memory: which few samples of each finished class survive into
//! later phases, and how they rejoin training.
//!
//! Selection is greedy mean-matching in embedding space: each pick is the
//! sample that brings the running exemplar mean closest to the full class
//! mean. Because the selection is an ordered list, shrinking a class under
//! a fixed total budget is just truncation — the earliest picks are the
//! best mean approximation of every prefix length.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::datagen::LongTailDataset;
use crate::error::{Error, Result};

/// How the exemplar budget scales as classes accumulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryRegime {
    /// A fixed number of exemplars per class; total memory grows with the
    /// class count.
    Growing { n_eps: usize },
    /// A fixed total budget split evenly across seen classes; per-class
    /// allowance shrinks as classes accumulate.
    Fixed { budget: usize },
}

/// Exemplars retained for one class.
#[derive(Debug, Clone)]
struct ClassExemplars {
    class_id: usize,
    /// Greedy selection order; indices into the class's row list as it
    /// appeared in the phase data.
    selection: Vec<usize>,
    /// Raw features of the selected rows, in selection order.
    features: Array2<f64>,
    /// Training-set size of the class before the budget was applied.
    n_original: usize,
}

/// The exemplar store across all finished classes.
#[derive(Debug, Clone)]
pub struct ExemplarStore {
    regime: MemoryRegime,
    classes: Vec<ClassExemplars>,
}

/// Greedy mean-matching selection: at step `m` (1-based), pick the
/// unselected row minimizing the distance between the class mean and the
/// mean of the selected rows plus the candidate. Ties go to the lowest row
/// index. Returns the selection order.
pub fn herding_select(features: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    let n = features.nrows();
    if k > n {
        return Err(Error::parameter(format!(
            "herding asked for {k} exemplars from {n} rows"
        )));
    }
    let d = features.ncols();
    let mut mean = Array1::<f64>::zeros(d);
    for row in features.rows() {
        mean += &row;
    }
    mean.mapv_inplace(|v| v / n as f64);

    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut sum = Array1::<f64>::zeros(d);
    for m in 1..=k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let mut dist2 = 0.0;
            for c in 0..d {
                let candidate_mean = (sum[c] + features[[i, c]]) / m as f64;
                let diff = mean[c] - candidate_mean;
                dist2 += diff * diff;
            }
            // Strict improvement only, so equal distances keep the lowest
            // index encountered first.
            if best.map_or(true, |(_, b)| dist2 < b) {
                best = Some((i, dist2));
            }
        }
        let (pick, _) = best.expect("k <= n guarantees an unselected row");
        taken[pick] = true;
        sum += &features.row(pick);
        selected.push(pick);
    }
    Ok(selected)
}

impl ExemplarStore {
    pub fn new(regime: MemoryRegime) -> Result<Self> {
        match regime {
            MemoryRegime::Growing { n_eps } if n_eps == 0 => {
                Err(Error::parameter("per-class exemplar count must be positive"))
            }
            MemoryRegime::Fixed { budget } if budget == 0 => {
                Err(Error::parameter("total exemplar budget must be positive"))
            }
            _ => Ok(Self {
                regime,
                classes: Vec::new(),
            }),
        }
    }

    pub fn regime(&self) -> MemoryRegime {
        self.regime
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Stored class ids, in the order they were added.
    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn total_stored(&self) -> usize {
        self.classes.iter().map(|c| c.selection.len()).sum()
    }

    /// Exemplars currently retained for a class.
    pub fn retained_count(&self, class: usize) -> Option<usize> {
        self.entry(class).map(|c| c.selection.len())
    }

    /// Training samples the class had before the budget was applied.
    pub fn original_count(&self, class: usize) -> Option<usize> {
        self.entry(class).map(|c| c.n_original)
    }

    /// How many training samples the budget cost this class:
    /// `original - retained`.
    pub fn lost_count(&self, class: usize) -> Option<usize> {
        self.entry(class).map(|c| c.n_original - c.selection.len())
    }

    fn entry(&self, class: usize) -> Option<&ClassExemplars> {
        self.classes.iter().find(|c| c.class_id == class)
    }

    /// Fold the classes of a finished phase into the store. `embed` maps a
    /// raw feature row to the space herding measures distances in (the
    /// model's end-of-phase extractor; identity for a pure-linear model).
    /// Under the fixed regime every stored class is then truncated to the
    /// new per-class allowance.
    pub fn update_store(
        &mut self,
        phase_data: &LongTailDataset,
        embed: impl Fn(ArrayView1<f64>) -> Result<Array1<f64>>,
    ) -> Result<()> {
        let new_classes: Vec<usize> = (0..phase_data.num_classes())
            .filter(|&j| phase_data.class_counts()[j] > 0)
            .collect();
        if new_classes.is_empty() {
            return Err(Error::parameter("phase data contains no classes to store"));
        }
        for &class in &new_classes {
            if self.entry(class).is_some() {
                return Err(Error::parameter(format!(
                    "class {class} already stored; a phase cannot be folded in twice"
                )));
            }
        }
        let cap = match self.regime {
            MemoryRegime::Growing { n_eps } => n_eps,
            MemoryRegime::Fixed { budget } => {
                let seen = self.classes.len() + new_classes.len();
                let cap = budget / seen;
                if cap == 0 {
                    return Err(Error::parameter(format!(
                        "budget {budget} cannot cover {seen} classes with at least one exemplar each"
                    )));
                }
                cap
            }
        };

        for &class in &new_classes {
            let rows = phase_data.rows_of_class(class);
            let mut embedded: Option<Array2<f64>> = None;
            for (i, &r) in rows.iter().enumerate() {
                let e = embed(phase_data.features().row(r))?;
                let emb = embedded.get_or_insert_with(|| Array2::zeros((rows.len(), e.len())));
                if e.len() != emb.ncols() {
                    return Err(Error::parameter(
                        "embedding dimensionality changed between rows",
                    ));
                }
                emb.row_mut(i).assign(&e);
            }
            let embedded = embedded.expect("class has at least one row");
            let k = rows.len().min(cap);
            let selection = herding_select(&embedded, k)?;
            let mut features = Array2::zeros((k, phase_data.dim()));
            for (out, &sel) in selection.iter().enumerate() {
                features
                    .row_mut(out)
                    .assign(&phase_data.features().row(rows[sel]));
            }
            self.classes.push(ClassExemplars {
                class_id: class,
                selection,
                features,
                n_original: rows.len(),
            });
        }

        if let MemoryRegime::Fixed { .. } = self.regime {
            // Earliest-selected exemplars are kept: each selection prefix is
            // the greedy mean approximation of that length.
            for class in &mut self.classes {
                if class.selection.len() > cap {
                    class.selection.truncate(cap);
                    class.features = class
                        .features
                        .slice(ndarray::s![..cap, ..])
                        .to_owned();
                }
            }
        }
        Ok(())
    }

    /// Stored exemplars as a dataset in the given global label space.
    pub fn as_dataset(&self, num_classes: usize, dim: usize) -> Result<LongTailDataset> {
        let total = self.total_stored();
        let mut features = Array2::zeros((total, dim));
        let mut labels = Vec::with_capacity(total);
        let mut row = 0;
        for class in &self.classes {
            if class.features.ncols() != dim {
                return Err(Error::parameter(format!(
                    "stored features for class {} have {} dims, expected {dim}",
                    class.class_id,
                    class.features.ncols()
                )));
            }
            for r in 0..class.features.nrows() {
                features.row_mut(row).assign(&class.features.row(r));
                labels.push(class.class_id);
                row += 1;
            }
        }
        LongTailDataset::new(
            features,
            labels,
            num_classes,
            crate::datagen::SplitTag::Train,
        )
    }

    /// Serializable snapshot: per class, the selection indices and counts.
    /// Features are not stored — they are rebuilt from the dataset, which
    /// is itself reproducible from the experiment config.
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let snapshot = StoreCheckpoint {
            regime: self.regime,
            classes: self
                .classes
                .iter()
                .map(|c| ClassCheckpoint {
                    class_id: c.class_id,
                    n_original: c.n_original,
                    selection: c.selection.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&snapshot)
            .map_err(|e| Error::parameter(format!("checkpoint serialization failed: {e}")))
    }

    /// Rebuild a store from a checkpoint against the training dataset it
    /// was produced from.
    pub fn from_checkpoint_json(json: &str, train: &LongTailDataset) -> Result<Self> {
        let snapshot: StoreCheckpoint = serde_json::from_str(json)
            .map_err(|e| Error::parameter(format!("checkpoint parse failed: {e}")))?;
        let mut classes = Vec::with_capacity(snapshot.classes.len());
        for entry in snapshot.classes {
            let rows = train.rows_of_class(entry.class_id);
            if rows.len() != entry.n_original {
                return Err(Error::parameter(format!(
                    "checkpoint says class {} had {} samples, dataset has {}",
                    entry.class_id,
                    entry.n_original,
                    rows.len()
                )));
            }
            let mut features = Array2::zeros((entry.selection.len(), train.dim()));
            for (out, &sel) in entry.selection.iter().enumerate() {
                let row = *rows.get(sel).ok_or_else(|| {
                    Error::parameter(format!(
                        "checkpoint selection index {sel} out of range for class {}",
                        entry.class_id
                    ))
                })?;
                features.row_mut(out).assign(&train.features().row(row));
            }
            classes.push(ClassExemplars {
                class_id: entry.class_id,
                selection: entry.selection,
                features,
                n_original: entry.n_original,
            });
        }
        Ok(Self {
            regime: snapshot.regime,
            classes,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StoreCheckpoint {
    regime: MemoryRegime,
    classes: Vec<ClassCheckpoint>,
}

#[derive(Serialize, Deserialize)]
struct ClassCheckpoint {
    class_id: usize,
    n_original: usize,
    selection: Vec<usize>,
}

/// Stored exemplars followed by the new phase's data, as one training pool.
pub fn replay_union(
    store: &ExemplarStore,
    phase_data: &LongTailDataset,
) -> Result<LongTailDataset> {
    let dim = phase_data.dim();
    let stored = store.as_dataset(phase_data.num_classes(), dim)?;
    let total = stored.len() + phase_data.len();
    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    for (i, row) in stored.features().rows().into_iter().enumerate() {
        features.row_mut(i).assign(&row);
    }
    labels.extend_from_slice(stored.labels());
    for (i, row) in phase_data.features().rows().into_iter().enumerate() {
        features.row_mut(stored.len() + i).assign(&row);
    }
    labels.extend_from_slice(phase_data.labels());
    LongTailDataset::new(
        features,
        labels,
        phase_data.num_classes(),
        crate::datagen::SplitTag::Train,
    )
}
