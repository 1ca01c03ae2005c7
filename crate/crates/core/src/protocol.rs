//! Incremental-task protocols: how the class set is ordered and sliced
//! into sequential phases.
//!
//! Two layouts are supported. The equal-split layout divides the `c`
//! classes into `n_tasks` phases of the same size. The half-first layout
//! trains on `c / 2` classes up front and splits the remainder into
//! `n_tasks` equal increments, giving `n_tasks + 1` phases in total.

use crate::datagen::LongTailDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};
use rand::seq::SliceRandom;

/// Phase layout over the class set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Protocol {
    /// `n_tasks` phases of `c / n_tasks` classes each.
    EqualSplits,
    /// One phase of `c / 2` classes, then `n_tasks` phases of `c / (2 * n_tasks)`.
    HalfThenSplits,
}

/// How the global class order is chosen before slicing into phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ClassOrder {
    /// Seeded permutation of the class ids.
    Shuffled,
    /// Descending training count, ties broken by ascending class id. With a
    /// long-tail profile this presents head classes first.
    Ordered,
}

/// A fixed assignment of classes to phases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchedule {
    class_order: Vec<usize>,
    phases: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    /// The full class order; phases are contiguous slices of this.
    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    pub fn phases(&self) -> &[Vec<usize>] {
        &self.phases
    }

    pub fn phase_classes(&self, t: usize) -> Result<&[usize]> {
        self.phases
            .get(t)
            .map(|p| p.as_slice())
            .ok_or_else(|| {
                Error::parameter(format!(
                    "phase {t} out of range; schedule has {} phases",
                    self.phases.len()
                ))
            })
    }
}

/// Build a schedule over `num_classes` classes. `class_counts` is only
/// consulted for the count-ordered layout; `seed` only for the shuffled one.
pub fn build_schedule(
    num_classes: usize,
    protocol: Protocol,
    n_tasks: usize,
    order: ClassOrder,
    class_counts: &[usize],
    seed: u64,
) -> Result<TaskSchedule> {
    if num_classes == 0 {
        return Err(Error::parameter("num_classes must be positive"));
    }
    if n_tasks == 0 {
        return Err(Error::parameter("n_tasks must be positive"));
    }
    if order == ClassOrder::Ordered && class_counts.len() != num_classes {
        return Err(Error::parameter(format!(
            "class_counts has {} entries but num_classes is {num_classes}",
            class_counts.len()
        )));
    }

    let class_order = match order {
        ClassOrder::Shuffled => {
            let mut ids: Vec<usize> = (0..num_classes).collect();
            let mut rng = seeded_rng(derive_seed(seed, "class-order", 0));
            ids.shuffle(&mut rng);
            ids
        }
        ClassOrder::Ordered => {
            let mut ids: Vec<usize> = (0..num_classes).collect();
            // Descending count; the ascending-id tiebreak keeps the order
            // total and therefore deterministic.
            ids.sort_by(|&a, &b| {
                class_counts[b]
                    .cmp(&class_counts[a])
                    .then(a.cmp(&b))
            });
            ids
        }
    };

    let phase_sizes: Vec<usize> = match protocol {
        Protocol::EqualSplits => {
            if num_classes % n_tasks != 0 {
                return Err(Error::parameter(format!(
                    "equal-split protocol needs num_classes ({num_classes}) divisible by n_tasks ({n_tasks})"
                )));
            }
            vec![num_classes / n_tasks; n_tasks]
        }
        Protocol::HalfThenSplits => {
            if num_classes % 2 != 0 {
                return Err(Error::parameter(format!(
                    "half-first protocol needs an even num_classes, got {num_classes}"
                )));
            }
            let half = num_classes / 2;
            if half % n_tasks != 0 {
                return Err(Error::parameter(format!(
                    "half-first protocol needs num_classes/2 ({half}) divisible by n_tasks ({n_tasks})"
                )));
            }
            let mut sizes = vec![half];
            sizes.extend(std::iter::repeat(half / n_tasks).take(n_tasks));
            sizes
        }
    };

    let mut phases = Vec::with_capacity(phase_sizes.len());
    let mut cursor = 0;
    for size in phase_sizes {
        phases.push(class_order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    debug_assert_eq!(cursor, num_classes);

    Ok(TaskSchedule {
        class_order,
        phases,
    })
}

/// The rows of `dataset` whose class belongs to phase `t`, labels kept in
/// the global space.
pub fn phase_view(
    schedule: &TaskSchedule,
    dataset: &LongTailDataset,
    t: usize,
) -> Result<LongTailDataset> {
    let classes = schedule.phase_classes(t)?;
    let mut member = vec![false; dataset.num_classes()];
    for &c in classes {
        if c >= dataset.num_classes() {
            return Err(Error::parameter(format!(
                "schedule class {c} outside the dataset's {} classes",
                dataset.num_classes()
            )));
        }
        member[c] = true;
    }
    let rows: Vec<usize> = dataset
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &y)| member[y])
        .map(|(i, _)| i)
        .collect();
    dataset.subset(&rows)
}

/// All classes introduced in phases `0..=t`, in introduction order.
pub fn seen_classes(schedule: &TaskSchedule, t: usize) -> Result<Vec<usize>> {
    if t >= schedule.num_phases() {
        return Err(Error::parameter(format!(
            "phase {t} out of range; schedule has {} phases",
            schedule.num_phases()
        )));
    }
    let mut seen = Vec::new();
    for phase in &schedule.phases[..=t] {
        seen.extend_from_slice(phase);
    }
    Ok(seen)
}
