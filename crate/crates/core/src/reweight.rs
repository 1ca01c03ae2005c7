//! Per-class gradient accounting and the reweighted update rule.
//!
//! The classifier's imbalance problem is measurable: the FC-gradient column
//! of a frequent class accumulates far more magnitude over training than a
//! rare class's column, and new-phase classes accumulate more than old ones
//! replayed from a few exemplars. This module tracks those per-column
//! magnitudes and converts them into three correction factors:
//!
//! * `alpha` — within a class group, scales every column's step down toward
//!   the group's least-updated class;
//! * `r` — between the old and new groups, slows whichever group is
//!   accumulating faster, with an attenuation on the new side that fades as
//!   old classes come to dominate the observed data;
//! * `beta` — matches the distillation force's magnitude to the reweighted
//!   cross-entropy force so neither drowns the other.
//!
//! The update applies `alpha * r` to cross-entropy columns and `beta` to
//! distillation columns (old classes only). Distillation gradients are
//! deliberately never reweighted per class — doing so distorts the teacher
//! signal and hurts old-class retention.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::Extractor;

/// Running per-class totals of FC-gradient column magnitudes within a
/// phase. Reset at every phase boundary.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    phi: Vec<f64>,
    iterations: usize,
}

/// Euclidean norm of each column.
pub fn column_norms(m: &Array2<f64>) -> Vec<f64> {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

impl GradAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            phi: vec![0.0; num_classes],
            iterations: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.phi.len()
    }

    /// Accumulated column magnitudes so far; non-decreasing within a phase.
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Add one iteration's cross-entropy FC gradient.
    pub fn accumulate(&mut self, grad_ce_fc: &Array2<f64>) -> Result<()> {
        if grad_ce_fc.ncols() != self.phi.len() {
            return Err(Error::parameter(format!(
                "gradient has {} columns, accumulator tracks {}",
                grad_ce_fc.ncols(),
                self.phi.len()
            )));
        }
        let norms = column_norms(grad_ce_fc);
        for (j, n) in norms.iter().enumerate() {
            if !n.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient column for class index {j} at iteration {}",
                    self.iterations + 1
                )));
            }
            self.phi[j] += n;
        }
        self.iterations += 1;
        Ok(())
    }

    /// Class-balance factors: within each group, `alpha_j = min(phi) / phi_j`
    /// so the least-updated class proceeds at full strength and every other
    /// class is slowed in proportion to its head start.
    ///
    /// A class with no accumulated gradient yet gets `alpha = 1` and is
    /// excluded from the group minimum; both rules keep `alpha` in `(0, 1]`
    /// even in the degenerate first-iteration states.
    pub fn alpha_ratios(&self, groups: &[Vec<usize>]) -> Result<Vec<f64>> {
        self.check_partition(groups)?;
        let mut alpha = vec![1.0; self.phi.len()];
        for group in groups {
            let min_positive = group
                .iter()
                .map(|&j| self.phi[j])
                .filter(|&p| p > 0.0)
                .fold(f64::INFINITY, f64::min);
            if !min_positive.is_finite() {
                continue; // no gradient anywhere in the group yet
            }
            for &j in group {
                if self.phi[j] > 0.0 {
                    alpha[j] = min_positive / self.phi[j];
                }
            }
        }
        Ok(alpha)
    }

    /// Task-balance factors between old (columns `0..n_old`) and new
    /// (columns `n_old..`) classes.
    ///
    /// With `r_phi` the ratio of mean accumulated magnitudes (old over
    /// new): old classes get `min(1, 1/r_phi)`, new classes get
    /// `min(1, r_phi * exp(-gamma * n_observed_old / n_observed_total))`.
    /// The exponential attenuates the new-side correction as old data comes
    /// to dominate what the learner has seen. Observation counts are
    /// original training counts, not retained exemplars.
    pub fn task_ratios(
        &self,
        n_old: usize,
        n_observed_old: usize,
        n_observed_total: usize,
        gamma: f64,
    ) -> Result<Vec<f64>> {
        let c = self.phi.len();
        if n_old == 0 || n_old >= c {
            return Err(Error::parameter(format!(
                "task ratios need both a non-empty old and new group; n_old = {n_old} of {c}"
            )));
        }
        if n_observed_total == 0 || n_observed_old > n_observed_total {
            return Err(Error::parameter(format!(
                "inconsistent observation counts: {n_observed_old} old of {n_observed_total} total"
            )));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::parameter(format!(
                "gamma must be finite and non-negative, got {gamma}"
            )));
        }
        let mean_old: f64 = self.phi[..n_old].iter().sum::<f64>() / n_old as f64;
        let mean_new: f64 =
            self.phi[n_old..].iter().sum::<f64>() / (c - n_old) as f64;
        // Before any gradient lands on one side the ratio is undefined;
        // treating it as 1 leaves both sides at full strength.
        let r_phi = if mean_new == 0.0 || mean_old == 0.0 {
            1.0
        } else {
            mean_old / mean_new
        };
        let r_old = (1.0 / r_phi).min(1.0);
        let fraction_old = n_observed_old as f64 / n_observed_total as f64;
        let r_new = (r_phi * (-gamma * fraction_old).exp()).min(1.0);
        let mut r = vec![r_old; n_old];
        r.extend(std::iter::repeat(r_new).take(c - n_old));
        Ok(r)
    }

    fn check_partition(&self, groups: &[Vec<usize>]) -> Result<()> {
        let mut hits = vec![0usize; self.phi.len()];
        for group in groups {
            for &j in group {
                if j >= self.phi.len() {
                    return Err(Error::parameter(format!(
                        "group index {j} out of range for {} classes",
                        self.phi.len()
                    )));
                }
                hits[j] += 1;
            }
        }
        if hits.iter().any(|&h| h != 1) {
            return Err(Error::parameter(
                "class groups must cover every active class exactly once",
            ));
        }
        Ok(())
    }
}

/// Loss-balance factor: the Frobenius norm of the reweighted cross-entropy
/// gradient over the norm of the distillation gradient, so that applying
/// `beta` makes the two forces equal in magnitude. Zero when there is no
/// distillation gradient.
pub fn beta_ratio(
    grad_ce_fc: &Array2<f64>,
    alpha: &[f64],
    r: &[f64],
    grad_dakd_fc: &Array2<f64>,
) -> Result<f64> {
    let c = grad_ce_fc.ncols();
    if alpha.len() != c || r.len() != c {
        return Err(Error::parameter(format!(
            "beta_ratio factor lengths (alpha {}, r {}) do not match {c} columns",
            alpha.len(),
            r.len()
        )));
    }
    let mut reweighted_sq = 0.0;
    for j in 0..c {
        let scale = alpha[j] * r[j];
        reweighted_sq += grad_ce_fc
            .column(j)
            .iter()
            .map(|v| (scale * v) * (scale * v))
            .sum::<f64>();
    }
    let dakd_sq: f64 = grad_dakd_fc.iter().map(|v| v * v).sum();
    // A distillation gradient that is zero — or pure roundoff next to the
    // classification gradient, as happens on the first batches of a phase
    // while the learner still coincides with its teacher — carries no
    // direction worth amplifying; matching magnitudes against it would
    // turn noise into a full-strength update.
    if dakd_sq.sqrt() <= 1e-12 * reweighted_sq.sqrt() {
        return Ok(0.0);
    }
    Ok(reweighted_sq.sqrt() / dakd_sq.sqrt())
}

/// The per-iteration correction factors applied by [`dgr_update`].
#[derive(Debug, Clone)]
pub struct ReweightRatios {
    pub alpha: Vec<f64>,
    pub r: Vec<f64>,
    pub beta: f64,
    pub eta: f64,
}

impl ReweightRatios {
    /// Identity factors: plain SGD at learning rate `eta`.
    pub fn identity(num_classes: usize, eta: f64) -> Self {
        Self {
            alpha: vec![1.0; num_classes],
            r: vec![1.0; num_classes],
            beta: 0.0,
            eta,
        }
    }
}

/// Apply one reweighted FC update:
/// `w_j -= eta * (alpha_j * r_j * grad_ce_j + beta * grad_dakd_j)`,
/// the distillation term touching only the old-class columns `0..n_old`.
/// Pass `dakd = None` for the first phase or distillation-free methods.
pub fn dgr_update(
    w: &mut Array2<f64>,
    grad_ce_fc: &Array2<f64>,
    dakd: Option<(&Array2<f64>, usize)>,
    ratios: &ReweightRatios,
) -> Result<()> {
    let c = w.ncols();
    if grad_ce_fc.dim() != w.dim() {
        return Err(Error::parameter(format!(
            "gradient shape {:?} does not match weights {:?}",
            grad_ce_fc.dim(),
            w.dim()
        )));
    }
    if ratios.alpha.len() != c || ratios.r.len() != c {
        return Err(Error::parameter(format!(
            "ratio lengths (alpha {}, r {}) do not match {c} columns",
            ratios.alpha.len(),
            ratios.r.len()
        )));
    }
    if let Some((grad_dakd, n_old)) = dakd {
        if n_old > c || grad_dakd.ncols() < n_old || grad_dakd.nrows() != w.nrows() {
            return Err(Error::parameter(format!(
                "distillation gradient shape {:?} incompatible with {n_old} old columns of {:?}",
                grad_dakd.dim(),
                w.dim()
            )));
        }
    }
    for j in 0..c {
        let scale = ratios.eta * ratios.alpha[j] * ratios.r[j];
        for i in 0..w.nrows() {
            w[[i, j]] -= scale * grad_ce_fc[[i, j]];
        }
    }
    if let Some((grad_dakd, n_old)) = dakd {
        for j in 0..n_old {
            for i in 0..w.nrows() {
                w[[i, j]] -= ratios.eta * ratios.beta * grad_dakd[[i, j]];
            }
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "classifier weights became non-finite after an update (eta {}, beta {})",
            ratios.eta, ratios.beta
        )));
    }
    Ok(())
}

/// Plain SGD step on the extractor parameters. The backbone follows the
/// unreweighted total objective — per-class correction is a classifier
/// concern, not a feature-space one.
pub fn backbone_update(
    extractor: &mut Extractor,
    grad_w: &Array2<f64>,
    grad_b: &ndarray::Array1<f64>,
    eta: f64,
) -> Result<()> {
    if grad_w.dim() != extractor.w.dim() || grad_b.len() != extractor.b.len() {
        return Err(Error::parameter(format!(
            "backbone gradient shapes {:?}/{} do not match extractor {:?}/{}",
            grad_w.dim(),
            grad_b.len(),
            extractor.w.dim(),
            extractor.b.len()
        )));
    }
    extractor.w.zip_mut_with(grad_w, |w, g| *w -= eta * g);
    extractor.b.zip_mut_with(grad_b, |b, g| *b -= eta * g);
    if extractor.w.iter().any(|v| !v.is_finite()) || extractor.b.iter().any(|v| !v.is_finite())
    {
        return Err(Error::numeric(
            "extractor parameters became non-finite after an update",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn accumulation_adds_column_norms_per_iteration() {
        let mut acc = GradAccumulator::new(2);
        let g = array![[3.0, 0.0], [0.0, 4.0]];
        acc.accumulate(&g).unwrap();
        assert_eq!(acc.phi(), &[3.0, 4.0]);
        acc.accumulate(&g).unwrap();
        assert_eq!(acc.phi(), &[6.0, 8.0]);
        assert_eq!(acc.iterations(), 2);
    }

    #[test]
    fn accumulation_rejects_non_finite_gradients() {
        let mut acc = GradAccumulator::new(1);
        let g = array![[f64::NAN]];
        assert!(matches!(acc.accumulate(&g), Err(Error::Numeric(_))));
    }

    #[test]
    fn single_group_alpha_slows_the_most_updated_class() {
        let mut acc = GradAccumulator::new(2);
        acc.phi = vec![10.0, 2.0];
        let alpha = acc.alpha_ratios(&[vec![0, 1]]).unwrap();
        assert_eq!(alpha, vec![0.2, 1.0]);
    }

    #[test]
    fn singleton_groups_leave_every_class_at_full_strength() {
        let mut acc = GradAccumulator::new(2);
        acc.phi = vec![10.0, 2.0];
        let alpha = acc.alpha_ratios(&[vec![0], vec![1]]).unwrap();
        assert_eq!(alpha, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_phi_classes_get_unit_alpha_without_poisoning_the_minimum() {
        let mut acc = GradAccumulator::new(3);
        acc.phi = vec![0.0, 8.0, 4.0];
        let alpha = acc.alpha_ratios(&[vec![0, 1, 2]]).unwrap();
        assert_eq!(alpha, vec![1.0, 0.5, 1.0]);
    }

    #[test]
    fn alpha_requires_a_partition() {
        let acc = GradAccumulator::new(3);
        assert!(acc.alpha_ratios(&[vec![0, 1]]).is_err());
        assert!(acc.alpha_ratios(&[vec![0, 1, 2, 2]]).is_err());
        assert!(acc.alpha_ratios(&[vec![0, 1, 5]]).is_err());
    }

    #[test]
    fn task_ratios_slow_the_faster_accumulating_side() {
        // Old mean 4, new mean 2: ratio 2, half the data observed is old.
        let mut acc = GradAccumulator::new(2);
        acc.phi = vec![4.0, 2.0];
        let r = acc.task_ratios(1, 100, 200, 1.0).unwrap();
        assert_eq!(r[0], 0.5);
        // New side: min(1, 2 * exp(-0.5)) = min(1, 1.213) = 1.
        assert_eq!(r[1], 1.0);
    }

    #[test]
    fn balanced_accumulation_with_no_attenuation_changes_nothing() {
        let mut acc = GradAccumulator::new(2);
        acc.phi = vec![3.0, 3.0];
        let r = acc.task_ratios(1, 100, 200, 0.0).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);
    }

    #[test]
    fn fast_new_side_is_attenuated_exponentially() {
        // Old mean 1, new mean 4: ratio 0.25, 80% of observed data is old.
        let mut acc = GradAccumulator::new(2);
        acc.phi = vec![1.0, 4.0];
        let r = acc.task_ratios(1, 80, 100, 1.0).unwrap();
        assert_eq!(r[0], 1.0);
        let expect = 0.25 * (-0.8f64).exp();
        assert!((r[1] - expect).abs() < 1e-12);
        assert!((r[1] - 0.112).abs() < 1e-3);
    }

    #[test]
    fn task_ratios_reject_empty_groups() {
        let acc = GradAccumulator::new(2);
        assert!(acc.task_ratios(0, 1, 2, 1.0).is_err());
        assert!(acc.task_ratios(2, 1, 2, 1.0).is_err());
    }

    #[test]
    fn beta_equalizes_the_two_force_magnitudes() {
        let ce = array![[3.0, 0.0], [0.0, 0.0]];
        let dakd = array![[0.0, 0.0], [6.0, 0.0]];
        let beta = beta_ratio(&ce, &[1.0, 1.0], &[1.0, 1.0], &dakd).unwrap();
        assert_eq!(beta, 0.5);
        let zero = Array2::zeros((2, 2));
        assert_eq!(beta_ratio(&ce, &[1.0, 1.0], &[1.0, 1.0], &zero).unwrap(), 0.0);
    }

    #[test]
    fn update_combines_both_forces_on_old_columns() {
        let mut w = Array2::zeros((2, 1));
        let ce = array![[2.0], [0.0]];
        let dakd = array![[0.0], [1.0]];
        let ratios = ReweightRatios {
            alpha: vec![0.5],
            r: vec![1.0],
            beta: 1.0,
            eta: 0.1,
        };
        dgr_update(&mut w, &ce, Some((&dakd, 1)), &ratios).unwrap();
        assert!((w[[0, 0]] + 0.1).abs() < 1e-15);
        assert!((w[[1, 0]] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn distillation_force_never_touches_new_columns() {
        let mut w = Array2::zeros((1, 2));
        let ce = Array2::zeros((1, 2));
        let dakd = array![[5.0, 5.0]];
        let ratios = ReweightRatios::identity(2, 0.1);
        let ratios = ReweightRatios { beta: 1.0, ..ratios };
        dgr_update(&mut w, &ce, Some((&dakd, 1)), &ratios).unwrap();
        assert!(w[[0, 0]] != 0.0);
        assert_eq!(w[[0, 1]], 0.0);
    }

    #[test]
    fn identity_ratios_reduce_to_plain_sgd_bitwise() {
        let mut rng = crate::rng::seeded_rng(5);
        use rand::Rng;
        let mut w = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let mut manual = w.clone();
        manual.zip_mut_with(&g, |v, gr| *v -= 0.05 * gr);
        dgr_update(&mut w, &g, None, &ReweightRatios::identity(4, 0.05)).unwrap();
        assert_eq!(w, manual);
    }

    #[test]
    fn divergent_updates_are_reported_as_numeric_errors() {
        let mut w = array![[1e308]];
        let g = array![[-1e308]];
        let ratios = ReweightRatios::identity(1, 10.0);
        assert!(matches!(
            dgr_update(&mut w, &g, None, &ratios),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn backbone_step_is_plain_sgd() {
        let mut ext = Extractor::new(2, 2, 1).unwrap();
        let before = ext.clone();
        let gw = array![[1.0, 0.0], [0.0, 1.0]];
        let gb = array![0.5, -0.5];
        backbone_update(&mut ext, &gw, &gb, 0.1).unwrap();
        assert!((ext.w[[0, 0]] - (before.w[[0, 0]] - 0.1)).abs() < 1e-15);
        assert!((ext.b[0] - (before.b[0] - 0.05)).abs() < 1e-15);
    }

    proptest! {
        /// Both correction families stay in (0, 1] for any positive state.
        #[test]
        fn ratios_stay_in_unit_interval(
            phi in prop::collection::vec(1e-6f64..1e6, 4..8),
            n_old in 1usize..3,
            gamma in 0.0f64..5.0,
        ) {
            let mut acc = GradAccumulator::new(phi.len());
            acc.phi = phi.clone();
            let groups = vec![
                (0..n_old).collect::<Vec<_>>(),
                (n_old..phi.len()).collect::<Vec<_>>(),
            ];
            let alpha = acc.alpha_ratios(&groups).unwrap();
            let r = acc.task_ratios(n_old, 50, 100, gamma).unwrap();
            for j in 0..phi.len() {
                prop_assert!(alpha[j] > 0.0 && alpha[j] <= 1.0, "alpha {}", alpha[j]);
                prop_assert!(r[j] > 0.0 && r[j] <= 1.0, "r {}", r[j]);
            }
            // The least-updated class in each group runs at full strength.
            for group in &groups {
                let best = group
                    .iter()
                    .copied()
                    .min_by(|&a, &b| acc.phi[a].partial_cmp(&acc.phi[b]).unwrap())
                    .unwrap();
                prop_assert_eq!(alpha[best], 1.0);
            }
        }

        /// beta's defining identity: applying it to the distillation
        /// gradient reproduces the reweighted cross-entropy magnitude.
        #[test]
        fn beta_identity_holds(seed in 0u64..300) {
            let mut rng = crate::rng::seeded_rng(seed);
            use rand::Rng;
            let ce = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
            let dakd = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
            let alpha: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
            let r: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
            let beta = beta_ratio(&ce, &alpha, &r, &dakd).unwrap();
            let dakd_norm: f64 = dakd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut rew_sq = 0.0;
            for j in 0..4 {
                rew_sq += ce.column(j).iter().map(|v| (alpha[j] * r[j] * v).powi(2)).sum::<f64>();
            }
            prop_assert!((beta * dakd_norm - rew_sq.sqrt()).abs() < 1e-12);
        }
    }
}
