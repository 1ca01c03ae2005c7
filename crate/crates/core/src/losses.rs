//! Training losses: prior-offset cross-entropy, temperature distillation
//! over old-class logits, and the entropy-gated decomposition that blends a
//! plain distillation term with a calibrated one.
//!
//! Per-sample logit gradients are returned alongside each loss so the
//! caller can assemble FC-layer and backbone gradients itself; that split
//! is what lets the update rule rescale the cross-entropy and distillation
//! forces independently. All per-sample gradients are of the *summed* loss;
//! dividing by the batch size when assembling parameter gradients yields
//! the gradient of the reported mean loss.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::model::{grad_ce_logits, regularized_softmax};

/// Mean cross-entropy over a batch plus per-sample logit gradients.
#[derive(Debug, Clone)]
pub struct CeLoss {
    pub loss: f64,
    /// `B x c`; row `k` is `p_k - onehot(y_k)`.
    pub grad_logits: Array2<f64>,
}

/// Cross-entropy with an optional additive log-prior offset inside the
/// softmax. `labels` are column indices into `logits`.
pub fn ce_loss(
    logits: &Array2<f64>,
    labels: &[usize],
    pi: &[f64],
    rs_enabled: bool,
) -> Result<CeLoss> {
    let b = logits.nrows();
    let c = logits.ncols();
    if b == 0 {
        return Err(Error::parameter("ce_loss needs a non-empty batch"));
    }
    if labels.len() != b {
        return Err(Error::parameter(format!(
            "batch has {b} rows but {} labels",
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = Array2::zeros((b, c));
    for k in 0..b {
        let y = labels[k];
        if y >= c {
            return Err(Error::parameter(format!(
                "label {y} at batch row {k} out of range for {c} classes"
            )));
        }
        let p = regularized_softmax(logits.row(k), pi, rs_enabled)?;
        total += -p[y].max(f64::MIN_POSITIVE).ln();
        let g = grad_ce_logits(p.view(), y)?;
        grad.row_mut(k).assign(&g);
    }
    Ok(CeLoss {
        loss: total / b as f64,
        grad_logits: grad,
    })
}

/// Mean distillation loss over a batch plus per-sample logit gradients
/// (restricted to the old-class columns).
#[derive(Debug, Clone)]
pub struct KdLoss {
    pub loss: f64,
    /// `B x n_old`; row `k` is `(1/tau) (softmax(z_k/tau) - softmax(zhat_k/tau))`.
    pub grad_logits: Array2<f64>,
}

/// Distillation between student and teacher logits, softmax taken over the
/// first `n_old` columns only (the classes the teacher knows), softened by
/// temperature `tau`.
pub fn kd_loss(
    student: &Array2<f64>,
    teacher: &Array2<f64>,
    n_old: usize,
    tau: f64,
) -> Result<KdLoss> {
    check_kd_shapes(student, teacher, n_old, tau)?;
    let b = student.nrows();
    let mut total = 0.0;
    let mut grad = Array2::zeros((b, n_old));
    for k in 0..b {
        let p = softened_old(student.row(k), n_old, tau);
        let q = softened_old(teacher.row(k), n_old, tau);
        for j in 0..n_old {
            total += -q[j] * p[j].max(f64::MIN_POSITIVE).ln();
            grad[[k, j]] = (p[j] - q[j]) / tau;
        }
    }
    Ok(KdLoss {
        loss: total / b as f64,
        grad_logits: grad,
    })
}

fn check_kd_shapes(
    student: &Array2<f64>,
    teacher: &Array2<f64>,
    n_old: usize,
    tau: f64,
) -> Result<()> {
    if student.nrows() == 0 {
        return Err(Error::parameter("distillation needs a non-empty batch"));
    }
    if n_old == 0 {
        return Err(Error::parameter("distillation needs at least one old class"));
    }
    if student.ncols() < n_old || teacher.ncols() < n_old {
        return Err(Error::parameter(format!(
            "distillation over {n_old} old classes but student has {} and teacher {} columns",
            student.ncols(),
            teacher.ncols()
        )));
    }
    if student.nrows() != teacher.nrows() {
        return Err(Error::parameter(format!(
            "student batch ({}) and teacher batch ({}) differ",
            student.nrows(),
            teacher.nrows()
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::parameter(format!(
            "temperature must be finite and positive, got {tau}"
        )));
    }
    Ok(())
}

/// Max-shifted softmax of the first `n_old` logits at temperature `tau`.
fn softened_old(z: ArrayView1<f64>, n_old: usize, tau: f64) -> Array1<f64> {
    let mut shifted = Array1::zeros(n_old);
    for j in 0..n_old {
        shifted[j] = z[j] / tau;
    }
    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = shifted.mapv(|v| (v - max).exp());
    let total: f64 = p.iter().sum();
    p.mapv_inplace(|v| v / total);
    p
}

/// Normalized entropy of the lost-count distribution: how evenly the
/// exemplar budget's losses are spread across old classes.
///
/// Returns 1 when the losses are uniform (or when nothing was lost, or with
/// a single old class — both conventions make the blended distillation fall
/// back to its plain form). Returns 0 when one class absorbed every lost
/// sample. Scale-invariant in the counts.
pub fn sigma_from_lost(lost: &[f64]) -> Result<f64> {
    if lost.is_empty() {
        return Err(Error::parameter("sigma_from_lost needs at least one class"));
    }
    if let Some(bad) = lost.iter().find(|&&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::parameter(format!(
            "lost counts must be finite and non-negative, found {bad}"
        )));
    }
    let c = lost.len();
    let total: f64 = lost.iter().sum();
    if c == 1 || total == 0.0 {
        return Ok(1.0);
    }
    let h = entropy(lost.iter().map(|&s| s / total));
    // Computing the maximum through the same code path makes sigma exactly
    // 1.0 for uniform losses instead of 1 - epsilon.
    let h_max = entropy(std::iter::repeat(1.0 / c as f64).take(c));
    Ok((h / h_max).clamp(0.0, 1.0))
}

/// `-sum v ln v` with the `0 ln 0 = 0` convention.
fn entropy(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
}

/// Per-class convex blend of student and teacher logits, weighted by each
/// class's share of the lost training data: `w_j = s_j / sum(s)`,
/// `ztilde_j = w_j z_j + (1 - w_j) zhat_j`.
///
/// Classes that lost more data stay closer to the student's current logits,
/// which makes the distillation term pull them back harder.
pub fn calibrated_logits(
    z: ArrayView1<f64>,
    z_hat: ArrayView1<f64>,
    lost: &[f64],
) -> Result<Array1<f64>> {
    if z.len() != z_hat.len() || z.len() != lost.len() {
        return Err(Error::parameter(format!(
            "calibrated_logits length mismatch: z {}, zhat {}, lost {}",
            z.len(),
            z_hat.len(),
            lost.len()
        )));
    }
    let total: f64 = lost.iter().sum();
    if !(total > 0.0) {
        return Err(Error::parameter(
            "calibrated_logits needs a positive total lost count",
        ));
    }
    let mut out = Array1::zeros(z.len());
    for j in 0..z.len() {
        let w = lost[j] / total;
        out[j] = w * z[j] + (1.0 - w) * z_hat[j];
    }
    Ok(out)
}

/// The blended distillation loss and its diagnostics.
#[derive(Debug, Clone)]
pub struct DakdLoss {
    /// Entropy gate in `[0, 1]`.
    pub sigma: f64,
    /// Plain distillation term on the raw student logits.
    pub l_balanced: f64,
    /// Distillation term on the calibrated logits (0 when the gate is
    /// fully open and the term is skipped).
    pub l_imbalanced: f64,
    /// `sigma * l_balanced + (1 - sigma) * l_imbalanced`.
    pub loss: f64,
    /// `B x n_old` per-sample gradient of the blended loss w.r.t. the raw
    /// student logits (the calibrated branch carries its `w_j` chain factor).
    pub grad_logits: Array2<f64>,
}

/// Blend a plain and a calibrated distillation term according to how evenly
/// the old classes lost training data.
///
/// When the gate is exactly 1 (uniform losses, nothing lost, or a single
/// old class) the result is bit-for-bit the plain distillation loss.
pub fn dakd_loss(
    student: &Array2<f64>,
    teacher: &Array2<f64>,
    n_old: usize,
    lost: &[f64],
    tau: f64,
) -> Result<DakdLoss> {
    check_kd_shapes(student, teacher, n_old, tau)?;
    if lost.len() != n_old {
        return Err(Error::parameter(format!(
            "lost counts cover {} classes but n_old is {n_old}",
            lost.len()
        )));
    }
    let sigma = sigma_from_lost(lost)?;
    let balanced = kd_loss(student, teacher, n_old, tau)?;
    if sigma >= 1.0 {
        return Ok(DakdLoss {
            sigma: 1.0,
            l_balanced: balanced.loss,
            l_imbalanced: 0.0,
            loss: balanced.loss,
            grad_logits: balanced.grad_logits,
        });
    }

    let b = student.nrows();
    let total: f64 = lost.iter().sum();
    let mut calibrated = Array2::zeros((b, n_old));
    for k in 0..b {
        let zt = calibrated_logits(
            student.row(k).slice(ndarray::s![..n_old]),
            teacher.row(k).slice(ndarray::s![..n_old]),
            lost,
        )?;
        calibrated.row_mut(k).assign(&zt);
    }
    let imbalanced = kd_loss(&calibrated, teacher, n_old, tau)?;

    let mut grad = Array2::zeros((b, n_old));
    for k in 0..b {
        for j in 0..n_old {
            let w = lost[j] / total;
            grad[[k, j]] = sigma * balanced.grad_logits[[k, j]]
                + (1.0 - sigma) * w * imbalanced.grad_logits[[k, j]];
        }
    }
    Ok(DakdLoss {
        sigma,
        l_balanced: balanced.loss,
        l_imbalanced: imbalanced.loss,
        loss: sigma * balanced.loss + (1.0 - sigma) * imbalanced.loss,
        grad_logits: grad,
    })
}

/// Distillation strength for the backbone objective:
/// `lambda_b * sqrt(n_old_total / n_new_total)` — the more old data the
/// learner has already absorbed relative to the incoming phase, the harder
/// it leans on the teacher.
///
/// Both totals count original training data, not retained exemplars. With
/// no old data (first phase) the weight is 0, i.e. distillation is off.
pub fn lambda_weight(n_old_total: usize, n_new_total: usize, lambda_b: f64) -> Result<f64> {
    if n_new_total == 0 {
        return Err(Error::parameter(
            "lambda_weight needs a positive new-data total",
        ));
    }
    if !(lambda_b >= 0.0) || !lambda_b.is_finite() {
        return Err(Error::parameter(format!(
            "lambda_b must be finite and non-negative, got {lambda_b}"
        )));
    }
    if n_old_total == 0 {
        return Ok(0.0);
    }
    Ok(lambda_b * (n_old_total as f64 / n_new_total as f64).sqrt())
}

/// One batch's complete loss picture, as logged and traced by the trainer.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_kd_balanced: f64,
    pub l_kd_imbalanced: f64,
    pub l_dakd: f64,
    pub sigma: f64,
    pub lambda: f64,
    /// The backbone objective: `l_ce + lambda * l_dakd`.
    pub total: f64,
}

impl LossBreakdown {
    /// Assemble the breakdown from a cross-entropy result and an optional
    /// distillation result (absent in the first phase / plain fine-tuning).
    pub fn assemble(ce: &CeLoss, dakd: Option<&DakdLoss>, lambda: f64) -> Self {
        match dakd {
            None => LossBreakdown {
                l_ce: ce.loss,
                l_kd_balanced: 0.0,
                l_kd_imbalanced: 0.0,
                l_dakd: 0.0,
                sigma: 1.0,
                lambda: 0.0,
                total: ce.loss,
            },
            Some(d) => LossBreakdown {
                l_ce: ce.loss,
                l_kd_balanced: d.l_balanced,
                l_kd_imbalanced: d.l_imbalanced,
                l_dakd: d.loss,
                sigma: d.sigma,
                lambda,
                total: ce.loss + lambda * d.loss,
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_ce.is_finite() && self.l_dakd.is_finite() && self.total.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::finite_difference_check;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn ce_of_uniform_two_class_prediction_is_ln_two() {
        let logits = array![[0.0, 0.0]];
        let out = ce_loss(&logits, &[0], &[0.5, 0.5], true).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(out.grad_logits, array![[-0.5, 0.5]]);
    }

    #[test]
    fn ce_gradient_rows_sum_to_zero() {
        let logits = array![[1.0, -0.5, 0.3], [0.2, 0.2, -2.0]];
        let out = ce_loss(&logits, &[2, 0], &[], false).unwrap();
        for k in 0..2 {
            assert!(out.grad_logits.row(k).sum().abs() < 1e-12);
        }
    }

    /// Central-difference oracle for the cross-entropy gradient, with and
    /// without the prior offset.
    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = crate::rng::seeded_rng(101);
        for &rs in &[false, true] {
            let b = 3;
            let c = 4;
            let logits =
                Array2::from_shape_fn((b, c), |_| rng.random_range(-2.0..2.0));
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
            let pi = vec![0.4, 0.3, 0.2, 0.1];
            let theta: Vec<f64> = logits.iter().copied().collect();
            let out = ce_loss(&logits, &labels, &pi, rs).unwrap();
            let analytic: Vec<f64> = out.grad_logits.iter().map(|g| g / b as f64).collect();
            let labels2 = labels.clone();
            let pi2 = pi.clone();
            let loss = move |p: &[f64]| {
                let l = Array2::from_shape_vec((b, c), p.to_vec()).unwrap();
                ce_loss(&l, &labels2, &pi2, rs).unwrap().loss
            };
            let err = finite_difference_check(loss, &analytic, &theta, 1e-5).unwrap();
            assert!(err < 1e-5, "ce (rs={rs}) gradient error {err}");
        }
    }

    #[test]
    fn kd_is_zero_with_matching_logits_up_to_teacher_entropy() {
        let z = array![[1.0, -0.5, 0.3, 9.9]];
        let out = kd_loss(&z, &z, 3, 2.0).unwrap();
        // Same logits: gradient exactly zero, loss equals the softened
        // teacher entropy.
        assert!(out.grad_logits.iter().all(|&g| g == 0.0));
        let q = softened_old(z.row(0), 3, 2.0);
        let h: f64 = q.iter().map(|&p| -p * p.ln()).sum();
        assert!((out.loss - h).abs() < 1e-12);
    }

    #[test]
    fn kd_with_a_single_old_class_is_exactly_zero() {
        let s = array![[3.0, 1.0], [0.0, -1.0]];
        let t = array![[-2.0, 5.0], [1.0, 2.0]];
        let out = kd_loss(&s, &t, 1, 2.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_logits.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kd_flattens_to_log_c_at_huge_temperature() {
        let s = array![[1.0, -2.0, 0.5]];
        let t = array![[-1.0, 0.3, 2.0]];
        let out = kd_loss(&s, &t, 3, 1e6).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-3);
        assert!(out.grad_logits.iter().all(|&g| g.abs() < 1e-9));
    }

    /// Central-difference oracle for the distillation gradient. Columns
    /// beyond `n_old` must not influence the loss at all.
    #[test]
    fn kd_gradient_matches_finite_differences() {
        let mut rng = crate::rng::seeded_rng(202);
        let b = 2;
        let c = 5;
        let n_old = 3;
        let student = Array2::from_shape_fn((b, c), |_| rng.random_range(-2.0..2.0));
        let teacher = Array2::from_shape_fn((b, n_old), |_| rng.random_range(-2.0..2.0));
        let out = kd_loss(&student, &teacher, n_old, 2.0).unwrap();
        let theta: Vec<f64> = student.iter().copied().collect();
        // Analytic gradient padded with zeros for the new-class columns.
        let mut analytic = vec![0.0; b * c];
        for k in 0..b {
            for j in 0..n_old {
                analytic[k * c + j] = out.grad_logits[[k, j]] / b as f64;
            }
        }
        let teacher2 = teacher.clone();
        let loss = move |p: &[f64]| {
            let s = Array2::from_shape_vec((b, c), p.to_vec()).unwrap();
            kd_loss(&s, &teacher2, n_old, 2.0).unwrap().loss
        };
        let err = finite_difference_check(loss, &analytic, &theta, 1e-5).unwrap();
        assert!(err < 1e-5, "kd gradient error {err}");
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma_from_lost(&[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(sigma_from_lost(&[4.0, 0.0]).unwrap(), 0.0);
        assert_eq!(sigma_from_lost(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(sigma_from_lost(&[7.0]).unwrap(), 1.0);
        assert!(sigma_from_lost(&[-1.0, 2.0]).is_err());
        let mid = sigma_from_lost(&[3.0, 1.0]).unwrap();
        assert!(mid > 0.0 && mid < 1.0);
    }

    #[test]
    fn calibration_blends_toward_the_lossier_class() {
        let out = calibrated_logits(
            array![2.0, 0.0].view(),
            array![1.0, 1.0].view(),
            &[3.0, 1.0],
        )
        .unwrap();
        assert!((out[0] - 1.75).abs() < 1e-12);
        assert!((out[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn calibration_edges() {
        // A class with no lost data sits exactly on the teacher.
        let out = calibrated_logits(
            array![5.0, -3.0].view(),
            array![0.5, 0.25].view(),
            &[2.0, 0.0],
        )
        .unwrap();
        assert_eq!(out[1], 0.25);
        // Identical logits are a fixed point.
        let z = array![1.0, 2.0];
        let out = calibrated_logits(z.view(), z.view(), &[1.0, 5.0]).unwrap();
        assert_eq!(out, z);
        // All-zero lost counts are rejected.
        assert!(calibrated_logits(z.view(), z.view(), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn blended_distillation_reduces_to_plain_when_gate_is_open() {
        let s = array![[1.0, -0.5, 2.0], [0.3, 0.4, -1.0]];
        let t = array![[0.5, 0.5, 1.0], [0.0, 0.1, 0.2]];
        let plain = kd_loss(&s, &t, 3, 2.0).unwrap();
        for lost in [vec![0.0, 0.0, 0.0], vec![4.0, 4.0, 4.0]] {
            let blended = dakd_loss(&s, &t, 3, &lost, 2.0).unwrap();
            assert_eq!(blended.sigma, 1.0);
            assert_eq!(blended.loss, plain.loss, "loss must match bit for bit");
            assert_eq!(blended.grad_logits, plain.grad_logits);
        }
    }

    #[test]
    fn blended_distillation_is_the_convex_combination() {
        let s = array![[1.0, -0.5, 2.0]];
        let t = array![[0.5, 0.5, 1.0]];
        let lost = [5.0, 1.0, 0.0];
        let out = dakd_loss(&s, &t, 3, &lost, 2.0).unwrap();
        assert!(out.sigma > 0.0 && out.sigma < 1.0);
        let expect = out.sigma * out.l_balanced + (1.0 - out.sigma) * out.l_imbalanced;
        assert_eq!(out.loss, expect);
    }

    #[test]
    fn fully_concentrated_gate_with_matching_logits_has_zero_gradient() {
        // sigma = 0 selects the calibrated term alone; with student equal to
        // teacher the calibrated logits are a fixed point, so no gradient.
        let z = array![[0.7, -1.1]];
        let out = dakd_loss(&z, &z, 2, &[6.0, 0.0], 2.0).unwrap();
        assert_eq!(out.sigma, 0.0);
        assert!(out.grad_logits.iter().all(|&g| g == 0.0));
    }

    /// Central-difference oracle for the blended gradient, including the
    /// chain factor on the calibrated branch.
    #[test]
    fn blended_gradient_matches_finite_differences() {
        let mut rng = crate::rng::seeded_rng(303);
        let b = 2;
        let c = 4;
        let n_old = 3;
        let student = Array2::from_shape_fn((b, c), |_| rng.random_range(-2.0..2.0));
        let teacher = Array2::from_shape_fn((b, n_old), |_| rng.random_range(-2.0..2.0));
        let lost = vec![9.0, 2.0, 1.0];
        let out = dakd_loss(&student, &teacher, n_old, &lost, 2.0).unwrap();
        let theta: Vec<f64> = student.iter().copied().collect();
        let mut analytic = vec![0.0; b * c];
        for k in 0..b {
            for j in 0..n_old {
                analytic[k * c + j] = out.grad_logits[[k, j]] / b as f64;
            }
        }
        let teacher2 = teacher.clone();
        let lost2 = lost.clone();
        let loss = move |p: &[f64]| {
            let s = Array2::from_shape_vec((b, c), p.to_vec()).unwrap();
            dakd_loss(&s, &teacher2, n_old, &lost2, 2.0).unwrap().loss
        };
        let err = finite_difference_check(loss, &analytic, &theta, 1e-5).unwrap();
        assert!(err < 1e-5, "blended gradient error {err}");
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_weight(400, 100, 1.0).unwrap(), 2.0);
        assert_eq!(lambda_weight(0, 100, 1.0).unwrap(), 0.0);
        assert_eq!(lambda_weight(250, 250, 0.5).unwrap(), 0.5);
        assert!(lambda_weight(400, 0, 1.0).is_err());
    }

    #[test]
    fn breakdown_total_is_ce_plus_weighted_distillation() {
        let logits = array![[0.0, 0.0]];
        let ce = ce_loss(&logits, &[0], &[], false).unwrap();
        let s = array![[1.0, -0.5]];
        let d = dakd_loss(&s, &s, 2, &[3.0, 1.0], 2.0).unwrap();
        let bd = LossBreakdown::assemble(&ce, Some(&d), 2.0);
        assert_eq!(bd.total, ce.loss + 2.0 * d.loss);
        let bare = LossBreakdown::assemble(&ce, None, 0.0);
        assert_eq!(bare.total, ce.loss);
        assert_eq!(bare.l_dakd, 0.0);
    }

    proptest! {
        /// The gate depends only on the shape of the lost-count
        /// distribution, not its scale.
        #[test]
        fn sigma_is_scale_invariant(
            lost in prop::collection::vec(0.0f64..100.0, 2..6),
            scale in 0.001f64..1000.0,
        ) {
            let scaled: Vec<f64> = lost.iter().map(|&s| s * scale).collect();
            let a = sigma_from_lost(&lost).unwrap();
            let b = sigma_from_lost(&scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "sigma {a} vs scaled {b}");
        }

        /// The blended loss always lands between its two terms.
        #[test]
        fn blended_loss_is_bounded_by_its_terms(
            seed in 0u64..500,
        ) {
            let mut rng = crate::rng::seeded_rng(seed);
            let s = Array2::from_shape_fn((2, 3), |_| rng.random_range(-3.0..3.0));
            let t = Array2::from_shape_fn((2, 3), |_| rng.random_range(-3.0..3.0));
            let lost = [
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..10.0),
            ];
            if lost.iter().sum::<f64>() > 0.0 {
                let out = dakd_loss(&s, &t, 3, &lost, 2.0).unwrap();
                let lo = out.l_balanced.min(out.l_imbalanced);
                let hi = out.l_balanced.max(out.l_imbalanced);
                if out.sigma < 1.0 {
                    prop_assert!(out.loss >= lo - 1e-12 && out.loss <= hi + 1e-12);
                }
            }
        }
    }
}
