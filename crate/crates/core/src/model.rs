//! The learner: an optional one-hidden-layer feature extractor feeding a
//! growing single-head linear classifier, plus the pieces of its gradient
//! computation that the rest of the engine reweights.
//!
//! The classifier is stored column-per-class. Columns are appended in the
//! order classes are introduced by the schedule, so at any phase the first
//! `n_old` columns are exactly the previously-seen classes — the layout the
//! distillation and reweighting code relies on.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};

/// One hidden ReLU layer mapping raw inputs to the embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    /// `d_in x d_f`; the embedding is `relu(w^T x + b)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Extractor {
    /// Seeded fan-in uniform init (`[-1/sqrt(d_in), +1/sqrt(d_in)]`), zero bias.
    pub fn new(d_in: usize, d_f: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_f == 0 {
            return Err(Error::parameter("extractor dimensions must be positive"));
        }
        let mut rng = seeded_rng(derive_seed(seed, "extractor-init", 0));
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = Array2::from_shape_fn((d_in, d_f), |_| rng.random_range(-bound..=bound));
        Ok(Self {
            w,
            b: Array1::zeros(d_f),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }
}

/// Classifier state: embedding, FC weight columns, and the class-to-column
/// correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    /// `d_f x c_active`; column `k` scores class `column_classes[k]`.
    pub w: Array2<f64>,
    /// Optional per-class bias, default off.
    pub bias: Option<Array1<f64>>,
    pub extractor: Option<Extractor>,
    column_classes: Vec<usize>,
    d_in: usize,
}

impl LearnerState {
    /// An empty learner over `d_in`-dimensional inputs. With
    /// `hidden_dim = None` the raw input is the embedding (pure linear
    /// model); otherwise a seeded ReLU extractor of that width is created.
    pub fn new(d_in: usize, hidden_dim: Option<usize>, with_bias: bool, seed: u64) -> Result<Self> {
        if d_in == 0 {
            return Err(Error::parameter("d_in must be positive"));
        }
        let extractor = match hidden_dim {
            Some(h) => Some(Extractor::new(d_in, h, seed)?),
            None => None,
        };
        let d_f = extractor.as_ref().map_or(d_in, Extractor::output_dim);
        Ok(Self {
            w: Array2::zeros((d_f, 0)),
            bias: with_bias.then(|| Array1::zeros(0)),
            extractor,
            column_classes: Vec::new(),
            d_in,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.d_in
    }

    /// Embedding dimensionality (rows of the FC weight matrix).
    pub fn feature_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Number of classes the head currently scores.
    pub fn active_classes(&self) -> usize {
        self.column_classes.len()
    }

    /// Class id scored by each column, in column order.
    pub fn column_classes(&self) -> &[usize] {
        &self.column_classes
    }

    /// Column index for a class id, if that class has been introduced.
    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.column_classes.iter().position(|&c| c == class)
    }

    /// Append freshly initialized columns for `classes`, in order. Init is
    /// seeded uniform in `[-1/sqrt(d_f), +1/sqrt(d_f)]`.
    pub fn add_classes(&mut self, classes: &[usize], seed: u64) -> Result<()> {
        for &class in classes {
            if self.column_of(class).is_some() {
                return Err(Error::parameter(format!(
                    "class {class} already has a classifier column"
                )));
            }
        }
        let d_f = self.feature_dim();
        let bound = 1.0 / (d_f as f64).sqrt();
        let mut rng = seeded_rng(derive_seed(seed, "fc-init", self.active_classes() as u64));
        let old = self.active_classes();
        let mut w = Array2::zeros((d_f, old + classes.len()));
        w.slice_mut(ndarray::s![.., ..old]).assign(&self.w);
        for (k, &class) in classes.iter().enumerate() {
            for row in 0..d_f {
                w[[row, old + k]] = rng.random_range(-bound..=bound);
            }
            self.column_classes.push(class);
        }
        self.w = w;
        if let Some(bias) = &mut self.bias {
            let mut b = Array1::zeros(old + classes.len());
            b.slice_mut(ndarray::s![..old]).assign(bias);
            *bias = b;
        }
        Ok(())
    }

    /// Embed one input (identity for the pure-linear model).
    pub fn embed(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.d_in {
            return Err(Error::parameter(format!(
                "input has {} dims, model expects {}",
                x.len(),
                self.d_in
            )));
        }
        match &self.extractor {
            None => Ok(x.to_owned()),
            Some(ext) => {
                let pre = ext.w.t().dot(&x) + &ext.b;
                Ok(pre.mapv(|v| v.max(0.0)))
            }
        }
    }

    /// Raw logits for one input: `w^T embed(x) (+ bias)`.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let h = self.embed(x)?;
        let mut z = self.w.t().dot(&h);
        if let Some(b) = &self.bias {
            z += b;
        }
        Ok(z)
    }

    /// Forward a whole batch, keeping the intermediates needed for
    /// backpropagation.
    pub fn forward_batch(&self, inputs: &Array2<f64>) -> Result<ForwardBatch> {
        if inputs.ncols() != self.d_in {
            return Err(Error::parameter(format!(
                "batch has {} feature columns, model expects {}",
                inputs.ncols(),
                self.d_in
            )));
        }
        let (pre_activation, embeddings) = match &self.extractor {
            None => (None, inputs.clone()),
            Some(ext) => {
                let pre = inputs.dot(&ext.w) + &ext.b; // B x d_f
                let act = pre.mapv(|v| v.max(0.0));
                (Some(pre), act)
            }
        };
        let mut logits = embeddings.dot(&self.w); // B x c_active
        if let Some(b) = &self.bias {
            logits += b;
        }
        Ok(ForwardBatch {
            embeddings,
            pre_activation,
            logits,
        })
    }

    /// Flatten all trainable parameters (extractor weights/bias, then FC
    /// columns, then FC bias) into one vector. Companion of
    /// [`LearnerState::set_flat_params`]; used by the finite-difference
    /// gradient checks.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(ext) = &self.extractor {
            out.extend(ext.w.iter().copied());
            out.extend(ext.b.iter().copied());
        }
        out.extend(self.w.iter().copied());
        if let Some(b) = &self.bias {
            out.extend(b.iter().copied());
        }
        out
    }

    /// Overwrite all trainable parameters from a flat vector laid out as in
    /// [`LearnerState::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.flat_params().len();
        if flat.len() != expected {
            return Err(Error::parameter(format!(
                "flat parameter vector has {} entries, model has {expected}",
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        if let Some(ext) = &mut self.extractor {
            for v in ext.w.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in ext.b.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for v in self.w.iter_mut() {
            *v = it.next().unwrap();
        }
        if let Some(b) = &mut self.bias {
            for v in b.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }
}

/// Intermediates of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardBatch {
    /// `B x d_f` post-activation embeddings.
    pub embeddings: Array2<f64>,
    /// `B x d_f` pre-activation values when an extractor is present; the
    /// ReLU mask for backprop is `pre_activation > 0`.
    pub pre_activation: Option<Array2<f64>>,
    /// `B x c_active` raw logits.
    pub logits: Array2<f64>,
}

/// Softmax with an additive `log(prior)` offset per logit:
/// `p_j = exp(z_j + ln pi_j) / sum_m exp(z_m + ln pi_m)`.
///
/// The offset shifts probability mass toward frequent classes at training
/// time, which in turn strengthens the loss gradient on rare classes.
/// Disabled, it is a plain (max-shifted, overflow-safe) softmax and `pi`
/// is ignored.
pub fn regularized_softmax(z: ArrayView1<f64>, pi: &[f64], enabled: bool) -> Result<Array1<f64>> {
    if enabled {
        if pi.len() != z.len() {
            return Err(Error::parameter(format!(
                "prior vector has {} entries, logits have {}",
                pi.len(),
                z.len()
            )));
        }
        if let Some(bad) = pi.iter().find(|&&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::parameter(format!(
                "class priors must be strictly positive and finite, found {bad}"
            )));
        }
        let sum: f64 = pi.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::parameter(format!(
                "class priors must sum to 1, got {sum}"
            )));
        }
    }
    let mut shifted = Array1::zeros(z.len());
    for (j, v) in shifted.iter_mut().enumerate() {
        *v = if enabled { z[j] + pi[j].ln() } else { z[j] };
    }
    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = shifted.mapv(|v| (v - max).exp());
    let total: f64 = p.iter().sum();
    p.mapv_inplace(|v| v / total);
    Ok(p)
}

/// Training-time class priors for the regularized softmax.
///
/// In the first phase the prior is the empirical frequency
/// `n_j / sum(n_m)`. In later phases every count is capped at the
/// per-class exemplar budget before normalizing, so a flood of new-class
/// data cannot crush the stored old classes' priors. `counts` are the
/// effective counts of the phase's training pool (new classes: full phase
/// count; old classes: retained exemplar count).
pub fn class_priors(counts: &[usize], cap: usize, first_phase: bool) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::parameter("class_priors needs at least one class"));
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::parameter(
            "class_priors needs a positive count for every active class",
        ));
    }
    let capped: Vec<f64> = if first_phase {
        counts.iter().map(|&n| n as f64).collect()
    } else {
        if cap == 0 {
            return Err(Error::parameter("prior cap must be positive after phase 0"));
        }
        counts.iter().map(|&n| n.min(cap) as f64).collect()
    };
    let total: f64 = capped.iter().sum();
    Ok(capped.into_iter().map(|n| n / total).collect())
}

/// Gradient of one sample's cross-entropy loss with respect to its logits:
/// `p - onehot(y)`.
pub fn grad_ce_logits(p: ArrayView1<f64>, y: usize) -> Result<Array1<f64>> {
    if y >= p.len() {
        return Err(Error::parameter(format!(
            "label {y} out of range for {} classes",
            p.len()
        )));
    }
    let mut g = p.to_owned();
    g[y] -= 1.0;
    Ok(g)
}

/// FC-layer gradient for one sample: the rank-one outer product
/// `x_feat (x) g_logits` (`d_f x c`), plus the feature gradient `w g_logits`
/// backpropagated toward the extractor.
pub fn grad_fc(
    w: &Array2<f64>,
    x_feat: ArrayView1<f64>,
    g_logits: ArrayView1<f64>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    if x_feat.len() != w.nrows() || g_logits.len() != w.ncols() {
        return Err(Error::parameter(format!(
            "grad_fc shapes: features {} vs rows {}, logit grads {} vs cols {}",
            x_feat.len(),
            w.nrows(),
            g_logits.len(),
            w.ncols()
        )));
    }
    let mut grad = Array2::zeros((w.nrows(), w.ncols()));
    for r in 0..w.nrows() {
        for c in 0..w.ncols() {
            grad[[r, c]] = x_feat[r] * g_logits[c];
        }
    }
    Ok((grad, w.dot(&g_logits)))
}

/// Mean-loss FC gradient for a batch: `(1/B) sum_k h_k (x) g_k`, computed
/// as `h^T g / B`. `per_sample_grads` rows must be per-sample logit
/// gradients of the *summed-then-averaged* loss (e.g. `p - onehot`).
pub fn grad_fc_batch(embeddings: &Array2<f64>, per_sample_grads: &Array2<f64>) -> Result<Array2<f64>> {
    if embeddings.nrows() != per_sample_grads.nrows() {
        return Err(Error::parameter(format!(
            "batch mismatch: {} embeddings vs {} gradient rows",
            embeddings.nrows(),
            per_sample_grads.nrows()
        )));
    }
    if embeddings.nrows() == 0 {
        return Err(Error::parameter("empty batch in grad_fc_batch"));
    }
    let b = embeddings.nrows() as f64;
    Ok(embeddings.t().dot(per_sample_grads) / b)
}

/// Compare an analytic gradient against central finite differences of
/// `loss` around `theta`, returning the largest guarded relative error
/// `|a - n| / max(1e-4, |a| + |n|)`.
///
/// The `1e-4` floor keeps finite-difference roundoff (about `1e-11` at
/// `epsilon = 1e-5` in double precision) from registering as a large
/// relative error on coordinates whose true gradient is near zero.
pub fn finite_difference_check(
    loss: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
    theta: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if analytic.len() != theta.len() {
        return Err(Error::parameter(format!(
            "analytic gradient has {} entries, parameters have {}",
            analytic.len(),
            theta.len()
        )));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::parameter(format!(
            "finite-difference epsilon must be finite and positive, got {epsilon}"
        )));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + epsilon;
        let up = loss(&probe);
        probe[i] = theta[i] - epsilon;
        let down = loss(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!(
                "loss became non-finite while probing parameter {i} (f+ = {up}, f- = {down})"
            )));
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    Ok(worst)
}
