//! Supervision and distillation losses.
//!
//! Each loss returns its batch-mean value together with the gradient with
//! respect to the student logits, ready to be fed to [`Model::backward`].

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Model};
use crate::scalar::Scalar;

/// Loss value and gradient w.r.t. the logits it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Array2<T>,
}

/// Per-class label proportions of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelProportions<T> {
    beta: Vec<T>,
}

impl<T: Scalar> LabelProportions<T> {
    pub fn new(beta: Vec<T>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Empty("label proportions"));
        }
        if beta.iter().any(|b| !b.is_finite() || *b < T::zero() || *b > T::one()) {
            return Err(Error::InvalidArgument("proportions must lie in [0, 1]".into()));
        }
        let total: T = beta.iter().copied().sum();
        if (total - T::one()).abs() > T::of(1e-6) {
            return Err(Error::InvalidArgument(format!("proportions sum to {total}, not 1")));
        }
        Ok(Self { beta })
    }

    /// Normalized histogram of `counts`.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("label histogram"));
        }
        let n = T::of(total as f64);
        Self::new(counts.iter().map(|&c| T::of(c as f64) / n).collect())
    }

    pub fn uniform(num_classes: usize) -> Self {
        let p = T::one() / T::of(num_classes as f64);
        Self {
            beta: vec![p; num_classes],
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.beta
    }

    pub fn num_classes(&self) -> usize {
        self.beta.len()
    }

    pub fn present(&self) -> Vec<bool> {
        self.beta.iter().map(|&b| b > T::zero()).collect()
    }
}

/// Which supervision signal drives local fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Ce,
    #[default]
    Wsm,
    Ace,
}

impl Supervision {
    pub fn evaluate<T: Scalar>(
        self,
        logits: ArrayView2<'_, T>,
        labels: &[usize],
        beta: &LabelProportions<T>,
    ) -> Result<LossOutput<T>> {
        match self {
            Supervision::Ce => cross_entropy(logits, labels),
            Supervision::Wsm => wsm_loss(logits, labels, beta),
            Supervision::Ace => ace_loss(logits, labels, &beta.present()),
        }
    }
}

/// How teacher KL terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlWeighting {
    #[default]
    SizeWeighted,
    VanillaAverage,
}

/// A teacher's logits on the shared batch and its trainable parameter count.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a, T> {
    pub logits: ArrayView2<'a, T>,
    pub phi: usize,
}

fn check_batch<T: Scalar>(logits: &ArrayView2<'_, T>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(Error::shape("labels", logits.nrows(), labels.len()));
    }
    if logits.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.ncols()) {
        return Err(Error::InvalidLabel {
            label: bad,
            reason: "outside [0, C)",
        });
    }
    Ok(())
}

/// Masked, weighted cross-entropy core shared by CE, WSM and ACE.
///
/// Per row: `-(z_y - log sum_c w_c exp(z_c))` over classes with `w_c > 0`;
/// gradient `w_c exp(z_c) / sum - onehot(y)`. Classes with zero weight are
/// excluded from the partition function and receive zero gradient.
fn weighted_ce<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize], weights: &[T]) -> LossOutput<T> {
    let batch = T::of(labels.len() as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = T::zero();
    for ((row, mut g), &y) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(labels) {
        let max = row
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > T::zero())
            .map(|(&z, _)| z)
            .fold(T::neg_infinity(), T::max);
        let mut partition = T::zero();
        for ((&z, &w), gc) in row.iter().zip(weights).zip(g.iter_mut()) {
            if w > T::zero() {
                let e = w * (z - max).exp();
                *gc = e;
                partition += e;
            }
        }
        total += max + partition.ln() - row[y];
        g.mapv_inplace(|e| e / partition);
        g[y] -= T::one();
    }
    grad.mapv_inplace(|v| v / batch);
    LossOutput {
        loss: total / batch,
        grad,
    }
}

/// Mean softmax cross-entropy.
pub fn cross_entropy<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<LossOutput<T>> {
    check_batch(&logits, labels)?;
    let ones = vec![T::one(); logits.ncols()];
    Ok(weighted_ce(logits, labels, &ones))
}

/// Re-weighted softmax cross-entropy: the partition function weights class
/// `c` by its proportion `beta_c` in the data the batch was drawn from.
pub fn wsm_loss<T: Scalar>(
    logits: ArrayView2<'_, T>,
    labels: &[usize],
    beta: &LabelProportions<T>,
) -> Result<LossOutput<T>> {
    check_batch(&logits, labels)?;
    if beta.num_classes() != logits.ncols() {
        return Err(Error::shape("wsm proportions", logits.ncols(), beta.num_classes()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| beta.as_slice()[y] <= T::zero()) {
        return Err(Error::InvalidLabel {
            label: bad,
            reason: "class has zero proportion in the sampling data",
        });
    }
    Ok(weighted_ce(logits, labels, beta.as_slice()))
}

/// Cross-entropy with the softmax restricted to `present` classes.
pub fn ace_loss<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize], present: &[bool]) -> Result<LossOutput<T>> {
    check_batch(&logits, labels)?;
    if present.len() != logits.ncols() {
        return Err(Error::shape("ace class mask", logits.ncols(), present.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| !present[y]) {
        return Err(Error::InvalidLabel {
            label: bad,
            reason: "class not in the present set",
        });
    }
    let mask: Vec<T> = present
        .iter()
        .map(|&p| if p { T::one() } else { T::zero() })
        .collect();
    Ok(weighted_ce(logits, labels, &mask))
}

/// Row-wise `log softmax(logits / temperature)`.
fn log_softmax<T: Scalar>(logits: ArrayView2<'_, T>, temperature: T) -> Array2<T> {
    let mut out = logits.mapv(|z| z / temperature);
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        row.mapv_inplace(|z| z - lse);
    }
    out
}

/// Normalized teacher weights: parameter-count proportional or uniform.
pub fn teacher_weights<T: Scalar>(phis: &[usize], weighting: KlWeighting) -> Vec<T> {
    match weighting {
        KlWeighting::SizeWeighted => {
            let total = T::of(phis.iter().sum::<usize>() as f64);
            phis.iter().map(|&p| T::of(p as f64) / total).collect()
        }
        KlWeighting::VanillaAverage => {
            let w = T::one() / T::of(phis.len() as f64);
            vec![w; phis.len()]
        }
    }
}

/// Weighted multi-teacher KL divergence `sum_q w_q KL(p_q || p_student)`,
/// averaged over the batch. Teachers are constants; no gradient reaches them.
pub fn kl_distill<T: Scalar>(
    student: ArrayView2<'_, T>,
    teachers: &[Teacher<'_, T>],
    temperature: T,
    weighting: KlWeighting,
) -> Result<LossOutput<T>> {
    if teachers.is_empty() {
        return Err(Error::Empty("teacher set"));
    }
    if temperature.is_nan() || temperature <= T::zero() {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if student.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    if student.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("student logits"));
    }
    for t in teachers {
        if t.logits.dim() != student.dim() {
            return Err(Error::shape("teacher logits", student.dim(), t.logits.dim()));
        }
        if t.phi == 0 {
            return Err(Error::InvalidArgument("teacher parameter count must be positive".into()));
        }
        if t.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("teacher logits"));
        }
    }

    let phis: Vec<usize> = teachers.iter().map(|t| t.phi).collect();
    let weights: Vec<T> = teacher_weights(&phis, weighting);
    let log_student = log_softmax(student, temperature);
    let student_prob = log_student.mapv(T::exp);

    let mut loss = T::zero();
    let mut mixture = Array2::<T>::zeros(student.raw_dim());
    for (teacher, &w) in teachers.iter().zip(&weights) {
        let log_teacher = log_softmax(teacher.logits, temperature);
        for ((&lt, &ls), m) in log_teacher.iter().zip(log_student.iter()).zip(mixture.iter_mut()) {
            let p = lt.exp();
            if p > T::zero() {
                loss += w * p * (lt - ls);
            }
            *m += w * p;
        }
    }

    let batch = T::of(student.nrows() as f64);
    let scale = T::one() / (temperature * batch);
    let mut grad = student_prob;
    grad.zip_mut_with(&mixture, |g, &m| *g = (*g - m) * scale);
    Ok(LossOutput {
        loss: loss / batch,
        grad,
    })
}

/// `gamma * supervision + alpha * distillation` for value and gradient.
pub fn scaled_sum<T: Scalar>(
    gamma: T,
    supervision: &LossOutput<T>,
    alpha: T,
    distillation: &LossOutput<T>,
) -> Result<LossOutput<T>> {
    if supervision.grad.dim() != distillation.grad.dim() {
        return Err(Error::shape(
            "composite gradients",
            supervision.grad.dim(),
            distillation.grad.dim(),
        ));
    }
    let mut grad = supervision.grad.mapv(|g| gamma * g);
    grad.scaled_add(alpha, &distillation.grad);
    Ok(LossOutput {
        loss: gamma * supervision.loss + alpha * distillation.loss,
        grad,
    })
}

/// `(1 - alpha) * supervision + alpha * distillation`.
pub fn composite_objective<T: Scalar>(
    alpha: T,
    supervision: &LossOutput<T>,
    distillation: &LossOutput<T>,
) -> Result<LossOutput<T>> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == T::zero() {
        return Ok(supervision.clone());
    }
    if alpha == T::one() {
        return Ok(distillation.clone());
    }
    scaled_sum(T::one() - alpha, supervision, alpha, distillation)
}

/// Proximal penalty `mu/2 * ||w - anchor||^2` and its parameter gradient.
pub fn prox_term<T: Scalar>(model: &Model<T>, anchor: &Model<T>, mu: T) -> Result<(T, Gradients<T>)> {
    if !model.same_architecture(anchor) {
        return Err(Error::ArchitectureMismatch("proximal anchor".into()));
    }
    if mu < T::zero() {
        return Err(Error::InvalidArgument("mu must be non-negative".into()));
    }
    let mut loss = T::zero();
    let mut layers = Vec::with_capacity(model.layers().len());
    for (w, a) in model.layers().iter().zip(anchor.layers()) {
        let mut diff = w.clone();
        diff.weight -= &a.weight;
        diff.bias -= &a.bias;
        loss += diff.weight.iter().chain(diff.bias.iter()).map(|&d| d * d).sum::<T>();
        diff.weight.mapv_inplace(|d| mu * d);
        diff.bias.mapv_inplace(|d| mu * d);
        layers.push(diff);
    }
    Ok((mu / T::of(2.0) * loss, Gradients { layers }))
}

/// Index of the largest logit; ties resolve to the lowest class.
pub fn argmax<T: Scalar>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
