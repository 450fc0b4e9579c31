//! Training objectives and their analytic gradients.
//!
//! Per-sample losses return a [`LossValue`] with a single [`SampleGrad`];
//! batch losses return one gradient per sample with the batch mean already
//! folded in, so per-sample parameter gradients can simply be summed.

use serde::{Deserialize, Serialize};

use crate::clusters::ClusterMeans;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{cosine_similarity_grad, log_softmax, softmax, squared_distance, Temperature};
use crate::scoring::ScoreGrad;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub logits: Vec<f64>,
    /// Direct gradient on each hidden layer's activations; empty when the
    /// loss does not touch hidden layers (or touches none of them).
    pub hidden: Vec<Vec<f64>>,
}

impl SampleGrad {
    pub fn logits_only(logits: Vec<f64>) -> Self {
        Self { logits, hidden: Vec::new() }
    }

    pub fn zeros(k: usize) -> Self {
        Self::logits_only(vec![0.0; k])
    }

    pub fn scale(&mut self, s: f64) {
        self.logits.iter_mut().for_each(|g| *g *= s);
        self.hidden.iter_mut().flatten().for_each(|g| *g *= s);
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &SampleGrad, s: f64) {
        for (a, b) in self.logits.iter_mut().zip(&other.logits) {
            *a += s * b;
        }
        if other.hidden.is_empty() {
            return;
        }
        if self.hidden.is_empty() {
            self.hidden = vec![Vec::new(); other.hidden.len()];
        }
        for (a, b) in self.hidden.iter_mut().zip(&other.hidden) {
            if b.is_empty() {
                continue;
            }
            if a.is_empty() {
                *a = vec![0.0; b.len()];
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.logits.iter().chain(self.hidden.iter().flatten()).all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<SampleGrad>,
}

impl LossValue {
    pub fn zeros(num_samples: usize, k: usize) -> Self {
        Self { value: 0.0, grads: vec![SampleGrad::zeros(k); num_samples] }
    }

    /// Batch mean of single-sample losses.
    pub fn mean(items: Vec<LossValue>) -> Result<LossValue> {
        if items.is_empty() {
            return Err(Error::Argument("cannot average an empty batch".into()));
        }
        let inv = 1.0 / items.len() as f64;
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(items.len());
        for item in items {
            value += item.value;
            for mut g in item.grads {
                g.scale(inv);
                grads.push(g);
            }
        }
        Ok(LossValue { value: value * inv, grads })
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.iter().all(SampleGrad::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub m_in: f64,
    pub m_out: f64,
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_in.is_finite() && self.m_out.is_finite() {
            Ok(())
        } else {
            Err(Error::Config("margins must be finite".into()))
        }
    }

    /// True when the in-margin is not below the out-margin, which is legal but unusual.
    pub fn is_inverted(&self) -> bool {
        self.m_in >= self.m_out
    }
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { m_in: -25.0, m_out: -7.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    Scalar(f64),
    PerClass(Vec<f64>),
}

impl Alpha {
    pub fn for_class(&self, class: usize) -> f64 {
        match self {
            Alpha::Scalar(a) => *a,
            Alpha::PerClass(v) => v[class],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: Alpha,
}

impl FocalConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        let alphas: &[f64] = match &self.alpha {
            Alpha::Scalar(a) => std::slice::from_ref(a),
            Alpha::PerClass(v) => {
                check_dim(num_classes, v.len())?;
                v
            }
        };
        if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alpha weights must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: Alpha::Scalar(1.0) }
    }
}

fn check_label(label: usize, k: usize) -> Result<()> {
    if label < k {
        Ok(())
    } else {
        Err(Error::Label { label, num_classes: k })
    }
}

/// `−log softmax(z / t)[label]`, gradient `(softmax − onehot) / t`.
pub fn cross_entropy(logits: &[f64], label: usize, t: Temperature) -> Result<LossValue> {
    check_label(label, logits.len())?;
    let logp = log_softmax(logits, t)?;
    let mut grad = softmax(logits, t)?;
    grad[label] -= 1.0;
    grad.iter_mut().for_each(|g| *g /= t.value());
    Ok(LossValue { value: -logp[label], grads: vec![SampleGrad::logits_only(grad)] })
}

/// `−α (1 − S)^γ log S` for a probability `S ∈ (0, 1]`.
pub fn focal_from_probability(s: f64, gamma: f64, alpha: f64) -> f64 {
    -alpha * (1.0 - s).powf(gamma) * s.ln()
}

/// Cluster Focal Loss over the softmax of scaled cosine similarities to the
/// class means. `M` is treated as a constant.
pub fn cluster_focal_loss(
    logits: &[f64],
    label: usize,
    means: &ClusterMeans,
    cfg: &FocalConfig,
    scale: f64,
) -> Result<LossValue> {
    let k = logits.len();
    check_label(label, k)?;
    check_dim(means.num_classes(), k)?;
    let mut sims = Vec::with_capacity(k);
    let mut sim_grads = Vec::with_capacity(k);
    for i in 0..k {
        let (s, g) = cosine_similarity_grad(logits, means.row(i))?;
        sims.push(scale * s);
        sim_grads.push(g);
    }
    let logp = log_softmax(&sims, Temperature::ONE)?;
    let p = softmax(&sims, Temperature::ONE)?;
    let log_s = logp[label];
    let s = log_s.exp();
    let one_minus = -log_s.exp_m1();
    let alpha = cfg.alpha.for_class(label);
    let gamma = cfg.gamma;

    let value = -alpha * one_minus.powf(gamma) * log_s;

    // ∂L/∂log S = −α [ (1−S)^γ − γ (1−S)^(γ−1) S log S ]
    let focus = if gamma == 0.0 || one_minus == 0.0 {
        0.0
    } else {
        gamma * one_minus.powf(gamma - 1.0) * s * log_s
    };
    let d_log_s = -alpha * (one_minus.powf(gamma) - focus);

    let mut grad = vec![0.0; k];
    for j in 0..k {
        let onehot = if j == label { 1.0 } else { 0.0 };
        let d_u = d_log_s * (onehot - p[j]) * scale;
        for (g, sg) in grad.iter_mut().zip(&sim_grads[j]) {
            *g += d_u * sg;
        }
    }
    Ok(LossValue { value, grads: vec![SampleGrad::logits_only(grad)] })
}

/// Inter-intra baseline: mean squared distance of each sample to its class
/// mean, minus the smallest squared distance between two class means.
pub fn ii_loss(batch: &[(&[f64], usize)], means: &ClusterMeans) -> Result<LossValue> {
    let k = means.num_classes();
    if k < 2 {
        return Err(Error::Config("ii-loss needs at least two classes".into()));
    }
    if batch.is_empty() {
        return Err(Error::Argument("ii-loss needs a nonempty batch".into()));
    }
    let mut inter = f64::INFINITY;
    for i in 0..k {
        for j in (i + 1)..k {
            inter = inter.min(squared_distance(means.row(i), means.row(j)));
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let mut intra = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for &(f, y) in batch {
        check_label(y, k)?;
        check_dim(k, f.len())?;
        let m = means.row(y);
        intra += squared_distance(f, m);
        grads.push(SampleGrad::logits_only(
            f.iter().zip(m).map(|(a, b)| 2.0 * (a - b) * inv).collect(),
        ));
    }
    Ok(LossValue { value: intra * inv - inter, grads })
}

/// Squared dual-margin hinge and its gradient with respect to each score.
#[derive(Debug, Clone, PartialEq)]
pub struct HingeLoss {
    pub value: f64,
    pub grad_in: Vec<f64>,
    pub grad_out: Vec<f64>,
}

pub fn semantic_energy_hinge_loss(
    score_in: &[f64],
    score_out: &[f64],
    margins: &MarginConfig,
) -> Result<HingeLoss> {
    if score_in.is_empty() && score_out.is_empty() {
        return Err(Error::Argument("hinge loss needs at least one score".into()));
    }
    let mut value = 0.0;
    let mut grad_in = Vec::with_capacity(score_in.len());
    if !score_in.is_empty() {
        let n = score_in.len() as f64;
        let mut acc = 0.0;
        for &e in score_in {
            let gap = (e - margins.m_in).max(0.0);
            acc += gap * gap;
            grad_in.push(2.0 * gap / n);
        }
        value += acc / n;
    }
    let mut grad_out = Vec::with_capacity(score_out.len());
    if !score_out.is_empty() {
        let n = score_out.len() as f64;
        let mut acc = 0.0;
        for &e in score_out {
            let gap = (margins.m_out - e).max(0.0);
            acc += gap * gap;
            grad_out.push(-2.0 * gap / n);
        }
        value += acc / n;
    }
    Ok(HingeLoss { value, grad_in, grad_out })
}

impl HingeLoss {
    /// Pushes the score gradients through per-sample score derivatives.
    /// The resulting grads list holds the in-samples first, then the out-samples.
    pub fn chain(&self, in_scores: &[ScoreGrad], out_scores: &[ScoreGrad]) -> Result<LossValue> {
        check_dim(self.grad_in.len(), in_scores.len())?;
        check_dim(self.grad_out.len(), out_scores.len())?;
        let grads = self
            .grad_in
            .iter()
            .zip(in_scores)
            .chain(self.grad_out.iter().zip(out_scores))
            .map(|(&d, sg)| {
                let mut g = SampleGrad { logits: sg.logits.clone(), hidden: sg.hidden.clone() };
                g.scale(d);
                g
            })
            .collect();
        Ok(LossValue { value: self.value, grads })
    }
}

/// `ce + λ·sem`, gradients combined sample by sample.
pub fn joint_objective(ce: &LossValue, sem_energy: &LossValue, lambda: f64) -> Result<LossValue> {
    check_dim(ce.grads.len(), sem_energy.grads.len())?;
    let grads = ce
        .grads
        .iter()
        .zip(&sem_energy.grads)
        .map(|(a, b)| {
            let mut g = a.clone();
            g.add_scaled(b, lambda);
            g
        })
        .collect();
    Ok(LossValue { value: ce.value + lambda * sem_energy.value, grads })
}
