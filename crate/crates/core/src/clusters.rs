//! Class mean-activation vectors, one mean logit vector per class.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_EMA_DECAY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMeans {
    /// `means[i]` is the mean logit vector of class `i`; K rows of dimension K.
    pub means: Vec<Vec<f64>>,
    pub ema_decay: f64,
    /// Per-class sample totals seen by [`init_means`].
    #[serde(default)]
    pub counts: Vec<u64>,
}

impl ClusterMeans {
    /// Wraps an existing K×K matrix after validating its shape and entries.
    pub fn from_matrix(means: Vec<Vec<f64>>, ema_decay: f64) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(Error::Empty("cluster means"));
        }
        for row in &means {
            check_dim(k, row.len())?;
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cluster means"));
        }
        check_decay(ema_decay)?;
        Ok(Self { means, ema_decay, counts: vec![0; k] })
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    /// For each class present in `batch`, `M_i ← d·M_i + (1−d)·mean_i`.
    pub fn ema_update<'a, I>(&mut self, batch: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        let k = self.num_classes();
        let (sums, counts) = class_sums(batch, k)?;
        let d = self.ema_decay;
        for (class, (sum, n)) in sums.into_iter().zip(counts).enumerate() {
            if n == 0 {
                continue;
            }
            let inv = 1.0 / n as f64;
            for (m, s) in self.means[class].iter_mut().zip(sum) {
                *m = d * *m + (1.0 - d) * (s * inv);
            }
        }
        Ok(())
    }
}

fn check_decay(d: f64) -> Result<()> {
    if d.is_finite() && (0.0..1.0).contains(&d) {
        Ok(())
    } else {
        Err(Error::Argument(format!("ema_decay must lie in [0, 1), got {d}")))
    }
}

fn class_sums<'a, I>(batch: I, k: usize) -> Result<(Vec<Vec<f64>>, Vec<u64>)>
where
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    let mut sums = vec![vec![0.0; k]; k];
    let mut counts = vec![0u64; k];
    for (logits, label) in batch {
        if label >= k {
            return Err(Error::Label { label, num_classes: k });
        }
        check_dim(k, logits.len())?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        for (s, z) in sums[label].iter_mut().zip(logits) {
            *s += z;
        }
        counts[label] += 1;
    }
    Ok((sums, counts))
}

/// Arithmetic mean of the logit vectors of each class.
///
/// Every class in `0..num_classes` must occur at least once.
pub fn init_means<'a, I>(samples: I, num_classes: usize, ema_decay: f64) -> Result<ClusterMeans>
where
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    check_decay(ema_decay)?;
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let (sums, counts) = class_sums(samples, num_classes)?;
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Init { class });
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    Ok(ClusterMeans { means, ema_decay, counts })
}
