//! OOD evaluation metrics. Scores follow the "higher = more in-distribution"
//! convention throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{threshold_from_scores, DetectorThreshold};

pub const DEFAULT_BINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub is_in: bool,
}

impl ScoredSample {
    pub fn new(score: f64, is_in: bool) -> Self {
        Self { score, is_in }
    }
}

/// Which class AUPR treats as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveClass {
    #[default]
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub overlap: f64,
    pub tau: f64,
    pub n_in: usize,
    pub n_out: usize,
}

fn split(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let ins: Vec<f64> = samples.iter().filter(|s| s.is_in).map(|s| s.score).collect();
    let outs: Vec<f64> = samples.iter().filter(|s| !s.is_in).map(|s| s.score).collect();
    if ins.is_empty() || outs.is_empty() {
        return Err(Error::Argument(
            "evaluation needs both in- and out-of-distribution samples".into(),
        ));
    }
    Ok((ins, outs))
}

/// Fraction of out-samples accepted at the threshold that keeps `target_tpr`
/// of the in-samples, together with that threshold.
pub fn fpr_at_tpr(samples: &[ScoredSample], target_tpr: f64) -> Result<(f64, DetectorThreshold)> {
    let (ins, outs) = split(samples)?;
    let tau = threshold_from_scores(&ins, target_tpr)?;
    let accepted = outs.iter().filter(|&&s| s > tau.tau).count();
    Ok((accepted as f64 / outs.len() as f64, tau))
}

/// Mann–Whitney AUROC with half credit for ties.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (ins, outs) = split(samples)?;
    let mut sorted: Vec<ScoredSample> = samples.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Twice the U statistic, accumulated in integers so ties stay exact.
    let mut twice_u: u128 = 0;
    let mut outs_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut n_in, mut n_out) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].is_in {
                n_in += 1;
            } else {
                n_out += 1;
            }
            j += 1;
        }
        twice_u += n_in * (2 * outs_below + n_out);
        outs_below += n_out;
        i = j;
    }
    let pairs = ins.len() as f64 * outs.len() as f64;
    Ok(twice_u as f64 / (2.0 * pairs))
}

/// Step-wise area under the precision/recall curve, one step per distinct score.
pub fn aupr(samples: &[ScoredSample]) -> Result<f64> {
    aupr_with(samples, PositiveClass::In)
}

pub fn aupr_with(samples: &[ScoredSample], positive: PositiveClass) -> Result<f64> {
    split(samples)?;
    let mut ranked: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| match positive {
            PositiveClass::In => (s.score, s.is_in),
            PositiveClass::Out => (-s.score, !s.is_in),
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = ranked.iter().filter(|r| r.1).count() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < ranked.len() {
        let s = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == s {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Normalized histograms of both score lists over their joint range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_centers: Vec<f64>,
    pub h_in: Vec<f64>,
    pub h_out: Vec<f64>,
}

pub fn histogram(in_scores: &[f64], out_scores: &[f64], bins: usize) -> Result<Histogram> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::Argument("histogram needs both score lists nonempty".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("bins must be positive".into()));
    }
    let all = in_scores.iter().chain(out_scores);
    if all.clone().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let bin_of = |x: f64| -> usize {
        if width > 0.0 {
            (((x - lo) / width) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let fill = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            h[bin_of(x)] += 1.0;
        }
        let n = xs.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    };
    let bin_centers = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    Ok(Histogram { bin_centers, h_in: fill(in_scores), h_out: fill(out_scores) })
}

/// Histogram intersection `Σ_b min(h_in[b], h_out[b])`.
pub fn overlap_coefficient(in_scores: &[f64], out_scores: &[f64], bins: usize) -> Result<f64> {
    let h = histogram(in_scores, out_scores, bins)?;
    let s: f64 = h.h_in.iter().zip(&h.h_out).map(|(a, b)| a.min(*b)).sum();
    Ok(s.clamp(0.0, 1.0))
}

pub fn evaluate(samples: &[ScoredSample], target_tpr: f64, bins: usize) -> Result<EvalReport> {
    let (ins, outs) = split(samples)?;
    let (fpr95, tau) = fpr_at_tpr(samples, target_tpr)?;
    Ok(EvalReport {
        fpr95,
        auroc: auroc(samples)?,
        aupr: aupr(samples)?,
        overlap: overlap_coefficient(&ins, &outs, bins)?,
        tau: tau.tau,
        n_in: ins.len(),
        n_out: outs.len(),
    })
}
