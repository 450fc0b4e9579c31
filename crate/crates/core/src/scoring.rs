//! Energy scores, the threshold detector, and score CSV export.
//!
//! Sign conventions: an [`EnergyScore`] value is an energy, so lower means
//! more in-distribution. Thresholds, metrics and the exported CSV work in the
//! negated convention (`-E`, higher means more in-distribution).

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::clusters::ClusterMeans;
use crate::data::Dist;
use crate::error::{check_dim, Error, Result};
use crate::network::ForwardTrace;
use crate::numerics::{cosine_similarity, cosine_similarity_grad, logsumexp, softmax, Temperature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Vanilla,
    Semantic,
    MultilayerSemantic,
    SoftmaxBaseline,
}

impl Scorer {
    pub const ALL: [Scorer; 4] =
        [Scorer::Vanilla, Scorer::Semantic, Scorer::MultilayerSemantic, Scorer::SoftmaxBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::Vanilla => "vanilla",
            Scorer::Semantic => "semantic",
            Scorer::MultilayerSemantic => "multilayer_semantic",
            Scorer::SoftmaxBaseline => "softmax_baseline",
        }
    }

    pub fn needs_means(self) -> bool {
        matches!(self, Scorer::Semantic | Scorer::MultilayerSemantic)
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scorer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown scorer '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyScore {
    pub value: f64,
    pub scorer: Scorer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergyConfig {
    pub layer_indices: Vec<usize>,
    pub layer_weights: Vec<f64>,
}

impl LayerEnergyConfig {
    /// Last two hidden layers, weight 1 each.
    pub fn last_two(num_hidden: usize) -> Self {
        let start = num_hidden.saturating_sub(2);
        let layer_indices: Vec<usize> = (start..num_hidden).collect();
        let layer_weights = vec![1.0; layer_indices.len()];
        Self { layer_indices, layer_weights }
    }

    pub fn validate(&self, num_hidden: usize) -> Result<()> {
        if self.layer_indices.len() != self.layer_weights.len() {
            return Err(Error::Config(format!(
                "{} layer indices but {} layer weights",
                self.layer_indices.len(),
                self.layer_weights.len()
            )));
        }
        if let Some(&bad) = self.layer_indices.iter().find(|&&i| i >= num_hidden) {
            return Err(Error::Config(format!(
                "layer index {bad} out of range for {num_hidden} hidden layers"
            )));
        }
        if self.layer_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("layer weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for LayerEnergyConfig {
    fn default() -> Self {
        Self::last_two(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorThreshold {
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detection {
    InDistribution,
    OutOfDistribution,
}

/// `-t · log Σ exp(v_i / t)`.
pub fn free_energy(logits: &[f64], t: Temperature) -> Result<EnergyScore> {
    let value = -t.value() * logsumexp(logits, t)?;
    Ok(EnergyScore { value, scorer: Scorer::Vanilla })
}

/// Free energy and `∂E/∂v = −softmax(v / t)`.
pub fn free_energy_grad(v: &[f64], t: Temperature) -> Result<(f64, Vec<f64>)> {
    let value = -t.value() * logsumexp(v, t)?;
    let grad = softmax(v, t)?.into_iter().map(|p| -p).collect();
    Ok((value, grad))
}

fn check_means(logits: &[f64], means: &ClusterMeans) -> Result<()> {
    check_dim(means.num_classes(), logits.len())
}

/// `Z_i = cos(f, M_i) · f_i`.
pub fn scaled_logits(logits: &[f64], means: &ClusterMeans) -> Result<Vec<f64>> {
    check_means(logits, means)?;
    logits
        .iter()
        .enumerate()
        .map(|(i, f)| Ok(cosine_similarity(logits, means.row(i))? * f))
        .collect()
}

/// Free energy over the similarity-weighted logits.
pub fn semantic_energy(logits: &[f64], means: &ClusterMeans, t: Temperature) -> Result<EnergyScore> {
    let z = scaled_logits(logits, means)?;
    let value = -t.value() * logsumexp(&z, t)?;
    Ok(EnergyScore { value, scorer: Scorer::Semantic })
}

/// Semantic energy and its gradient with respect to the logits; `M` is constant.
pub fn semantic_energy_grad(
    logits: &[f64],
    means: &ClusterMeans,
    t: Temperature,
) -> Result<(f64, Vec<f64>)> {
    check_means(logits, means)?;
    let k = logits.len();
    let mut sims = Vec::with_capacity(k);
    let mut sim_grads = Vec::with_capacity(k);
    for i in 0..k {
        let (s, g) = cosine_similarity_grad(logits, means.row(i))?;
        sims.push(s);
        sim_grads.push(g);
    }
    let z: Vec<f64> = sims.iter().zip(logits).map(|(s, f)| s * f).collect();
    let (value, dz) = free_energy_grad(&z, t)?;
    // ∂E/∂f_j = dz_j·sim_j + Σ_i dz_i·f_i·∂sim_i/∂f_j
    let mut grad: Vec<f64> = dz.iter().zip(&sims).map(|(d, s)| d * s).collect();
    for i in 0..k {
        let coeff = dz[i] * logits[i];
        for (g, sg) in grad.iter_mut().zip(&sim_grads[i]) {
            *g += coeff * sg;
        }
    }
    Ok((value, grad))
}

/// Final-layer semantic energy plus weighted vanilla energies of selected hidden layers.
pub fn multilayer_semantic_energy(
    trace: &ForwardTrace,
    means: &ClusterMeans,
    cfg: &LayerEnergyConfig,
    t: Temperature,
) -> Result<EnergyScore> {
    cfg.validate(trace.per_layer_activations.len())?;
    let mut value = semantic_energy(&trace.logits, means, t)?.value;
    for (&l, &w) in cfg.layer_indices.iter().zip(&cfg.layer_weights) {
        value += w * free_energy(&trace.per_layer_activations[l], t)?.value;
    }
    Ok(EnergyScore { value, scorer: Scorer::MultilayerSemantic })
}

/// Gradient of a score with respect to a trace's logits and hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrad {
    pub value: f64,
    pub logits: Vec<f64>,
    /// One entry per hidden layer; empty where the score has no direct dependence.
    pub hidden: Vec<Vec<f64>>,
}

pub fn multilayer_semantic_energy_grad(
    trace: &ForwardTrace,
    means: &ClusterMeans,
    cfg: &LayerEnergyConfig,
    t: Temperature,
) -> Result<ScoreGrad> {
    let n_hidden = trace.per_layer_activations.len();
    cfg.validate(n_hidden)?;
    let (mut value, logits) = semantic_energy_grad(&trace.logits, means, t)?;
    let mut hidden: Vec<Vec<f64>> = vec![Vec::new(); n_hidden];
    for (&l, &w) in cfg.layer_indices.iter().zip(&cfg.layer_weights) {
        let act = &trace.per_layer_activations[l];
        let (e, g) = free_energy_grad(act, t)?;
        value += w * e;
        let slot = &mut hidden[l];
        if slot.is_empty() {
            *slot = vec![0.0; act.len()];
        }
        for (s, gi) in slot.iter_mut().zip(g) {
            *s += w * gi;
        }
    }
    Ok(ScoreGrad { value, logits, hidden })
}

/// `−max softmax(v)`, so that lower still means in-distribution.
pub fn softmax_baseline(logits: &[f64], t: Temperature) -> Result<EnergyScore> {
    let p = softmax(logits, t)?;
    let max = p.into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(EnergyScore { value: -max, scorer: Scorer::SoftmaxBaseline })
}

/// Everything a scorer might need for one sample.
pub struct ScoreInputs<'a> {
    pub logits: &'a [f64],
    pub trace: Option<&'a ForwardTrace>,
    pub means: Option<&'a ClusterMeans>,
    pub layers: &'a LayerEnergyConfig,
    pub temperature: Temperature,
}

impl Scorer {
    pub fn score(self, inp: &ScoreInputs<'_>) -> Result<EnergyScore> {
        let means = || {
            inp.means
                .ok_or_else(|| Error::Config(format!("scorer {self} requires cluster means")))
        };
        match self {
            Scorer::Vanilla => free_energy(inp.logits, inp.temperature),
            Scorer::SoftmaxBaseline => softmax_baseline(inp.logits, inp.temperature),
            Scorer::Semantic => semantic_energy(inp.logits, means()?, inp.temperature),
            Scorer::MultilayerSemantic => {
                let trace = inp.trace.ok_or_else(|| {
                    Error::Config("multilayer_semantic scoring needs hidden activations".into())
                })?;
                multilayer_semantic_energy(trace, means()?, inp.layers, inp.temperature)
            }
        }
    }
}

/// In-distribution iff `−E > τ`; the boundary `−E = τ` is out-of-distribution.
pub fn detect(score: &EnergyScore, tau: DetectorThreshold) -> Detection {
    if -score.value > tau.tau {
        Detection::InDistribution
    } else {
        Detection::OutOfDistribution
    }
}

/// Threshold over raw "higher = in" scores such that at least
/// `⌈target_tpr·n⌉` of them lie strictly above it.
pub(crate) fn threshold_from_scores(scores: &[f64], target_tpr: f64) -> Result<DetectorThreshold> {
    if scores.is_empty() {
        return Err(Error::Argument("threshold selection needs at least one score".into()));
    }
    if !(target_tpr > 0.0 && target_tpr < 1.0) {
        return Err(Error::Argument(format!("target_tpr must lie in (0, 1), got {target_tpr}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let n = scores.len();
    let k = required_passes(n, target_tpr);
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(DetectorThreshold { tau: sorted[k - 1].next_down() })
}

/// `⌈p·n⌉`, guarded against representation error in `p·n`, clamped to `1..=n`.
pub fn required_passes(n: usize, target_tpr: f64) -> usize {
    let raw = target_tpr * n as f64;
    let k = (raw - raw.abs() * 1e-12).ceil() as usize;
    k.clamp(1, n)
}

pub fn select_threshold(in_scores: &[EnergyScore], target_tpr: f64) -> Result<DetectorThreshold> {
    let first = in_scores
        .first()
        .ok_or_else(|| Error::Argument("threshold selection needs at least one score".into()))?;
    if in_scores.iter().any(|s| s.scorer != first.scorer) {
        return Err(Error::Argument("scores from different scorers cannot be mixed".into()));
    }
    let negated: Vec<f64> = in_scores.iter().map(|s| -s.value).collect();
    threshold_from_scores(&negated, target_tpr)
}

/// One row of the score CSV. `score` is in the "higher = in" convention:
/// `−E` for energy scorers, the max softmax probability for the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: String,
    pub label: Option<usize>,
    pub dist: Dist,
    pub scorer: Scorer,
    pub score: f64,
}

impl ScoreRow {
    pub fn from_energy(sample_id: String, label: Option<usize>, dist: Dist, e: EnergyScore) -> Self {
        Self { sample_id, label, dist, scorer: e.scorer, score: -e.value }
    }
}

pub const SCORE_CSV_HEADER: &str = "sample_id,label,split,scorer,score";

/// 17 significant digits; round-trips every finite `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn format_label(label: Option<usize>) -> String {
    label.map_or_else(|| "-".to_string(), |l| l.to_string())
}

pub(crate) fn parse_label(s: &str, line: u64) -> Result<Option<usize>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Parse { line, message: format!("bad label '{s}'") })
}

pub(crate) fn parse_float(s: &str, line: u64) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Parse { line, message: format!("bad number '{s}'") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("non-finite number '{s}'") });
    }
    Ok(v)
}

pub fn write_score_csv<W: Write>(mut w: W, rows: &[ScoreRow]) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(SCORE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sample_id,
            format_label(r.label),
            r.dist,
            r.scorer,
            format_float(r.score)
        ));
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_score_csv<R: Read>(r: R) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != SCORE_CSV_HEADER {
        return Err(Error::Format { line: 1, message: format!("expected header '{SCORE_CSV_HEADER}'") });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 5 {
            return Err(Error::Format { line, message: format!("expected 5 columns, got {}", rec.len()) });
        }
        rows.push(ScoreRow {
            sample_id: rec[0].to_string(),
            label: parse_label(&rec[1], line)?,
            dist: rec[2].parse().map_err(|_| Error::Parse { line, message: format!("bad split '{}'", &rec[2]) })?,
            scorer: rec[3].parse().map_err(|_| Error::Parse { line, message: format!("bad scorer '{}'", &rec[3]) })?,
            score: parse_float(&rec[4], line)?,
        });
    }
    Ok(rows)
}
