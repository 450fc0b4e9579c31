//! Subcommand implementations behind the `semood` binary.
//!
//! Each `cmd_*` works on in-memory values so it can be driven from tests; the
//! binary only handles argument parsing and file IO.

mod config;
mod train;

pub use config::{ClusterInit, ClusterLoss, Mode, TrainConfig};
pub use train::{batch_objective, parameter_gradients, train, BatchObjective, EpochLog, Phase, TrainEvent};

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::checkpoint::Model;
use crate::data::{Dataset, Dist, LogitRow, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, histogram, EvalReport, Histogram, ScoredSample};
use crate::scoring::{format_float, threshold_from_scores, ScoreRow, Scorer};

pub const DEFAULT_TARGET_TPR: f64 = 0.95;

/// Trains and returns the model; epoch logs go to `log` as JSON lines and
/// warnings are collected into the returned list.
pub fn cmd_train<W: Write>(config: &TrainConfig, dataset: &Dataset, mut log: W) -> Result<(Model, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut io_err = None;
    let model = train(config, dataset, |ev| match ev {
        TrainEvent::Epoch(e) => {
            if io_err.is_none() {
                let line = serde_json::to_string(e).expect("epoch log serializes");
                if let Err(err) = writeln!(log, "{line}") {
                    io_err = Some(err);
                }
            }
        }
        TrainEvent::Warning(w) => warnings.push(w),
        _ => {}
    })?;
    if let Some(err) = io_err {
        return Err(err.into());
    }
    Ok((model, warnings))
}

fn resolve_scorer(model: &Model, scorer: Option<Scorer>) -> Result<Scorer> {
    let mode = model.config.mode;
    let scorer = scorer.unwrap_or_else(|| mode.default_scorer());
    if !mode.allows_scorer(scorer) {
        return Err(Error::Config(format!(
            "scorer {scorer} is not available for a model trained in mode {}",
            mode.as_str()
        )));
    }
    Ok(scorer)
}

/// Which dataset rows [`cmd_score`] scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFilter {
    Only(Split),
    All,
}

/// Scores dataset samples with `scorer` (the mode's default when `None`).
pub fn cmd_score(model: &Model, dataset: &Dataset, scorer: Option<Scorer>, split: SplitFilter) -> Result<Vec<ScoreRow>> {
    let scorer = resolve_scorer(model, scorer)?;
    dataset
        .samples
        .iter()
        .filter(|s| match split {
            SplitFilter::All => true,
            SplitFilter::Only(sp) => s.split == sp,
        })
        .map(|s| {
            let trace = model.network.forward(&s.features)?;
            let e = model.score_trace(&trace, scorer)?;
            Ok(ScoreRow::from_energy(s.id.to_string(), s.label, s.dist, e))
        })
        .collect()
}

/// Scores precomputed logits; the multi-layer scorer is unavailable here.
pub fn cmd_score_logits(model: &Model, rows: &[LogitRow], scorer: Option<Scorer>) -> Result<Vec<ScoreRow>> {
    let scorer = resolve_scorer(model, scorer)?;
    if scorer == Scorer::MultilayerSemantic {
        return Err(Error::Config("multilayer_semantic scoring needs input features, not logits".into()));
    }
    rows.iter()
        .map(|r| {
            let e = model.score_logits(&r.logits, scorer)?;
            Ok(ScoreRow::from_energy(r.id.clone(), r.label, r.dist, e))
        })
        .collect()
}

fn single_scorer(rows: &[ScoreRow]) -> Result<Scorer> {
    let first = rows.first().ok_or_else(|| Error::Argument("score file has no rows".into()))?;
    if rows.iter().any(|r| r.scorer != first.scorer) {
        return Err(Error::Argument("score file mixes scorers".into()));
    }
    Ok(first.scorer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub tau: f64,
    pub target_tpr: f64,
    pub scorer: Scorer,
}

pub fn cmd_threshold(rows: &[ScoreRow], target_tpr: f64) -> Result<ThresholdReport> {
    let scorer = single_scorer(rows)?;
    let ins: Vec<f64> = rows.iter().filter(|r| r.dist == Dist::In).map(|r| r.score).collect();
    if ins.is_empty() {
        return Err(Error::Argument("score file has no in-distribution rows".into()));
    }
    let tau = threshold_from_scores(&ins, target_tpr)?;
    Ok(ThresholdReport { tau: tau.tau, target_tpr, scorer })
}

pub fn cmd_eval(rows: &[ScoreRow], target_tpr: f64, bins: usize) -> Result<(EvalReport, Histogram)> {
    single_scorer(rows)?;
    let samples: Vec<ScoredSample> = rows.iter().map(|r| ScoredSample::new(r.score, r.dist == Dist::In)).collect();
    let report = evaluate(&samples, target_tpr, bins)?;
    let ins: Vec<f64> = rows.iter().filter(|r| r.dist == Dist::In).map(|r| r.score).collect();
    let outs: Vec<f64> = rows.iter().filter(|r| r.dist == Dist::Out).map(|r| r.score).collect();
    Ok((report, histogram(&ins, &outs, bins)?))
}

pub fn write_histogram_csv<W: Write>(mut w: W, h: &Histogram) -> Result<()> {
    let mut out = String::from("bin_center,h_in,h_out\n");
    for ((c, a), b) in h.bin_centers.iter().zip(&h.h_in).zip(&h.h_out) {
        out.push_str(&format!("{},{},{}\n", format_float(*c), format_float(*a), format_float(*b)));
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// Fraction of in-distribution samples of `split` classified correctly by raw-logit argmax.
pub fn accuracy(model: &Model, dataset: &Dataset, split: Split) -> Result<f64> {
    let mut n = 0usize;
    let mut correct = 0usize;
    for s in dataset.select(split, Dist::In) {
        n += 1;
        if Some(model.predict(&s.features)?) == s.label {
            correct += 1;
        }
    }
    if n == 0 {
        return Err(Error::Argument(format!("no in-distribution samples in the {split} split")));
    }
    Ok(correct as f64 / n as f64)
}

/// One-line JSON error record for stderr.
pub fn error_json(err: &Error) -> String {
    serde_json::json!({ "error": err.kind(), "message": err.to_string() }).to_string()
}
