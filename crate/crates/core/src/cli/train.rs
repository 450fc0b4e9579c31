//! Two-phase training loop: cross-entropy warmup, cluster-mean initialization,
//! then the joint objective with per-step EMA updates of the means.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ClusterInit, ClusterLoss, TrainConfig};
use crate::checkpoint::Model;
use crate::clusters::{init_means, ClusterMeans};
use crate::data::{Dataset, Dist, Split};
use crate::error::{Error, Result};
use crate::losses::{
    cluster_focal_loss, cross_entropy, ii_loss, joint_objective, semantic_energy_hinge_loss, LossValue,
};
use crate::network::{init_network, ForwardTrace, NetworkState, ParameterGradients};
use crate::numerics::argmax;
use crate::scoring::{
    free_energy_grad, multilayer_semantic_energy_grad, semantic_energy_grad, ScoreGrad, Scorer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Joint,
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub ce: f64,
    pub hinge: f64,
    pub cluster: f64,
    pub total: f64,
    pub train_acc: f64,
}

pub enum TrainEvent<'a> {
    Warning(String),
    MeansInitialized(&'a ClusterMeans),
    /// In-distribution logits (taken before the parameter update) fed to the EMA.
    EmaBatch { logits: &'a [Vec<f64>], labels: &'a [usize] },
    Epoch(&'a EpochLog),
}

/// Loss components of one mini-batch and the per-sample gradients of the total.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub ce: f64,
    pub hinge: f64,
    pub cluster: f64,
    pub loss: LossValue,
    pub traces_in: Vec<ForwardTrace>,
    pub traces_out: Vec<ForwardTrace>,
    pub correct: usize,
}

fn score_grad(scorer: Scorer, trace: &ForwardTrace, means: Option<&ClusterMeans>, cfg: &TrainConfig) -> Result<ScoreGrad> {
    let t = cfg.temperature;
    let need = || means.ok_or_else(|| Error::Config(format!("scorer {scorer} needs cluster means")));
    Ok(match scorer {
        Scorer::Vanilla => {
            let (value, logits) = free_energy_grad(&trace.logits, t)?;
            ScoreGrad { value, logits, hidden: Vec::new() }
        }
        Scorer::Semantic => {
            let (value, logits) = semantic_energy_grad(&trace.logits, need()?, t)?;
            ScoreGrad { value, logits, hidden: Vec::new() }
        }
        Scorer::MultilayerSemantic => multilayer_semantic_energy_grad(trace, need()?, &cfg.layer_energy, t)?,
        Scorer::SoftmaxBaseline => {
            return Err(Error::Config("softmax_baseline is not a trainable energy".into()));
        }
    })
}

fn pad(mut lv: LossValue, extra: usize, k: usize) -> LossValue {
    lv.grads.extend(LossValue::zeros(extra, k).grads);
    lv
}

/// Total objective of one batch: `CE + λ·hinge + w·cluster`, with the terms
/// enabled by `phase` and the config's mode.
///
/// `means` drives the semantic scores and the cluster loss. During warmup it
/// is only consulted for the ii-loss when [`ClusterInit::IiWarmup`] is set.
pub fn batch_objective(
    net: &NetworkState,
    means: Option<&ClusterMeans>,
    cfg: &TrainConfig,
    phase: Phase,
    ins: &[(&[f64], usize)],
    outs: &[&[f64]],
) -> Result<BatchObjective> {
    let k = cfg.network.num_classes;
    let t = cfg.temperature;
    let traces_in = ins.iter().map(|(x, _)| net.forward(x)).collect::<Result<Vec<_>>>()?;
    let hinge_scorer = match phase {
        Phase::Joint => cfg.mode.hinge_scorer(),
        Phase::Warmup => None,
    };
    let traces_out = if hinge_scorer.is_some() {
        outs.iter().map(|x| net.forward(x)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let n_out = traces_out.len();
    let correct = traces_in.iter().zip(ins).filter(|(tr, (_, y))| argmax(&tr.logits) == *y).count();

    let ce = LossValue::mean(
        traces_in.iter().zip(ins).map(|(tr, (_, y))| cross_entropy(&tr.logits, *y, t)).collect::<Result<_>>()?,
    )?;
    let ce_value = ce.value;
    let mut total = pad(ce, n_out, k);

    let mut hinge_value = 0.0;
    if let Some(scorer) = hinge_scorer {
        let g_in = traces_in.iter().map(|tr| score_grad(scorer, tr, means, cfg)).collect::<Result<Vec<_>>>()?;
        let g_out = traces_out.iter().map(|tr| score_grad(scorer, tr, means, cfg)).collect::<Result<Vec<_>>>()?;
        let e_in: Vec<f64> = g_in.iter().map(|g| g.value).collect();
        let e_out: Vec<f64> = g_out.iter().map(|g| g.value).collect();
        let hinge = semantic_energy_hinge_loss(&e_in, &e_out, &cfg.margins)?;
        hinge_value = hinge.value;
        total = joint_objective(&total, &hinge.chain(&g_in, &g_out)?, cfg.lambda)?;
    }

    let cluster_loss = match phase {
        Phase::Joint => cfg.effective_cluster_loss(),
        Phase::Warmup if cfg.cluster_init == ClusterInit::IiWarmup && means.is_some() => Some(ClusterLoss::Ii),
        Phase::Warmup => None,
    };
    let mut cluster_value = 0.0;
    if let Some(kind) = cluster_loss {
        let m = means.ok_or_else(|| Error::Config("cluster loss needs cluster means".into()))?;
        let lv = match kind {
            ClusterLoss::Cfl => LossValue::mean(
                traces_in
                    .iter()
                    .zip(ins)
                    .map(|(tr, (_, y))| cluster_focal_loss(&tr.logits, *y, m, &cfg.focal, cfg.cfl_scale))
                    .collect::<Result<_>>()?,
            )?,
            ClusterLoss::Ii => {
                let batch: Vec<(&[f64], usize)> =
                    traces_in.iter().zip(ins).map(|(tr, (_, y))| (tr.logits.as_slice(), *y)).collect();
                ii_loss(&batch, m)?
            }
        };
        cluster_value = lv.value;
        total = joint_objective(&total, &pad(lv, n_out, k), cfg.cluster_loss_weight)?;
    }

    Ok(BatchObjective {
        ce: ce_value,
        hinge: hinge_value,
        cluster: cluster_value,
        loss: total,
        traces_in,
        traces_out,
        correct,
    })
}

/// Sums per-sample parameter gradients of a batch objective.
pub fn parameter_gradients(net: &NetworkState, obj: &BatchObjective) -> Result<ParameterGradients> {
    let mut acc = ParameterGradients::zeros_like(net);
    for (trace, g) in obj.traces_in.iter().chain(&obj.traces_out).zip(&obj.loss.grads) {
        net.backward_into(trace, &g.logits, &g.hidden, &mut acc)?;
    }
    Ok(acc)
}

#[derive(Default)]
struct EpochAccum {
    ce: f64,
    hinge: f64,
    cluster: f64,
    total: f64,
    steps: usize,
    correct: usize,
    seen: usize,
}

impl EpochAccum {
    fn add(&mut self, obj: &BatchObjective, n_in: usize) {
        self.ce += obj.ce;
        self.hinge += obj.hinge;
        self.cluster += obj.cluster;
        self.total += obj.loss.value;
        self.steps += 1;
        self.correct += obj.correct;
        self.seen += n_in;
    }

    fn finish(self, epoch: usize, phase: Phase) -> EpochLog {
        let s = self.steps.max(1) as f64;
        EpochLog {
            epoch,
            phase,
            ce: self.ce / s,
            hinge: self.hinge / s,
            cluster: self.cluster / s,
            total: self.total / s,
            train_acc: self.correct as f64 / self.seen.max(1) as f64,
        }
    }
}

fn all_logit_means(net: &NetworkState, ins: &[(&[f64], usize)], k: usize, decay: f64) -> Result<ClusterMeans> {
    let logits: Vec<(Vec<f64>, usize)> =
        ins.iter().map(|(x, y)| Ok((net.forward(x)?.logits, *y))).collect::<Result<_>>()?;
    init_means(logits.iter().map(|(z, y)| (z.as_slice(), *y)), k, decay)
}

struct OutCursor<'a> {
    pool: Vec<&'a [f64]>,
    pos: usize,
}

impl<'a> OutCursor<'a> {
    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a [f64]> {
        let mut batch = Vec::with_capacity(n);
        if self.pool.is_empty() {
            return batch;
        }
        while batch.len() < n {
            if self.pos == self.pool.len() {
                self.pool.shuffle(rng);
                self.pos = 0;
            }
            batch.push(self.pool[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

pub fn train(cfg: &TrainConfig, dataset: &Dataset, mut observer: impl FnMut(TrainEvent<'_>)) -> Result<Model> {
    cfg.validate()?;
    let k = cfg.network.num_classes;
    if dataset.input_dim != cfg.network.input_dim {
        return Err(Error::Config(format!(
            "dataset has {} features but the network expects {}",
            dataset.input_dim, cfg.network.input_dim
        )));
    }
    if dataset.num_classes > k {
        return Err(Error::Config(format!(
            "dataset has {} classes but the network has {k} outputs",
            dataset.num_classes
        )));
    }
    let ins: Vec<(&[f64], usize)> = dataset
        .select(Split::Train, Dist::In)
        .map(|s| (s.features.as_slice(), s.label.expect("in-distribution sample carries a label")))
        .collect();
    let outs: Vec<&[f64]> = dataset.select(Split::Train, Dist::Out).map(|s| s.features.as_slice()).collect();
    if ins.is_empty() {
        return Err(Error::Config("no in-distribution training samples".into()));
    }
    if cfg.mode.uses_ood() && outs.is_empty() {
        return Err(Error::Config(format!(
            "mode {} needs out-of-distribution training samples",
            cfg.mode.as_str()
        )));
    }
    if cfg.mode.hinge_scorer().is_some() && cfg.margins.is_inverted() {
        observer(TrainEvent::Warning(format!(
            "m_in ({}) is not below m_out ({})",
            cfg.margins.m_in, cfg.margins.m_out
        )));
    }

    let mut net = init_network(&cfg.network)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ins.len()).collect();

    for epoch in 0..cfg.warmup_epochs {
        let warm_means = match cfg.cluster_init {
            ClusterInit::IiWarmup => Some(all_logit_means(&net, &ins, k, cfg.ema_decay)?),
            ClusterInit::LogitMeans => None,
        };
        order.shuffle(&mut rng);
        let mut acc = EpochAccum::default();
        for chunk in order.chunks(cfg.batch_in) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| ins[i]).collect();
            let obj = batch_objective(&net, warm_means.as_ref(), cfg, Phase::Warmup, &batch, &[])?;
            let grads = parameter_gradients(&net, &obj)?;
            net.sgd_step(&grads, cfg.lr)?;
            acc.add(&obj, batch.len());
        }
        observer(TrainEvent::Epoch(&acc.finish(epoch, Phase::Warmup)));
    }

    let mut means = if cfg.mode.uses_means() {
        let m = all_logit_means(&net, &ins, k, cfg.ema_decay)?;
        observer(TrainEvent::MeansInitialized(&m));
        Some(m)
    } else {
        None
    };

    let mut out_cursor = OutCursor { pool: outs, pos: 0 };
    out_cursor.pool.shuffle(&mut rng);
    let wants_out = cfg.mode.hinge_scorer().is_some();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochAccum::default();
        for chunk in order.chunks(cfg.batch_in) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| ins[i]).collect();
            let out_batch = if wants_out { out_cursor.take(cfg.batch_out, &mut rng) } else { Vec::new() };
            let obj = batch_objective(&net, means.as_ref(), cfg, Phase::Joint, &batch, &out_batch)?;
            if !obj.loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss in epoch {epoch}")));
            }
            let grads = parameter_gradients(&net, &obj)?;
            net.sgd_step(&grads, cfg.lr)?;
            if let Some(m) = means.as_mut() {
                let logits: Vec<Vec<f64>> = obj.traces_in.iter().map(|t| t.logits.clone()).collect();
                let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
                m.ema_update(logits.iter().map(Vec::as_slice).zip(labels.iter().copied()))?;
                observer(TrainEvent::EmaBatch { logits: &logits, labels: &labels });
            }
            acc.add(&obj, batch.len());
        }
        observer(TrainEvent::Epoch(&acc.finish(epoch, Phase::Joint)));
    }

    // counts only describe the initialization pass and are not persisted
    if let Some(m) = means.as_mut() {
        m.counts.iter_mut().for_each(|c| *c = 0);
    }
    Ok(Model { config: cfg.clone(), network: net, means })
}
