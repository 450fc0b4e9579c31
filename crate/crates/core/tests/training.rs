use semood::cli::{self, batch_objective, parameter_gradients, train, ClusterInit, ClusterLoss, Mode, Phase, SplitFilter, TrainConfig, TrainEvent};
use semood::clusters::ClusterMeans;
use semood::data::{generate, Dataset, Dist, Split, SyntheticSpec};
use semood::network::NetworkConfig;
use semood::scoring::Scorer;
use semood::{Error, Model};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { n_train_in: 400, n_train_out: 800, n_test_in: 200, n_test_out: 200, seed, ..SyntheticSpec::default() }
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 3,
        network: NetworkConfig { hidden_dims: vec![16, 16], ..NetworkConfig::default() },
        ..TrainConfig::default()
    }
}

fn scores(model: &Model, ds: &Dataset, scorer: Scorer) -> Vec<f64> {
    cli::cmd_score(model, ds, Some(scorer), SplitFilter::All).unwrap().into_iter().map(|r| r.score).collect()
}

#[test]
fn means_replay_from_ema_events() {
    let ds = generate(&small_spec(1)).unwrap();
    let cfg = small_config(Mode::CflMlse);
    let mut replay: Option<ClusterMeans> = None;
    let mut batches = 0;
    let model = train(&cfg, &ds, |ev| match ev {
        TrainEvent::MeansInitialized(m) => replay = Some(m.clone()),
        TrainEvent::EmaBatch { logits, labels } => {
            batches += 1;
            let m = replay.as_mut().expect("means initialized before the first EMA batch");
            m.ema_update(logits.iter().map(Vec::as_slice).zip(labels.iter().copied())).unwrap();
        }
        _ => {}
    })
    .unwrap();
    assert_eq!(batches, cfg.epochs * 400usize.div_ceil(cfg.batch_in));
    assert_eq!(replay.unwrap().means, model.means.unwrap().means);
}

#[test]
fn zero_joint_epochs_keeps_initialized_means() {
    let ds = generate(&small_spec(2)).unwrap();
    let cfg = TrainConfig { epochs: 0, ..small_config(Mode::Se) };
    let mut init = None;
    let model = train(&cfg, &ds, |ev| {
        if let TrainEvent::MeansInitialized(m) = ev {
            init = Some(m.means.clone());
        }
    })
    .unwrap();
    assert_eq!(Some(model.means.unwrap().means), init);
}

#[test]
fn softmax_baseline_never_evaluates_hinge_or_cluster() {
    let ds = generate(&small_spec(3)).unwrap();
    let cfg = small_config(Mode::SoftmaxBaseline);
    let mut logs = Vec::new();
    let model = train(&cfg, &ds, |ev| {
        if let TrainEvent::Epoch(e) = ev {
            logs.push(e.clone());
        }
    })
    .unwrap();
    assert!(model.means.is_none());
    assert_eq!(logs.len(), cfg.warmup_epochs + cfg.epochs);
    for l in &logs {
        assert_eq!(l.hinge, 0.0);
        assert_eq!(l.cluster, 0.0);
        assert_eq!(l.ce, l.total);
    }
}

#[test]
fn energy_modes_require_ood_training_data() {
    let mut ds = generate(&small_spec(4)).unwrap();
    ds.samples.retain(|s| !(s.split == Split::Train && s.dist == Dist::Out));
    for mode in [Mode::Se, Mode::Mlse, Mode::CflMlse, Mode::EnergyBaseline] {
        let err = train(&small_config(mode), &ds, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{mode:?}: {err}");
    }
    assert!(train(&small_config(Mode::SoftmaxBaseline), &ds, |_| {}).is_ok());
}

#[test]
fn energy_baseline_ignores_means() {
    let ds = generate(&small_spec(5)).unwrap();
    let model = train(&small_config(Mode::EnergyBaseline), &ds, |_| {}).unwrap();
    assert!(model.means.is_none());
    let text = model.to_json().unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["cluster_means"] = serde_json::json!([[9.0, 0.0, 1.0, 2.0], [0.0, 9.0, 3.0, 1.0], [1.0, 1.0, 9.0, 0.5], [2.0, 0.0, 0.0, 9.0]]);
    let with_means = Model::from_json(&doc.to_string()).unwrap();
    for scorer in [Scorer::Vanilla, Scorer::SoftmaxBaseline] {
        assert_eq!(scores(&model, &ds, scorer), scores(&with_means, &ds, scorer));
    }
    let err = cli::cmd_score(&model, &ds, Some(Scorer::Semantic), SplitFilter::All).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn cfl_mlse_scores_depend_on_means() {
    let ds = generate(&small_spec(6)).unwrap();
    let model = train(&small_config(Mode::CflMlse), &ds, |_| {}).unwrap();
    let mut perturbed = model.clone();
    let m = perturbed.means.as_mut().unwrap();
    m.means[0][1] += 0.5;
    m.means[2][0] -= 0.5;
    for scorer in [Scorer::Semantic, Scorer::MultilayerSemantic] {
        assert_ne!(scores(&model, &ds, scorer), scores(&perturbed, &ds, scorer));
    }
    assert_eq!(scores(&model, &ds, Scorer::Vanilla), scores(&perturbed, &ds, Scorer::Vanilla));
}

#[test]
fn scorer_mode_matrix() {
    use Scorer::*;
    let table = [
        (Mode::Se, [true, true, false, true]),
        (Mode::Mlse, [true, true, true, true]),
        (Mode::CflMlse, [true, true, true, true]),
        (Mode::EnergyBaseline, [true, false, false, true]),
        (Mode::SoftmaxBaseline, [true, false, false, true]),
    ];
    for (mode, allowed) in table {
        for (scorer, ok) in [Vanilla, Semantic, MultilayerSemantic, SoftmaxBaseline].into_iter().zip(allowed) {
            assert_eq!(mode.allows_scorer(scorer), ok, "{mode:?} {scorer}");
        }
    }
}

/// Whole-objective parameter gradients against central differences, per mode.
#[test]
fn batch_objective_gradients_match_finite_differences() {
    let ds = generate(&SyntheticSpec { n_train_in: 12, n_train_out: 12, n_test_in: 1, n_test_out: 1, ..small_spec(7) }).unwrap();
    let ins: Vec<(&[f64], usize)> =
        ds.select(Split::Train, Dist::In).map(|s| (s.features.as_slice(), s.label.unwrap())).collect();
    let outs: Vec<&[f64]> = ds.select(Split::Train, Dist::Out).map(|s| s.features.as_slice()).collect();
    let cases = [
        (Mode::Se, ClusterLoss::Cfl, ClusterInit::LogitMeans),
        (Mode::Mlse, ClusterLoss::Ii, ClusterInit::LogitMeans),
        (Mode::CflMlse, ClusterLoss::Cfl, ClusterInit::IiWarmup),
        (Mode::EnergyBaseline, ClusterLoss::Cfl, ClusterInit::LogitMeans),
        (Mode::SoftmaxBaseline, ClusterLoss::Cfl, ClusterInit::LogitMeans),
    ];
    for (mode, cluster_loss, cluster_init) in cases {
        let mut cfg = small_config(mode);
        cfg.network.hidden_dims = vec![6, 5];
        cfg.network.seed = 9;
        cfg.cluster_loss = cluster_loss;
        cfg.cluster_init = cluster_init;
        cfg.layer_energy = semood::scoring::LayerEnergyConfig::last_two(2);
        let net = semood::network::init_network(&cfg.network).unwrap();
        let means = ClusterMeans::from_matrix(
            (0..4).map(|i| (0..4).map(|j| if i == j { 2.0 } else { 0.3 * (i + j) as f64 - 0.6 }).collect()).collect(),
            cfg.ema_decay,
        )
        .unwrap();
        let means = mode.uses_means().then_some(&means);
        for phase in [Phase::Warmup, Phase::Joint] {
            let value = |n: &semood::network::NetworkState| batch_objective(n, means, &cfg, phase, &ins, &outs).unwrap().loss.value;
            let obj = batch_objective(&net, means, &cfg, phase, &ins, &outs).unwrap();
            let analytic: Vec<f64> = parameter_gradients(&net, &obj).unwrap().iter().copied().collect();
            for idx in (0..net.num_params()).step_by(3) {
                let h = 1e-5;
                let mut plus = net.clone();
                *plus.param_mut(idx).unwrap() += h;
                let mut minus = net.clone();
                *minus.param_mut(idx).unwrap() -= h;
                let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
                let err = (analytic[idx] - numeric).abs() / analytic[idx].abs().max(numeric.abs()).max(1e-4);
                assert!(err < 1e-4, "{mode:?} {phase:?} param {idx}: {} vs {numeric}", analytic[idx]);
            }
        }
    }
}

#[test]
fn default_run_loss_trends_down() {
    let ds = generate(&SyntheticSpec::default()).unwrap();
    let cfg = TrainConfig::default();
    let mut totals = Vec::new();
    train(&cfg, &ds, |ev| {
        if let TrainEvent::Epoch(e) = ev {
            if e.phase == Phase::Joint {
                totals.push(e.total);
            }
        }
    })
    .unwrap();
    // medians over consecutive windows of five epochs; once the hinge plateaus
    // the CE/hinge trade-off can bump a window by a few percent
    let medians: Vec<f64> = totals
        .chunks(5)
        .map(|w| {
            let mut w = w.to_vec();
            w.sort_by(f64::total_cmp);
            w[w.len() / 2]
        })
        .collect();
    for pair in medians.windows(2) {
        assert!(pair[1] <= 1.05 * pair[0], "window medians {medians:?}");
    }
    assert!(medians[medians.len() - 1] < 0.5 * medians[0], "window medians {medians:?}");
}
