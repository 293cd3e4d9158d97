use super::*;
use crate::model::Layer;

fn quick(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        epochs: 3,
        ..TrainConfig::smoke()
    }
}

fn batch(config: &TrainConfig, seed: u64) -> ViewBatch {
    let ds = generate_synthetic(&config.data).unwrap();
    let idx: Vec<usize> = (0..12).collect();
    views_of(&ds, &idx, &config.aug, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn cosine_schedule_examples() {
    assert_eq!(cosine_lr(0.05, 0, 30), 0.05);
    assert!(cosine_lr(0.05, 30, 30).abs() < 1e-18);
    assert!((cosine_lr(0.05, 15, 30) - 0.025).abs() < 1e-15);
    let lrs: Vec<f64> = (0..=50).map(|e| cosine_lr(0.1, e, 50)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn sgd_hand_iteration() {
    let mut w = Tensor::scalar(1.0);
    let mut v = Tensor::scalar(0.0);
    let g = Tensor::scalar(1.0);
    sgd_step(&mut w, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
    assert_eq!(v.item(), 1.0);
    assert!((w.item() - 0.9).abs() < 1e-15);
    sgd_step(&mut w, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
    assert!((v.item() - 1.9).abs() < 1e-15);
    assert!((w.item() - 0.71).abs() < 1e-15);
    assert!(sgd_step(&mut w, &Tensor::vector(vec![1.0, 2.0]), &mut v, 0.1, 0.9, 0.0).is_err());
}

#[test]
fn zero_gradients_leave_parameters_alone() {
    let config = quick(Variant::Clusiam);
    let mut params = init_model(&config.model).unwrap();
    let before = params.clone();
    let mut opt = OptimizerState::new(&params);
    let grads: Vec<Option<Tensor>> = params
        .trainable()
        .iter()
        .map(|(_, t)| Some(Tensor::zeros(t.shape())))
        .collect();
    let s = SgdSettings {
        weight_decay: 0.0,
        ..config.sgd()
    };
    sgd_update(&mut params, &grads, &mut opt, 0.05, &s).unwrap();
    assert_eq!(params, before);
    assert!(sgd_update(&mut params, &grads[1..], &mut opt, 0.05, &s).is_err());
}

#[test]
fn fixed_predictor_lr_moves_predictor_only() {
    let config = quick(Variant::Clusiam);
    let mut params = init_model(&config.model).unwrap();
    let before = params.clone();
    let mut opt = OptimizerState::new(&params);
    let grads: Vec<Option<Tensor>> = params
        .trainable()
        .iter()
        .map(|(_, t)| Some(Tensor::full(t.shape(), 0.1)))
        .collect();
    let lr = cosine_lr(config.base_lr, config.epochs, config.epochs);
    sgd_update(&mut params, &grads, &mut opt, lr, &config.sgd()).unwrap();
    assert_ne!(params.predictor, before.predictor);
    assert_eq!(params.encoder, before.encoder);
    assert_eq!(params.assigner, before.assigner);
}

#[test]
fn weight_decay_can_skip_batchnorm() {
    let config = TrainConfig {
        weight_decay: 0.5,
        exclude_bn_from_weight_decay: true,
        ..quick(Variant::Clusiam)
    };
    let mut params = init_model(&config.model).unwrap();
    let before = params.clone();
    let mut opt = OptimizerState::new(&params);
    let grads: Vec<Option<Tensor>> = params
        .trainable()
        .iter()
        .map(|(_, t)| Some(Tensor::zeros(t.shape())))
        .collect();
    sgd_update(&mut params, &grads, &mut opt, 0.1, &config.sgd()).unwrap();
    let (Layer::BatchNorm(a), Layer::BatchNorm(b)) = (&params.assigner.layers[0], &before.assigner.layers[0]) else {
        panic!("assigner starts with batch norm");
    };
    assert_eq!(a.gamma, b.gamma);
    assert_ne!(params.assigner.layers[1], before.assigner.layers[1]);
}

#[test]
fn simsiam_step_leaves_assigner_untouched() {
    let config = quick(Variant::Simsiam);
    let mut params = init_model(&config.model).unwrap();
    let before = params.clone();
    let mut opt = OptimizerState::new(&params);
    let report = train_step(
        &mut params,
        &mut opt,
        &batch(&config, 1),
        &config,
        0.05,
        &mut ChaCha8Rng::seed_from_u64(0),
        1,
        0,
    )
    .unwrap();
    assert_eq!(report.breakdown.l_cluster, 0.0);
    assert_eq!(report.k, 0);
    let infos = params.trainable();
    for ((info, _), g) in infos.iter().zip(&report.grads) {
        if info.module == Module::Assigner {
            assert!(g.is_none());
        }
    }
    assert_eq!(params.assigner, before.assigner);
    assert_ne!(params.encoder, before.encoder);
}

#[test]
fn single_cluster_clusiam_step_equals_simsiam() {
    let mut base = quick(Variant::Simsiam);
    base.model.exploration_space = 1;
    let clus = TrainConfig {
        variant: Variant::Clusiam,
        ..base.clone()
    };
    let b = batch(&base, 2);
    let run = |c: &TrainConfig| {
        let mut params = init_model(&c.model).unwrap();
        let mut opt = OptimizerState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = train_step(&mut params, &mut opt, &b, c, 0.05, &mut rng, 1, 0).unwrap();
        (params, opt, r.breakdown.l_total)
    };
    let (p1, o1, l1) = run(&base);
    let (p2, o2, l2) = run(&clus);
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(o1, o2);
    for ((_, a), (_, b)) in p1.trainable().iter().zip(p2.trainable()) {
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn alpha_defaults_when_omitted() {
    let mut json = serde_json::to_value(TrainConfig::smoke()).unwrap();
    json.as_object_mut().unwrap().remove("alpha");
    let c: TrainConfig = serde_json::from_value(json).unwrap();
    assert_eq!(c.alpha, 0.5);
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
    }
    let err = "clusiamm".parse::<Variant>().unwrap_err().to_string();
    assert!(err.contains("simsiam") && err.contains("joint_no_noise"));
}

#[test]
fn config_validation_lists_problems() {
    let c = TrainConfig {
        alpha: 2.0,
        epochs: 0,
        batch_size: 1,
        ..TrainConfig::smoke()
    };
    match c.validate().unwrap_err() {
        Error::Config(p) => assert_eq!(p.len(), 3, "{p:?}"),
        e => panic!("{e}"),
    }
    let mut c = TrainConfig::smoke();
    c.model.input_dim = 9;
    assert!(c.validate().unwrap_err().to_string().contains("ambient_dim"));
    for p in ["smoke", "desk", "paperlike"] {
        TrainConfig::preset(p).unwrap().validate().unwrap();
    }
    assert!(TrainConfig::preset("huge").is_err());
}

#[test]
fn four_sample_run_has_one_row() {
    let mut c = TrainConfig::smoke();
    c.data.n_clusters = 2;
    c.data.samples_per_cluster = 2;
    let state = run_training(&c).unwrap();
    assert_eq!(state.metrics.len(), 1);
    let m = &state.metrics[0];
    for v in [m.l_inv, m.l_cluster, m.l_total, m.max_share, m.rand_index, m.knn_f1, m.lr] {
        assert!(v.is_finite());
    }
}

#[test]
fn identical_configs_give_identical_metrics() {
    let c = quick(Variant::Clusiam);
    let a = metrics_to_csv(&run_training(&c).unwrap().metrics).unwrap();
    let b = metrics_to_csv(&run_training(&c).unwrap().metrics).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(text.lines().count(), 4);
    assert_eq!(metrics_to_csv(&metrics_from_csv(&a).unwrap()).unwrap(), a);
}

#[test]
fn simsiam_run_never_touches_assigner() {
    let c = quick(Variant::Simsiam);
    let state = run_training(&c).unwrap();
    assert_eq!(state.params.assigner, init_model(&c.model).unwrap().assigner);
    assert!(state.metrics.iter().all(|m| m.l_cluster == 0.0));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let c = quick(Variant::Clusiam);
    let full = run_training(&c).unwrap();

    let mut partial = TrainState::new(&c).unwrap();
    resume_training(&mut partial, &c, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    partial.save(&c, &path).unwrap();
    let (c2, mut restored) = TrainState::load(&path).unwrap();
    assert_eq!(c2, c);
    assert_eq!(restored, partial);
    resume_training(&mut restored, &c2, c2.epochs).unwrap();
    assert_eq!(restored, full);
}

#[test]
fn divergence_aborts_with_diagnostics() {
    let c = TrainConfig {
        base_lr: 1e300,
        fix_pred_lr: false,
        ..quick(Variant::Clusiam)
    };
    match run_training(&c).unwrap_err() {
        Error::NonFinite { epoch, detail, .. } => {
            assert_eq!(epoch, 1);
            assert!(detail.contains("l_total"), "{detail}");
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn ablation_rows_share_data_order() {
    let rows = run_ablation(&quick(Variant::Clusiam)).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.variant.name()).collect::<Vec<_>>(),
        ["simsiam", "cluster_only", "joint_no_noise", "clusiam"]
    );
    assert!(rows.iter().all(|r| r.batch_digest == rows[0].batch_digest));
    let table = String::from_utf8(ablation_to_csv(&rows).unwrap()).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn checkpoint_metadata_keeps_metric_bits() {
    let c = quick(Variant::Clusiam);
    let mut state = TrainState::new(&c).unwrap();
    for (i, v) in [-0.11169824433076021, 0.1 + 0.2, 1.0 / 3.0, 5e-324].into_iter().enumerate() {
        state.metrics.push(MetricsRow {
            epoch: i + 1,
            l_inv: v,
            l_cluster: -v,
            l_total: v * 0.5,
            clusters: 2,
            max_share: v.abs(),
            rand_index: 0.5,
            knn_f1: 0.25,
            lr: v * 7.0,
        });
    }
    let bytes = state.to_checkpoint(&c).to_bytes();
    let (_, back) = TrainState::from_checkpoint(&CheckpointFile::from_reader(&bytes[..]).unwrap()).unwrap();
    let bits = |s: &TrainState| s.metrics.iter().map(|m| (m.l_inv.to_bits(), m.lr.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&state));
}
