use punce_core::data::{make_pnu, make_pu, synth_gaussians, BinaryDataset, Label, PUDataset};
use punce_core::losses::ContrastiveLoss;
use punce_core::model::{checkpoint_bytes, init_mlp, Group, ModelParams};
use punce_core::pu_risk::RiskKind;
use punce_core::train::*;
use punce_core::Error;

fn small(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 8,
        probe_epochs: 8,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    }
}

fn data(n: usize, sep: f64, seed: u64) -> BinaryDataset {
    synth_gaussians(n, 6, sep, 0.5, seed).unwrap()
}

fn group_bytes(p: &ModelParams, groups: &[Group]) -> Vec<u64> {
    p.tensors()
        .into_iter()
        .filter(|(g, _)| groups.contains(g))
        .flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn pretraining_loss_falls_on_separable_data() {
    let train = data(400, 6.0, 1);
    let cfg = TrainConfig { epochs: 50, ..small(3) };
    let pu = make_pu(&train, 60, 3).unwrap();
    let (_, m) = pretrain(&cfg, TrainData::Pu(&pu), cfg.init_params(6).unwrap()).unwrap();
    let loss = m.series("train", "loss");
    assert_eq!(loss.len(), 50);
    assert!(loss[49] < loss[0], "{} -> {}", loss[0], loss[49]);
}

#[test]
fn pretraining_is_bit_identical_per_seed() {
    let train = data(200, 6.0, 1);
    let pu = make_pu(&train, 30, 0).unwrap();
    let run = |seed| {
        let cfg = small(seed);
        let (p, m) = pretrain(&cfg, TrainData::Pu(&pu), cfg.init_params(6).unwrap()).unwrap();
        (checkpoint_bytes(&p), m.to_csv_string())
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a.0, run(6).0);
}

#[test]
fn zero_epochs_leave_parameters_alone() {
    let train = data(100, 6.0, 1);
    let pu = make_pu(&train, 10, 0).unwrap();
    let cfg = TrainConfig { epochs: 0, ..small(0) };
    let init = cfg.init_params(6).unwrap();
    let (p, m) = pretrain(&cfg, TrainData::Pu(&pu), init.clone()).unwrap();
    assert_eq!(p, init);
    assert!(m.records().is_empty());
}

#[test]
fn loss_and_data_kinds_must_agree() {
    let train = data(100, 6.0, 1);
    let pu = make_pu(&train, 10, 0).unwrap();
    let pnu = make_pnu(&train, 10, 0).unwrap();
    for (loss, d) in [
        (ContrastiveLoss::Scl, TrainData::Pu(&pu)),
        (ContrastiveLoss::Scl, TrainData::Pnu(&pnu)),
        (ContrastiveLoss::PnuPunce, TrainData::Pu(&pu)),
        (ContrastiveLoss::Punce, TrainData::Pnu(&pnu)),
    ] {
        let cfg = TrainConfig { loss, ..small(0) };
        let r = pretrain(&cfg, d, cfg.init_params(6).unwrap());
        assert!(matches!(r, Err(Error::Argument(_))), "{loss}");
    }
    let full = make_pnu(&train, train.len(), 0).unwrap();
    let cfg = TrainConfig { loss: ContrastiveLoss::Scl, ..small(0) };
    pretrain(&cfg, TrainData::Pnu(&full), cfg.init_params(6).unwrap()).unwrap();
}

#[test]
fn probe_freezes_encoder_and_projector() {
    let train = data(200, 6.0, 2);
    let pu = make_pu(&train, 30, 1).unwrap();
    let cfg = small(1);
    let (pre, _) = pretrain(&cfg, TrainData::Pu(&pu), cfg.init_params(6).unwrap()).unwrap();
    for risk in RiskKind::ALL {
        let rcfg = TrainConfig { risk, ..cfg.clone() };
        let (probed, _) = probe(&rcfg, pre.clone(), &pu, None).unwrap();
        let frozen = [Group::Encoder, Group::Projector];
        assert_eq!(group_bytes(&pre, &frozen), group_bytes(&probed, &frozen), "{risk}");
        assert_ne!(group_bytes(&pre, &[Group::Head]), group_bytes(&probed, &[Group::Head]), "{risk}");
    }
}

#[test]
fn finetuning_moves_the_encoder() {
    let train = data(200, 6.0, 2);
    let pu = make_pu(&train, 30, 1).unwrap();
    let cfg = small(1);
    let init = cfg.init_params(6).unwrap();
    let (tuned, m) = finetune(&cfg, init.clone(), &pu, None).unwrap();
    assert_ne!(group_bytes(&init, &[Group::Encoder]), group_bytes(&tuned, &[Group::Encoder]));
    assert_eq!(m.series("finetune", "risk").len(), cfg.probe_epochs);
}

#[test]
fn pn_probe_separates_fully_labeled_data() {
    let train = data(600, 8.0, 4);
    let indicator: Vec<bool> = train.labels().iter().map(|&l| l == Label::Positive).collect();
    let full = PUDataset::new(train.features().clone(), indicator, train.labels().to_vec()).unwrap();
    let cfg = TrainConfig {
        risk: RiskKind::Pn,
        probe_epochs: 30,
        ..small(4)
    };
    let pu = make_pu(&train, 100, 4).unwrap();
    let (pre, _) = pretrain(&cfg, TrainData::Pu(&pu), cfg.init_params(6).unwrap()).unwrap();
    let (probed, _) = probe(&cfg, pre, &full, None).unwrap();
    let acc = evaluate(&probed, &train).unwrap().accuracy;
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn untrained_head_is_at_chance_on_balanced_data() {
    // No separation: labels are independent of the features.
    let test = synth_gaussians(2000, 10, 0.0, 0.5, 9).unwrap();
    for seed in 0..5 {
        let p = init_mlp(&[10, 32, 16], &[16, 8], seed).unwrap();
        let e = evaluate(&p, &test).unwrap();
        assert_eq!(e.total(), 2000);
        assert!((e.accuracy - 0.5).abs() <= 0.05, "seed {seed}: {}", e.accuracy);
    }
}

#[test]
fn nnpu_probe_logs_every_epoch() {
    let train = data(200, 6.0, 2);
    let test = data(200, 6.0, 3);
    let pu = make_pu(&train, 30, 1).unwrap();
    let cfg = TrainConfig { risk: RiskKind::Nnpu, ..small(2) };
    let (_, m) = probe(&cfg, cfg.init_params(6).unwrap(), &pu, Some(&test)).unwrap();
    for (split, metric) in [
        ("probe", "risk"),
        ("probe_test", "accuracy"),
        ("probe_test", "recall_pos"),
        ("probe_test", "recall_neg"),
    ] {
        assert_eq!(m.series(split, metric).len(), cfg.probe_epochs, "{split}/{metric}");
    }
    assert!(accuracy_epoch_variance(&m, "probe_test").is_some());
}

#[test]
fn pvu_probe_reports_its_calibration_constant() {
    let train = data(300, 6.0, 2);
    let pu = make_pu(&train, 40, 1).unwrap();
    let cfg = TrainConfig { risk: RiskKind::Pvu, ..small(2) };
    let (_, m) = probe(&cfg, cfg.init_params(6).unwrap(), &pu, None).unwrap();
    let c = m.last("probe", "pvu_c").unwrap();
    assert!(c > 0.0 && c <= 1.0, "{c}");
}

#[test]
fn joint_objective_trains_the_head_during_pretraining() {
    let train = data(200, 6.0, 2);
    let pu = make_pu(&train, 40, 1).unwrap();
    let head = |lambda| {
        let cfg = TrainConfig { joint_lambda: lambda, ..small(1) };
        let (p, m) = pretrain(&cfg, TrainData::Pu(&pu), cfg.init_params(6).unwrap()).unwrap();
        (group_bytes(&p, &[Group::Head]), m)
    };
    let init = group_bytes(&small(1).init_params(6).unwrap(), &[Group::Head]);
    let (plain, m0) = head(None);
    assert_eq!(plain, init);
    assert!(m0.series("train", "contrastive_loss").is_empty());
    let (joint, m1) = head(Some(0.5));
    assert_ne!(joint, init);
    assert_eq!(m1.series("train", "contrastive_loss").len(), 8);
}

#[test]
fn lp_ft_cells_are_paired() {
    let train = data(200, 6.0, 2);
    let test = data(200, 6.0, 3);
    let cfg = SweepConfig {
        base: small(0),
        losses: vec![ContrastiveLoss::Punce],
        n_labeled: vec![20, 40],
        seeds: vec![0, 1],
        compare_finetune: true,
    };
    let results = sweep(&cfg, &train, &test).unwrap();
    assert!(results.iter().all(|r| r.finetune_accuracy.is_some()));
    let table = lp_ft_table(&results).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("loss,n_P,linear_probe,finetune\n"));
}

#[test]
fn sweep_is_ordered_and_reproducible() {
    let train = data(200, 6.0, 2);
    let test = data(200, 6.0, 3);
    let cfg = SweepConfig {
        base: TrainConfig { epochs: 3, probe_epochs: 3, ..small(0) },
        losses: vec![
            ContrastiveLoss::InfoNce,
            ContrastiveLoss::Scl,
            ContrastiveLoss::SclPu,
            ContrastiveLoss::PnuPunce,
        ],
        n_labeled: vec![20, 40],
        seeds: vec![0, 1],
        compare_finetune: false,
    };
    let a = sweep(&cfg, &train, &test).unwrap();
    let keys: Vec<(ContrastiveLoss, usize, u64)> = a.iter().map(|r| (r.loss, r.n_labeled, r.seed)).collect();
    let mut expect = Vec::new();
    for &l in &cfg.losses {
        for &n in &cfg.n_labeled {
            for &s in &cfg.seeds {
                expect.push((l, n, s));
            }
        }
    }
    assert_eq!(keys, expect);
    assert_eq!(cells_csv(&a), cells_csv(&sweep(&cfg, &train, &test).unwrap()));
    let table = accuracy_table(&a).unwrap();
    assert_eq!(table.lines().next().unwrap(), "n_P,infonce,scl,scl_pu,pnu_punce");
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn seed_aggregation_over_probe_runs() {
    let train = data(200, 6.0, 2);
    let test = data(200, 6.0, 3);
    let pu = make_pu(&train, 30, 1).unwrap();
    let runs: Vec<RunMetrics> = (0..3)
        .map(|seed| {
            let cfg = small(seed);
            probe(&cfg, cfg.init_params(6).unwrap(), &pu, Some(&test)).unwrap().1
        })
        .collect();
    let agg = aggregate_seeds(&runs).unwrap();
    let last = agg
        .iter()
        .find(|a| a.split == "probe_test" && a.metric == "accuracy" && a.epoch == 7)
        .unwrap();
    let vals: Vec<f64> = runs.iter().map(|r| r.last("probe_test", "accuracy").unwrap()).collect();
    let (m, s) = mean_std(&vals).unwrap();
    assert!((last.mean - m).abs() < 1e-15);
    assert_eq!(last.std, s);
}
