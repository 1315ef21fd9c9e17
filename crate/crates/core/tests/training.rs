use std::collections::BTreeSet;

use vesselgrade::autodiff::{AdamState, Mode, Tape, Tensor};
use vesselgrade::model::{extract_features, stenosis_head, ModelConfig, ModelParams, ParamGroup, ParamVars};
use vesselgrade::phantom::preprocess::{augment_draws, AugmentDraw};
use vesselgrade::phantom::{generate_patient, PatientSample, PhantomProfile, SEGMENT_COUNT};
use vesselgrade::training::{
    loss_csv, make_splits, pretrain_extractor, run_fold, run_planned, train_full, ExperimentConfig, Fold,
    PretrainCache, Stage, TargetSet, TrainConfig,
};
use vesselgrade::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cohort(count: usize) -> Vec<PatientSample> {
    let profile = PhantomProfile::easy();
    (0..count as u64)
        .map(|s| generate_patient(500 + s, &profile).unwrap())
        .collect()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        conv_channels: vec![2, 4],
        feature_dim: 4,
        head_hidden: 4,
        ..Default::default()
    }
}

fn tiny_experiment(target: TargetSet) -> ExperimentConfig {
    ExperimentConfig {
        model: tiny_model(),
        training: TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            pretrain_batch_size: 4,
            epochs_pretrain: 1,
            epochs_full: 2,
            seed: 3,
            target_set: target,
            folds: 1,
            ..Default::default()
        },
    }
}

fn ids(n: u64) -> Vec<u64> {
    (0..n).collect()
}

#[test]
fn fifteen_patients_split_ten_five_with_eight_two_folds() {
    let plan = make_splits(&ids(15), 1).unwrap();
    assert_eq!((plan.train_ids.len(), plan.test_ids.len()), (10, 5));
    assert_eq!(plan.folds.len(), 5);
    for f in &plan.folds {
        assert_eq!((f.fit_ids.len(), f.val_ids.len()), (8, 2));
    }
}

#[test]
fn splits_are_patient_wise_partitions() {
    for n in [15u64, 16, 31, 100] {
        let plan = make_splits(&ids(n), n).unwrap();
        let train: BTreeSet<u64> = plan.train_ids.iter().copied().collect();
        let test: BTreeSet<u64> = plan.test_ids.iter().copied().collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), n as usize);

        let mut vals: Vec<u64> = plan.folds.iter().flat_map(|f| f.val_ids.clone()).collect();
        vals.sort_unstable();
        assert_eq!(vals, train.iter().copied().collect::<Vec<_>>());
        for f in &plan.folds {
            let fit: BTreeSet<u64> = f.fit_ids.iter().copied().collect();
            let val: BTreeSet<u64> = f.val_ids.iter().copied().collect();
            assert!(fit.is_disjoint(&val));
            assert_eq!(fit.union(&val).copied().collect::<BTreeSet<_>>(), train);
        }
    }
}

#[test]
fn splits_follow_the_seed() {
    let a = make_splits(&ids(40), 9).unwrap();
    assert_eq!(a, make_splits(&ids(40), 9).unwrap());
    assert_ne!(a.test_ids, make_splits(&ids(40), 10).unwrap().test_ids);
}

#[test]
fn too_few_or_repeated_patients_are_config_errors() {
    assert!(matches!(make_splits(&ids(14), 0), Err(Error::Config(_))));
    let mut dup = ids(20);
    dup[3] = 7;
    assert!(matches!(make_splits(&dup, 0), Err(Error::Config(_))));
}

#[test]
fn zero_pretraining_epochs_return_the_initialisation() {
    let data = cohort(10);
    let fold = Fold {
        fit_ids: ids(8),
        val_ids: vec![8, 9],
    };
    let init = ModelParams::init(&tiny_model(), 4).unwrap();
    let config = TrainConfig {
        epochs_pretrain: 0,
        batch_size: 4,
        pretrain_batch_size: 4,
        ..Default::default()
    };
    let pre = pretrain_extractor(&data, &fold, 0, &init, &config, &|_| {}).unwrap();
    assert_eq!(pre.params, init);
    assert_eq!(pre.best_epoch, 0);
    assert_eq!(pre.history.len(), 1);
    assert_eq!(pre.history[0].train_loss, None);
}

#[test]
fn segment_loss_on_a_fixed_batch_falls_within_ten_steps() {
    let data = cohort(2);
    let config = ModelConfig {
        conv_channels: vec![4, 8],
        feature_dim: 8,
        head_hidden: 8,
        ..Default::default()
    };
    let mut params = ModelParams::init(&config, 11).unwrap();
    let samples: Vec<&PatientSample> = data.iter().collect();
    let draws = [[AugmentDraw::IDENTITY; SEGMENT_COUNT]; 2];
    let input = vesselgrade::model::assemble_input(&samples, &draws, &config).unwrap();
    let target: Vec<f64> = data
        .iter()
        .flat_map(|s| s.segment_labels.iter().map(|c| f64::from(c.value())))
        .collect();
    let target = Tensor::new(vec![2 * SEGMENT_COUNT, 1], target).unwrap();
    let groups = [ParamGroup::Extractor, ParamGroup::StenosisHead];
    let train = TrainConfig::default();
    let mut adam = AdamState::new(train.adam(), params.tensors(&groups));
    let mut losses = Vec::new();
    for _ in 0..=10 {
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &params);
        let mut stats = params.running_stats();
        let x = tape.constant(input.clone());
        let f = extract_features(&mut tape, &vars, &mut stats, x, Mode::Train).unwrap();
        let s = stenosis_head(&mut tape, &vars, f).unwrap();
        let t = tape.constant(target.clone());
        let loss = tape.mse_loss(s, t).unwrap();
        losses.push(tape.value(loss).data()[0]);
        tape.backward(loss).unwrap();
        vars.collect_grads(&tape, &mut params).unwrap();
        adam.step(params.tensors_mut(&groups)).unwrap();
        params.zero_grads();
    }
    assert!(losses[10] < losses[0], "{losses:?}");
}

#[test]
fn saved_epoch_has_the_lowest_recorded_validation_loss() {
    let data = cohort(12);
    let fold = Fold {
        fit_ids: ids(8),
        val_ids: vec![8, 9, 10, 11],
    };
    let init = ModelParams::init(&tiny_model(), 2).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        epochs_full: 4,
        ..Default::default()
    };
    let trained = train_full(&data, &fold, 0, &init, &config, &|_| {}).unwrap();
    assert_eq!(trained.history.len(), 5);
    let min = trained.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(trained.best_val_loss, min);
    assert_eq!(trained.history[trained.best_epoch].val_loss, min);
    assert!(trained.history.iter().all(|r| r.stage == Stage::Full));
}

#[test]
fn frozen_extractor_is_left_untouched() {
    let data = cohort(12);
    let fold = Fold {
        fit_ids: ids(8),
        val_ids: vec![8, 9, 10, 11],
    };
    let init = ModelParams::init(&tiny_model(), 2).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        epochs_full: 2,
        freeze_extractor: true,
        ..Default::default()
    };
    let trained = train_full(&data, &fold, 0, &init, &config, &|_| {}).unwrap();
    assert_eq!(trained.params.extractor, init.extractor);
}

#[test]
fn augmentation_changes_inputs_but_never_labels() {
    let data = cohort(3);
    let config = tiny_model();
    let samples: Vec<&PatientSample> = data.iter().collect();
    let before: Vec<_> = data.iter().map(|s| s.labels()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<_> = (0..3).map(|_| augment_draws(&mut rng)).collect();
    let identity = vec![[AugmentDraw::IDENTITY; SEGMENT_COUNT]; 3];
    let plain = vesselgrade::model::assemble_input(&samples, &identity, &config).unwrap();
    let shifted = vesselgrade::model::assemble_input(&samples, &draws, &config).unwrap();
    assert_ne!(plain.data(), shifted.data());
    let after: Vec<_> = data.iter().map(|s| s.labels()).collect();
    assert_eq!(before, after);
}

#[test]
fn equal_seeds_give_identical_checkpoints() {
    let data = cohort(24);
    let plan = make_splits(&ids(24), 3).unwrap();
    let config = tiny_experiment(TargetSet::Full);
    let a = run_fold(&data, &[1; 32], &config, &plan, 0, None, &|_| {}).unwrap();
    let b = run_fold(&data, &[1; 32], &config, &plan, 0, None, &|_| {}).unwrap();
    assert_eq!(a.checkpoint.digest(), b.checkpoint.digest());
    assert_eq!(a.report, b.report);

    let mut other = config.clone();
    other.training.seed = 4;
    let c = run_fold(&data, &[1; 32], &other, &plan, 0, None, &|_| {}).unwrap();
    assert_ne!(a.checkpoint.digest(), c.checkpoint.digest());
}

#[test]
fn target_sets_choose_pretraining_and_thresholds() {
    let data = cohort(24);
    let plan = make_splits(&ids(24), 3).unwrap();
    let cache = PretrainCache::new();
    let run = |t| run_fold(&data, &[1; 32], &tiny_experiment(t), &plan, 0, Some(&cache), &|_| {}).unwrap();

    let full = run(TargetSet::Full);
    assert_eq!(cache.len(), 1);
    assert!(full.history.iter().any(|r| r.stage == Stage::Pretrain));
    assert!(full.checkpoint.thresholds.calc.is_some());
    assert!(full.checkpoint.thresholds.segment.is_some());
    assert_eq!(full.checkpoint.meta.target_set, "cadrads,sten,calc");

    let baseline = run(TargetSet::StenosisBaseline);
    assert_eq!(cache.len(), 1, "baseline reuses the full model's pretraining");
    let pre = |o: &vesselgrade::training::FoldOutcome| {
        o.history
            .iter()
            .filter(|r| r.stage == Stage::Pretrain)
            .copied()
            .collect::<Vec<_>>()
    };
    assert_eq!(pre(&full), pre(&baseline));
    assert_eq!(
        baseline.checkpoint.thresholds.patient_score,
        vesselgrade::evaluation::PatientScore::MaxSegment
    );
    assert!(baseline.checkpoint.thresholds.calc.is_none());

    let only = run(TargetSet::CadradsOnly);
    assert!(only.history.iter().all(|r| r.stage == Stage::Full));
    assert!(only.checkpoint.thresholds.segment.is_none());
    assert_eq!(cache.len(), 1);
}

#[test]
fn aggregate_accuracy_is_the_mean_over_folds() {
    let data = cohort(24);
    let plan = make_splits(&ids(24), 3).unwrap();
    let mut config = tiny_experiment(TargetSet::CadradsOnly);
    config.training.folds = 3;
    let exp = run_planned(&data, &[0; 32], &config, &plan, 2, None, &|_| {}).unwrap();
    let per = exp.report.per_fold("cadrads", "accuracy");
    assert_eq!(per.len(), 3);
    let mean = per.iter().sum::<f64>() / 3.0;
    assert!((exp.report.mean_of("cadrads", "accuracy").unwrap() - mean).abs() < 1e-12);
    assert_eq!(exp.folds.iter().map(|f| f.fold).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn exploding_loss_names_the_batch_seed() {
    let data = cohort(12);
    let fold = Fold {
        fit_ids: ids(8),
        val_ids: vec![8, 9, 10, 11],
    };
    let init = ModelParams::init(&tiny_model(), 2).unwrap();
    let config = TrainConfig {
        learning_rate: 1e300,
        batch_size: 2,
        epochs_full: 1,
        ..Default::default()
    };
    match train_full(&data, &fold, 0, &init, &config, &|_| {}) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("batch seed"), "{msg}"),
        other => panic!("expected a numeric failure, got {other:?}"),
    }
}

#[test]
fn loss_csv_lists_one_stage() {
    let data = cohort(12);
    let fold = Fold {
        fit_ids: ids(8),
        val_ids: vec![8, 9, 10, 11],
    };
    let init = ModelParams::init(&tiny_model(), 2).unwrap();
    let config = TrainConfig {
        batch_size: 4,
        epochs_full: 1,
        ..Default::default()
    };
    let trained = train_full(&data, &fold, 2, &init, &config, &|_| {}).unwrap();
    let csv = loss_csv(&trained.history, Stage::Full);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,fold,train_loss,val_loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,2,,"));
    assert!(lines[2].starts_with("1,2,"));
    assert_eq!(loss_csv(&trained.history, Stage::Pretrain).lines().count(), 1);
}

#[test]
fn experiment_config_round_trips_through_toml() {
    let config = tiny_experiment(TargetSet::CadradsStenosis);
    let back = ExperimentConfig::from_toml(&config.to_toml()).unwrap();
    assert_eq!(back, config);
    assert_eq!(back.digest(), config.digest());
    let mut other = config.clone();
    other.training.target_set = TargetSet::Full;
    assert_ne!(other.digest(), config.digest());
    assert!(matches!(
        ExperimentConfig::from_toml("[training]\nbatch_size = 1\n"),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        ExperimentConfig::from_toml("[training]\nbogus = 1\n"),
        Err(Error::Config(_))
    ));
}

#[test]
fn target_set_names_parse() {
    for t in TargetSet::ALL {
        assert_eq!(t.name().parse::<TargetSet>().unwrap(), t);
    }
    assert_eq!(
        "cadrads, sten".parse::<TargetSet>().unwrap(),
        TargetSet::CadradsStenosis
    );
    assert!(matches!("sten".parse::<TargetSet>(), Err(Error::Config(_))));
}
