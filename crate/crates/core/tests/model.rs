mod common;

use common::{downsized_model_config, isolation_trials, uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vesselgrade::autodiff::{Mode, Tape, Tensor};
use vesselgrade::evaluation::{BinningThresholds, PatientScore, ThresholdSet};
use vesselgrade::model::*;
use vesselgrade::phantom::{generate_patient, patient_view, AugmentDraw, PhantomProfile, PlaneView};
use vesselgrade::Error;

fn random_views(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Vec<PlaneView> {
    let [p, h, w] = config.view_shape();
    (0..11)
        .map(|_| PlaneView {
            planes: uniform(rng, &[p, h, w], 0.0, 1.0),
            angle_offset: 0.0,
        })
        .collect()
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    let p = ModelParams::init(&ModelConfig::default(), 0).unwrap();
    // conv 3x3 weights + bias + gamma + beta per block, fc 128→64, three 64→32→1 heads
    let blocks = (16 * 2 * 9 + 3 * 16) + (32 * 16 * 9 + 3 * 32) + (64 * 32 * 9 + 3 * 64) + (128 * 64 * 9 + 3 * 128);
    let fc = 64 * 128 + 64;
    let heads = 3 * (32 * 64 + 32 + 32 + 1);
    assert_eq!(p.parameter_count(), blocks + fc + heads);
    assert_eq!(p.parameter_count(), 112_371);
}

#[test]
fn one_extractor_serves_all_segments() {
    let config = downsized_model_config();
    let mut params = ModelParams::init(&config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut views = random_views(&mut rng, &config);
    views[7] = views[2].clone();
    let out = params.forward(&views, Mode::Eval).unwrap();
    assert_eq!(out.segment_features[7], out.segment_features[2]);
    assert_eq!(out.segment_scores[7], out.segment_scores[2]);
}

#[test]
fn permuting_segments_permutes_scores_and_keeps_pooled_features() {
    let config = downsized_model_config();
    let params = ModelParams::init(&config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let views = random_views(&mut rng, &config);
    let perm = [3, 10, 0, 7, 1, 9, 2, 8, 4, 6, 5];
    let permuted: Vec<PlaneView> = perm.iter().map(|&i| views[i].clone()).collect();
    let a = params.predict(&stack_views(&views).unwrap()).unwrap().remove(0);
    let b = params.predict(&stack_views(&permuted).unwrap()).unwrap().remove(0);
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(b.segment_scores[j], a.segment_scores[i]);
    }
    assert_eq!(a.pooled_features(), b.pooled_features());
    assert_eq!(a.cadrads_score, b.cadrads_score);
    for (f, &s) in b.pooled_feature_argmax.iter().enumerate() {
        assert_eq!(perm[s], a.pooled_feature_argmax[f]);
    }
}

#[test]
fn identical_segments_tie_to_the_lowest_index() {
    let config = downsized_model_config();
    let params = ModelParams::init(&config, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let one = random_views(&mut rng, &config).remove(0);
    let views = vec![one; 11];
    let out = params.predict(&stack_views(&views).unwrap()).unwrap().remove(0);
    assert!(out.pooled_feature_argmax.iter().all(|&s| s == 0));
    let counts = explain(&out);
    assert_eq!(counts[0], config.feature_dim);
    let ranking = attribution_ranking(&counts);
    assert_eq!(ranking[0].0.index(), 0);
    assert_eq!(ranking[1].0.index(), 1);
}

#[test]
fn explain_counts_cover_every_feature() {
    let config = downsized_model_config();
    let params = ModelParams::init(&config, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let views = random_views(&mut rng, &config);
        let out = params.predict(&stack_views(&views).unwrap()).unwrap().remove(0);
        let counts = explain(&out);
        assert_eq!(counts.iter().sum::<usize>(), config.feature_dim);
        let ranking = attribution_ranking(&counts);
        assert!(ranking
            .windows(2)
            .all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
    }
}

#[test]
fn gradient_reaches_only_contributing_segments() {
    let (leaked, reached) = isolation_trials(21, 25);
    assert_eq!(leaked, 0);
    assert!(reached > 25, "{reached}");
}

#[test]
fn zeroed_output_layer_returns_its_bias() {
    let config = downsized_model_config();
    let mut params = ModelParams::init(&config, 4).unwrap();
    for (h, b) in [
        (&mut params.cadrads_head, 2.5),
        (&mut params.calc_head, -1.0),
        (&mut params.stenosis_head, 0.75),
    ] {
        h.out.weight.data_mut().fill(0.0);
        h.out.bias.data_mut()[0] = b;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = params.forward(&random_views(&mut rng, &config), Mode::Eval).unwrap();
    assert_eq!(out.cadrads_score, 2.5);
    assert_eq!(out.calc_score, -1.0);
    assert!(out.segment_scores.iter().all(|&s| s == 0.75));
}

#[test]
fn loss_is_the_weighted_sum_of_its_terms() {
    let config = downsized_model_config();
    let params = ModelParams::init(&config, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = uniform(&mut rng, &[33, 2, 16, 8], 0.0, 1.0);
    let labels: Vec<_> = [11u64, 12, 13]
        .iter()
        .map(|&s| {
            let mut l = generate_patient(s, &PhantomProfile::easy()).unwrap().labels();
            l.seed = s;
            l
        })
        .collect();
    let targets = Targets::from_labels(&labels).unwrap();
    let weights = LossWeights {
        cadrads: 0.5,
        stenosis: 2.0,
        calc: 1.5,
    };
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, &params);
    let mut stats = params.running_stats();
    let x = tape.constant(input.clone());
    let g = forward_graph(&mut tape, &vars, &mut stats, x, Mode::Eval).unwrap();
    let l = multitask_loss(&mut tape, &g, &targets, &weights).unwrap();
    let total = tape.value(l).item();

    let mse = |t: &mut Tape, v, target: &Tensor| {
        let c = t.constant(target.clone());
        let l = t.mse_loss(v, c).unwrap();
        t.value(l).item()
    };
    let terms = [
        mse(&mut tape, g.cadrads, &targets.cadrads),
        mse(&mut tape, g.segment_scores, &targets.stenosis),
        mse(&mut tape, g.calc, &targets.calc),
    ];
    let sum = 0.5 * terms[0] + 2.0 * terms[1] + 1.5 * terms[2];
    assert!((total - sum).abs() < 1e-12, "{total} vs {sum}");

    let outs = params.predict(&input).unwrap();
    let v = loss_value(&outs, &labels, &weights).unwrap();
    assert!((total - v).abs() < 1e-12, "{total} vs {v}");
}

#[test]
fn hand_computed_loss_terms() {
    let mut labels = generate_patient(1, &PhantomProfile::easy()).unwrap().labels();
    labels.segment_labels = [vesselgrade::phantom::StenosisClass::new(0).unwrap(); 11];
    labels.segment_labels[4] = vesselgrade::phantom::StenosisClass::new(3).unwrap();
    labels.cad_rads = vesselgrade::phantom::CadRadsClass::new(3).unwrap();
    labels.calc_grade = vesselgrade::phantom::CalcGrade::new(2).unwrap();
    let mut seg = [0.0; 11];
    seg[4] = 2.0;
    seg[0] = 1.0;
    // cadrads (2.5-3)^2 = 0.25; stenosis (1 + 1)/11; calc (4-2)^2 = 4
    let t = loss_terms(&seg, 2.5, 4.0, &labels);
    assert_eq!(t[0], 0.25);
    assert!((t[1] - 2.0 / 11.0).abs() < 1e-15);
    assert_eq!(t[2], 4.0);
    let w = LossWeights {
        cadrads: 1.0,
        stenosis: 0.0,
        calc: 1.0,
    };
    assert_eq!(combine_terms(t, &w), 4.25);
}

#[test]
fn invalid_weights_are_rejected() {
    for w in [
        LossWeights {
            cadrads: 0.0,
            stenosis: 0.0,
            calc: 0.0,
        },
        LossWeights {
            cadrads: -1.0,
            stenosis: 1.0,
            calc: 0.0,
        },
        LossWeights {
            cadrads: f64::NAN,
            stenosis: 1.0,
            calc: 0.0,
        },
    ] {
        assert!(matches!(w.validate(), Err(Error::Config(_))), "{w:?}");
    }
}

#[test]
fn indivisible_view_shape_is_a_config_error() {
    let c = ModelConfig {
        input_height: 14,
        ..downsized_model_config()
    };
    assert!(matches!(ModelParams::init(&c, 0), Err(Error::Config(_))));
}

#[test]
fn predict_leaves_running_stats_alone_and_train_forward_updates_them() {
    let config = downsized_model_config();
    let mut params = ModelParams::init(&config, 2).unwrap();
    let before = params.running_stats();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let views = random_views(&mut rng, &config);
    params.predict(&stack_views(&views).unwrap()).unwrap();
    assert_eq!(params.running_stats(), before);
    params.forward(&views, Mode::Train).unwrap();
    assert_ne!(params.running_stats(), before);
}

#[test]
fn full_size_model_runs_on_sliced_phantoms() {
    let config = ModelConfig {
        conv_channels: vec![4, 8, 8, 16],
        feature_dim: 16,
        head_hidden: 8,
        ..Default::default()
    };
    let mut params = ModelParams::init(&config, 1).unwrap();
    let sample = generate_patient(40, &PhantomProfile::easy()).unwrap();
    let view = patient_view(&sample, &[AugmentDraw::IDENTITY; 11], 2).unwrap();
    let a = params.forward(&view.views, Mode::Eval).unwrap();
    let input = assemble_input(&[&sample], &[[AugmentDraw::IDENTITY; 11]], &config).unwrap();
    let b = params.predict(&input).unwrap().remove(0);
    assert_eq!(a, b);
    assert!(params.forward(&view.views[..10], Mode::Eval).is_err());
}

fn checkpoint(seed: u64) -> Checkpoint {
    let config = downsized_model_config();
    let mut params = ModelParams::init(&config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.forward(&random_views(&mut rng, &config), Mode::Train).unwrap();
    let t = |cuts: Vec<f64>| BinningThresholds {
        cuts,
        fitted_on: "fold 0 fit split".into(),
    };
    Checkpoint {
        params,
        thresholds: ThresholdSet {
            patient_score: PatientScore::CadradsHead,
            cadrads: t(vec![0.5, 1.5, 2.5, 3.5, 4.5]),
            calc: None,
            segment: Some(t(vec![0.4, 1.6, f64::INFINITY, 3.1, 4.2])),
        },
        meta: CheckpointMeta {
            target_set: "cadrads,sten".into(),
            fold: 2,
            epoch: 7,
            val_loss: 0.8125,
            config_digest: [7; 32],
            dataset_digest: [9; 32],
            test_ids: vec![4, 8, 15, 16, 23, 42],
        },
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let c = checkpoint(12);
    let bytes = c.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.encode(), bytes);
    assert_eq!(back.digest(), c.digest());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fold2.vgck");
    write_checkpoint(&path, &c).unwrap();
    let again = read_checkpoint(&path).unwrap();
    let path2 = dir.path().join("copy.vgck");
    write_checkpoint(&path2, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn damaged_checkpoints_report_offsets() {
    let bytes = checkpoint(13).encode();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 4, .. })));
    assert!(matches!(
        Checkpoint::decode(&bytes[..bytes.len() - 3]),
        Err(Error::Format { .. })
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::decode(&long), Err(Error::Format { .. })));
}

#[test]
fn all_zero_views_give_identical_segment_features() {
    let config = downsized_model_config();
    let mut params = ModelParams::init(&config, 8).unwrap();
    let [p, h, w] = config.view_shape();
    let zero = PlaneView {
        planes: Tensor::zeros(&[p, h, w]),
        angle_offset: 0.0,
    };
    let out = params.forward(&vec![zero; 11], Mode::Eval).unwrap();
    for s in 1..11 {
        assert_eq!(out.segment_features[s], out.segment_features[0]);
    }
    assert_eq!(explain(&out)[0], config.feature_dim);
}
