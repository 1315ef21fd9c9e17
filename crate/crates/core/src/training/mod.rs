//! Cross-validated training: segment-level pretraining of the extractor,
//! multi-task fine-tuning and lowest-validation-loss checkpointing.

mod config;
mod splits;

pub use config::{ExperimentConfig, TargetSet, TrainConfig, FOLD_COUNT};
pub use splits::{make_splits, Fold, SplitPlan, MIN_PATIENTS};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamState, Mode, RunningStats, Tape, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_fold, fit_threshold_set, FoldReport, MetricsReport, PatientScore, ScoredPatient};
use crate::model::{
    combine_terms, explain, extract_features, forward_graph, loss_terms, multitask_loss, patient_input_len,
    stenosis_head, write_patient_input, Checkpoint, CheckpointMeta, LossWeights, ModelConfig, ModelParams, ParamGroup,
    ParamVars, Targets,
};
use crate::phantom::preprocess::{augment_draws, write_planes, AugmentDraw};
use crate::phantom::{PatientSource, SEGMENT_COUNT};

/// Progress sink; receives one line per epoch.
pub type Log<'a> = &'a (dyn Fn(&str) + Sync);

pub fn quiet(_: &str) {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain,
    Full,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Full => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Full => "full",
        }
    }
}

/// Losses after one epoch. Epoch 0 is the untrained state and has no
/// training loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

/// `epoch,fold,train_loss,val_loss` rows for one stage.
pub fn loss_csv(records: &[EpochRecord], stage: Stage) -> String {
    let mut out = String::from("epoch,fold,train_loss,val_loss\n");
    for r in records.iter().filter(|r| r.stage == stage) {
        let train = r.train_loss.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.fold, train, r.val_loss);
    }
    out
}

/// Stable per-purpose seed: SHA-256 of the base seed and a path of tags.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(fold as u64)
}

fn draws_for(rng: &mut ChaCha8Rng, augment: bool) -> [AugmentDraw; SEGMENT_COUNT] {
    if augment {
        augment_draws(rng)
    } else {
        [AugmentDraw::IDENTITY; SEGMENT_COUNT]
    }
}

fn index(id: u64) -> usize {
    id as usize
}

fn check_finite(loss: f64, what: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite loss {loss} in {}", what())))
    }
}

fn store_stats(params: &mut ModelParams, stats: Vec<RunningStats>) {
    for (b, s) in params.extractor.blocks.iter_mut().zip(stats) {
        b.stats = s;
    }
}

fn adam_step(adam: &mut AdamState, params: &mut ModelParams, groups: &[ParamGroup]) -> Result<()> {
    adam.step(params.tensors_mut(groups))?;
    params.zero_grads();
    Ok(())
}

/// Eval-mode outputs without augmentation for the given dataset indices.
pub fn score_patients<S: PatientSource + ?Sized>(
    params: &ModelParams,
    source: &S,
    ids: &[u64],
    chunk: usize,
) -> Result<Vec<ScoredPatient>> {
    let per = patient_input_len(&params.config)?;
    let [p, h, w] = params.config.view_shape();
    let identity = [AugmentDraw::IDENTITY; SEGMENT_COUNT];
    let mut scored = Vec::with_capacity(ids.len());
    for part in ids.chunks(chunk.max(1)) {
        let mut data = vec![0.0; part.len() * per];
        for (&id, out) in part.iter().zip(data.chunks_mut(per)) {
            let sample = source.load(index(id))?;
            write_patient_input(&sample, &identity, &params.config, out)?;
        }
        let input = Tensor::new(vec![part.len() * SEGMENT_COUNT, p, h, w], data)?;
        for (&id, o) in part.iter().zip(params.predict(&input)?) {
            scored.push(ScoredPatient {
                id,
                labels: source.labels(index(id))?,
                segment_scores: o.segment_scores,
                cadrads_score: o.cadrads_score,
                calc_score: o.calc_score,
                attribution: explain(&o),
            });
        }
    }
    Ok(scored)
}

/// Mean weighted loss over scored patients.
pub fn scored_loss(patients: &[ScoredPatient], weights: &LossWeights) -> Result<f64> {
    if patients.is_empty() {
        return Err(Error::contract("no patients to compute a loss over"));
    }
    let mut sums = [0.0; 3];
    for p in patients {
        let t = loss_terms(&p.segment_scores, p.cadrads_score, p.calc_score, &p.labels);
        for (s, v) in sums.iter_mut().zip(t) {
            *s += v;
        }
    }
    let n = patients.len() as f64;
    Ok(combine_terms(sums.map(|s| s / n), weights))
}

/// Mean squared segment error on the validation patients.
fn segment_val_loss<S: PatientSource + ?Sized>(
    params: &ModelParams,
    source: &S,
    ids: &[u64],
    chunk: usize,
) -> Result<f64> {
    let scored = score_patients(params, source, ids, chunk)?;
    scored_loss(
        &scored,
        &LossWeights {
            cadrads: 0.0,
            stenosis: 1.0,
            calc: 0.0,
        },
    )
}

/// Result of segment-level pretraining.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn pretrain_batch(params: &mut ModelParams, adam: &mut AdamState, views: &[(Vec<f64>, f64)]) -> Result<f64> {
    let [p, h, w] = params.config.view_shape();
    let n = views.len();
    let mut data = Vec::with_capacity(n * p * h * w);
    for (v, _) in views {
        data.extend_from_slice(v);
    }
    let input = Tensor::new(vec![n, p, h, w], data)?;
    let target = Tensor::new(vec![n, 1], views.iter().map(|(_, y)| *y).collect())?;
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params);
    let mut stats = params.running_stats();
    let x = tape.constant(input);
    let features = extract_features(&mut tape, &vars, &mut stats, x, Mode::Train)?;
    let scores = stenosis_head(&mut tape, &vars, features)?;
    let t = tape.constant(target);
    let loss = tape.mse_loss(scores, t)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    vars.collect_grads(&tape, params)?;
    store_stats(params, stats);
    adam_step(adam, params, &[ParamGroup::Extractor, ParamGroup::StenosisHead])?;
    Ok(value)
}

/// Trains extractor and stenosis head on single segment views pooled across
/// patients and returns the snapshot with the lowest validation loss.
///
/// Each epoch shuffles the fit patients into groups of `pretrain_batch_size`;
/// the `11 × pretrain_batch_size` segments of a group are shuffled and cut into
/// 11 batches. A trailing partial group is dropped.
pub fn pretrain_extractor<S: PatientSource + ?Sized>(
    source: &S,
    fold: &Fold,
    fold_index: usize,
    init: &ModelParams,
    config: &TrainConfig,
    log: Log<'_>,
) -> Result<Pretrained> {
    config.validate()?;
    let bs = config.pretrain_batch_size;
    if fold.fit_ids.len() < bs {
        return Err(Error::config(format!(
            "{} fit patients cannot fill a pretraining group of {bs}",
            fold.fit_ids.len()
        )));
    }
    if fold.val_ids.is_empty() {
        return Err(Error::config("validation split is empty"));
    }
    let seed = fold_seed(config.seed, fold_index);
    let [p, h, w] = init.config.view_shape();
    let per_view = p * h * w;
    let mut params = init.clone();
    let mut adam = AdamState::new(
        config.adam(),
        params.tensors(&[ParamGroup::Extractor, ParamGroup::StenosisHead]),
    );

    let val0 = segment_val_loss(&params, source, &fold.val_ids, config.eval_chunk)?;
    let mut history = vec![EpochRecord {
        stage: Stage::Pretrain,
        fold: fold_index,
        epoch: 0,
        train_loss: None,
        val_loss: val0,
    }];
    let mut best = (val0, 0, params.clone());
    log(&format!("fold {fold_index} pretrain epoch 0 val {val0:.5}"));

    for epoch in 1..=config.epochs_pretrain {
        let mut order = fold.fit_ids.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[Stage::Pretrain.tag(), epoch as u64],
        )));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (g, group) in order.chunks_exact(bs).enumerate() {
            let group_seed = derive_seed(seed, &[Stage::Pretrain.tag(), epoch as u64, g as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(group_seed);
            let mut views = Vec::with_capacity(bs * SEGMENT_COUNT);
            for &id in group {
                let sample = source.load(index(id))?;
                let draws = draws_for(&mut rng, config.augment);
                for ((stack, d), class) in sample.segments.iter().zip(&draws).zip(&sample.segment_labels) {
                    let mut v = vec![0.0; per_view];
                    write_planes(stack, d.angle_offset, p, d.shift, &mut v)?;
                    views.push((v, f64::from(class.value())));
                }
            }
            views.shuffle(&mut rng);
            for (b, batch) in views.chunks_exact(bs).enumerate() {
                let loss = pretrain_batch(&mut params, &mut adam, batch)?;
                check_finite(loss, || {
                    format!("fold {fold_index} pretraining epoch {epoch} group {g} batch {b} (batch seed {group_seed})")
                })?;
                total += loss;
                batches += 1;
            }
        }
        let val = segment_val_loss(&params, source, &fold.val_ids, config.eval_chunk)?;
        check_finite(val, || {
            format!("fold {fold_index} pretraining validation after epoch {epoch}")
        })?;
        let train = total / batches as f64;
        history.push(EpochRecord {
            stage: Stage::Pretrain,
            fold: fold_index,
            epoch,
            train_loss: Some(train),
            val_loss: val,
        });
        log(&format!(
            "fold {fold_index} pretrain epoch {epoch} train {train:.5} val {val:.5}"
        ));
        if val < best.0 {
            best = (val, epoch, params.clone());
        }
    }
    Ok(Pretrained {
        params: best.2,
        best_epoch: best.1,
        history,
    })
}

/// Best parameters of a fine-tuning run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

/// Multi-task mini-batch training from `init`; keeps the epoch with the
/// lowest validation loss, epoch 0 included.
pub fn train_full<S: PatientSource + ?Sized>(
    source: &S,
    fold: &Fold,
    fold_index: usize,
    init: &ModelParams,
    config: &TrainConfig,
    log: Log<'_>,
) -> Result<Trained> {
    config.validate()?;
    let bs = config.batch_size;
    if fold.fit_ids.len() < bs {
        return Err(Error::config(format!(
            "{} fit patients cannot fill a batch of {bs}",
            fold.fit_ids.len()
        )));
    }
    if fold.val_ids.is_empty() {
        return Err(Error::config("validation split is empty"));
    }
    let seed = fold_seed(config.seed, fold_index);
    let weights = init.config.loss_weights;
    weights.validate()?;
    let mut params = init.clone();
    if config.freeze_extractor {
        params.set_trainable(ParamGroup::Extractor, false);
    }
    let mut adam = AdamState::new(config.adam(), params.tensors(&ParamGroup::ALL));
    let per = patient_input_len(&params.config)?;
    let [p, h, w] = params.config.view_shape();

    let val_loss = |params: &ModelParams| -> Result<f64> {
        scored_loss(
            &score_patients(params, source, &fold.val_ids, config.eval_chunk)?,
            &weights,
        )
    };
    let val0 = val_loss(&params)?;
    let mut history = vec![EpochRecord {
        stage: Stage::Full,
        fold: fold_index,
        epoch: 0,
        train_loss: None,
        val_loss: val0,
    }];
    let mut best = (val0, 0, params.clone());
    log(&format!("fold {fold_index} full epoch 0 val {val0:.5}"));

    for epoch in 1..=config.epochs_full {
        let mut order = fold.fit_ids.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[Stage::Full.tag(), epoch as u64],
        )));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks_exact(bs).enumerate() {
            let batch_seed = derive_seed(seed, &[Stage::Full.tag(), epoch as u64, b as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
            let mut data = vec![0.0; bs * per];
            let mut labels = Vec::with_capacity(bs);
            for (&id, out) in batch.iter().zip(data.chunks_mut(per)) {
                let sample = source.load(index(id))?;
                let draws = draws_for(&mut rng, config.augment);
                write_patient_input(&sample, &draws, &params.config, out)?;
                labels.push(sample.labels());
            }
            let input = Tensor::new(vec![bs * SEGMENT_COUNT, p, h, w], data)?;
            let targets = Targets::from_labels(&labels)?;
            let mut tape = Tape::new();
            let vars = ParamVars::bind(&mut tape, &params);
            let mut stats = params.running_stats();
            let x = tape.constant(input);
            let graph = forward_graph(&mut tape, &vars, &mut stats, x, Mode::Train)?;
            let loss = multitask_loss(&mut tape, &graph, &targets, &weights)?;
            let value = tape.value(loss).data()[0];
            check_finite(value, || {
                format!("fold {fold_index} epoch {epoch} batch {b} (batch seed {batch_seed})")
            })?;
            tape.backward(loss)?;
            vars.collect_grads(&tape, &mut params)?;
            if !config.freeze_extractor {
                store_stats(&mut params, stats);
            }
            adam_step(&mut adam, &mut params, &ParamGroup::ALL)?;
            total += value;
            batches += 1;
        }
        let val = val_loss(&params)?;
        check_finite(val, || format!("fold {fold_index} validation after epoch {epoch}"))?;
        let train = total / batches as f64;
        history.push(EpochRecord {
            stage: Stage::Full,
            fold: fold_index,
            epoch,
            train_loss: Some(train),
            val_loss: val,
        });
        log(&format!(
            "fold {fold_index} full epoch {epoch} train {train:.5} val {val:.5}"
        ));
        if val < best.0 {
            best = (val, epoch, params.clone());
        }
    }
    let mut params = best.2;
    if config.freeze_extractor {
        params.set_trainable(ParamGroup::Extractor, true);
    }
    Ok(Trained {
        params,
        best_epoch: best.1,
        best_val_loss: best.0,
        history,
    })
}

/// Pretraining results shared between runs whose pretraining is identical,
/// e.g. the full model and the stenosis baseline.
#[derive(Default)]
pub struct PretrainCache {
    entries: Mutex<BTreeMap<[u8; 32], Arc<Pretrained>>>,
}

impl PretrainCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn pretrain_key(
    model: &ModelConfig,
    config: &TrainConfig,
    fold: &Fold,
    fold_index: usize,
    dataset: &[u8; 32],
) -> [u8; 32] {
    let model = ModelConfig {
        loss_weights: LossWeights::FULL,
        ..model.clone()
    };
    let mut h = Sha256::new();
    h.update(toml::to_string(&model).expect("config serialises"));
    for v in [config.learning_rate, config.beta1, config.beta2, config.epsilon] {
        h.update(v.to_le_bytes());
    }
    for v in [
        config.pretrain_batch_size as u64,
        config.epochs_pretrain as u64,
        config.seed,
        fold_index as u64,
    ] {
        h.update(v.to_le_bytes());
    }
    h.update([u8::from(config.augment)]);
    h.update(dataset);
    for ids in [&fold.fit_ids, &fold.val_ids] {
        h.update((ids.len() as u64).to_le_bytes());
        for id in ids {
            h.update(id.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Everything one fold produced.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub report: FoldReport,
}

/// Scores a checkpoint's model on `ids` and evaluates it with its thresholds.
pub fn evaluate_checkpoint<S: PatientSource + ?Sized>(
    checkpoint: &Checkpoint,
    source: &S,
    ids: &[u64],
    chunk: usize,
) -> Result<FoldReport> {
    let scored = score_patients(&checkpoint.params, source, ids, chunk)?;
    evaluate_fold(checkpoint.meta.fold as usize, &scored, &checkpoint.thresholds)
}

/// Pretraining (when stenosis is a target), fine-tuning, threshold fitting on
/// the fit split and evaluation on the test split for one fold.
#[allow(clippy::too_many_arguments)]
pub fn run_fold<S: PatientSource + ?Sized>(
    source: &S,
    dataset_digest: &[u8; 32],
    config: &ExperimentConfig,
    plan: &SplitPlan,
    fold_index: usize,
    cache: Option<&PretrainCache>,
    log: Log<'_>,
) -> Result<FoldOutcome> {
    config.validate()?;
    let fold = plan
        .folds
        .get(fold_index)
        .ok_or_else(|| Error::config(format!("fold {fold_index} does not exist")))?;
    let tc = &config.training;
    let target = tc.target_set;
    let model = config.effective_model();
    let mut init = ModelParams::init(&model, fold_seed(tc.seed, fold_index))?;
    let mut history = Vec::new();
    if target.trains_stenosis() {
        let key = pretrain_key(&model, tc, fold, fold_index, dataset_digest);
        let cached = cache.and_then(|c| c.entries.lock().expect("cache lock").get(&key).cloned());
        let pre = match cached {
            Some(p) => {
                log(&format!("fold {fold_index} pretraining reused"));
                p
            }
            None => {
                let p = Arc::new(pretrain_extractor(source, fold, fold_index, &init, tc, log)?);
                if let Some(c) = cache {
                    c.entries.lock().expect("cache lock").insert(key, p.clone());
                }
                p
            }
        };
        history.extend_from_slice(&pre.history);
        init.adopt_extractor(&pre.params);
    }
    let trained = train_full(source, fold, fold_index, &init, tc, log)?;
    history.extend_from_slice(&trained.history);

    let kind = if target.is_baseline() {
        PatientScore::MaxSegment
    } else {
        PatientScore::CadradsHead
    };
    let fit_scores = score_patients(&trained.params, source, &fold.fit_ids, tc.eval_chunk)?;
    let thresholds = fit_threshold_set(
        &fit_scores,
        kind,
        target.trains_calc(),
        target.trains_stenosis(),
        &format!("fold {fold_index} fit split"),
    )?;
    let checkpoint = Checkpoint {
        params: trained.params,
        thresholds,
        meta: CheckpointMeta {
            target_set: target.name().to_string(),
            fold: fold_index as u32,
            epoch: trained.best_epoch as u32,
            val_loss: trained.best_val_loss,
            config_digest: config.digest(),
            dataset_digest: *dataset_digest,
            test_ids: plan.test_ids.clone(),
        },
    };
    let report = evaluate_checkpoint(&checkpoint, source, &plan.test_ids, tc.eval_chunk)?;
    Ok(FoldOutcome {
        fold: fold_index,
        checkpoint,
        history,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub plan: SplitPlan,
    pub folds: Vec<FoldOutcome>,
    pub report: MetricsReport,
}

impl Experiment {
    pub fn history(&self) -> Vec<EpochRecord> {
        self.folds.iter().flat_map(|f| f.history.iter().copied()).collect()
    }
}

/// Splits `source`, runs the configured folds on up to `jobs` threads and
/// aggregates their test-set metrics.
pub fn run_experiment<S: PatientSource + ?Sized>(
    source: &S,
    dataset_digest: &[u8; 32],
    config: &ExperimentConfig,
    jobs: usize,
    cache: Option<&PretrainCache>,
    log: Log<'_>,
) -> Result<Experiment> {
    config.validate()?;
    let ids: Vec<u64> = (0..source.len() as u64).collect();
    let plan = make_splits(&ids, config.training.seed)?;
    run_planned(source, dataset_digest, config, &plan, jobs, cache, log)
}

/// [`run_experiment`] on a fixed split plan.
pub fn run_planned<S: PatientSource + ?Sized>(
    source: &S,
    dataset_digest: &[u8; 32],
    config: &ExperimentConfig,
    plan: &SplitPlan,
    jobs: usize,
    cache: Option<&PretrainCache>,
    log: Log<'_>,
) -> Result<Experiment> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let folds: Vec<FoldOutcome> = pool.install(|| {
        (0..config.training.folds)
            .into_par_iter()
            .map(|k| run_fold(source, dataset_digest, config, plan, k, cache, log))
            .collect::<Result<_>>()
    })?;
    let report = MetricsReport::from_folds(folds.iter().map(|f| f.report.clone()).collect());
    Ok(Experiment {
        plan: plan.clone(),
        folds,
        report,
    })
}
