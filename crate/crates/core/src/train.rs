//! Training: mini-batch BPTT loops for the supervised classifier, the
//! next-step predictor, and the three-stage semi-supervised procedure,
//! plus the k-fold and predicting/classifying split protocols.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{argmax, evaluate};
use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::grad::{classifier_backward, predictor_backward, semi_backward};
use crate::model::{
    ClassifierArch, ClassifierModel, ForwardMode, PredictorArch, PredictorModel,
    SemiSupervisedModel,
};
use crate::optim::{Optimizer, TrainConfig};
use crate::sequence::{fit_normalizer, make_batch, normalize_all, SequenceBatch, SequenceSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

/// Per-fold validation index lists; train indices are the complement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
    pub stratified: bool,
    pub seed: u64,
}

impl FoldPlan {
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let held: std::collections::HashSet<usize> = self.folds[fold].iter().copied().collect();
        let n: usize = self.folds.iter().map(|f| f.len()).sum();
        (0..n).filter(|i| !held.contains(i)).collect()
    }
}

/// Stratified k-fold split, deterministic per seed.
pub fn kfold_split(n: usize, labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::argument(format!("k must be >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::argument(format!("k = {k} exceeds dataset size {n}")));
    }
    if labels.len() != n {
        return Err(Error::argument(format!(
            "{n} samples but {} labels",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        // rotate the starting fold per class so remainders spread out
        for (i, sample) in idx.into_iter().enumerate() {
            folds[(i + c) % k].push(sample);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan {
        k,
        folds,
        stratified: true,
        seed,
    })
}

/// The predicting/classifying data split: `label_fraction` percent of the
/// data in each of two classifying folds, the rest as predicting data
/// (reused as the test set).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemiSplit {
    pub predicting: Vec<usize>,
    pub fold_a: Vec<usize>,
    pub fold_b: Vec<usize>,
    pub label_fraction: u32,
    pub seed: u64,
}

/// Draw `count` indices stratified by class from `pool` (shuffled per
/// class), using largest-remainder rounding to hit `count` exactly.
fn stratified_take(
    pool: &mut Vec<Vec<usize>>,
    count: usize,
    remaining_total: usize,
) -> Vec<usize> {
    let mut quotas: Vec<(usize, f64)> = Vec::with_capacity(pool.len());
    let mut taken_total = 0usize;
    for class_pool in pool.iter() {
        let ideal = class_pool.len() as f64 * count as f64 / remaining_total as f64;
        let floor = ideal.floor() as usize;
        quotas.push((floor, ideal - floor as f64));
        taken_total += floor;
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.partial_cmp(&quotas[a].1).unwrap().then(a.cmp(&b)));
    let mut extra = count.saturating_sub(taken_total);
    for &c in &order {
        if extra == 0 {
            break;
        }
        if quotas[c].0 < pool[c].len() {
            quotas[c].0 += 1;
            extra -= 1;
        }
    }
    let mut out = Vec::with_capacity(count);
    for (c, class_pool) in pool.iter_mut().enumerate() {
        let take = quotas[c].0.min(class_pool.len());
        out.extend(class_pool.drain(..take));
    }
    out.sort_unstable();
    out
}

pub fn semi_split(n: usize, labels: &[usize], label_fraction: u32, seed: u64) -> Result<SemiSplit> {
    if ![5, 10, 15, 20, 25].contains(&label_fraction) {
        return Err(Error::argument(format!(
            "label fraction must be one of 5, 10, 15, 20, 25; got {label_fraction}"
        )));
    }
    if labels.len() != n {
        return Err(Error::argument(format!(
            "{n} samples but {} labels",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        pool[l].push(i);
    }
    for p in &mut pool {
        p.shuffle(&mut rng);
    }
    let per_fold = (n as f64 * label_fraction as f64 / 100.0).round() as usize;
    let fold_a = stratified_take(&mut pool, per_fold, n);
    let fold_b = stratified_take(&mut pool, per_fold, n - per_fold);
    let mut predicting: Vec<usize> = pool.into_iter().flatten().collect();
    predicting.sort_unstable();
    Ok(SemiSplit {
        predicting,
        fold_a,
        fold_b,
        label_fraction,
        seed,
    })
}

fn gather(samples: &[SequenceSample], indices: &[usize]) -> Vec<SequenceSample> {
    indices.iter().map(|&i| samples[i].clone()).collect()
}

/// Shared mini-batch loop. `backward` returns (loss, owned gradient
/// slices aligned with `slices_mut(model)`, correct-prediction count when
/// accuracy is tracked).
fn run_epochs<M>(
    model: &mut M,
    samples: &[SequenceSample],
    config: &TrainConfig,
    lr_scale: f64,
    backward: impl Fn(&M, &SequenceBatch, u64) -> Result<(f64, Vec<Vec<f64>>, Option<usize>)>,
    slices_mut: impl Fn(&mut M) -> Vec<&mut [f64]>,
) -> Result<History> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::argument("training set is empty".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xd1b54a32d192ed03));
    let mut optimizer: Option<Optimizer> = None;
    let mut history = History::default();
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        let lr = lr_scale * config.lr_at_epoch(epoch);
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut correct: Option<usize> = None;
        for chunk in indices.chunks(config.batch_size) {
            let batch_samples = gather(samples, chunk);
            let batch = make_batch(&batch_samples, 0.0)?;
            let dropout_seed: u64 = rng.gen();
            let (loss, grads, batch_correct) = backward(model, &batch, dropout_seed)?;
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let opt = optimizer.get_or_insert_with(|| {
                Optimizer::new(config.optimizer, &grad_refs)
            });
            let mut params = slices_mut(model);
            opt.step(&mut params, &grad_refs, lr, config.grad_clip);
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
            if let Some(c) = batch_correct {
                *correct.get_or_insert(0) += c;
            }
        }
        history.epochs.push(EpochStats {
            loss: epoch_loss / seen as f64,
            accuracy: correct.map(|c| c as f64 / seen as f64),
        });
    }
    Ok(history)
}

fn count_correct(probs: &crate::linalg::Matrix, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(b, &label)| argmax(probs.row(b)) == label)
        .count()
}

fn apply_dropout_override(arch: &ClassifierArch, config: &TrainConfig) -> ClassifierArch {
    let mut arch = arch.clone();
    if let Some(p) = config.dropout_override {
        for rate in &mut arch.dropout {
            *rate = p;
        }
    }
    arch
}

/// Mini-batch training of the supervised classifier. Samples must already
/// be normalized. Deterministic per (dataset, arch, config).
pub fn train_supervised(
    samples: &[SequenceSample],
    arch: &ClassifierArch,
    config: &TrainConfig,
) -> Result<(ClassifierModel, History)> {
    let arch = apply_dropout_override(arch, config);
    let mut model = arch.build(config.seed)?;
    let lambda = config.lambda;
    let history = run_epochs(
        &mut model,
        samples,
        config,
        1.0,
        |m, batch, dropout_seed| {
            let (loss, grads, probs) =
                classifier_backward(m, batch, ForwardMode::Train { dropout_seed }, lambda)?;
            let owned: Vec<Vec<f64>> = grads
                .slices(m.arch.use_biases)
                .into_iter()
                .map(|s| s.to_vec())
                .collect();
            Ok((loss, owned, Some(count_correct(&probs, &batch.labels))))
        },
        |m| m.param_slices_mut(),
    )?;
    Ok((model, history))
}

/// Unsupervised next-step training of the predictor.
pub fn train_predictor(
    samples: &[SequenceSample],
    arch: &PredictorArch,
    config: &TrainConfig,
) -> Result<(PredictorModel, History)> {
    let mut model = arch.build(config.seed)?;
    let lambda = config.lambda;
    let history = run_epochs(
        &mut model,
        samples,
        config,
        1.0,
        |m, batch, _| {
            let (loss, grads) = predictor_backward(m, batch, lambda)?;
            let owned: Vec<Vec<f64>> = grads
                .slices(m.arch.use_biases)
                .into_iter()
                .map(|s| s.to_vec())
                .collect();
            Ok((loss, owned, None))
        },
        |m| m.param_slices_mut(),
    )?;
    Ok((model, history))
}

/// Architecture of the stacked semi-supervised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiArch {
    pub cell: CellKind,
    pub input_dim: usize,
    pub predictor_hidden: usize,
    /// Defaults to 200 (the hidden size of the stacked classifier).
    pub classifier_hidden: usize,
    #[serde(default)]
    pub head: Vec<usize>,
    #[serde(default)]
    pub dropout: Vec<f64>,
    pub num_classes: usize,
    #[serde(default = "crate::model::default_true")]
    pub use_biases: bool,
}

impl SemiArch {
    pub fn predictor_arch(&self) -> PredictorArch {
        PredictorArch {
            cell: self.cell,
            input_dim: self.input_dim,
            hidden: self.predictor_hidden,
            use_biases: self.use_biases,
        }
    }

    pub fn classifier_arch(&self) -> ClassifierArch {
        ClassifierArch {
            cell: self.cell,
            input_dim: self.predictor_hidden,
            hidden: self.classifier_hidden,
            head: self.head.clone(),
            dropout: self.dropout.clone(),
            num_classes: self.num_classes,
            use_biases: self.use_biases,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemiHistory {
    pub predictor: History,
    pub classifier: History,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine_tune: Option<History>,
    /// Validation accuracy on classifying fold B after the frozen
    /// feature-extracting stage and after fine-tuning.
    pub val_accuracy_fe: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy_ft: Option<f64>,
}

fn semi_stage(
    model: &mut SemiSupervisedModel,
    samples: &[SequenceSample],
    config: &TrainConfig,
    lr_scale: f64,
) -> Result<History> {
    let lambda = config.lambda;
    run_epochs(
        model,
        samples,
        config,
        lr_scale,
        |m, batch, dropout_seed| {
            let (loss, grads, probs) =
                semi_backward(m, batch, ForwardMode::Train { dropout_seed }, lambda)?;
            let owned: Vec<Vec<f64>> = grads
                .slices(m.classifier.arch.use_biases)
                .into_iter()
                .map(|s| s.to_vec())
                .collect();
            Ok((loss, owned, Some(count_correct(&probs, &batch.labels))))
        },
        |m| m.param_slices_mut(),
    )
}

/// The three-stage semi-supervised procedure: (1) next-step pretraining of
/// the predictor on the predicting data, (2) frozen-predictor training of
/// classifier and head on classifying fold A with validation on fold B,
/// (3) optional fine-tuning of the whole stack at a reduced learning rate.
pub fn train_semi_supervised(
    samples: &[SequenceSample],
    arch: &SemiArch,
    split: &SemiSplit,
    config: &TrainConfig,
    fine_tune: bool,
) -> Result<(SemiSupervisedModel, SemiHistory)> {
    let predicting = gather(samples, &split.predicting);
    let fold_a = gather(samples, &split.fold_a);
    let fold_b = gather(samples, &split.fold_b);

    // stage 1: unsupervised next-step pretraining
    let (predictor, predictor_history) =
        train_predictor(&predicting, &arch.predictor_arch(), config)?;

    // stage 2: freeze predictor, train classifier + head on fold A
    let classifier = apply_dropout_override(&arch.classifier_arch(), config)
        .build(config.seed.wrapping_add(1))?;
    let mut model = SemiSupervisedModel {
        predictor,
        classifier,
        freeze_predictor: true,
    };
    let stage2_config = TrainConfig {
        seed: config.seed.wrapping_add(2),
        ..config.clone()
    };
    let classifier_history = semi_stage(&mut model, &fold_a, &stage2_config, 1.0)?;
    let val_accuracy_fe = evaluate(&model, &fold_b)?.accuracy;

    // stage 3: unfreeze and retrain everything at a reduced learning rate
    let (fine_tune_history, val_accuracy_ft) = if fine_tune {
        model.freeze_predictor = false;
        let stage3_config = TrainConfig {
            seed: config.seed.wrapping_add(3),
            ..config.clone()
        };
        let h = semi_stage(&mut model, &fold_a, &stage3_config, config.ft_factor)?;
        let acc = evaluate(&model, &fold_b)?.accuracy;
        (Some(h), Some(acc))
    } else {
        (None, None)
    };

    Ok((
        model,
        SemiHistory {
            predictor: predictor_history,
            classifier: classifier_history,
            fine_tune: fine_tune_history,
            val_accuracy_fe,
            val_accuracy_ft,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub confusions: Vec<Vec<Vec<usize>>>,
}

pub fn summarize_fold_accuracies(accuracies: &[f64]) -> (f64, f64, f64, f64) {
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let min = accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

fn run_fold(
    samples: &[SequenceSample],
    plan: &FoldPlan,
    fold: usize,
    arch: &ClassifierArch,
    config: &TrainConfig,
) -> Result<(f64, Vec<Vec<usize>>)> {
    let train_idx = plan.train_indices(fold);
    let train_raw = gather(samples, &train_idx);
    let val_raw = gather(samples, &plan.folds[fold]);
    // normalizer fitted on this fold's training split only
    let stats = fit_normalizer(&train_raw)?;
    let train = normalize_all(&stats, &train_raw)?;
    let val = normalize_all(&stats, &val_raw)?;
    let fold_config = TrainConfig {
        seed: config.seed.wrapping_add(fold as u64),
        ..config.clone()
    };
    let (model, _) = train_supervised(&train, arch, &fold_config)?;
    let report = evaluate(&model, &val)?;
    Ok((report.accuracy, report.confusion))
}

/// Train k independent models (seed + fold index) and report the spread of
/// validation accuracies. `parallel` caps the number of folds trained
/// concurrently; results are collected in fold order either way.
pub fn cross_validate(
    samples: &[SequenceSample],
    arch: &ClassifierArch,
    config: &TrainConfig,
    k: usize,
    parallel: usize,
) -> Result<CvReport> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let plan = kfold_split(samples.len(), &labels, k, config.seed)?;
    let mut results: Vec<Option<Result<(f64, Vec<Vec<usize>>)>>> = (0..k).map(|_| None).collect();
    let parallel = parallel.max(1);
    std::thread::scope(|scope| {
        for chunk_start in (0..k).step_by(parallel) {
            let mut handles = Vec::new();
            for fold in chunk_start..(chunk_start + parallel).min(k) {
                let plan = &plan;
                handles.push((
                    fold,
                    scope.spawn(move || run_fold(samples, plan, fold, arch, config)),
                ));
            }
            for (fold, handle) in handles {
                results[fold] = Some(handle.join().expect("fold thread panicked"));
            }
        }
    });
    let mut fold_accuracies = Vec::with_capacity(k);
    let mut confusions = Vec::with_capacity(k);
    for (fold, r) in results.into_iter().enumerate() {
        let (acc, confusion) = r.expect("fold result missing").map_err(|e| e.in_fold(fold))?;
        fold_accuracies.push(acc);
        confusions.push(confusion);
    }
    let (mean, sd, min, max) = summarize_fold_accuracies(&fold_accuracies);
    Ok(CvReport {
        k,
        fold_accuracies,
        mean,
        sd,
        min,
        max,
        confusions,
    })
}
