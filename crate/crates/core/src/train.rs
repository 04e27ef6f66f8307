//! Splits, the bag-level training loop, label-efficiency sweeps and gradient checking.

use std::collections::BTreeSet;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, AugmentConfig, Bag, Patch};
use crate::encoder::Encoder;
use crate::error::{argument, config, Error, Result};
use crate::eval::{accuracy, roc_auc};
use crate::mil::{canonical_order, mil_objectives, MilHead, MilMode, MilModel, MilObjective};
use crate::params::{checksum, flatten, flat_owners, scale, unflatten, zeros_like, Adam, Parameterized};
use crate::profile::Profile;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Independent random class-balanced train/validation assignments over item indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

pub fn make_splits(labels: &[bool], n_folds: usize, val_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if n_folds == 0 {
        return Err(argument("need at least one fold"));
    }
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(argument(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let n_val = (val_fraction * labels.len() as f64).round() as usize;
    if n_val == 0 || n_val % 2 == 1 {
        return Err(argument(format!(
            "{n_val} validation items from {} cannot be split evenly between classes",
            labels.len()
        )));
    }
    let per_class = n_val / 2;
    if per_class >= pos.len() || per_class >= neg.len() {
        return Err(argument(format!(
            "need more than {per_class} items per class, have {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let n_train = (pos.len() - per_class).min(neg.len() - per_class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let folds = (0..n_folds)
        .map(|_| {
            let mut p = pos.clone();
            let mut n = neg.clone();
            p.shuffle(&mut rng);
            n.shuffle(&mut rng);
            let mut validation: Vec<usize> = p[..per_class].iter().chain(&n[..per_class]).copied().collect();
            let mut train: Vec<usize> = p[per_class..per_class + n_train]
                .iter()
                .chain(&n[per_class..per_class + n_train])
                .copied()
                .collect();
            validation.sort_unstable();
            train.sort_unstable();
            Fold { train, validation }
        })
        .collect();
    Ok(SplitPlan { seed, folds })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Pretrained encoder, fixed.
    Frozen,
    /// Pretrained encoder, trained end to end.
    Finetune,
    /// Randomly initialized encoder, trained end to end.
    Scratch,
}

impl TrainMode {
    pub fn mil_mode(self) -> MilMode {
        match self {
            Self::Frozen => MilMode::Frozen,
            _ => MilMode::Finetune,
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Self::Frozen => 2e-4,
            _ => 5e-5,
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        !matches!(self, Self::Scratch)
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "finetune" => Ok(Self::Finetune),
            "scratch" => Ok(Self::Scratch),
            _ => Err(config(format!("unknown training mode '{s}' (frozen, finetune, scratch)"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Frozen => "frozen",
            Self::Finetune => "finetune",
            Self::Scratch => "scratch",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// `None` picks the mode default.
    pub learning_rate: Option<f64>,
    pub batch_bags: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// `ce` or `r` (smooth SVM plus KL on negative bags).
    pub loss: String,
    pub beta: f64,
    pub delta: f64,
    pub tau: f64,
    pub dropout: f64,
    /// Instance augmentation while fine-tuning; frozen runs use cached embeddings.
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Frozen,
            learning_rate: None,
            batch_bags: 4,
            max_epochs: 100,
            patience: 25,
            loss: "r".into(),
            beta: 0.5,
            delta: 1.0,
            tau: 1.0,
            dropout: 0.25,
            augment: AugmentConfig::mil_default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(self.mode.default_learning_rate())
    }

    pub fn objective(&self) -> Result<Box<dyn MilObjective>> {
        let spec = match self.loss.as_str() {
            "r" | "svm-kl" => format!(
                "svm-kl:delta={},tau={},beta={}",
                self.delta, self.tau, self.beta
            ),
            other => other.to_string(),
        };
        mil_objectives().create(&spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_bags == 0 {
            return Err(config("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config("dropout must be in [0, 1)"));
        }
        if self.learning_rate() <= 0.0 {
            return Err(config("learning rate must be positive"));
        }
        self.objective().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagPrediction {
    pub bag_id: String,
    pub label: bool,
    pub prob: f64,
    /// Attention weights in the bag's instance order.
    pub attention: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    /// Parameters from the best-validation-loss epoch.
    pub model: MilModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub predictions: Vec<BagPrediction>,
    pub accuracy: f64,
    pub auc: Option<f64>,
    /// Checksum of the fixed encoder in frozen mode, taken before and after training.
    pub frozen_encoder_checksums: Option<(String, String)>,
}

/// Source of instance embeddings for one bag.
enum Embedder<'a> {
    /// Frozen encoder outputs per bag, in canonical order.
    Cached(&'a [Vec<f64>]),
    Trainable,
}

/// Embed every bag with a fixed encoder, instances in canonical order.
pub fn embed_bags(encoder: &Encoder, bags: &[Bag], profile: &Profile) -> Result<Vec<Vec<f64>>> {
    bags.iter()
        .map(|bag| {
            let order = canonical_order(bag);
            let patches: Vec<&Patch> = order.iter().map(|&i| &bag.instances[i]).collect();
            encoder.embed_instances(&patches, profile.instance_overlap)
        })
        .collect()
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

/// Forward one bag; with `grads` it also backpropagates the objective and returns the loss.
#[allow(clippy::too_many_arguments)]
fn run_bag(
    model: &MilModel,
    bag: &Bag,
    index: usize,
    embedder: &Embedder,
    objective: &dyn MilObjective,
    profile: &Profile,
    train: Option<(&TrainConfig, &mut ChaCha8Rng, &mut MilModel)>,
) -> Result<(f64, BagPrediction)> {
    let order = canonical_order(bag);
    let n = bag.len();
    if n == 0 {
        return Err(argument(format!("bag {} is empty", bag.id)));
    }
    let label = bag.label as usize;
    let (loss, attention_sorted, prob) = match (embedder, &model.encoder, train) {
        (Embedder::Cached(cache), _, None) => {
            let (out, _) = model.head.forward(&cache[index], n, None)?;
            let v = objective.evaluate(&out.scores, label, &out.attention);
            (v.loss, out.attention, out.prob)
        }
        (Embedder::Cached(cache), _, Some((cfg, rng, grads))) => {
            let (out, tape) = model.head.forward(&cache[index], n, Some((cfg.dropout, rng)))?;
            let v = objective.evaluate(&out.scores, label, &out.attention);
            model
                .head
                .backward(&tape, &v.d_scores, v.d_attention.as_deref(), &mut grads.head);
            (v.loss, out.attention, out.prob)
        }
        (Embedder::Trainable, Some(enc), None) => {
            let patches: Vec<&Patch> = order.iter().map(|&i| &bag.instances[i]).collect();
            let e = enc.embed_instances(&patches, profile.instance_overlap)?;
            let (out, _) = model.head.forward(&e, n, None)?;
            let v = objective.evaluate(&out.scores, label, &out.attention);
            (v.loss, out.attention, out.prob)
        }
        (Embedder::Trainable, Some(enc), Some((cfg, rng, grads))) => {
            let augmented: Vec<Patch> = if cfg.augment.is_identity() {
                order.iter().map(|&i| bag.instances[i].clone()).collect()
            } else {
                order.iter().map(|&i| augment(&bag.instances[i], &cfg.augment, rng)).collect()
            };
            let refs: Vec<&Patch> = augmented.iter().collect();
            let (e, etape) = enc.embed_instances_train(&refs, profile.instance_overlap)?;
            let (out, tape) = model.head.forward(&e, n, Some((cfg.dropout, rng)))?;
            let v = objective.evaluate(&out.scores, label, &out.attention);
            let de = model
                .head
                .backward(&tape, &v.d_scores, v.d_attention.as_deref(), &mut grads.head);
            let genc = grads.encoder.as_mut().expect("gradient model mirrors the encoder");
            enc.backward_instances(&etape, &de, genc);
            (v.loss, out.attention, out.prob)
        }
        (Embedder::Trainable, None, _) => return Err(config("trainable mode needs an encoder")),
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss} on bag {}", bag.id)));
    }
    let mut attention = vec![0.0; n];
    for (k, &i) in order.iter().enumerate() {
        attention[i] = attention_sorted[k];
    }
    Ok((
        loss,
        BagPrediction {
            bag_id: bag.id.clone(),
            label: bag.label,
            prob,
            attention,
        },
    ))
}

/// Mean loss and per-bag predictions over a set of bags, without dropout or augmentation.
fn evaluate_set(
    model: &MilModel,
    bags: &[Bag],
    ids: &[usize],
    embedder: &Embedder,
    objective: &dyn MilObjective,
    profile: &Profile,
) -> Result<(f64, Vec<BagPrediction>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(ids.len());
    for &i in ids {
        let (l, p) = run_bag(model, &bags[i], i, embedder, objective, profile, None)?;
        total += l;
        preds.push(p);
    }
    Ok((total / ids.len().max(1) as f64, preds))
}

fn metrics(preds: &[BagPrediction]) -> Result<(f64, Option<f64>)> {
    let labels: Vec<bool> = preds.iter().map(|p| p.label).collect();
    let hard: Vec<bool> = preds.iter().map(|p| p.prob >= 0.5).collect();
    let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let acc = accuracy(&hard, &labels)?;
    Ok((acc, roc_auc(&probs, &labels).ok()))
}

#[allow(clippy::too_many_arguments)]
fn train_fold(
    bags: &[Bag],
    fold_index: usize,
    fold: &Fold,
    encoder: Option<&Encoder>,
    cache: Option<&[Vec<f64>]>,
    cfg: &TrainConfig,
    profile: &Profile,
) -> Result<FoldResult> {
    if fold.train.is_empty() || fold.validation.is_empty() {
        return Err(argument("fold needs training and validation bags"));
    }
    let objective = cfg.objective()?;
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(cfg.seed, fold_index));
    let mil_mode = cfg.mode.mil_mode();
    let trainable_encoder = match cfg.mode {
        TrainMode::Frozen => None,
        TrainMode::Finetune => Some(encoder.ok_or_else(|| config("finetune mode needs a pretrained encoder"))?.clone()),
        TrainMode::Scratch => Some(Encoder::new(profile, &mut rng)),
    };
    let mut model = MilModel {
        mode: mil_mode,
        encoder: trainable_encoder,
        head: MilHead::new(profile, mil_mode, &mut rng),
    };
    let embedder = match cache {
        Some(c) if cfg.mode == TrainMode::Frozen => Embedder::Cached(c),
        None if cfg.mode == TrainMode::Frozen => {
            return Err(config("frozen mode needs a pretrained encoder"))
        }
        _ => Embedder::Trainable,
    };
    let frozen_before = match (cfg.mode, encoder) {
        (TrainMode::Frozen, Some(e)) => Some(checksum(e)),
        _ => None,
    };

    let mut opt = Adam::new(cfg.learning_rate());
    let mut order = fold.train.clone();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, MilModel, Vec<BagPrediction>)> = None;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for chunk in order.chunks(cfg.batch_bags) {
            let mut grads = zeros_like(&model);
            for &i in chunk {
                let (l, _) = run_bag(
                    &model,
                    &bags[i],
                    i,
                    &embedder,
                    objective.as_ref(),
                    profile,
                    Some((cfg, &mut rng, &mut grads)),
                )?;
                train_total += l;
            }
            scale(&mut grads, 1.0 / chunk.len() as f64);
            opt.step(&mut model, &grads);
        }
        let (val_loss, preds) =
            evaluate_set(&model, bags, &fold.validation, &embedder, objective.as_ref(), profile)?;
        let (val_accuracy, val_auc) = metrics(&preds)?;
        history.push(EpochRecord {
            epoch,
            train_loss: train_total / order.len() as f64,
            val_loss,
            val_accuracy,
            val_auc,
        });
        let improved = best.as_ref().map_or(true, |(b, _, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, model.clone(), preds));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch - best_epoch > cfg.patience {
            info!("fold {fold_index}: early stop at epoch {epoch} (best {best_epoch})");
            break;
        }
    }
    let (_, best_epoch, model, predictions) =
        best.ok_or_else(|| config("max epochs must be at least 1"))?;
    let (acc, auc) = metrics(&predictions)?;
    let frozen_encoder_checksums = frozen_before.map(|b| (b, checksum(encoder.expect("frozen encoder"))));
    Ok(FoldResult {
        fold: fold_index,
        model,
        history,
        best_epoch,
        predictions,
        accuracy: acc,
        auc,
        frozen_encoder_checksums,
    })
}

/// Train one model per fold. Folds run in parallel on the current thread pool and are
/// returned in fold order.
pub fn train_mil(
    bags: &[Bag],
    splits: &SplitPlan,
    encoder: Option<&Encoder>,
    cfg: &TrainConfig,
    profile: &Profile,
) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    if cfg.mode.needs_checkpoint() && encoder.is_none() {
        return Err(config(format!("{} mode needs a pretrained encoder checkpoint", cfg.mode)));
    }
    let cache = match (cfg.mode, encoder) {
        (TrainMode::Frozen, Some(e)) => Some(embed_bags(e, bags, profile)?),
        _ => None,
    };
    train_mil_with_cache(bags, splits, encoder, cache.as_deref(), cfg, profile)
}

/// As [`train_mil`], reusing frozen embeddings from [`embed_bags`].
pub fn train_mil_with_cache(
    bags: &[Bag],
    splits: &SplitPlan,
    encoder: Option<&Encoder>,
    cache: Option<&[Vec<f64>]>,
    cfg: &TrainConfig,
    profile: &Profile,
) -> Result<Vec<FoldResult>> {
    splits
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| train_fold(bags, i, f, encoder, cache, cfg, profile))
        .collect()
}

/// Labels per class for one sweep point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Budget {
    PerClass(usize),
    Max,
}

impl std::str::FromStr for Budget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "max" {
            return Ok(Self::Max);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(config(format!("budget '{s}' is neither a positive integer nor 'max'"))),
            Ok(n) => Ok(Self::PerClass(n)),
        }
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::PerClass(n) => write!(f, "{n}"),
            Self::Max => f.write_str("max"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetResult {
    pub budget: Budget,
    pub per_class: usize,
    pub fold_aucs: Vec<f64>,
    pub fold_accuracies: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
}

/// Nested class-balanced training subsets for each budget, per fold.
///
/// Each fold's training ids are shuffled per class once; budget `b` keeps the first `b`
/// of each class, so smaller budgets are subsets of larger ones. Subsets keep the
/// original training order. Returns `None` for a budget that some fold cannot meet.
pub fn nested_subsets(
    bags_labels: &[bool],
    splits: &SplitPlan,
    budgets: &[Budget],
    seed: u64,
) -> Vec<Option<Vec<Vec<usize>>>> {
    let ranked: Vec<(Vec<usize>, Vec<usize>)> = splits
        .folds
        .iter()
        .enumerate()
        .map(|(f, fold)| {
            let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(seed ^ 0x5EED, f));
            let mut pos: Vec<usize> = fold.train.iter().copied().filter(|&i| bags_labels[i]).collect();
            let mut neg: Vec<usize> = fold.train.iter().copied().filter(|&i| !bags_labels[i]).collect();
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            (pos, neg)
        })
        .collect();
    budgets
        .iter()
        .map(|b| {
            let mut per_fold = Vec::new();
            for (fold, (pos, neg)) in splits.folds.iter().zip(&ranked) {
                let take = match b {
                    Budget::Max => pos.len().min(neg.len()),
                    Budget::PerClass(n) => *n,
                };
                if take > pos.len() || take > neg.len() {
                    return None;
                }
                let keep: BTreeSet<usize> = pos[..take].iter().chain(&neg[..take]).copied().collect();
                per_fold.push(fold.train.iter().copied().filter(|i| keep.contains(i)).collect());
            }
            Some(per_fold)
        })
        .collect()
}

/// Frozen-mode AUC as a function of labels per class, one pretrained encoder for all budgets.
pub fn label_efficiency_sweep(
    bags: &[Bag],
    splits: &SplitPlan,
    encoder: &Encoder,
    budgets: &[Budget],
    cfg: &TrainConfig,
    profile: &Profile,
) -> Result<Vec<BudgetResult>> {
    if cfg.mode != TrainMode::Frozen {
        return Err(config("label-efficiency sweeps train in frozen mode"));
    }
    let labels: Vec<bool> = bags.iter().map(|b| b.label).collect();
    let cache = embed_bags(encoder, bags, profile)?;
    let subsets = nested_subsets(&labels, splits, budgets, splits.seed);
    let mut out = Vec::new();
    for (b, subset) in budgets.iter().zip(subsets) {
        let Some(subset) = subset else {
            warn!("budget {b} exceeds the labels available in some fold; skipped");
            continue;
        };
        let plan = SplitPlan {
            seed: splits.seed,
            folds: splits
                .folds
                .iter()
                .zip(subset)
                .map(|(f, train)| Fold {
                    train,
                    validation: f.validation.clone(),
                })
                .collect(),
        };
        let per_class = plan.folds[0].train.len() / 2;
        let results = train_mil_with_cache(bags, &plan, Some(encoder), Some(&cache), cfg, profile)?;
        let fold_aucs: Vec<f64> = results
            .iter()
            .map(|r| r.auc.ok_or_else(|| Error::Undefined("validation set lacks a class".into())))
            .collect::<Result<_>>()?;
        let fold_accuracies = results.iter().map(|r| r.accuracy).collect();
        let (mean_auc, std_auc) = crate::eval::mean_std(&fold_aucs);
        info!("budget {b}: AUC {mean_auc:.3} ± {std_auc:.3}");
        out.push(BudgetResult {
            budget: *b,
            per_class,
            fold_aucs,
            fold_accuracies,
            mean_auc,
            std_auc,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, and its analytic and numeric derivatives.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn central_differences<F>(name: &str, x: &[f64], analytic: &[f64], mut f: F, eps: f64, label: impl Fn(usize) -> String) -> GradReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut report = GradReport {
        name: name.to_string(),
        checked: x.len(),
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = label(i);
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}

/// Central differences on a flat vector against an analytic gradient.
pub fn check_vector_gradient<F>(name: &str, x: &[f64], analytic: &[f64], f: F, eps: f64) -> GradReport
where
    F: FnMut(&[f64]) -> f64,
{
    central_differences(name, x, analytic, f, eps, |i| format!("[{i}]"))
}

/// Central differences over every parameter scalar of `model`.
pub fn check_gradients<M, F>(name: &str, model: &M, analytic: &M, f: F, eps: f64) -> GradReport
where
    M: Parameterized + Clone,
    F: Fn(&M) -> f64,
{
    let owners = flat_owners(model);
    let mut probe = model.clone();
    central_differences(
        name,
        &flatten(model),
        &flatten(analytic),
        |v| {
            unflatten(&mut probe, v);
            f(&probe)
        },
        eps,
        |i| format!("{}[{}]", owners[i].0, owners[i].1),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let labels: Vec<bool> = (0..400).map(|i| i % 2 == 0).collect();
        let plan = make_splits(&labels, 5, 0.25, 3).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for f in &plan.folds {
            assert_eq!(f.train.len(), 300);
            assert_eq!(f.validation.len(), 100);
            assert_eq!(f.validation.iter().filter(|&&i| labels[i]).count(), 50);
        }
        let small: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let plan = make_splits(&small, 1, 0.25, 0).unwrap();
        assert_eq!(plan.folds[0].train.len(), 6);
        assert_eq!(plan.folds[0].validation.len(), 2);
        assert_eq!(make_splits(&small, 2, 0.25, 9).unwrap(), make_splits(&small, 2, 0.25, 9).unwrap());
        assert!(make_splits(&[true, true, false], 1, 0.5, 0).is_err());
    }

    #[test]
    fn budgets_parse() {
        assert_eq!("max".parse::<Budget>().unwrap(), Budget::Max);
        assert_eq!("4".parse::<Budget>().unwrap(), Budget::PerClass(4));
        assert!("0".parse::<Budget>().is_err());
        assert!("x".parse::<Budget>().is_err());
    }

    #[test]
    fn nested_subsets_are_nested() {
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let plan = make_splits(&labels, 3, 0.25, 1).unwrap();
        let budgets = [Budget::PerClass(1), Budget::PerClass(4), Budget::Max, Budget::PerClass(99)];
        let s = nested_subsets(&labels, &plan, &budgets, 1);
        assert!(s[3].is_none());
        for f in 0..3 {
            let a: BTreeSet<_> = s[0].as_ref().unwrap()[f].iter().collect();
            let b: BTreeSet<_> = s[1].as_ref().unwrap()[f].iter().collect();
            assert!(a.is_subset(&b));
            assert_eq!(s[2].as_ref().unwrap()[f], plan.folds[f].train);
        }
    }

    #[test]
    fn affine_squared_loss_gradient_is_exact() {
        // f(a, b) = (2a + b − 4)²
        let f = |p: &[f64]| (p[0] * 2.0 + p[1] - 4.0).powi(2);
        let p = [1.5, -0.5];
        let r = p[0] * 2.0 + p[1] - 4.0;
        let rep = check_vector_gradient("affine", &p, &[4.0 * r, 2.0 * r], f, 1e-5);
        assert!(rep.max_rel_error < 1e-10, "{rep:?}");
    }
}
