//! Match-level splitting, the training loop and evaluation metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::blsr::{Dataset, Instance};
use crate::model::{self, ModelConfig, ModelParams};
use crate::{Error, Result};

/// Explicit partition of match ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_matches: Vec<String>,
    pub val_matches: Vec<String>,
    pub test_matches: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.85,
            val: 0.05,
            test: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitRequest {
    Fractions(SplitFractions),
    Explicit(SplitSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub spec: SplitSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Assigns whole matches to train/val/test.
///
/// With fractions, matches are shuffled by `seed`; validation and test each
/// get `floor(fraction × M)` matches but at least one, and training keeps the
/// rest (19 matches at 0.85/0.05/0.10 give 17/1/1).
pub fn split_by_match(d: &Dataset, request: &SplitRequest, seed: u64) -> Result<DatasetSplit> {
    let m = d.matches.len();
    if m < 3 {
        return Err(Error::TooFewMatches(m));
    }
    let spec = match request {
        SplitRequest::Explicit(spec) => {
            check_partition(d, spec)?;
            spec.clone()
        }
        SplitRequest::Fractions(f) => {
            let parts = [f.train, f.val, f.test];
            if parts.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidSplit(format!(
                    "fractions must be non-negative and sum to 1, got {parts:?}"
                )));
            }
            let mut ids = d.matches.clone();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_val = ((f.val * m as f64).floor() as usize).max(1);
            let n_test = ((f.test * m as f64).floor() as usize).max(1);
            let n_train = m - n_val - n_test;
            let test = ids.split_off(n_train + n_val);
            let val = ids.split_off(n_train);
            SplitSpec {
                train_matches: ids,
                val_matches: val,
                test_matches: test,
            }
        }
    };
    Ok(DatasetSplit {
        train: d.subset(&spec.train_matches),
        val: d.subset(&spec.val_matches),
        test: d.subset(&spec.test_matches),
        spec,
    })
}

fn check_partition(d: &Dataset, spec: &SplitSpec) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in spec.train_matches.iter().chain(&spec.val_matches).chain(&spec.test_matches) {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidSplit(format!("match `{id}` assigned twice")));
        }
        if !d.matches.contains(id) {
            return Err(Error::InvalidSplit(format!("match `{id}` not in dataset")));
        }
    }
    if seen.len() != d.matches.len() {
        return Err(Error::InvalidSplit("split does not cover every match".into()));
    }
    if spec.train_matches.is_empty() || spec.val_matches.is_empty() || spec.test_matches.is_empty() {
        return Err(Error::InvalidSplit("every split needs at least one match".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            patience: 10,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean total loss over the training instances.
    pub train_loss: f64,
    /// `None` when the validation set has a single class.
    pub val_auc: Option<f64>,
    pub val_brier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub test_auc: Option<f64>,
    pub test_brier: Option<f64>,
    pub wall_clock_seconds: f64,
    pub seed: u64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    /// Optimizer state matching `params`.
    pub adam: AdamState,
    pub report: TrainReport,
}

/// Validation score monitored for early stopping: AUC, or negative Brier
/// when AUC is undefined.
fn monitor(m: &Metrics) -> f64 {
    m.auc.unwrap_or(-m.brier)
}

pub fn train(train: &[Instance], val: &[Instance], params: ModelParams, cfg: &ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_with(train, val, params, cfg, tc, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    train: &[Instance],
    val: &[Instance],
    mut params: ModelParams,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = AdamState::new(tc.adam, params.slots().iter().map(|(_, t)| *t));
    let mut best_score = f64::NEG_INFINITY;
    let mut best = (params.clone(), adam.clone(), 0usize);
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=tc.epochs {
        let at_epoch = |e: Error| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} in epoch {epoch}")),
            other => other,
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let (parts, grads, _) = model::loss_and_gradients(&train[i], &params, cfg).map_err(at_epoch)?;
            loss_sum += parts.total;
            let mut slots: Vec<_> = params.slots_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut slots, &grads.0, &mut adam)?;
        }
        let m = evaluate(val, &params, cfg).map_err(at_epoch)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auc: m.auc,
            val_brier: m.brier,
        };
        on_epoch(&record);
        history.push(record);
        let score = monitor(&m);
        if score > best_score {
            best_score = score;
            best = (params.clone(), adam.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }
    let (params, adam, best_epoch) = best;
    Ok(TrainOutcome {
        params,
        adam,
        report: TrainReport {
            history,
            best_epoch,
            test_auc: None,
            test_brier: None,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            seed: tc.seed,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when the labels contain a single class.
    pub auc: Option<f64>,
    pub brier: f64,
    pub count: usize,
}

pub fn predict_all(instances: &[Instance], params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    instances.iter().map(|i| model::predict(i, params, cfg)).collect()
}

pub fn evaluate(instances: &[Instance], params: &ModelParams, cfg: &ModelConfig) -> Result<Metrics> {
    let scores = predict_all(instances, params, cfg)?;
    let labels: Vec<bool> = instances.iter().map(|i| i.label).collect();
    metrics(&scores, &labels)
}

pub fn metrics(scores: &[f64], labels: &[bool]) -> Result<Metrics> {
    let auc = match auc(scores, labels) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        auc,
        brier: brier(scores, labels)?,
        count: scores.len(),
    })
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            expected: vec![scores.len()],
            got: vec![labels.len()],
        });
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann–Whitney via mid-ranks).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mid_rank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean squared error between probabilities and 0/1 labels.
pub fn brier(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(p, &y)| (p - if y { 1.0 } else { 0.0 }).powi(2))
        .sum();
    Ok(sum / scores.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Fixed-order metrics table: epoch, loss, val_auc, val_bs.
pub fn history_table(history: &[EpochRecord]) -> String {
    let mut out = format!("{:>5}  {:>10}  {:>8}  {:>8}\n", "epoch", "loss", "val_auc", "val_bs");
    for r in history {
        let _ = writeln!(
            out,
            "{:>5}  {:>10.6}  {:>8}  {:>8.4}",
            r.epoch,
            r.train_loss,
            fmt_opt(r.val_auc),
            r.val_brier
        );
    }
    out
}
