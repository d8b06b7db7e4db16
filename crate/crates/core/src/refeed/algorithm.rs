use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::metrics::{GainMetrics, QoeConfig};
use super::stack::ReFeedStack;
use crate::datasets::{split, Dataset, LabeledImage, SplitSpec};
use crate::error::{Error, Result};
use crate::micronet::{evaluate, train, EpochStats, Model, TrainConfig};
use crate::scalar::Scalar;

pub const DEFAULT_MAX_ROUNDS: usize = 5;

/// Step size for fine-tuning the head on stack contents.
pub const ONLINE_LEARNING_RATE: f64 = 0.03;

/// Settings for the offline and online phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefeedConfig {
    pub qoe: QoeConfig,
    pub offline: TrainConfig,
    pub online: TrainConfig,
    /// Training share of the offline corpus; the rest validates.
    pub offline_fraction: f64,
    /// Training share of the stack contents during an online round.
    pub online_fraction: f64,
    /// Stack capacity as a share of the offline corpus, used when `stack_capacity` is unset.
    pub capacity_fraction: f64,
    pub stack_capacity: Option<usize>,
    /// Retrain on stack plus the offline training split instead of the stack alone.
    pub mix_original: bool,
    pub split_seed: u64,
}

impl RefeedConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            qoe: QoeConfig::default(),
            offline: TrainConfig::with_seed(seed),
            online: TrainConfig {
                learning_rate: ONLINE_LEARNING_RATE,
                augment: false,
                ..TrainConfig::with_seed(seed.wrapping_add(1))
            },
            offline_fraction: 0.75,
            online_fraction: 0.75,
            capacity_fraction: 0.10,
            stack_capacity: None,
            mix_original: false,
            split_seed: seed,
        }
    }

    pub fn capacity(&self, offline_size: usize) -> usize {
        self.stack_capacity
            .unwrap_or_else(|| ReFeedStack::capacity_for(offline_size, self.capacity_fraction))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub train_size: usize,
    pub val_size: usize,
    pub history: Vec<EpochStats>,
}

/// A head fine-tuned on stack contents together with its retest accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrained<T: Scalar> {
    pub model: Model<T>,
    pub pf: f64,
    pub summary: PhaseSummary,
}

/// What one sweep-and-maybe-retrain round did.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome<T: Scalar> {
    pub model: Model<T>,
    pub metrics: GainMetrics,
    /// Wrong predictions during the sweep.
    pub misclassified: usize,
    /// Stack size right after the sweep, before any reset.
    pub stack_after_sweep: usize,
    /// Present iff the head was retrained.
    pub retrain: Option<PhaseSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefeedOutcome<T: Scalar> {
    pub model: Model<T>,
    pub metrics: GainMetrics,
    pub stack: ReFeedStack,
    pub offline: PhaseSummary,
    pub misclassified: usize,
    pub stack_after_sweep: usize,
    pub retrain: Option<PhaseSummary>,
}

/// Fails with a protocol error if any retest image shares a `source_id` with `used`.
pub fn check_disjoint(used: &[LabeledImage], retest: &Dataset) -> Result<()> {
    let ids: HashSet<&str> = used.iter().map(|i| i.source_id.as_str()).collect();
    if let Some(dup) = retest.iter().find(|i| ids.contains(i.source_id.as_str())) {
        return Err(Error::Protocol(format!(
            "retest image {} also appears in the evaluated or retraining data",
            dup.source_id
        )));
    }
    Ok(())
}

fn split_or_all(d: Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    match split(&d, &SplitSpec::new(fraction, seed)?) {
        Ok(parts) => Ok(parts),
        Err(Error::DegenerateSplit(reason)) => {
            log::debug!("training on all {} images without validation: {reason}", d.len());
            Ok((d, Dataset::default()))
        }
        Err(e) => Err(e),
    }
}

/// Offline phase: freezes the base and trains the head on a split of `offline_train`.
pub fn train_offline<T: Scalar>(
    model: &mut Model<T>,
    offline_train: &Dataset,
    cfg: &RefeedConfig,
) -> Result<(PhaseSummary, Dataset)> {
    if offline_train.is_empty() {
        return Err(Error::EmptyDataset("offline training set"));
    }
    let (tr, val) = split_or_all(offline_train.clone(), cfg.offline_fraction, cfg.split_seed)?;
    model.freeze_base();
    let history = train(model, tr.items(), val.items(), &cfg.offline)?;
    Ok((
        PhaseSummary {
            train_size: tr.len(),
            val_size: val.len(),
            history,
        },
        tr,
    ))
}

/// Fine-tunes a copy of `model` on the stack contents (optionally mixed with
/// `original`) and measures it on `retest`. The stack itself is left alone.
pub fn retrain_from_stack<T: Scalar>(
    model: &Model<T>,
    stack: &ReFeedStack,
    original: Option<&Dataset>,
    retest: &Dataset,
    cfg: &RefeedConfig,
) -> Result<Retrained<T>> {
    if stack.is_empty() {
        return Err(Error::EmptyDataset("stack"));
    }
    if retest.is_empty() {
        return Err(Error::EmptyDataset("retest set"));
    }
    let mut pool = Dataset::new(stack.images());
    if cfg.mix_original {
        if let Some(extra) = original {
            for item in extra {
                pool.push(item.clone());
            }
        }
    }
    check_disjoint(pool.items(), retest)?;
    let (tr, val) = split_or_all(pool, cfg.online_fraction, cfg.online.seed)?;
    let mut candidate = model.clone();
    candidate.freeze_base();
    let history = train(&mut candidate, tr.items(), val.items(), &cfg.online)?;
    let pf = evaluate(&candidate, retest.items())?.accuracy;
    Ok(Retrained {
        model: candidate,
        pf,
        summary: PhaseSummary {
            train_size: tr.len(),
            val_size: val.len(),
            history,
        },
    })
}

/// Sweeps `test`, pushing every misclassified image, then retrains from the
/// stack if the accuracy falls short of the gate. The stack is reset after a
/// retraining round.
pub fn online_round<T: Scalar>(
    model: Model<T>,
    stack: &mut ReFeedStack,
    test: &Dataset,
    retest: &Dataset,
    original: Option<&Dataset>,
    cfg: &RefeedConfig,
) -> Result<RoundOutcome<T>> {
    check_disjoint(test.items(), retest)?;
    let eval = evaluate(&model, test.items())?;
    let mut misclassified = 0;
    for (item, ok) in test.iter().zip(&eval.correct) {
        if !ok {
            stack.push(item.clone());
            misclassified += 1;
        }
    }
    let p0 = eval.accuracy;
    let stack_after_sweep = stack.len();
    if cfg.qoe.satisfied(p0) || stack.is_empty() {
        return Ok(RoundOutcome {
            model,
            metrics: GainMetrics::initial(p0, cfg.qoe.q),
            misclassified,
            stack_after_sweep,
            retrain: None,
        });
    }
    let retrained = retrain_from_stack(&model, stack, original, retest, cfg)?;
    stack.reset();
    log::info!(
        "retrained on {} stack images: p0 {:.4} -> pf {:.4}",
        retrained.summary.train_size,
        p0,
        retrained.pf
    );
    Ok(RoundOutcome {
        model: retrained.model,
        metrics: GainMetrics::with_final(p0, retrained.pf, cfg.qoe.q)?,
        misclassified,
        stack_after_sweep,
        retrain: Some(retrained.summary),
    })
}

/// Offline training on `offline_train` followed by one online round.
///
/// `retest` must not share images with `test`; it is where post-retraining
/// accuracy is measured.
pub fn execute<T: Scalar>(
    mut model: Model<T>,
    offline_train: &Dataset,
    test: &Dataset,
    retest: &Dataset,
    cfg: &RefeedConfig,
) -> Result<RefeedOutcome<T>> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set"));
    }
    if retest.is_empty() {
        return Err(Error::EmptyDataset("retest set"));
    }
    check_disjoint(test.items(), retest)?;
    let (offline, offline_split) = train_offline(&mut model, offline_train, cfg)?;
    let mut stack = ReFeedStack::new(cfg.capacity(offline_train.len()))?;
    let round = online_round(model, &mut stack, test, retest, Some(&offline_split), cfg)?;
    Ok(RefeedOutcome {
        model: round.model,
        metrics: round.metrics,
        stack,
        offline,
        misclassified: round.misclassified,
        stack_after_sweep: round.stack_after_sweep,
        retrain: round.retrain,
    })
}

/// Repeats online rounds until the gate passes, a round skips retraining,
/// or `max_rounds` retraining rounds have run.
pub fn run_rounds<T: Scalar>(
    mut model: Model<T>,
    stack: &mut ReFeedStack,
    test: &Dataset,
    retest: &Dataset,
    cfg: &RefeedConfig,
    max_rounds: usize,
) -> Result<(Model<T>, Vec<GainMetrics>)> {
    let mut history = Vec::new();
    while history.len() < max_rounds {
        let round = online_round(model, stack, test, retest, None, cfg)?;
        model = round.model;
        let done = round.retrain.is_none()
            || round.metrics.pf.is_some_and(|pf| cfg.qoe.satisfied(pf));
        history.push(round.metrics);
        if done {
            break;
        }
    }
    Ok((model, history))
}
