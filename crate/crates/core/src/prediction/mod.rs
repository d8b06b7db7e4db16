//! Prediction records, human review, and continuous retraining from corrections.

mod records;

use serde::{Deserialize, Serialize};

pub use records::{PredictionRecord, RecordStore, Review, ReviewOutcome, Verdict};

use crate::datasets::{Dataset, LabeledImage, TrafficClass};
use crate::error::{Error, Result};
use crate::micronet::{evaluate, Model, Tensor};
use crate::refeed::{gain, gain_factor, retrain_from_stack, GainMetrics, ReFeedStack, RefeedConfig, TransferReport};
use crate::scalar::Scalar;
use crate::CLASS_COUNT;

/// Classifies `pixels` and appends an unreviewed record referring to `image_ref`.
pub fn predict_and_store<T: Scalar>(
    model: &Model<T>,
    store: &mut RecordStore,
    pixels: &Tensor<f64>,
    image_ref: impl Into<String>,
    created_at: u64,
) -> Result<PredictionRecord> {
    let out = model.forward(&pixels.cast::<T>())?;
    let mut probabilities = [0.0; CLASS_COUNT];
    for (p, v) in probabilities.iter_mut().zip(out.data()) {
        *p = v.to_f64_lossless();
    }
    let predicted = TrafficClass::from_index(out.argmax()).expect("four-way output");
    store.insert(image_ref.into(), predicted, probabilities, created_at)
}

/// Result of [`apply_correction`].
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub record: PredictionRecord,
    pub changed: bool,
    /// Whether the image went onto the stack.
    pub pushed: bool,
    pub evicted: Option<LabeledImage>,
}

/// Applies a reviewer verdict. A new correction pushes the image with its
/// corrected label onto `stack`; confirmations and repeats leave it untouched.
///
/// `load` fetches the pixels behind the record's `image_ref`, and is called
/// before anything is written.
pub fn apply_correction(
    store: &mut RecordStore,
    stack: &mut ReFeedStack,
    id: u64,
    verdict: Verdict,
    load: impl FnOnce(&str) -> Result<Tensor<f64>>,
) -> Result<Correction> {
    let repeat = store.check_review(id, verdict)?;
    let image = match verdict {
        Verdict::Corrected { label } if !repeat => {
            let rec = store.get(id).expect("checked");
            Some(LabeledImage::new(load(&rec.image_ref)?, label, rec.image_ref.clone())?)
        }
        _ => None,
    };
    let outcome = store.review(id, verdict)?;
    let pushed = image.is_some();
    let evicted = image.and_then(|img| stack.push(img));
    Ok(Correction {
        record: outcome.record,
        changed: outcome.changed,
        pushed,
        evicted,
    })
}

/// Moves every corrected image from the prediction-side stack to the training stack.
pub fn transfer_corrections(
    prediction_stack: &mut ReFeedStack,
    training_stack: &mut ReFeedStack,
) -> TransferReport {
    prediction_stack.transfer_into(training_stack)
}

/// Fires after every `every` corrections when set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleTrigger {
    pub every: Option<usize>,
    pub since_last: usize,
}

impl CycleTrigger {
    pub fn new(every: Option<usize>) -> Result<Self> {
        if every == Some(0) {
            return Err(Error::InvalidConfig("cycle trigger interval must be >= 1".into()));
        }
        Ok(Self {
            every,
            since_last: 0,
        })
    }

    /// Counts one correction; true when a cycle is due.
    pub fn note_correction(&mut self) -> bool {
        self.since_last += 1;
        match self.every {
            Some(n) if self.since_last >= n => {
                self.since_last = 0;
                true
            }
            _ => false,
        }
    }
}

/// One continuous-learning cycle as recorded in the metrics history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub p0: f64,
    pub pf: f64,
    pub r: f64,
    /// `None` when `p0` is zero.
    pub gain: Option<f64>,
    pub q: f64,
    /// Whether the retrained model replaced the old one.
    pub deployed: bool,
    pub stack_size: usize,
    pub train_size: usize,
}

impl CycleRecord {
    pub fn metrics(&self) -> GainMetrics {
        GainMetrics {
            p0: self.p0,
            pf: Some(self.pf),
            r: Some(self.r),
            gain: self.gain,
            q: self.q,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutcome<T: Scalar> {
    /// The deployed model after the cycle.
    pub model: Model<T>,
    /// `None` when the stack was empty and nothing ran.
    pub record: Option<CycleRecord>,
    pub status: String,
}

/// Retrains the head from `training_stack` and keeps the result only if its
/// retest accuracy beats the current model's; ties keep the current model.
/// The stack is emptied whenever a retraining ran.
///
/// There is no accuracy gate here: a cycle always retrains when the stack has
/// entries.
pub fn continuous_cycle<T: Scalar>(
    model: &Model<T>,
    training_stack: &mut ReFeedStack,
    retest: &Dataset,
    cfg: &RefeedConfig,
    cycle: usize,
) -> Result<CycleOutcome<T>> {
    if training_stack.is_empty() {
        return Ok(CycleOutcome {
            model: model.clone(),
            record: None,
            status: "stack empty, nothing to retrain".into(),
        });
    }
    let p0 = evaluate(model, retest.items())?.accuracy;
    let stack_size = training_stack.len();
    let retrained = retrain_from_stack(model, training_stack, None, retest, cfg)?;
    training_stack.reset();
    let pf = retrained.pf;
    let deployed = pf > p0;
    let record = CycleRecord {
        cycle,
        p0,
        pf,
        r: gain_factor(p0, pf),
        gain: gain(p0, pf).ok(),
        q: cfg.qoe.q,
        deployed,
        stack_size,
        train_size: retrained.summary.train_size,
    };
    let status = if deployed {
        format!("cycle {cycle}: deployed, accuracy {p0:.4} -> {pf:.4}")
    } else {
        format!("cycle {cycle}: kept previous model ({pf:.4} did not beat {p0:.4})")
    };
    log::info!("{status}");
    Ok(CycleOutcome {
        model: if deployed { retrained.model } else { model.clone() },
        record: Some(record),
        status,
    })
}
