use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_Q: f64 = 0.7;

/// Minimum accuracy a deployed classifier must reach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoeConfig {
    pub q: f64,
}

impl Default for QoeConfig {
    fn default() -> Self {
        Self { q: DEFAULT_Q }
    }
}

impl QoeConfig {
    pub fn new(q: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Range(format!("q must lie in [0, 1], got {q}")));
        }
        Ok(Self { q })
    }

    pub fn satisfied(&self, accuracy: f64) -> bool {
        qoe_satisfied(accuracy, self.q)
    }
}

/// True iff `accuracy >= q`. Equality passes.
pub fn qoe_satisfied(accuracy: f64, q: f64) -> bool {
    accuracy >= q
}

/// Per-image form: the mean of `correct` must reach `q`. An empty slice never passes.
pub fn qoe_satisfied_per_image(correct: &[bool], q: f64) -> bool {
    if correct.is_empty() {
        return false;
    }
    let hits = correct.iter().filter(|&&c| c).count();
    qoe_satisfied(hits as f64 / correct.len() as f64, q)
}

/// Absolute accuracy change `|pf - p0|`.
pub fn gain_factor(p0: f64, pf: f64) -> f64 {
    (pf - p0).abs()
}

/// Multiplicative improvement `pf / p0`.
pub fn gain(p0: f64, pf: f64) -> Result<f64> {
    if p0 == 0.0 {
        return Err(Error::UndefinedGain);
    }
    Ok(pf / p0)
}

/// Accuracy before and, if a retraining round ran, after retraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainMetrics {
    pub p0: f64,
    pub pf: Option<f64>,
    pub r: Option<f64>,
    pub gain: Option<f64>,
    pub q: f64,
}

impl GainMetrics {
    pub fn initial(p0: f64, q: f64) -> Self {
        Self {
            p0,
            pf: None,
            r: None,
            gain: None,
            q,
        }
    }

    pub fn with_final(p0: f64, pf: f64, q: f64) -> Result<Self> {
        Ok(Self {
            p0,
            pf: Some(pf),
            r: Some(gain_factor(p0, pf)),
            gain: Some(gain(p0, pf)?),
            q,
        })
    }

    pub fn retrained(&self) -> bool {
        self.pf.is_some()
    }

    /// Percentage-scale copy (accuracies and `r` times 100; `gain` and `q` untouched).
    pub fn percent(&self) -> Self {
        Self {
            p0: self.p0 * 100.0,
            pf: self.pf.map(|v| v * 100.0),
            r: self.r.map(|v| v * 100.0),
            gain: self.gain,
            q: self.q,
        }
    }
}

/// `gain * p0 - (r + p0)`: zero when `pf >= p0`, `-2r` after a regression.
pub fn relationship_residual(m: &GainMetrics) -> Result<f64> {
    let pf = m
        .pf
        .ok_or_else(|| Error::Validation("residual needs a post-retraining accuracy".into()))?;
    let g = gain(m.p0, pf)?;
    Ok(g * m.p0 - (gain_factor(m.p0, pf) + m.p0))
}

/// Serialized metrics summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p0: Option<f64>,
    pub pf: Option<f64>,
    pub r: Option<f64>,
    pub gain: Option<f64>,
    pub q: f64,
    pub rounds: usize,
}

impl MetricsReport {
    pub fn empty(q: f64) -> Self {
        Self {
            p0: None,
            pf: None,
            r: None,
            gain: None,
            q,
            rounds: 0,
        }
    }

    pub fn from_metrics(m: &GainMetrics, rounds: usize) -> Self {
        Self {
            p0: Some(m.p0),
            pf: m.pf,
            r: m.r,
            gain: m.gain,
            q: m.q,
            rounds,
        }
    }
}
