//! When a run counts as crashed.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceRule {
    /// Trailing window for the running minimum, in steps.
    pub window: usize,
    /// Loss above `factor × trailing min` counts as exploding...
    pub factor: f64,
    /// ...once it has done so for this many consecutive steps.
    pub patience: usize,
    /// Validation accuracy at or below `chance_multiple / classes`...
    pub chance_multiple: f64,
    /// ...once this fraction of the epochs has completed.
    pub after_fraction: f64,
}

impl Default for DivergenceRule {
    fn default() -> Self {
        Self {
            window: 100,
            factor: 10.0,
            patience: 50,
            chance_multiple: 2.0,
            after_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DivergenceReason {
    NonFinite,
    Exploding { loss: f64, trailing_min: f64 },
    ChanceAccuracy { epoch: usize, accuracy: f64 },
}

impl std::fmt::Display for DivergenceReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DivergenceReason::NonFinite => write!(f, "non-finite loss or gradient"),
            DivergenceReason::Exploding { loss, trailing_min } => {
                write!(
                    f,
                    "loss {loss:.4} stayed above 10x its trailing minimum {trailing_min:.4}"
                )
            }
            DivergenceReason::ChanceAccuracy { epoch, accuracy } => {
                write!(f, "validation accuracy {accuracy:.4} near chance after epoch {epoch}")
            }
        }
    }
}

/// Per-step loss history plus the per-epoch accuracy check.
#[derive(Clone, Debug)]
pub struct DivergenceDetector {
    rule: DivergenceRule,
    history: VecDeque<f64>,
    over: usize,
}

impl DivergenceDetector {
    pub fn new(rule: DivergenceRule) -> Self {
        Self {
            rule,
            history: VecDeque::with_capacity(rule.window),
            over: 0,
        }
    }

    /// Feed one step's loss; `Some` once the run has diverged.
    pub fn observe_loss(&mut self, loss: f64) -> Option<DivergenceReason> {
        if !loss.is_finite() {
            return Some(DivergenceReason::NonFinite);
        }
        let trailing_min = self.history.iter().copied().fold(f64::INFINITY, f64::min);
        if self.history.len() == self.rule.window {
            self.history.pop_front();
        }
        self.history.push_back(loss);
        if trailing_min.is_finite() && loss > self.rule.factor * trailing_min {
            self.over += 1;
            if self.over >= self.rule.patience {
                return Some(DivergenceReason::Exploding { loss, trailing_min });
            }
        } else {
            self.over = 0;
        }
        None
    }

    /// Feed the validation accuracy after `epochs_done` of `total_epochs`.
    pub fn observe_accuracy(
        &self,
        epochs_done: usize,
        total_epochs: usize,
        accuracy: f64,
        classes: usize,
    ) -> Option<DivergenceReason> {
        let due = epochs_done as f64 >= self.rule.after_fraction * total_epochs as f64;
        let chance = 1.0 / classes as f64;
        (due && accuracy <= self.rule.chance_multiple * chance).then_some(DivergenceReason::ChanceAccuracy {
            epoch: epochs_done,
            accuracy,
        })
    }
}

/// Whether the per-step rule fires anywhere in `losses`; returns the step.
pub fn detect_divergence(losses: &[f64], rule: DivergenceRule) -> Option<usize> {
    let mut det = DivergenceDetector::new(rule);
    losses.iter().position(|&l| det.observe_loss(l).is_some())
}
