//! Patience-based early stopping on validation loss.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_val_loss: f64,
    /// 1-based; 0 until the first epoch is recorded.
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    NonFiniteLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// Improvement is strictly `val_loss < best` (ties do not count). Stops
/// once `patience` consecutive epochs fail to improve, or immediately on
/// a non-finite loss.
pub fn early_stop_update(
    state: EarlyStopState,
    epoch: usize,
    val_loss: f64,
    patience: usize,
) -> (EarlyStopState, StopDecision) {
    if !val_loss.is_finite() {
        log::warn!("epoch {epoch}: validation loss is {val_loss}; stopping");
        return (state, StopDecision::Stop(StopReason::NonFiniteLoss));
    }
    let mut next = state;
    if val_loss < state.best_val_loss {
        next.best_val_loss = val_loss;
        next.best_epoch = epoch;
        next.epochs_since_improvement = 0;
    } else {
        next.epochs_since_improvement += 1;
    }
    let decision = if next.epochs_since_improvement >= patience {
        StopDecision::Stop(StopReason::Patience)
    } else {
        StopDecision::Continue
    };
    (next, decision)
}

/// Run a loss trace through the state machine. Returns the epoch after
/// which training stops (None if it never does) and the final state.
pub fn replay(losses: &[f64], patience: usize) -> (Option<usize>, EarlyStopState) {
    let mut state = EarlyStopState::default();
    for (i, &loss) in losses.iter().enumerate() {
        let (next, decision) = early_stop_update(state, i + 1, loss, patience);
        state = next;
        if decision != StopDecision::Continue {
            return (Some(i + 1), state);
        }
    }
    (None, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_five_epochs_after_best() {
        let (stop, s) = replay(&[1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95], 5);
        assert_eq!(stop, Some(7));
        assert_eq!(s.best_epoch, 2);
        assert_eq!(s.best_val_loss, 0.9);
    }

    #[test]
    fn monotone_improvement_never_stops() {
        let losses: Vec<f64> = (0..50).map(|i| 1.0 / (i + 1) as f64).collect();
        let (stop, s) = replay(&losses, 5);
        assert_eq!(stop, None);
        assert_eq!(s.best_epoch, 50);
    }

    #[test]
    fn ties_are_not_improvements() {
        let (stop, s) = replay(&[0.5; 6], 5);
        assert_eq!(stop, Some(6));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn nan_stops_with_diagnostic() {
        let (s, d) = early_stop_update(EarlyStopState::default(), 1, f64::NAN, 5);
        assert_eq!(d, StopDecision::Stop(StopReason::NonFiniteLoss));
        assert_eq!(s, EarlyStopState::default());
    }

    #[test]
    fn counter_never_exceeds_patience() {
        let mut s = EarlyStopState::default();
        for (i, loss) in [3.0, 2.0, 2.5, 2.5, 1.0, 1.5, 1.6, 1.7].into_iter().enumerate() {
            let (n, d) = early_stop_update(s, i + 1, loss, 3);
            assert!(n.epochs_since_improvement <= 3);
            s = n;
            if d != StopDecision::Continue {
                break;
            }
        }
        assert_eq!(s.best_epoch, 5);
    }
}
