use serde::{Deserialize, Serialize};

/// Plateau learning-rate decay and early stopping driven by validation Dice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Minimum absolute Dice gain that counts as improvement.
    pub threshold: f64,
    pub decay_factor: f64,
    /// Stagnant iterations before each learning-rate decay.
    pub plateau_patience: u64,
    /// Stagnant iterations before the stop signal.
    pub early_stop_patience: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            threshold: 1e-4,
            decay_factor: 0.1,
            plateau_patience: 50_000,
            early_stop_patience: 25_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub lr: f64,
    pub best_dsc: f64,
    /// Iteration of the last improvement.
    pub best_iter: u64,
    /// Iteration from which the current plateau is measured: the last
    /// improvement or the last decay, whichever is later.
    pub plateau_start: u64,
    pub decays: u32,
    pub stop: bool,
}

impl ScheduleState {
    pub fn new(lr: f64) -> Self {
        ScheduleState {
            lr,
            best_dsc: f64::NEG_INFINITY,
            best_iter: 0,
            plateau_start: 0,
            decays: 0,
            stop: false,
        }
    }

    pub fn improved_at(&self, iteration: u64) -> bool {
        self.best_iter == iteration && self.best_dsc.is_finite()
    }
}

impl Schedule {
    /// Next state after observing `val_dsc` at `iteration`.
    pub fn update(&self, state: &ScheduleState, val_dsc: f64, iteration: u64) -> ScheduleState {
        let mut s = *state;
        if val_dsc > s.best_dsc + self.threshold {
            s.best_dsc = val_dsc;
            s.best_iter = iteration;
            s.plateau_start = iteration;
            return s;
        }
        if iteration.saturating_sub(s.plateau_start) >= self.plateau_patience {
            s.lr *= self.decay_factor;
            s.decays += 1;
            s.plateau_start = iteration;
        }
        if iteration.saturating_sub(s.best_iter) >= self.early_stop_patience {
            s.stop = true;
        }
        s
    }
}
