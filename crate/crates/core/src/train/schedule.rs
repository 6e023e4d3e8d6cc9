/// Minimum decrease of the best validation loss that counts as improvement.
pub const IMPROVE_TOL: f64 = 1e-6;

/// What one observed validation loss did to the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Reduce-on-plateau learning rate plus early stopping, driven by validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub best: f64,
    pub plateau_patience: usize,
    pub factor: f64,
    pub stop_patience: usize,
    since_decay: usize,
    since_best: usize,
}

impl Schedule {
    pub fn new(lr0: f64, plateau_patience: usize, factor: f64, stop_patience: usize) -> Self {
        Schedule {
            lr: lr0,
            best: f64::INFINITY,
            plateau_patience,
            factor,
            stop_patience,
            since_decay: 0,
            since_best: 0,
        }
    }

    /// Epochs since the best validation loss last improved.
    pub fn stagnant(&self) -> usize {
        self.since_best
    }

    pub fn observe(&mut self, val_loss: f64) -> Step {
        let improved = val_loss < self.best - IMPROVE_TOL;
        if improved {
            self.best = val_loss;
            self.since_best = 0;
            self.since_decay = 0;
        } else {
            self.since_best += 1;
            self.since_decay += 1;
        }
        let decayed = self.since_decay >= self.plateau_patience;
        if decayed {
            self.lr *= self.factor;
            self.since_decay = 0;
        }
        Step {
            improved,
            decayed,
            stop: self.since_best >= self.stop_patience,
        }
    }
}

/// Learning rate after replaying `val_losses` from `lr0`.
pub fn plateau_update(val_losses: &[f64], lr0: f64, patience: usize, factor: f64) -> f64 {
    let mut s = Schedule::new(lr0, patience, factor, usize::MAX);
    for &v in val_losses {
        s.observe(v);
    }
    s.lr
}

/// Whether training should stop after the last entry of `val_losses`.
pub fn early_stop_check(val_losses: &[f64], patience: usize) -> bool {
    let mut s = Schedule::new(1.0, usize::MAX, 1.0, patience);
    val_losses.iter().fold(false, |_, &v| s.observe(v).stop)
}
