use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Relative improvement required to reset the patience counter.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 25,
            factor: 0.5,
            min_lr: 1e-5,
            threshold: 1e-4,
        }
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub config: PlateauConfig,
    pub best_loss: f64,
    pub epochs_since_improve: usize,
    pub lr: f64,
}

impl PlateauState {
    pub fn new(lr: f64, config: PlateauConfig) -> Self {
        Self {
            config,
            best_loss: f64::INFINITY,
            epochs_since_improve: 0,
            lr,
        }
    }

    /// Record one epoch loss and return the (possibly reduced) learning rate.
    pub fn step(&mut self, epoch_loss: f64) -> f64 {
        if epoch_loss < self.best_loss * (1.0 - self.config.threshold)
            || (self.best_loss.is_infinite() && epoch_loss.is_finite())
        {
            self.best_loss = epoch_loss;
            self.epochs_since_improve = 0;
        } else {
            self.epochs_since_improve += 1;
            if self.epochs_since_improve >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.epochs_since_improve = 0;
            }
        }
        self.lr
    }
}
