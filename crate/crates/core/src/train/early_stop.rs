/// Outcome of observing one epoch's monitored value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience-based early stopping on a metric where lower is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: None, stale: 0 }
    }

    /// Restores a saved state.
    pub fn with_state(patience: usize, min_delta: f64, best: Option<(usize, f64)>, stale: usize) -> Self {
        Self { patience, min_delta, best, stale }
    }

    /// `(epoch, value)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    /// Consecutive epochs without improvement.
    pub fn stale_epochs(&self) -> usize {
        self.stale
    }

    /// An observation improves when it is lower than the best by more than
    /// `min_delta`. After `patience` consecutive non-improving epochs the
    /// verdict is [`Verdict::Stop`].
    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        let improved = match self.best {
            None => true,
            Some((_, best)) => value < best - self.min_delta,
        };
        if improved {
            self.best = Some((epoch, value));
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::NoImprovement
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(patience: usize, losses: &[f64]) -> (usize, Option<(usize, f64)>) {
        let mut es = EarlyStopping::new(patience, 1e-6);
        for (i, &l) in losses.iter().enumerate() {
            if es.observe(i + 1, l) == Verdict::Stop {
                return (i + 1, es.best());
            }
        }
        (losses.len(), es.best())
    }

    #[test]
    fn patience_one_worsening_from_epoch_two() {
        // halts after epoch 2, so epoch 3 never runs
        assert_eq!(run(1, &[1.0, 1.1, 1.2, 1.3]), (2, Some((1, 1.0))));
    }

    #[test]
    fn improvement_resets_the_counter() {
        assert_eq!(run(2, &[1.0, 1.1, 0.9, 0.95, 0.96, 0.1]), (5, Some((3, 0.9))));
    }

    #[test]
    fn changes_within_min_delta_are_not_improvement() {
        assert_eq!(run(2, &[1.0, 1.0 - 5e-7, 1.0 - 9e-7]), (3, Some((1, 1.0))));
    }
}
