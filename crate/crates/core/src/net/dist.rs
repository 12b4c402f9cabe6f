use rand::Rng;

use crate::abacus::{Action, ActionMask, NUM_ACTIONS};
use crate::error::{Error, Result};

/// Categorical distribution over the eight actions with masked entries
/// forced to probability zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedCategorical {
    mask: [bool; NUM_ACTIONS],
    log_probs: [f64; NUM_ACTIONS],
    probs: [f64; NUM_ACTIONS],
}

impl MaskedCategorical {
    pub fn new(logits: &[f64], mask: &ActionMask) -> Result<Self> {
        if logits.len() != NUM_ACTIONS {
            return Err(Error::Shape(format!("expected {NUM_ACTIONS} logits, got {}", logits.len())));
        }
        if mask.count() == 0 {
            return Err(Error::AllMasked);
        }
        let max = logits
            .iter()
            .zip(mask.0)
            .filter(|(_, m)| *m)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("logit".into()));
        }
        let mut sum = 0.0;
        for (l, m) in logits.iter().zip(mask.0) {
            if m {
                sum += (l - max).exp();
            }
        }
        let lse = max + sum.ln();
        let mut log_probs = [f64::NEG_INFINITY; NUM_ACTIONS];
        let mut probs = [0.0; NUM_ACTIONS];
        for i in 0..NUM_ACTIONS {
            if mask.0[i] {
                log_probs[i] = logits[i] - lse;
                probs[i] = log_probs[i].exp();
            }
        }
        Ok(MaskedCategorical {
            mask: mask.0,
            log_probs,
            probs,
        })
    }

    pub fn probs(&self) -> &[f64; NUM_ACTIONS] {
        &self.probs
    }

    pub fn log_prob(&self, a: Action) -> Result<f64> {
        if !self.mask[a.index()] {
            return Err(Error::MaskedAction(a));
        }
        Ok(self.log_probs[a.index()])
    }

    pub fn entropy(&self) -> f64 {
        (0..NUM_ACTIONS)
            .filter(|&i| self.mask[i] && self.probs[i] > 0.0)
            .map(|i| -self.probs[i] * self.log_probs[i])
            .sum()
    }

    pub fn log_prob_and_entropy(&self, a: Action) -> Result<(f64, f64)> {
        Ok((self.log_prob(a)?, self.entropy()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = None;
        for i in 0..NUM_ACTIONS {
            if self.mask[i] {
                acc += self.probs[i];
                last = Some(i);
                if u < acc {
                    return Action::from_index(i).expect("index in range");
                }
            }
        }
        Action::from_index(last.expect("nonempty mask")).expect("index in range")
    }

    /// Most probable legal action; ties go to the lowest index.
    pub fn argmax(&self) -> Action {
        let mut best = None::<usize>;
        for i in 0..NUM_ACTIONS {
            if self.mask[i] && best.is_none_or(|b| self.probs[i] > self.probs[b]) {
                best = Some(i);
            }
        }
        Action::from_index(best.expect("nonempty mask")).expect("index in range")
    }

    /// d log p(a) / d logits. Zero on masked entries.
    pub fn grad_log_prob(&self, a: Action) -> Result<[f64; NUM_ACTIONS]> {
        self.log_prob(a)?;
        let mut g: [f64; NUM_ACTIONS] = std::array::from_fn(|i| if self.mask[i] { -self.probs[i] } else { 0.0 });
        g[a.index()] += 1.0;
        Ok(g)
    }

    /// d H / d logits. Zero on masked entries.
    pub fn grad_entropy(&self) -> [f64; NUM_ACTIONS] {
        let h = self.entropy();
        std::array::from_fn(|i| {
            if self.mask[i] && self.probs[i] > 0.0 {
                -self.probs[i] * (self.log_probs[i] + h)
            } else {
                0.0
            }
        })
    }
}
