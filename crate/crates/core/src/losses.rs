//! Training objectives: temporal contrastive loss over memory values,
//! bootstrapped cross entropy over predicted frames, and their weighted sum.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Added to the contrastive denominator.
    pub epsilon: f64,
    /// Only pixels whose true-class probability is below `eta` contribute to
    /// the cross entropy.
    pub eta: f64,
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Weight of the temporal contrastive term.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            eta: 0.9,
            alpha: 1.0,
            beta: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta {} must lie in (0, 1]", self.eta)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sum over interior triples `(v[t-1], v[t], v[t+1])` of
///
/// ```text
/// ((1 - sim(v[t-1], v[t])) + (1 - sim(v[t], v[t+1]))) / (1 - sim(v[t-1], v[t+1]) + epsilon)
/// ```
///
/// with cosine `sim`. Fewer than three values give 0.
pub fn temporal_contrastive_loss(tape: &mut Tape, values: &[Var], epsilon: f64) -> Result<Var> {
    if values.len() < 3 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let sims: Vec<Var> = values
        .windows(2)
        .map(|w| tape.cosine_sim(w[0], w[1]))
        .collect::<Result<_>>()?;
    let mut total: Option<Var> = None;
    for t in 1..values.len() - 1 {
        let s_prev = tape.affine(sims[t - 1], -1.0, 1.0)?;
        let s_next = tape.affine(sims[t], -1.0, 1.0)?;
        let numer = tape.add(s_prev, s_next)?;
        let far = tape.cosine_sim(values[t - 1], values[t + 1])?;
        let denom = tape.affine(far, -1.0, 1.0 + epsilon)?;
        let term = tape.div(numer, denom)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one interior triple"))
}

/// Bootstrapped cross entropy over the non-annotated frames.
///
/// `probs` is `[N,2,H,W]` (one row per frame in the loss set), `gt` is the
/// binary foreground mask `[N,1,H,W]`.
pub fn bootstrapped_ce(tape: &mut Tape, probs: Var, gt: &Tensor, eta: f64) -> Result<Var> {
    if tape.shape(probs).first() == Some(&0) {
        return Err(Error::Contract("bootstrapped cross entropy over no frames".into()));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Config(format!("eta {eta} must lie in (0, 1]")));
    }
    tape.bootstrapped_ce(probs, gt, eta)
}

/// `alpha * l_bce + beta * l_tc`.
pub fn total_loss(tape: &mut Tape, l_bce: Var, l_tc: Var, alpha: f64, beta: f64) -> Result<Var> {
    let a = tape.scale(l_bce, alpha)?;
    let b = tape.scale(l_tc, beta)?;
    tape.add(a, b)
}
