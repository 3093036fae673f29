//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the reverse-mode implementation it validates.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Comparison of analytic and numeric gradients for one input tensor.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub input: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// `|a - n|_2 / max(|a|_2, |n|_2)`, or the absolute difference norm when
    /// both gradients vanish.
    pub fn rel_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub comparisons: Vec<GradComparison>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.comparisons
            .iter()
            .map(GradComparison::rel_error)
            .fold(0.0, f64::max)
    }
}

/// Finite-difference configuration.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many coordinates per input (randomly chosen).
    pub probe: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            probe: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn with_probe(mut self, coords: usize, seed: u64) -> Self {
        self.probe = Some(coords);
        self.seed = seed;
        self
    }

    /// Checks `d f(inputs) / d inputs` for a scalar-valued `f`.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.detach().with_grad(true)))
            .collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;

        let eval = |values: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.detach())).collect();
            let out = f(&mut tape, &vars)?;
            tape.value(out).item()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut comparisons = Vec::with_capacity(inputs.len());
        for (idx, input) in inputs.iter().enumerate() {
            let full = tape
                .grad(vars[idx])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; input.numel()]);
            let coords: Vec<usize> = match self.probe {
                Some(k) if k < input.numel() => {
                    let mut c = sample(&mut rng, input.numel(), k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..input.numel()).collect(),
            };
            let mut work: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
            let mut analytic = Vec::with_capacity(coords.len());
            let mut numeric = Vec::with_capacity(coords.len());
            for &c in &coords {
                let orig = work[idx].data()[c];
                work[idx].data_mut()[c] = orig + self.step;
                let plus = eval(&work)?;
                work[idx].data_mut()[c] = orig - self.step;
                let minus = eval(&work)?;
                work[idx].data_mut()[c] = orig;
                let d = (plus - minus) / (2.0 * self.step);
                if !d.is_finite() {
                    return Err(Error::NonFinite(format!("finite difference at input {idx}[{c}]")));
                }
                numeric.push(d);
                analytic.push(full[c]);
            }
            comparisons.push(GradComparison {
                input: idx,
                analytic,
                numeric,
            });
        }
        Ok(GradReport { comparisons })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_gradient() {
        let x = Tensor::vector(&[0.5, -1.5, 2.0]).unwrap();
        let report = GradCheck::default()
            .run(&[x], |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            })
            .unwrap();
        assert!(report.max_rel_error() < 1e-8);
    }
}
