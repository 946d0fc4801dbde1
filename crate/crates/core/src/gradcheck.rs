//! Finite-difference gradient checks.
//!
//! The checker only ever evaluates the forward function, so it stays
//! independent of every backward rule it is used to verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error O(h²).
    #[default]
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation error O(h⁴).
    /// Allows a larger step, which cuts rounding noise on small gradient entries.
    FivePoint,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub stencil: Stencil,
    /// Check at most this many entries per input, sampled without replacement.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            stencil: Stencil::Central,
            max_entries: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn sampled(max_entries: usize, seed: u64) -> Self {
        GradCheck {
            max_entries: Some(max_entries),
            seed,
            ..Self::default()
        }
    }

    /// Entry indices of a tensor with `numel` entries to perturb.
    pub fn entries(&self, numel: usize, salt: u64) -> Vec<usize> {
        match self.max_entries {
            Some(m) if m < numel => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9E37_79B9));
                let mut idx = sample(&mut rng, numel, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..numel).collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input, entry, analytic, numeric) at the worst relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn record(&mut self, input: usize, entry: usize, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((input, entry, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err && other.worst.is_some() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Compares reverse-mode gradients of a scalar function of `inputs` against
/// finite differences. Every input is treated as a differentiable leaf.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheck, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value().item();
        Ok(v)
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for entry in cfg.entries(input.numel(), i as u64) {
            let orig = input.data()[entry];
            let mut at = |offset: f64| -> Result<f64> {
                work[i].data_mut()[entry] = orig + offset;
                eval(&work)
            };
            let h = cfg.step;
            let numeric = match cfg.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h),
            };
            work[i].data_mut()[entry] = orig;
            report.record(i, entry, analytic[i].data()[entry], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // scale's backward is correct, so fake a mismatch by comparing against
        // a function whose forward differs from what the tape differentiates
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = check_gradients(&[x], GradCheck::default(), |tape, v| {
            let y = v[0].mul(v[0])?.sum();
            Ok(if tape.is_recording() { y.scale(1.5) } else { y })
        })
        .unwrap();
        assert!(report.max_rel_err > 0.3);
    }

    #[test]
    fn five_point_stencil_is_exact_on_quartics() {
        let x = Tensor::new(&[2], vec![0.7, -1.3]).unwrap();
        let cfg = GradCheck {
            step: 0.25,
            stencil: Stencil::FivePoint,
            ..GradCheck::default()
        };
        let report = check_gradients(&[x], cfg, |_, v| {
            let sq = v[0].mul(v[0])?;
            Ok(sq.mul(sq)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-12, "{report:?}");
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let cfg = GradCheck::sampled(4, 7);
        let a = cfg.entries(100, 3);
        assert_eq!(a, cfg.entries(100, 3));
        assert_eq!(a.len(), 4);
        assert_eq!(cfg.entries(3, 3), vec![0, 1, 2]);
    }
}
