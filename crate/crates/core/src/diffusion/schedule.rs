use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ActionLabel;

pub const DEFAULT_TOTAL_STEPS: usize = 1000;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal fractions `alpha_bar[0..=S]` of a cosine schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub total_steps: usize,
    pub alpha_bar: Vec<f64>,
    /// One-hot labels are mapped to `[-scale, +scale]` before noising.
    pub scale: f64,
}

impl NoiseSchedule {
    pub fn cosine(total_steps: usize, scale: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument("label scale must be positive".into()));
        }
        let f = |s: usize| {
            let x = (s as f64 / total_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = Vec::with_capacity(total_steps + 1);
        alpha_bar.push(1.0);
        for s in 1..=total_steps {
            let prev = alpha_bar[s - 1];
            let ratio = (f(s) / f0) / (f(s - 1) / f0);
            let beta = (1.0 - ratio).clamp(0.0, MAX_BETA);
            alpha_bar.push(prev * (1.0 - beta));
        }
        Ok(NoiseSchedule {
            total_steps,
            alpha_bar,
            scale,
        })
    }

    pub fn alpha_bar(&self, step: usize) -> Result<f64> {
        self.alpha_bar.get(step).copied().ok_or(Error::StepRange {
            step,
            max: self.total_steps,
        })
    }

    /// `count` evenly spaced steps from S down to S/count.
    pub fn evenly_spaced(&self, count: usize) -> Vec<usize> {
        let count = count.clamp(1, self.total_steps);
        let mut steps: Vec<usize> = (0..count)
            .map(|i| self.total_steps - (i * self.total_steps) / count)
            .collect();
        steps.dedup();
        steps
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::cosine(DEFAULT_TOTAL_STEPS, 1.0).expect("default schedule")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSpace {
    /// Diffusion state, unconstrained reals.
    Continuous,
    /// Rows are probability vectors.
    Simplex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    pub values: Array2<f64>,
    pub space: LabelSpace,
}

impl LabelSequence {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn one_hot(labels: &[ActionLabel], classes: usize) -> Self {
        let mut values = Array2::zeros((labels.len(), classes));
        for (t, l) in labels.iter().enumerate() {
            values[[t, l.index()]] = 1.0;
        }
        LabelSequence {
            values,
            space: LabelSpace::Simplex,
        }
    }

    /// One-hot rows mapped to `+scale` on the true class and `-scale` elsewhere.
    pub fn scaled_one_hot(labels: &[ActionLabel], classes: usize, scale: f64) -> Self {
        let mut values = Array2::from_elem((labels.len(), classes), -scale);
        for (t, l) in labels.iter().enumerate() {
            values[[t, l.index()]] = scale;
        }
        LabelSequence {
            values,
            space: LabelSpace::Continuous,
        }
    }

    pub fn argmax(&self) -> Vec<ActionLabel> {
        self.values
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                ActionLabel(best as u8)
            })
            .collect()
    }

    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        for (t, row) in self.values.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > tol {
                return Err(Error::Domain(format!(
                    "row {t} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(())
    }
}

/// Forward noising `x_s = sqrt(abar_s) x_0 + sqrt(1 - abar_s) eps`.
pub fn q_sample(x0: &LabelSequence, step: usize, noise: &Array2<f64>, sched: &NoiseSchedule) -> Result<LabelSequence> {
    let ab = sched.alpha_bar(step)?;
    if noise.dim() != x0.values.dim() {
        return Err(Error::Shape(format!(
            "noise shape {:?} does not match labels {:?}",
            noise.dim(),
            x0.values.dim()
        )));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut values = x0.values.clone();
    values.zip_mut_with(noise, |x, e| *x = a * *x + b * e);
    Ok(LabelSequence {
        values,
        space: LabelSpace::Continuous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::rng::RngSeed;

    fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = RngSeed(seed).rng();
        Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
    }

    #[test]
    fn cosine_schedule_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar.len(), 1001);
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[1000] < 1e-3 && s.alpha_bar[1000] > 0.0);
    }

    #[test]
    fn step_zero_is_identity() {
        let s = NoiseSchedule::default();
        let labels = [ActionLabel(0), ActionLabel(1), ActionLabel(1)];
        let x0 = LabelSequence::scaled_one_hot(&labels, 2, 1.0);
        let xs = q_sample(&x0, 0, &normal_matrix(3, 2, 1), &s).unwrap();
        assert_eq!(xs.values, x0.values);
    }

    #[test]
    fn step_out_of_range() {
        let s = NoiseSchedule::default();
        let x0 = LabelSequence::scaled_one_hot(&[ActionLabel(0)], 2, 1.0);
        let err = q_sample(&x0, 1001, &normal_matrix(1, 2, 1), &s).unwrap_err();
        assert!(matches!(err, Error::StepRange { step: 1001, max: 1000 }));
    }

    #[test]
    fn matches_scalar_reference_at_step_500() {
        let s = NoiseSchedule::default();
        let labels = [ActionLabel(0), ActionLabel(1), ActionLabel(1), ActionLabel(0)];
        let x0 = LabelSequence::scaled_one_hot(&labels, 2, 1.0);
        let noise = normal_matrix(4, 2, 99);
        let xs = q_sample(&x0, 500, &noise, &s).unwrap();

        // Independent scalar evaluation of the cosine closed form.
        let f = |t: f64| {
            (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::PI / 2.0)
                .cos()
                .powi(2)
        };
        let abar = f(500.0) / f(0.0);
        for t in 0..4 {
            for c in 0..2 {
                let x = if labels[t].index() == c { 1.0 } else { -1.0 };
                let expected = abar.sqrt() * x + (1.0 - abar).sqrt() * noise[[t, c]];
                assert!((xs.values[[t, c]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn terminal_step_is_standard_normal() {
        let s = NoiseSchedule::default();
        let n = 10_000;
        let labels: Vec<ActionLabel> = (0..n / 2).map(|i| ActionLabel((i % 2) as u8)).collect();
        let x0 = LabelSequence::scaled_one_hot(&labels, 2, 1.0);
        let xs = q_sample(&x0, 1000, &normal_matrix(n / 2, 2, 5), &s).unwrap();
        let mean = xs.values.mean().unwrap();
        let var = xs.values.mapv(|v| (v - mean).powi(2)).sum() / (n as f64 - 1.0);
        let sigma_mean = (1.0 / n as f64).sqrt();
        let sigma_var = (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * sigma_mean, "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * sigma_var, "var {var}");
    }

    #[test]
    fn evenly_spaced_steps() {
        let s = NoiseSchedule::default();
        let steps = s.evenly_spaced(100);
        assert_eq!(steps.len(), 100);
        assert_eq!(steps[0], 1000);
        assert_eq!(*steps.last().unwrap(), 10);
        assert!(steps.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.evenly_spaced(1), vec![1000]);
    }

    #[test]
    fn simplex_check() {
        let p = LabelSequence::one_hot(&[ActionLabel(1)], 2);
        assert!(p.check_simplex(1e-6).is_ok());
        let bad = LabelSequence {
            values: ndarray::arr2(&[[0.7, 0.7]]),
            space: LabelSpace::Simplex,
        };
        assert!(bad.check_simplex(1e-6).is_err());
    }
}
