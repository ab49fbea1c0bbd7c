use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::planning::LabelTimeline;
use crate::rng::RngSeed;

use super::model::{denoise, DenoiserParams};
use super::schedule::{LabelSequence, LabelSpace, NoiseSchedule};

/// Inference protocol: a single denoise call at `s = S`, or a number of
/// evenly spaced deterministic reverse steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPlan {
    Direct,
    Evenly(usize),
}

impl StepPlan {
    pub fn steps(&self, sched: &NoiseSchedule) -> Vec<usize> {
        match self {
            StepPlan::Direct => vec![sched.total_steps],
            StepPlan::Evenly(n) => sched.evenly_spaced(*n),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(StepPlan::Direct),
            n => n
                .parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .map(StepPlan::Evenly)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("steps must be 'direct' or a positive count, got {n:?}"))
                }),
        }
    }

    pub fn name(&self) -> String {
        match self {
            StepPlan::Direct => "direct".into(),
            StepPlan::Evenly(n) => n.to_string(),
        }
    }
}

/// Deterministic (eta = 0) reverse diffusion from Gaussian noise. Returns
/// the last clean-label prediction.
pub fn infer_probs(
    cond: &ArrayView2<f64>,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    steps: &[usize],
    seed: RngSeed,
) -> Result<LabelSequence> {
    if steps.is_empty()
        || steps.iter().any(|&s| s == 0 || s > sched.total_steps)
        || steps.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::StepOrder);
    }
    let frames = cond.nrows();
    let classes = params.config.num_classes;
    let mut rng = seed.derive("infer").rng();
    let mut x = LabelSequence {
        values: Array2::from_shape_simple_fn((frames, classes), || rng.sample(StandardNormal)),
        space: LabelSpace::Continuous,
    };
    let mut last = None;
    for (i, &s) in steps.iter().enumerate() {
        let next = steps.get(i + 1).copied().unwrap_or(0);
        let probs = denoise(&x, s, cond, params)?;
        // Predicted clean state in the noised coordinate system.
        let x0_hat = probs.values.mapv(|p| sched.scale * (2.0 * p - 1.0));
        let ab = sched.alpha_bar(s)?;
        let ab_next = sched.alpha_bar(next)?;
        let eps_hat = (&x.values - &(x0_hat.clone() * ab.sqrt())) / (1.0 - ab).sqrt();
        x.values = x0_hat * ab_next.sqrt() + eps_hat * (1.0 - ab_next).sqrt();
        last = Some(probs);
    }
    Ok(last.expect("steps is non-empty"))
}

pub fn infer(
    cond: &ArrayView2<f64>,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    steps: &[usize],
    seed: RngSeed,
) -> Result<LabelTimeline> {
    let probs = infer_probs(cond, params, sched, steps, seed)?;
    Ok(LabelTimeline::new(probs.argmax()))
}

pub fn frame_accuracy(pred: &LabelTimeline, gt: &LabelTimeline) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "timelines differ in length ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.labels.iter().zip(&gt.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::DenoiserConfig;
    use crate::types::ActionLabel;

    fn tl(v: &[u8]) -> LabelTimeline {
        LabelTimeline::new(v.iter().map(|&c| ActionLabel(c)).collect())
    }

    fn tiny() -> (DenoiserParams, Array2<f64>) {
        let cfg = DenoiserConfig {
            num_classes: 2,
            feature_dim: 3,
            layers: 2,
            width: 4,
        };
        let mut rng = RngSeed(4).rng();
        let cond = Array2::from_shape_simple_fn((10, 3), || rng.sample(StandardNormal));
        (DenoiserParams::init(cfg, RngSeed(3)).unwrap(), cond)
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(frame_accuracy(&tl(&[0, 1, 1]), &tl(&[0, 1, 1])).unwrap(), 1.0);
        assert_eq!(frame_accuracy(&tl(&[1, 0, 0]), &tl(&[0, 1, 1])).unwrap(), 0.0);
        assert_eq!(frame_accuracy(&tl(&[0, 1, 1, 1]), &tl(&[0, 0, 1, 1])).unwrap(), 0.75);
        assert!(matches!(frame_accuracy(&tl(&[0]), &tl(&[0, 1])), Err(Error::Shape(_))));
    }

    #[test]
    fn direct_prediction_is_one_denoise_call() {
        let (params, cond) = tiny();
        let sched = NoiseSchedule::default();
        let seed = RngSeed(8);
        let tl = infer(&cond.view(), &params, &sched, &[1000], seed).unwrap();
        let mut rng = seed.derive("infer").rng();
        let x = LabelSequence {
            values: Array2::from_shape_simple_fn((10, 2), || rng.sample(StandardNormal)),
            space: LabelSpace::Continuous,
        };
        let expected = denoise(&x, 1000, &cond.view(), &params).unwrap().argmax();
        assert_eq!(tl.labels, expected);
    }

    #[test]
    fn deterministic_under_seed() {
        let (params, cond) = tiny();
        let sched = NoiseSchedule::default();
        let steps = sched.evenly_spaced(100);
        let a = infer(&cond.view(), &params, &sched, &steps, RngSeed(1)).unwrap();
        let b = infer(&cond.view(), &params, &sched, &steps, RngSeed(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_order_is_validated() {
        let (params, cond) = tiny();
        let sched = NoiseSchedule::default();
        for bad in [vec![], vec![10, 20], vec![10, 10], vec![1001], vec![5, 0]] {
            assert!(matches!(
                infer(&cond.view(), &params, &sched, &bad, RngSeed(0)),
                Err(Error::StepOrder)
            ));
        }
    }

    #[test]
    fn step_plan_parsing() {
        assert_eq!(StepPlan::parse("direct").unwrap(), StepPlan::Direct);
        assert_eq!(StepPlan::parse("100").unwrap(), StepPlan::Evenly(100));
        assert!(StepPlan::parse("0").is_err());
        assert!(StepPlan::parse("many").is_err());
    }
}
