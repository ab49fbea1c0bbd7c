use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngSeed;
use crate::types::{ActionLabel, Episode};

use super::loss::{loss_and_grad, LossConfig, LossParts};
use super::model::{backward, forward, DenoiserConfig, DenoiserParams};
use super::schedule::{q_sample, LabelSequence, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` leaves gradients untouched.
    pub grad_clip: Option<f64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            momentum: 0.9,
            epochs: 20,
            seed: 0,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub parts: LossParts,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub log: Vec<LogRow>,
}

/// One training sample: ground-truth labels with their conditioning.
pub struct TrainExample<'a> {
    pub labels: Vec<ActionLabel>,
    pub cond: &'a Array2<f64>,
}

/// Loss and parameter gradients for a single (labels, step, noise) draw.
pub fn loss_gradient(
    params: &DenoiserParams,
    labels: &[ActionLabel],
    cond: &Array2<f64>,
    step: usize,
    noise: &Array2<f64>,
    sched: &NoiseSchedule,
    cfg: &LossConfig,
) -> Result<(LossParts, DenoiserParams)> {
    let x0 = LabelSequence::scaled_one_hot(labels, params.config.num_classes, sched.scale);
    let xs = q_sample(&x0, step, noise, sched)?;
    let cache = forward(&xs, step, &cond.view(), params)?;
    let (parts, grad_probs) = loss_and_grad(&cache.probs, labels, cfg);
    let grads = backward(&cache, &grad_probs, params);
    Ok((parts, grads))
}

/// Loss only, for finite-difference checks.
pub fn loss_value(
    params: &DenoiserParams,
    labels: &[ActionLabel],
    cond: &Array2<f64>,
    step: usize,
    noise: &Array2<f64>,
    sched: &NoiseSchedule,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let x0 = LabelSequence::scaled_one_hot(labels, params.config.num_classes, sched.scale);
    let xs = q_sample(&x0, step, noise, sched)?;
    let cache = forward(&xs, step, &cond.view(), params)?;
    Ok(loss_and_grad(&cache.probs, labels, cfg).0)
}

/// SGD with momentum over episodes: each step draws one episode, a step
/// `s ~ U[1, S]`, noises its labels and regresses the clean labels.
pub fn train(
    dataset: &[Episode],
    cfg: &LossConfig,
    sched: &NoiseSchedule,
    arch: DenoiserConfig,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let conds: Vec<Array2<f64>> = dataset.iter().map(Episode::feature_matrix).collect();
    let mut examples = Vec::with_capacity(dataset.len());
    for (ep, cond) in dataset.iter().zip(&conds) {
        let labels = ep
            .gt_labels()
            .ok_or_else(|| Error::InvalidArgument(format!("episode {} has frames without labels", ep.id)))?;
        if ep.feature_dim != arch.feature_dim {
            return Err(Error::Shape(format!(
                "episode {} has feature dim {}, model expects {}",
                ep.id, ep.feature_dim, arch.feature_dim
            )));
        }
        examples.push(TrainExample { labels, cond });
    }
    train_examples(&examples, cfg, sched, arch, hyper)
}

pub fn train_examples(
    examples: &[TrainExample<'_>],
    cfg: &LossConfig,
    sched: &NoiseSchedule,
    arch: DenoiserConfig,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    let seed = RngSeed(hyper.seed);
    let mut params = DenoiserParams::init(arch, seed.derive("init"))?;
    let mut velocity = params.zeros_like();
    let mut rng = seed.derive("train").rng();
    let mut log = Vec::new();
    if hyper.epochs > 0 && examples.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step_index = 0;
    for epoch in 0..hyper.epochs {
        let epoch_start = log.len();
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &examples[i];
            let step = rng.random_range(1..=sched.total_steps);
            let noise = Array2::from_shape_simple_fn((ex.labels.len(), arch.num_classes), || {
                rng.sample::<f64, _>(StandardNormal)
            });
            let (parts, mut grads) = loss_gradient(&params, &ex.labels, ex.cond, step, &noise, sched, cfg)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged { step: step_index });
            }
            if let Some(clip) = hyper.grad_clip {
                let norm = grads.squared_norm().sqrt();
                if norm > clip {
                    let scale = clip / norm;
                    grads.for_each_tensor_mut(|t| t.iter_mut().for_each(|g| *g *= scale));
                }
            }
            velocity.zip_mut_with(&grads, |v, g| *v = hyper.momentum * *v + g);
            params.zip_mut_with(&velocity, |p, v| *p -= hyper.lr * v);
            if !params.is_finite() {
                return Err(Error::Diverged { step: step_index });
            }
            log.push(LogRow {
                step: step_index,
                parts,
            });
            step_index += 1;
        }
        let rows = &log[epoch_start..];
        let mean = rows.iter().map(|r: &LogRow| r.parts.total).sum::<f64>() / rows.len().max(1) as f64;
        log::info!("epoch {epoch}: mean loss {mean:.5}");
    }
    Ok(TrainOutcome { params, log })
}

/// CSV training log with columns `step,ce,ba,ts,total`.
pub fn write_log_csv<W: Write>(log: &[LogRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,ce,ba,ts,total")?;
    for row in log {
        let p = row.parts;
        writeln!(w, "{},{},{},{},{}", row.step, p.ce, p.ba, p.ts, p.total)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> DenoiserConfig {
        DenoiserConfig {
            num_classes: 2,
            feature_dim: 3,
            layers: 2,
            width: 4,
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cond = Array2::zeros((5, 3));
        let ex = [TrainExample {
            labels: vec![ActionLabel(0); 5],
            cond: &cond,
        }];
        let hyper = TrainHyper {
            epochs: 0,
            seed: 9,
            ..TrainHyper::default()
        };
        let out = train_examples(
            &ex,
            &LossConfig::default(),
            &NoiseSchedule::default(),
            tiny_arch(),
            &hyper,
        )
        .unwrap();
        let init = DenoiserParams::init(tiny_arch(), RngSeed(9).derive("init")).unwrap();
        assert_eq!(out.params, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let cond = Array2::from_elem((8, 3), 1.0);
        let ex = [TrainExample {
            labels: vec![ActionLabel(1); 8],
            cond: &cond,
        }];
        let hyper = TrainHyper {
            lr: 1e200,
            epochs: 50,
            seed: 1,
            ..TrainHyper::default()
        };
        let err = train_examples(
            &ex,
            &LossConfig::default(),
            &NoiseSchedule::default(),
            tiny_arch(),
            &hyper,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn csv_log_header() {
        let mut buf = Vec::new();
        write_log_csv(
            &[LogRow {
                step: 0,
                parts: LossParts {
                    ce: 0.5,
                    ba: 0.25,
                    ts: 0.125,
                    total: 0.5,
                },
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,ce,ba,ts,total\n0,0.5,0.25,0.125,0.5\n"
        );
    }
}
