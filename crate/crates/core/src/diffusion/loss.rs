//! Cross-entropy, boundary-alignment and temporal-smoothness losses over
//! per-frame class probabilities.
//!
//! * CE: mean over frames of `-ln p_t(gt_t)`.
//! * TS: mean over `t >= 1` and classes of `min(delta^2, tau^2)` with
//!   `delta = ln p_{t,c} - ln p_{t-1,c}`.
//! * BA: binary cross-entropy between the predicted change probability
//!   `b_t = 1 - sum_c p_{t,c} p_{t-1,c}` and the ground-truth boundary
//!   indicator smoothed by a Gaussian and rescaled to peak 1.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ActionLabel;

use super::schedule::LabelSequence;

const PROB_EPS: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub use_ba: bool,
    pub use_ts: bool,
    pub lambda_ba: f64,
    pub lambda_ts: f64,
    pub ts_clip: f64,
    pub ba_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            use_ba: false,
            use_ts: false,
            lambda_ba: 0.1,
            lambda_ts: 0.15,
            ts_clip: 4.0,
            ba_sigma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn with_terms(use_ba: bool, use_ts: bool) -> Self {
        LossConfig {
            use_ba,
            use_ts,
            ..LossConfig::default()
        }
    }

    /// Row label in the ablation table, e.g. `CE + BA + TS`.
    pub fn label(&self) -> String {
        let mut parts = vec!["CE"];
        if self.use_ba {
            parts.push("BA");
        }
        if self.use_ts {
            parts.push("TS");
        }
        parts.join(" + ")
    }

    /// Parses `ce`, `ce,ba`, `ce,ts`, `ce,ba,ts` (order-insensitive).
    pub fn parse_terms(spec: &str) -> Result<Self> {
        let mut cfg = LossConfig::default();
        let mut saw_ce = false;
        for term in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match term.to_ascii_lowercase().as_str() {
                "ce" => saw_ce = true,
                "ba" => cfg.use_ba = true,
                "ts" => cfg.use_ts = true,
                other => return Err(Error::InvalidArgument(format!("unknown loss term {other:?}"))),
            }
        }
        if !saw_ce {
            return Err(Error::InvalidArgument("cross-entropy is always required".into()));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_ba < 0.0 || self.lambda_ts < 0.0 || self.ts_clip < 0.0 || self.ba_sigma < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub ba: f64,
    pub ts: f64,
    pub total: f64,
}

/// Loss value and its terms. `pred` must lie on the simplex.
pub fn loss(pred: &LabelSequence, gt: &[ActionLabel], cfg: &LossConfig) -> Result<LossParts> {
    pred.check_simplex(SIMPLEX_TOL)?;
    check_gt(pred, gt)?;
    Ok(loss_and_grad(&pred.values, gt, cfg).0)
}

fn check_gt(pred: &LabelSequence, gt: &[ActionLabel]) -> Result<()> {
    if pred.frames() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, ground truth {}",
            pred.frames(),
            gt.len()
        )));
    }
    if let Some(l) = gt.iter().find(|l| l.index() >= pred.classes()) {
        return Err(Error::Shape(format!("label {} exceeds class count", l.0)));
    }
    Ok(())
}

/// Smoothed boundary target for `t >= 1` (index 0 unused, left at zero).
pub fn boundary_target(gt: &[ActionLabel], sigma: f64) -> Vec<f64> {
    let n = gt.len();
    let mut target = vec![0.0; n];
    let boundaries: Vec<usize> = (1..n).filter(|&t| gt[t] != gt[t - 1]).collect();
    if boundaries.is_empty() {
        return target;
    }
    for t in 1..n {
        target[t] = boundaries
            .iter()
            .map(|&b| {
                let d = t as f64 - b as f64;
                if sigma > 0.0 {
                    (-d * d / (2.0 * sigma * sigma)).exp()
                } else if d == 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .sum();
    }
    let peak = target.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        target.iter_mut().for_each(|v| *v /= peak);
    }
    target
}

/// Returns the loss terms and `d total / d probs`.
pub(crate) fn loss_and_grad(probs: &Array2<f64>, gt: &[ActionLabel], cfg: &LossConfig) -> (LossParts, Array2<f64>) {
    let (frames, classes) = probs.dim();
    let mut grad = Array2::zeros((frames, classes));
    if frames == 0 {
        return (LossParts::default(), grad);
    }

    let mut ce = 0.0;
    for (t, l) in gt.iter().enumerate() {
        let p = probs[[t, l.index()]];
        let pc = p.max(PROB_EPS);
        ce -= pc.ln();
        if p > PROB_EPS {
            grad[[t, l.index()]] -= 1.0 / (pc * frames as f64);
        }
    }
    ce /= frames as f64;

    let pairs = frames.saturating_sub(1);
    let mut ts = 0.0;
    let w_ts = if cfg.use_ts { cfg.lambda_ts } else { 0.0 };
    if pairs > 0 {
        let count = (pairs * classes) as f64;
        let clip_sq = cfg.ts_clip * cfg.ts_clip;
        for t in 1..frames {
            for c in 0..classes {
                let (p1, p0) = (probs[[t, c]], probs[[t - 1, c]]);
                let delta = p1.max(PROB_EPS).ln() - p0.max(PROB_EPS).ln();
                let sq = delta * delta;
                if sq < clip_sq {
                    ts += sq;
                    if w_ts > 0.0 {
                        let g = w_ts * 2.0 * delta / count;
                        if p1 > PROB_EPS {
                            grad[[t, c]] += g / p1;
                        }
                        if p0 > PROB_EPS {
                            grad[[t - 1, c]] -= g / p0;
                        }
                    }
                } else {
                    ts += clip_sq;
                }
            }
        }
        ts /= count;
    }

    let mut ba = 0.0;
    let w_ba = if cfg.use_ba { cfg.lambda_ba } else { 0.0 };
    if pairs > 0 {
        let target = boundary_target(gt, cfg.ba_sigma);
        for t in 1..frames {
            let same: f64 = (0..classes).map(|c| probs[[t, c]] * probs[[t - 1, c]]).sum();
            let b_raw = 1.0 - same;
            let b = b_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let y = target[t];
            ba -= y * b.ln() + (1.0 - y) * (1.0 - b).ln();
            if w_ba > 0.0 && b == b_raw {
                let dbce_db = (-y / b + (1.0 - y) / (1.0 - b)) * w_ba / pairs as f64;
                for c in 0..classes {
                    grad[[t, c]] -= dbce_db * probs[[t - 1, c]];
                    grad[[t - 1, c]] -= dbce_db * probs[[t, c]];
                }
            }
        }
        ba /= pairs as f64;
    }

    let total = ce + w_ba * ba + w_ts * ts;
    (LossParts { ce, ba, ts, total }, grad)
}
