//! Conditional denoiser: input projection over `[x_s | features]`, a stack
//! of residual dilated temporal convolutions with an additive sinusoidal
//! step embedding, and a per-frame softmax head predicting the clean labels.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngSeed;

use super::schedule::{LabelSequence, LabelSpace};

pub const KERNEL_TAPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub layers: usize,
    pub width: usize,
}

impl DenoiserConfig {
    /// Desk-scale default: 8 layers of width 32.
    pub fn desk(num_classes: usize, feature_dim: usize) -> Self {
        DenoiserConfig {
            num_classes,
            feature_dim,
            layers: 8,
            width: 32,
        }
    }

    /// Depth of the 28-layer encoder/decoder backbone, as a convolutional stand-in.
    pub fn paper_shape(num_classes: usize, feature_dim: usize) -> Self {
        DenoiserConfig {
            num_classes,
            feature_dim,
            layers: 28,
            width: 64,
        }
    }

    pub fn dilation(layer: usize) -> usize {
        1 << (layer % 8)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.width == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument(format!("invalid denoiser config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// One W x W matrix per tap; tap k reads frame `t + (k - 1) * dilation`.
    pub conv_w: Vec<Array2<f64>>,
    pub conv_b: Array1<f64>,
    pub mix_w: Array2<f64>,
    pub mix_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub in_w: Array2<f64>,
    pub in_b: Array1<f64>,
    pub emb_w: Array2<f64>,
    pub emb_b: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, seed: RngSeed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.rng();
        let w = config.width;
        let fan_in = config.num_classes + config.feature_dim;
        let in_w = gaussian(fan_in, w, (1.0 / fan_in as f64).sqrt(), &mut rng);
        let emb_w = gaussian(w, w, (1.0 / w as f64).sqrt(), &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                conv_w: (0..KERNEL_TAPS)
                    .map(|_| gaussian(w, w, (2.0 / (KERNEL_TAPS * w) as f64).sqrt(), &mut rng))
                    .collect(),
                conv_b: Array1::zeros(w),
                mix_w: gaussian(w, w, 0.5 * (1.0 / w as f64).sqrt(), &mut rng),
                mix_b: Array1::zeros(w),
            })
            .collect();
        let out_w = gaussian(w, config.num_classes, (1.0 / w as f64).sqrt(), &mut rng);
        Ok(DenoiserParams {
            config,
            in_w,
            in_b: Array1::zeros(w),
            emb_w,
            emb_b: Array1::zeros(w),
            layers,
            out_w,
            out_b: Array1::zeros(config.num_classes),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|t| t.fill(0.0));
        z
    }

    /// Visits every tensor in checkpoint declaration order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&[f64])) {
        f(self.in_w.as_slice().expect("standard layout"));
        f(self.in_b.as_slice().expect("standard layout"));
        f(self.emb_w.as_slice().expect("standard layout"));
        f(self.emb_b.as_slice().expect("standard layout"));
        for l in &self.layers {
            for k in &l.conv_w {
                f(k.as_slice().expect("standard layout"));
            }
            f(l.conv_b.as_slice().expect("standard layout"));
            f(l.mix_w.as_slice().expect("standard layout"));
            f(l.mix_b.as_slice().expect("standard layout"));
        }
        f(self.out_w.as_slice().expect("standard layout"));
        f(self.out_b.as_slice().expect("standard layout"));
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.in_w.as_slice_mut().expect("standard layout"));
        f(self.in_b.as_slice_mut().expect("standard layout"));
        f(self.emb_w.as_slice_mut().expect("standard layout"));
        f(self.emb_b.as_slice_mut().expect("standard layout"));
        for l in &mut self.layers {
            for k in &mut l.conv_w {
                f(k.as_slice_mut().expect("standard layout"));
            }
            f(l.conv_b.as_slice_mut().expect("standard layout"));
            f(l.mix_w.as_slice_mut().expect("standard layout"));
            f(l.mix_b.as_slice_mut().expect("standard layout"));
        }
        f(self.out_w.as_slice_mut().expect("standard layout"));
        f(self.out_b.as_slice_mut().expect("standard layout"));
    }

    /// Applies `f(param, other)` elementwise across two identically shaped sets.
    pub fn zip_mut_with(&mut self, other: &DenoiserParams, mut f: impl FnMut(&mut f64, f64)) {
        let mut flat: Vec<f64> = Vec::with_capacity(self.parameter_count());
        other.for_each_tensor(|t| flat.extend_from_slice(t));
        let mut i = 0;
        self.for_each_tensor_mut(|t| {
            for v in t.iter_mut() {
                f(v, flat[i]);
                i += 1;
            }
        });
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn squared_norm(&self) -> f64 {
        let mut n = 0.0;
        self.for_each_tensor(|t| n += t.iter().map(|v| v * v).sum::<f64>());
        n
    }
}

// Transposed products may come back column-major; flat tensor visits need row-major.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Sinusoidal embedding of the diffusion step.
pub fn step_embedding(step: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = step as f64 * freq;
        e[i] = arg.sin();
        e[half + i] = arg.cos();
    }
    e
}

/// Activations kept for the backward pass.
pub(crate) struct ForwardCache {
    input: Array2<f64>,
    embedding: Array1<f64>,
    conv_in: Vec<Array2<f64>>,
    pre_act: Vec<Array2<f64>>,
    hidden_last: Array2<f64>,
    pub(crate) probs: Array2<f64>,
}

/// `out += shift(x, offset) * w`, where row t of the shifted input is row
/// `t + offset` of `x` (zero outside the sequence).
fn shifted_matmul_acc(out: &mut Array2<f64>, x: &Array2<f64>, w: &Array2<f64>, offset: isize) {
    let t = x.nrows() as isize;
    let lo = (-offset).max(0);
    let hi = (t - offset).min(t);
    if lo >= hi {
        return;
    }
    let src = x.slice(s![(lo + offset)..(hi + offset), ..]);
    let mut dst = out.slice_mut(s![lo..hi, ..]);
    general_mat_mul(1.0, &src, w, 1.0, &mut dst);
}

fn add_row(m: &mut Array2<f64>, row: &Array1<f64>) {
    m.rows_mut().into_iter().for_each(|mut r| r += row);
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

fn check_shapes(x: &LabelSequence, cond: &ArrayView2<f64>, cfg: &DenoiserConfig) -> Result<()> {
    if x.classes() != cfg.num_classes {
        return Err(Error::Shape(format!(
            "label state has {} classes, model expects {}",
            x.classes(),
            cfg.num_classes
        )));
    }
    if cond.ncols() != cfg.feature_dim || cond.nrows() != x.frames() {
        return Err(Error::Shape(format!(
            "conditioning is {}x{}, expected {}x{}",
            cond.nrows(),
            cond.ncols(),
            x.frames(),
            cfg.feature_dim
        )));
    }
    Ok(())
}

pub(crate) fn forward(
    x: &LabelSequence,
    step: usize,
    cond: &ArrayView2<f64>,
    params: &DenoiserParams,
) -> Result<ForwardCache> {
    let cfg = &params.config;
    check_shapes(x, cond, cfg)?;
    let frames = x.frames();
    let mut input = Array2::zeros((frames, cfg.num_classes + cfg.feature_dim));
    input.slice_mut(s![.., ..cfg.num_classes]).assign(&x.values);
    input.slice_mut(s![.., cfg.num_classes..]).assign(cond);

    let mut h = input.dot(&params.in_w);
    add_row(&mut h, &params.in_b);
    let embedding = step_embedding(step, cfg.width);
    let step_bias = embedding.dot(&params.emb_w) + &params.emb_b;

    let mut conv_in = Vec::with_capacity(cfg.layers);
    let mut pre_act = Vec::with_capacity(cfg.layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let d = DenoiserConfig::dilation(l) as isize;
        let mut u = h.clone();
        add_row(&mut u, &step_bias);
        let mut a = Array2::zeros((frames, cfg.width));
        for (k, w) in layer.conv_w.iter().enumerate() {
            shifted_matmul_acc(&mut a, &u, w, (k as isize - 1) * d);
        }
        add_row(&mut a, &layer.conv_b);
        let r = a.mapv(|v| v.max(0.0));
        general_mat_mul(1.0, &r, &layer.mix_w, 1.0, &mut h);
        add_row(&mut h, &layer.mix_b);
        conv_in.push(u);
        pre_act.push(a);
    }
    let mut logits = h.dot(&params.out_w);
    add_row(&mut logits, &params.out_b);
    let probs = softmax_rows(&logits);
    Ok(ForwardCache {
        input,
        embedding,
        conv_in,
        pre_act,
        hidden_last: h,
        probs,
    })
}

/// Back-propagates `dloss/dprobs` through the network.
pub(crate) fn backward(cache: &ForwardCache, grad_probs: &Array2<f64>, params: &DenoiserParams) -> DenoiserParams {
    let mut grads = params.zeros_like();
    let p = &cache.probs;

    // Softmax Jacobian: dz = p * (g - <g, p>).
    let mut dlogits = grad_probs.clone();
    Zip::from(dlogits.rows_mut()).and(p.rows()).for_each(|mut g, pr| {
        let dot = g.dot(&pr);
        Zip::from(&mut g).and(&pr).for_each(|gi, &pi| *gi = pi * (*gi - dot));
    });

    grads.out_w = standard(cache.hidden_last.t().dot(&dlogits));
    grads.out_b = dlogits.sum_axis(Axis(0));
    let mut dh = dlogits.dot(&params.out_w.t());

    let mut dstep = Array1::zeros(params.config.width);
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let a = &cache.pre_act[l];
        let u = &cache.conv_in[l];
        let d = DenoiserConfig::dilation(l) as isize;
        let r = a.mapv(|v| v.max(0.0));

        let g = &mut grads.layers[l];
        g.mix_w = standard(r.t().dot(&dh));
        g.mix_b = dh.sum_axis(Axis(0));
        let mut da = dh.dot(&layer.mix_w.t());
        Zip::from(&mut da).and(a).for_each(|g, &av| {
            if av <= 0.0 {
                *g = 0.0;
            }
        });
        g.conv_b = da.sum_axis(Axis(0));

        let frames = u.nrows() as isize;
        let mut du = Array2::zeros(u.raw_dim());
        for (k, w) in layer.conv_w.iter().enumerate() {
            let offset = (k as isize - 1) * d;
            let lo = (-offset).max(0);
            let hi = (frames - offset).min(frames);
            if lo >= hi {
                continue;
            }
            let src = u.slice(s![(lo + offset)..(hi + offset), ..]);
            let dst_grad = da.slice(s![lo..hi, ..]);
            general_mat_mul(1.0, &src.t(), &dst_grad, 1.0, &mut g.conv_w[k]);
            let mut du_slice = du.slice_mut(s![(lo + offset)..(hi + offset), ..]);
            general_mat_mul(1.0, &dst_grad, &w.t(), 1.0, &mut du_slice);
        }
        dstep += &du.sum_axis(Axis(0));
        dh += &du;
    }

    grads.emb_b = dstep.clone();
    grads.emb_w = standard(
        cache
            .embedding
            .view()
            .insert_axis(Axis(1))
            .dot(&dstep.view().insert_axis(Axis(0))),
    );
    grads.in_w = standard(cache.input.t().dot(&dh));
    grads.in_b = dh.sum_axis(Axis(0));
    grads
}

/// Predicts per-frame class probabilities of the clean labels.
pub fn denoise(
    x: &LabelSequence,
    step: usize,
    cond: &ArrayView2<f64>,
    params: &DenoiserParams,
) -> Result<LabelSequence> {
    let cache = forward(x, step, cond, params)?;
    Ok(LabelSequence {
        values: cache.probs,
        space: LabelSpace::Simplex,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ActionLabel;

    fn tiny() -> (DenoiserParams, LabelSequence, Array2<f64>) {
        let cfg = DenoiserConfig {
            num_classes: 2,
            feature_dim: 3,
            layers: 2,
            width: 4,
        };
        let params = DenoiserParams::init(cfg, RngSeed(1)).unwrap();
        let labels: Vec<ActionLabel> = [0, 0, 1, 1, 1, 0].iter().map(|&c| ActionLabel(c)).collect();
        let x = LabelSequence::scaled_one_hot(&labels, 2, 1.0);
        let mut rng = RngSeed(2).rng();
        let cond = Array2::from_shape_simple_fn((6, 3), || rng.sample::<f64, _>(StandardNormal));
        (params, x, cond)
    }

    #[test]
    fn deterministic_and_normalized() {
        let (params, x, cond) = tiny();
        let a = denoise(&x, 17, &cond.view(), &params).unwrap();
        let b = denoise(&x, 17, &cond.view(), &params).unwrap();
        assert_eq!(a, b);
        a.check_simplex(1e-9).unwrap();
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (params, x, _) = tiny();
        let bad = Array2::zeros((6, 5));
        assert!(matches!(denoise(&x, 1, &bad.view(), &params), Err(Error::Shape(_))));
    }

    #[test]
    fn dilation_cycles_every_eight_layers() {
        let d: Vec<usize> = (0..10).map(DenoiserConfig::dilation).collect();
        assert_eq!(d, vec![1, 2, 4, 8, 16, 32, 64, 128, 1, 2]);
    }

    #[test]
    fn step_changes_output() {
        let (params, x, cond) = tiny();
        let a = denoise(&x, 1, &cond.view(), &params).unwrap();
        let b = denoise(&x, 900, &cond.view(), &params).unwrap();
        assert_ne!(a, b);
    }
}
