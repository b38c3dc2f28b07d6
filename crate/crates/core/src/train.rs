//! Fitting a single model: losses, analytic reverse-mode gradients, Adam
//! with cosine annealing, hard-sample mining and grid initialization.

use crate::color::{srgb_to_lab, srgb_to_lab_with_jacobian, Lab, Rgb, HUE_EPS};
use crate::eval::{evaluate_pairs, EvalReport};
use crate::glut::{
    back_substitute, forward_substitute, sigmoid, softplus, softplus_inverse, GlutModel,
    ParamLayout, DEFAULT_EPSILON, IDENTITY3, LOG_NORM_3D,
};
use crate::lut_io::{build_split, ColorPairSet, CubeLut};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Stabilizer inside the opacity entropy logarithms.
pub const ENTROPY_EPS: f64 = 1e-6;

/// Initial isotropic standard deviation of every primitive.
pub const INIT_SIGMA: f64 = 0.15;

/// Initial opacity logit (opacity ≈ 0.9975).
pub const INIT_OPACITY_RAW: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningSchedule {
    pub start_epoch: usize,
    pub end_epoch: usize,
    pub start_ratio: f64,
    pub end_ratio: f64,
}

impl Default for MiningSchedule {
    fn default() -> Self {
        MiningSchedule {
            start_epoch: 5,
            end_epoch: 20,
            start_ratio: 0.10,
            end_ratio: 0.40,
        }
    }
}

impl MiningSchedule {
    pub const DISABLED: MiningSchedule = MiningSchedule {
        start_epoch: usize::MAX - 1,
        end_epoch: usize::MAX,
        start_ratio: 0.0,
        end_ratio: 0.0,
    };

    /// Fraction of each batch drawn from the hardest samples at `epoch`:
    /// zero before `start_epoch`, linear up to `end_ratio` at `end_epoch`,
    /// constant afterwards.
    pub fn ratio(&self, epoch: f64) -> f64 {
        let (s, e) = (self.start_epoch as f64, self.end_epoch as f64);
        if epoch < s {
            0.0
        } else if epoch >= e {
            self.end_ratio
        } else {
            self.start_ratio + (self.end_ratio - self.start_ratio) * (epoch - s) / (e - s)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lambda_hc: f64,
    pub lambda_sparse: f64,
    pub mining: MiningSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 1024,
            base_lr: 1e-3,
            lambda_hc: 10.0,
            lambda_sparse: 0.001,
            mining: MiningSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.lambda_hc < 0.0 || self.lambda_sparse < 0.0 {
            return bad("loss weights must be non-negative");
        }
        let m = &self.mining;
        if !(0.0..=1.0).contains(&m.start_ratio) || !(0.0..=1.0).contains(&m.end_ratio) {
            return bad("mining ratios must lie in [0, 1]");
        }
        if m.start_epoch >= m.end_epoch {
            return bad("mining start epoch must precede end epoch");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("no training samples")]
    EmptyData,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient component {index}")]
    NonFiniteGradient { index: usize },
}

/// ℓ1 reconstruction loss.
pub fn loss_rec(pred: Rgb, target: Rgb) -> f64 {
    (pred.r - target.r).abs() + (pred.g - target.g).abs() + (pred.b - target.b).abs()
}

/// Target-chroma-weighted cosine distance between hue vectors in Lab.
pub fn loss_hc(pred: Rgb, target: Rgb) -> f64 {
    let t = srgb_to_lab(target);
    hue_chroma(srgb_to_lab(pred), t.chroma(), t.hue_vector())
}

fn hue_chroma(pred: Lab, chroma: f64, hue: [f64; 2]) -> f64 {
    let h = pred.hue_vector();
    chroma * (1.0 - (h[0] * hue[0] + h[1] * hue[1]))
}

/// Mean binary entropy of the opacities.
pub fn reg_sparse(model: &GlutModel) -> f64 {
    let lay = model.layout();
    let raw = &model.params()[lay.opacity()..lay.opacity() + model.len()];
    let e = ENTROPY_EPS;
    -raw.iter()
        .map(|&q| {
            let o = sigmoid(q);
            o * (o + e).ln() + (1.0 - o) * (1.0 - o + e).ln()
        })
        .sum::<f64>()
        / model.len() as f64
}

/// `mean(L_rec + λ_hc L_hc) + λ_sparse R_sparse` over the batch.
pub fn total_loss(model: &GlutModel, batch: &ColorPairSet, cfg: &TrainConfig) -> f64 {
    assert!(!batch.is_empty(), "empty batch");
    let prep = model.prepare();
    let per: f64 = batch
        .inputs
        .iter()
        .zip(&batch.targets)
        .map(|(&x, &y)| {
            let p = prep.evaluate(x);
            let mut l = loss_rec(p, y);
            if cfg.lambda_hc != 0.0 {
                l += cfg.lambda_hc * loss_hc(p, y);
            }
            l
        })
        .sum();
    let mut loss = per / batch.len() as f64;
    if cfg.lambda_sparse != 0.0 {
        loss += cfg.lambda_sparse * reg_sparse(model);
    }
    loss
}

/// Precomputed Lab chroma and hue of each target.
#[derive(Clone, Debug, Default)]
pub struct TargetLab {
    pub chroma: Vec<f64>,
    pub hue: Vec<[f64; 2]>,
}

impl TargetLab {
    pub fn new(targets: &[Rgb]) -> Self {
        let (chroma, hue) = targets
            .par_iter()
            .map(|&t| {
                let lab = srgb_to_lab(t);
                (lab.chroma(), lab.hue_vector())
            })
            .unzip();
        TargetLab { chroma, hue }
    }
}

/// Per-model quantities shared by every sample of a gradient pass.
pub(crate) struct GradCache {
    lay: ParamLayout,
    means: Vec<[f64; 3]>,
    chol: Vec<[f64; 6]>,
    diag_slope: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    log_coef: Vec<f64>,
    affine: Vec<[f64; 12]>,
    global: [f64; 12],
    epsilon: f64,
}

impl GradCache {
    pub(crate) fn new(model: &GlutModel) -> Self {
        let n = model.len();
        let mut c = GradCache {
            lay: model.layout(),
            means: Vec::with_capacity(n),
            chol: Vec::with_capacity(n),
            diag_slope: Vec::with_capacity(n),
            opacity: Vec::with_capacity(n),
            log_coef: Vec::with_capacity(n),
            affine: Vec::with_capacity(n),
            global: [0.0; 12],
            epsilon: model.epsilon,
        };
        for p in model.primitives() {
            let r = p.chol_raw;
            let l = [softplus(r[0]), r[3], softplus(r[1]), r[4], r[5], softplus(r[2])];
            let o = sigmoid(p.opacity_raw);
            c.means.push(p.mean);
            c.chol.push(l);
            c.diag_slope.push([sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2])]);
            c.opacity.push(o);
            c.log_coef.push(o.ln() - LOG_NORM_3D - (l[0] * l[2] * l[5]).ln());
            let mut a = [0.0; 12];
            a[..9].copy_from_slice(&p.local_matrix);
            a[9..].copy_from_slice(&p.local_bias);
            c.affine.push(a);
        }
        c.global[..9].copy_from_slice(&model.global_matrix());
        c.global[9..].copy_from_slice(&model.global_bias());
        c
    }
}

#[derive(Default)]
pub(crate) struct SampleScratch {
    z: Vec<[f64; 3]>,
    t: Vec<f64>,
    w: Vec<f64>,
    f: Vec<[f64; 3]>,
}

#[inline]
fn affine(a: &[f64; 12], x: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * x[0] + a[1] * x[1] + a[2] * x[2] + a[9],
        a[3] * x[0] + a[4] * x[1] + a[5] * x[2] + a[10],
        a[6] * x[0] + a[7] * x[1] + a[8] * x[2] + a[11],
    ]
}

/// Forward and backward pass for one sample. Adds `scale · ∂ℓ/∂θ` into
/// `grad` and returns the sample loss `ℓ = L_rec + λ_hc L_hc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_sample(
    c: &GradCache,
    x: Rgb,
    y: Rgb,
    target_chroma: f64,
    target_hue: [f64; 2],
    lambda_hc: f64,
    scale: f64,
    grad: &mut [f64],
    s: &mut SampleScratch,
) -> f64 {
    let n = c.means.len();
    let xa = x.to_array();
    let ya = y.to_array();
    s.z.clear();
    s.t.clear();
    s.w.clear();
    s.f.clear();

    let mut top = f64::NEG_INFINITY;
    for i in 0..n {
        let m = &c.means[i];
        let z = forward_substitute(&c.chol[i], [xa[0] - m[0], xa[1] - m[1], xa[2] - m[2]]);
        let t = c.log_coef[i] - 0.5 * (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]);
        top = top.max(t);
        s.z.push(z);
        s.t.push(t);
    }
    let mut total = 0.0;
    for &t in &s.t {
        let e = (t - top).exp();
        total += e;
        s.w.push(e);
    }
    let denom = total + c.epsilon * (-top).exp();
    let mut pre = affine(&c.global, &xa);
    for i in 0..n {
        let w = s.w[i] / denom;
        s.w[i] = w;
        let f = affine(&c.affine[i], &xa);
        for k in 0..3 {
            pre[k] += w * f[k];
        }
        s.f.push(f);
    }
    let out = [pre[0].clamp(0.0, 1.0), pre[1].clamp(0.0, 1.0), pre[2].clamp(0.0, 1.0)];

    let mut loss = 0.0;
    let mut g_out = [0.0; 3];
    for k in 0..3 {
        let d = out[k] - ya[k];
        loss += d.abs();
        g_out[k] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    if lambda_hc != 0.0 && target_chroma > 0.0 {
        let (lab, jac) = srgb_to_lab_with_jacobian(Rgb::from_array(out));
        let norm = (lab.a * lab.a + lab.b * lab.b + HUE_EPS).sqrt();
        let dot = lab.a * target_hue[0] + lab.b * target_hue[1];
        loss += lambda_hc * target_chroma * (1.0 - dot / norm);
        let n3 = norm * norm * norm;
        let da = -target_chroma * (target_hue[0] / norm - dot * lab.a / n3);
        let db = -target_chroma * (target_hue[1] / norm - dot * lab.b / n3);
        for k in 0..3 {
            g_out[k] += lambda_hc * (da * jac[1][k] + db * jac[2][k]);
        }
    }

    // Clamp passes gradient inside [0, 1] only.
    let mut g_pre = [0.0; 3];
    for k in 0..3 {
        if (0.0..=1.0).contains(&pre[k]) {
            g_pre[k] = scale * g_out[k];
        }
    }
    if g_pre == [0.0; 3] {
        return loss;
    }

    let lay = c.lay;
    let gm = lay.global_matrix();
    for r in 0..3 {
        for col in 0..3 {
            grad[gm + 3 * r + col] += g_pre[r] * xa[col];
        }
        grad[lay.global_bias() + r] += g_pre[r];
    }

    let mut g_bar = 0.0;
    for i in 0..n {
        let w = s.w[i];
        let f = s.f[i];
        let gw = g_pre[0] * f[0] + g_pre[1] * f[1] + g_pre[2] * f[2];
        // reuse t as storage for ∂ℓ/∂w_i
        s.t[i] = gw;
        g_bar += w * gw;
        if w == 0.0 {
            continue;
        }
        let mo = lay.local_matrix() + 9 * i;
        let bo = lay.local_bias() + 3 * i;
        for r in 0..3 {
            let gr = w * g_pre[r];
            grad[bo + r] += gr;
            for col in 0..3 {
                grad[mo + 3 * r + col] += gr * xa[col];
            }
        }
    }

    for i in 0..n {
        let w = s.w[i];
        if w == 0.0 {
            continue;
        }
        // ∂ℓ/∂ln(p_i o_i)
        let g_log = w * (s.t[i] - g_bar);
        if g_log == 0.0 {
            continue;
        }
        grad[lay.opacity() + i] += g_log * (1.0 - c.opacity[i]);
        let l = &c.chol[i];
        let z = s.z[i];
        let v = back_substitute(l, z);
        let mo = lay.means() + 3 * i;
        for k in 0..3 {
            grad[mo + k] += g_log * v[k];
        }
        let co = lay.chol() + 6 * i;
        let slope = &c.diag_slope[i];
        grad[co] += g_log * (v[0] * z[0] - 1.0 / l[0]) * slope[0];
        grad[co + 1] += g_log * (v[1] * z[1] - 1.0 / l[2]) * slope[1];
        grad[co + 2] += g_log * (v[2] * z[2] - 1.0 / l[5]) * slope[2];
        grad[co + 3] += g_log * v[1] * z[0];
        grad[co + 4] += g_log * v[2] * z[0];
        grad[co + 5] += g_log * v[2] * z[1];
    }
    loss
}

/// Adds `λ_sparse · ∂R_sparse/∂θ · weight` into `grad` and returns `R_sparse`.
pub(crate) fn accumulate_sparsity(model: &GlutModel, lambda: f64, weight: f64, grad: &mut [f64]) -> f64 {
    let lay = model.layout();
    let n = model.len();
    let e = ENTROPY_EPS;
    let mut r = 0.0;
    for i in 0..n {
        let o = sigmoid(model.params()[lay.opacity() + i]);
        r -= o * (o + e).ln() + (1.0 - o) * (1.0 - o + e).ln();
        let d_o = -((o + e).ln() + o / (o + e) - (1.0 - o + e).ln() - (1.0 - o) / (1.0 - o + e)) / n as f64;
        grad[lay.opacity() + i] += lambda * weight * d_o * o * (1.0 - o);
    }
    r / n as f64
}

/// Samples per reduction chunk; fixed so results do not depend on the
/// number of worker threads.
const REDUCE_CHUNK: usize = 128;

/// Sum of per-sample losses and `scale`-weighted gradients over `idx`.
pub(crate) fn batch_gradient(
    cache: &GradCache,
    data: &ColorPairSet,
    labs: &TargetLab,
    idx: &[usize],
    lambda_hc: f64,
    scale: f64,
    grad_len: usize,
) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; grad_len];
            let mut s = SampleScratch::default();
            let mut loss = 0.0;
            for &i in chunk {
                loss += accumulate_sample(
                    cache,
                    data.inputs[i],
                    data.targets[i],
                    labs.chroma[i],
                    labs.hue[i],
                    lambda_hc,
                    scale,
                    &mut g,
                    &mut s,
                );
            }
            (loss, g)
        })
        .collect();
    let mut grad = vec![0.0; grad_len];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    (loss, grad)
}

/// Gradient of a parameter bundle, in the model's flat layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub grads: Vec<f64>,
}

/// Exact gradient of [`total_loss`] with respect to every raw parameter.
pub fn backward(model: &GlutModel, batch: &ColorPairSet, cfg: &TrainConfig) -> Result<GradientBundle, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let labs = TargetLab::new(&batch.targets);
    let idx: Vec<usize> = (0..batch.len()).collect();
    backward_indexed(model, batch, &labs, &idx, cfg)
}

pub(crate) fn backward_indexed(
    model: &GlutModel,
    data: &ColorPairSet,
    labs: &TargetLab,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<GradientBundle, TrainError> {
    let cache = GradCache::new(model);
    let scale = 1.0 / idx.len() as f64;
    let (loss_sum, mut grads) = batch_gradient(&cache, data, labs, idx, cfg.lambda_hc, scale, model.param_count());
    let mut loss = loss_sum * scale;
    if cfg.lambda_sparse != 0.0 {
        loss += cfg.lambda_sparse * accumulate_sparsity(model, cfg.lambda_sparse, 1.0, &mut grads);
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index });
    }
    Ok(GradientBundle { loss, grads })
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8 and bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient size mismatch");
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

pub fn adam_step(state: &mut Adam, params: &mut [f64], grads: &[f64], lr: f64) {
    state.step(params, grads, lr)
}

/// Cosine annealing from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let p = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Side length of the smallest regular grid with at least `n` points.
pub(crate) fn init_grid_side(n: usize) -> usize {
    let mut g = 1;
    while g * g * g < n {
        g += 1;
    }
    g
}

/// Raw parameters of the initial model: means on the first `n` points of
/// a regular grid over `[0,1]³` (red fastest), isotropic σ = 0.15, opacity
/// logit 6, identity local transforms, zero global transform.
pub fn init_params(n: usize) -> Vec<f64> {
    let lay = ParamLayout::new(n);
    let mut p = vec![0.0; lay.len()];
    let side = init_grid_side(n);
    let coord = |k: usize| if side == 1 { 0.5 } else { k as f64 / (side - 1) as f64 };
    let d = softplus_inverse(INIT_SIGMA);
    for i in 0..n {
        let (r, g, b) = (i % side, (i / side) % side, i / (side * side));
        p[lay.means() + 3 * i..][..3].copy_from_slice(&[coord(r), coord(g), coord(b)]);
        p[lay.chol() + 6 * i..][..6].copy_from_slice(&[d, d, d, 0.0, 0.0, 0.0]);
        p[lay.opacity() + i] = INIT_OPACITY_RAW;
        p[lay.local_matrix() + 9 * i..][..9].copy_from_slice(&IDENTITY3);
    }
    p
}

/// The initial model for `n` primitives. Initialization is deterministic;
/// `seed` is accepted for interface symmetry with randomized schemes.
pub fn init_glut(n: usize, _seed: u64) -> GlutModel {
    assert!(n >= 1, "need at least one primitive");
    GlutModel::from_params(n, init_params(n), DEFAULT_EPSILON).expect("valid init")
}

/// Splits `n` sample indices into batches for one epoch.
///
/// Every epoch draws a fresh uniform permutation. When the mining ratio
/// `r` is positive, each batch takes `round(r·b)` samples from the
/// hardest `⌈r·n⌉` samples (by `errors`, cycling through a shuffled copy)
/// and the rest from the permutation. With `r = 0` the batches are plain
/// consecutive chunks of the permutation.
pub fn mine_batches(
    errors: Option<&[f64]>,
    n: usize,
    epoch: usize,
    schedule: &MiningSchedule,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let r = schedule.ratio(epoch as f64);
    let errors = match errors {
        Some(e) if r > 0.0 => e,
        _ => return perm.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    };
    assert_eq!(errors.len(), n, "error vector must cover every sample");
    let pool_len = ((r * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let by_err = |a: &usize, b: &usize| errors[*b].total_cmp(&errors[*a]).then(a.cmp(b));
    if pool_len < n {
        order.select_nth_unstable_by(pool_len - 1, by_err);
    }
    let mut hard = order[..pool_len].to_vec();
    hard.sort_unstable();
    hard.shuffle(rng);

    let batches = n.div_ceil(batch_size);
    let mut out = Vec::with_capacity(batches);
    let (mut hard_cursor, mut uni_cursor) = (0, 0);
    for j in 0..batches {
        let size = batch_size.min(n - j * batch_size);
        let n_hard = ((r * size as f64).round() as usize).min(size);
        let mut batch = Vec::with_capacity(size);
        for _ in 0..n_hard {
            batch.push(hard[hard_cursor % hard.len()]);
            hard_cursor += 1;
        }
        batch.extend_from_slice(&perm[uni_cursor..uni_cursor + size - n_hard]);
        uni_cursor += size - n_hard;
        out.push(batch);
    }
    out
}

/// Training and held-out samples for a fit.
#[derive(Clone, Debug)]
pub struct FitData {
    pub train: ColorPairSet,
    pub holdout: ColorPairSet,
}

/// Default cap on held-out samples evaluated per epoch.
pub const DEFAULT_HOLDOUT_MAX: usize = 1 << 16;

impl FitData {
    /// Samples a mapping on the split lattice: training colors are the
    /// `q_train³` stride-2 lattice, held-out colors a strided subset (at
    /// most `holdout_max`) of the remaining lattice colors. Targets are
    /// clamped to `[0,1]`.
    pub fn from_mapping(q_train: usize, holdout_max: usize, f: impl Fn(Rgb) -> Rgb + Sync) -> Self {
        let split = build_split(q_train);
        let train_in: Vec<Rgb> = split.train_colors().collect();
        let hold_in = split.test_subset(holdout_max);
        let map = |v: &Vec<Rgb>| -> Vec<Rgb> { v.par_iter().map(|&c| f(c).clamp01()).collect() };
        let (train_out, hold_out) = (map(&train_in), map(&hold_in));
        FitData {
            train: ColorPairSet::new(train_in, train_out),
            holdout: ColorPairSet::new(hold_in, hold_out),
        }
    }

    /// Densifies a grid LUT onto the split lattice by trilinear sampling.
    pub fn from_cube(lut: &CubeLut, q_train: usize, holdout_max: usize) -> Self {
        FitData::from_mapping(q_train, holdout_max, |c| lut.sample_normalized(c))
    }

    /// Uses explicit pairs; every `holdout_every`-th pair is held out.
    pub fn from_pairs(pairs: &ColorPairSet, holdout_every: usize) -> Self {
        let k = holdout_every.max(2);
        let (mut train, mut holdout) = (ColorPairSet::default(), ColorPairSet::default());
        for (i, (&x, &y)) in pairs.inputs.iter().zip(&pairs.targets).enumerate() {
            let dst = if i % k == k - 1 { &mut holdout } else { &mut train };
            dst.inputs.push(x.clamp01());
            dst.targets.push(y.clamp01());
        }
        FitData { train, holdout }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub holdout_psnr: f64,
    pub holdout_de76: f64,
    pub holdout_de00: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: GlutModel,
    pub log: Vec<EpochLog>,
}

/// Per-sample ℓ1 errors of the clamped model output.
pub fn sample_errors(model: &GlutModel, data: &ColorPairSet) -> Vec<f64> {
    let prep = model.prepare();
    data.inputs
        .par_iter()
        .zip(&data.targets)
        .map(|(&x, &y)| loss_rec(prep.evaluate(x), y))
        .collect()
}

pub fn holdout_report(model: &GlutModel, holdout: &ColorPairSet) -> EvalReport {
    let prep = model.prepare();
    let start = Instant::now();
    let pred: Vec<Rgb> = holdout.inputs.par_iter().map(|&x| prep.evaluate(x)).collect();
    let mut r = evaluate_pairs(&pred, &holdout.targets);
    r.wall_ms = start.elapsed().as_millis() as u64;
    r
}

/// Fits a model with `n` primitives. The returned model is rounded to
/// `f32` precision (the model file precision); held-out metrics in the
/// log are computed on the rounded parameters.
pub fn fit_glut(
    data: &FitData,
    n: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if n == 0 {
        return Err(TrainError::InvalidConfig("need at least one primitive".into()));
    }
    let mut model = init_glut(n, cfg.seed);
    let labs = TargetLab::new(&data.train.targets);
    let mut adam = Adam::new(model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = data.train.len();
    let steps_per_epoch = count.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let errors = (cfg.mining.ratio(epoch as f64) > 0.0).then(|| sample_errors(&model, &data.train));
        let batches = mine_batches(errors.as_deref(), count, epoch, &cfg.mining, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.base_lr;
        for batch in &batches {
            lr = cosine_lr(step, total_steps, cfg.base_lr);
            let bundle = backward_indexed(&model, &data.train, &labs, batch, cfg).map_err(|e| TrainError::Divergence {
                epoch,
                step,
                detail: e.to_string(),
            })?;
            if !bundle.loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    step,
                    detail: format!("loss is {}", bundle.loss),
                });
            }
            loss_sum += bundle.loss;
            adam.step(model.params_mut(), &bundle.grads, lr);
            step += 1;
        }
        if let Some(i) = model.params().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::Divergence {
                epoch,
                step,
                detail: format!("parameter {i} became non-finite"),
            });
        }
        let rounded = model.quantized_f32();
        let report = if data.holdout.is_empty() {
            holdout_report(&rounded, &data.train)
        } else {
            holdout_report(&rounded, &data.holdout)
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches.len() as f64,
            holdout_psnr: report.psnr,
            holdout_de76: report.delta_e76,
            holdout_de00: report.delta_e00,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(FitOutcome {
        model: model.quantized_f32(),
        log,
    })
}
