//! The Gaussian LUT forward model.
//!
//! A [`GlutModel`] holds `N` Gaussian primitives in color space plus a
//! global affine transform. For an input color `x` each primitive has a
//! normalized density `p_i(x)`, scaled by its opacity `o_i`; the influence
//! weights are `w_i = p_i o_i / (Σ_j p_j o_j + ε)` and the output is
//!
//! ```text
//! f(x) = clamp(Σ_i w_i (M_i x + b_i) + G x + g, 0, 1)
//! ```
//!
//! Raw parameters live in one flat buffer in file order (means, Cholesky
//! factors, opacity logits, local matrices, local biases, global matrix,
//! global bias), so optimizers and the binary format see the same layout.

use crate::color::Rgb;
use crate::lut_io::{CubeLut, Image};
use rayon::prelude::*;

/// Weight-normalization constant.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// `ln (2π)^{3/2}`
pub(crate) const LOG_NORM_3D: f64 = 2.756_815_599_614_018;

/// Per-primitive learnable parameter count.
pub const PARAMS_PER_PRIMITIVE: usize = 22;
/// Global affine parameter count.
pub const GLOBAL_PARAMS: usize = 12;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Offsets of each parameter block in the flat buffer for `n` primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub n: usize,
}

impl ParamLayout {
    pub const fn new(n: usize) -> Self {
        ParamLayout { n }
    }
    pub const fn means(&self) -> usize {
        0
    }
    pub const fn chol(&self) -> usize {
        3 * self.n
    }
    pub const fn opacity(&self) -> usize {
        9 * self.n
    }
    pub const fn local_matrix(&self) -> usize {
        10 * self.n
    }
    pub const fn local_bias(&self) -> usize {
        19 * self.n
    }
    pub const fn global_matrix(&self) -> usize {
        22 * self.n
    }
    pub const fn global_bias(&self) -> usize {
        22 * self.n + 9
    }
    pub const fn len(&self) -> usize {
        22 * self.n + GLOBAL_PARAMS
    }
    pub const fn is_empty(&self) -> bool {
        false
    }
}

/// One primitive's raw parameters.
///
/// `chol_raw = [d0, d1, d2, l10, l20, l21]`: the diagonal of `L` is
/// `softplus(d_k)`, the strictly lower entries are taken as is, and
/// `Σ = L Lᵀ`. Opacity is `sigmoid(opacity_raw)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: [f64; 3],
    pub chol_raw: [f64; 6],
    pub opacity_raw: f64,
    pub local_matrix: [f64; 9],
    pub local_bias: [f64; 3],
}

impl GaussianPrimitive {
    /// Lower-triangular factor as `[l00, l10, l11, l20, l21, l22]`.
    pub fn cholesky(&self) -> [f64; 6] {
        let c = &self.chol_raw;
        [
            softplus(c[0]),
            c[3],
            softplus(c[1]),
            c[4],
            c[5],
            softplus(c[2]),
        ]
    }

    pub fn covariance(&self) -> [[f64; 3]; 3] {
        let [l00, l10, l11, l20, l21, l22] = self.cholesky();
        let l = [[l00, 0.0, 0.0], [l10, l11, 0.0], [l20, l21, l22]];
        let mut s = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] = (0..3).map(|k| l[i][k] * l[j][k]).sum();
            }
        }
        s
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_raw)
    }

    /// Isotropic primitive with identity local transform.
    pub fn isotropic(mean: [f64; 3], sigma: f64, opacity_raw: f64) -> Self {
        let d = softplus_inverse(sigma);
        GaussianPrimitive {
            mean,
            chol_raw: [d, d, d, 0.0, 0.0, 0.0],
            opacity_raw,
            local_matrix: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            local_bias: [0.0; 3],
        }
    }
}

/// Solves `L z = u` by forward substitution; returns `z`.
#[inline]
pub(crate) fn forward_substitute(l: &[f64; 6], u: [f64; 3]) -> [f64; 3] {
    let z0 = u[0] / l[0];
    let z1 = (u[1] - l[1] * z0) / l[2];
    let z2 = (u[2] - l[3] * z0 - l[4] * z1) / l[5];
    [z0, z1, z2]
}

/// Solves `Lᵀ v = z` by back substitution.
#[inline]
pub(crate) fn back_substitute(l: &[f64; 6], z: [f64; 3]) -> [f64; 3] {
    let v2 = z[2] / l[5];
    let v1 = (z[1] - l[4] * v2) / l[2];
    let v0 = (z[0] - l[1] * v1 - l[3] * v2) / l[0];
    [v0, v1, v2]
}

/// Squared Mahalanobis distance `(x−μ)ᵀ Σ⁻¹ (x−μ)` via the Cholesky factor.
pub fn mahalanobis_sq(prim: &GaussianPrimitive, x: Rgb) -> f64 {
    let x = x.to_array();
    let u = [x[0] - prim.mean[0], x[1] - prim.mean[1], x[2] - prim.mean[2]];
    let z = forward_substitute(&prim.cholesky(), u);
    z[0] * z[0] + z[1] * z[1] + z[2] * z[2]
}

/// Normalized trivariate Gaussian density at `x`.
pub fn gaussian_density(prim: &GaussianPrimitive, x: Rgb) -> f64 {
    let l = prim.cholesky();
    let det_sqrt = l[0] * l[2] * l[5];
    (-0.5 * mahalanobis_sq(prim, x)).exp() / ((2.0 * std::f64::consts::PI).powf(1.5) * det_sqrt)
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("a model needs at least one primitive")]
    Empty,
    #[error("parameter buffer has {found} values, expected {expected}")]
    BadLength { expected: usize, found: usize },
    #[error("epsilon must be positive and finite")]
    BadEpsilon,
    #[error("parameter {index} is not finite")]
    NonFinite { index: usize },
}

/// The complete color mapping: `N` primitives and a global affine transform.
#[derive(Clone, Debug, PartialEq)]
pub struct GlutModel {
    n: usize,
    params: Vec<f64>,
    pub epsilon: f64,
}

impl GlutModel {
    /// Builds a model from its flat raw parameter buffer.
    pub fn from_params(n: usize, params: Vec<f64>, epsilon: f64) -> Result<Self, ModelError> {
        if n == 0 {
            return Err(ModelError::Empty);
        }
        let expected = ParamLayout::new(n).len();
        if params.len() != expected {
            return Err(ModelError::BadLength {
                expected,
                found: params.len(),
            });
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(ModelError::BadEpsilon);
        }
        if let Some(index) = params.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { index });
        }
        Ok(GlutModel { n, params, epsilon })
    }

    pub fn from_primitives(
        prims: &[GaussianPrimitive],
        global_matrix: [f64; 9],
        global_bias: [f64; 3],
        epsilon: f64,
    ) -> Result<Self, ModelError> {
        let n = prims.len();
        if n == 0 {
            return Err(ModelError::Empty);
        }
        let lay = ParamLayout::new(n);
        let mut params = vec![0.0; lay.len()];
        for (i, p) in prims.iter().enumerate() {
            params[lay.means() + 3 * i..][..3].copy_from_slice(&p.mean);
            params[lay.chol() + 6 * i..][..6].copy_from_slice(&p.chol_raw);
            params[lay.opacity() + i] = p.opacity_raw;
            params[lay.local_matrix() + 9 * i..][..9].copy_from_slice(&p.local_matrix);
            params[lay.local_bias() + 3 * i..][..3].copy_from_slice(&p.local_bias);
        }
        params[lay.global_matrix()..][..9].copy_from_slice(&global_matrix);
        params[lay.global_bias()..][..3].copy_from_slice(&global_bias);
        GlutModel::from_params(n, params, epsilon)
    }

    /// `n` primitives that contribute nothing, with `G = I`, `g = 0`:
    /// the identity mapping.
    pub fn identity(n: usize) -> Self {
        let prims: Vec<_> = (0..n)
            .map(|i| {
                let mut p = GaussianPrimitive::isotropic([i as f64 / n as f64; 3], 0.15, 0.0);
                p.local_matrix = [0.0; 9];
                p
            })
            .collect();
        GlutModel::from_primitives(&prims, IDENTITY3, [0.0; 3], DEFAULT_EPSILON)
            .expect("identity model is valid")
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.n)
    }

    /// Number of learnable parameters, `22N + 12`.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn primitive(&self, i: usize) -> GaussianPrimitive {
        let lay = self.layout();
        let p = &self.params;
        GaussianPrimitive {
            mean: p[lay.means() + 3 * i..][..3].try_into().unwrap(),
            chol_raw: p[lay.chol() + 6 * i..][..6].try_into().unwrap(),
            opacity_raw: p[lay.opacity() + i],
            local_matrix: p[lay.local_matrix() + 9 * i..][..9].try_into().unwrap(),
            local_bias: p[lay.local_bias() + 3 * i..][..3].try_into().unwrap(),
        }
    }

    pub fn primitives(&self) -> impl Iterator<Item = GaussianPrimitive> + '_ {
        (0..self.n).map(|i| self.primitive(i))
    }

    pub fn mean(&self, i: usize) -> [f64; 3] {
        self.params[self.layout().means() + 3 * i..][..3].try_into().unwrap()
    }

    pub fn local_bias(&self, i: usize) -> [f64; 3] {
        self.params[self.layout().local_bias() + 3 * i..][..3].try_into().unwrap()
    }

    pub fn set_local_bias(&mut self, i: usize, b: [f64; 3]) {
        let off = self.layout().local_bias() + 3 * i;
        self.params[off..off + 3].copy_from_slice(&b);
    }

    pub fn global_matrix(&self) -> [f64; 9] {
        self.params[self.layout().global_matrix()..][..9].try_into().unwrap()
    }

    pub fn global_bias(&self) -> [f64; 3] {
        self.params[self.layout().global_bias()..][..3].try_into().unwrap()
    }

    /// Reorders primitives; `order[k]` is the old index placed at `k`.
    pub fn permuted(&self, order: &[usize]) -> GlutModel {
        let prims: Vec<_> = order.iter().map(|&i| self.primitive(i)).collect();
        GlutModel::from_primitives(&prims, self.global_matrix(), self.global_bias(), self.epsilon)
            .expect("permutation of a valid model")
    }

    /// Rounds every parameter to `f32`, the precision of the model file.
    pub fn quantized_f32(&self) -> GlutModel {
        GlutModel {
            n: self.n,
            params: self.params.iter().map(|&v| v as f32 as f64).collect(),
            epsilon: self.epsilon as f32 as f64,
        }
    }

    pub fn prepare(&self) -> PreparedGlut {
        PreparedGlut::new(self)
    }

    /// Normalized influence weights at `x`.
    pub fn influence_weights(&self, x: Rgb) -> WeightVector {
        self.prepare().weights(x)
    }

    pub fn evaluate(&self, x: Rgb) -> Rgb {
        self.prepare().evaluate(x)
    }

    /// The mixture value before the final clamp.
    pub fn evaluate_unclamped(&self, x: Rgb) -> Rgb {
        self.prepare().evaluate_unclamped(x)
    }

    pub fn evaluate_sparse(&self, x: Rgb, keep_fraction: f64) -> Rgb {
        self.prepare().evaluate_sparse(x, keep_fraction)
    }
}

pub(crate) const IDENTITY3: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

pub fn influence_weights(model: &GlutModel, x: Rgb) -> WeightVector {
    model.influence_weights(x)
}

pub fn evaluate(model: &GlutModel, x: Rgb) -> Rgb {
    model.evaluate(x)
}

pub fn evaluate_sparse(model: &GlutModel, x: Rgb, keep_fraction: f64) -> Rgb {
    model.evaluate_sparse(x, keep_fraction)
}

/// Per-primitive influence weights at one color.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
}

impl WeightVector {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Evaluation kernel with per-model quantities (Cholesky factors,
/// log-normalizers, opacities) computed once.
#[derive(Clone, Debug)]
pub struct PreparedGlut {
    means: Vec<[f64; 3]>,
    /// `[l00, l10, l11, l20, l21, l22]`
    chol: Vec<[f64; 6]>,
    /// `ln o_i − ln (2π)^{3/2} − ln |L_i|`
    log_coef: Vec<f64>,
    /// Row-major `M_i` followed by `b_i`.
    affine: Vec<[f64; 12]>,
    global: [f64; 12],
    epsilon: f64,
}

impl PreparedGlut {
    pub fn new(model: &GlutModel) -> Self {
        let n = model.len();
        let mut means = Vec::with_capacity(n);
        let mut chol = Vec::with_capacity(n);
        let mut log_coef = Vec::with_capacity(n);
        let mut affine = Vec::with_capacity(n);
        for p in model.primitives() {
            let l = p.cholesky();
            means.push(p.mean);
            chol.push(l);
            let o = p.opacity();
            log_coef.push(o.ln() - LOG_NORM_3D - (l[0] * l[2] * l[5]).ln());
            let mut a = [0.0; 12];
            a[..9].copy_from_slice(&p.local_matrix);
            a[9..].copy_from_slice(&p.local_bias);
            affine.push(a);
        }
        let mut global = [0.0; 12];
        global[..9].copy_from_slice(&model.global_matrix());
        global[9..].copy_from_slice(&model.global_bias());
        PreparedGlut {
            means,
            chol,
            log_coef,
            affine,
            global,
            epsilon: model.epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// `ln(p_i(x) o_i)`
    #[inline]
    fn log_activation(&self, i: usize, x: &[f64; 3]) -> f64 {
        let m = &self.means[i];
        let z = forward_substitute(&self.chol[i], [x[0] - m[0], x[1] - m[1], x[2] - m[2]]);
        self.log_coef[i] - 0.5 * (z[0] * z[0] + z[1] * z[1] + z[2] * z[2])
    }

    #[inline]
    fn affine_apply(a: &[f64; 12], x: &[f64; 3]) -> [f64; 3] {
        [
            a[0] * x[0] + a[1] * x[1] + a[2] * x[2] + a[9],
            a[3] * x[0] + a[4] * x[1] + a[5] * x[2] + a[10],
            a[6] * x[0] + a[7] * x[1] + a[8] * x[2] + a[11],
        ]
    }

    /// Mixture over the primitives in `active`, with the normalization
    /// rescaled by the largest log-activation.
    #[inline]
    fn mixture(&self, x: &[f64; 3], active: impl Iterator<Item = usize> + Clone, scratch: &mut Vec<f64>) -> [f64; 3] {
        scratch.clear();
        let mut top = f64::NEG_INFINITY;
        for i in active.clone() {
            let t = self.log_activation(i, x);
            top = top.max(t);
            scratch.push(t);
        }
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for (i, &t) in active.zip(scratch.iter()) {
            let e = (t - top).exp();
            total += e;
            let f = Self::affine_apply(&self.affine[i], x);
            acc[0] += e * f[0];
            acc[1] += e * f[1];
            acc[2] += e * f[2];
        }
        let denom = total + self.epsilon * (-top).exp();
        let g = Self::affine_apply(&self.global, x);
        [acc[0] / denom + g[0], acc[1] / denom + g[1], acc[2] / denom + g[2]]
    }

    pub fn weights(&self, x: Rgb) -> WeightVector {
        let x = x.to_array();
        let logs: Vec<f64> = (0..self.len()).map(|i| self.log_activation(i, &x)).collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logs.iter().map(|t| (t - top).exp()).collect();
        let denom = e.iter().sum::<f64>() + self.epsilon * (-top).exp();
        WeightVector {
            weights: e.into_iter().map(|v| v / denom).collect(),
        }
    }

    pub fn evaluate_unclamped_with(&self, x: Rgb, scratch: &mut Vec<f64>) -> Rgb {
        Rgb::from_array(self.mixture(&x.to_array(), 0..self.len(), scratch))
    }

    pub fn evaluate_unclamped(&self, x: Rgb) -> Rgb {
        self.evaluate_unclamped_with(x, &mut Vec::with_capacity(self.len()))
    }

    pub fn evaluate_with(&self, x: Rgb, scratch: &mut Vec<f64>) -> Rgb {
        self.evaluate_unclamped_with(x, scratch).clamp01()
    }

    pub fn evaluate(&self, x: Rgb) -> Rgb {
        self.evaluate_with(x, &mut Vec::with_capacity(self.len()))
    }

    /// Number of primitives kept by [`evaluate_sparse`](Self::evaluate_sparse).
    pub fn kept(&self, keep_fraction: f64) -> usize {
        assert!(
            keep_fraction > 0.0 && keep_fraction <= 1.0,
            "keep_fraction must lie in (0, 1]"
        );
        ((keep_fraction * self.len() as f64).ceil() as usize).clamp(1, self.len())
    }

    /// Evaluates with exact densities only for the `⌈keep_fraction·N⌉`
    /// primitives nearest to `x` in Euclidean distance; the rest get zero
    /// weight.
    pub fn evaluate_sparse_with(&self, x: Rgb, keep_fraction: f64, scratch: &mut SparseScratch) -> Rgb {
        let keep = self.kept(keep_fraction);
        if keep == self.len() {
            return self.evaluate_with(x, &mut scratch.logs);
        }
        let xa = x.to_array();
        scratch.ranked.clear();
        for (i, m) in self.means.iter().enumerate() {
            let d = [xa[0] - m[0], xa[1] - m[1], xa[2] - m[2]];
            scratch.ranked.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2], i));
        }
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        scratch.ranked.select_nth_unstable_by(keep - 1, by_dist);
        scratch.active.clear();
        scratch.active.extend(scratch.ranked[..keep].iter().map(|&(_, i)| i));
        scratch.active.sort_unstable();
        let out = self.mixture(&xa, scratch.active.iter().copied(), &mut scratch.logs);
        Rgb::from_array(out).clamp01()
    }

    pub fn evaluate_sparse(&self, x: Rgb, keep_fraction: f64) -> Rgb {
        self.evaluate_sparse_with(x, keep_fraction, &mut SparseScratch::default())
    }
}

#[derive(Default, Debug)]
pub struct SparseScratch {
    ranked: Vec<(f64, usize)>,
    active: Vec<usize>,
    logs: Vec<f64>,
}

/// Per-pixel arithmetic cost model of the evaluation kernel.
///
/// Counts follow [`PreparedGlut`]: per primitive the difference `x − μ`
/// (3), forward substitution with precomputed factors (9) and the squared
/// norm (5), the log-activation `c − d/2` (2), the running max (1), the
/// shifted `exp` (2, one for the subtraction and one for `exp`), the
/// normalizer sum (1), the local affine map (18) and the weighted
/// accumulation (6). Per pixel: global affine (18), normalizer with `ε`
/// (3), the final division and global add (6) and the clamp (6).
/// The sparse path adds a Euclidean scan per primitive (8) and selection
/// comparisons (2 per primitive, average quickselect cost).
pub mod cost {
    pub const PER_PRIMITIVE: u64 = 3 + 9 + 5 + 2 + 1 + 2 + 1 + 18 + 6;
    pub const PER_PIXEL: u64 = 18 + 3 + 6 + 6;
    pub const SCAN_PER_PRIMITIVE: u64 = 8;
    pub const SELECT_PER_PRIMITIVE: u64 = 2;

    pub fn full(n: usize) -> u64 {
        n as u64 * PER_PRIMITIVE + PER_PIXEL
    }

    pub fn sparse(n: usize, kept: usize) -> u64 {
        if kept >= n {
            return full(n);
        }
        n as u64 * (SCAN_PER_PRIMITIVE + SELECT_PER_PRIMITIVE) + kept as u64 * PER_PRIMITIVE + PER_PIXEL
    }
}

/// Applies the model to every pixel using `threads` workers. Output does
/// not depend on the thread count.
pub fn apply_to_image(model: &GlutModel, img: &Image, threads: usize) -> Image {
    apply_prepared(&model.prepare(), img, threads, None)
}

/// As [`apply_to_image`], with optional sparse activation.
pub fn apply_prepared(prep: &PreparedGlut, img: &Image, threads: usize, keep_fraction: Option<f64>) -> Image {
    const CHUNK: usize = 4096;
    let work = |chunk: &[Rgb], out: &mut [Rgb]| match keep_fraction {
        Some(f) if f < 1.0 => {
            let mut scratch = SparseScratch::default();
            for (o, &p) in out.iter_mut().zip(chunk) {
                *o = prep.evaluate_sparse_with(p, f, &mut scratch);
            }
        }
        _ => {
            let mut scratch = Vec::with_capacity(prep.len());
            for (o, &p) in out.iter_mut().zip(chunk) {
                *o = prep.evaluate_with(p, &mut scratch);
            }
        }
    };
    let mut pixels = vec![Rgb::default(); img.pixels.len()];
    if threads <= 1 {
        for (c, o) in img.pixels.chunks(CHUNK).zip(pixels.chunks_mut(CHUNK)) {
            work(c, o);
        }
    } else {
        let mut run = || {
            img.pixels
                .par_chunks(CHUNK)
                .zip(pixels.par_chunks_mut(CHUNK))
                .for_each(|(c, o)| work(c, o))
        };
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        }
    }
    Image::new(img.width, img.height, pixels)
}

/// Samples the model at every vertex of a `size³` lattice.
pub fn bake_to_cube(model: &GlutModel, size: usize) -> CubeLut {
    let prep = model.prepare();
    let mut scratch = Vec::with_capacity(prep.len());
    CubeLut::from_fn(size, |c| prep.evaluate_with(c, &mut scratch))
}
