//! Conditional models: one generator network maps a learnable style
//! embedding to the raw parameters of a complete [`GlutModel`].

use crate::eval::EvalReport;
use crate::glut::{GlutModel, ParamLayout, DEFAULT_EPSILON};
use crate::lut_io::ColorPairSet;
use crate::train::{
    accumulate_sparsity, batch_gradient, cosine_lr, holdout_report, init_params, mine_batches, Adam,
    FitData, GradCache, MiningSchedule, TargetLab, TrainConfig, TrainError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const SMALL_HIDDEN: usize = 64;
pub const LARGE_HIDDEN: usize = 128;
pub const EMBED_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenerationMode {
    /// Every primitive attribute is generated per style.
    FullGeneration,
    /// Means and Cholesky factors are shared learnable parameters; only
    /// opacities and color transforms are generated.
    SharedGeometry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Mean,
    Cholesky,
    Opacity,
    LocalColor,
    Global,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::Mean,
        HeadKind::Cholesky,
        HeadKind::Opacity,
        HeadKind::LocalColor,
        HeadKind::Global,
    ];

    /// Number of linear layers in the head.
    pub fn depth(self) -> usize {
        if self == HeadKind::LocalColor {
            3
        } else {
            2
        }
    }

    /// Offset and length of the head's output in the flat parameter vector.
    pub fn span(self, n: usize) -> (usize, usize) {
        let lay = ParamLayout::new(n);
        match self {
            HeadKind::Mean => (lay.means(), 3 * n),
            HeadKind::Cholesky => (lay.chol(), 6 * n),
            HeadKind::Opacity => (lay.opacity(), n),
            HeadKind::LocalColor => (lay.local_matrix(), 12 * n),
            HeadKind::Global => (lay.global_matrix(), 12),
        }
    }

    fn is_geometry(self) -> bool {
        matches!(self, HeadKind::Mean | HeadKind::Cholesky)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Offset of the row-major `[out][in]` weight block; the bias follows.
    pub offset: usize,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    fn bias(&self) -> usize {
        self.offset + self.out_dim * self.in_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub layers: Vec<LayerSpec>,
}

/// Encoder (three `D→H→H→H` layers, ReLU after each) followed by one MLP
/// head per parameter group (ReLU between layers, raw linear output). All
/// weights live in one flat vector in layer order: encoder, then the heads
/// in [`HeadKind::ALL`] order, each layer as weights then bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub embed_dim: usize,
    pub hidden: usize,
    pub n: usize,
    pub mode: GenerationMode,
    pub encoder: Vec<LayerSpec>,
    pub heads: Vec<HeadSpec>,
    pub params: Vec<f64>,
}

impl GeneratorNet {
    /// Layer structure with all weights zero.
    pub fn zeros(embed_dim: usize, hidden: usize, n: usize, mode: GenerationMode) -> Self {
        let mut offset = 0;
        let mut layer = |i: usize, o: usize| {
            let l = LayerSpec {
                in_dim: i,
                out_dim: o,
                offset,
            };
            offset += l.param_count();
            l
        };
        let encoder = vec![layer(embed_dim, hidden), layer(hidden, hidden), layer(hidden, hidden)];
        let mut heads = Vec::new();
        for kind in HeadKind::ALL {
            if mode == GenerationMode::SharedGeometry && kind.is_geometry() {
                continue;
            }
            let mut layers: Vec<LayerSpec> = (0..kind.depth() - 1).map(|_| layer(hidden, hidden)).collect();
            layers.push(layer(hidden, kind.span(n).1));
            heads.push(HeadSpec { kind, layers });
        }
        GeneratorNet {
            embed_dim,
            hidden,
            n,
            mode,
            encoder,
            heads,
            params: vec![0.0; offset],
        }
    }

    /// Hidden layers get fan-in uniform weights and biases; each head's
    /// last layer gets zero weights and biases equal to the initial
    /// single-model parameters, so every embedding starts at that model.
    pub fn initialized(embed_dim: usize, hidden: usize, n: usize, mode: GenerationMode, rng: &mut ChaCha8Rng) -> Self {
        let mut g = GeneratorNet::zeros(embed_dim, hidden, n, mode);
        let init = init_params(n);
        let hidden_layers: Vec<LayerSpec> = g
            .encoder
            .iter()
            .chain(g.heads.iter().flat_map(|h| h.layers[..h.layers.len() - 1].iter()))
            .copied()
            .collect();
        for l in hidden_layers {
            let bound = 1.0 / (l.in_dim as f64).sqrt();
            for v in &mut g.params[l.offset..l.offset + l.param_count()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        for h in &g.heads {
            let last = *h.layers.last().unwrap();
            let (off, len) = h.kind.span(n);
            g.params[last.bias()..last.bias() + len].copy_from_slice(&init[off..off + len]);
        }
        g
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn all_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder.iter().chain(self.heads.iter().flat_map(|h| h.layers.iter()))
    }

    /// Runs the network, writing head outputs into `out` (the flat model
    /// parameters) and returning every layer activation.
    fn forward(&self, e: &[f64], out: &mut [f64]) -> Trace {
        assert_eq!(e.len(), self.embed_dim, "embedding dimension mismatch");
        let enc = mlp_forward(&self.params, &self.encoder, e, true);
        let h = enc.last().unwrap();
        let heads = self
            .heads
            .iter()
            .map(|head| {
                let acts = mlp_forward(&self.params, &head.layers, h, false);
                let (off, len) = head.kind.span(self.n);
                out[off..off + len].copy_from_slice(acts.last().unwrap());
                acts
            })
            .collect();
        Trace { enc, heads }
    }

    /// Backpropagates `grad_params` (gradient w.r.t. the generated flat
    /// model parameters) into `grad_weights` and returns the embedding
    /// gradient.
    fn backward(&self, trace: &Trace, grad_params: &[f64], grad_weights: &mut [f64]) -> Vec<f64> {
        let mut g_h = vec![0.0; self.hidden];
        for (head, acts) in self.heads.iter().zip(&trace.heads) {
            let (off, len) = head.kind.span(self.n);
            let g_in = mlp_backward(&self.params, &head.layers, acts, &grad_params[off..off + len], false, grad_weights);
            for (a, b) in g_h.iter_mut().zip(g_in) {
                *a += b;
            }
        }
        mlp_backward(&self.params, &self.encoder, &trace.enc, &g_h, true, grad_weights)
    }

    pub fn quantized_f32(&self) -> GeneratorNet {
        let mut g = self.clone();
        round_f32(&mut g.params);
        g
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        self.all_layers().copied().collect()
    }
}

/// Generator weight count, or `None` on overflow.
pub fn generator_param_count(embed_dim: usize, hidden: usize, n: usize, mode: GenerationMode) -> Option<usize> {
    let layer = |i: usize, o: usize| i.checked_add(1)?.checked_mul(o);
    let square = layer(hidden, hidden)?;
    let mut total = layer(embed_dim, hidden)?.checked_add(square.checked_mul(2)?)?;
    for kind in HeadKind::ALL {
        if mode == GenerationMode::SharedGeometry && kind.is_geometry() {
            continue;
        }
        let out = match kind {
            HeadKind::Global => 12,
            HeadKind::Mean => n.checked_mul(3)?,
            HeadKind::Cholesky => n.checked_mul(6)?,
            HeadKind::Opacity => n,
            HeadKind::LocalColor => n.checked_mul(12)?,
        };
        total = total
            .checked_add(square.checked_mul(kind.depth() - 1)?)?
            .checked_add(layer(hidden, out)?)?;
    }
    Some(total)
}

struct Trace {
    enc: Vec<Vec<f64>>,
    heads: Vec<Vec<Vec<f64>>>,
}

/// Activations of every layer; `acts[0]` is the input. ReLU follows every
/// layer except the last unless `relu_last`.
fn mlp_forward(params: &[f64], layers: &[LayerSpec], input: &[f64], relu_last: bool) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input.to_vec());
    for (k, l) in layers.iter().enumerate() {
        let a = acts.last().unwrap();
        let w = &params[l.offset..l.bias()];
        let b = &params[l.bias()..l.bias() + l.out_dim];
        let relu = relu_last || k + 1 < layers.len();
        let y: Vec<f64> = (0..l.out_dim)
            .map(|o| {
                let row = &w[o * l.in_dim..(o + 1) * l.in_dim];
                let v = b[o] + row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
                if relu {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect();
        acts.push(y);
    }
    acts
}

fn mlp_backward(
    params: &[f64],
    layers: &[LayerSpec],
    acts: &[Vec<f64>],
    grad_out: &[f64],
    relu_last: bool,
    grads: &mut [f64],
) -> Vec<f64> {
    let mut g = grad_out.to_vec();
    for k in (0..layers.len()).rev() {
        let l = &layers[k];
        if relu_last || k + 1 < layers.len() {
            // ReLU subgradient at zero is zero.
            for (gv, &y) in g.iter_mut().zip(&acts[k + 1]) {
                if y <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let a = &acts[k];
        let mut g_in = vec![0.0; l.in_dim];
        for o in 0..l.out_dim {
            let go = g[o];
            if go == 0.0 {
                continue;
            }
            let row = l.offset + o * l.in_dim;
            for i in 0..l.in_dim {
                grads[row + i] += go * a[i];
                g_in[i] += go * params[row + i];
            }
            grads[l.bias() + o] += go;
        }
        g = g_in;
    }
    g
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

/// `L × D` learnable style vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbeddingTable {
    pub styles: usize,
    pub dim: usize,
    pub vectors: Vec<f64>,
}

impl StyleEmbeddingTable {
    pub fn random(styles: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, EMBED_INIT_STD).expect("valid normal");
        StyleEmbeddingTable {
            styles,
            dim,
            vectors: (0..styles * dim).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn get(&self, l: usize) -> &[f64] {
        &self.vectors[l * self.dim..(l + 1) * self.dim]
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CglutError {
    #[error("style index {index} out of range for {styles} styles")]
    StyleIndex { index: usize, styles: usize },
    #[error("blend weight {0} outside [0, 1]")]
    BlendWeight(f64),
    #[error("need at least two styles, got {0}")]
    TooFewStyles(usize),
    #[error("embedding has dimension {got}, expected {want}")]
    EmbeddingDim { got: usize, want: usize },
    #[error("inconsistent model: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CglutModel {
    pub embeddings: StyleEmbeddingTable,
    pub generator: GeneratorNet,
    /// Means (3N) then Cholesky raw values (6N); present iff the mode is
    /// shared geometry.
    pub shared_geometry: Option<Vec<f64>>,
    pub epsilon: f64,
}

impl CglutModel {
    pub fn new(styles: usize, embed_dim: usize, hidden: usize, n: usize, mode: GenerationMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = StyleEmbeddingTable::random(styles, embed_dim, &mut rng);
        let generator = GeneratorNet::initialized(embed_dim, hidden, n, mode, &mut rng);
        let shared_geometry = (mode == GenerationMode::SharedGeometry).then(|| init_params(n)[..9 * n].to_vec());
        CglutModel {
            embeddings,
            generator,
            shared_geometry,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Assembles a model from parts, checking that they agree.
    pub fn from_parts(
        embeddings: StyleEmbeddingTable,
        generator: GeneratorNet,
        shared_geometry: Option<Vec<f64>>,
        epsilon: f64,
    ) -> Result<Self, CglutError> {
        let bad = |m: &str| Err(CglutError::Inconsistent(m.to_string()));
        if embeddings.dim != generator.embed_dim || embeddings.vectors.len() != embeddings.styles * embeddings.dim {
            return bad("embedding table does not match generator input");
        }
        let shared_len = 9 * generator.n;
        match (generator.mode, &shared_geometry) {
            (GenerationMode::SharedGeometry, Some(s)) if s.len() == shared_len => {}
            (GenerationMode::FullGeneration, None) => {}
            _ => return bad("shared geometry block does not match the generation mode"),
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&embeddings.vectors) || !finite(&generator.params) || !shared_geometry.as_deref().is_none_or(finite) {
            return bad("non-finite weights");
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        Ok(CglutModel {
            embeddings,
            generator,
            shared_geometry,
            epsilon,
        })
    }

    pub fn styles(&self) -> usize {
        self.embeddings.styles
    }

    pub fn primitives(&self) -> usize {
        self.generator.n
    }

    pub fn mode(&self) -> GenerationMode {
        self.generator.mode
    }

    pub fn embedding(&self, l: usize) -> Result<&[f64], CglutError> {
        self.check_style(l)?;
        Ok(self.embeddings.get(l))
    }

    fn check_style(&self, l: usize) -> Result<(), CglutError> {
        if l < self.styles() {
            Ok(())
        } else {
            Err(CglutError::StyleIndex {
                index: l,
                styles: self.styles(),
            })
        }
    }

    fn generate_traced(&self, e: &[f64]) -> (GlutModel, Trace) {
        let n = self.primitives();
        let mut raw = vec![0.0; ParamLayout::new(n).len()];
        let trace = self.generator.forward(e, &mut raw);
        if let Some(s) = &self.shared_geometry {
            raw[..9 * n].copy_from_slice(s);
        }
        let model = GlutModel::from_params(n, raw, self.epsilon).expect("generated parameters have the right length");
        (model, trace)
    }

    /// Materializes the model for an arbitrary embedding.
    pub fn generate_params(&self, e: &[f64]) -> Result<GlutModel, CglutError> {
        if e.len() != self.embeddings.dim {
            return Err(CglutError::EmbeddingDim {
                got: e.len(),
                want: self.embeddings.dim,
            });
        }
        Ok(self.generate_traced(e).0)
    }

    pub fn materialize(&self, l: usize) -> Result<GlutModel, CglutError> {
        self.generate_params(self.embedding(l)?)
    }

    pub fn evaluate_style(&self, l: usize, x: crate::Rgb) -> Result<crate::Rgb, CglutError> {
        Ok(self.materialize(l)?.evaluate(x))
    }

    /// Embedding `(1−α)·e₁ + α·e₂`.
    pub fn blend_embedding(&self, l1: usize, l2: usize, alpha: f64) -> Result<Vec<f64>, CglutError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CglutError::BlendWeight(alpha));
        }
        let (a, b) = (self.embedding(l1)?, self.embedding(l2)?);
        Ok(a.iter().zip(b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect())
    }

    pub fn blend(&self, l1: usize, l2: usize, alpha: f64) -> Result<GlutModel, CglutError> {
        self.generate_params(&self.blend_embedding(l1, l2, alpha)?)
    }

    /// Total learnable values: embeddings, generator and shared geometry.
    pub fn param_count(&self) -> usize {
        self.embeddings.vectors.len() + self.generator.param_count() + self.shared_geometry.as_ref().map_or(0, Vec::len)
    }

    pub fn quantized_f32(&self) -> CglutModel {
        let mut m = self.clone();
        round_f32(&mut m.embeddings.vectors);
        round_f32(&mut m.generator.params);
        if let Some(s) = &mut m.shared_geometry {
            round_f32(s);
        }
        m.epsilon = m.epsilon as f32 as f64;
        m
    }
}

/// Training samples tagged with their style.
#[derive(Clone, Debug, Default)]
pub struct StyleBatch {
    pub styles: Vec<usize>,
    pub pairs: ColorPairSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CglutGradients {
    pub loss: f64,
    pub embeddings: Vec<f64>,
    pub generator: Vec<f64>,
    pub shared_geometry: Option<Vec<f64>>,
}

/// Mean over the batch of each sample's loss under its own style's model,
/// plus `λ_sparse` times the sample-weighted mean of each style's
/// opacity entropy.
pub fn cglut_total_loss(model: &CglutModel, batch: &StyleBatch, cfg: &TrainConfig) -> Result<f64, CglutError> {
    let b = batch.styles.len() as f64;
    let mut loss = 0.0;
    for (l, idx) in group_by_style(model, &batch.styles)? {
        let m = model.materialize(l)?;
        let sub = batch.pairs.subset(&idx);
        let w = idx.len() as f64 / b;
        let unreg = TrainConfig {
            lambda_sparse: 0.0,
            ..*cfg
        };
        loss += w * crate::train::total_loss(&m, &sub, &unreg);
        if cfg.lambda_sparse != 0.0 {
            loss += cfg.lambda_sparse * w * crate::train::reg_sparse(&m);
        }
    }
    Ok(loss)
}

fn group_by_style(model: &CglutModel, styles: &[usize]) -> Result<Vec<(usize, Vec<usize>)>, CglutError> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); model.styles()];
    for (i, &l) in styles.iter().enumerate() {
        model.check_style(l)?;
        groups[l].push(i);
    }
    Ok(groups.into_iter().enumerate().filter(|(_, g)| !g.is_empty()).collect())
}

/// Exact gradient of [`cglut_total_loss`] with respect to embeddings,
/// generator weights and (if present) the shared geometry block.
pub fn backward_cglut(model: &CglutModel, batch: &StyleBatch, cfg: &TrainConfig) -> Result<CglutGradients, CglutError> {
    if batch.styles.is_empty() {
        return Err(TrainError::EmptyData.into());
    }
    assert_eq!(batch.styles.len(), batch.pairs.len(), "style tags must cover every pair");
    let labs = TargetLab::new(&batch.pairs.targets);
    let groups = group_by_style(model, &batch.styles)?;
    let refs: Vec<(usize, usize, &[usize])> = groups.iter().map(|(l, g)| (*l, 0, g.as_slice())).collect();
    backward_multi(model, &[(&batch.pairs, &labs)], &refs, batch.styles.len(), cfg)
}

/// Gradient over `groups` of `(style, source, sample indices)`, each
/// sample indexing into `sources[source]`; `batch_len` is the full batch
/// size used for the mean.
fn backward_multi(
    model: &CglutModel,
    sources: &[(&ColorPairSet, &TargetLab)],
    groups: &[(usize, usize, &[usize])],
    batch_len: usize,
    cfg: &TrainConfig,
) -> Result<CglutGradients, CglutError> {
    let n = model.primitives();
    let plen = ParamLayout::new(n).len();
    let d = model.embeddings.dim;
    let scale = 1.0 / batch_len as f64;
    let mut out = CglutGradients {
        loss: 0.0,
        embeddings: vec![0.0; model.embeddings.vectors.len()],
        generator: vec![0.0; model.generator.param_count()],
        shared_geometry: model.shared_geometry.as_ref().map(|s| vec![0.0; s.len()]),
    };
    for &(l, src, idx) in groups {
        let (glut, trace) = model.generate_traced(model.embedding(l)?);
        let (data, labs) = sources[src];
        let cache = GradCache::new(&glut);
        let (loss_sum, mut g) = batch_gradient(&cache, data, labs, idx, cfg.lambda_hc, scale, plen);
        out.loss += loss_sum * scale;
        if cfg.lambda_sparse != 0.0 {
            let w = idx.len() as f64 * scale;
            out.loss += cfg.lambda_sparse * w * accumulate_sparsity(&glut, cfg.lambda_sparse, w, &mut g);
        }
        if let Some(s) = &mut out.shared_geometry {
            for (a, b) in s.iter_mut().zip(&g[..9 * n]) {
                *a += b;
            }
        }
        let ge = model.generator.backward(&trace, &g, &mut out.generator);
        for (a, b) in out.embeddings[l * d..(l + 1) * d].iter_mut().zip(ge) {
            *a += b;
        }
    }
    let all = out
        .embeddings
        .iter()
        .chain(&out.generator)
        .chain(out.shared_geometry.iter().flatten());
    if let Some(index) = all.clone().position(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index }.into());
    }
    if !out.loss.is_finite() {
        return Err(TrainError::NonFiniteGradient { index: usize::MAX }.into());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CglutConfig {
    pub primitives: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub mode: GenerationMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Learning-rate multiplier for embeddings and shared geometry.
    pub slow_lr_scale: f64,
    pub lambda_hc: f64,
    pub lambda_sparse: f64,
    pub mining: MiningSchedule,
    pub seed: u64,
}

impl Default for CglutConfig {
    fn default() -> Self {
        CglutConfig {
            primitives: 32,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden: SMALL_HIDDEN,
            mode: GenerationMode::FullGeneration,
            epochs: 40,
            batch_size: 8192,
            base_lr: 1e-3,
            slow_lr_scale: 0.1,
            lambda_hc: 10.0,
            lambda_sparse: 0.001,
            mining: MiningSchedule::default(),
            seed: 0,
        }
    }
}

impl CglutConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            lambda_hc: self.lambda_hc,
            lambda_sparse: self.lambda_sparse,
            mining: self.mining,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CglutEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub holdout: Vec<EvalReport>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct CglutFitOutcome {
    pub model: CglutModel,
    pub log: Vec<CglutEpochLog>,
}

/// Jointly fits one embedding per style and the shared generator.
///
/// Batches are drawn uniformly over all `(style, sample)` pairs with the
/// same mining schedule as single-model fitting. The returned model is
/// rounded to `f32`; held-out metrics use the rounded weights.
pub fn fit_cglut(
    styles: &[FitData],
    cfg: &CglutConfig,
    mut on_epoch: impl FnMut(&CglutEpochLog),
) -> Result<CglutFitOutcome, CglutError> {
    if styles.len() < 2 {
        return Err(CglutError::TooFewStyles(styles.len()));
    }
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    if cfg.primitives == 0 || cfg.embed_dim == 0 || cfg.hidden == 0 {
        return Err(TrainError::InvalidConfig("model dimensions must be positive".into()).into());
    }
    if styles.iter().any(|s| s.train.is_empty()) {
        return Err(TrainError::EmptyData.into());
    }
    let mut model = CglutModel::new(styles.len(), cfg.embed_dim, cfg.hidden, cfg.primitives, cfg.mode, cfg.seed);
    let labs: Vec<TargetLab> = styles.iter().map(|s| TargetLab::new(&s.train.targets)).collect();
    let sources: Vec<(&ColorPairSet, &TargetLab)> = styles.iter().map(|s| &s.train).zip(&labs).collect();
    // Global sample k belongs to style l when starts[l] ≤ k < starts[l+1].
    let mut starts = vec![0];
    for s in styles {
        starts.push(starts.last().unwrap() + s.train.len());
    }
    let total = *starts.last().unwrap();

    let mut adam_gen = Adam::new(model.generator.param_count());
    let mut adam_emb = Adam::new(model.embeddings.vectors.len());
    let mut adam_geo = model.shared_geometry.as_ref().map(|s| Adam::new(s.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_dc61_u64);
    let steps_per_epoch = total.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let errors = (cfg.mining.ratio(epoch as f64) > 0.0).then(|| {
            let mut e = Vec::with_capacity(total);
            for (l, s) in styles.iter().enumerate() {
                let m = model.materialize(l).expect("valid style");
                e.extend(crate::train::sample_errors(&m, &s.train));
            }
            e
        });
        let batches = mine_batches(errors.as_deref(), total, epoch, &cfg.mining, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.base_lr;
        for batch in &batches {
            lr = cosine_lr(step, total_steps, cfg.base_lr);
            let mut local: Vec<Vec<usize>> = vec![Vec::new(); styles.len()];
            for &k in batch {
                let l = starts.partition_point(|&s| s <= k) - 1;
                local[l].push(k - starts[l]);
            }
            let groups: Vec<(usize, usize, &[usize])> = local
                .iter()
                .enumerate()
                .filter(|(_, v)| !v.is_empty())
                .map(|(l, v)| (l, l, v.as_slice()))
                .collect();
            let g = backward_multi(&model, &sources, &groups, batch.len(), &tcfg).map_err(|e| {
                CglutError::Train(TrainError::Divergence {
                    epoch,
                    step,
                    detail: e.to_string(),
                })
            })?;
            loss_sum += g.loss;
            adam_gen.step(&mut model.generator.params, &g.generator, lr);
            adam_emb.step(&mut model.embeddings.vectors, &g.embeddings, lr * cfg.slow_lr_scale);
            if let (Some(a), Some(s), Some(gs)) = (&mut adam_geo, &mut model.shared_geometry, &g.shared_geometry) {
                a.step(s, gs, lr * cfg.slow_lr_scale);
            }
            step += 1;
        }
        let rounded = model.quantized_f32();
        let holdout = styles
            .par_iter()
            .enumerate()
            .map(|(l, s)| {
                let m = rounded.materialize(l).expect("valid style");
                holdout_report(&m, if s.holdout.is_empty() { &s.train } else { &s.holdout })
            })
            .collect();
        let entry = CglutEpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches.len() as f64,
            holdout,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(CglutFitOutcome {
        model: model.quantized_f32(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::tests::random_batch;
    use crate::Rgb;

    fn perturbed(mode: GenerationMode, seed: u64) -> CglutModel {
        let mut m = CglutModel::new(3, 4, 8, 2, mode, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in &mut m.generator.params {
            *v += rng.random_range(-0.05..0.05);
        }
        for v in &mut m.embeddings.vectors {
            *v *= 5.0;
        }
        m
    }

    fn tagged(len: usize, styles: &[usize], seed: u64) -> StyleBatch {
        StyleBatch {
            styles: (0..len).map(|i| styles[i % styles.len()]).collect(),
            pairs: random_batch(len, seed),
        }
    }

    #[test]
    fn small_generator_weight_count() {
        let g = GeneratorNet::zeros(DEFAULT_EMBED_DIM, SMALL_HIDDEN, 32, GenerationMode::FullGeneration);
        assert_eq!(g.param_count(), 83_980);
        assert_eq!(generator_param_count(64, 64, 32, GenerationMode::FullGeneration), Some(83_980));
        for mode in [GenerationMode::FullGeneration, GenerationMode::SharedGeometry] {
            assert_eq!(generator_param_count(5, 7, 3, mode), Some(GeneratorNet::zeros(5, 7, 3, mode).param_count()));
        }
        assert_eq!(generator_param_count(usize::MAX, 2, 2, GenerationMode::FullGeneration), None);
        assert!((g.param_count() as f64 - 84_000.0).abs() < 8_400.0);
        let out: Vec<usize> = g.heads.iter().map(|h| h.layers.last().unwrap().out_dim).collect();
        assert_eq!(out, vec![96, 192, 32, 384, 12]);
        let depths: Vec<usize> = g.heads.iter().map(|h| h.layers.len()).collect();
        assert_eq!(depths, vec![2, 2, 2, 3, 2]);
        let shared = GeneratorNet::zeros(DEFAULT_EMBED_DIM, SMALL_HIDDEN, 32, GenerationMode::SharedGeometry);
        assert_eq!(shared.heads.len(), 3);
    }

    #[test]
    fn fresh_model_generates_the_initial_glut() {
        let m = CglutModel::new(2, 16, 16, 8, GenerationMode::FullGeneration, 1);
        let init = crate::train::init_glut(8, 0);
        for l in 0..2 {
            assert_eq!(m.materialize(l).unwrap(), init);
        }
        let s = CglutModel::new(2, 16, 16, 8, GenerationMode::SharedGeometry, 1);
        assert_eq!(s.materialize(1).unwrap(), init);
    }

    #[test]
    fn generation_is_deterministic_and_composes() {
        let m = perturbed(GenerationMode::FullGeneration, 3);
        assert_eq!(m.materialize(1).unwrap(), m.materialize(1).unwrap());
        let x = Rgb::new(0.3, 0.6, 0.2);
        assert_eq!(m.evaluate_style(1, x).unwrap(), m.materialize(1).unwrap().evaluate(x));
        assert!(matches!(m.materialize(3), Err(CglutError::StyleIndex { .. })));
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let m = perturbed(GenerationMode::FullGeneration, 4);
        assert_eq!(m.blend(0, 2, 0.0).unwrap(), m.materialize(0).unwrap());
        assert_eq!(m.blend(0, 2, 1.0).unwrap(), m.materialize(2).unwrap());
        let mid = m.blend_embedding(0, 2, 0.5).unwrap();
        for (k, v) in mid.iter().enumerate() {
            let want = 0.5 * (m.embeddings.get(0)[k] + m.embeddings.get(2)[k]);
            assert!((v - want).abs() < 1e-15);
        }
        assert_eq!(m.blend(0, 1, 1.5), Err(CglutError::BlendWeight(1.5)));
    }

    #[test]
    fn shared_geometry_is_style_invariant() {
        let m = perturbed(GenerationMode::SharedGeometry, 5);
        let a = m.materialize(0).unwrap();
        let b = m.blend(1, 2, 0.3).unwrap();
        assert_ne!(a.params()[9 * 2..], b.params()[9 * 2..]);
        for i in 0..2 {
            assert_eq!(a.primitive(i).mean, b.primitive(i).mean);
            assert_eq!(a.primitive(i).covariance(), b.primitive(i).covariance());
        }
    }

    fn fd_check(model: &CglutModel, batch: &StyleBatch) {
        let cfg = TrainConfig::default();
        let g = backward_cglut(model, batch, &cfg).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, perturb: &dyn Fn(f64) -> CglutModel| {
            let fd = (cglut_total_loss(&perturb(h), batch, &cfg).unwrap()
                - cglut_total_loss(&perturb(-h), batch, &cfg).unwrap())
                / (2.0 * h);
            let err = (analytic - fd).abs();
            let mag = analytic.abs().max(fd.abs());
            assert!(err < 1e-6 || err / mag < 1e-3, "analytic {analytic} fd {fd}");
        };
        for i in 0..model.generator.param_count() {
            check(g.generator[i], &|d| {
                let mut m = model.clone();
                m.generator.params[i] += d;
                m
            });
        }
        for i in 0..model.embeddings.vectors.len() {
            check(g.embeddings[i], &|d| {
                let mut m = model.clone();
                m.embeddings.vectors[i] += d;
                m
            });
        }
        if let Some(gs) = &g.shared_geometry {
            for (i, &a) in gs.iter().enumerate() {
                check(a, &|d| {
                    let mut m = model.clone();
                    m.shared_geometry.as_mut().unwrap()[i] += d;
                    m
                });
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(&perturbed(GenerationMode::FullGeneration, 6), &tagged(8, &[0, 1], 7));
        fd_check(&perturbed(GenerationMode::SharedGeometry, 8), &tagged(8, &[2, 0], 9));
    }

    #[test]
    fn unused_embedding_has_zero_gradient() {
        let m = perturbed(GenerationMode::FullGeneration, 10);
        let g = backward_cglut(&m, &tagged(8, &[1], 11), &TrainConfig::default()).unwrap();
        assert!(g.embeddings[..4].iter().all(|&v| v == 0.0));
        assert!(g.embeddings[8..].iter().all(|&v| v == 0.0));
        assert!(g.embeddings[4..8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shared_geometry_gradient_sums_over_styles() {
        let m = perturbed(GenerationMode::SharedGeometry, 12);
        let batch = tagged(8, &[0, 2], 13);
        let cfg = TrainConfig::default();
        let both = backward_cglut(&m, &batch, &cfg).unwrap().shared_geometry.unwrap();
        let mut sum = vec![0.0; both.len()];
        for l in [0, 2] {
            // Each style's slice, keeping the full-batch 1/B scaling.
            let idx: Vec<usize> = (0..8).filter(|i| batch.styles[*i] == l).collect();
            let glut = m.materialize(l).unwrap();
            let labs = TargetLab::new(&batch.pairs.targets);
            let cache = GradCache::new(&glut);
            let (_, mut g) = batch_gradient(&cache, &batch.pairs, &labs, &idx, cfg.lambda_hc, 1.0 / 8.0, glut.param_count());
            accumulate_sparsity(&glut, cfg.lambda_sparse, idx.len() as f64 / 8.0, &mut g);
            for (a, b) in sum.iter_mut().zip(&g[..18]) {
                *a += b;
            }
        }
        for (a, b) in both.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let a = FitData::from_mapping(4, 64, |c| c);
        let b = FitData::from_mapping(4, 64, |c| Rgb::new(c.r * c.r, c.g * c.g, c.b * c.b));
        let cfg = CglutConfig {
            primitives: 4,
            embed_dim: 8,
            hidden: 8,
            epochs: 2,
            batch_size: 32,
            ..CglutConfig::default()
        };
        let x = fit_cglut(&[a.clone(), b.clone()], &cfg, |_| {}).unwrap();
        let y = fit_cglut(&[a.clone(), b], &cfg, |_| {}).unwrap();
        assert_eq!(x.model, y.model);
        assert_eq!(x.log[1].holdout.len(), 2);
        assert_eq!(x.model, x.model.quantized_f32());
        assert_eq!(fit_cglut(&[a], &cfg, |_| {}).unwrap_err(), CglutError::TooFewStyles(1));
    }
}
