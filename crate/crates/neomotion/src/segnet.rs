//! Eight-class tissue segmentation: a 2.5D U-Net (three slices enter as
//! channels), its soft-Dice training objective, and slice-wise volume
//! inference.
//!
//! The contracting path is five stages of two 3x3 convs with 2x2 max pooling
//! between them; the expanding path upsamples x2, halves channels with a 2x2
//! conv ("same" via one-sided zero pad), concatenates the skip, and applies
//! two 3x3 convs; a 1x1 conv maps to 9 channels (8 tissues + background).
//! Every conv is followed by batch norm, so convs carry no bias.

use indexmap::IndexMap;
use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cyclegan::{add_motion, CycleGanError};
use crate::nnkernel::{
    batch_norm, batch_norm_backward, conv2d, conv2d_backward, max_pool2d, max_pool2d_backward,
    relu, relu_backward, upsample_nearest2, upsample_nearest2_backward, AdamConfig, BnCache,
    FeatureMap, KernelError, ModelParams, Scalar,
};
use crate::nnkernel::params::{init_rng, normal_init, ones_init, zeros_init};
use crate::util::derive_seed;
use crate::volumeio::{
    extract_patches, LabelMap, PatchSpec, Volume, VolumeError, NUM_CLASSES,
};

/// Number of contracting stages; the deepest feature map is 1/16 resolution.
pub const STAGES: usize = 5;
/// Input channels: the slice under segmentation plus its two neighbors.
pub const IN_SLICES: usize = 3;
/// Smoothing constant of the soft Dice coefficient.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("augmentation mode 'motion' requires a motion generator")]
    MissingGenerator,
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    DimMismatch(String),
    #[error("label {0} outside 0..=8")]
    LabelOutOfRange(u8),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    CycleGan(#[from] CycleGanError),
}

/// U-Net width configuration. Stage widths double from `base_width`:
/// `[w, 2w, 4w, 8w, 16w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetSpec {
    pub base_width: usize,
}

impl Default for UNetSpec {
    /// Full-scale widths 32, 64, 128, 256, 512.
    fn default() -> Self {
        Self { base_width: 32 }
    }
}

impl UNetSpec {
    /// Narrow preset sized for CPU-budget experiments.
    pub fn desk() -> Self {
        Self { base_width: 8 }
    }

    pub fn widths(&self) -> [usize; STAGES] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w, 16 * w]
    }

    pub fn validate(&self) -> Result<(), SegError> {
        if self.base_width == 0 {
            return Err(SegError::BadConfig("base_width must be positive".into()));
        }
        Ok(())
    }
}

/// Whether training runs on clean volumes only or adds motion-synthesized
/// copies of every volume (labels unchanged).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    Motion,
}

/// Training schedule for [`train_segnet`].
#[derive(Debug, Clone)]
pub struct SegTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub patch: PatchSpec,
    pub augmentation: Augmentation,
    pub seed: u64,
    pub network: UNetSpec,
}

impl SegTrainConfig {
    /// Full-scale schedule: batch 6, lr 1e-4, 200 epochs, 256x256 patches of
    /// 3 slices.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 6,
            learning_rate: 1e-4,
            epochs: 200,
            patch: PatchSpec { height: 256, width: 256, depth: 3, stride: 256 },
            augmentation: Augmentation::None,
            seed: 0,
            network: UNetSpec::default(),
        }
    }

    /// CPU-budget schedule for 64x64 phantom cohorts.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-3,
            epochs: 40,
            patch: PatchSpec { height: 64, width: 64, depth: 3, stride: 64 },
            augmentation: Augmentation::None,
            seed: 0,
            network: UNetSpec::desk(),
        }
    }

    pub fn validate(&self) -> Result<(), SegError> {
        self.network.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(SegError::BadConfig("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SegError::BadConfig("learning_rate must be positive".into()));
        }
        self.patch.validate().map_err(SegError::Volume)?;
        if self.patch.depth != IN_SLICES {
            return Err(SegError::BadConfig(format!(
                "patch depth must be {IN_SLICES}, got {}",
                self.patch.depth
            )));
        }
        if self.patch.height % 16 != 0 || self.patch.width % 16 != 0 {
            return Err(SegError::BadConfig(format!(
                "patch {}x{} not divisible by 16",
                self.patch.height, self.patch.width
            )));
        }
        Ok(())
    }
}

/// Names of the conv layers in forward order, with (kernel, in, out) sizes.
fn layer_plan(spec: &UNetSpec) -> Vec<(String, usize, usize, usize)> {
    let w = spec.widths();
    let mut plan = Vec::new();
    for s in 0..STAGES {
        let cin = if s == 0 { IN_SLICES } else { w[s - 1] };
        plan.push((format!("enc{s}a"), 3, cin, w[s]));
        plan.push((format!("enc{s}b"), 3, w[s], w[s]));
    }
    for s in (0..STAGES - 1).rev() {
        plan.push((format!("up{s}"), 2, w[s + 1], w[s]));
        plan.push((format!("dec{s}a"), 3, 2 * w[s], w[s]));
        plan.push((format!("dec{s}b"), 3, w[s], w[s]));
    }
    plan.push(("head".into(), 1, w[0], NUM_CLASSES));
    plan
}

/// Builds a fresh parameter set: conv weights N(0, 0.02), batch-norm scale 1
/// shift 0, running stats at the identity (mean 0, var 1).
pub fn build_unet(spec: &UNetSpec, seed: u64) -> Result<ModelParams, SegError> {
    spec.validate()?;
    let mut rng = init_rng(seed);
    let mut p = ModelParams::new();
    for (name, k, cin, cout) in layer_plan(spec) {
        p.insert(&format!("{name}.w"), normal_init(&mut rng, &[cout, cin, k, k]))?;
        p.insert(&format!("{name}.g"), ones_init(&[cout]))?;
        p.insert(&format!("{name}.e"), zeros_init(&[cout]))?;
        p.insert(&format!("{name}.rm"), zeros_init(&[cout]))?;
        p.insert(&format!("{name}.rv"), ones_init(&[cout]))?;
    }
    Ok(p)
}

/// Recovers the width configuration from a checkpoint via the stem weight
/// shape `[w, 3, 3, 3]`.
pub fn infer_unet_spec(params: &ModelParams) -> Result<UNetSpec, SegError> {
    if !params.contains("enc0a.w") || !params.contains("head.w") {
        return Err(SegError::BadConfig("parameters do not describe a U-Net".into()));
    }
    let shape = params.get("enc0a.w").shape().to_vec();
    if shape.len() != 4 || shape[1] != IN_SLICES || shape[2] != 3 || shape[3] != 3 {
        return Err(SegError::BadConfig(format!("unexpected stem weight shape {shape:?}")));
    }
    let spec = UNetSpec { base_width: shape[0] };
    spec.validate()?;
    Ok(spec)
}

/// Running-stat updates produced by a training-mode forward pass, to be
/// written back into the parameter set after the step.
pub type StatUpdates = Vec<(String, Array1<f32>)>;

/// Applies batch-norm running-stat updates to `params`.
pub fn commit_stats(params: &mut ModelParams, updates: StatUpdates) {
    for (name, value) in updates {
        params.set(&name, value.into_dyn());
    }
}

struct ConvBnCache {
    x: FeatureMap,
    bn: BnCache<f32>,
    y: FeatureMap,
    relu_after: bool,
}

/// conv (no bias) -> batch norm -> optional relu.
fn conv_bn(
    params: &ModelParams,
    name: &str,
    x: &FeatureMap,
    padding: usize,
    relu_after: bool,
    training: bool,
    updates: &mut StatUpdates,
) -> Result<(FeatureMap, ConvBnCache), SegError> {
    let w = params.view4(&format!("{name}.w"));
    let z = conv2d(x.view(), w, None, 1, padding)?;
    let gamma = params.view1(&format!("{name}.g"));
    let beta = params.view1(&format!("{name}.e"));
    let mut rm: Array1<f32> = params.view1(&format!("{name}.rm")).to_owned();
    let mut rv: Array1<f32> = params.view1(&format!("{name}.rv")).to_owned();
    let (zn, bn) = batch_norm(z.view(), gamma, beta, &mut rm, &mut rv, training)?;
    if training {
        updates.push((format!("{name}.rm"), rm));
        updates.push((format!("{name}.rv"), rv));
    }
    let y = if relu_after { relu(&zn) } else { zn };
    let cache = ConvBnCache { x: x.clone(), bn, y: y.clone(), relu_after };
    Ok((y, cache))
}

fn add_grad(grads: &mut IndexMap<String, ArrayD<f32>>, name: String, g: ArrayD<f32>) {
    match grads.entry(name) {
        indexmap::map::Entry::Occupied(mut e) => {
            let acc = e.get_mut();
            *acc = &*acc + &g;
        }
        indexmap::map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

fn conv_bn_backward(
    params: &ModelParams,
    name: &str,
    cache: &ConvBnCache,
    padding: usize,
    dy: &FeatureMap,
    grads: &mut IndexMap<String, ArrayD<f32>>,
) -> Result<FeatureMap, SegError> {
    let dzn = if cache.relu_after { relu_backward(&cache.y, dy) } else { dy.clone() };
    let gamma = params.view1(&format!("{name}.g"));
    let (dz, dgamma, dbeta) = batch_norm_backward(&cache.bn, gamma, dzn.view());
    add_grad(grads, format!("{name}.g"), dgamma.into_dyn());
    add_grad(grads, format!("{name}.e"), dbeta.into_dyn());
    let w = params.view4(&format!("{name}.w"));
    let (dx, dw, _db) = conv2d_backward(cache.x.view(), w, 1, padding, dz.view())?;
    add_grad(grads, format!("{name}.w"), dw.into_dyn());
    Ok(dx)
}

/// Zero-pads one row at the bottom and one column at the right, making a 2x2
/// valid conv size-preserving.
fn pad_br(x: &FeatureMap) -> FeatureMap {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::zeros((b, c, h + 1, w + 1));
    out.slice_mut(s![.., .., ..h, ..w]).assign(x);
    out
}

fn pad_br_backward(dy: &FeatureMap) -> FeatureMap {
    let (b, c, h1, w1) = dy.dim();
    let _ = (b, c);
    dy.slice(s![.., .., ..h1 - 1, ..w1 - 1]).to_owned()
}

struct UpCache {
    conv: ConvBnCache,
}

/// Forward-pass activations needed by [`unet_backward`]. Decoder entries are
/// stored in processing order (deepest stage first).
pub struct UNetCache {
    enc: Vec<(ConvBnCache, ConvBnCache)>,
    pool_args: Vec<Array4<u8>>,
    ups: Vec<UpCache>,
    dec: Vec<(ConvBnCache, ConvBnCache)>,
    head: ConvBnCache,
}

fn check_input(spec: &UNetSpec, x: &FeatureMap) -> Result<(), SegError> {
    spec.validate()?;
    let (_, c, h, w) = x.dim();
    if c != IN_SLICES {
        return Err(SegError::DimMismatch(format!("expected {IN_SLICES} input channels, got {c}")));
    }
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(SegError::DimMismatch(format!("spatial dims {h}x{w} not divisible by 16")));
    }
    Ok(())
}

/// Maps `(b, 3, h, w)` inputs to `(b, 9, h, w)` class scores. In training
/// mode batch norm uses batch statistics and the returned [`StatUpdates`]
/// carry the refreshed running stats; in eval mode stats are read-only.
pub fn unet_forward(
    params: &ModelParams,
    spec: &UNetSpec,
    x: &FeatureMap,
    training: bool,
) -> Result<(FeatureMap, UNetCache, StatUpdates), SegError> {
    check_input(spec, x)?;
    let mut updates = StatUpdates::new();
    let mut enc = Vec::with_capacity(STAGES);
    let mut pool_args = Vec::with_capacity(STAGES - 1);
    let mut skips: Vec<FeatureMap> = Vec::with_capacity(STAGES - 1);
    let mut cur = x.clone();
    for s in 0..STAGES {
        if s > 0 {
            let (pooled, arg) = max_pool2d(cur.view())?;
            pool_args.push(arg);
            cur = pooled;
        }
        let (y1, c1) = conv_bn(params, &format!("enc{s}a"), &cur, 1, true, training, &mut updates)?;
        let (y2, c2) = conv_bn(params, &format!("enc{s}b"), &y1, 1, true, training, &mut updates)?;
        enc.push((c1, c2));
        if s < STAGES - 1 {
            skips.push(y2.clone());
        }
        cur = y2;
    }
    let mut ups = Vec::with_capacity(STAGES - 1);
    let mut dec = Vec::with_capacity(STAGES - 1);
    for s in (0..STAGES - 1).rev() {
        let up = upsample_nearest2(cur.view());
        let padded = pad_br(&up);
        let (uy, uc) =
            conv_bn(params, &format!("up{s}"), &padded, 0, true, training, &mut updates)?;
        let cat = concatenate(Axis(1), &[uy.view(), skips[s].view()])
            .expect("up path and skip share spatial dims");
        let (d1, c1) = conv_bn(params, &format!("dec{s}a"), &cat, 1, true, training, &mut updates)?;
        let (d2, c2) = conv_bn(params, &format!("dec{s}b"), &d1, 1, true, training, &mut updates)?;
        ups.push(UpCache { conv: uc });
        dec.push((c1, c2));
        cur = d2;
    }
    let (scores, head) = conv_bn(params, "head", &cur, 0, false, training, &mut updates)?;
    Ok((scores, UNetCache { enc, pool_args, ups, dec, head }, updates))
}

/// Backpropagates `dscores` through the cached forward pass. Returns the
/// input gradient and per-parameter gradients (batch-norm running stats
/// excluded; they are state, not parameters).
pub fn unet_backward(
    params: &ModelParams,
    spec: &UNetSpec,
    cache: &UNetCache,
    dscores: &FeatureMap,
) -> Result<(FeatureMap, IndexMap<String, ArrayD<f32>>), SegError> {
    let w = spec.widths();
    let mut grads = IndexMap::new();
    let mut dcur = conv_bn_backward(params, "head", &cache.head, 0, dscores, &mut grads)?;
    // Gradient sinks at each encoder stage output: skips for stages 0..3,
    // the decoder feed for stage 4.
    let mut denc: Vec<Option<FeatureMap>> = vec![None; STAGES];
    for s in 0..STAGES - 1 {
        // Decoder caches were pushed deepest-first: stage s sits at 3 - s.
        let idx = STAGES - 2 - s;
        let (c1, c2) = &cache.dec[idx];
        let d2 = conv_bn_backward(params, &format!("dec{s}b"), c2, 1, &dcur, &mut grads)?;
        let dcat = conv_bn_backward(params, &format!("dec{s}a"), c1, 1, &d2, &mut grads)?;
        let dup = dcat.slice(s![.., ..w[s], .., ..]).to_owned();
        let dskip = dcat.slice(s![.., w[s].., .., ..]).to_owned();
        denc[s] = Some(dskip);
        let dpadded =
            conv_bn_backward(params, &format!("up{s}"), &cache.ups[idx].conv, 0, &dup, &mut grads)?;
        let dupsampled = pad_br_backward(&dpadded);
        dcur = upsample_nearest2_backward(dupsampled.view());
    }
    denc[STAGES - 1] = Some(dcur);
    let mut dx = None;
    for s in (0..STAGES).rev() {
        let d = denc[s].take().expect("every stage receives a gradient");
        let (c1, c2) = &cache.enc[s];
        let db = conv_bn_backward(params, &format!("enc{s}b"), c2, 1, &d, &mut grads)?;
        let da = conv_bn_backward(params, &format!("enc{s}a"), c1, 1, &db, &mut grads)?;
        if s > 0 {
            let dpool = max_pool2d_backward(&cache.pool_args[s - 1], da.view());
            let slot = denc[s - 1].as_mut().expect("skip gradient already placed");
            *slot = &*slot + &dpool;
        } else {
            dx = Some(da);
        }
    }
    Ok((dx.expect("stage 0 reached"), grads))
}

/// Soft multi-class Dice loss with gradient. Scores are logits `(b, 9, h, w)`;
/// labels are class indices `(b, h, w)`. Softmax over channels, then per
/// class c: DC_c = (2 sum(p_c y_c) + eps) / (sum p_c + sum y_c + eps); the
/// loss is 1 minus the mean DC over all 9 channels, absent classes included
/// (eps keeps them defined). Always lands in [0, 1].
pub fn soft_dice_loss<F: Scalar>(
    scores: &Array4<F>,
    labels: &Array3<u8>,
) -> Result<(F, Array4<F>), SegError> {
    let (b, c, h, w) = scores.dim();
    if c != NUM_CLASSES {
        return Err(SegError::DimMismatch(format!("expected {NUM_CLASSES} channels, got {c}")));
    }
    if labels.dim() != (b, h, w) {
        return Err(SegError::DimMismatch(format!(
            "labels {:?} do not match scores ({b}, {h}, {w})",
            labels.dim()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(SegError::LabelOutOfRange(bad));
    }
    let eps = F::from_f64(DICE_EPS).expect("constant fits");
    // Softmax per pixel, max-subtracted.
    let mut probs = Array4::<F>::zeros(scores.dim());
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut m = scores[[bi, 0, i, j]];
                for ci in 1..c {
                    let v = scores[[bi, ci, i, j]];
                    if v > m {
                        m = v;
                    }
                }
                let mut z = F::zero();
                for ci in 0..c {
                    let e = (scores[[bi, ci, i, j]] - m).exp();
                    probs[[bi, ci, i, j]] = e;
                    z = z + e;
                }
                for ci in 0..c {
                    probs[[bi, ci, i, j]] = probs[[bi, ci, i, j]] / z;
                }
            }
        }
    }
    // Per-class sums; y is one-hot against labels.
    let mut num = vec![F::zero(); c];
    let mut sum_p = vec![F::zero(); c];
    let mut sum_y = vec![F::zero(); c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let l = labels[[bi, i, j]] as usize;
                sum_y[l] = sum_y[l] + F::one();
                num[l] = num[l] + probs[[bi, l, i, j]];
                for ci in 0..c {
                    sum_p[ci] = sum_p[ci] + probs[[bi, ci, i, j]];
                }
            }
        }
    }
    let two = F::one() + F::one();
    let nc = F::from_usize(c).expect("constant fits");
    let mut loss = F::one();
    let mut n_term = vec![F::zero(); c];
    let mut d_term = vec![F::zero(); c];
    for ci in 0..c {
        n_term[ci] = two * num[ci] + eps;
        d_term[ci] = sum_p[ci] + sum_y[ci] + eps;
        loss = loss - n_term[ci] / d_term[ci] / nc;
    }
    // d loss / d p_c(v) = -(1/9) (2 y_c(v) D_c - N_c) / D_c^2, then softmax
    // backward per pixel: ds_i = p_i (g_i - sum_j g_j p_j).
    let mut dscores = Array4::<F>::zeros(scores.dim());
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let l = labels[[bi, i, j]] as usize;
                let mut dot = F::zero();
                let mut g = vec![F::zero(); c];
                for ci in 0..c {
                    let y = if ci == l { F::one() } else { F::zero() };
                    let gd = -(two * y * d_term[ci] - n_term[ci]) / (d_term[ci] * d_term[ci]) / nc;
                    g[ci] = gd;
                    dot = dot + gd * probs[[bi, ci, i, j]];
                }
                for ci in 0..c {
                    let p = probs[[bi, ci, i, j]];
                    dscores[[bi, ci, i, j]] = p * (g[ci] - dot);
                }
            }
        }
    }
    Ok((loss, dscores))
}

/// Book-keeping from one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHistory {
    pub epoch_loss: Vec<f32>,
    pub iteration_loss: Vec<f32>,
    /// Volumes supplied by the caller.
    pub n_clean_volumes: usize,
    /// Clean plus motion-synthesized copies (2n in motion mode).
    pub n_training_volumes: usize,
    pub n_patches: usize,
}

/// Applies the motion generator to every volume, pairing each output with an
/// untouched clone of the original labels.
pub fn augment_dataset(
    pairs: &[(Volume, LabelMap)],
    mg: &ModelParams,
) -> Result<Vec<(Volume, LabelMap)>, SegError> {
    pairs
        .iter()
        .map(|(v, l)| Ok((add_motion(mg, v)?, l.clone())))
        .collect()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

use rand::SeedableRng;

type PatchSet = Vec<(Array3<f32>, Array2<u8>)>;

fn collect_patches(pairs: &[(Volume, LabelMap)], spec: &PatchSpec) -> Result<PatchSet, SegError> {
    let mut out = PatchSet::new();
    for (v, l) in pairs {
        out.extend(extract_patches(v, l, spec)?);
    }
    Ok(out)
}

fn stack_batch(patches: &PatchSet, idx: &[usize]) -> (Array4<f32>, Array3<u8>) {
    let (d, h, w) = patches[idx[0]].0.dim();
    let mut x = Array4::zeros((idx.len(), d, h, w));
    let mut labels = Array3::zeros((idx.len(), h, w));
    for (bi, &pi) in idx.iter().enumerate() {
        x.slice_mut(s![bi, .., .., ..]).assign(&patches[pi].0);
        labels.slice_mut(s![bi, .., ..]).assign(&patches[pi].1);
    }
    (x, labels)
}

/// Trains the segmenter on patch batches with Adam, minimizing the soft Dice
/// loss. In motion mode every volume additionally contributes an
/// MG-synthesized copy with unchanged labels; each epoch consumes the
/// shuffled clean patches first, then the shuffled synthetic ones, so runs
/// that share a seed agree on the clean prefix regardless of mode.
pub fn train_segnet(
    pairs: &[(Volume, LabelMap)],
    cfg: &SegTrainConfig,
    mg: Option<&ModelParams>,
) -> Result<(ModelParams, SegHistory), SegError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(SegError::EmptyDataset);
    }
    let clean = collect_patches(pairs, &cfg.patch)?;
    let synth = match cfg.augmentation {
        Augmentation::None => PatchSet::new(),
        Augmentation::Motion => {
            let mg = mg.ok_or(SegError::MissingGenerator)?;
            collect_patches(&augment_dataset(pairs, mg)?, &cfg.patch)?
        }
    };
    let n_training_volumes = match cfg.augmentation {
        Augmentation::None => pairs.len(),
        Augmentation::Motion => 2 * pairs.len(),
    };
    let mut patches = clean;
    let n_clean = patches.len();
    patches.extend(synth);

    let mut params = build_unet(&cfg.network, derive_seed(cfg.seed, "segnet-init", 0))?;
    let adam = AdamConfig::new(cfg.learning_rate);
    let mut history = SegHistory {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        iteration_loss: Vec::new(),
        n_clean_volumes: pairs.len(),
        n_training_volumes,
        n_patches: patches.len(),
    };
    for epoch in 0..cfg.epochs {
        let mut order = shuffled(n_clean, derive_seed(cfg.seed, "segnet-epoch-clean", epoch as u64));
        let synth_order =
            shuffled(patches.len() - n_clean, derive_seed(cfg.seed, "segnet-epoch-synth", epoch as u64));
        order.extend(synth_order.into_iter().map(|i| i + n_clean));
        let mut epoch_sum = 0.0f32;
        let mut epoch_n = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = stack_batch(&patches, batch);
            let (scores, cache, stats) = unet_forward(&params, &cfg.network, &x, true)?;
            commit_stats(&mut params, stats);
            let (loss, dscores) = soft_dice_loss(&scores, &labels)?;
            let (_dx, grads) = unet_backward(&params, &cfg.network, &cache, &dscores)?;
            params.adam_step(&grads, &adam)?;
            history.iteration_loss.push(loss);
            epoch_sum += loss;
            epoch_n += 1;
        }
        history.epoch_loss.push(epoch_sum / epoch_n as f32);
    }
    Ok((params, history))
}

/// Segments a volume slice by slice: each slice enters with its two
/// neighbors as channels (mirrored at the volume ends), and the argmax over
/// the 9 score channels becomes its label plane.
pub fn segment_volume(params: &ModelParams, v: &Volume) -> Result<LabelMap, SegError> {
    let spec = infer_unet_spec(params)?;
    let (nx, ny, nz) = v.dims();
    if nx % 16 != 0 || ny % 16 != 0 {
        return Err(SegError::DimMismatch(format!(
            "in-plane dims {nx}x{ny} not divisible by 16"
        )));
    }
    let planes: Result<Vec<Array2<u8>>, SegError> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut x = Array4::zeros((1, IN_SLICES, ny, nx));
            for (ci, dz) in (-1i64..=1).enumerate() {
                let zi = crate::util::reflect_index(z as isize + dz as isize, nz);
                x.slice_mut(s![0, ci, .., ..])
                    .assign(&v.slice_xy(zi).mapv(|t| t));
            }
            let (scores, _, _) = unet_forward(params, &spec, &x, false)?;
            let mut plane = Array2::<u8>::zeros((ny, nx));
            for y in 0..ny {
                for xi in 0..nx {
                    let mut best = 0usize;
                    let mut best_v = scores[[0, 0, y, xi]];
                    for c in 1..NUM_CLASSES {
                        let s = scores[[0, c, y, xi]];
                        if s > best_v {
                            best_v = s;
                            best = c;
                        }
                    }
                    plane[[y, xi]] = best as u8;
                }
            }
            Ok(plane)
        })
        .collect();
    let planes = planes?;
    let mut labels = vec![0u8; nx * ny * nz];
    for (z, plane) in planes.iter().enumerate() {
        for y in 0..ny {
            for x in 0..nx {
                labels[x + nx * (y + ny * z)] = plane[[y, x]];
            }
        }
    }
    Ok(LabelMap::new(v.dims(), v.spacing(), labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_spec() -> UNetSpec {
        UNetSpec { base_width: 2 }
    }

    fn random_input(dims: (usize, usize, usize, usize), seed: u64) -> FeatureMap {
        let mut rng = init_rng(seed);
        Array4::from_shape_fn(dims, |_| rng.random_range(0.0f32..1.0))
    }

    #[test]
    fn default_widths_follow_doubling_scheme() {
        assert_eq!(UNetSpec::default().widths(), [32, 64, 128, 256, 512]);
        assert_eq!(toy_spec().widths(), [2, 4, 8, 16, 32]);
    }

    #[test]
    fn forward_maps_to_nine_channel_scores_of_equal_size() {
        let spec = toy_spec();
        let p = build_unet(&spec, 3).unwrap();
        let x = random_input((2, 3, 64, 64), 5);
        let (scores, _, updates) = unet_forward(&p, &spec, &x, false).unwrap();
        assert_eq!(scores.dim(), (2, 9, 64, 64));
        assert!(updates.is_empty());
        // Training mode refreshes two stats per conv layer.
        let (_, _, updates) = unet_forward(&p, &spec, &x, true).unwrap();
        assert_eq!(updates.len(), 2 * layer_plan(&spec).len());
    }

    #[test]
    fn forward_rejects_indivisible_dims_and_bad_channels() {
        let spec = toy_spec();
        let p = build_unet(&spec, 3).unwrap();
        let x = random_input((1, 3, 24, 64), 5);
        assert!(matches!(unet_forward(&p, &spec, &x, false), Err(SegError::DimMismatch(_))));
        let x = random_input((1, 2, 64, 64), 5);
        assert!(matches!(unet_forward(&p, &spec, &x, false), Err(SegError::DimMismatch(_))));
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        let spec = UNetSpec { base_width: 4 };
        let p = build_unet(&spec, 1).unwrap();
        // Independent tally: k*k*cin*cout conv weights plus 4 per-channel
        // batch-norm values (scale, shift, running mean, running var).
        let mut expected = 0usize;
        for (_, k, cin, cout) in layer_plan(&spec) {
            expected += k * k * cin * cout + 4 * cout;
        }
        assert_eq!(p.scalar_count(), expected);
        assert_eq!(expected, 123_076);
    }

    #[test]
    fn soft_dice_rewards_perfect_prediction() {
        let mut labels = Array3::<u8>::zeros((1, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                labels[[0, i, j]] = ((i * 4 + j) % 9) as u8;
            }
        }
        let mut scores = Array4::<f64>::zeros((1, 9, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                scores[[0, labels[[0, i, j]] as usize, i, j]] = 50.0;
            }
        }
        let (loss, _) = soft_dice_loss(&scores, &labels).unwrap();
        assert!(loss < 0.01, "got {loss}");
    }

    #[test]
    fn soft_dice_uniform_logits_match_hand_formula() {
        // Uniform logits give p_c = 1/9 everywhere; all labels class 3.
        let scores = Array4::<f64>::zeros((1, 9, 4, 4));
        let labels = Array3::<u8>::from_elem((1, 4, 4), 3);
        let n = 16.0f64;
        let dc_present = (2.0 * n / 9.0 + DICE_EPS) / (n / 9.0 + n + DICE_EPS);
        let dc_absent = DICE_EPS / (n / 9.0 + DICE_EPS);
        let want = 1.0 - (dc_present + 8.0 * dc_absent) / 9.0;
        let (loss, _) = soft_dice_loss(&scores, &labels).unwrap();
        assert!((loss - want).abs() < 1e-12, "got {loss}, want {want}");
        assert!((dc_present - 0.2).abs() < 1e-4);
    }

    #[test]
    fn soft_dice_gradient_matches_finite_differences() {
        let mut rng = init_rng(11);
        let mut scores = Array4::<f64>::zeros((1, 9, 2, 2));
        for v in scores.iter_mut() {
            *v = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        let labels = Array3::from_shape_fn((1, 2, 2), |_| rng.random_range(0u8..9));
        let (_, grad) = soft_dice_loss(&scores, &labels).unwrap();
        let h = 1e-4;
        let mut max_rel = 0.0f64;
        for idx in 0..scores.len() {
            let orig = scores.as_slice().unwrap()[idx];
            scores.as_slice_mut().unwrap()[idx] = orig + h;
            let (lp, _) = soft_dice_loss(&scores, &labels).unwrap();
            scores.as_slice_mut().unwrap()[idx] = orig - h;
            let (lm, _) = soft_dice_loss(&scores, &labels).unwrap();
            scores.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.as_slice().unwrap()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max rel err {max_rel}");
    }

    #[test]
    fn soft_dice_stays_in_unit_interval_and_validates() {
        let mut rng = init_rng(23);
        for _ in 0..20 {
            let scores =
                Array4::from_shape_fn((2, 9, 4, 4), |_| rng.random_range(-30.0f32..30.0));
            let labels = Array3::from_shape_fn((2, 4, 4), |_| rng.random_range(0u8..9));
            let (loss, _) = soft_dice_loss(&scores, &labels).unwrap();
            assert!((0.0..=1.0).contains(&loss), "loss {loss} escaped [0,1]");
        }
        let scores = Array4::<f32>::zeros((1, 9, 2, 2));
        let bad = Array3::from_elem((1, 2, 2), 9u8);
        assert!(matches!(
            soft_dice_loss(&scores, &bad),
            Err(SegError::LabelOutOfRange(9))
        ));
        let wrong = Array3::from_elem((1, 3, 2), 0u8);
        assert!(matches!(soft_dice_loss(&scores, &wrong), Err(SegError::DimMismatch(_))));
    }

    /// Directional-derivative check of the full net + loss: along the
    /// normalized analytic gradient the finite-difference slope must equal
    /// the gradient norm.
    #[test]
    fn unet_gradient_matches_directional_derivative() {
        let spec = toy_spec();
        let mut params = build_unet(&spec, 7).unwrap();
        // Scale conv weights to O(1) so batch-norm statistics are well
        // conditioned; tiny-variance channels make istd (and the higher
        // derivatives the finite difference is sensitive to) blow up.
        let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
        for name in names {
            if name.ends_with(".w") {
                let scaled = params.get(&name) * 25.0;
                params.set(&name, scaled);
            }
        }
        // Batch 2 at 32x32 keeps the deepest stage at 2x2 so batch-norm
        // variances never degenerate to zero.
        let x = random_input((2, 3, 32, 32), 9);
        let labels = {
            let mut rng = init_rng(13);
            Array3::from_shape_fn((2, 32, 32), |_| rng.random_range(0u8..9))
        };
        let loss_at = |p: &ModelParams| -> f64 {
            let (scores, _, _) = unet_forward(p, &spec, &x, true).unwrap();
            let (loss, _) = soft_dice_loss(&scores, &labels).unwrap();
            loss as f64
        };
        let (scores, cache, _) = unet_forward(&params, &spec, &x, true).unwrap();
        let (_, dscores) = soft_dice_loss(&scores, &labels).unwrap();
        let (_, grads) = unet_backward(&params, &spec, &cache, &dscores).unwrap();
        let norm: f64 = grads
            .values()
            .map(|g| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!(norm > 0.0);
        // Relu and max-pool kink crossings put an O(h) error on the slope,
        // so the check is convergence: the mismatch must shrink roughly
        // linearly as h does, down to the f32 noise floor. A systematic
        // backward bug would plateau instead.
        let rel_at = |h: f64| {
            let offset = |sign: f64| {
                let mut p = params.clone();
                for (name, g) in &grads {
                    let stepped = p.get(name) + &g.mapv(|v| (sign * h * v as f64 / norm) as f32);
                    p.set(name, stepped);
                }
                p
            };
            let fd = (loss_at(&offset(1.0)) - loss_at(&offset(-1.0))) / (2.0 * h);
            (fd - norm).abs() / norm
        };
        let (r3, r4, r5) = (rel_at(1e-3), rel_at(1e-4), rel_at(1e-5));
        assert!(r3 < 0.5 && r4 < 0.1 && r5 < 0.02, "rel errors {r3} {r4} {r5}");
        assert!(r4 < r3 && r5 < r4, "error must shrink with h: {r3} {r4} {r5}");
    }

    fn tiny_pair(seed: u64) -> (Volume, LabelMap) {
        let cfg = PhantomConfig {
            dims: (32, 32, 4),
            seed,
            ..PhantomConfig::default()
        };
        generate_phantom(&cfg).unwrap()
    }

    fn tiny_cfg() -> SegTrainConfig {
        SegTrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            epochs: 1,
            patch: PatchSpec { height: 32, width: 32, depth: 3, stride: 32 },
            augmentation: Augmentation::None,
            seed: 77,
            network: UNetSpec { base_width: 2 },
        }
    }

    #[test]
    fn training_rejects_bad_setups() {
        let cfg = tiny_cfg();
        assert!(matches!(train_segnet(&[], &cfg, None), Err(SegError::EmptyDataset)));
        let mut motion = cfg.clone();
        motion.augmentation = Augmentation::Motion;
        let pair = tiny_pair(1);
        assert!(matches!(
            train_segnet(&[pair], &motion, None),
            Err(SegError::MissingGenerator)
        ));
        let mut bad = tiny_cfg();
        bad.patch.depth = 5;
        assert!(matches!(
            train_segnet(&[tiny_pair(1)], &bad, None),
            Err(SegError::BadConfig(_))
        ));
    }

    #[test]
    fn motion_mode_doubles_training_volumes_with_identical_labels() {
        use crate::cyclegan::{build_generator, GeneratorSpec};
        let gen_spec = GeneratorSpec { base_width: 4, n_residual_blocks: 1 };
        let mg = build_generator(&gen_spec, 5);
        let pairs = vec![tiny_pair(2), tiny_pair(3)];
        let aug = augment_dataset(&pairs, &mg).unwrap();
        assert_eq!(aug.len(), pairs.len());
        for ((v0, l0), (v1, l1)) in pairs.iter().zip(&aug) {
            assert_eq!(l0, l1, "augmentation must not touch labels");
            assert_ne!(v0.data(), v1.data(), "augmented volume should differ");
            let mut b0 = Vec::new();
            let mut b1 = Vec::new();
            crate::volumeio::write_labels(&mut b0, l0).unwrap();
            crate::volumeio::write_labels(&mut b1, l1).unwrap();
            assert_eq!(b0, b1, "label bytes must be identical");
        }
        let mut cfg = tiny_cfg();
        cfg.augmentation = Augmentation::Motion;
        let (_, hist) = train_segnet(&pairs, &cfg, Some(&mg)).unwrap();
        assert_eq!(hist.n_clean_volumes, 2);
        assert_eq!(hist.n_training_volumes, 4);
        assert_eq!(hist.n_patches, 16);
    }

    #[test]
    fn clean_and_motion_runs_share_the_first_iteration() {
        use crate::cyclegan::{build_generator, GeneratorSpec};
        let pairs = vec![tiny_pair(4)];
        let cfg = tiny_cfg();
        let (_, clean_hist) = train_segnet(&pairs, &cfg, None).unwrap();
        let mg = build_generator(&GeneratorSpec { base_width: 4, n_residual_blocks: 1 }, 6);
        let mut motion_cfg = cfg.clone();
        motion_cfg.augmentation = Augmentation::Motion;
        let (_, motion_hist) = train_segnet(&pairs, &motion_cfg, Some(&mg)).unwrap();
        // Epochs consume shuffled clean patches before synthetic ones, so
        // iteration 0 sees the same batch under the same seed in both modes.
        assert_eq!(clean_hist.iteration_loss[0], motion_hist.iteration_loss[0]);
        assert!(motion_hist.iteration_loss.len() > clean_hist.iteration_loss.len());
        // Same-mode reruns reproduce exactly.
        let (_, again) = train_segnet(&pairs, &cfg, None).unwrap();
        assert_eq!(clean_hist, again);
    }

    #[test]
    fn loss_decreases_over_three_hundred_iterations() {
        let pairs = vec![tiny_pair(8), tiny_pair(9)];
        // 8 slices -> 8 patches; batch 4 -> 2 iterations per epoch.
        let cfg = SegTrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            epochs: 150,
            patch: PatchSpec { height: 32, width: 32, depth: 3, stride: 32 },
            augmentation: Augmentation::None,
            seed: 21,
            network: UNetSpec { base_width: 2 },
        };
        let (_, hist) = train_segnet(&pairs, &cfg, None).unwrap();
        assert_eq!(hist.iteration_loss.len(), 300);
        let first = hist.epoch_loss[0];
        let last = *hist.epoch_loss.last().unwrap();
        assert!(
            last < first,
            "loss should fall over training: first {first}, last {last}"
        );
    }

    #[test]
    fn untrained_model_yields_valid_labels_of_matching_dims() {
        let (v, _) = tiny_pair(10);
        let p = build_unet(&UNetSpec { base_width: 2 }, 99).unwrap();
        let seg = segment_volume(&p, &v).unwrap();
        assert_eq!(seg.dims(), v.dims());
        assert_eq!(seg.spacing(), v.spacing());
        assert!(seg.labels().iter().all(|&l| l < 9));
        let odd = Volume::new((24, 32, 2), (1.0, 1.0, 1.0), vec![0.0; 24 * 32 * 2]).unwrap();
        assert!(matches!(segment_volume(&p, &odd), Err(SegError::DimMismatch(_))));
    }

    #[test]
    fn constant_zero_volume_predicts_one_label_everywhere() {
        // Zero input with zero padding stays exactly constant through every
        // layer, so each slice collapses to a single class.
        let v = Volume::new((32, 32, 3), (1.0, 1.0, 1.0), vec![0.0; 32 * 32 * 3]).unwrap();
        let p = build_unet(&UNetSpec { base_width: 2 }, 31).unwrap();
        let seg = segment_volume(&p, &v).unwrap();
        let first = seg.labels()[0];
        assert!(seg.labels().iter().all(|&l| l == first));
    }

    #[test]
    fn overfitting_one_phantom_recovers_its_segmentation() {
        let (v, l) = generate_phantom(&PhantomConfig {
            dims: (64, 64, 8),
            seed: 400,
            ..PhantomConfig::default()
        })
        .unwrap();
        let cfg = SegTrainConfig {
            batch_size: 4,
            learning_rate: 1e-2,
            epochs: 250,
            patch: PatchSpec { height: 64, width: 64, depth: 3, stride: 64 },
            augmentation: Augmentation::None,
            seed: 5,
            network: UNetSpec { base_width: 4 },
        };
        let (params, hist) = train_segnet(&[(v.clone(), l.clone())], &cfg, None).unwrap();
        assert!(hist.epoch_loss.last().unwrap() < &0.1);
        let seg = segment_volume(&params, &v).unwrap();
        let report = metrics::evaluate(&seg, &l).unwrap();
        // Mean DC over classes present in the reference; a class the model
        // misses entirely scores 0 and still counts.
        let ref_counts = l.class_counts();
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in &report.classes {
            if ref_counts[c.class as usize] > 0 {
                sum += c.dc;
                n += 1;
            }
        }
        let mean_fg = sum / n as f64;
        assert!(mean_fg > 0.8, "mean foreground DC {mean_fg} after overfit");
    }

    #[test]
    fn checkpoints_round_trip_through_nbc(){
        let spec = toy_spec();
        let p = build_unet(&spec, 55).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ModelParams::read_from(&mut std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(infer_unet_spec(&q).unwrap(), spec);
        let x = random_input((1, 3, 32, 32), 2);
        let (a, _, _) = unet_forward(&p, &spec, &x, false).unwrap();
        let (b, _, _) = unet_forward(&q, &spec, &x, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_inference_rejects_foreign_params() {
        let mut p = ModelParams::new();
        p.insert("stem.w", zeros_init(&[4, 1, 7, 7])).unwrap();
        assert!(matches!(infer_unet_spec(&p), Err(SegError::BadConfig(_))));
    }
}
