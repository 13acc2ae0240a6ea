//! Unpaired artifact-correction training: two generators (MC removes motion
//! artifacts, MG synthesizes them) trained against two patch discriminators
//! with least-squares adversarial losses and an L1 cycle-consistency term.

pub mod net;

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::nnkernel::params::{init_rng, normal_init, ones_init, zeros_init};
use crate::nnkernel::{AdamConfig, FeatureMap, KernelError, ModelParams};
use crate::util::derive_seed;
use crate::volumeio::Volume;

pub use net::{
    adversarial_loss, cycle_loss, discriminator_forward, generator_forward, AdvTarget, Table,
};

#[derive(Debug, thiserror::Error)]
pub enum CycleGanError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("slice dims mismatch: {0}")]
    DimMismatch(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad history file: {0}")]
    BadHistory(String),
}

/// Architecture of one generator: a 7x7 stem, two stride-2 downsampling
/// convs, a chain of residual blocks, two stride-2 transpose convs back up,
/// and a 7x7 head with tanh rescaled to [0, 1]. Instance norm and relu
/// throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub base_width: usize,
    pub n_residual_blocks: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec { base_width: 64, n_residual_blocks: 9 }
    }
}

impl GeneratorSpec {
    /// Small preset that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        GeneratorSpec { base_width: 16, n_residual_blocks: 3 }
    }

    pub fn validate(&self) -> Result<(), CycleGanError> {
        if self.base_width == 0 {
            return Err(CycleGanError::BadConfig("generator base_width must be >= 1".into()));
        }
        if self.n_residual_blocks == 0 {
            return Err(CycleGanError::BadConfig("n_residual_blocks must be >= 1".into()));
        }
        Ok(())
    }
}

/// Architecture of one patch discriminator: four stride-2 4x4 convs with
/// widths b, 2b, 4b, 8b (instance norm on all but the first), leaky relu
/// 0.2, and a 5x5 single-channel score head that keeps the grid at 1/16
/// scale while letting central scores span a full 70x70 input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorSpec {
    pub base_width: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec { base_width: 64 }
    }
}

impl DiscriminatorSpec {
    pub fn desk() -> Self {
        DiscriminatorSpec { base_width: 16 }
    }

    pub fn validate(&self) -> Result<(), CycleGanError> {
        if self.base_width == 0 {
            return Err(CycleGanError::BadConfig("discriminator base_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Weight of the cycle-consistency term relative to the adversarial terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleLossConfig {
    pub lambda: f32,
}

impl Default for CycleLossConfig {
    fn default() -> Self {
        CycleLossConfig { lambda: 10.0 }
    }
}

impl CycleLossConfig {
    pub fn validate(&self) -> Result<(), CycleGanError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(CycleGanError::BadConfig("lambda must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Training hyperparameters. `iterations` counts optimizer steps directly;
/// one step consumes one batch from each domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub iterations: usize,
    pub seed: u64,
    pub replay_buffer: usize,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1,
            learning_rate: 2e-4,
            iterations: 2000,
            seed: 17,
            replay_buffer: 50,
            generator: GeneratorSpec::desk(),
            discriminator: DiscriminatorSpec::desk(),
        }
    }
}

impl TrainConfig {
    /// Full-scale hyperparameters (batch 4, lr 5e-5, width-64 nets with 9
    /// residual blocks); pass the step count equivalent to the desired
    /// number of epochs over the dataset.
    pub fn full_scale(iterations: usize) -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 5e-5,
            iterations,
            seed: 17,
            replay_buffer: 50,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CycleGanError> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(CycleGanError::BadConfig("batch_size and iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CycleGanError::BadConfig("learning_rate must be > 0".into()));
        }
        self.generator.validate()?;
        self.discriminator.validate()
    }
}

/// One history row; the four generator components sum to the generator
/// objective, cycle terms already carry the lambda weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub adv_mc: f32,
    pub adv_mg: f32,
    pub cyc_mc: f32,
    pub cyc_mg: f32,
    pub d_mc: f32,
    pub d_mg: f32,
}

impl LossRecord {
    pub fn generator_total(&self) -> f32 {
        self.adv_mc + self.adv_mg + self.cyc_mc + self.cyc_mg
    }

    pub fn is_finite(&self) -> bool {
        [self.adv_mc, self.adv_mg, self.cyc_mc, self.cyc_mg, self.d_mc, self.d_mg]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Replay buffer of generated images shown to the discriminators. Once full,
/// each query either passes the new image through or swaps it with a stored
/// one, returning the older sample.
pub struct ImagePool {
    capacity: usize,
    items: Vec<FeatureMap>,
    rng: ChaCha8Rng,
}

impl ImagePool {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ImagePool { capacity, items: Vec::new(), rng: init_rng(seed) }
    }

    /// Hands back an image for the discriminator given a freshly generated
    /// one (single item, batch dim 1).
    pub fn query(&mut self, img: FeatureMap) -> FeatureMap {
        if self.capacity == 0 {
            return img;
        }
        if self.items.len() < self.capacity {
            self.items.push(img.clone());
            return img;
        }
        if self.rng.random_bool(0.5) {
            let k = self.rng.random_range(0..self.items.len());
            std::mem::replace(&mut self.items[k], img)
        } else {
            img
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Per-iteration batch indices for both domains, drawn independently so no
/// clean/motion pairing can leak into training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    pub clean: Vec<Vec<usize>>,
    pub motion: Vec<Vec<usize>>,
}

/// Draws the default schedule for a config: independent uniform index
/// streams for the two domains, derived from the training seed.
pub fn make_schedule(n_clean: usize, n_motion: usize, cfg: &TrainConfig) -> BatchSchedule {
    let mut rng_c = init_rng(derive_seed(cfg.seed, "cyclegan-batch-clean", 0));
    let mut rng_m = init_rng(derive_seed(cfg.seed, "cyclegan-batch-motion", 0));
    let mut clean = Vec::with_capacity(cfg.iterations);
    let mut motion = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        clean.push((0..cfg.batch_size).map(|_| rng_c.random_range(0..n_clean)).collect());
        motion.push((0..cfg.batch_size).map(|_| rng_m.random_range(0..n_motion)).collect());
    }
    BatchSchedule { clean, motion }
}

fn build_norm_layer(p: &mut ModelParams, prefix: &str, channels: usize) {
    p.insert(&format!("{prefix}.g"), ones_init(&[channels])).expect("unique name");
    p.insert(&format!("{prefix}.e"), zeros_init(&[channels])).expect("unique name");
}

fn build_conv_layer(
    p: &mut ModelParams,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    shape: &[usize],
    bias: usize,
) {
    p.insert(&format!("{prefix}.w"), normal_init(rng, shape)).expect("unique name");
    p.insert(&format!("{prefix}.b"), zeros_init(&[bias])).expect("unique name");
}

/// Allocates and initializes generator parameters: conv weights from
/// N(0, 0.02), zero biases, unit norm gains.
pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> ModelParams {
    let w = spec.base_width;
    let mut rng = init_rng(seed);
    let mut p = ModelParams::new();
    build_conv_layer(&mut p, &mut rng, "stem", &[w, 1, 7, 7], w);
    build_norm_layer(&mut p, "stem", w);
    build_conv_layer(&mut p, &mut rng, "down1", &[2 * w, w, 3, 3], 2 * w);
    build_norm_layer(&mut p, "down1", 2 * w);
    build_conv_layer(&mut p, &mut rng, "down2", &[4 * w, 2 * w, 3, 3], 4 * w);
    build_norm_layer(&mut p, "down2", 4 * w);
    for i in 0..spec.n_residual_blocks {
        let c = 4 * w;
        p.insert(&format!("res{i}.w1"), normal_init(&mut rng, &[c, c, 3, 3])).expect("unique");
        p.insert(&format!("res{i}.b1"), zeros_init(&[c])).expect("unique");
        p.insert(&format!("res{i}.g1"), ones_init(&[c])).expect("unique");
        p.insert(&format!("res{i}.e1"), zeros_init(&[c])).expect("unique");
        p.insert(&format!("res{i}.w2"), normal_init(&mut rng, &[c, c, 3, 3])).expect("unique");
        p.insert(&format!("res{i}.b2"), zeros_init(&[c])).expect("unique");
        p.insert(&format!("res{i}.g2"), ones_init(&[c])).expect("unique");
        p.insert(&format!("res{i}.e2"), zeros_init(&[c])).expect("unique");
    }
    // Transpose-conv weight layout is (in-channels, out-channels, k, k).
    build_conv_layer(&mut p, &mut rng, "up1", &[4 * w, 2 * w, 4, 4], 2 * w);
    build_norm_layer(&mut p, "up1", 2 * w);
    build_conv_layer(&mut p, &mut rng, "up2", &[2 * w, w, 4, 4], w);
    build_norm_layer(&mut p, "up2", w);
    build_conv_layer(&mut p, &mut rng, "head", &[1, w, 7, 7], 1);
    p
}

/// Allocates and initializes discriminator parameters.
pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64) -> ModelParams {
    let b = spec.base_width;
    let mut rng = init_rng(seed);
    let mut p = ModelParams::new();
    build_conv_layer(&mut p, &mut rng, "l1", &[b, 1, 4, 4], b);
    build_conv_layer(&mut p, &mut rng, "l2", &[2 * b, b, 4, 4], 2 * b);
    build_norm_layer(&mut p, "l2", 2 * b);
    build_conv_layer(&mut p, &mut rng, "l3", &[4 * b, 2 * b, 4, 4], 4 * b);
    build_norm_layer(&mut p, "l3", 4 * b);
    build_conv_layer(&mut p, &mut rng, "l4", &[8 * b, 4 * b, 4, 4], 8 * b);
    build_norm_layer(&mut p, "l4", 8 * b);
    build_conv_layer(&mut p, &mut rng, "head", &[1, 8 * b, 5, 5], 1);
    p
}

/// Recovers the generator architecture from a parameter set (checkpoints
/// are self-describing).
pub fn infer_generator_spec(p: &ModelParams) -> Option<GeneratorSpec> {
    if !p.contains("stem.w") {
        return None;
    }
    let base_width = p.get("stem.w").shape()[0];
    let n_residual_blocks =
        (0..).take_while(|i| p.contains(&format!("res{i}.w1"))).count();
    if n_residual_blocks == 0 {
        return None;
    }
    Some(GeneratorSpec { base_width, n_residual_blocks })
}

/// Recovers the discriminator architecture from a parameter set.
pub fn infer_discriminator_spec(p: &ModelParams) -> Option<DiscriminatorSpec> {
    if !p.contains("l1.w") {
        return None;
    }
    Some(DiscriminatorSpec { base_width: p.get("l1.w").shape()[0] })
}

/// The four trained parameter sets of one run.
pub struct CycleGanModels {
    pub mc: ModelParams,
    pub mg: ModelParams,
    pub dis_mc: ModelParams,
    pub dis_mg: ModelParams,
}

fn check_dataset(
    name: &str,
    data: &[Array2<f32>],
    expect: Option<(usize, usize)>,
) -> Result<(usize, usize), CycleGanError> {
    if data.is_empty() {
        return Err(CycleGanError::EmptyDataset);
    }
    let dims = data[0].dim();
    for (i, s) in data.iter().enumerate() {
        if s.dim() != dims {
            return Err(CycleGanError::DimMismatch(format!(
                "{name}[{i}] is {:?}, expected {:?}",
                s.dim(),
                dims
            )));
        }
    }
    if let Some(e) = expect {
        if dims != e {
            return Err(CycleGanError::DimMismatch(format!(
                "{name} slices are {dims:?} but the other domain is {e:?}"
            )));
        }
    }
    Ok(dims)
}

fn stack_batch(data: &[Array2<f32>], indices: &[usize]) -> Result<FeatureMap, CycleGanError> {
    let (h, w) = data[0].dim();
    let mut out = Array4::zeros((indices.len(), 1, h, w));
    for (bi, &idx) in indices.iter().enumerate() {
        let slice = data.get(idx).ok_or_else(|| {
            CycleGanError::DimMismatch(format!("schedule index {idx} out of range"))
        })?;
        out.index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), 0)
            .assign(slice);
    }
    Ok(out)
}

/// Trains with the default schedule drawn from `cfg.seed`.
pub fn train_cyclegan(
    clean: &[Array2<f32>],
    motion: &[Array2<f32>],
    cfg: &TrainConfig,
    loss_cfg: &CycleLossConfig,
) -> Result<(CycleGanModels, Vec<LossRecord>), CycleGanError> {
    let schedule = make_schedule(clean.len().max(1), motion.len().max(1), cfg);
    train_cyclegan_scheduled(clean, motion, cfg, loss_cfg, &schedule)
}

/// Trains with an explicit batch schedule. The loop is sequential and fully
/// deterministic given the config seed and the schedule.
pub fn train_cyclegan_scheduled(
    clean: &[Array2<f32>],
    motion: &[Array2<f32>],
    cfg: &TrainConfig,
    loss_cfg: &CycleLossConfig,
    schedule: &BatchSchedule,
) -> Result<(CycleGanModels, Vec<LossRecord>), CycleGanError> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let dims = check_dataset("clean", clean, None)?;
    check_dataset("motion", motion, Some(dims))?;
    if schedule.clean.len() != cfg.iterations || schedule.motion.len() != cfg.iterations {
        return Err(CycleGanError::BadConfig(format!(
            "schedule covers {} iterations, config asks for {}",
            schedule.clean.len().min(schedule.motion.len()),
            cfg.iterations
        )));
    }

    let gspec = cfg.generator;
    let dspec = cfg.discriminator;
    let mut mc = build_generator(&gspec, derive_seed(cfg.seed, "cyclegan-init-mc", 0));
    let mut mg = build_generator(&gspec, derive_seed(cfg.seed, "cyclegan-init-mg", 0));
    let mut dis_mc =
        build_discriminator(&dspec, derive_seed(cfg.seed, "cyclegan-init-dis-mc", 0));
    let mut dis_mg =
        build_discriminator(&dspec, derive_seed(cfg.seed, "cyclegan-init-dis-mg", 0));
    let mut pool_mc =
        ImagePool::new(cfg.replay_buffer, derive_seed(cfg.seed, "cyclegan-pool-mc", 0));
    let mut pool_mg =
        ImagePool::new(cfg.replay_buffer, derive_seed(cfg.seed, "cyclegan-pool-mg", 0));

    // GAN-standard Adam moments; beta1 0.9 destabilizes adversarial training.
    let mut opt = AdamConfig::new(cfg.learning_rate);
    opt.beta1 = 0.5;

    let lambda = loss_cfg.lambda;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch_c = stack_batch(clean, &schedule.clean[it])?;
        let batch_m = stack_batch(motion, &schedule.motion[it])?;

        let step = net::generator_step(
            mc.entries(),
            mg.entries(),
            dis_mc.entries(),
            dis_mg.entries(),
            &gspec,
            &dspec,
            &batch_c,
            &batch_m,
            lambda,
        )?;
        mc.adam_step(&step.mc_grads, &opt)?;
        mg.adam_step(&step.mg_grads, &opt)?;

        let pooled_c = pool_batch(&mut pool_mc, &step.fake_clean);
        let pooled_m = pool_batch(&mut pool_mg, &step.fake_motion);
        let (d_mc_loss, d_mc_grads) =
            net::discriminator_step(dis_mc.entries(), &dspec, &batch_c, &pooled_c)?;
        dis_mc.adam_step(&d_mc_grads, &opt)?;
        let (d_mg_loss, d_mg_grads) =
            net::discriminator_step(dis_mg.entries(), &dspec, &batch_m, &pooled_m)?;
        dis_mg.adam_step(&d_mg_grads, &opt)?;

        history.push(LossRecord {
            iteration: it as u64,
            adv_mc: step.adv_mc,
            adv_mg: step.adv_mg,
            cyc_mc: step.cyc_mc,
            cyc_mg: step.cyc_mg,
            d_mc: d_mc_loss,
            d_mg: d_mg_loss,
        });
    }

    Ok((CycleGanModels { mc, mg, dis_mc, dis_mg }, history))
}

fn pool_batch(pool: &mut ImagePool, fake: &FeatureMap) -> FeatureMap {
    let (b, _, h, w) = fake.dim();
    let mut out = Array4::zeros((b, 1, h, w));
    for i in 0..b {
        let item = fake
            .index_axis(Axis(0), i)
            .to_owned()
            .insert_axis(Axis(0));
        let picked = pool.query(item);
        out.index_axis_mut(Axis(0), i).assign(&picked.index_axis(Axis(0), 0));
    }
    out
}

fn apply_generator_volume(params: &ModelParams, v: &Volume) -> Result<Volume, CycleGanError> {
    let spec = infer_generator_spec(params).ok_or_else(|| {
        CycleGanError::BadConfig("parameter set is not a generator checkpoint".into())
    })?;
    let (nx, ny, nz) = v.dims();
    if nx % 4 != 0 || ny % 4 != 0 {
        return Err(CycleGanError::DimMismatch(format!(
            "in-plane dims {nx}x{ny} must be divisible by 4"
        )));
    }
    let table = params.entries();
    let slices: Result<Vec<Array2<f32>>, KernelError> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let plane = v.slice_xy(z);
            let (h, w) = plane.dim();
            let mut x = Array4::zeros((1, 1, h, w));
            x.index_axis_mut(Axis(0), 0).index_axis_mut(Axis(0), 0).assign(&plane);
            let (y, _) = net::generator_forward(table, &spec, &x)?;
            Ok(y.index_axis(Axis(0), 0)
                .index_axis(Axis(0), 0)
                .mapv(|v| v.clamp(0.0, 1.0)))
        })
        .collect();
    let slices = slices?;
    let mut out = Volume::zeros(v.dims(), v.spacing()).expect("source volume is valid");
    for (z, plane) in slices.iter().enumerate() {
        out.set_slice_xy(z, plane);
    }
    Ok(out)
}

/// Applies the motion-correction generator slice by slice; output values
/// clamped to [0, 1], dims and spacing preserved.
pub fn correct(mc: &ModelParams, v: &Volume) -> Result<Volume, CycleGanError> {
    apply_generator_volume(mc, v)
}

/// Applies the motion-generation generator slice by slice (synthesizes
/// artifacts on clean input).
pub fn add_motion(mg: &ModelParams, v: &Volume) -> Result<Volume, CycleGanError> {
    apply_generator_volume(mg, v)
}

/// Writes history as CSV. Lines in `provenance` are emitted first as `#`
/// comments.
pub fn write_history<W: Write>(
    w: &mut W,
    records: &[LossRecord],
    provenance: &[String],
) -> Result<(), CycleGanError> {
    for line in provenance {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "iteration,adv_mc,adv_mg,cyc_mc,cyc_mg,d_mc,d_mg")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.iteration, r.adv_mc, r.adv_mg, r.cyc_mc, r.cyc_mg, r.d_mc, r.d_mg
        )?;
    }
    Ok(())
}

/// Reads a history CSV written by [`write_history`].
pub fn read_history<R: Read>(r: R) -> Result<Vec<LossRecord>, CycleGanError> {
    let mut out = Vec::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("iteration,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(CycleGanError::BadHistory(format!("expected 7 fields: {line}")));
        }
        let num = |i: usize| -> Result<f32, CycleGanError> {
            fields[i]
                .parse()
                .map_err(|_| CycleGanError::BadHistory(format!("bad number {}", fields[i])))
        };
        out.push(LossRecord {
            iteration: fields[0]
                .parse()
                .map_err(|_| CycleGanError::BadHistory(format!("bad iteration {}", fields[0])))?,
            adv_mc: num(1)?,
            adv_mg: num(2)?,
            cyc_mc: num(3)?,
            cyc_mg: num(4)?,
            d_mc: num(5)?,
            d_mg: num(6)?,
        });
    }
    Ok(out)
}

/// Convenience wrapper for [`read_history`] over a file path.
pub fn load_history(path: &Path) -> Result<Vec<LossRecord>, CycleGanError> {
    read_history(std::fs::File::open(path)?)
}
