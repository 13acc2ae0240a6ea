//! Named parameter collections, the Adam optimizer, and NBC1 checkpoints.
//!
//! A checkpoint stores every named array (parameters plus non-optimized
//! entries such as batch-norm running stats), the Adam moment accumulators
//! as `<name>.m` / `<name>.v` entries, and the step count as a rank-0
//! `adam.t` entry. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayView1, ArrayView4, ArrayViewD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::KernelError;

const MAGIC: [u8; 4] = *b"NBC1";

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamConfig {
    pub fn new(learning_rate: f32) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(KernelError::BadCheckpoint(format!("invalid Adam config {self:?}")));
        }
        Ok(())
    }
}

/// Ordered map of named parameter arrays plus Adam state.
///
/// Entries that never receive gradients (batch-norm running stats) live in
/// the same map and simply never acquire moment accumulators.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    values: IndexMap<String, ArrayD<f32>>,
    m: IndexMap<String, ArrayD<f32>>,
    v: IndexMap<String, ArrayD<f32>>,
    t: u64,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f32>) -> Result<(), KernelError> {
        if self.values.contains_key(name) {
            return Err(KernelError::DuplicateParam(name.to_string()));
        }
        self.values.insert(name.to_string(), value);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f32>) {
        let slot = self
            .values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), value.shape(), "shape change for {name}");
        *slot = value;
    }

    /// Borrows a parameter as a 4D view; panics if the rank differs.
    pub fn view4(&self, name: &str) -> ArrayView4<'_, f32> {
        self.get(name)
            .view()
            .into_dimensionality()
            .unwrap_or_else(|_| panic!("parameter {name} is not rank 4"))
    }

    /// Borrows a parameter as a 1D view; panics if the rank differs.
    pub fn view1(&self, name: &str) -> ArrayView1<'_, f32> {
        self.get(name)
            .view()
            .into_dimensionality()
            .unwrap_or_else(|_| panic!("parameter {name} is not rank 1"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    /// Read-only view of the full name -> tensor table.
    pub fn entries(&self) -> &IndexMap<String, ArrayD<f32>> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of stored scalars across all entries.
    pub fn scalar_count(&self) -> usize {
        self.values.values().map(|a| a.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// `f64` copy of all values for double-precision test harnesses.
    pub fn to_f64(&self) -> IndexMap<String, ArrayD<f64>> {
        self.values
            .iter()
            .map(|(k, a)| (k.clone(), a.mapv(|x| x as f64)))
            .collect()
    }

    /// One Adam update with bias correction. The step count increments once
    /// per call; entries absent from `grads` are left untouched.
    pub fn adam_step(
        &mut self,
        grads: &IndexMap<String, ArrayD<f32>>,
        cfg: &AdamConfig,
    ) -> Result<(), KernelError> {
        cfg.validate()?;
        for (name, g) in grads {
            let p = self
                .values
                .get(name)
                .ok_or_else(|| KernelError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(KernelError::ShapeMismatch {
                    op: "adam_step",
                    msg: format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = self.values.get_mut(name).unwrap();
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }

    /// Serializes all entries plus optimizer state.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), KernelError> {
        let state_entries: usize = self
            .values
            .keys()
            .map(|k| 2 * usize::from(self.m.contains_key(k)))
            .sum();
        let count = self.values.len() + state_entries + 1; // +1 for adam.t
        w.write_all(&MAGIC)?;
        w.write_all(&u32::try_from(count).unwrap().to_le_bytes())?;
        for (name, a) in &self.values {
            write_entry(w, name, &a.view())?;
        }
        for name in self.values.keys() {
            if let Some(m) = self.m.get(name) {
                write_entry(w, &format!("{name}.m"), &m.view())?;
                write_entry(w, &format!("{name}.v"), &self.v[name].view())?;
            }
        }
        let t_arr = ArrayD::from_elem(IxDyn(&[]), self.t as f32);
        write_entry(w, "adam.t", &t_arr.view())?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ModelParams::write_to`].
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, KernelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(KernelError::BadCheckpoint("bad magic".into()));
        }
        let count = read_u32(r)? as usize;
        let mut out = Self::new();
        let mut state: Vec<(String, ArrayD<f32>)> = Vec::new();
        for _ in 0..count {
            let (name, arr) = read_entry(r)?;
            if name == "adam.t" {
                let t = arr.iter().next().copied().unwrap_or(0.0);
                if !(t >= 0.0 && t.fract() == 0.0) {
                    return Err(KernelError::BadCheckpoint(format!("bad step count {t}")));
                }
                out.t = t as u64;
            } else if name.ends_with(".m") || name.ends_with(".v") {
                state.push((name, arr));
            } else {
                out.insert(&name, arr)?;
            }
        }
        for (name, arr) in state {
            let (base, kind) = name.split_at(name.len() - 2);
            if !out.values.contains_key(base) {
                return Err(KernelError::BadCheckpoint(format!(
                    "optimizer state {name} has no parameter"
                )));
            }
            if kind == ".m" {
                out.m.insert(base.to_string(), arr);
            } else {
                out.v.insert(base.to_string(), arr);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KernelError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_entry<W: Write>(w: &mut W, name: &str, a: &ArrayViewD<f32>) -> Result<(), KernelError> {
    let bytes = name.as_bytes();
    w.write_all(&u16::try_from(bytes.len()).unwrap().to_le_bytes())?;
    w.write_all(bytes)?;
    let rank = u8::try_from(a.ndim()).unwrap();
    w.write_all(&[rank])?;
    for &d in a.shape() {
        w.write_all(&u32::try_from(d).unwrap().to_le_bytes())?;
    }
    // Arrays are stored standard-layout; iterate in logical order regardless.
    let mut payload = Vec::with_capacity(a.len() * 4);
    for &x in a.iter() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, KernelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_entry<R: Read>(r: &mut R) -> Result<(String, ArrayD<f32>), KernelError> {
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let name_len = u16::from_le_bytes(b2) as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| KernelError::BadCheckpoint("name is not UTF-8".into()))?;
    let mut rank_b = [0u8; 1];
    r.read_exact(&mut rank_b)?;
    let rank = rank_b[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    let n: usize = dims.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| KernelError::BadCheckpoint(e.to_string()))?;
    Ok((name, arr))
}

/// Gaussian init with standard deviation 0.02, the convention for all conv
/// weights here; biases start at zero and norm scales at one.
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f32> {
    let dist = Normal::new(0.0f32, 0.02).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Zero-filled parameter array.
pub fn zeros_init(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}

/// One-filled parameter array (norm scales).
pub fn ones_init(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::ones(IxDyn(shape))
}

/// Deterministic RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
