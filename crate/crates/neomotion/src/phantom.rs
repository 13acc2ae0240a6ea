//! Synthetic neonatal-brain-like phantoms with exact tissue labels.
//!
//! A phantom is a smoothly warped nest of ellipses: an outer eCSF shell, a
//! cGM ribbon, a uWM interior carrying CB, BS, and mWM blobs, and a central
//! BGT core with a vCSF cavity. Voxel intensities are per-class means under
//! a low-frequency multiplicative bias field plus additive Gaussian noise,
//! clamped to [0,1], giving T2-like contrast (CSF classes brightest).
//! Anatomical realism is a non-goal; exact ground truth is the point.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::util::{content_hash, derive_seed};
use crate::volumeio::{self, LabelMap, Volume, VolumeError, NUM_CLASSES};

/// Minimum in-plane dimension that still fits every structure.
pub const MIN_INPLANE: usize = 32;

/// Default per-class mean intensities, indexed by label value (background 0).
/// CSF brightest, myelinated WM darkest, matching T2-weighted contrast.
pub const DEFAULT_TISSUE_MEANS: [f32; NUM_CLASSES] =
    [0.0, 0.45, 0.30, 0.50, 0.95, 0.65, 0.40, 0.55, 0.92];

// Blob geometry in brain-normalized coordinates (unit disc = brain boundary).
// Radial bands: background > 1.0, eCSF 0.88..1.0, cGM 0.74..0.88,
// uWM 0.32..0.74, BGT core <= 0.32. Each blob sits strictly inside its host
// band and clear of the others, so every class stays connected in-plane.
const CB_CENTER: (f64, f64) = (-0.28, 0.48);
const CB_RADII: (f64, f64) = (0.13, 0.11);
const BS_CENTER: (f64, f64) = (0.0, 0.55);
const BS_RADII: (f64, f64) = (0.085, 0.12);
const MWM_CENTER: (f64, f64) = (0.37, -0.37);
const MWM_RADII: (f64, f64) = (0.10, 0.10);
const VCSF_CENTER: (f64, f64) = (0.0, -0.05);
const VCSF_RADII: (f64, f64) = (0.16, 0.10);

const RHO_ECSF: f64 = 0.88;
const RHO_CGM: f64 = 0.74;
const RHO_BGT: f64 = 0.32;

/// Errors from phantom generation and cohort manifests.
#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("in-plane dims must be >= {MIN_INPLANE}, got {0:?}")]
    DimsTooSmall((usize, usize, usize)),
    #[error("invalid phantom config: {0}")]
    BadConfig(String),
    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Configuration for one phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    /// Voxel spacing in millimeters.
    pub spacing: (f32, f32, f32),
    pub seed: u64,
    /// Additive Gaussian noise, as a fraction of the intensity range.
    pub noise_sigma: f32,
    /// Peak relative strength of the multiplicative bias field.
    pub bias_amplitude: f32,
    /// Mean intensity per label value; entry 0 (background) stays 0.
    pub tissue_means: [f32; NUM_CLASSES],
    /// Peak warp displacement in voxels. Internally capped at one twentieth
    /// of the smaller in-plane dim so the warp stays invertible and the head
    /// stays inside the grid.
    pub deformation_scale: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: (64, 64, 8),
            spacing: (0.34, 0.34, 2.0),
            seed: 0,
            noise_sigma: 0.02,
            bias_amplitude: 0.1,
            tissue_means: DEFAULT_TISSUE_MEANS,
            deformation_scale: 3.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.dims.0 < MIN_INPLANE || self.dims.1 < MIN_INPLANE || self.dims.2 == 0 {
            return Err(PhantomError::DimsTooSmall(self.dims));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PhantomError::BadConfig("noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return Err(PhantomError::BadConfig("bias_amplitude must be in [0,1)".into()));
        }
        if !(self.deformation_scale >= 0.0 && self.deformation_scale.is_finite()) {
            return Err(PhantomError::BadConfig("deformation_scale must be >= 0".into()));
        }
        for (i, &m) in self.tissue_means.iter().enumerate().skip(1) {
            if !(0.0..=1.0).contains(&m) {
                return Err(PhantomError::BadConfig(format!(
                    "tissue mean for class {i} must be in [0,1], got {m}"
                )));
            }
        }
        Ok(())
    }
}

/// Smooth in-plane displacement field built from two sinusoids per axis.
/// Displacement components depend only on the other in-plane coordinate and
/// on z, so the per-slice warp Jacobian keeps a positive determinant and the
/// warp is a diffeomorphism: class regions stay connected.
struct Warp {
    amp: f64,
    wx: [f64; 2],
    wy: [f64; 2],
    fx: [f64; 2],
    fy: [f64; 2],
    px: [f64; 2],
    py: [f64; 2],
}

impl Warp {
    fn sample(rng: &mut ChaCha8Rng, amp: f64) -> Self {
        let mut w = || rng_range(rng, 0.5, 1.0);
        let (wx, wy) = ([w(), w()], [w(), w()]);
        let mut f = || rng.random_range(1..=2) as f64;
        let (fx, fy) = ([f(), f()], [f(), f()]);
        let mut p = || rng_range(rng, 0.0, std::f64::consts::TAU);
        let (px, py) = ([p(), p()], [p(), p()]);
        Self { amp, wx, wy, fx, fy, px, py }
    }

    fn displace(&self, x: f64, y: f64, z: f64, dims: (usize, usize, usize)) -> (f64, f64) {
        let tau = std::f64::consts::TAU;
        let (nx, ny, nz) = (dims.0 as f64, dims.1 as f64, dims.2.max(1) as f64);
        let dx = (self.wx[0] * (tau * self.fx[0] * y / ny + self.px[0]).sin()
            + self.wx[1] * (tau * self.fx[1] * z / nz + self.px[1]).sin())
            / (self.wx[0] + self.wx[1]);
        let dy = (self.wy[0] * (tau * self.fy[0] * x / nx + self.py[0]).sin()
            + self.wy[1] * (tau * self.fy[1] * z / nz + self.py[1]).sin())
            / (self.wy[0] + self.wy[1]);
        (self.amp * dx, self.amp * dy)
    }
}

fn rng_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

#[inline]
fn in_ellipse(u: f64, v: f64, center: (f64, f64), radii: (f64, f64)) -> bool {
    let du = (u - center.0) / radii.0;
    let dv = (v - center.1) / radii.1;
    du * du + dv * dv <= 1.0
}

/// Classifies a point in brain-normalized coordinates.
fn classify(u: f64, v: f64) -> u8 {
    let rho2 = u * u + v * v;
    if rho2 > 1.0 {
        return 0;
    }
    let rho = rho2.sqrt();
    if rho > RHO_ECSF {
        return 8;
    }
    if rho > RHO_CGM {
        return 7;
    }
    if in_ellipse(u, v, CB_CENTER, CB_RADII) {
        return 1;
    }
    if in_ellipse(u, v, BS_CENTER, BS_RADII) {
        return 6;
    }
    if in_ellipse(u, v, MWM_CENTER, MWM_RADII) {
        return 2;
    }
    if in_ellipse(u, v, VCSF_CENTER, VCSF_RADII) {
        return 4;
    }
    if rho > RHO_BGT {
        return 5;
    }
    3
}

/// Generates one phantom: an image volume and its exact label map.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, LabelMap), PhantomError> {
    cfg.validate()?;
    let (nx, ny, nz) = cfg.dims;
    let amp_cap = (nx.min(ny) as f64) / 20.0;
    let amp = (cfg.deformation_scale as f64).min(amp_cap);

    let mut warp_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "phantom-warp", 0));
    let warp = Warp::sample(&mut warp_rng, amp);

    let mut bias_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "phantom-bias", 0));
    let tau = std::f64::consts::TAU;
    let (pa, pb, pc) = (
        rng_range(&mut bias_rng, 0.0, tau),
        rng_range(&mut bias_rng, 0.0, tau),
        rng_range(&mut bias_rng, 0.0, tau),
    );

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "phantom-noise", 0));

    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    let (rx, ry) = (0.40 * nx as f64, 0.40 * ny as f64);

    let mut volume = Volume::zeros(cfg.dims, cfg.spacing)?;
    let mut labels = LabelMap::zeros(cfg.dims, cfg.spacing)?;

    for z in 0..nz {
        // Through-slice head profile: full size at the center, shrunk at the
        // ends, so the head reads as a 3D ellipsoid across slices.
        let t = if nz > 1 {
            (2.0 * z as f64 - (nz as f64 - 1.0)) / (nz as f64 - 1.0)
        } else {
            0.0
        };
        let s = (1.0 - 0.5 * t * t).sqrt();
        for y in 0..ny {
            for x in 0..nx {
                let (dx, dy) = warp.displace(x as f64, y as f64, z as f64, cfg.dims);
                let u = (x as f64 + dx - cx) / (rx * s);
                let v = (y as f64 + dy - cy) / (ry * s);
                let class = classify(u, v);
                labels.set(x, y, z, class);

                let mean = cfg.tissue_means[class as usize] as f64;
                let bias = (tau * x as f64 / nx as f64 + pa).sin()
                    * (tau * y as f64 / ny as f64 + pb).sin()
                    * (tau * z as f64 / nz as f64 + pc).cos();
                let noise: f64 = StandardNormal.sample(&mut noise_rng);
                let val = mean * (1.0 + cfg.bias_amplitude as f64 * bias)
                    + cfg.noise_sigma as f64 * noise;
                volume.set(x, y, z, val.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok((volume, labels))
}

/// Cohort split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    TrainClean,
    TrainMotion,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::TrainClean => "train-clean",
            Split::TrainMotion => "train-motion",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train-clean" => Some(Split::TrainClean),
            "train-motion" => Some(Split::TrainMotion),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How many cohort members land in each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train_clean: usize,
    pub train_motion: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train_clean + self.train_motion + self.test
    }

    /// Default split for a total count: 15:20 clean:motion, no test members.
    pub fn for_total(n: usize) -> Self {
        let train_clean = (n * 15 + 17) / 35; // round(n * 15/35)
        Self { train_clean, train_motion: n - train_clean, test: 0 }
    }
}

/// One manifest row. Paths are stored relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortEntry {
    pub split: Split,
    pub seed: u64,
    pub volume_path: PathBuf,
    pub labels_path: PathBuf,
}

/// Generates `n` phantoms with the default 15:20 split policy.
pub fn generate_cohort(
    n: usize,
    base: &PhantomConfig,
    out_dir: &Path,
) -> Result<Vec<CohortEntry>, PhantomError> {
    generate_cohort_with_splits(SplitCounts::for_total(n), base, out_dir)
}

/// Generates a cohort with explicit split counts. Member seeds derive from
/// the base seed, so the same config reproduces identical files, and the
/// manifest is written to `<out_dir>/manifest.txt`.
pub fn generate_cohort_with_splits(
    splits: SplitCounts,
    base: &PhantomConfig,
    out_dir: &Path,
) -> Result<Vec<CohortEntry>, PhantomError> {
    let n = splits.total();
    if n == 0 {
        return Err(PhantomError::BadConfig("cohort must have at least 1 member".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let split = if i < splits.train_clean {
            Split::TrainClean
        } else if i < splits.train_clean + splits.train_motion {
            Split::TrainMotion
        } else {
            Split::Test
        };
        let seed = derive_seed(base.seed, "phantom-member", i as u64);
        let cfg = PhantomConfig { seed, ..base.clone() };
        let (volume, labels) = generate_phantom(&cfg)?;
        let volume_path = PathBuf::from(format!("phantom_{i:03}_image.nbv"));
        let labels_path = PathBuf::from(format!("phantom_{i:03}_labels.nbv"));
        volumeio::save_volume(&volume, out_dir.join(&volume_path))?;
        volumeio::save_labels(&labels, out_dir.join(&labels_path))?;
        entries.push(CohortEntry { split, seed, volume_path, labels_path });
    }
    let header = format!(
        "# config={} seed={}",
        content_hash(format!("{base:?}|{splits:?}").as_bytes()),
        base.seed
    );
    write_manifest(&entries, &out_dir.join("manifest.txt"), &header)?;
    Ok(entries)
}

/// Writes manifest rows as `<split>,<seed>,<volume-path>,<labels-path>`.
pub fn write_manifest(
    entries: &[CohortEntry],
    path: &Path,
    header: &str,
) -> Result<(), PhantomError> {
    let mut f = File::create(path)?;
    writeln!(f, "{header}")?;
    for e in entries {
        writeln!(
            f,
            "{},{},{},{}",
            e.split,
            e.seed,
            e.volume_path.display(),
            e.labels_path.display()
        )?;
    }
    Ok(())
}

/// Reads a manifest, skipping `#` comment lines.
pub fn load_manifest(path: &Path) -> Result<Vec<CohortEntry>, PhantomError> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        let parse_err = |msg: &str| PhantomError::ManifestParse {
            line: idx + 1,
            msg: msg.to_string(),
        };
        if fields.len() != 4 {
            return Err(parse_err("expected 4 comma-separated fields"));
        }
        let split = Split::parse(fields[0]).ok_or_else(|| parse_err("unknown split"))?;
        let seed = fields[1].parse::<u64>().map_err(|_| parse_err("bad seed"))?;
        entries.push(CohortEntry {
            split,
            seed,
            volume_path: PathBuf::from(fields[2]),
            labels_path: PathBuf::from(fields[3]),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> PhantomConfig {
        PhantomConfig { dims: (64, 64, 4), seed, ..PhantomConfig::default() }
    }

    #[test]
    fn fixed_seed_reproduces_voxels() {
        let cfg = small_cfg(11);
        let (va, la) = generate_phantom(&cfg).unwrap();
        let (vb, lb) = generate_phantom(&cfg).unwrap();
        assert_eq!(va, vb);
        assert_eq!(la, lb);
    }

    #[test]
    fn degenerate_config_gives_flat_regions() {
        let cfg = PhantomConfig {
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            ..small_cfg(3)
        };
        let (v, l) = generate_phantom(&cfg).unwrap();
        for (i, &lab) in l.labels().iter().enumerate() {
            assert_eq!(v.data()[i], cfg.tissue_means[lab as usize]);
        }
    }

    #[test]
    fn default_128_cube_has_all_classes_and_t2_contrast() {
        let cfg = PhantomConfig { dims: (128, 128, 8), seed: 5, ..PhantomConfig::default() };
        let (v, l) = generate_phantom(&cfg).unwrap();
        let counts = l.class_counts();
        assert!(counts.iter().all(|&c| c > 0), "missing class: {counts:?}");

        let mean_of = |class: u8| {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for (i, &lab) in l.labels().iter().enumerate() {
                if lab == class {
                    sum += v.data()[i] as f64;
                    n += 1;
                }
            }
            sum / n as f64
        };
        // eCSF (8) must read brighter than uWM (5).
        assert!(mean_of(8) > mean_of(5));
        assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x) && x.is_finite()));
    }

    #[test]
    fn all_classes_connected_in_middle_slice() {
        let cfg = PhantomConfig { dims: (96, 96, 4), seed: 9, ..PhantomConfig::default() };
        let (_, l) = generate_phantom(&cfg).unwrap();
        let z = 2;
        let slice = l.slice_xy(z);
        let (ny, nx) = slice.dim();
        for class in 0..NUM_CLASSES as u8 {
            let total = slice.iter().filter(|&&v| v == class).count();
            if total == 0 {
                continue;
            }
            // Flood fill (4-connectivity) from the first voxel of the class.
            let start = slice
                .indexed_iter()
                .find(|(_, &v)| v == class)
                .map(|((y, x), _)| (y, x))
                .unwrap();
            let mut seen = vec![false; nx * ny];
            let mut stack = vec![start];
            seen[start.0 * nx + start.1] = true;
            let mut reached = 0usize;
            while let Some((y, x)) = stack.pop() {
                reached += 1;
                let mut push = |yy: usize, xx: usize| {
                    if slice[[yy, xx]] == class && !seen[yy * nx + xx] {
                        seen[yy * nx + xx] = true;
                        stack.push((yy, xx));
                    }
                };
                if y > 0 {
                    push(y - 1, x);
                }
                if y + 1 < ny {
                    push(y + 1, x);
                }
                if x > 0 {
                    push(y, x - 1);
                }
                if x + 1 < nx {
                    push(y, x + 1);
                }
            }
            assert_eq!(reached, total, "class {class} not connected in slice {z}");
        }
    }

    #[test]
    fn seed_changes_voxels_but_keeps_volume_fractions() {
        let (_, la) = generate_phantom(&small_cfg(1)).unwrap();
        let (_, lb) = generate_phantom(&small_cfg(2)).unwrap();
        assert_ne!(la.labels(), lb.labels());
        let (ca, cb) = (la.class_counts(), lb.class_counts());
        for class in 0..NUM_CLASSES {
            let (a, b) = (ca[class] as f64, cb[class] as f64);
            assert!(a > 0.0 && b > 0.0);
            let ratio = a / b;
            assert!(
                (0.7..=1.3).contains(&ratio),
                "class {class} fraction moved too much: {a} vs {b}"
            );
        }
    }

    #[test]
    fn too_small_dims_are_rejected() {
        let cfg = PhantomConfig { dims: (16, 64, 4), ..PhantomConfig::default() };
        assert!(matches!(generate_phantom(&cfg), Err(PhantomError::DimsTooSmall(_))));
    }

    #[test]
    fn split_counts_mirror_default_ratio() {
        let s = SplitCounts::for_total(35);
        assert_eq!((s.train_clean, s.train_motion, s.test), (15, 20, 0));
        assert_eq!(SplitCounts::for_total(7).total(), 7);
    }

    #[test]
    fn cohort_writes_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let base = PhantomConfig { dims: (32, 32, 2), ..PhantomConfig::default() };
        let entries = generate_cohort(3, &base, dir.path()).unwrap();
        assert_eq!(entries.len(), 3);
        for e in &entries {
            assert!(dir.path().join(&e.volume_path).is_file());
            assert!(dir.path().join(&e.labels_path).is_file());
        }
        let loaded = load_manifest(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(loaded, entries);
    }

    #[test]
    fn cohort_is_deterministic() {
        let base = PhantomConfig { dims: (32, 32, 2), seed: 21, ..PhantomConfig::default() };
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        generate_cohort(2, &base, da.path()).unwrap();
        generate_cohort(2, &base, db.path()).unwrap();
        for name in ["manifest.txt", "phantom_000_image.nbv", "phantom_001_labels.nbv"] {
            let a = fs::read(da.path().join(name)).unwrap();
            let b = fs::read(db.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    #[test]
    fn explicit_splits_assign_members_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let base = PhantomConfig { dims: (32, 32, 1), ..PhantomConfig::default() };
        let splits = SplitCounts { train_clean: 1, train_motion: 2, test: 1 };
        let entries = generate_cohort_with_splits(splits, &base, dir.path()).unwrap();
        let got: Vec<Split> = entries.iter().map(|e| e.split).collect();
        assert_eq!(
            got,
            vec![Split::TrainClean, Split::TrainMotion, Split::TrainMotion, Split::Test]
        );
    }
}
