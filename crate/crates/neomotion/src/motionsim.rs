//! Frequency-domain rigid-motion corruption for axial slices.
//!
//! Motion is modeled as a piecewise-constant rigid pose per k-space line.
//! Each output spectrum line is taken from the 2D transform of the slice as
//! seen under that line's pose: rotation resamples the image before the
//! transform, translation multiplies the line by a phase ramp. Abrupt pose
//! changes between line blocks produce ghosting stripes along the
//! phase-encode axis; many small events produce blur.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::util::derive_seed;
use crate::volumeio::{Volume, VolumeError};

/// Errors from trace construction, corruption, and sidecar I/O.
#[derive(Debug, Error)]
pub enum MotionError {
    #[error("trace must have at least one line")]
    EmptyTrace,
    #[error("non-finite pose at line {0}")]
    NonFinitePose(usize),
    #[error("trace has {got} lines but slice has {expected} rows")]
    LineCountMismatch { expected: usize, got: usize },
    #[error("invalid motion config: {0}")]
    BadConfig(String),
    #[error("trace parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rigid pose of the head while one k-space line is acquired.
/// Translations are in voxels, rotation in radians about the slice center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub dx: f64,
    pub dy: f64,
    pub theta: f64,
}

impl Pose {
    pub const ZERO: Pose = Pose { dx: 0.0, dy: 0.0, theta: 0.0 };

    pub fn is_zero(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.theta == 0.0
    }

    fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.theta.is_finite()
    }
}

/// Per-line rigid poses for one slice plus a scalar corruption strength.
///
/// Severity is the mean Euclidean norm of (dx, dy, theta * r_ref) over all
/// lines, with r_ref = half the line count (equal to half the image width
/// for the square slices used throughout).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTrace {
    poses: Vec<Pose>,
    severity: f64,
}

impl MotionTrace {
    pub fn from_poses(poses: Vec<Pose>) -> Result<Self, MotionError> {
        if poses.is_empty() {
            return Err(MotionError::EmptyTrace);
        }
        if let Some(i) = poses.iter().position(|p| !p.is_finite()) {
            return Err(MotionError::NonFinitePose(i));
        }
        let r_ref = poses.len() as f64 / 2.0;
        let severity = poses
            .iter()
            .map(|p| (p.dx * p.dx + p.dy * p.dy + (p.theta * r_ref).powi(2)).sqrt())
            .sum::<f64>()
            / poses.len() as f64;
        Ok(Self { poses, severity })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn severity(&self) -> f64 {
        self.severity
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Random piecewise-constant motion model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionConfig {
    pub seed: u64,
    /// Inclusive range for the number of abrupt motion events per slice.
    pub n_events: (usize, usize),
    /// Per-axis translation bound in voxels.
    pub max_translation: f64,
    /// Rotation bound in radians.
    pub max_rotation: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self { seed: 0, n_events: (1, 3), max_translation: 4.0, max_rotation: 0.05 }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<(), MotionError> {
        if self.n_events.0 > self.n_events.1 {
            return Err(MotionError::BadConfig("n_events range is inverted".into()));
        }
        if !(self.max_translation >= 0.0 && self.max_translation.is_finite()) {
            return Err(MotionError::BadConfig("max_translation must be >= 0".into()));
        }
        if !(self.max_rotation >= 0.0 && self.max_rotation.is_finite()) {
            return Err(MotionError::BadConfig("max_rotation must be >= 0".into()));
        }
        Ok(())
    }
}

/// Draws a piecewise-constant trace: pose is zero outside event blocks, and
/// each event overwrites one contiguous block of lines with one pose.
pub fn sample_trace(cfg: &MotionConfig, n_lines: usize) -> Result<MotionTrace, MotionError> {
    cfg.validate()?;
    if n_lines == 0 {
        return Err(MotionError::EmptyTrace);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = rng.random_range(cfg.n_events.0..=cfg.n_events.1);
    let mut poses = vec![Pose::ZERO; n_lines];
    // Block length between 1/8 and 1/3 of the lines (at least one line).
    let lo = (n_lines / 8).max(1);
    let hi = (n_lines / 3).max(2).min(n_lines);
    for _ in 0..k {
        let len = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=n_lines - len);
        let t = cfg.max_translation;
        let r = cfg.max_rotation;
        let pose = Pose {
            dx: rng.random_range(-t..=t),
            dy: rng.random_range(-t..=t),
            theta: rng.random_range(-r..=r),
        };
        for p in &mut poses[start..start + len] {
            *p = pose;
        }
    }
    MotionTrace::from_poses(poses)
}

fn signed_freq(i: usize, n: usize) -> f64 {
    if i < n.div_ceil(2) {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// In-place 2D FFT over a row-major [ny, nx] array. The inverse applies the
/// 1/(nx*ny) normalization so forward followed by inverse is the identity.
fn fft2d(a: &mut Array2<Complex<f64>>, inverse: bool) {
    let (ny, nx) = a.dim();
    let mut planner = FftPlanner::new();
    let row_fft = if inverse { planner.plan_fft_inverse(nx) } else { planner.plan_fft_forward(nx) };
    let col_fft = if inverse { planner.plan_fft_inverse(ny) } else { planner.plan_fft_forward(ny) };
    let mut buf = vec![Complex::default(); nx.max(ny)];
    for mut row in a.rows_mut() {
        for (b, v) in buf.iter_mut().zip(row.iter()) {
            *b = *v;
        }
        row_fft.process(&mut buf[..nx]);
        for (v, b) in row.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
    for x in 0..nx {
        for y in 0..ny {
            buf[y] = a[[y, x]];
        }
        col_fft.process(&mut buf[..ny]);
        for y in 0..ny {
            a[[y, x]] = buf[y];
        }
    }
    if inverse {
        let scale = 1.0 / (nx as f64 * ny as f64);
        a.mapv_inplace(|c| c * scale);
    }
}

fn bilinear(img: &Array2<f64>, sx: f64, sy: f64) -> f64 {
    let (ny, nx) = img.dim();
    let (x0, y0) = (sx.floor(), sy.floor());
    let (tx, ty) = (sx - x0, sy - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0isize, 1.0 - tx), (1, tx)] {
            let xi = x0 as isize + dx;
            let yi = y0 as isize + dy;
            if xi >= 0 && (xi as usize) < nx && yi >= 0 && (yi as usize) < ny {
                acc += wy * wx * img[[yi as usize, xi as usize]];
            }
        }
    }
    acc
}

/// Rotates the image by `theta` about its center with bilinear resampling;
/// samples falling outside the grid read as zero.
fn rotate_bilinear(img: &Array2<f64>, theta: f64) -> Array2<f64> {
    let (ny, nx) = img.dim();
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        let (qx, qy) = (x as f64 - cx, y as f64 - cy);
        let sx = cos * qx + sin * qy + cx;
        let sy = -sin * qx + cos * qy + cy;
        bilinear(img, sx, sy)
    })
}

/// Assembles the motion-corrupted k-space of a slice. Contiguous runs of
/// equal poses share one transform; the zero pose's spectrum is cached
/// because it recurs between event blocks.
fn corrupt_spectrum(slice: &Array2<f64>, trace: &MotionTrace) -> Array2<Complex<f64>> {
    let (ny, nx) = slice.dim();
    let tau = std::f64::consts::TAU;
    let mut spectrum = Array2::from_elem((ny, nx), Complex::default());
    let mut zero_spec: Option<Array2<Complex<f64>>> = None;
    let mut row = 0;
    while row < ny {
        let pose = trace.poses()[row];
        let mut end = row + 1;
        while end < ny && trace.poses()[end] == pose {
            end += 1;
        }
        let spec_owned;
        let spec: &Array2<Complex<f64>> = if pose.is_zero() {
            zero_spec.get_or_insert_with(|| {
                let mut f = slice.mapv(|x| Complex::new(x, 0.0));
                fft2d(&mut f, false);
                f
            })
        } else {
            let img = if pose.theta == 0.0 { slice.clone() } else { rotate_bilinear(slice, pose.theta) };
            let mut f = img.mapv(|x| Complex::new(x, 0.0));
            fft2d(&mut f, false);
            spec_owned = f;
            &spec_owned
        };
        for line in row..end {
            let ky = signed_freq(line, ny);
            for m in 0..nx {
                let kx = signed_freq(m, nx);
                let phase = -tau * (kx * pose.dx / nx as f64 + ky * pose.dy / ny as f64);
                spectrum[[line, m]] = spec[[line, m]] * Complex::from_polar(1.0, phase);
            }
        }
        row = end;
    }
    spectrum
}

/// Corrupts one slice with the given trace. The trace must have one pose per
/// slice row. Output is the real part of the reassembled image and may fall
/// slightly outside the input range; it is intentionally not clamped so the
/// operator stays linear in the image.
pub fn corrupt_slice(slice: &Array2<f32>, trace: &MotionTrace) -> Result<Array2<f32>, MotionError> {
    let ny = slice.dim().0;
    if trace.len() != ny {
        return Err(MotionError::LineCountMismatch { expected: ny, got: trace.len() });
    }
    let s64 = slice.mapv(|x| x as f64);
    let mut spectrum = corrupt_spectrum(&s64, trace);
    fft2d(&mut spectrum, true);
    Ok(spectrum.mapv(|c| c.re as f32))
}

/// Corrupts every slice of a volume with an independent trace drawn from the
/// config; traces are returned for provenance.
pub fn corrupt_volume(v: &Volume, cfg: &MotionConfig) -> Result<(Volume, Vec<MotionTrace>), MotionError> {
    cfg.validate()?;
    let (_, ny, nz) = v.dims();
    let results: Vec<(Array2<f32>, MotionTrace)> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let slice_cfg = MotionConfig { seed: derive_seed(cfg.seed, "motion-slice", z as u64), ..*cfg };
            let trace = sample_trace(&slice_cfg, ny)?;
            let out = corrupt_slice(&v.slice_xy(z), &trace)?;
            Ok((out, trace))
        })
        .collect::<Result<_, MotionError>>()?;
    let mut out = Volume::zeros(v.dims(), v.spacing())?;
    let mut traces = Vec::with_capacity(nz);
    for (z, (slice, trace)) in results.into_iter().enumerate() {
        out.set_slice_xy(z, &slice);
        traces.push(trace);
    }
    Ok((out, traces))
}

/// Writes a trace sidecar: one line per k-space row, `<index> <dx> <dy> <theta>`.
pub fn save_trace(trace: &MotionTrace, path: &Path) -> Result<(), MotionError> {
    let mut f = File::create(path)?;
    for (i, p) in trace.poses().iter().enumerate() {
        writeln!(f, "{} {} {} {}", i, p.dx, p.dy, p.theta)?;
    }
    Ok(())
}

/// Reads a trace sidecar written by [`save_trace`].
pub fn load_trace(path: &Path) -> Result<MotionTrace, MotionError> {
    let reader = BufReader::new(File::open(path)?);
    let mut poses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |msg: &str| MotionError::ParseError { line: idx + 1, msg: msg.to_string() };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err("expected 4 fields"));
        }
        let index: usize = fields[0].parse().map_err(|_| err("bad line index"))?;
        if index != poses.len() {
            return Err(err("line indices must be sequential from 0"));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|_| err("bad float"));
        poses.push(Pose { dx: parse(fields[1])?, dy: parse(fields[2])?, theta: parse(fields[3])? });
    }
    MotionTrace::from_poses(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn test_slice(n: usize) -> Array2<f32> {
        let cfg = PhantomConfig { dims: (n, n, 1), seed: 77, ..PhantomConfig::default() };
        let (v, _) = generate_phantom(&cfg).unwrap();
        v.slice_xy(0)
    }

    fn rms(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
        let sum: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum();
        (sum / a.len() as f64).sqrt()
    }

    #[test]
    fn zero_trace_is_identity_within_tolerance() {
        let s = test_slice(64);
        let trace = MotionTrace::from_poses(vec![Pose::ZERO; 64]).unwrap();
        let out = corrupt_slice(&s, &trace).unwrap();
        assert!(rms(&out, &s) < 1e-5, "rms {}", rms(&out, &s));
        assert_eq!(trace.severity(), 0.0);
    }

    #[test]
    fn global_integer_translation_matches_circular_shift() {
        let s = test_slice(64);
        let (dx, dy) = (3i64, -2i64);
        let pose = Pose { dx: dx as f64, dy: dy as f64, theta: 0.0 };
        let trace = MotionTrace::from_poses(vec![pose; 64]).unwrap();
        let out = corrupt_slice(&s, &trace).unwrap();
        let shifted = Array2::from_shape_fn((64, 64), |(y, x)| {
            let sx = (x as i64 - dx).rem_euclid(64) as usize;
            let sy = (y as i64 - dy).rem_euclid(64) as usize;
            s[[sy, sx]]
        });
        let e = rms(&out, &shifted);
        assert!(e < 1e-4, "rms vs circular shift: {e}");
    }

    #[test]
    fn event_block_produces_ghosting_on_event_rows() {
        let n = 64;
        // Centered bright square so the object has compact support.
        let s = Array2::from_shape_fn((n, n), |(y, x)| {
            if (20..44).contains(&y) && (20..44).contains(&x) { 0.8f32 } else { 0.0 }
        });
        let mut poses = vec![Pose::ZERO; n];
        for p in &mut poses[16..32] {
            *p = Pose { dx: 3.0, dy: 0.0, theta: 0.0 };
        }
        let trace = MotionTrace::from_poses(poses).unwrap();
        let out = corrupt_slice(&s, &trace).unwrap();
        let diff = &out - &s;
        assert!(rms(&out, &s) > 1e-3);

        // Independent oracle: naive DFT of the difference must put all its
        // energy on the event rows and their conjugate mirrors (taking the
        // real part after reassembly reflects half the ghost energy onto
        // mirrored phase-encode lines); untouched lines stay exact.
        let event_or_mirror =
            |l: usize| (16..32).contains(&l) || (16..32).contains(&((n - l) % n));
        let mut total = 0.0f64;
        let mut on_event_rows = 0.0f64;
        for m in 0..n {
            for l in 0..n {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let ang = -std::f64::consts::TAU
                            * (l as f64 * y as f64 / n as f64 + m as f64 * x as f64 / n as f64);
                        acc += Complex::from_polar(diff[[y, x]] as f64, ang);
                    }
                }
                let e = acc.norm_sqr();
                total += e;
                if event_or_mirror(l) {
                    on_event_rows += e;
                }
            }
        }
        assert!(on_event_rows / total > 0.999, "ratio {}", on_event_rows / total);
    }

    #[test]
    fn assembled_spectrum_energy_matches_parseval_for_pure_translation() {
        let s = test_slice(32).mapv(|x| x as f64);
        let mut poses = vec![Pose::ZERO; 32];
        for p in &mut poses[8..20] {
            *p = Pose { dx: 1.7, dy: -2.3, theta: 0.0 };
        }
        let trace = MotionTrace::from_poses(poses).unwrap();
        let spec = corrupt_spectrum(&s, &trace);
        // Unit-modulus phase ramps preserve per-line energy, so the total
        // spectral energy must equal N * image energy exactly as in the
        // motion-free case.
        let spec_energy: f64 = spec.iter().map(|c| c.norm_sqr()).sum();
        let img_energy: f64 = s.iter().map(|&x| x * x).sum();
        let expected = img_energy * (32.0 * 32.0);
        assert!(
            ((spec_energy - expected) / expected).abs() < 1e-6,
            "{spec_energy} vs {expected}"
        );
    }

    #[test]
    fn corruption_is_linear_in_the_image_for_fixed_trace() {
        let s1 = test_slice(48);
        let cfg = PhantomConfig { dims: (48, 48, 1), seed: 78, ..PhantomConfig::default() };
        let (v2, _) = generate_phantom(&cfg).unwrap();
        let s2 = v2.slice_xy(0);
        let mut poses = vec![Pose::ZERO; 48];
        for p in &mut poses[10..24] {
            *p = Pose { dx: 2.5, dy: 1.0, theta: 0.0 };
        }
        let trace = MotionTrace::from_poses(poses).unwrap();
        let (a, b) = (0.7f32, -0.3f32);
        let combo = s1.mapv(|x| a * x) + s2.mapv(|x| b * x);
        let lhs = corrupt_slice(&combo, &trace).unwrap();
        let rhs = corrupt_slice(&s1, &trace).unwrap().mapv(|x| a * x)
            + corrupt_slice(&s2, &trace).unwrap().mapv(|x| b * x);
        let scale = rhs.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let err = lhs
            .iter()
            .zip(rhs.iter())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err / scale < 1e-5, "relative error {}", err / scale);
    }

    #[test]
    fn sample_trace_respects_event_structure() {
        let cfg = MotionConfig { seed: 4, n_events: (1, 1), max_translation: 4.0, max_rotation: 0.05 };
        let trace = sample_trace(&cfg, 64).unwrap();
        let nonzero: Vec<usize> =
            (0..64).filter(|&i| !trace.poses()[i].is_zero()).collect();
        assert!(!nonzero.is_empty());
        // Exactly one contiguous block of identical poses.
        let first = nonzero[0];
        let last = *nonzero.last().unwrap();
        assert_eq!(nonzero.len(), last - first + 1);
        let pose = trace.poses()[first];
        assert!(nonzero.iter().all(|&i| trace.poses()[i] == pose));
        assert!(pose.dx.abs() <= 4.0 && pose.dy.abs() <= 4.0 && pose.theta.abs() <= 0.05);

        let zero_cfg = MotionConfig { n_events: (0, 0), ..cfg };
        let zt = sample_trace(&zero_cfg, 64).unwrap();
        assert!(zt.poses().iter().all(|p| p.is_zero()));
        assert_eq!(zt.severity(), 0.0);

        assert_eq!(sample_trace(&cfg, 64).unwrap(), trace);
    }

    #[test]
    fn severity_matches_definition() {
        let poses = vec![
            Pose { dx: 3.0, dy: 4.0, theta: 0.0 },
            Pose { dx: 0.0, dy: 0.0, theta: 0.1 },
        ];
        let trace = MotionTrace::from_poses(poses).unwrap();
        // r_ref = 1: mean of ||(3,4,0)|| = 5 and ||(0,0,0.1)|| = 0.1.
        assert!((trace.severity() - (5.0 + 0.1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_error_grows_when_translation_bound_doubles() {
        let s = test_slice(64);
        let mean_rms = |max_t: f64| {
            (0..20)
                .map(|seed| {
                    let cfg = MotionConfig {
                        seed,
                        n_events: (1, 3),
                        max_translation: max_t,
                        max_rotation: 0.0,
                    };
                    let trace = sample_trace(&cfg, 64).unwrap();
                    rms(&corrupt_slice(&s, &trace).unwrap(), &s)
                })
                .sum::<f64>()
                / 20.0
        };
        assert!(mean_rms(4.0) > mean_rms(2.0));
    }

    #[test]
    fn corrupt_volume_is_deterministic_and_reports_psnr() {
        let cfg = PhantomConfig { dims: (64, 64, 4), seed: 10, ..PhantomConfig::default() };
        let (v, _) = generate_phantom(&cfg).unwrap();
        let mcfg = MotionConfig { seed: 9, ..MotionConfig::default() };
        let (ca, ta) = corrupt_volume(&v, &mcfg).unwrap();
        let (cb, tb) = corrupt_volume(&v, &mcfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 4);
        assert!(ta.iter().any(|t| t.severity() > 0.0));

        let mse = v
            .data()
            .iter()
            .zip(ca.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / v.data().len() as f64;
        let psnr = 10.0 * (1.0 / mse).log10();
        assert!(psnr.is_finite() && psnr > 0.0);
        println!("default-config volume corruption PSNR: {psnr:.2} dB");

        let quiet = MotionConfig { n_events: (0, 0), ..MotionConfig::default() };
        let (cq, _) = corrupt_volume(&v, &quiet).unwrap();
        let rms_q = (v
            .data()
            .iter()
            .zip(cq.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / v.data().len() as f64)
            .sqrt();
        assert!(rms_q < 1e-5);
    }

    #[test]
    fn trace_sidecar_round_trips() {
        let cfg = MotionConfig { seed: 13, ..MotionConfig::default() };
        let trace = sample_trace(&cfg, 48).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.txt");
        save_trace(&trace, &path).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn corrupt_slice_rejects_wrong_trace_length() {
        let s = test_slice(32);
        let trace = MotionTrace::from_poses(vec![Pose::ZERO; 31]).unwrap();
        assert!(matches!(
            corrupt_slice(&s, &trace),
            Err(MotionError::LineCountMismatch { expected: 32, got: 31 })
        ));
    }
}
