//! Bit-exact volume and label-map I/O plus masking and patch extraction.
//!
//! Files use a minimal binary container (`NBV1`): 4-byte magic, little-endian
//! u32 dims (nx, ny, nz), little-endian f32 spacing (sx, sy, sz) in
//! millimeters, a one-byte dtype tag (0 = f32 image, 1 = u8 labels), then the
//! raw payload in row-major x-fastest order. No compression, no padding.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::util::reflect_index;

/// Number of distinct label values: background plus the eight tissue classes.
pub const NUM_CLASSES: usize = 9;

/// Class names indexed by label value.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background", "CB", "mWM", "BGT", "vCSF", "uWM", "BS", "cGM", "eCSF",
];

const MAGIC: [u8; 4] = *b"NBV1";
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Errors raised by volume construction, validation, and file I/O.
#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic bytes, not an NBV1 file")]
    BadMagic,
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("expected dtype tag {expected}, file has {got}")]
    WrongDtype { expected: u8, got: u8 },
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("non-finite voxel value at linear index {0}")]
    NonFinite(usize),
    #[error("all dims must be positive, got {0:?}")]
    ZeroDim((usize, usize, usize)),
    #[error("voxel count {got} does not match dims {dims:?}")]
    LengthMismatch { dims: (usize, usize, usize), got: usize },
    #[error("spacing components must be positive and finite, got {0:?}")]
    BadSpacing((f32, f32, f32)),
    #[error("label {label} out of range 0..=8 at linear index {index}")]
    LabelOutOfRange { label: u8, index: usize },
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("invalid patch spec: {0}")]
    BadPatchSpec(String),
    #[error("patch {width}x{height} does not fit in volume plane {nx}x{ny}")]
    PatchDoesNotFit { width: usize, height: usize, nx: usize, ny: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// 3D scalar image with physical voxel spacing in millimeters.
///
/// Voxels are stored row-major x-fastest; all values are finite f32 and the
/// constructor enforces it. Mutation through `data_mut` can break finiteness,
/// so `save_volume` re-validates before writing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        let n = dims.0 * dims.1 * dims.2;
        if data.len() != n {
            return Err(VolumeError::LengthMismatch { dims, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: (usize, usize, usize), spacing: (f32, f32, f32)) -> Result<Self, VolumeError> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        Ok(Self { dims, spacing, data: vec![0.0; dims.0 * dims.1 * dims.2] })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Copies one axial slice into a `[ny, nx]` array (row = y, col = x).
    pub fn slice_xy(&self, z: usize) -> Array2<f32> {
        let (nx, ny, _) = self.dims;
        Array2::from_shape_fn((ny, nx), |(y, x)| self.get(x, y, z))
    }

    /// Overwrites one axial slice from a `[ny, nx]` array.
    pub fn set_slice_xy(&mut self, z: usize, slice: &Array2<f32>) {
        let (nx, ny, _) = self.dims;
        assert_eq!(slice.dim(), (ny, nx), "slice shape mismatch");
        for y in 0..ny {
            for x in 0..nx {
                self.set(x, y, z, slice[[y, x]]);
            }
        }
    }
}

/// 3D grid of tissue-class indices aligned with a [`Volume`].
///
/// Label 0 is background; 1..=8 are CB, mWM, BGT, vCSF, uWM, BS, cGM, eCSF
/// in this fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        labels: Vec<u8>,
    ) -> Result<Self, VolumeError> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        let n = dims.0 * dims.1 * dims.2;
        if labels.len() != n {
            return Err(VolumeError::LengthMismatch { dims, got: labels.len() });
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(VolumeError::LabelOutOfRange { label: labels[i], index: i });
        }
        Ok(Self { dims, spacing, labels })
    }

    pub fn zeros(dims: (usize, usize, usize), spacing: (f32, f32, f32)) -> Result<Self, VolumeError> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        Ok(Self { dims, spacing, labels: vec![0; dims.0 * dims.1 * dims.2] })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, l: u8) {
        assert!((l as usize) < NUM_CLASSES);
        let i = self.index(x, y, z);
        self.labels[i] = l;
    }

    /// Copies one axial slice into a `[ny, nx]` array (row = y, col = x).
    pub fn slice_xy(&self, z: usize) -> Array2<u8> {
        let (nx, ny, _) = self.dims;
        Array2::from_shape_fn((ny, nx), |(y, x)| self.get(x, y, z))
    }

    /// Per-class voxel counts over the whole map.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

fn check_dims(dims: (usize, usize, usize)) -> Result<(), VolumeError> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(VolumeError::ZeroDim(dims));
    }
    Ok(())
}

fn check_spacing(spacing: (f32, f32, f32)) -> Result<(), VolumeError> {
    let ok = |s: f32| s.is_finite() && s > 0.0;
    if !(ok(spacing.0) && ok(spacing.1) && ok(spacing.2)) {
        return Err(VolumeError::BadSpacing(spacing));
    }
    Ok(())
}

fn write_header<W: Write>(
    w: &mut W,
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    dtype: u8,
) -> Result<(), VolumeError> {
    w.write_all(&MAGIC)?;
    for d in [dims.0, dims.1, dims.2] {
        let d = u32::try_from(d).map_err(|_| VolumeError::ZeroDim(dims))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for s in [spacing.0, spacing.1, spacing.2] {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&[dtype])?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<((usize, usize, usize), (f32, f32, f32), u8), VolumeError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, 4)?;
    if magic != MAGIC {
        return Err(VolumeError::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        read_exact_or_truncated(r, &mut buf4, 4)?;
        *d = u32::from_le_bytes(buf4) as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        read_exact_or_truncated(r, &mut buf4, 4)?;
        *s = f32::from_le_bytes(buf4);
    }
    let mut dtype = [0u8; 1];
    read_exact_or_truncated(r, &mut dtype, 1)?;
    Ok(((dims[0], dims[1], dims[2]), (spacing[0], spacing[1], spacing[2]), dtype[0]))
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], expected: usize) -> Result<(), VolumeError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            VolumeError::Truncated { expected, got: 0 }
        } else {
            VolumeError::Io(e)
        }
    })
}

/// Serializes a volume to a writer, rejecting non-finite voxels.
pub fn write_volume<W: Write>(w: &mut W, v: &Volume) -> Result<(), VolumeError> {
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(VolumeError::NonFinite(i));
    }
    write_header(w, v.dims, v.spacing, DTYPE_F32)?;
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Deserializes a volume written by [`write_volume`].
pub fn read_volume<R: Read>(r: &mut R) -> Result<Volume, VolumeError> {
    let (dims, spacing, dtype) = read_header(r)?;
    if dtype == DTYPE_U8 {
        return Err(VolumeError::WrongDtype { expected: DTYPE_F32, got: dtype });
    }
    if dtype != DTYPE_F32 {
        return Err(VolumeError::BadDtype(dtype));
    }
    check_dims(dims)?;
    let n = dims.0 * dims.1 * dims.2;
    let mut payload = vec![0u8; n * 4];
    let got = read_all(r, &mut payload)?;
    if got != payload.len() {
        return Err(VolumeError::Truncated { expected: payload.len(), got });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(dims, spacing, data)
}

/// Serializes a label map to a writer.
pub fn write_labels<W: Write>(w: &mut W, l: &LabelMap) -> Result<(), VolumeError> {
    if let Some(i) = l.labels.iter().position(|&x| x as usize >= NUM_CLASSES) {
        return Err(VolumeError::LabelOutOfRange { label: l.labels[i], index: i });
    }
    write_header(w, l.dims, l.spacing, DTYPE_U8)?;
    w.write_all(&l.labels)?;
    Ok(())
}

/// Deserializes a label map written by [`write_labels`].
pub fn read_labels<R: Read>(r: &mut R) -> Result<LabelMap, VolumeError> {
    let (dims, spacing, dtype) = read_header(r)?;
    if dtype == DTYPE_F32 {
        return Err(VolumeError::WrongDtype { expected: DTYPE_U8, got: dtype });
    }
    if dtype != DTYPE_U8 {
        return Err(VolumeError::BadDtype(dtype));
    }
    check_dims(dims)?;
    let n = dims.0 * dims.1 * dims.2;
    let mut labels = vec![0u8; n];
    let got = read_all(r, &mut labels)?;
    if got != labels.len() {
        return Err(VolumeError::Truncated { expected: labels.len(), got });
    }
    LabelMap::new(dims, spacing, labels)
}

fn read_all<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, VolumeError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

pub fn save_volume<P: AsRef<Path>>(v: &Volume, path: P) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_volume(&mut w, v)?;
    w.flush()?;
    Ok(())
}

pub fn load_volume<P: AsRef<Path>>(path: P) -> Result<Volume, VolumeError> {
    read_volume(&mut BufReader::new(File::open(path)?))
}

pub fn save_labels<P: AsRef<Path>>(l: &LabelMap, path: P) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_labels(&mut w, l)?;
    w.flush()?;
    Ok(())
}

pub fn load_labels<P: AsRef<Path>>(path: P) -> Result<LabelMap, VolumeError> {
    read_labels(&mut BufReader::new(File::open(path)?))
}

/// Zeros every voxel whose mask label is 0; nonzero labels keep the voxel.
pub fn apply_mask(v: &Volume, mask: &LabelMap) -> Result<Volume, VolumeError> {
    if v.dims != mask.dims {
        return Err(VolumeError::DimMismatch(v.dims, mask.dims));
    }
    let data = v
        .data
        .iter()
        .zip(&mask.labels)
        .map(|(&x, &m)| if m == 0 { 0.0 } else { x })
        .collect();
    Volume::new(v.dims, v.spacing, data)
}

/// In-plane patch geometry for training-sample extraction.
///
/// `depth` is the number of consecutive slices stacked as channels and must
/// be odd so every patch has a center slice; `stride` steps the in-plane
/// grid in both x and y.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub stride: usize,
}

impl PatchSpec {
    pub fn new(height: usize, width: usize, depth: usize, stride: usize) -> Result<Self, VolumeError> {
        let spec = Self { height, width, depth, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.height == 0 || self.width == 0 || self.stride == 0 {
            return Err(VolumeError::BadPatchSpec(
                "height, width, and stride must be >= 1".into(),
            ));
        }
        if self.depth == 0 || self.depth % 2 == 0 {
            return Err(VolumeError::BadPatchSpec("depth must be odd".into()));
        }
        Ok(())
    }
}

/// One training sample: `depth` stacked image slices and the center slice's
/// labels, both cropped to the patch window.
pub type Patch = (Array3<f32>, Array2<u8>);

/// Extracts patches on a regular in-plane grid with every slice as a center.
///
/// Grid positions run x fastest, then y, then center slice. Out-of-range
/// depth neighbors mirror at the volume ends without repeating the boundary
/// slice. Image patches have shape `[depth, height, width]`.
pub fn extract_patches(v: &Volume, l: &LabelMap, spec: &PatchSpec) -> Result<Vec<Patch>, VolumeError> {
    spec.validate()?;
    if v.dims != l.dims {
        return Err(VolumeError::DimMismatch(v.dims, l.dims));
    }
    let (nx, ny, nz) = v.dims;
    if spec.width > nx || spec.height > ny {
        return Err(VolumeError::PatchDoesNotFit {
            width: spec.width,
            height: spec.height,
            nx,
            ny,
        });
    }
    let half = (spec.depth / 2) as isize;
    let mut patches = Vec::new();
    for zc in 0..nz {
        for y0 in (0..=ny - spec.height).step_by(spec.stride) {
            for x0 in (0..=nx - spec.width).step_by(spec.stride) {
                let img = Array3::from_shape_fn(
                    (spec.depth, spec.height, spec.width),
                    |(d, py, px)| {
                        let z = reflect_index(zc as isize + d as isize - half, nz);
                        v.get(x0 + px, y0 + py, z)
                    },
                );
                let lab = Array2::from_shape_fn((spec.height, spec.width), |(py, px)| {
                    l.get(x0 + px, y0 + py, zc)
                });
                patches.push((img, lab));
            }
        }
    }
    Ok(patches)
}
