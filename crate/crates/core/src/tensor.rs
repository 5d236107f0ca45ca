//! Dense multi-echo volumes, their k-space duals, real maps and binary masks.
//!
//! Volumes are indexed `(slice, y, z, echo)` with the echo index varying
//! fastest in memory, so the echo train of one voxel is a contiguous slice.
//! The 2D transforms act on the `(y, z)` plane of every `(slice, echo)` pair,
//! are centred (DC at `(ny / 2, nz / 2)`) and unitary.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logical extent of a multi-echo volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub slices: usize,
    pub ny: usize,
    pub nz: usize,
    pub echoes: usize,
}

impl Shape {
    pub fn new(slices: usize, ny: usize, nz: usize, echoes: usize) -> Self {
        Self { slices, ny, nz, echoes }
    }

    pub fn voxels(&self) -> usize {
        self.slices * self.ny * self.nz
    }

    pub fn len(&self) -> usize {
        self.voxels() * self.echoes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.ny * self.nz
    }

    /// Flat voxel index of `(slice, y, z)`.
    #[inline]
    pub fn voxel(&self, l: usize, y: usize, z: usize) -> usize {
        (l * self.ny + y) * self.nz + z
    }

    #[inline]
    pub fn index(&self, l: usize, y: usize, z: usize, n: usize) -> usize {
        self.voxel(l, y, z) * self.echoes + n
    }

    pub fn map_dims(&self) -> [usize; 3] {
        [self.slices, self.ny, self.nz]
    }

    fn check_nonzero(&self) -> Result<()> {
        if self.slices == 0 || self.ny == 0 || self.nz == 0 || self.echoes == 0 {
            return Err(Error::InvalidShape(format!("zero-sized dimension in {self:?}")));
        }
        Ok(())
    }
}

/// Physical voxel spacing in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelSize {
    pub dy: f64,
    pub dz: f64,
    pub dslice: f64,
}

impl VoxelSize {
    pub fn new(dy: f64, dz: f64, dslice: f64) -> Self {
        Self { dy, dz, dslice }
    }

    pub fn isotropic(d: f64) -> Self {
        Self::new(d, d, d)
    }

    fn check(&self) -> Result<()> {
        if [self.dy, self.dz, self.dslice].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("voxel size must be positive, got {self:?}")))
        }
    }
}

impl Default for VoxelSize {
    fn default() -> Self {
        Self::new(1.0, 1.0, 2.0)
    }
}

/// Complex mGRE image stack.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEchoVolume {
    shape: Shape,
    data: Vec<Complex64>,
    voxel_size: VoxelSize,
    echo_times_s: Vec<f64>,
}

impl MultiEchoVolume {
    pub fn new(
        shape: Shape,
        data: Vec<Complex64>,
        voxel_size: VoxelSize,
        echo_times_s: Vec<f64>,
    ) -> Result<Self> {
        shape.check_nonzero()?;
        if shape.echoes < 2 {
            return Err(Error::InvalidShape(format!("need at least 2 echoes, got {}", shape.echoes)));
        }
        if data.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        voxel_size.check()?;
        if echo_times_s.len() != shape.echoes {
            return Err(Error::InvalidShape(format!(
                "{} echo times for {} echoes",
                echo_times_s.len(),
                shape.echoes
            )));
        }
        if echo_times_s[0] <= 0.0 || echo_times_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "echo times must be positive and strictly increasing".into(),
            ));
        }
        Ok(Self { shape, data, voxel_size, echo_times_s })
    }

    pub fn zeros(shape: Shape, voxel_size: VoxelSize, echo_times_s: Vec<f64>) -> Result<Self> {
        Self::new(shape, vec![Complex64::new(0.0, 0.0); shape.len()], voxel_size, echo_times_s)
    }

    /// Same metadata, new samples.
    pub fn with_data(&self, data: Vec<Complex64>) -> Result<Self> {
        Self::new(self.shape, data, self.voxel_size, self.echo_times_s.clone())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn voxel_size(&self) -> VoxelSize {
        self.voxel_size
    }

    pub fn echo_times(&self) -> &[f64] {
        &self.echo_times_s
    }

    #[inline]
    pub fn at(&self, l: usize, y: usize, z: usize, n: usize) -> Complex64 {
        self.data[self.shape.index(l, y, z, n)]
    }

    /// Echo train of one voxel.
    pub fn voxel_signal(&self, l: usize, y: usize, z: usize) -> &[Complex64] {
        let start = self.shape.voxel(l, y, z) * self.shape.echoes;
        &self.data[start..start + self.shape.echoes]
    }

    /// One `(y, z)` image, row-major.
    pub fn echo_image(&self, l: usize, n: usize) -> Vec<Complex64> {
        extract_plane(&self.data, self.shape, l, n)
    }

    pub fn magnitude_image(&self, l: usize, n: usize) -> Vec<f64> {
        self.echo_image(l, n).iter().map(|c| c.norm()).collect()
    }

    /// Volume restricted to a single slice, keeping voxel size and echo times.
    pub fn slice(&self, l: usize) -> MultiEchoVolume {
        let per = self.shape.plane() * self.shape.echoes;
        let data = self.data[l * per..(l + 1) * per].to_vec();
        let shape = Shape { slices: 1, ..self.shape };
        Self { shape, data, voxel_size: self.voxel_size, echo_times_s: self.echo_times_s.clone() }
    }

    /// Stacks single-slice volumes that share metadata.
    pub fn stack(slices: &[MultiEchoVolume]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero slices".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * slices.len());
        let mut count = 0;
        for s in slices {
            if s.shape.ny != first.shape.ny
                || s.shape.nz != first.shape.nz
                || s.shape.echoes != first.shape.echoes
            {
                return Err(Error::InvalidShape("slices to stack differ in shape".into()));
            }
            count += s.shape.slices;
            data.extend_from_slice(&s.data);
        }
        let shape = Shape { slices: count, ..first.shape };
        Self::new(shape, data, first.voxel_size, first.echo_times_s.clone())
    }

    pub fn scaled(&self, factor: f64) -> MultiEchoVolume {
        let data = self.data.iter().map(|c| c * factor).collect();
        Self { data, ..self.clone() }
    }

    /// Element-wise magnitude, kept as a complex volume with zero phase.
    pub fn magnitude(&self) -> MultiEchoVolume {
        let data = self.data.iter().map(|c| Complex64::new(c.norm(), 0.0)).collect();
        Self { data, ..self.clone() }
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.data)
    }
}

/// Centred unitary k-space dual of a [`MultiEchoVolume`].
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceVolume {
    shape: Shape,
    data: Vec<Complex64>,
    voxel_size: VoxelSize,
    echo_times_s: Vec<f64>,
}

impl KSpaceVolume {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, l: usize, ky: usize, kz: usize, n: usize) -> Complex64 {
        self.data[self.shape.index(l, ky, kz, n)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.data)
    }
}

pub fn frobenius(data: &[Complex64]) -> f64 {
    data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖` (absolute when `b` is zero).
pub fn relative_frobenius(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let denom = frobenius(b);
    if denom > 0.0 {
        diff / denom
    } else {
        diff
    }
}

/// Real per-voxel map over `(slice, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealMap {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl RealMap {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidShape(format!("zero-sized map {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidShape(format!(
                "map data length {} does not match {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, l: usize, y: usize, z: usize) -> usize {
        (l * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn at(&self, l: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(l, y, z)]
    }

    pub fn slice(&self, l: usize) -> &[f64] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[l * plane..(l + 1) * plane]
    }
}

/// Binary mask over an arbitrary row-major grid.
///
/// k-space masks are `[ky, kz]`; brain masks are `[slices, y, z]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: Vec<usize>, values: Vec<bool>) -> Result<Self> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidShape(format!(
                "mask length {} does not match {:?}",
                values.len(),
                shape
            )));
        }
        Ok(Self { shape, values })
    }

    /// Builds a mask from `{0, 1}` bytes; any other value is rejected.
    pub fn from_u8(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let values = bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidArgument(format!("mask value {other} not in {{0,1}}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![false; n] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![true; n] }
    }

    /// k-space mask selecting whole `ky` lines (all `kz`).
    pub fn from_lines(ny: usize, nz: usize, lines: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::zeros(vec![ny, nz]);
        for ky in lines {
            m.values[ky * nz..(ky + 1) * nz].iter_mut().for_each(|v| *v = true);
        }
        m
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [bool] {
        &mut self.values
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|&v| v as u8).collect()
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self { shape: self.shape.clone(), values: self.values.iter().map(|v| !v).collect() }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "mask shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), values })
    }

    /// Element-wise product.
    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a || b)
    }

    /// Sub-mask for one slice of a `[slices, y, z]` mask.
    pub fn slice(&self, l: usize) -> &[bool] {
        let plane: usize = self.shape[1..].iter().product();
        &self.values[l * plane..(l + 1) * plane]
    }
}

/// Cached forward/inverse plans for one `(ny, nz)` plane.
struct Plan2 {
    ny: usize,
    nz: usize,
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
}

impl Plan2 {
    fn new(ny: usize, nz: usize, inverse: bool) -> Self {
        let mut planner = FftPlanner::new();
        let (row, col) = if inverse {
            (planner.plan_fft_inverse(nz), planner.plan_fft_inverse(ny))
        } else {
            (planner.plan_fft_forward(nz), planner.plan_fft_forward(ny))
        };
        Self { ny, nz, row, col }
    }

    /// In-place centred unitary transform of a row-major `ny × nz` plane.
    fn apply(&self, plane: &mut [Complex64]) {
        let (ny, nz) = (self.ny, self.nz);
        let mut tmp = ifftshift2(plane, ny, nz);
        for row in tmp.chunks_exact_mut(nz) {
            self.row.process(row);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); ny];
        for z in 0..nz {
            for y in 0..ny {
                column[y] = tmp[y * nz + z];
            }
            self.col.process(&mut column);
            for y in 0..ny {
                tmp[y * nz + z] = column[y];
            }
        }
        let scale = 1.0 / ((ny * nz) as f64).sqrt();
        let shifted = fftshift2(&tmp, ny, nz);
        for (dst, src) in plane.iter_mut().zip(shifted) {
            *dst = src * scale;
        }
    }
}

/// `out[(i + n/2) % n] = x[i]` along both axes.
fn fftshift2(x: &[Complex64], ny: usize, nz: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for y in 0..ny {
        let yy = (y + ny / 2) % ny;
        for z in 0..nz {
            out[yy * nz + (z + nz / 2) % nz] = x[y * nz + z];
        }
    }
    out
}

/// `out[i] = x[(i + n/2) % n]` along both axes.
fn ifftshift2(x: &[Complex64], ny: usize, nz: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for y in 0..ny {
        let yy = (y + ny / 2) % ny;
        for z in 0..nz {
            out[y * nz + z] = x[yy * nz + (z + nz / 2) % nz];
        }
    }
    out
}

pub(crate) fn extract_plane(data: &[Complex64], shape: Shape, l: usize, n: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(shape.plane());
    for y in 0..shape.ny {
        for z in 0..shape.nz {
            out.push(data[shape.index(l, y, z, n)]);
        }
    }
    out
}

/// Applies `f` to every `(slice, echo)` plane of `data`, in parallel.
fn map_planes(
    data: &[Complex64],
    shape: Shape,
    f: impl Fn(&mut [Complex64]) + Sync,
) -> Vec<Complex64> {
    let planes: Vec<Vec<Complex64>> = (0..shape.slices * shape.echoes)
        .into_par_iter()
        .map(|i| {
            let (l, n) = (i / shape.echoes, i % shape.echoes);
            let mut plane = extract_plane(data, shape, l, n);
            f(&mut plane);
            plane
        })
        .collect();
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for (i, plane) in planes.into_iter().enumerate() {
        let (l, n) = (i / shape.echoes, i % shape.echoes);
        for (p, v) in plane.into_iter().enumerate() {
            out[shape.index(l, p / shape.nz, p % shape.nz, n)] = v;
        }
    }
    out
}

/// Centred unitary 2D transform of every `(slice, echo)` image.
pub fn fft2_per_slice_echo(v: &MultiEchoVolume) -> Result<KSpaceVolume> {
    let shape = v.shape;
    shape.check_nonzero()?;
    let plan = Plan2::new(shape.ny, shape.nz, false);
    let data = map_planes(&v.data, shape, |p| plan.apply(p));
    Ok(KSpaceVolume {
        shape,
        data,
        voxel_size: v.voxel_size,
        echo_times_s: v.echo_times_s.clone(),
    })
}

/// Inverse of [`fft2_per_slice_echo`].
pub fn ifft2_per_slice_echo(k: &KSpaceVolume) -> Result<MultiEchoVolume> {
    let shape = k.shape;
    shape.check_nonzero()?;
    let plan = Plan2::new(shape.ny, shape.nz, true);
    let data = map_planes(&k.data, shape, |p| plan.apply(p));
    MultiEchoVolume::new(shape, data, k.voxel_size, k.echo_times_s.clone())
}

/// Centred unitary 2D transform of a single `ny × nz` plane.
pub fn fft2_plane(plane: &mut [Complex64], ny: usize, nz: usize, inverse: bool) {
    assert_eq!(plane.len(), ny * nz);
    Plan2::new(ny, nz, inverse).apply(plane);
}

/// Selects `replacement` where `m` is set and `base` elsewhere.
///
/// `m` is a `[ky, kz]` mask broadcast over slices and echoes.
pub fn mask_combine(
    base: &KSpaceVolume,
    replacement: &KSpaceVolume,
    m: &BinaryMask,
) -> Result<KSpaceVolume> {
    let shape = base.shape;
    if replacement.shape != shape {
        return Err(Error::InvalidShape(format!(
            "k-space shapes differ: {:?} vs {:?}",
            shape, replacement.shape
        )));
    }
    if m.shape() != [shape.ny, shape.nz] {
        return Err(Error::InvalidShape(format!(
            "mask shape {:?} does not match k-space plane {}x{}",
            m.shape(),
            shape.ny,
            shape.nz
        )));
    }
    let mut out = base.clone();
    for l in 0..shape.slices {
        for ky in 0..shape.ny {
            for kz in 0..shape.nz {
                if m.values()[ky * shape.nz + kz] {
                    let start = shape.index(l, ky, kz, 0);
                    let end = start + shape.echoes;
                    out.data[start..end].copy_from_slice(&replacement.data[start..end]);
                }
            }
        }
    }
    Ok(out)
}
