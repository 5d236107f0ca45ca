//! k-space line-replacement motion corruption.
//!
//! Each [`MotionEvent`] pairs a rigid pose with the block of `ky` lines that
//! were acquired while the object held that pose. Corruption replaces those
//! lines (all `kz`, all echoes, every slice) with the k-space of the moved
//! volume.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    fft2_per_slice_echo, ifft2_per_slice_echo, mask_combine, BinaryMask, KSpaceVolume, MultiEchoVolume,
};

/// Largest in-plane shift drawn by [`sample_script`], in voxels.
pub const MAX_SHIFT_VOXELS: f64 = 15.0;
/// Largest rotation per axis drawn by [`sample_script`], in degrees.
pub const MAX_ROTATION_DEG: f64 = 15.0;
/// Maximum number of events and of lines per event for random scripts.
pub const MAX_EVENTS: usize = 10;
pub const MAX_EVENT_LINES: usize = 10;

/// Rotation about the volume centre followed by an in-plane translation.
///
/// `rotations_deg` are about the slice, `y` and `z` axes respectively.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidMotion {
    pub shift_voxels: [f64; 2],
    pub rotations_deg: [f64; 3],
}

impl RigidMotion {
    pub fn shift(dy: f64, dz: f64) -> Self {
        Self { shift_voxels: [dy, dz], rotations_deg: [0.0; 3] }
    }

    pub fn rotation(rx: f64, ry: f64, rz: f64) -> Self {
        Self { shift_voxels: [0.0; 2], rotations_deg: [rx, ry, rz] }
    }

    pub fn is_identity(&self) -> bool {
        self.shift_voxels == [0.0; 2] && self.rotations_deg == [0.0; 3]
    }

    /// Whether the pose lies inside the sampling ranges of [`sample_script`].
    pub fn within_protocol(&self) -> bool {
        self.shift_voxels.iter().all(|s| s.abs() <= MAX_SHIFT_VOXELS)
            && self.rotations_deg.iter().all(|r| (0.0..=MAX_ROTATION_DEG).contains(r))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionEvent {
    pub motion: RigidMotion,
    /// Replaced `ky` line indices.
    pub lines: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionLevel {
    Light,
    Moderate,
    Heavy,
    Random,
}

impl CorruptionLevel {
    /// Fraction of `ky` lines replaced, for the fixed-fraction levels.
    pub fn fraction(self) -> Option<f64> {
        match self {
            CorruptionLevel::Light => Some(0.08),
            CorruptionLevel::Moderate => Some(0.16),
            CorruptionLevel::Heavy => Some(0.24),
            CorruptionLevel::Random => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionLevel::Light => "light",
            CorruptionLevel::Moderate => "moderate",
            CorruptionLevel::Heavy => "heavy",
            CorruptionLevel::Random => "random",
        }
    }
}

impl fmt::Display for CorruptionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(Self::Light),
            "moderate" => Ok(Self::Moderate),
            "heavy" => Ok(Self::Heavy),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidArgument(format!("unknown corruption level {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub events: Vec<MotionEvent>,
    pub seed: u64,
    pub level: Option<CorruptionLevel>,
}

impl MotionScript {
    pub fn empty() -> Self {
        Self { events: Vec::new(), seed: 0, level: None }
    }

    pub fn total_lines(&self) -> usize {
        self.events.iter().map(|e| e.lines.len()).sum()
    }

    /// Checks line ranges and pairwise disjointness.
    pub fn validate(&self, ky: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (j, e) in self.events.iter().enumerate() {
            for &line in &e.lines {
                if line >= ky {
                    return Err(Error::InvalidScript(format!("event {j}: line {line} outside [0, {ky})")));
                }
                if !seen.insert(line) {
                    return Err(Error::InvalidScript(format!("line {line} is replaced by more than one event")));
                }
            }
            if !e.motion.shift_voxels.iter().chain(&e.motion.rotations_deg).all(|v| v.is_finite()) {
                return Err(Error::InvalidScript(format!("event {j}: non-finite motion parameter")));
            }
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `Rz · Ry · Rx` acting on `(slice, y, z)` coordinates.
fn rotation_matrix(deg: [f64; 3]) -> Mat3 {
    let [a, b, c] = deg.map(f64::to_radians);
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

/// Rotates about the volume centre in physical coordinates with trilinear
/// interpolation; samples falling outside the grid read as zero.
fn rotate(v: &MultiEchoVolume, deg: [f64; 3]) -> MultiEchoVolume {
    let shape = v.shape();
    let vs = v.voxel_size();
    let spacing = [vs.dslice, vs.dy, vs.dz];
    let dims = [shape.slices, shape.ny, shape.nz];
    let center = dims.map(|d| 0.5 * (d as f64 - 1.0));
    let r = rotation_matrix(deg);
    let ne = shape.echoes;
    let src = v.data();
    let zero = Complex64::new(0.0, 0.0);

    let mut out = vec![zero; shape.len()];
    out.par_chunks_mut(shape.plane() * ne).enumerate().for_each(|(l, plane)| {
        for y in 0..shape.ny {
            for z in 0..shape.nz {
                let p = [l as f64, y as f64, z as f64];
                let d: [f64; 3] = std::array::from_fn(|a| (p[a] - center[a]) * spacing[a]);
                // inverse map: source = Rᵀ · d
                let q: [f64; 3] = std::array::from_fn(|a| {
                    let mm = (0..3).map(|k| r[k][a] * d[k]).sum::<f64>();
                    mm / spacing[a] + center[a]
                });
                let dst = &mut plane[(y * shape.nz + z) * ne..(y * shape.nz + z + 1) * ne];
                let base = q.map(f64::floor);
                let frac: [f64; 3] = std::array::from_fn(|a| q[a] - base[a]);
                for corner in 0..8 {
                    let mut w = 1.0;
                    let mut idx = [0usize; 3];
                    let mut valid = true;
                    for a in 0..3 {
                        let bit = (corner >> a) & 1;
                        let c = base[a] as i64 + bit as i64;
                        w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                        if c < 0 || c >= dims[a] as i64 {
                            valid = false;
                            break;
                        }
                        idx[a] = c as usize;
                    }
                    if !valid || w == 0.0 {
                        continue;
                    }
                    let s = shape.index(idx[0], idx[1], idx[2], 0);
                    for n in 0..ne {
                        dst[n] += src[s + n] * w;
                    }
                }
            }
        }
    });
    v.with_data(out).expect("rotation preserves shape")
}

/// Multiplies centred k-space by `exp(−2πi (fy·dy/ny + fz·dz/nz))`, an exact
/// circular translation by `(dy, dz)` voxels.
fn translate_kspace(k: &mut KSpaceVolume, shift: [f64; 2]) {
    let shape = k.shape();
    let (ny, nz) = (shape.ny, shape.nz);
    let ramp_y: Vec<Complex64> = (0..ny)
        .map(|ky| {
            let f = ky as f64 - (ny / 2) as f64;
            Complex64::from_polar(1.0, -std::f64::consts::TAU * f * shift[0] / ny as f64)
        })
        .collect();
    let ramp_z: Vec<Complex64> = (0..nz)
        .map(|kz| {
            let f = kz as f64 - (nz / 2) as f64;
            Complex64::from_polar(1.0, -std::f64::consts::TAU * f * shift[1] / nz as f64)
        })
        .collect();
    let ne = shape.echoes;
    k.data_mut().chunks_mut(ne).enumerate().for_each(|(i, echoes)| {
        let p = i % (ny * nz);
        let ramp = ramp_y[p / nz] * ramp_z[p % nz];
        echoes.iter_mut().for_each(|c| *c *= ramp);
    });
}

/// k-space of the moved volume.
fn moved_kspace(v: &MultiEchoVolume, m: &RigidMotion) -> Result<KSpaceVolume> {
    let rotated = if m.rotations_deg == [0.0; 3] { v.clone() } else { rotate(v, m.rotations_deg) };
    let mut k = fft2_per_slice_echo(&rotated)?;
    if m.shift_voxels != [0.0; 2] {
        translate_kspace(&mut k, m.shift_voxels);
    }
    Ok(k)
}

/// Rigidly moves every echo of `v`: rotation about the volume centre, then
/// an exact in-plane translation.
pub fn apply_rigid(v: &MultiEchoVolume, m: &RigidMotion) -> Result<MultiEchoVolume> {
    if m.is_identity() {
        return Ok(v.clone());
    }
    if m.shift_voxels == [0.0; 2] {
        return Ok(rotate(v, m.rotations_deg));
    }
    ifft2_per_slice_echo(&moved_kspace(v, m)?)
}

/// Sequential corruption: each event replaces its lines in the k-space of
/// the previous partially corrupted result.
pub fn corrupt(v: &MultiEchoVolume, script: &MotionScript) -> Result<MultiEchoVolume> {
    let shape = v.shape();
    script.validate(shape.ny)?;
    let mut current = v.clone();
    for event in &script.events {
        if event.lines.is_empty() {
            continue;
        }
        let m = BinaryMask::from_lines(shape.ny, shape.nz, event.lines.iter().copied());
        let moved = moved_kspace(v, &event.motion)?;
        let k = fft2_per_slice_echo(&current)?;
        current = ifft2_per_slice_echo(&mask_combine(&k, &moved, &m)?)?;
    }
    Ok(current)
}

/// Batch corruption: the unreplaced lines of the original k-space plus every
/// event's lines of its moved k-space, transformed back once.
pub fn corrupt_batch(v: &MultiEchoVolume, script: &MotionScript) -> Result<MultiEchoVolume> {
    let shape = v.shape();
    script.validate(shape.ny)?;
    if script.total_lines() == 0 {
        return Ok(v.clone());
    }
    let mut k = fft2_per_slice_echo(v)?;
    for event in &script.events {
        if event.lines.is_empty() {
            continue;
        }
        let m = BinaryMask::from_lines(shape.ny, shape.nz, event.lines.iter().copied());
        let moved = moved_kspace(v, &event.motion)?;
        k = mask_combine(&k, &moved, &m)?;
    }
    ifft2_per_slice_echo(&k)
}

/// Splits `total` into `parts` positive block lengths, each at most `cap`.
fn random_composition(rng: &mut ChaCha8Rng, total: usize, parts: usize, cap: usize) -> Vec<usize> {
    let mut sizes = vec![1usize; parts];
    let mut left = total - parts;
    while left > 0 {
        let open: Vec<usize> = (0..parts).filter(|&i| sizes[i] < cap).collect();
        let i = open[rng.random_range(0..open.len())];
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Places blocks of the given lengths without overlap, uniformly over all
/// gap configurations, keeping the block order.
fn place_blocks(rng: &mut ChaCha8Rng, ky: usize, sizes: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    let free = ky - total;
    let mut slots: Vec<usize> = sample(rng, free + sizes.len(), sizes.len()).into_vec();
    slots.sort_unstable();
    let mut used = 0;
    slots
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(i, (&slot, &len))| {
            let start = slot - i + used;
            used += len;
            (start..start + len).collect()
        })
        .collect()
}

fn sample_motion(rng: &mut ChaCha8Rng) -> RigidMotion {
    RigidMotion {
        shift_voxels: [rng.random_range(0.0..=MAX_SHIFT_VOXELS), rng.random_range(0.0..=MAX_SHIFT_VOXELS)],
        rotations_deg: [
            rng.random_range(0.0..=MAX_ROTATION_DEG),
            rng.random_range(0.0..=MAX_ROTATION_DEG),
            rng.random_range(0.0..=MAX_ROTATION_DEG),
        ],
    }
}

/// Draws a motion script for a `ky`-line acquisition.
///
/// `Random` draws 1–10 events of 1–10 contiguous lines each (redrawn until
/// they fit in `ky`); the fixed levels replace `round(fraction · ky)` lines
/// split over a random number of events of at most 10 lines each.
pub fn sample_script(seed: u64, ky: usize, level: CorruptionLevel) -> Result<MotionScript> {
    if ky < 16 {
        return Err(Error::InvalidArgument(format!("need at least 16 ky lines, got {ky}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = match level.fraction() {
        Some(frac) => {
            let total = (frac * ky as f64).round() as usize;
            if total > ky {
                return Err(Error::InvalidArgument(format!("{total} lines requested from {ky}")));
            }
            if total == 0 {
                Vec::new()
            } else {
                let lo = total.div_ceil(MAX_EVENT_LINES).max(1);
                let hi = total.min(MAX_EVENTS);
                if lo > hi {
                    return Err(Error::InvalidArgument(format!(
                        "{total} lines cannot be split into at most {MAX_EVENTS} events of {MAX_EVENT_LINES} lines"
                    )));
                }
                let parts = rng.random_range(lo..=hi);
                random_composition(&mut rng, total, parts, MAX_EVENT_LINES)
            }
        }
        None => loop {
            let parts = rng.random_range(1..=MAX_EVENTS);
            let sizes: Vec<usize> = (0..parts).map(|_| rng.random_range(1..=MAX_EVENT_LINES)).collect();
            if sizes.iter().sum::<usize>() <= ky {
                break sizes;
            }
        },
    };
    let blocks = place_blocks(&mut rng, ky, &sizes);
    let events = blocks
        .into_iter()
        .map(|lines| MotionEvent { motion: sample_motion(&mut rng), lines })
        .collect();
    Ok(MotionScript { events, seed, level: Some(level) })
}
