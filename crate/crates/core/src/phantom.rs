//! Analytic brain-like phantoms with exactly known S0, R2* and frequency maps.
//!
//! Tissue geometry is given in normalised coordinates: along every axis the
//! voxel centres span `(-1, 1)`, so the same tissue list scales to any grid.
//! Tissues are painted in order and later entries overwrite earlier ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, RealMap, VoxelSize};

/// Region occupied by a tissue, in normalised `(slice, y, z)` coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TissueShape {
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    /// Region inside `outer` but outside `inner` (both centred on `center`).
    Shell { center: [f64; 3], outer: [f64; 3], inner: [f64; 3] },
}

fn inside_ellipsoid(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    let mut acc = 0.0;
    for a in 0..3 {
        let d = (p[a] - center[a]) / radii[a];
        acc += d * d;
    }
    acc <= 1.0
}

impl TissueShape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            TissueShape::Ellipsoid { center, radii } => inside_ellipsoid(p, center, radii),
            TissueShape::Shell { center, outer, inner } => {
                inside_ellipsoid(p, center, outer) && !inside_ellipsoid(p, center, inner)
            }
        }
    }

    fn check(&self) -> Result<()> {
        let radii: Vec<f64> = match self {
            TissueShape::Ellipsoid { radii, .. } => radii.to_vec(),
            TissueShape::Shell { outer, inner, .. } => outer.iter().chain(inner).copied().collect(),
        };
        if radii.iter().all(|r| r.is_finite() && *r > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("tissue radii must be positive: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueSpec {
    pub label: String,
    pub s0: f64,
    pub r2star_s_inv: f64,
    pub omega_rad_s: f64,
    pub shape: TissueShape,
}

impl TissueSpec {
    fn check(&self) -> Result<()> {
        if !(self.s0 >= 0.0 && self.s0.is_finite()) {
            return Err(Error::InvalidArgument(format!("{}: s0 must be >= 0", self.label)));
        }
        if !(0.0..=300.0).contains(&self.r2star_s_inv) {
            return Err(Error::InvalidArgument(format!(
                "{}: r2star {} outside [0, 300] 1/s",
                self.label, self.r2star_s_inv
            )));
        }
        if !self.omega_rad_s.is_finite() {
            return Err(Error::InvalidArgument(format!("{}: omega must be finite", self.label)));
        }
        self.shape.check()
    }
}

/// Brain-plausible 3T tissue classes: cortex-like background, white matter,
/// a ventricle and an iron-rich deep grey nucleus.
pub fn default_tissue_specs() -> Vec<TissueSpec> {
    let two_pi = 2.0 * std::f64::consts::PI;
    vec![
        TissueSpec {
            label: "grey_matter".into(),
            s0: 900.0,
            r2star_s_inv: 18.0,
            omega_rad_s: 0.0,
            shape: TissueShape::Ellipsoid { center: [0.0, 0.0, 0.0], radii: [1.6, 0.86, 0.72] },
        },
        TissueSpec {
            label: "white_matter".into(),
            s0: 700.0,
            r2star_s_inv: 26.0,
            omega_rad_s: -0.5 * two_pi,
            shape: TissueShape::Ellipsoid { center: [0.0, -0.02, 0.0], radii: [1.4, 0.66, 0.54] },
        },
        TissueSpec {
            label: "ventricle".into(),
            s0: 1100.0,
            r2star_s_inv: 10.0,
            omega_rad_s: 0.0,
            shape: TissueShape::Ellipsoid { center: [0.0, -0.12, 0.0], radii: [1.3, 0.3, 0.1] },
        },
        TissueSpec {
            label: "deep_grey".into(),
            s0: 600.0,
            r2star_s_inv: 48.0,
            omega_rad_s: 0.5 * two_pi,
            shape: TissueShape::Ellipsoid { center: [0.0, 0.2, 0.24], radii: [1.2, 0.16, 0.11] },
        },
    ]
}

/// Knobs of the generator beyond the tissue list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomOptions {
    pub voxel_size: VoxelSize,
    /// Peak relative amplitude of the smooth S0 / R2* modulation.
    pub variation: f64,
    /// Peak amplitude of each background-field bump, rad/s.
    pub field_amplitude_rad_s: f64,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self {
            voxel_size: VoxelSize::default(),
            variation: 0.1,
            field_amplitude_rad_s: 2.0 * std::f64::consts::PI * 12.0,
        }
    }
}

/// Ground-truth parameter maps for one synthetic subject.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomVolume {
    pub s0_map: RealMap,
    pub r2star_map: RealMap,
    pub omega_map: RealMap,
    /// Background-field gradients in rad/s per voxel along `[y, z, slice]`.
    pub field_gradient_maps: [RealMap; 3],
    pub brain_mask: BinaryMask,
    /// `0` outside the brain, `k + 1` where tissue `k` won.
    pub labels: Vec<u16>,
    pub voxel_size: VoxelSize,
}

impl PhantomVolume {
    pub fn dims(&self) -> [usize; 3] {
        self.s0_map.dims()
    }
}

/// Normalised coordinate of voxel centre `i` on an axis of length `n`.
#[inline]
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

/// Smooth random field bounded by 1 in magnitude.
struct SmoothField {
    terms: Vec<([f64; 3], f64, f64)>,
}

impl SmoothField {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let terms = weights
            .into_iter()
            .map(|w| {
                let freq = [
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (freq, phase, w / total)
            })
            .collect();
        Self { terms }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        self.terms
            .iter()
            .map(|(f, phase, w)| {
                w * (std::f64::consts::PI * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2]) + phase).cos()
            })
            .sum()
    }
}

/// Sum of Gaussian bumps placed around the inferior edge, in rad/s.
struct BackgroundField {
    bumps: Vec<([f64; 3], f64, f64)>,
}

impl BackgroundField {
    fn sample(rng: &mut ChaCha8Rng, amplitude: f64, extent_mm: [f64; 3]) -> Self {
        let count = rng.random_range(2..=4);
        let bumps = (0..count)
            .map(|_| {
                let center = [
                    rng.random_range(-0.5..0.5) * extent_mm[0],
                    rng.random_range(0.55..0.95) * extent_mm[1],
                    rng.random_range(-0.45..0.45) * extent_mm[2],
                ];
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let amp = sign * amplitude * rng.random_range(0.6..1.0);
                let sigma = rng.random_range(0.15..0.3) * extent_mm[1];
                (center, amp, sigma)
            })
            .collect();
        Self { bumps }
    }

    fn eval(&self, p_mm: [f64; 3]) -> f64 {
        self.bumps
            .iter()
            .map(|(c, amp, sigma)| {
                let d2: f64 = (0..3).map(|a| (p_mm[a] - c[a]).powi(2)).sum();
                amp * (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .sum()
    }
}

/// [`generate_phantom_with`] using [`PhantomOptions::default`].
pub fn generate_phantom(seed: u64, dims: [usize; 3], specs: &[TissueSpec]) -> Result<PhantomVolume> {
    generate_phantom_with(seed, dims, specs, &PhantomOptions::default())
}

/// Paints `specs` onto a `(slices, y, z)` grid.
///
/// Per-tissue S0 and R2* carry an independent smooth modulation of relative
/// amplitude `options.variation`; the frequency map is the tissue offset plus
/// a smooth background field whose central-difference gradients fill
/// `field_gradient_maps`. Everything outside the union of tissues is zero.
pub fn generate_phantom_with(
    seed: u64,
    dims: [usize; 3],
    specs: &[TissueSpec],
    options: &PhantomOptions,
) -> Result<PhantomVolume> {
    let [nl, ny, nz] = dims;
    if nl < 1 || ny < 32 || nz < 32 {
        return Err(Error::InvalidShape(format!("phantom needs at least (1, 32, 32), got {dims:?}")));
    }
    if specs.is_empty() {
        return Err(Error::InvalidArgument("tissue list is empty".into()));
    }
    if specs.len() >= u16::MAX as usize {
        return Err(Error::InvalidArgument("too many tissues".into()));
    }
    for s in specs {
        s.check()?;
    }
    if !(0.0..1.0).contains(&options.variation) {
        return Err(Error::InvalidArgument("variation must lie in [0, 1)".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0_fields: Vec<SmoothField> = specs.iter().map(|_| SmoothField::sample(&mut rng)).collect();
    let r2_fields: Vec<SmoothField> = specs.iter().map(|_| SmoothField::sample(&mut rng)).collect();
    let vs = options.voxel_size;
    let half_extent = [
        0.5 * nl as f64 * vs.dslice,
        0.5 * ny as f64 * vs.dy,
        0.5 * nz as f64 * vs.dz,
    ];
    let background = BackgroundField::sample(&mut rng, options.field_amplitude_rad_s, half_extent);
    let field_at = |l: f64, y: f64, z: f64| {
        background.eval([
            (l - 0.5 * (nl as f64 - 1.0)) * vs.dslice,
            (y - 0.5 * (ny as f64 - 1.0)) * vs.dy,
            (z - 0.5 * (nz as f64 - 1.0)) * vs.dz,
        ])
    };

    let n = nl * ny * nz;
    let mut s0 = vec![0.0; n];
    let mut r2 = vec![0.0; n];
    let mut omega = vec![0.0; n];
    let mut grads = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut labels = vec![0u16; n];
    let mut mask = vec![false; n];

    for l in 0..nl {
        for y in 0..ny {
            for z in 0..nz {
                let p = [normalized_coord(l, nl), normalized_coord(y, ny), normalized_coord(z, nz)];
                let Some(k) = specs.iter().rposition(|s| s.shape.contains(p)) else {
                    continue;
                };
                let i = (l * ny + y) * nz + z;
                let spec = &specs[k];
                labels[i] = k as u16 + 1;
                mask[i] = true;
                s0[i] = spec.s0 * (1.0 + options.variation * s0_fields[k].eval(p));
                r2[i] = (spec.r2star_s_inv * (1.0 + options.variation * r2_fields[k].eval(p)))
                    .clamp(0.0, 300.0);
                let (lf, yf, zf) = (l as f64, y as f64, z as f64);
                omega[i] = spec.omega_rad_s + field_at(lf, yf, zf);
                grads[0][i] = 0.5 * (field_at(lf, yf + 1.0, zf) - field_at(lf, yf - 1.0, zf));
                grads[1][i] = 0.5 * (field_at(lf, yf, zf + 1.0) - field_at(lf, yf, zf - 1.0));
                grads[2][i] = 0.5 * (field_at(lf + 1.0, yf, zf) - field_at(lf - 1.0, yf, zf));
            }
        }
    }

    let [gy, gz, gs] = grads;
    Ok(PhantomVolume {
        s0_map: RealMap::new(dims, s0)?,
        r2star_map: RealMap::new(dims, r2)?,
        omega_map: RealMap::new(dims, omega)?,
        field_gradient_maps: [RealMap::new(dims, gy)?, RealMap::new(dims, gz)?, RealMap::new(dims, gs)?],
        brain_mask: BinaryMask::new(dims.to_vec(), mask)?,
        labels,
        voxel_size: vs,
    })
}

/// Per-subject perturbation of a tissue list: geometry and parameter values
/// are jittered so that training subjects differ in anatomy, not only in
/// the smooth modulation.
pub fn jitter_specs(specs: &[TissueSpec], seed: u64, amount: f64) -> Vec<TissueSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    let mut jit = |scale: f64| 1.0 + amount * scale * rng.random_range(-1.0..1.0);
    specs
        .iter()
        .map(|s| {
            let mut out = s.clone();
            out.s0 = s.s0 * jit(1.0);
            out.r2star_s_inv = (s.r2star_s_inv * jit(2.0)).clamp(0.0, 300.0);
            let shift = |c: &mut [f64; 3], j: &mut dyn FnMut(f64) -> f64| {
                c[1] += j(0.5) - 1.0;
                c[2] += j(0.5) - 1.0;
            };
            let scale = |r: &mut [f64; 3], j: &mut dyn FnMut(f64) -> f64| {
                r[1] *= j(1.0);
                r[2] *= j(1.0);
            };
            match &mut out.shape {
                TissueShape::Ellipsoid { center, radii } => {
                    shift(center, &mut jit);
                    scale(radii, &mut jit);
                }
                TissueShape::Shell { center, outer, inner } => {
                    shift(center, &mut jit);
                    let f = jit(1.0);
                    outer[1] *= f;
                    outer[2] *= f;
                    inner[1] *= f;
                    inner[2] *= f;
                }
            }
            out
        })
        .collect()
}
