//! Mono-exponential mGRE forward model `S(t) = S0 · exp(−R2*·t − iωt) · F(t)`.
//!
//! `F(t)` is approximated by intra-voxel static dephasing: the background
//! field is expanded linearly inside each voxel, sampled on a regular
//! sub-grid and the complex exponential averaged. The voxel-mean offset is
//! carried by `ω`, so the sub-grid offsets are centred and `|F| ≤ 1`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::PhantomVolume;
use crate::tensor::{BinaryMask, MultiEchoVolume, RealMap, Shape, VoxelSize};

/// Uniform echo train `t_n = t1 + (n − 1)·dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EchoSchedule {
    pub t1_s: f64,
    pub dt_s: f64,
    pub n_echoes: usize,
}

impl Default for EchoSchedule {
    fn default() -> Self {
        Self { t1_s: 0.004, dt_s: 0.004, n_echoes: 10 }
    }
}

impl EchoSchedule {
    pub fn new(t1_s: f64, dt_s: f64, n_echoes: usize) -> Result<Self> {
        let es = Self { t1_s, dt_s, n_echoes };
        es.validate()?;
        Ok(es)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1_s > 0.0 && self.dt_s > 0.0 && self.n_echoes >= 2) {
            return Err(Error::InvalidArgument(format!(
                "echo schedule needs t1 > 0, dt > 0, n >= 2; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_echoes).map(|n| self.t1_s + n as f64 * self.dt_s).collect()
    }
}

/// Per-voxel, per-echo dephasing factor, laid out like a [`MultiEchoVolume`].
#[derive(Clone, Debug, PartialEq)]
pub struct FFunctionTable {
    shape: Shape,
    values: Vec<Complex64>,
}

impl FFunctionTable {
    pub fn new(shape: Shape, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "F table length {} does not match {:?}",
                values.len(),
                shape
            )));
        }
        Ok(Self { shape, values })
    }

    /// `F ≡ 1`.
    pub fn ones(shape: Shape) -> Self {
        Self { shape, values: vec![Complex64::new(1.0, 0.0); shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn voxel(&self, l: usize, y: usize, z: usize) -> &[Complex64] {
        let start = self.shape.voxel(l, y, z) * self.shape.echoes;
        &self.values[start..start + self.shape.echoes]
    }

    pub fn slice(&self, l: usize) -> FFunctionTable {
        let per = self.shape.plane() * self.shape.echoes;
        Self {
            shape: Shape { slices: 1, ..self.shape },
            values: self.values[l * per..(l + 1) * per].to_vec(),
        }
    }
}

/// Dephasing factor of one voxel with linear field gradients `g`
/// (rad/s per voxel along `[y, z, slice]`) at the given echo times.
pub fn dephasing_factor(g: [f64; 3], times: &[f64], subgrid: usize) -> Vec<Complex64> {
    if g == [0.0; 3] {
        return vec![Complex64::new(1.0, 0.0); times.len()];
    }
    let k = subgrid as f64;
    let offsets: Vec<f64> = (0..subgrid).map(|i| (i as f64 + 0.5) / k - 0.5).collect();
    let mut dw = Vec::with_capacity(subgrid.pow(3));
    for &a in &offsets {
        for &b in &offsets {
            for &c in &offsets {
                dw.push(g[0] * a + g[1] * b + g[2] * c);
            }
        }
    }
    let count = dw.len() as f64;
    times
        .iter()
        .map(|&t| {
            let sum: Complex64 = dw.iter().map(|&w| Complex64::from_polar(1.0, -w * t)).sum();
            sum / count
        })
        .collect()
}

/// `F(t_n)` for every voxel of a phantom, from its background-field gradients.
pub fn compute_f_function(ph: &PhantomVolume, es: &EchoSchedule, subgrid: usize) -> Result<FFunctionTable> {
    es.validate()?;
    if subgrid == 0 {
        return Err(Error::InvalidArgument("subgrid must be >= 1".into()));
    }
    let [nl, ny, nz] = ph.dims();
    let [gy, gz, gs] = &ph.field_gradient_maps;
    gradients_to_f(Shape::new(nl, ny, nz, es.n_echoes), [gy, gz, gs], &es.times(), subgrid)
}

fn gradients_to_f(shape: Shape, grads: [&RealMap; 3], times: &[f64], subgrid: usize) -> Result<FFunctionTable> {
    let values: Vec<Complex64> = (0..shape.voxels())
        .into_par_iter()
        .flat_map_iter(|i| {
            let g = [grads[0].data()[i], grads[1].data()[i], grads[2].data()[i]];
            dephasing_factor(g, times, subgrid)
        })
        .collect();
    FFunctionTable::new(shape, values)
}

/// Voxel-mean frequency from the phase evolution between consecutive echoes.
pub fn estimate_frequency(signal: &[Complex64], times: &[f64]) -> f64 {
    let n = signal.len();
    if n < 2 {
        return 0.0;
    }
    let acc: Complex64 = signal.windows(2).map(|w| w[1] * w[0].conj()).sum();
    if acc.norm() == 0.0 {
        return 0.0;
    }
    let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
    -acc.arg() / dt
}

/// Data-driven `F(t)`: the frequency map is estimated from the phase of `v`,
/// differentiated inside `mask` (one-sided at the mask edge) and passed
/// through the same sub-grid dephasing model.
pub fn estimate_f_function(v: &MultiEchoVolume, mask: &BinaryMask, subgrid: usize) -> Result<FFunctionTable> {
    let shape = v.shape();
    if mask.shape() != shape.map_dims() {
        return Err(Error::InvalidShape(format!(
            "mask {:?} does not match volume {:?}",
            mask.shape(),
            shape
        )));
    }
    if subgrid == 0 {
        return Err(Error::InvalidArgument("subgrid must be >= 1".into()));
    }
    let dims = shape.map_dims();
    let m = mask.values();
    let times = v.echo_times();
    let omega: Vec<f64> = (0..shape.voxels())
        .map(|i| {
            if m[i] {
                let s = &v.data()[i * shape.echoes..(i + 1) * shape.echoes];
                estimate_frequency(s, times)
            } else {
                0.0
            }
        })
        .collect();
    let omega = RealMap::new(dims, omega)?;
    let grads = masked_gradients(&omega, mask);
    gradients_to_f(shape, [&grads[0], &grads[1], &grads[2]], times, subgrid)
}

/// Finite-difference gradients `[d/dy, d/dz, d/dslice]` using only masked
/// neighbours: central where both exist, one-sided where one does.
pub fn masked_gradients(map: &RealMap, mask: &BinaryMask) -> [RealMap; 3] {
    let dims = map.dims();
    let m = mask.values();
    let mut out = [RealMap::zeros(dims), RealMap::zeros(dims), RealMap::zeros(dims)];
    // axis order of the output: y, z, slice
    let axes = [1usize, 2, 0];
    for l in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let i = map.index(l, y, z);
                if !m[i] {
                    continue;
                }
                for (slot, &axis) in axes.iter().enumerate() {
                    let pos = [l, y, z];
                    let neighbour = |delta: isize| -> Option<f64> {
                        let mut p = pos;
                        let c = p[axis] as isize + delta;
                        if c < 0 || c >= dims[axis] as isize {
                            return None;
                        }
                        p[axis] = c as usize;
                        let j = map.index(p[0], p[1], p[2]);
                        m[j].then(|| map.data()[j])
                    };
                    let here = map.data()[i];
                    let g = match (neighbour(-1), neighbour(1)) {
                        (Some(a), Some(b)) => 0.5 * (b - a),
                        (None, Some(b)) => b - here,
                        (Some(a), None) => here - a,
                        (None, None) => 0.0,
                    };
                    out[slot].data_mut()[i] = g;
                }
            }
        }
    }
    out
}

/// Evaluates the forward model for every voxel; zero outside the brain mask.
pub fn simulate_mgre(ph: &PhantomVolume, es: &EchoSchedule, f: &FFunctionTable) -> Result<MultiEchoVolume> {
    es.validate()?;
    let [nl, ny, nz] = ph.dims();
    let shape = Shape::new(nl, ny, nz, es.n_echoes);
    if f.shape() != shape {
        return Err(Error::InvalidShape(format!(
            "F table {:?} does not match phantom/schedule {:?}",
            f.shape(),
            shape
        )));
    }
    let times = es.times();
    let mask = ph.brain_mask.values();
    let mut data = vec![Complex64::new(0.0, 0.0); shape.len()];
    data.par_chunks_mut(shape.echoes).enumerate().for_each(|(i, out)| {
        if !mask[i] {
            return;
        }
        let s0 = ph.s0_map.data()[i];
        let r2 = ph.r2star_map.data()[i];
        let w = ph.omega_map.data()[i];
        let fv = &f.values()[i * shape.echoes..(i + 1) * shape.echoes];
        for n in 0..shape.echoes {
            out[n] = mono_exp(s0, r2, w, times[n]) * fv[n];
        }
    });
    MultiEchoVolume::new(shape, data, ph.voxel_size, times)
}

/// `S0 · exp(−R2*·t − iωt)`.
#[inline]
pub fn mono_exp(s0: f64, r2star: f64, omega: f64, t: f64) -> Complex64 {
    Complex64::from_polar(s0 * (-r2star * t).exp(), -omega * t)
}

/// Adds i.i.d. `N(0, sigma²)` noise to both channels.
pub fn add_complex_noise(v: &MultiEchoVolume, sigma: f64, seed: u64) -> Result<MultiEchoVolume> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = v
        .data()
        .iter()
        .map(|c| c + Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect();
    v.with_data(data)
}

/// Divides by the mean magnitude of the first echo of the middle slice and
/// returns that scale.
pub fn normalize_volume(v: &MultiEchoVolume) -> Result<(MultiEchoVolume, f64)> {
    let scale = normalization_scale(v)?;
    Ok((v.scaled(1.0 / scale), scale))
}

pub fn normalization_scale(v: &MultiEchoVolume) -> Result<f64> {
    let shape = v.shape();
    let mid = shape.slices / 2;
    let plane = shape.plane() as f64;
    let mut sum = 0.0;
    for y in 0..shape.ny {
        for z in 0..shape.nz {
            sum += v.at(mid, y, z, 0).norm();
        }
    }
    let scale = sum / plane;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::DegenerateInput(
            "first echo of the middle slice has zero mean magnitude".into(),
        ));
    }
    Ok(scale)
}

/// Convenience constructor for a volume with given metadata.
pub fn volume_from(shape: Shape, data: Vec<Complex64>, vs: VoxelSize, es: &EchoSchedule) -> Result<MultiEchoVolume> {
    MultiEchoVolume::new(shape, data, vs, es.times())
}
