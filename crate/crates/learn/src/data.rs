//! Conversion between multi-echo volumes and channel-first slice tensors.

use mgre_core::signal::{normalization_scale, FFunctionTable};
use mgre_core::tensor::{BinaryMask, MultiEchoVolume};
use mgre_core::Complex64;

use crate::error::{Error, Result};
use crate::model::Arch;
use crate::tensor::Tensor;

/// `[Re s_1..s_N, Im s_1..s_N]` of slice `l` as a `[2N, ny, nz]` tensor.
pub fn complex_channels(v: &MultiEchoVolume, l: usize) -> Tensor {
    let s = v.shape();
    let (ne, plane) = (s.echoes, s.plane());
    let mut data = vec![0.0; 2 * ne * plane];
    for p in 0..plane {
        for n in 0..ne {
            let c = v.data()[(l * plane + p) * ne + n];
            data[n * plane + p] = c.re;
            data[(ne + n) * plane + p] = c.im;
        }
    }
    Tensor::new(vec![2 * ne, s.ny, s.nz], data)
}

/// Inverse of [`complex_channels`]: echo-fastest complex samples of one slice.
pub fn from_complex_channels(t: &Tensor) -> Vec<Complex64> {
    let (ne, plane) = (t.shape()[0] / 2, t.shape()[1] * t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(ne * plane);
    for p in 0..plane {
        for n in 0..ne {
            out.push(Complex64::new(d[n * plane + p], d[(ne + n) * plane + p]));
        }
    }
    out
}

/// `|s_1|..|s_N|` of slice `l` as an `[N, ny, nz]` tensor.
pub fn magnitude_channels(v: &MultiEchoVolume, l: usize) -> Tensor {
    let s = v.shape();
    let (ne, plane) = (s.echoes, s.plane());
    let mut data = vec![0.0; ne * plane];
    for p in 0..plane {
        for n in 0..ne {
            data[n * plane + p] = v.data()[(l * plane + p) * ne + n].norm();
        }
    }
    Tensor::new(vec![ne, s.ny, s.nz], data)
}

/// `|F|` of slice `l`, channel-first.
pub fn f_magnitude_channels(f: &FFunctionTable, l: usize) -> Vec<f64> {
    let s = f.shape();
    let (ne, plane) = (s.echoes, s.plane());
    let mut data = vec![0.0; ne * plane];
    for p in 0..plane {
        for n in 0..ne {
            data[n * plane + p] = f.values()[(l * plane + p) * ne + n].norm();
        }
    }
    data
}

/// One training pair. For img models `target` holds the clean complex
/// channels; for bio models it holds the clean magnitudes and `f_mag` the
/// matching `|F|` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
    pub f_mag: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Sample {
    /// Spatial window `[y0, y0+h) × [z0, z0+w)` of every field.
    pub fn crop(&self, y0: usize, z0: usize, h: usize, w: usize) -> Sample {
        let (ny, nz) = (self.input.shape()[1], self.input.shape()[2]);
        assert!(y0 + h <= ny && z0 + w <= nz);
        let crop_plane = |data: &[f64], c: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(c * h * w);
            for ci in 0..c {
                for y in y0..y0 + h {
                    out.extend_from_slice(&data[(ci * ny + y) * nz + z0..][..w]);
                }
            }
            out
        };
        let ci = self.input.shape()[0];
        let ct = self.target.shape()[0];
        let mut mask = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            mask.extend_from_slice(&self.mask[y * nz + z0..][..w]);
        }
        Sample {
            input: Tensor::new(vec![ci, h, w], crop_plane(self.input.data(), ci)),
            target: Tensor::new(vec![ct, h, w], crop_plane(self.target.data(), ct)),
            f_mag: if self.f_mag.is_empty() { Vec::new() } else { crop_plane(&self.f_mag, ct) },
            mask,
        }
    }
}

/// Per-slice training pairs from a corrupted/clean volume pair. Both volumes
/// are divided by the normalization scale of the corrupted one, the same
/// scaling inference applies. `f` is required for bio models.
pub fn build_samples(
    arch: Arch,
    corrupted: &MultiEchoVolume,
    clean: &MultiEchoVolume,
    f: Option<&FFunctionTable>,
    mask: &BinaryMask,
) -> Result<Vec<Sample>> {
    let s = corrupted.shape();
    if clean.shape() != s || mask.shape() != s.map_dims() {
        return Err(Error::InvalidShape("corrupted, clean and mask shapes differ".into()));
    }
    let scale = normalization_scale(corrupted)?;
    let (corrupted, clean) = (corrupted.scaled(1.0 / scale), clean.scaled(1.0 / scale));
    (0..s.slices)
        .map(|l| {
            let m = mask.slice(l).to_vec();
            Ok(match arch {
                Arch::Img => Sample {
                    input: complex_channels(&corrupted, l),
                    target: complex_channels(&clean, l),
                    f_mag: Vec::new(),
                    mask: m,
                },
                Arch::Bio => {
                    let f = f.ok_or_else(|| Error::InvalidArgument("bio samples need an F table".into()))?;
                    if f.shape() != s {
                        return Err(Error::InvalidShape("F table shape differs from the volume".into()));
                    }
                    Sample {
                        input: magnitude_channels(&corrupted, l),
                        target: magnitude_channels(&clean, l),
                        f_mag: f_magnitude_channels(f, l),
                        mask: m,
                    }
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mgre_core::tensor::{Shape, VoxelSize};

    fn volume() -> MultiEchoVolume {
        let shape = Shape::new(2, 4, 4, 3);
        let data = (0..shape.len()).map(|i| Complex64::new(i as f64, -(i as f64) * 0.5)).collect();
        MultiEchoVolume::new(shape, data, VoxelSize::default(), vec![0.004, 0.008, 0.012]).unwrap()
    }

    #[test]
    fn complex_channels_round_trip() {
        let v = volume();
        let t = complex_channels(&v, 1);
        assert_eq!(t.shape(), [6, 4, 4]);
        assert_eq!(from_complex_channels(&t), v.slice(1).data());
        // channel n, pixel p holds echo n of voxel p
        assert_eq!(t.data()[2 * 16 + 5], v.at(1, 1, 1, 2).re);
        assert_eq!(t.data()[(3 + 2) * 16 + 5], v.at(1, 1, 1, 2).im);
    }

    #[test]
    fn crop_selects_window() {
        let v = volume();
        let s = Sample {
            input: magnitude_channels(&v, 0),
            target: magnitude_channels(&v, 1),
            f_mag: vec![1.0; 48],
            mask: (0..16).map(|i| i % 3 == 0).collect(),
        };
        let c = s.crop(1, 2, 2, 2);
        assert_eq!(c.input.shape(), [3, 2, 2]);
        assert_eq!(c.input.data()[0], v.at(0, 1, 2, 0).norm());
        assert_eq!(c.target.data()[4 + 3], v.at(1, 2, 3, 1).norm());
        assert_eq!(c.mask, vec![6 % 3 == 0, 7 % 3 == 0, 10 % 3 == 0, 11 % 3 == 0]);
    }
}
