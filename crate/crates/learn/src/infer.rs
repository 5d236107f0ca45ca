//! Slice-by-slice application of trained models to whole volumes.

use mgre_core::fit::QuantMaps;
use mgre_core::signal::normalization_scale;
use mgre_core::tensor::{BinaryMask, MultiEchoVolume, RealMap};
use rayon::prelude::*;

use crate::data::{complex_channels, from_complex_channels, magnitude_channels};
use crate::error::{Error, Result};
use crate::model::{Arch, CorrectorModel};

fn check_arch(model: &CorrectorModel, arch: Arch, v: &MultiEchoVolume) -> Result<()> {
    if model.arch != arch {
        return Err(Error::InvalidArgument(format!("expected a {arch:?} model, got {:?}", model.arch)));
    }
    if v.shape().echoes != model.n_echoes() {
        return Err(Error::InvalidShape(format!(
            "model takes {} echoes, volume has {}",
            model.n_echoes(),
            v.shape().echoes
        )));
    }
    Ok(())
}

/// Motion-corrected complex volume. The input is normalized before the
/// network and the scale restored afterwards.
pub fn infer_img(model: &CorrectorModel, v: &MultiEchoVolume) -> Result<MultiEchoVolume> {
    check_arch(model, Arch::Img, v)?;
    let scale = normalization_scale(v)?;
    let norm = v.scaled(1.0 / scale);
    let slices: Vec<Result<Vec<_>>> = (0..v.shape().slices)
        .into_par_iter()
        .map(|l| {
            let out = model.forward(&complex_channels(&norm, l))?;
            Ok(from_complex_channels(&out).into_iter().map(|c| c * scale).collect())
        })
        .collect();
    let mut data = Vec::with_capacity(v.shape().len());
    for s in slices {
        data.extend(s?);
    }
    Ok(v.with_data(data)?)
}

/// `(Ŝ0, R̂2*)` maps from magnitudes alone; no mask or `F` is used, so the
/// returned mask covers the whole volume and the residual map is zero.
pub fn infer_bio(model: &CorrectorModel, v: &MultiEchoVolume) -> Result<QuantMaps> {
    check_arch(model, Arch::Bio, v)?;
    let scale = normalization_scale(v)?;
    let norm = v.scaled(1.0 / scale);
    let s = v.shape();
    let plane = s.plane();
    let slices: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..s.slices)
        .into_par_iter()
        .map(|l| {
            let out = model.forward(&magnitude_channels(&norm, l))?;
            let (s0, r2) = out.data().split_at(plane);
            Ok((s0.iter().map(|v| v * scale).collect(), r2.iter().map(|v| v * model.r2_unit).collect()))
        })
        .collect();
    let (mut s0, mut r2) = (Vec::with_capacity(s.voxels()), Vec::with_capacity(s.voxels()));
    for sl in slices {
        let (a, b) = sl?;
        s0.extend(a);
        r2.extend(b);
    }
    let dims = s.map_dims();
    Ok(QuantMaps {
        s0_map: RealMap::new(dims, s0)?,
        r2star_map: RealMap::new(dims, r2)?,
        omega_map: None,
        residual_map: RealMap::zeros(dims),
        mask: BinaryMask::ones(dims.to_vec()),
    })
}
