//! Training objectives.
//!
//! Both losses are plain sums of squares over masked voxels; nothing is
//! averaged, the learning rate absorbs the constant.

use mgre_core::signal::{EchoSchedule, FFunctionTable};
use mgre_core::tensor::MultiEchoVolume;

use crate::data::{complex_channels, f_magnitude_channels, magnitude_channels, Sample};
use crate::error::{Error, Result};
use crate::model::{gather_grads, Arch, CorrectorModel};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn mask_weights(mask: &[bool], channels: usize) -> Vec<f64> {
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    w.repeat(channels)
}

/// `Σ_mask Σ_c (out − target)²` recorded on the tape.
pub fn img_loss_on(tape: &mut Tape, out: Var, target: &Tensor, mask: &[bool]) -> Var {
    let c = target.shape()[0];
    let w = mask_weights(mask, c);
    let neg: Vec<f64> = target.data().iter().zip(&w).map(|(t, w)| -t * w).collect();
    let masked = tape.mul_const(out, &w);
    let diff = tape.add_const(masked, &neg);
    tape.sum_squares(diff)
}

/// `Σ_mask Σ_n (Ŝ0 · exp(−R̂2*·t_n) · |F_n| − |s_n|)²` recorded on the tape.
/// `out` is the `[2, h, w]` bio head with R̂2* in units of `r2_unit`.
pub fn bio_loss_on(
    tape: &mut Tape,
    out: Var,
    clean_mag: &Tensor,
    f_mag: &[f64],
    times: &[f64],
    r2_unit: f64,
    mask: &[bool],
) -> Var {
    let plane = mask.len();
    let s0 = tape.channels(out, 0, 1);
    let r2 = tape.channels(out, 1, 2);
    let mut total: Option<Var> = None;
    for (n, &t) in times.iter().enumerate() {
        let decay = tape.scale(r2, -t * r2_unit);
        let e = tape.exp(decay);
        let pred = tape.mul(s0, e);
        let w: Vec<f64> = (0..plane).map(|p| if mask[p] { f_mag[n * plane + p] } else { 0.0 }).collect();
        let neg: Vec<f64> =
            (0..plane).map(|p| if mask[p] { -clean_mag.data()[n * plane + p] } else { 0.0 }).collect();
        let weighted = tape.mul_const(pred, &w);
        let diff = tape.add_const(weighted, &neg);
        let ss = tape.sum_squares(diff);
        total = Some(match total {
            Some(acc) => tape.add(acc, ss),
            None => ss,
        });
    }
    total.expect("at least one echo")
}

fn check_sample(model: &CorrectorModel, s: &Sample, times: &[f64]) -> Result<()> {
    let sh = s.input.shape();
    let plane = sh.get(1).copied().unwrap_or(0) * sh.get(2).copied().unwrap_or(0);
    if s.mask.len() != plane || s.target.shape()[1..] != sh[1..] {
        return Err(Error::InvalidShape("sample fields disagree on the slice size".into()));
    }
    if model.arch == Arch::Bio && (times.len() != model.n_echoes() || s.f_mag.len() != times.len() * plane) {
        return Err(Error::InvalidShape("bio sample needs N echo times and N |F| channels".into()));
    }
    Ok(())
}

fn record(model: &CorrectorModel, tape: &mut Tape, s: &Sample, times: &[f64]) -> Result<(Var, Vec<Var>)> {
    check_sample(model, s, times)?;
    let x = tape.leaf(s.input.clone());
    let (out, leaves) = model.forward_on(tape, x)?;
    let loss = match model.arch {
        Arch::Img => img_loss_on(tape, out, &s.target, &s.mask),
        Arch::Bio => bio_loss_on(tape, out, &s.target, &s.f_mag, times, model.r2_unit, &s.mask),
    };
    Ok((loss, leaves))
}

/// Loss of `model` on one sample.
pub fn sample_loss(model: &CorrectorModel, s: &Sample, times: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = record(model, &mut tape, s, times)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and its gradient with respect to the flat parameter vector.
pub fn sample_loss_grad(model: &CorrectorModel, s: &Sample, times: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let (loss, leaves) = record(model, &mut tape, s, times)?;
    let grads = tape.backward(loss);
    Ok((tape.value(loss).data()[0], gather_grads(&tape, &grads, &leaves)))
}

fn single_slice(v: &MultiEchoVolume) -> Result<()> {
    if v.shape().slices != 1 {
        return Err(Error::InvalidShape(format!("expected a single slice, got {}", v.shape().slices)));
    }
    Ok(())
}

/// Image-domain loss of one slice pair; `mask` is `ny·nz`.
pub fn loss_img(model: &CorrectorModel, corrupted: &MultiEchoVolume, clean: &MultiEchoVolume, mask: &[bool]) -> Result<f64> {
    single_slice(corrupted)?;
    single_slice(clean)?;
    if model.arch != Arch::Img {
        return Err(Error::InvalidArgument("loss_img needs an img model".into()));
    }
    let s = Sample {
        input: complex_channels(corrupted, 0),
        target: complex_channels(clean, 0),
        f_mag: Vec::new(),
        mask: mask.to_vec(),
    };
    sample_loss(model, &s, corrupted.echo_times())
}

/// Model-based loss of one slice: the network sees the corrupted magnitudes
/// and is scored through the forward model against the clean magnitudes.
pub fn loss_bio(
    model: &CorrectorModel,
    corrupted: &MultiEchoVolume,
    clean: &MultiEchoVolume,
    f: &FFunctionTable,
    es: &EchoSchedule,
    mask: &[bool],
) -> Result<f64> {
    single_slice(corrupted)?;
    single_slice(clean)?;
    if model.arch != Arch::Bio {
        return Err(Error::InvalidArgument("loss_bio needs a bio model".into()));
    }
    let s = Sample {
        input: magnitude_channels(corrupted, 0),
        target: magnitude_channels(clean, 0),
        f_mag: f_magnitude_channels(f, 0),
        mask: mask.to_vec(),
    };
    sample_loss(model, &s, &es.times())
}

/// The bio objective evaluated on explicit `(S0, R2*)` maps (R2* in s⁻¹),
/// without a network.
pub fn loss_bio_from_maps(
    s0: &[f64],
    r2star: &[f64],
    clean_mag: &Tensor,
    f_mag: &[f64],
    times: &[f64],
    mask: &[bool],
) -> f64 {
    let plane = mask.len();
    let mut total = 0.0;
    for n in 0..times.len() {
        let mut ss = 0.0;
        for p in (0..plane).filter(|&p| mask[p]) {
            let pred = s0[p] * (-r2star[p] * times[n]).exp() * f_mag[n * plane + p];
            ss += (pred - clean_mag.data()[n * plane + p]).powi(2);
        }
        total += ss;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_layer(arch: Arch, n: usize, seed: u64) -> CorrectorModel {
        let (cin, cout) = arch.channels(n);
        let layers = vec![Layer::Conv { cin, cout: 4, k: 3 }, Layer::Relu, Layer::Conv { cin: 4, cout, k: 3 }];
        let mut m = CorrectorModel::with_layers(arch, n, layers, seed).unwrap();
        // break the zero init of the residual head so every weight matters
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        m.params.iter_mut().for_each(|p| *p += rng.random_range(-0.2..0.2));
        m
    }

    fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    fn fd_check(model: &CorrectorModel, s: &Sample, times: &[f64]) {
        let (_, grad) = sample_loss_grad(model, s, times).unwrap();
        assert_eq!(grad.len(), model.n_params());
        let h = 1e-6;
        for i in 0..model.n_params() {
            let (mut plus, mut minus) = (model.clone(), model.clone());
            plus.params[i] += h;
            minus.params[i] -= h;
            let fd = (sample_loss(&plus, s, times).unwrap() - sample_loss(&minus, s, times).unwrap()) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(grad[i].abs()).max(1e-3);
            assert!((fd - grad[i]).abs() <= tol, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn bio_loss_parameter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4;
        let times: Vec<f64> = (0..n).map(|i| 0.004 * (i + 1) as f64).collect();
        let model = two_layer(Arch::Bio, n, 3);
        let s = Sample {
            input: random_tensor(&[n, 8, 8], 0.2, 1.5, &mut rng),
            target: random_tensor(&[n, 8, 8], 0.2, 1.5, &mut rng),
            f_mag: (0..n * 64).map(|_| rng.random_range(0.8..1.0)).collect(),
            mask: (0..64).map(|i| i % 5 != 0).collect(),
        };
        fd_check(&model, &s, &times);
    }

    #[test]
    fn img_loss_parameter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 3;
        let model = two_layer(Arch::Img, n, 4);
        let s = Sample {
            input: random_tensor(&[2 * n, 8, 8], -1.0, 1.0, &mut rng),
            target: random_tensor(&[2 * n, 8, 8], -1.0, 1.0, &mut rng),
            f_mag: Vec::new(),
            mask: (0..64).map(|i| i % 7 != 3).collect(),
        };
        fd_check(&model, &s, &[0.004, 0.008, 0.012]);
    }

    #[test]
    fn img_loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2;
        let model = two_layer(Arch::Img, n, 6);
        let s = Sample {
            input: random_tensor(&[4, 4, 4], -1.0, 1.0, &mut rng),
            target: random_tensor(&[4, 4, 4], -1.0, 1.0, &mut rng),
            f_mag: Vec::new(),
            mask: (0..16).map(|i| i != 5 && i != 10).collect(),
        };
        let out = model.forward(&s.input).unwrap();
        let mut oracle = 0.0;
        for c in 0..4 {
            for p in 0..16 {
                if s.mask[p] {
                    oracle += (out.data()[c * 16 + p] - s.target.data()[c * 16 + p]).powi(2);
                }
            }
        }
        let loss = sample_loss(&model, &s, &[0.004, 0.008]).unwrap();
        assert!((loss - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn bio_loss_with_unit_f_matches_exponential_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 5;
        let times: Vec<f64> = (0..n).map(|i| 0.003 + 0.005 * i as f64).collect();
        let model = two_layer(Arch::Bio, n, 8);
        let s = Sample {
            input: random_tensor(&[n, 4, 4], 0.1, 1.0, &mut rng),
            target: random_tensor(&[n, 4, 4], 0.1, 1.0, &mut rng),
            f_mag: vec![1.0; n * 16],
            mask: vec![true; 16],
        };
        let out = model.forward(&s.input).unwrap();
        let mut oracle = 0.0;
        for p in 0..16 {
            let (s0, r2) = (out.data()[p], out.data()[16 + p] * model.r2_unit);
            for (k, t) in times.iter().enumerate() {
                oracle += (s0 * (-r2 * t).exp() - s.target.data()[k * 16 + p]).powi(2);
            }
        }
        let loss = sample_loss(&model, &s, &times).unwrap();
        assert!((loss - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn losses_ignore_targets_outside_the_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 3;
        let times = [0.004, 0.008, 0.012];
        let mask: Vec<bool> = (0..64).map(|i| i < 40).collect();
        for arch in [Arch::Img, Arch::Bio] {
            let model = two_layer(arch, n, 10);
            let (cin, _) = arch.channels(n);
            let ct = if arch == Arch::Img { 2 * n } else { n };
            let mut s = Sample {
                input: random_tensor(&[cin, 8, 8], 0.1, 1.0, &mut rng),
                target: random_tensor(&[ct, 8, 8], 0.1, 1.0, &mut rng),
                f_mag: vec![0.9; n * 64],
                mask: mask.clone(),
            };
            let before = sample_loss(&model, &s, &times).unwrap();
            for c in 0..ct {
                for p in 40..64 {
                    s.target.data_mut()[c * 64 + p] = rng.random_range(-100.0..100.0);
                }
            }
            assert_eq!(sample_loss(&model, &s, &times).unwrap(), before);
        }
    }

    #[test]
    fn exact_outputs_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 4;
        let times: Vec<f64> = (0..n).map(|i| 0.004 * (i + 1) as f64).collect();
        let model = two_layer(Arch::Bio, n, 12);
        let input = random_tensor(&[n, 8, 8], 0.1, 1.0, &mut rng);
        let out = model.forward(&input).unwrap();
        let f_mag: Vec<f64> = (0..n * 64).map(|_| rng.random_range(0.7..1.0)).collect();
        let mut target = vec![0.0; n * 64];
        for p in 0..64 {
            for (k, t) in times.iter().enumerate() {
                target[k * 64 + p] = out.data()[p] * (-out.data()[64 + p] * model.r2_unit * t).exp() * f_mag[k * 64 + p];
            }
        }
        let s = Sample { input, target: Tensor::new(vec![n, 8, 8], target), f_mag, mask: vec![true; 64] };
        assert!(sample_loss(&model, &s, &times).unwrap() < 1e-10);

        let img = two_layer(Arch::Img, 2, 13);
        let x = random_tensor(&[4, 8, 8], -1.0, 1.0, &mut rng);
        let s = Sample { target: img.forward(&x).unwrap(), input: x, f_mag: Vec::new(), mask: vec![true; 64] };
        assert_eq!(sample_loss(&img, &s, &[0.004, 0.008]).unwrap(), 0.0);
    }

    #[test]
    fn mode_and_shape_mismatches_are_errors() {
        let model = two_layer(Arch::Bio, 3, 0);
        let s = Sample {
            input: Tensor::zeros(vec![3, 8, 8]),
            target: Tensor::zeros(vec![3, 8, 8]),
            f_mag: vec![1.0; 10],
            mask: vec![true; 64],
        };
        assert!(sample_loss(&model, &s, &[0.004, 0.008, 0.012]).is_err());
    }
}
