use std::time::Instant;

use mgre_core::fit::{fit_volume, FitConfig, FitMode};
use mgre_core::metrics::relative_error;
use mgre_core::phantom::{default_tissue_specs, generate_phantom, jitter_specs, PhantomVolume};
use mgre_core::signal::{compute_f_function, simulate_mgre, EchoSchedule, FFunctionTable};
use mgre_core::tensor::{MultiEchoVolume, RealMap};
use mgre_learn::data::{build_samples, f_magnitude_channels, magnitude_channels};
use mgre_learn::infer::{infer_bio, infer_img};
use mgre_learn::loss::{loss_bio, loss_bio_from_maps, loss_img};
use mgre_learn::train::{Schedule, TrainConfig};
use mgre_learn::{train, Arch, CorrectorModel, Dataset, Error};

struct Subject {
    ph: PhantomVolume,
    f: FFunctionTable,
    clean: MultiEchoVolume,
}

fn subject(seed: u64, dims: [usize; 3]) -> Subject {
    let es = EchoSchedule::default();
    let specs = jitter_specs(&default_tissue_specs(), seed, 0.1);
    let ph = generate_phantom(seed, dims, &specs).unwrap();
    let f = compute_f_function(&ph, &es, 3).unwrap();
    let clean = simulate_mgre(&ph, &es, &f).unwrap();
    Subject { ph, f, clean }
}

/// Motion-free pairs: the input is the clean volume itself.
fn clean_dataset(arch: Arch, seeds: std::ops::Range<u64>, dims: [usize; 3]) -> Dataset {
    let mut d = Dataset { samples: Vec::new(), times: EchoSchedule::default().times() };
    for seed in seeds {
        let s = subject(seed, dims);
        d.samples.extend(build_samples(arch, &s.clean, &s.clean, Some(&s.f), &s.ph.brain_mask).unwrap());
    }
    d
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, learning_rate: 2e-3, seed: 3, val_fraction: 0.25, ..TrainConfig::default() }
}

#[test]
fn bio_validation_loss_drops_tenfold() {
    let data = clean_dataset(Arch::Bio, 0..2, [4, 32, 32]);
    let model = CorrectorModel::unet(Arch::Bio, 10, 1).unwrap();
    let cfg = TrainConfig { schedule: Schedule::Cosine, ..quick(200) };
    let (_, hist) = train(&model, &data, &cfg).unwrap();
    let first = hist.epochs[0].val_loss.unwrap();
    let best = hist.epochs.iter().map(|r| r.val_loss.unwrap()).fold(f64::INFINITY, f64::min);
    assert!(best * 10.0 <= first, "val loss {first} -> {best}");
}

#[test]
fn zero_learning_rate_freezes_the_model() {
    let data = clean_dataset(Arch::Img, 0..1, [4, 32, 32]);
    let model = CorrectorModel::unet(Arch::Img, 10, 5).unwrap();
    let cfg = TrainConfig { learning_rate: 0.0, ..quick(3) };
    let (trained, hist) = train(&model, &data, &cfg).unwrap();
    assert_eq!(trained.params, model.params);
    let r0 = hist.epochs[0];
    assert!(hist.epochs.iter().all(|r| r.train_loss == r0.train_loss && r.val_loss == r0.val_loss));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let data = clean_dataset(Arch::Bio, 0..1, [4, 32, 32]);
    let model = CorrectorModel::unet(Arch::Bio, 10, 2).unwrap();
    let cfg = TrainConfig { crop: Some(16), ..quick(3) };
    let (a, ha) = train(&model, &data, &cfg).unwrap();
    let (b, hb) = train(&model, &data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(ha.to_csv(), hb.to_csv());
    let (c, _) = train(&model, &data, &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn img_model_trained_on_identity_pairs_stays_close() {
    let data = clean_dataset(Arch::Img, 0..2, [4, 32, 32]);
    let model = CorrectorModel::unet(Arch::Img, 10, 7).unwrap();
    let (trained, _) = train(&model, &data, &quick(5)).unwrap();
    let s = subject(50, [4, 32, 32]);
    let out = infer_img(&trained, &s.clean).unwrap();
    assert_eq!(out.shape(), s.clean.shape());
    let mask = s.ph.brain_mask.values();
    for n in 0..10 {
        let mut got = Vec::new();
        let mut want = Vec::new();
        for l in 0..4 {
            got.extend(out.magnitude_image(l, n));
            want.extend(s.clean.magnitude_image(l, n));
        }
        let re = relative_error(&got, &want, mask).unwrap();
        assert!(re < 2.0, "echo {n}: {re}%");
    }
}

#[test]
fn bio_inference_recovers_r2star_on_motion_free_data() {
    let data = clean_dataset(Arch::Bio, 0..8, [4, 64, 64]);
    let model = CorrectorModel::unet(Arch::Bio, 10, 1).unwrap();
    let cfg = TrainConfig { schedule: Schedule::Cosine, val_fraction: 0.0, crop: Some(32), ..quick(600) };
    let (trained, _) = train(&model, &data, &cfg).unwrap();
    let s = subject(60, [4, 64, 64]);
    let q = infer_bio(&trained, &s.clean).unwrap();
    assert_eq!(q.r2star_map.dims(), [4, 64, 64]);
    let re = relative_error(q.r2star_map.data(), s.ph.r2star_map.data(), s.ph.brain_mask.values()).unwrap();
    assert!(re < 10.0, "R2* error {re}%");
}

#[test]
fn bio_inference_is_fast() {
    let model = CorrectorModel::unet(Arch::Bio, 10, 1).unwrap();
    let s = subject(1, [1, 64, 64]);
    infer_bio(&model, &s.clean).unwrap();
    let reps = 5;
    let t = Instant::now();
    for _ in 0..reps {
        infer_bio(&model, &s.clean).unwrap();
    }
    let per_slice = t.elapsed().as_secs_f64() / reps as f64;
    assert!(per_slice < 0.05, "{:.1} ms per slice", per_slice * 1e3);
}

#[test]
fn bio_objective_matches_the_fit_residual() {
    let s = subject(9, [1, 32, 32]);
    let (q, _) = fit_volume(&s.clean, &s.f, &s.ph.brain_mask, &FitConfig::default(), FitMode::Magnitude).unwrap();
    let mask = s.ph.brain_mask.values();
    let times = s.clean.echo_times().to_vec();
    let loss = loss_bio_from_maps(
        q.s0_map.data(),
        q.r2star_map.data(),
        &magnitude_channels(&s.clean, 0),
        &f_magnitude_channels(&s.f, 0),
        &times,
        &mask,
    );
    let fit_sse: f64 = q.residual_map.data().iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r).sum();
    assert!((loss - fit_sse).abs() <= 1e-8 * fit_sse.max(1e-12), "{loss} vs {fit_sse}");

    // ground-truth maps leave nothing to explain on noiseless data
    let gt = loss_bio_from_maps(
        s.ph.s0_map.data(),
        s.ph.r2star_map.data(),
        &magnitude_channels(&s.clean, 0),
        &f_magnitude_channels(&s.f, 0),
        &times,
        &mask,
    );
    assert!(gt < 1e-18 * s.clean.frobenius_norm().powi(2), "{gt}");
}

#[test]
fn mode_mismatches_are_rejected() {
    let s = subject(2, [2, 32, 32]);
    let img = CorrectorModel::unet(Arch::Img, 10, 1).unwrap();
    let bio = CorrectorModel::unet(Arch::Bio, 10, 1).unwrap();
    assert!(matches!(infer_bio(&img, &s.clean), Err(Error::InvalidArgument(_))));
    assert!(matches!(infer_img(&bio, &s.clean), Err(Error::InvalidArgument(_))));
    let short = CorrectorModel::unet(Arch::Bio, 6, 1).unwrap();
    assert!(matches!(infer_bio(&short, &s.clean), Err(Error::InvalidShape(_))));

    let slice = s.clean.slice(0);
    let mask = s.ph.brain_mask.slice(0).to_vec();
    let es = EchoSchedule::default();
    assert!(loss_img(&bio, &slice, &slice, &mask).is_err());
    assert!(loss_bio(&img, &slice, &slice, &s.f.slice(0), &es, &mask).is_err());
    assert!(matches!(loss_img(&img, &s.clean, &s.clean, &mask), Err(Error::InvalidShape(_))));
    assert_eq!(loss_img(&img, &slice, &slice, &mask).unwrap(), 0.0);

    let q = infer_bio(&bio, &s.clean).unwrap();
    assert_eq!(q.s0_map.dims(), [2, 32, 32]);
    assert!(q.r2star_map.data().iter().all(|&r| r > 0.0));
    let _: &RealMap = &q.residual_map;
}
