use mgre_core::fit::{fit_magnitude_values, fit_volume, FitConfig, FitMode};
use mgre_core::metrics::relative_error;
use mgre_core::motion::{corrupt, corrupt_batch, MotionEvent, MotionScript, RigidMotion};
use mgre_core::phantom::{default_tissue_specs, generate_phantom};
use mgre_core::signal::{compute_f_function, normalize_volume, simulate_mgre, EchoSchedule};
use mgre_core::tensor::{
    fft2_per_slice_echo, ifft2_per_slice_echo, mask_combine, relative_frobenius, BinaryMask, MultiEchoVolume, Shape,
    VoxelSize,
};
use mgre_core::Complex64;
use proptest::prelude::*;

fn volume(shape: Shape, values: &[(f64, f64)]) -> MultiEchoVolume {
    let data = (0..shape.len()).map(|i| Complex64::new(values[i % values.len()].0, values[i % values.len()].1)).collect();
    let times = (1..=shape.echoes).map(|n| 0.004 * n as f64).collect();
    MultiEchoVolume::new(shape, data, VoxelSize::default(), times).unwrap()
}

// Exact rational point-in-ellipsoid counts of the default tissue list on a
// 4×64×64 grid, last tissue wins: background, grey, white, ventricle, deep grey.
const TISSUE_COUNTS: [usize; 5] = [9400, 3128, 3368, 316, 172];

#[test]
fn default_phantom_tissue_voxel_counts() {
    let ph = generate_phantom(0, [4, 64, 64], &default_tissue_specs()).unwrap();
    let mut counts = [0usize; 5];
    for &l in &ph.labels {
        counts[l as usize] += 1;
    }
    assert_eq!(counts, TISSUE_COUNTS);
    assert_eq!(ph.brain_mask.count(), 64 * 64 * 4 - TISSUE_COUNTS[0]);
}

#[test]
fn noiseless_phantom_fit_recovers_maps() {
    let es = EchoSchedule::default();
    let ph = generate_phantom(3, [4, 64, 64], &default_tissue_specs()).unwrap();
    let f = compute_f_function(&ph, &es, 5).unwrap();
    let v = simulate_mgre(&ph, &es, &f).unwrap();
    let (q, stats) = fit_volume(&v, &f, &ph.brain_mask, &FitConfig::default(), FitMode::Magnitude).unwrap();
    let mask = ph.brain_mask.values();
    assert!(relative_error(q.r2star_map.data(), ph.r2star_map.data(), mask).unwrap() < 0.5);
    assert!(relative_error(q.s0_map.data(), ph.s0_map.data(), mask).unwrap() < 0.5);
    assert_eq!(stats.voxels, ph.brain_mask.count());
    assert!(q.r2star_map.data().iter().all(|r| (0.0..=300.0).contains(r)));
    assert!(q.r2star_map.data().iter().zip(mask).all(|(r, &m)| m || *r == 0.0));
}

#[test]
fn normalized_fit_is_scale_invariant() {
    let es = EchoSchedule::default();
    let ph = generate_phantom(8, [2, 32, 32], &default_tissue_specs()).unwrap();
    let f = compute_f_function(&ph, &es, 3).unwrap();
    let clean = simulate_mgre(&ph, &es, &f).unwrap();
    let v = mgre_core::signal::add_complex_noise(&clean, 10.0, 1).unwrap();
    let r2 = |v: &MultiEchoVolume| {
        let (n, _) = normalize_volume(v).unwrap();
        fit_volume(&n, &f, &ph.brain_mask, &FitConfig::default(), FitMode::Magnitude).unwrap().0.r2star_map
    };
    let base = r2(&v);
    for c in [1e-4, 3.3, 2e5] {
        let other = r2(&v.scaled(c));
        let worst = other.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "scale {c}: {worst}");
    }
}

fn event_strategy() -> impl Strategy<Value = (usize, usize, [f64; 2], f64)> {
    (0usize..16, 1usize..4, [-3.0f64..3.0, -3.0f64..3.0], 0.0f64..15.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fft_round_trip_and_parseval(values in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40)) {
        let v = volume(Shape::new(2, 8, 6, 3), &values);
        let k = fft2_per_slice_echo(&v).unwrap();
        prop_assert!((k.frobenius_norm() - v.frobenius_norm()).abs() <= 1e-12 * v.frobenius_norm().max(1.0));
        let back = ifft2_per_slice_echo(&k).unwrap();
        prop_assert!(relative_frobenius(back.data(), v.data()) < 1e-10 || v.frobenius_norm() == 0.0);
    }

    #[test]
    fn mask_complement_algebra(bits in prop::collection::vec(any::<bool>(), 48)) {
        let m = BinaryMask::new(vec![6, 8], bits.clone()).unwrap();
        let c = m.complement();
        prop_assert_eq!(m.and(&c).unwrap().count(), 0);
        prop_assert_eq!(m.or(&c).unwrap().count(), 48);
        prop_assert_eq!(c.complement(), m);
    }

    #[test]
    fn mask_combine_selects_rows(
        a in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 7),
        b in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 5),
        lines in prop::collection::btree_set(0usize..8, 0..8),
    ) {
        let shape = Shape::new(1, 8, 4, 2);
        let (ka, kb) = (fft2_per_slice_echo(&volume(shape, &a)).unwrap(), fft2_per_slice_echo(&volume(shape, &b)).unwrap());
        let m = BinaryMask::from_lines(8, 4, lines.iter().copied());
        let out = mask_combine(&ka, &kb, &m).unwrap();
        for ky in 0..8 {
            for kz in 0..4 {
                for n in 0..2 {
                    let want = if lines.contains(&ky) { kb.at(0, ky, kz, n) } else { ka.at(0, ky, kz, n) };
                    prop_assert_eq!(out.at(0, ky, kz, n), want);
                }
            }
        }
    }

    #[test]
    fn batch_equals_sequential_on_random_scripts(events in prop::collection::vec(event_strategy(), 1..5)) {
        let shape = Shape::new(2, 16, 12, 2);
        let values: Vec<(f64, f64)> = (0..29).map(|i| ((i as f64 * 0.7).sin(), (i as f64 * 0.3).cos())).collect();
        let v = volume(shape, &values);
        let mut taken = [false; 16];
        let mut script = MotionScript::empty();
        for (start, len, shift, rot) in events {
            let lines: Vec<usize> = (start..(start + len).min(16)).filter(|&l| !taken[l]).collect();
            if lines.is_empty() {
                continue;
            }
            lines.iter().for_each(|&l| taken[l] = true);
            let motion = RigidMotion { shift_voxels: shift, rotations_deg: [rot, 0.0, 0.5 * rot] };
            script.events.push(MotionEvent { motion, lines });
        }
        let a = corrupt(&v, &script).unwrap();
        let b = corrupt_batch(&v, &script).unwrap();
        prop_assert!(relative_frobenius(a.data(), b.data()) < 1e-10);
    }

    #[test]
    fn magnitude_fit_is_scale_equivariant(
        s0 in 1.0f64..500.0,
        r2 in 2.0f64..150.0,
        noise in prop::collection::vec(-0.02f64..0.02, 10),
        c in 0.01f64..100.0,
    ) {
        let times = EchoSchedule::default().times();
        let f = vec![Complex64::new(1.0, 0.0); 10];
        let mag: Vec<f64> = times.iter().zip(&noise).map(|(t, e)| s0 * (-r2 * t).exp() * (1.0 + e)).collect();
        let scaled: Vec<f64> = mag.iter().map(|m| m * c).collect();
        let cfg = FitConfig::default();
        let a = fit_magnitude_values(&mag, &f, &times, &cfg);
        let b = fit_magnitude_values(&scaled, &f, &times, &cfg);
        prop_assert!((a.r2star - b.r2star).abs() <= 1e-9 * a.r2star.max(1.0));
        prop_assert!((a.s0 * c - b.s0).abs() <= 1e-9 * b.s0);
    }

    #[test]
    fn relative_error_is_scale_invariant(
        pairs in prop::collection::vec((0.1f64..10.0, -1.0f64..1.0), 2..30),
        c in 0.001f64..1000.0,
    ) {
        let r: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let e: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
        let m = vec![true; r.len()];
        let base = relative_error(&e, &r, &m).unwrap();
        let (ec, rc): (Vec<f64>, Vec<f64>) = e.iter().zip(&r).map(|(a, b)| (a * c, b * c)).unzip();
        prop_assert!(base >= 0.0);
        prop_assert!((relative_error(&ec, &rc, &m).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn phantom_maps_respect_the_mask(seed in any::<u64>()) {
        let ph = generate_phantom(seed, [1, 32, 32], &default_tissue_specs()).unwrap();
        let mask = ph.brain_mask.values();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                prop_assert!((0.0..=300.0).contains(&ph.r2star_map.data()[i]) && ph.s0_map.data()[i] >= 0.0);
            } else {
                prop_assert!(ph.s0_map.data()[i] == 0.0 && ph.r2star_map.data()[i] == 0.0 && ph.omega_map.data()[i] == 0.0);
            }
        }
    }
}
