use mgre_learn::data::Sample;
use mgre_learn::loss::sample_loss;
use mgre_learn::model::Layer;
use mgre_learn::{Arch, CorrectorModel, Tensor};
use proptest::prelude::*;

const N: usize = 4;
const TIMES: [f64; N] = [0.004, 0.008, 0.012, 0.016];

fn small(arch: Arch, seed: u64) -> CorrectorModel {
    let (cin, cout) = arch.channels(N);
    let layers = vec![Layer::Conv { cin, cout: 3, k: 3 }, Layer::Relu, Layer::Conv { cin: 3, cout, k: 1 }];
    CorrectorModel::with_layers(arch, N, layers, seed).unwrap()
}

fn sample(arch: Arch, input: &[f64], target: &[f64], mask: &[bool]) -> Sample {
    let c = match arch {
        Arch::Img => 2 * N,
        Arch::Bio => N,
    };
    let take = |v: &[f64]| Tensor::new(vec![c, 4, 4], (0..c * 16).map(|i| v[i % v.len()].abs() + 0.1).collect());
    Sample {
        input: take(input),
        target: take(target),
        f_mag: if arch == Arch::Bio { vec![0.9; N * 16] } else { Vec::new() },
        mask: mask.to_vec(),
    }
}

fn arch() -> impl Strategy<Value = Arch> {
    prop_oneof![Just(Arch::Img), Just(Arch::Bio)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ignores_targets_outside_the_mask(
        arch in arch(),
        seed in 0u64..1000,
        input in prop::collection::vec(-2.0f64..2.0, 16..64),
        target in prop::collection::vec(-2.0f64..2.0, 16..64),
        mask in prop::collection::vec(any::<bool>(), 16),
        junk in -1e3f64..1e3,
    ) {
        let model = small(arch, seed);
        let s = sample(arch, &input, &target, &mask);
        let mut changed = s.clone();
        let plane = 16;
        for (i, v) in changed.target.data_mut().iter_mut().enumerate() {
            if !mask[i % plane] {
                *v += junk;
            }
        }
        let a = sample_loss(&model, &s, &TIMES).unwrap();
        let b = sample_loss(&model, &changed, &TIMES).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving(
        arch in arch(),
        seed in any::<u64>(),
        input in prop::collection::vec(-2.0f64..2.0, 16..64),
    ) {
        let model = small(arch, seed);
        let s = sample(arch, &input, &input, &[true; 16]);
        let a = model.forward(&s.input).unwrap();
        let b = model.clone().forward(&s.input).unwrap();
        prop_assert_eq!(&a, &b);
        let (_, cout) = arch.channels(N);
        prop_assert_eq!(a.shape(), &[cout, 4, 4][..]);
        if arch == Arch::Bio {
            // softplus head keeps the rate channel positive
            prop_assert!(a.data()[16..].iter().all(|&r| r > 0.0));
        }
    }
}
