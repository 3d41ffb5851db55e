use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mnn_core::data::mix_at_snr;
use mnn_core::metrics::{capped_db, sdr, snr};
use mnn_core::network::{
    backprop, decode_model, encode_model, feedforward, init_weights, Activation, DropoutMode, DropoutSpec, Gates,
};
use mnn_core::selector::{choose, Metric, ModuleScore};
use mnn_core::signal::{stft, Waveform};
use mnn_core::training::mask_targets;

fn noise(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16_000).unwrap()
}

fn activation(i: u8) -> Activation {
    [Activation::ModifiedRelu, Activation::Logistic, Activation::Identity][i as usize % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mask_targets_stay_in_unit_interval(seed in any::<u64>(), gain in 0.01f64..10.0) {
        let s = noise(2048, seed);
        let n = noise(2048, seed ^ 0x5555).scaled(gain).unwrap();
        let x = Waveform::new(s.samples().iter().zip(n.samples()).map(|(a, b)| a + b).collect(), 16_000).unwrap();
        let y = mask_targets(&stft(&s, 256, 64).unwrap(), &stft(&x, 256, 64).unwrap()).unwrap();
        for t in 0..y.frames() {
            prop_assert!(y.frame(t).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn sdr_ignores_positive_gain(seed in any::<u64>(), a in 0.01f64..100.0) {
        let r = noise(4000, seed);
        let e = Waveform::new(
            r.samples().iter().zip(noise(4000, seed + 1).samples()).map(|(x, y)| x + 0.3 * y).collect(),
            16_000,
        ).unwrap();
        let base = sdr(&e, &r).unwrap();
        prop_assert!((sdr(&e.scaled(a).unwrap(), &r).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn decibels_are_capped_and_finite(num in 0.0f64..1e6, den in 0.0f64..1e6) {
        let v = capped_db(num, den);
        prop_assert!(v.is_finite() && (-100.0..=100.0).contains(&v));
    }

    #[test]
    fn mixing_hits_the_target(seed in any::<u64>(), target in -20.0f64..20.0) {
        let s = noise(3000, seed);
        let n = noise(3500, seed ^ 0xabc).scaled(0.2).unwrap();
        let (_, scaled) = mix_at_snr(&s, &n, target).unwrap();
        prop_assert!((snr(&s, &scaled).unwrap() - target).abs() < 1e-9);
    }

    #[test]
    fn model_bytes_round_trip(
        dims in prop::collection::vec(1usize..12, 2..5),
        acts in prop::collection::vec(0u8..3, 4),
        seed in any::<u64>(),
    ) {
        let activations: Vec<Activation> = acts[..dims.len() - 1].iter().map(|&i| activation(i)).collect();
        let net = init_weights(&dims, &activations, seed).unwrap();
        let bytes = encode_model(&net);
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn truncated_model_is_rejected(seed in any::<u64>(), cut in 1usize..64) {
        let net = init_weights(&[5, 4, 3], &[Activation::Logistic, Activation::Identity], seed).unwrap();
        let bytes = encode_model(&net);
        prop_assert!(decode_model(&bytes[..bytes.len().saturating_sub(cut)]).is_err());
    }

    #[test]
    fn losses_add_and_accumulation_commutes(seed in any::<u64>()) {
        let net = init_weights(&[4, 6, 3], &[Activation::Logistic, Activation::Logistic], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t1: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t2: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (l1, g1) = backprop(&net, &x, &t1, &Gates::Off).unwrap();
        let (l2, g2) = backprop(&net, &x, &t2, &Gates::Off).unwrap();
        let y = feedforward(&net, &x, &Gates::Off).unwrap().output;
        let direct: f64 = y.iter().zip(&t1).zip(&t2).map(|((y, a), b)| (y - a).powi(2) + (y - b).powi(2)).sum();
        prop_assert!((l1 + l2 - direct).abs() < 1e-12);
        let mut sum = g1.clone();
        sum.add_assign(&g2);
        let mut rev = g2.clone();
        rev.add_assign(&g1);
        prop_assert_eq!(sum, rev);
    }

    #[test]
    fn dropped_units_get_no_gradient(seed in any::<u64>()) {
        let net = init_weights(&[6, 5, 2], &[Activation::ModifiedRelu, Activation::Logistic], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gates = DropoutSpec::uniform(0.5, DropoutMode::Sampled, 0).gates(&net, &mut rng).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = backprop(&net, &x, &[0.2, 0.7], &gates).unwrap();
        let Gates::Masks(masks) = &gates else { unreachable!() };
        for (l, layer) in net.layers().iter().enumerate() {
            let cols = layer.cols();
            for r in 0..layer.rows() {
                for (i, &m) in masks[l].iter().enumerate() {
                    if m == 0.0 {
                        prop_assert_eq!(g.layer(l)[r * cols + i], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn choice_is_an_extremum_with_lowest_index(errs in prop::collection::vec(0u8..6, 1..8)) {
        let scores: Vec<ModuleScore> = errs
            .iter()
            .enumerate()
            .map(|(i, &e)| ModuleScore { module: i.to_string(), ae_error: e as f64, snr_db: -(e as f64) })
            .collect();
        let min = *errs.iter().min().unwrap();
        let first = errs.iter().position(|&e| e == min).unwrap();
        prop_assert_eq!(choose(&scores, Metric::Ae).unwrap(), first);
        prop_assert_eq!(choose(&scores, Metric::Snr).unwrap(), first);
    }
}
