mod common;

use common::{brute_trilinear, random_volume};
use ndarray::Array3;
use proptest::prelude::*;
use shuffleunet::baselines::{interpolate, parameter_report, trilinear_resample, Method, UNet3d, UNetConfig};
use shuffleunet::data::{crop, fourier_resample, phantom::phantom_volume, Volume};
use shuffleunet::model::{ModelConfig, ShuffleUNet};
use shuffleunet::training::{Trainer, TrainingPair};

#[test]
fn trilinear_matches_weight_sum_oracle() {
    for (seed, target) in [(1, [8, 8, 8]), (2, [7, 9, 5]), (3, [12, 4, 6])] {
        let src = random_volume([4, 4, 4], seed);
        let got = trilinear_resample(&src, target);
        let want = brute_trilinear(&src, target);
        let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "{target:?}: {err}");
    }
}

#[test]
fn interpolators_keep_constants() {
    let lr = Volume::new(Array3::from_elem([5, 6, 4], 3.25f32), [2.0; 3]).unwrap();
    for m in [Method::Sinc, Method::Trilinear] {
        let up = interpolate(m, &lr, [10, 12, 8]).unwrap();
        assert_eq!(up.dims(), [10, 12, 8]);
        assert!(up.voxels.iter().all(|v| (v - 3.25).abs() < 1e-5), "{m}");
        assert_eq!(up.spacing, [1.0; 3], "{m}");
    }
    assert!(interpolate(Method::ShuffleUNet, &lr, [10, 12, 8]).is_err());
}

fn filters(base: usize, l: usize) -> usize {
    base << (l - 1)
}

/// Conv(3)+BN twice per level, transposed conv plus conv(3)+BN twice per decoder level.
fn unet_parameters(levels: usize, base: usize) -> usize {
    let block = |cin: usize, f: usize| (27 * cin * f + f + 2 * f) + (27 * f * f + f + 2 * f);
    let mut n = 0;
    for l in 1..=levels {
        n += block(if l == 1 { 1 } else { filters(base, l - 1) }, filters(base, l));
    }
    for l in 1..levels {
        let f = filters(base, l);
        n += 8 * filters(base, l + 1) * f + f + block(2 * f, f);
    }
    n + filters(base, 1) + 1
}

#[test]
fn parameter_counts() {
    let unet: UNet3d = UNet3d::new(UNetConfig::default()).unwrap();
    assert_eq!(unet.parameter_count(), unet_parameters(4, 32));
    let small: UNet3d = UNet3d::new(UNetConfig { levels: 2, base_filters: 8, ..UNetConfig::default() }).unwrap();
    assert_eq!(small.parameter_count(), unet_parameters(2, 8));
    let shuffle: ShuffleUNet = ShuffleUNet::new(ModelConfig::default()).unwrap();
    let report = parameter_report(&[("shuffleunet", shuffle.parameter_count()), ("unet", unet.parameter_count())]);
    eprintln!("{report}");
    assert_eq!(report.lines().count(), 2);
    assert!(report.contains(&unet.parameter_count().to_string()));
}

#[test]
fn unet_overfits_one_patch() {
    let hr = phantom_volume([32, 32, 32], [1.0; 3], 3).unwrap();
    let pair = TrainingPair::from_hr("phantom", 0, &hr, 2).unwrap();
    let x = crop(pair.input.view(), [8, 8, 8], [16; 3]).unwrap();
    let y = crop(pair.target.view(), [8, 8, 8], [16; 3]).unwrap();
    let model: UNet3d = UNet3d::new(UNetConfig { levels: 2, base_filters: 8, init_seed: 1, ..UNetConfig::default() }).unwrap();
    let mut trainer = Trainer::new(model, 1e-3);
    let losses: Vec<f64> = (0..200).map(|_| trainer.step(&x, &y).unwrap()).collect();
    let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    eprintln!("initial {:.4} best {best:.4}", losses[0]);
    assert!(best < 0.1 * losses[0]);
}

fn two_volumes() -> impl Strategy<Value = (Array3<f64>, Array3<f64>, [usize; 3], f64, f64)> {
    ([2..=5usize, 2..=5, 2..=5], any::<u64>(), [0..=3usize, 0..=3, 0..=3], -2.0..2.0f64, -2.0..2.0f64).prop_map(
        |(d, seed, extra, alpha, beta)| {
            let target = [d[0] + extra[0], d[1] + extra[1], d[2] + extra[2]];
            (random_volume(d, seed), random_volume(d, seed.wrapping_add(1)), target, alpha, beta)
        },
    )
}

proptest! {
    #[test]
    fn interpolators_are_linear((a, b, target, alpha, beta) in two_volumes()) {
        let mix = &a * alpha + &b * beta;
        for f in [trilinear_resample as fn(&Array3<f64>, [usize; 3]) -> Array3<f64>, fourier_resample] {
            let lhs = f(&mix, target);
            let rhs = f(&a, target) * alpha + f(&b, target) * beta;
            let err = (&lhs - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(err < 1e-9, "{err}");
        }
    }
}
