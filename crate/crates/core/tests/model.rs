mod common;

use proptest::prelude::*;
use shuffleunet::model::{ModelConfig, ShuffleUNet, ShuffleUNetArch};
use shuffleunet::nn::Network;
use shuffleunet::tensor::{Dims, Tensor};

#[test]
fn default_config_follows_channel_schedule_at_full_patch_size() {
    let bad = common::shape_contract_violations(4);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn default_config_has_sixteen_fold_input_multiple() {
    let arch = ShuffleUNetArch::new(ModelConfig::default()).unwrap();
    assert_eq!(arch.spatial_multiple(), 16);
    assert!(arch.trace(Dims::new(1, 1, 96, 96, 40)).is_err());
}

#[test]
fn reduced_width_network_runs_numerically_on_a_full_patch() {
    let cfg = ModelConfig {
        base_filters: 8,
        ..ModelConfig::default()
    };
    let m: ShuffleUNet = ShuffleUNet::new(cfg).unwrap();
    let x = Tensor::from_fn(Dims::new(1, 1, 96, 96, 48), |[_, _, h, w, d]| ((h + 2 * w + 3 * d) % 7) as f32 / 7.0);
    let y = m.forward(&x).unwrap();
    assert_eq!(y.dims(), x.dims());
    assert!(y.all_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_matches_input_size(levels in 1..=3usize, m in [1..=2usize, 1..=2, 1..=2], n in 1..=2usize) {
        let cfg = ModelConfig { levels, base_filters: 8, init_seed: 3, ..ModelConfig::default() };
        let model: ShuffleUNet = ShuffleUNet::new(cfg).unwrap();
        let k = model.arch.spatial_multiple();
        let dims = Dims::new(n, 1, k * m[0], k * m[1], k * m[2]);
        let y = model.forward(&Tensor::full(dims, 0.5)).unwrap();
        prop_assert_eq!(y.dims(), dims);
        prop_assert!(y.all_finite());
    }
}
