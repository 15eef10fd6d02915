mod common;

use proptest::prelude::*;
use shuffleunet::shuffle::{pixel_shuffle_3d, pixel_unshuffle_3d, ShuffleSpec};
use shuffleunet::tensor::{Dims, Tensor};

#[test]
fn five_hundred_seeded_round_trips() {
    common::shuffle_round_trips(500, 42).unwrap();
}

fn case() -> impl Strategy<Value = (usize, Dims, u64)> {
    (prop_oneof![Just(2usize), Just(3)], 1..=2usize, 1..=3usize, [1..=3usize, 1..=3, 1..=3], any::<u64>())
        .prop_map(|(r, n, c, m, seed)| (r, Dims::new(n, c, r * m[0], r * m[1], r * m[2]), seed))
}

fn filled(dims: Dims, seed: u64) -> Tensor<f32> {
    let mut s = seed | 1;
    Tensor::from_fn(dims, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        f32::from_bits((s as u32 & 0x3fff_ffff) | 0x0080_0000)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn shuffle_inverts_unshuffle((r, dims, seed) in case()) {
        let x = filled(dims, seed);
        let spec = ShuffleSpec::new(r).unwrap();
        let down = pixel_unshuffle_3d(&x, spec).unwrap();
        prop_assert_eq!(down.dims(), Dims::new(dims.n(), dims.c() * r * r * r, dims.h() / r, dims.w() / r, dims.d() / r));
        let back = pixel_shuffle_3d(&down, spec).unwrap();
        prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let again = pixel_unshuffle_3d(&back, spec).unwrap();
        prop_assert_eq!(again.data(), down.data());
    }

    #[test]
    fn unshuffle_preserves_the_multiset((r, dims, seed) in case()) {
        let x = filled(dims, seed);
        let down = pixel_unshuffle_3d(&x, ShuffleSpec::new(r).unwrap()).unwrap();
        let mut a: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = down.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}
