//! Property tests for format and operator invariants.

use fanet_core::netpbm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use fanet_core::ops::{horizontal_flip, stripe_bounds};
use fanet_core::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppm_roundtrip_is_within_one_quantum(
        w in 1usize..12,
        h in 1usize..12,
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let mut vals = Vec::with_capacity(3 * h * w);
        for _ in 0..3 * h * w {
            state = fanet_core::rng::splitmix64(state);
            vals.push((state >> 40) as f32 / (1u64 << 24) as f32);
        }
        let img = Tensor::new(vec![3, h, w], vals.clone());
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), vec![3, h, w]);
        for (a, b) in vals.iter().zip(back.values().iter()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn pgm_reencode_is_bit_stable(
        w in 1usize..12,
        h in 1usize..12,
        seed in any::<u64>(),
    ) {
        // decoding then re-encoding quantized data must be the identity
        let mut state = seed;
        let mut vals = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            state = fanet_core::rng::splitmix64(state);
            vals.push((state % 256) as f32 / 255.0);
        }
        let img = Tensor::new(vec![1, h, w], vals);
        let bytes = encode_pgm(&img).unwrap();
        let back = decode_pgm(&bytes).unwrap();
        prop_assert_eq!(encode_pgm(&back).unwrap(), bytes);
    }

    #[test]
    fn flip_is_an_involution(
        w in 1usize..10,
        h in 1usize..10,
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let mut vals = Vec::with_capacity(c * h * w);
        for _ in 0..c * h * w {
            state = fanet_core::rng::splitmix64(state);
            vals.push(state as f32 / u64::MAX as f32);
        }
        let x = Tensor::new(vec![c, h, w], vals.clone());
        let twice = horizontal_flip(&horizontal_flip(&x));
        prop_assert_eq!(twice.to_vec(), vals);
    }

    #[test]
    fn stripes_partition_the_height(h in 1usize..64, n in 1usize..16) {
        prop_assume!(n <= h);
        let mut prev_end = 0usize;
        for s in 0..n {
            let (r0, r1) = stripe_bounds(h, n, s);
            prop_assert_eq!(r0, prev_end);
            prop_assert!(r1 >= r0);
            prop_assert!(r1 <= h);
            prev_end = r1;
        }
        prop_assert_eq!(prev_end, h);
    }
}
