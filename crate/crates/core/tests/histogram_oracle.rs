mod common;

use common::*;
use mem_core::histogram::*;
use mem_core::rng_from_seed;
use rand::Rng;

#[test]
fn layouts_match_naive_oracle() {
    let mut rng = rng_from_seed(2024);
    for _ in 0..1000 {
        let s = random_stream(&mut rng);
        let n_max = if rng.random_bool(0.5) { rng.random_range(1..500) } else { DEFAULT_N_MAX };
        assert_eq!(histogram_mismatch(&s, n_max), None);
    }
}

#[test]
fn injected_hot_pixel_is_zeroed_and_nothing_else_changes() {
    for seed in 0..20 {
        let (hist, hot) = with_hot_pixel(seed);
        let out = remove_hot_pixels(&hist, DEFAULT_HOT_PIXEL_K);
        assert!(only_hot_pixel_removed(&hist, &out, hot), "seed {seed}");
    }
}

#[test]
fn preprocess_output_is_normalized() {
    let mut rng = rng_from_seed(9);
    for _ in 0..50 {
        let s = random_stream(&mut rng);
        for layout in [ChannelLayout::TwoPolarity, ChannelLayout::TwoPolarityPlusTimestamp, ChannelLayout::FourSlicesTwoPolarity] {
            let h = preprocess(&s, DEFAULT_N_MAX, layout, Some((16, 16)));
            assert_eq!(h.values.len(), layout.channels() * 256);
            assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(h.max() == 0.0 || h.max() == 1.0);
        }
    }
}
