//! Expert routing: zero-initialized experts change nothing, an expert only
//! touches its own modality, and inactive experts get exactly zero gradient.

mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 10, ..ProptestConfig::default() })]

    #[test]
    fn routing_properties(layers in 1usize..=2, wide in any::<bool>(), rank in 1usize..=4, seed in any::<u64>()) {
        common::checks::routing_case(layers, if wide { 16 } else { 8 }, rank, seed);
    }
}
