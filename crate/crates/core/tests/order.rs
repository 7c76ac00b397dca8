//! The two pointwise loop orders compute the same function.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semistream_core::engines::{exp_forward, pro_forward};
use semistream_core::model::{prepare_layer, random_layer, random_tensor, Dims, LayerKind};
use semistream_core::quant::Rounding;

/// H, W ≤ 8 and C, M in {16, 32, 48, 64}.
fn equivalent(seed: u64, rounding: Rounding) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 16 * rng.gen_range(1..=4);
    let m = 16 * rng.gen_range(1..=4);
    let dims = Dims::new(rng.gen_range(1..=8), rng.gen_range(1..=8), c);
    let layer = loop {
        let raw = random_layer(LayerKind::Pro, dims, m, 1, rng.gen()).unwrap();
        if let Ok(l) = prepare_layer(&raw, rounding) {
            break l;
        }
    };
    let x = random_tensor(dims, layer.input_quant, rng.gen());
    let (a, sa) = pro_forward(&x, &layer, rounding).unwrap();
    let (b, sb) = exp_forward(&x, &layer, rounding).unwrap();
    a == b && sa.cycles == sb.cycles
}

#[test]
fn two_hundred_seeded_layers() {
    for seed in 0..200 {
        assert!(equivalent(seed, Rounding::Nearest), "seed {seed}");
    }
}

proptest! {
    #[test]
    fn any_seed_either_rounding(seed in any::<u64>(), truncate in any::<bool>()) {
        let r = if truncate { Rounding::Truncate } else { Rounding::Nearest };
        prop_assert!(equivalent(seed, r));
    }
}
