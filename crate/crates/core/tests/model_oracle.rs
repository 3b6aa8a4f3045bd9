mod common;

use common::reference_model::{four_block_config, transparency};

#[test]
fn split_forward_and_gradients_match_the_unsplit_model() {
    for seed in 0..5 {
        let t = transparency(four_block_config(), 2, seed);
        println!("seed {seed}: {t:?}");
        assert!(t.reference_logits <= 1e-12, "seed {seed}: {t:?}");
        assert!(t.split_logits <= 1e-12, "seed {seed}: {t:?}");
        assert!(t.split_grads <= 1e-10, "seed {seed}: {t:?}");
    }
}
