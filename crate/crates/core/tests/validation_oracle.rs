// SPDX-License-Identifier: Apache-2.0

#[path = "common/oracle.rs"]
mod oracle;

use bbs_core::ledger::Block;
use bbs_core::testkit::Consortium;
use proptest::prelude::*;
use rand::SeedableRng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn validator_matches_serial_model(seed in any::<u64>()) {
        let c = Consortium::three_org(1);
        let mut m = oracle::Model::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut nonce = 0;
        let mut prev = Block::genesis(c.config.clone());
        for _ in 0..20 {
            let (b, got, want) = oracle::step(&c, &mut m, &prev, &mut rng, &mut nonce);
            prop_assert_eq!(got, want, "block {}", b.header.height);
            prev = b;
        }
    }
}
