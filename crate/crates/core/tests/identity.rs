// SPDX-License-Identifier: Apache-2.0

use bbs_core::identity::{sign, verify, Identity, Role, SigningKey};
use bbs_core::testkit::Consortium;
use proptest::prelude::*;

fn keypair(seed: [u8; 32]) -> (Identity, SigningKey) {
    let key = SigningKey::from_seed(seed);
    let id = Identity {
        org: "Org1".parse().unwrap(),
        role: Role::Client,
        label: "client.org1".into(),
        verification_key: key.verification_key(),
    };
    (id, key)
}

proptest! {
    #[test]
    fn sign_then_verify(seed in any::<[u8; 32]>(), msg in prop::collection::vec(any::<u8>(), 0..512)) {
        let (id, key) = keypair(seed);
        prop_assert!(verify(&id, &msg, &sign(&id, &key, &msg)));
    }

    #[test]
    fn any_bit_flip_breaks_verification(
        seed in any::<[u8; 32]>(),
        msg in prop::collection::vec(any::<u8>(), 1..512),
        in_sig in any::<bool>(),
        at in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let (id, key) = keypair(seed);
        let mut sig = sign(&id, &key, &msg);
        let mut msg = msg;
        let target = if in_sig { &mut sig.bytes } else { &mut msg };
        let i = at.index(target.len());
        target[i] ^= 1 << bit;
        prop_assert!(!verify(&id, &msg, &sig));
    }

    #[test]
    fn registry_rejects_outside_keys(seed in any::<[u8; 32]>(), msg in prop::collection::vec(any::<u8>(), 0..128)) {
        let c = Consortium::three_org(3);
        let reg = &c.config.registry;
        let (_, key) = keypair(seed);
        // A registered name with a key the registry has never seen.
        let (real, _) = c.member("client.org1");
        let mut impostor = real.clone();
        impostor.verification_key = key.verification_key();
        let sig = sign(&impostor, &key, &msg);
        prop_assert!(!reg.admit(&impostor));
        prop_assert!(reg.verify_signed(&msg, &sig).is_none());
        // The registered key still works through the registry.
        let (id, k) = c.member("client.org1");
        prop_assert_eq!(reg.verify_signed(&msg, &sign(id, k, &msg)).map(|i| &i.label), Some(&id.label));
    }
}
