// SPDX-License-Identifier: Apache-2.0

//! Membership service: organizations, node and user identities, signing keys
//! and the consortium registry that admits them.
//!
//! Certificates are reduced to registry entries. An [`Identity`] is admitted
//! only when every one of its fields, including the verification key, matches
//! an entry fixed at genesis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer, Verifier};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdentityError {
    #[error("unknown organization {0}")]
    UnknownOrg(OrgId),
    #[error("organization name must be non-empty")]
    EmptyOrg,
    #[error("duplicate organization {0}")]
    DuplicateOrg(OrgId),
    #[error("duplicate identity label {0}")]
    DuplicateIdentity(String),
    #[error("identity label must be non-empty")]
    EmptyLabel,
    #[error("invalid key material: {0}")]
    BadKey(String),
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OrgId(String);

impl OrgId {
    pub fn new(name: impl Into<String>) -> Result<Self, IdentityError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(IdentityError::EmptyOrg);
        }
        Ok(OrgId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for OrgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for OrgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for OrgId {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OrgId::new(s.trim())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Peer,
    Orderer,
    Client,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Peer => "peer",
            Role::Orderer => "orderer",
            Role::Client => "client",
        })
    }
}

/// Ed25519 public key bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VerificationKey(pub [u8; 32]);

impl fmt::Debug for VerificationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerificationKey({})", hex::encode(&self.0[..6]))
    }
}

impl VerificationKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out)
            .map_err(|e| IdentityError::BadKey(e.to_string()))?;
        Ok(VerificationKey(out))
    }

    /// Raw Ed25519 verification, independent of any registry.
    pub fn verify_raw(&self, message: &[u8], sig: &[u8]) -> bool {
        let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&self.0) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
            return false;
        };
        key.verify(message, &sig).is_ok()
    }
}

/// Secret half of an identity. Never serialized into protocol messages.
#[derive(Clone)]
pub struct SigningKey(ed25519_dalek::SigningKey);

impl SigningKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        SigningKey(ed25519_dalek::SigningKey::generate(rng))
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        SigningKey(ed25519_dalek::SigningKey::from_bytes(&seed))
    }

    pub fn seed(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let mut seed = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut seed)
            .map_err(|e| IdentityError::BadKey(e.to_string()))?;
        Ok(SigningKey::from_seed(seed))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.seed())
    }

    pub fn verification_key(&self) -> VerificationKey {
        VerificationKey(self.0.verifying_key().to_bytes())
    }

    pub fn sign_raw(&self, message: &[u8]) -> [u8; 64] {
        self.0.sign(message).to_bytes()
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

/// Reference to a registered identity: labels are unique consortium-wide.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IdentityRef {
    pub org: OrgId,
    pub label: String,
}

impl fmt::Display for IdentityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.label, self.org)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub org: OrgId,
    pub role: Role,
    pub label: String,
    pub verification_key: VerificationKey,
}

impl Identity {
    pub fn reference(&self) -> IdentityRef {
        IdentityRef {
            org: self.org.clone(),
            label: self.label.clone(),
        }
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}@{}", self.role, self.label, self.org)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub signer: IdentityRef,
    pub bytes: Vec<u8>,
}

pub fn sign(identity: &Identity, key: &SigningKey, message: &[u8]) -> Signature {
    Signature {
        signer: identity.reference(),
        bytes: key.sign_raw(message).to_vec(),
    }
}

/// True iff `sig` names `identity` as signer and verifies under its key.
pub fn verify(identity: &Identity, message: &[u8], sig: &Signature) -> bool {
    sig.signer == identity.reference() && identity.verification_key.verify_raw(message, &sig.bytes)
}

/// The genesis-fixed consortium. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsortiumRegistry {
    channel: String,
    orgs: BTreeSet<OrgId>,
    identities: BTreeMap<String, Identity>,
    admitted: BTreeSet<String>,
}

impl ConsortiumRegistry {
    pub fn channel(&self) -> &str {
        &self.channel
    }

    pub fn orgs(&self) -> &BTreeSet<OrgId> {
        &self.orgs
    }

    pub fn has_org(&self, org: &OrgId) -> bool {
        self.orgs.contains(org)
    }

    pub fn identities(&self) -> impl Iterator<Item = &Identity> {
        self.identities.values()
    }

    pub fn by_label(&self, label: &str) -> Option<&Identity> {
        self.identities.get(label)
    }

    pub fn lookup(&self, r: &IdentityRef) -> Option<&Identity> {
        self.identities.get(&r.label).filter(|id| id.org == r.org)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Identity> {
        self.identities.values().filter(move |id| id.role == role)
    }

    /// True iff `identity` matches a registered entry exactly and sits on the
    /// channel admission list.
    pub fn admit(&self, identity: &Identity) -> bool {
        self.identities.get(&identity.label) == Some(identity) && self.admitted.contains(&identity.label)
    }

    /// Resolves the signer, checks admission and verifies. Returns the signer
    /// on success.
    pub fn verify_signed(&self, message: &[u8], sig: &Signature) -> Option<&Identity> {
        let id = self.lookup(&sig.signer)?;
        (self.admitted.contains(&id.label) && verify(id, message, sig)).then_some(id)
    }
}

/// Collects orgs and identities before the registry is frozen at genesis.
#[derive(Debug, Default)]
pub struct ConsortiumBuilder {
    channel: String,
    orgs: BTreeSet<OrgId>,
    identities: BTreeMap<String, Identity>,
}

impl ConsortiumBuilder {
    pub fn new(channel: impl Into<String>) -> Self {
        ConsortiumBuilder {
            channel: channel.into(),
            ..Default::default()
        }
    }

    pub fn add_org(&mut self, org: OrgId) -> Result<(), IdentityError> {
        if !self.orgs.insert(org.clone()) {
            return Err(IdentityError::DuplicateOrg(org));
        }
        Ok(())
    }

    /// Registers an identity with an externally held key.
    pub fn register(&mut self, identity: Identity) -> Result<(), IdentityError> {
        if !self.orgs.contains(&identity.org) {
            return Err(IdentityError::UnknownOrg(identity.org));
        }
        if identity.label.trim().is_empty() {
            return Err(IdentityError::EmptyLabel);
        }
        if self.identities.contains_key(&identity.label) {
            return Err(IdentityError::DuplicateIdentity(identity.label));
        }
        self.identities.insert(identity.label.clone(), identity);
        Ok(())
    }

    /// Creates a fresh keypair-backed identity and registers it.
    pub fn generate_identity<R: RngCore + CryptoRng>(
        &mut self,
        org: &OrgId,
        role: Role,
        label: &str,
        rng: &mut R,
    ) -> Result<(Identity, SigningKey), IdentityError> {
        if !self.orgs.contains(org) {
            return Err(IdentityError::UnknownOrg(org.clone()));
        }
        let key = SigningKey::generate(rng);
        let identity = Identity {
            org: org.clone(),
            role,
            label: label.to_string(),
            verification_key: key.verification_key(),
        };
        self.register(identity.clone())?;
        Ok((identity, key))
    }

    pub fn build(self) -> ConsortiumRegistry {
        let admitted = self.identities.keys().cloned().collect();
        ConsortiumRegistry {
            channel: self.channel,
            orgs: self.orgs,
            identities: self.identities,
            admitted,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn org(s: &str) -> OrgId {
        OrgId::new(s).unwrap()
    }

    fn builder() -> ConsortiumBuilder {
        let mut b = ConsortiumBuilder::new("bbs");
        b.add_org(org("Org1")).unwrap();
        b.add_org(org("Org2")).unwrap();
        b
    }

    #[test]
    fn generate_identity_constructs_peer() {
        let mut b = builder();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (id, key) = b.generate_identity(&org("Org1"), Role::Peer, "peer0", &mut rng).unwrap();
        assert_eq!(id.role, Role::Peer);
        assert_eq!(id.verification_key, key.verification_key());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let mut a = builder();
        let mut b = builder();
        let (x, _) = a
            .generate_identity(&org("Org1"), Role::Peer, "p", &mut ChaCha20Rng::seed_from_u64(9))
            .unwrap();
        let (y, _) = b
            .generate_identity(&org("Org1"), Role::Peer, "p", &mut ChaCha20Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(x.verification_key, y.verification_key);
    }

    #[test]
    fn unknown_org_rejected() {
        let mut b = builder();
        let err = b
            .generate_identity(&org("OrgX"), Role::Peer, "p", &mut ChaCha20Rng::seed_from_u64(1))
            .unwrap_err();
        assert_eq!(err, IdentityError::UnknownOrg(org("OrgX")));
    }

    #[test]
    fn sign_verify_tamper_and_key_binding() {
        let mut b = builder();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (a, ka) = b.generate_identity(&org("Org1"), Role::Client, "a", &mut rng).unwrap();
        let (c, _) = b.generate_identity(&org("Org2"), Role::Client, "c", &mut rng).unwrap();
        let sig = sign(&a, &ka, b"abc");
        assert!(verify(&a, b"abc", &sig));
        assert!(!verify(&a, b"abd", &sig));
        let mut moved = sig.clone();
        moved.signer = c.reference();
        assert!(!verify(&c, b"abc", &moved));
    }

    #[test]
    fn admission() {
        let mut b = builder();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (peer, _) = b.generate_identity(&org("Org1"), Role::Peer, "peer0", &mut rng).unwrap();
        let reg = b.build();
        assert!(reg.admit(&peer));

        let outsider = Identity {
            org: org("Org9"),
            ..peer.clone()
        };
        assert!(!reg.admit(&outsider));

        let forged_key = Identity {
            verification_key: SigningKey::generate(&mut rng).verification_key(),
            ..peer.clone()
        };
        assert!(!reg.admit(&forged_key));
    }

    #[test]
    fn duplicate_labels_rejected() {
        let mut b = builder();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        b.generate_identity(&org("Org1"), Role::Peer, "x", &mut rng).unwrap();
        assert!(matches!(
            b.generate_identity(&org("Org2"), Role::Peer, "x", &mut rng),
            Err(IdentityError::DuplicateIdentity(_))
        ));
    }
}
