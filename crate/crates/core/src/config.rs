// SPDX-License-Identifier: Apache-2.0

//! Genesis configuration: the consortium, channel parameters, node list and
//! transport settings, read from a TOML file.
//!
//! ```toml
//! channel = "bbs"
//! chaincode_policy = "AND(Org1, Org2)"
//! transport = "sim"            # or "socket"
//! orgs = ["Org1", "Org2", "Org3"]
//!
//! [orderer]
//! batch_size = 10
//! batch_timeout_ms = 200
//!
//! [peer]
//! buffer_size = 1048576
//! transfer_timeout_ms = 10000
//!
//! [[nodes]]
//! label = "peer0.org1"
//! org = "Org1"
//! role = "peer"               # peer | orderer | client
//! verification_key = "<64 hex chars>"
//! address = "127.0.0.1:7051"  # socket transport only
//!
//! [sim.default_link]
//! bandwidth = 20000000        # bytes per second
//! latency_ms = 2.0
//! ```
//!
//! Signing keys live next to the genesis file in `keys/<label>.key` as hex
//! seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{ConsortiumBuilder, ConsortiumRegistry, Identity, IdentityError, OrgId, Role, SigningKey, VerificationKey};
use crate::ledger::hash;
use crate::txflow::{PolicyError, PolicyExpr};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse genesis file: {0}")]
    Parse(String),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("node {label}: {reason}")]
    Node { label: String, reason: String },
    #[error("all nodes must use the {0} transport")]
    MixedTransport(TransportKind),
    #[error("{0}")]
    Invalid(String),
    #[error("no key for {0}")]
    MissingKey(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Channel parameters fixed at genesis and carried in block 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub registry: ConsortiumRegistry,
    pub chaincode_policy: PolicyExpr,
    pub batch_size: u32,
    pub batch_timeout_ms: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Sim,
    Socket,
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransportKind::Sim => "sim",
            TransportKind::Socket => "socket",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrdererSection {
    #[serde(default = "default_batch_size")]
    pub batch_size: u32,
    #[serde(default = "default_batch_timeout")]
    pub batch_timeout_ms: u64,
}

fn default_batch_size() -> u32 {
    10
}
fn default_batch_timeout() -> u64 {
    200
}

impl Default for OrdererSection {
    fn default() -> Self {
        OrdererSection {
            batch_size: default_batch_size(),
            batch_timeout_ms: default_batch_timeout(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerSection {
    #[serde(default = "default_buffer")]
    pub buffer_size: u32,
    /// Abort a file transfer when no acknowledgement arrives in this time.
    #[serde(default = "default_transfer_timeout")]
    pub transfer_timeout_ms: u64,
    /// First retry delay for private-data pushes; doubles per attempt.
    #[serde(default = "default_pdc_retry")]
    pub pdc_retry_ms: u64,
    #[serde(default = "default_pdc_attempts")]
    pub pdc_max_attempts: u32,
}

fn default_buffer() -> u32 {
    1 << 20
}
fn default_transfer_timeout() -> u64 {
    10_000
}
fn default_pdc_retry() -> u64 {
    50
}
fn default_pdc_attempts() -> u32 {
    10
}

impl Default for PeerSection {
    fn default() -> Self {
        PeerSection {
            buffer_size: default_buffer(),
            transfer_timeout_ms: default_transfer_timeout(),
            pdc_retry_ms: default_pdc_retry(),
            pdc_max_attempts: default_pdc_attempts(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub label: String,
    pub org: String,
    pub role: Role,
    pub verification_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    /// Bytes per second.
    pub bandwidth: u64,
    pub latency_ms: f64,
    #[serde(default)]
    pub drop_rate: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            bandwidth: 100_000_000,
            latency_ms: 1.0,
            drop_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverride {
    pub from: String,
    pub to: String,
    #[serde(flatten)]
    pub spec: LinkSpec,
}

/// Virtual CPU charged by simulated peers for contract execution and
/// validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub exec_overhead_us: u64,
    /// Throughput for hashing, encryption and decryption.
    pub crypto_mb_per_s: u64,
    pub cores: u32,
    pub validate_per_tx_us: u64,
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            exec_overhead_us: 2_000,
            crypto_mb_per_s: 200,
            cores: 4,
            validate_per_tx_us: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default)]
    pub default_link: LinkSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkOverride>,
    #[serde(default)]
    pub cost: CostSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenesisFile {
    pub channel: String,
    pub chaincode_policy: String,
    #[serde(default)]
    pub transport: TransportKind,
    pub orgs: Vec<String>,
    #[serde(default)]
    pub orderer: OrdererSection,
    #[serde(default)]
    pub peer: PeerSection,
    pub nodes: Vec<NodeEntry>,
    #[serde(default)]
    pub sim: SimSection,
}

/// A validated genesis file.
#[derive(Clone, Debug)]
pub struct NetworkConfig {
    pub channel: ChannelConfig,
    pub transport: TransportKind,
    pub nodes: Vec<Identity>,
    pub addresses: BTreeMap<String, SocketAddr>,
    pub peer: PeerSection,
    pub sim: SimSection,
}

impl NetworkConfig {
    pub fn identity(&self, label: &str) -> Option<&Identity> {
        self.nodes.iter().find(|n| n.label == label)
    }
}

impl GenesisFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("genesis file serializes")
    }

    pub fn validate(&self) -> Result<NetworkConfig, ConfigError> {
        if self.channel.trim().is_empty() {
            return Err(ConfigError::Invalid("channel name is empty".into()));
        }
        if self.orderer.batch_size == 0 {
            return Err(ConfigError::Invalid("orderer.batch_size must be at least 1".into()));
        }
        if self.peer.buffer_size == 0 || self.peer.buffer_size > crate::offstate::MAX_BUFFER {
            return Err(ConfigError::Invalid(format!(
                "peer.buffer_size must be in 1..={}",
                crate::offstate::MAX_BUFFER
            )));
        }
        let mut b = ConsortiumBuilder::new(self.channel.clone());
        for org in &self.orgs {
            b.add_org(org.parse()?)?;
        }
        let mut nodes = Vec::new();
        let mut addresses = BTreeMap::new();
        for n in &self.nodes {
            let node_err = |reason: String| ConfigError::Node {
                label: n.label.clone(),
                reason,
            };
            let identity = Identity {
                org: n.org.parse()?,
                role: n.role,
                label: n.label.clone(),
                verification_key: VerificationKey::from_hex(&n.verification_key)
                    .map_err(|e| node_err(e.to_string()))?,
            };
            b.register(identity.clone())?;
            match (self.transport, &n.address) {
                (TransportKind::Socket, Some(a)) => {
                    let addr: SocketAddr = a.parse().map_err(|e| node_err(format!("bad address {a:?}: {e}")))?;
                    if addresses.values().any(|x| *x == addr) {
                        return Err(node_err(format!("address {addr} used twice")));
                    }
                    addresses.insert(n.label.clone(), addr);
                }
                (TransportKind::Socket, None) | (TransportKind::Sim, Some(_)) => {
                    return Err(ConfigError::MixedTransport(self.transport));
                }
                (TransportKind::Sim, None) => {}
            }
            nodes.push(identity);
        }
        let registry = b.build();
        let orderers = registry.with_role(Role::Orderer).count();
        if orderers != 1 {
            return Err(ConfigError::Invalid(format!("expected exactly one orderer, found {orderers}")));
        }
        let labels: BTreeSet<&str> = nodes.iter().map(|n| n.label.as_str()).collect();
        for l in &self.sim.links {
            for end in [&l.from, &l.to] {
                if !labels.contains(end.as_str()) {
                    return Err(ConfigError::Invalid(format!("link references unknown node {end}")));
                }
            }
        }
        let chaincode_policy: PolicyExpr = self.chaincode_policy.parse()?;
        if let Some(o) = chaincode_policy.orgs().into_iter().find(|o| !registry.has_org(o)) {
            return Err(ConfigError::Invalid(format!("chaincode policy names unknown org {o}")));
        }
        Ok(NetworkConfig {
            channel: ChannelConfig {
                registry,
                chaincode_policy,
                batch_size: self.orderer.batch_size,
                batch_timeout_ms: self.orderer.batch_timeout_ms,
            },
            transport: self.transport,
            nodes,
            addresses,
            peer: self.peer.clone(),
            sim: self.sim.clone(),
        })
    }
}

/// Deterministic per-label key derived from a seed.
pub fn derive_key(seed: u64, label: &str) -> SigningKey {
    SigningKey::from_seed(hash(&crate::codec::encode(&("bbs-node-key", seed, label))).0)
}

/// Built-in topologies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Testbed {
    /// Org1 and Org2 each run a peer and a client; Org3 runs a peer and the
    /// orderer.
    ThreeOrg,
    /// Org1 runs a peer and a client, Org2 a peer and the orderer.
    TwoOrg,
    /// `n` orgs with a peer and a client each, plus the orderer in the last
    /// org.
    Orgs(usize),
}

pub fn peer_label(org: &str) -> String {
    format!("peer0.{}", org.to_ascii_lowercase())
}

pub fn client_label(org: &str) -> String {
    format!("client.{}", org.to_ascii_lowercase())
}

pub fn orderer_label(org: &str) -> String {
    format!("orderer.{}", org.to_ascii_lowercase())
}

impl Testbed {
    fn layout(self) -> (Vec<String>, Vec<(String, String, Role)>) {
        let mut nodes = Vec::new();
        let orgs: Vec<String> = match self {
            Testbed::ThreeOrg => (1..=3).map(|i| format!("Org{i}")).collect(),
            Testbed::TwoOrg => (1..=2).map(|i| format!("Org{i}")).collect(),
            Testbed::Orgs(n) => (1..=n.max(2)).map(|i| format!("Org{i}")).collect(),
        };
        let last = orgs.len() - 1;
        for (i, org) in orgs.iter().enumerate() {
            nodes.push((peer_label(org), org.clone(), Role::Peer));
            let has_client = match self {
                Testbed::ThreeOrg => i < 2,
                Testbed::TwoOrg => i == 0,
                Testbed::Orgs(_) => true,
            };
            if has_client {
                nodes.push((client_label(org), org.clone(), Role::Client));
            }
            if i == last {
                nodes.push((orderer_label(org), org.clone(), Role::Orderer));
            }
        }
        (orgs, nodes)
    }

    /// Genesis file plus the signing key of every node, derived from `seed`.
    pub fn generate(self, seed: u64, transport: TransportKind, base_port: u16) -> (GenesisFile, BTreeMap<String, SigningKey>) {
        let (orgs, layout) = self.layout();
        let mut keys = BTreeMap::new();
        let mut nodes = Vec::new();
        for (i, (label, org, role)) in layout.into_iter().enumerate() {
            let key = derive_key(seed, &label);
            nodes.push(NodeEntry {
                verification_key: key.verification_key().to_hex(),
                address: match transport {
                    TransportKind::Socket => Some(format!("127.0.0.1:{}", base_port as usize + i)),
                    TransportKind::Sim => None,
                },
                label: label.clone(),
                org,
                role,
            });
            keys.insert(label, key);
        }
        let genesis = GenesisFile {
            channel: "bbs".into(),
            chaincode_policy: "AND(Org1, Org2)".into(),
            transport,
            orgs,
            orderer: OrdererSection::default(),
            peer: PeerSection::default(),
            nodes,
            sim: SimSection::default(),
        };
        (genesis, keys)
    }
}

/// Hex-encoded signing-key seeds in `<dir>/<label>.key`.
pub struct KeyStore;

impl KeyStore {
    pub fn write(dir: &Path, keys: &BTreeMap<String, SigningKey>) -> Result<(), ConfigError> {
        let io = |source| ConfigError::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        for (label, key) in keys {
            fs::write(dir.join(format!("{label}.key")), key.to_hex() + "\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, label: &str) -> Result<SigningKey, ConfigError> {
        let path = dir.join(format!("{label}.key"));
        let text = fs::read_to_string(&path).map_err(|_| ConfigError::MissingKey(label.to_string()))?;
        Ok(SigningKey::from_hex(text.trim())?)
    }
}

/// Convenience: the org of a node label in a config.
pub fn org_of(config: &NetworkConfig, label: &str) -> Option<OrgId> {
    config.identity(label).map(|i| i.org.clone())
}
