// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{
    ClientCommand, ClientNode, ClientReport, Message, Node, NodeError, OrdererNode, PeerNode, PeerState, SessionPlan,
    SessionReport, SimError, Simulator,
};
use crate::config::{peer_label, NetworkConfig};
use crate::contract::FileEntity;
use crate::identity::{OrgId, Role, SigningKey};
use crate::offstate::OffStateStore;

/// Where each node keeps its files under a common root.
#[derive(Clone, Debug)]
pub struct NodeDirs {
    pub root: PathBuf,
}

impl NodeDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        NodeDirs { root: root.into() }
    }

    pub fn node(&self, label: &str) -> PathBuf {
        self.root.join(label)
    }

    pub fn peer_offstate(&self, peer: &str) -> PathBuf {
        self.node(peer).join("offstate")
    }

    pub fn client_workspace(&self, client: &str) -> PathBuf {
        self.node(client).join("workspace")
    }
}

/// Instantiates one runtime per configured node. `simulated` turns on the
/// virtual CPU cost model for peers.
pub fn build_nodes(
    config: &NetworkConfig,
    keys: &BTreeMap<String, SigningKey>,
    dirs: &NodeDirs,
    seed: u64,
    simulated: bool,
    only: Option<&str>,
) -> Result<Vec<Box<dyn Node>>, NodeError> {
    let mut out: Vec<Box<dyn Node>> = Vec::new();
    for id in &config.nodes {
        if only.is_some_and(|l| l != id.label) {
            continue;
        }
        let key = keys
            .get(&id.label)
            .cloned()
            .ok_or_else(|| NodeError::Config(format!("no key for {}", id.label)))?;
        if key.verification_key() != id.verification_key {
            return Err(NodeError::Config(format!("key for {} does not match the genesis file", id.label)));
        }
        let channel = config.channel.clone();
        match id.role {
            Role::Peer => {
                let state = PeerState::open(id.clone(), key, channel, &dirs.node(&id.label))?;
                let cost = simulated.then_some(config.sim.cost);
                out.push(Box::new(PeerNode::new(state, config.peer.clone(), cost)));
            }
            Role::Orderer => out.push(Box::new(OrdererNode::new(id.clone(), key, channel))),
            Role::Client => {
                let workspace = OffStateStore::open(dirs.client_workspace(&id.label))?;
                let org_store = config
                    .nodes
                    .iter()
                    .find(|n| n.role == Role::Peer && n.org == id.org)
                    .map(|p| OffStateStore::open(dirs.peer_offstate(&p.label)))
                    .transpose()?;
                out.push(Box::new(ClientNode::new(
                    id.clone(),
                    key,
                    channel,
                    workspace,
                    org_store,
                    seed,
                    config.peer.pdc_retry_ms,
                    config.peer.pdc_max_attempts,
                    config.peer.buffer_size,
                )?));
            }
        }
    }
    Ok(out)
}

/// A simulated network plus helpers that run operator commands to
/// completion.
pub struct Topology {
    pub sim: Simulator,
    pub config: NetworkConfig,
    pub dirs: NodeDirs,
    next_req: u64,
}

/// Generous bound on simulated time for one operator command.
const COMMAND_LIMIT_NS: u64 = 3_600 * 1_000_000_000;

impl Topology {
    pub fn build(config: NetworkConfig, keys: &BTreeMap<String, SigningKey>, root: &Path, seed: u64) -> Result<Self, NodeError> {
        let dirs = NodeDirs::new(root);
        let mut sim = Simulator::new(seed, &config.sim);
        for n in build_nodes(&config, keys, &dirs, seed, true, None)? {
            sim.add_node(n);
        }
        Ok(Topology {
            sim,
            config,
            dirs,
            next_req: 1,
        })
    }

    pub fn node_count(&self) -> usize {
        self.sim.labels().count()
    }

    pub fn peer(&self, label: &str) -> &PeerNode {
        self.sim.node::<PeerNode>(label).unwrap_or_else(|| panic!("no peer {label}"))
    }

    pub fn peer_mut(&mut self, label: &str) -> &mut PeerNode {
        self.sim.node_mut::<PeerNode>(label).unwrap_or_else(|| panic!("no peer {label}"))
    }

    pub fn peer_of(&self, org: &OrgId) -> &PeerNode {
        self.peer(&peer_label(org.as_str()))
    }

    pub fn peer_labels(&self) -> Vec<String> {
        self.config
            .nodes
            .iter()
            .filter(|n| n.role == Role::Peer)
            .map(|n| n.label.clone())
            .collect()
    }

    pub fn client(&self, label: &str) -> &ClientNode {
        self.sim.node::<ClientNode>(label).unwrap_or_else(|| panic!("no client {label}"))
    }

    /// Places a file in a client's workspace.
    pub fn put_fixture(&self, client: &str, name: &str, bytes: &[u8]) -> Result<String, NodeError> {
        Ok(self.client(client).workspace().put(name, bytes, 0)?)
    }

    fn next_req(&mut self) -> u64 {
        let r = self.next_req;
        self.next_req += 1;
        r
    }

    /// Sends a command and runs until its reports are in.
    pub fn run_command(&mut self, client: &str, cmd: impl FnOnce(u64) -> ClientCommand, expect: usize) -> Result<Vec<ClientReport>, SimError> {
        let req = self.next_req();
        self.sim.command(client, cmd(req))?;
        let label = client.to_string();
        let limit = self.sim.now() + COMMAND_LIMIT_NS;
        self.sim.run_until(limit, |rs| rs.iter().filter(|(l, r)| *l == label && r.req() == req).count() >= expect)?;
        let mine = self.sim.take_reports_where(|l, r| l == label && r.req() == req);
        Ok(mine.into_iter().map(|(_, r)| r).collect())
    }

    pub fn upload(&mut self, client: &str, source: &str, name: &str, rule: &str, description: &str) -> Result<FileEntity, String> {
        let reports = self
            .run_command(
                client,
                |req| ClientCommand::Upload {
                    req,
                    source: source.to_string(),
                    name: name.to_string(),
                    rule: rule.to_string(),
                    description: description.to_string(),
                },
                1,
            )
            .map_err(|e| e.to_string())?;
        match reports.into_iter().next() {
            Some(ClientReport::Upload(u)) => u.result,
            other => Err(format!("unexpected report {other:?}")),
        }
    }

    /// Runs a sharing plan from the receiver's client; one report per
    /// parallel session, ordered by session index.
    pub fn share(&mut self, client: &str, plan: SessionPlan) -> Result<Vec<SessionReport>, SimError> {
        let n = plan.parallelism.max(1) as usize;
        let reports = self.run_command(client, |req| ClientCommand::Share { req, plan }, n)?;
        let mut out: Vec<SessionReport> = reports
            .into_iter()
            .filter_map(|r| match r {
                ClientReport::Session(s) => Some(s),
                _ => None,
            })
            .collect();
        out.sort_by_key(|s| s.index);
        Ok(out)
    }

    pub fn query(&mut self, client: &str, function: &str, args: &[&str]) -> Result<Vec<u8>, String> {
        let args = args.iter().map(|s| s.to_string()).collect();
        let function = function.to_string();
        let reports = self
            .run_command(client, |req| ClientCommand::Query { req, function, args }, 1)
            .map_err(|e| e.to_string())?;
        match reports.into_iter().next() {
            Some(ClientReport::Query { result, .. }) => result.map_err(|e| e.to_string()),
            other => Err(format!("unexpected report {other:?}")),
        }
    }

    /// Lets in-flight work (private-data pushes, late notices) settle.
    pub fn settle(&mut self) -> Result<(), SimError> {
        self.sim.run_until_quiescent()
    }

    pub fn inject(&mut self, to: &str, msg: Message) -> Result<(), SimError> {
        self.sim.inject(to, msg)
    }
}
