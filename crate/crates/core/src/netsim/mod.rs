// SPDX-License-Identifier: Apache-2.0

//! Node runtimes and the transports that connect them.
//!
//! Peers, the orderer and clients are written sans-IO: each reacts to a
//! message or timer through [`Node`] and acts only through [`NodeIo`]. The
//! [`Simulator`] drives them on a virtual clock over modelled links; the
//! socket transport drives the same nodes over TCP.

mod client;
mod orderer;
mod peer;
mod sim;
mod socket;
mod topology;

use std::any::Any;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    ClientCommand, ClientNode, ClientReport, Mode, PhaseSample, SessionOutcome, SessionPlan, SessionReport, Step,
    UploadReport,
};
pub use orderer::OrdererNode;
pub use peer::{Committed, Endorsed, PeerNode, PeerState};
pub use sim::{SimError, SimEvent, Simulator, TraceEntry};
pub use socket::{operator_command, run_socket_node, spawn_socket_network, SocketHandle, SocketNetwork};
pub use topology::{build_nodes, NodeDirs, Topology};

use crate::contract::ContractError;
use crate::ledger::{Block, Digest, LedgerError, StateKey, Validity};
use crate::offstate::{OffStateError, TransferFrame};
use crate::pdc::{AcceptStatus, CollectionId, PdcError, PrivatePayload};
use crate::txflow::{ProposalResponse, SignedProposal, Transaction};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Pdc(#[from] PdcError),
    #[error(transparent)]
    OffState(#[from] OffStateError),
    #[error("{0}")]
    Config(String),
}

/// Everything that travels between nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Message {
    Propose {
        req: u64,
        proposal: SignedProposal,
    },
    Endorsed {
        req: u64,
        result: Result<ProposalResponse, ContractError>,
    },
    Query {
        req: u64,
        proposal: SignedProposal,
    },
    QueryResult {
        req: u64,
        result: Result<Vec<u8>, ContractError>,
    },
    /// Asks a peer for commit notices.
    Subscribe,
    Committed {
        tx_id: Digest,
        height: u64,
        flag: Validity,
    },
    Submit(Box<Transaction>),
    Deliver(Box<Block>),
    Transfer(TransferFrame),
    Private(PrivatePayload),
    PrivateAck {
        collection: CollectionId,
        key: StateKey,
        tx_id: Digest,
        status: AcceptStatus,
    },
    /// Operator instruction to a client.
    Command(ClientCommand),
    /// Client outcome, addressed to the operator.
    Report(ClientReport),
    /// Produced locally by a transport when a message could not be sent.
    SendFailed {
        to: String,
        reason: String,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Propose { .. } => "propose",
            Message::Endorsed { .. } => "endorsed",
            Message::Query { .. } => "query",
            Message::QueryResult { .. } => "query-result",
            Message::Subscribe => "subscribe",
            Message::Committed { .. } => "committed",
            Message::Submit(_) => "submit",
            Message::Deliver(_) => "deliver",
            Message::Transfer(TransferFrame::Chunk { .. }) => "chunk",
            Message::Transfer(_) => "transfer",
            Message::Private(_) => "private",
            Message::PrivateAck { .. } => "private-ack",
            Message::Command(_) => "command",
            Message::Report(_) => "report",
            Message::SendFailed { .. } => "send-failed",
        }
    }

    /// Bytes on the wire, length prefix included.
    pub fn wire_len(&self) -> u64 {
        crate::codec::encoded_len(self) + 4
    }
}

/// The side of the world a node may touch.
pub trait NodeIo {
    /// Current time in nanoseconds.
    fn now(&self) -> u64;
    fn send(&mut self, to: &str, msg: Message);
    /// Calls [`Node::on_timer`] with `token` at `at_ns` (or now, if past).
    fn set_timer(&mut self, at_ns: u64, token: u64);
}

pub trait Node: Send {
    fn label(&self) -> &str;
    fn on_start(&mut self, _io: &mut dyn NodeIo) {}
    fn on_message(&mut self, from: &str, msg: Message, io: &mut dyn NodeIo);
    fn on_timer(&mut self, _token: u64, _io: &mut dyn NodeIo) {}
    /// True while the node has work it is waiting to finish.
    fn busy(&self) -> bool {
        false
    }
    /// Outcomes produced since the last call.
    fn drain_reports(&mut self) -> Vec<ClientReport> {
        Vec::new()
    }
    /// Flushes durable state before shutdown.
    fn shutdown(&mut self) {}
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

pub(crate) const MS: u64 = 1_000_000;
