// SPDX-License-Identifier: Apache-2.0

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ClientCommand, ClientReport, Message, Node, NodeIo};
use crate::config::{LinkSpec, SimSection};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("no progress possible at t={at_ns}ns while {nodes:?} still have pending work")]
    Deadlock { at_ns: u64, nodes: Vec<String> },
    #[error("time limit of {limit_ns}ns reached")]
    TimeLimit { limit_ns: u64 },
    #[error("unknown node {0}")]
    UnknownNode(String),
}

/// One delivered message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time_ns: u64,
    pub from: String,
    pub to: String,
    pub kind: String,
    pub len: u64,
}

#[derive(Debug)]
pub enum SimEvent {
    Deliver { from: String, to: String, msg: Message },
    Timer { node: String, token: u64 },
}

/// Label used for operator-injected messages.
pub const OPERATOR: &str = "operator";

struct SimIo {
    now: u64,
    sends: Vec<(String, Message)>,
    timers: Vec<(u64, u64)>,
}

impl NodeIo for SimIo {
    fn now(&self) -> u64 {
        self.now
    }

    fn send(&mut self, to: &str, msg: Message) {
        self.sends.push((to.to_string(), msg));
    }

    fn set_timer(&mut self, at_ns: u64, token: u64) {
        self.timers.push((at_ns.max(self.now), token));
    }
}

/// Deterministic discrete-event driver.
///
/// Each directed link is a FIFO pipe: a message occupies the link for
/// `len / bandwidth` after the previous one leaves it, then arrives
/// `latency` later. Equal-time events run in scheduling order, so a seed
/// fully determines the run.
pub struct Simulator {
    nodes: BTreeMap<String, Box<dyn Node>>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: BTreeMap<u64, SimEvent>,
    now: u64,
    seq: u64,
    default_link: LinkSpec,
    links: BTreeMap<(String, String), LinkSpec>,
    link_free: BTreeMap<(String, String), u64>,
    partitions: BTreeSet<(String, String)>,
    crashed: BTreeSet<String>,
    rng: ChaCha8Rng,
    trace: Vec<TraceEntry>,
    reports: Vec<(String, ClientReport)>,
    started: bool,
    delivered: u64,
}

fn pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl Simulator {
    pub fn new(seed: u64, sim: &SimSection) -> Self {
        let links = sim
            .links
            .iter()
            .map(|l| ((l.from.clone(), l.to.clone()), l.spec))
            .collect();
        Simulator {
            nodes: BTreeMap::new(),
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            now: 0,
            seq: 0,
            default_link: sim.default_link,
            links,
            link_free: BTreeMap::new(),
            partitions: BTreeSet::new(),
            crashed: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Vec::new(),
            reports: Vec::new(),
            started: false,
            delivered: 0,
        }
    }

    pub fn add_node(&mut self, node: Box<dyn Node>) {
        self.nodes.insert(node.label().to_string(), node);
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Canonical encoding of the trace, for byte-level comparisons.
    pub fn trace_bytes(&self) -> Vec<u8> {
        crate::codec::encode(&self.trace)
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Overrides the link in both directions between `a` and `b`.
    pub fn set_link(&mut self, a: &str, b: &str, spec: LinkSpec) {
        self.links.insert((a.to_string(), b.to_string()), spec);
        self.links.insert((b.to_string(), a.to_string()), spec);
    }

    /// Messages between `a` and `b` are dropped while partitioned.
    pub fn partition(&mut self, a: &str, b: &str, on: bool) {
        if on {
            self.partitions.insert(pair(a, b));
        } else {
            self.partitions.remove(&pair(a, b));
        }
    }

    /// Crash-stop: the node neither receives nor acts from now on.
    pub fn crash(&mut self, label: &str) {
        self.crashed.insert(label.to_string());
    }

    pub fn node<T: 'static>(&self, label: &str) -> Option<&T> {
        self.nodes.get(label)?.as_any().downcast_ref()
    }

    pub fn node_mut<T: 'static>(&mut self, label: &str) -> Option<&mut T> {
        self.nodes.get_mut(label)?.as_any_mut().downcast_mut()
    }

    fn link(&self, from: &str, to: &str) -> LinkSpec {
        self.links
            .get(&(from.to_string(), to.to_string()))
            .or_else(|| self.links.get(&(to.to_string(), from.to_string())))
            .copied()
            .unwrap_or(self.default_link)
    }

    fn push(&mut self, at: u64, ev: SimEvent) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse((at, seq)));
        self.events.insert(seq, ev);
    }

    fn transmit(&mut self, from: &str, to: String, msg: Message) {
        if !self.nodes.contains_key(&to) {
            let reason = "unknown destination".to_string();
            self.push(self.now, SimEvent::Deliver {
                from: from.to_string(),
                to: from.to_string(),
                msg: Message::SendFailed { to, reason },
            });
            return;
        }
        if self.partitions.contains(&pair(from, &to)) {
            return;
        }
        let spec = self.link(from, &to);
        if spec.drop_rate > 0.0 && self.rng.gen_bool(spec.drop_rate.clamp(0.0, 1.0)) {
            return;
        }
        let len = msg.wire_len();
        let tx_ns = (len as u128 * 1_000_000_000 / spec.bandwidth.max(1) as u128) as u64;
        let key = (from.to_string(), to.clone());
        let free = self.link_free.entry(key).or_insert(0);
        let start = (*free).max(self.now);
        *free = start + tx_ns;
        let arrival = *free + (spec.latency_ms * 1e6) as u64;
        self.push(arrival, SimEvent::Deliver {
            from: from.to_string(),
            to,
            msg,
        });
    }

    fn dispatch(&mut self, label: &str, f: impl FnOnce(&mut dyn Node, &mut SimIo)) {
        if self.crashed.contains(label) {
            return;
        }
        let Some(node) = self.nodes.get_mut(label) else { return };
        let mut io = SimIo {
            now: self.now,
            sends: Vec::new(),
            timers: Vec::new(),
        };
        f(node.as_mut(), &mut io);
        for r in node.drain_reports() {
            self.reports.push((label.to_string(), r));
        }
        for (at, token) in io.timers {
            self.push(at, SimEvent::Timer {
                node: label.to_string(),
                token,
            });
        }
        for (to, msg) in io.sends {
            self.transmit(label, to, msg);
        }
    }

    fn start(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        let labels: Vec<String> = self.nodes.keys().cloned().collect();
        for l in labels {
            self.dispatch(&l, |n, io| n.on_start(io));
        }
    }

    /// Delivers `msg` to `to` as if from the operator, at the current time.
    pub fn inject(&mut self, to: &str, msg: Message) -> Result<(), SimError> {
        if !self.nodes.contains_key(to) {
            return Err(SimError::UnknownNode(to.to_string()));
        }
        self.start();
        self.push(self.now, SimEvent::Deliver {
            from: OPERATOR.to_string(),
            to: to.to_string(),
            msg,
        });
        Ok(())
    }

    pub fn command(&mut self, client: &str, cmd: ClientCommand) -> Result<(), SimError> {
        self.inject(client, Message::Command(cmd))
    }

    /// Processes one event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        self.start();
        let Some(Reverse((at, seq))) = self.queue.pop() else {
            return false;
        };
        self.now = at;
        let ev = self.events.remove(&seq).expect("queued event present");
        match ev {
            SimEvent::Deliver { from, to, msg } => {
                if self.crashed.contains(&to) {
                    return true;
                }
                self.delivered += 1;
                self.trace.push(TraceEntry {
                    time_ns: at,
                    from: from.clone(),
                    to: to.clone(),
                    kind: msg.kind().to_string(),
                    len: msg.wire_len(),
                });
                self.dispatch(&to, |n, io| n.on_message(&from, msg, io));
            }
            SimEvent::Timer { node, token } => self.dispatch(&node, |n, io| n.on_timer(token, io)),
        }
        true
    }

    fn busy_nodes(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|(l, n)| !self.crashed.contains(*l) && n.busy())
            .map(|(l, _)| l.clone())
            .collect()
    }

    /// Runs until no events remain. Fails if some node still has work.
    pub fn run_until_quiescent(&mut self) -> Result<(), SimError> {
        while self.step() {}
        let busy = self.busy_nodes();
        if busy.is_empty() {
            Ok(())
        } else {
            Err(SimError::Deadlock {
                at_ns: self.now,
                nodes: busy,
            })
        }
    }

    /// Runs events up to and including `now + duration_ns`.
    pub fn run_for(&mut self, duration_ns: u64) {
        let end = self.now + duration_ns;
        self.start();
        while let Some(Reverse((at, _))) = self.queue.peek() {
            if *at > end {
                break;
            }
            self.step();
        }
        self.now = self.now.max(end);
    }

    /// Runs until `done` holds for the collected reports, the queue drains
    /// (deadlock if work is pending) or simulated time passes `limit_ns`.
    pub fn run_until(&mut self, limit_ns: u64, mut done: impl FnMut(&[(String, ClientReport)]) -> bool) -> Result<(), SimError> {
        self.start();
        loop {
            if done(&self.reports) {
                return Ok(());
            }
            match self.queue.peek() {
                None => {
                    return Err(SimError::Deadlock {
                        at_ns: self.now,
                        nodes: self.busy_nodes(),
                    })
                }
                Some(Reverse((at, _))) if *at > limit_ns => return Err(SimError::TimeLimit { limit_ns }),
                Some(_) => {
                    self.step();
                }
            }
        }
    }

    /// Reports collected so far, with the reporting client's label.
    pub fn reports(&self) -> &[(String, ClientReport)] {
        &self.reports
    }

    pub fn take_reports(&mut self) -> Vec<(String, ClientReport)> {
        std::mem::take(&mut self.reports)
    }

    /// Removes and returns the reports matching `pred`.
    pub fn take_reports_where(&mut self, mut pred: impl FnMut(&str, &ClientReport) -> bool) -> Vec<(String, ClientReport)> {
        let (hit, keep) = std::mem::take(&mut self.reports)
            .into_iter()
            .partition(|(l, r)| pred(l, r));
        self.reports = keep;
        hit
    }

    pub fn shutdown(&mut self) {
        for n in self.nodes.values_mut() {
            n.shutdown();
        }
    }
}
