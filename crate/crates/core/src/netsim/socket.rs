// SPDX-License-Identifier: Apache-2.0

//! TCP transport. Each node runs on its own thread with its own listener.
//! A connection opens with a hello frame naming the sender; every later
//! frame is one encoded [`Message`]. Replies to a sender without a listed
//! address (the operator) go back over the connection it opened.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::sim::OPERATOR;
use super::{build_nodes, ClientCommand, ClientReport, Message, Node, NodeDirs, NodeError, NodeIo};
use crate::codec::{self, read_frame, write_frame};
use crate::config::NetworkConfig;
use crate::identity::SigningKey;

const CONNECT_ATTEMPTS: u32 = 50;
const CONNECT_BACKOFF: Duration = Duration::from_millis(100);
const POLL: Duration = Duration::from_millis(20);

#[derive(Serialize, Deserialize)]
struct Hello {
    from: String,
}

enum Event {
    Inbound { from: String, msg: Message },
}

type Inbound = Arc<Mutex<HashMap<String, BufWriter<TcpStream>>>>;

fn send_frame(w: &mut impl Write, msg: &Message) -> io::Result<()> {
    write_frame(w, &codec::encode(msg)).map_err(|e| io::Error::new(io::ErrorKind::Other, e.to_string()))?;
    w.flush()
}

fn hello(stream: &mut TcpStream, from: &str) -> io::Result<()> {
    let bytes = codec::encode(&Hello { from: from.to_string() });
    write_frame(stream, &bytes).map_err(|e| io::Error::new(io::ErrorKind::Other, e.to_string()))
}

/// Reads frames from one accepted connection until it closes.
fn serve(stream: TcpStream, events: Sender<Event>, inbound: Inbound) {
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let from = match read_frame(&mut reader) {
        Ok(Some(bytes)) => match codec::decode::<Hello>(&bytes) {
            Ok(h) => h.from,
            Err(_) => return,
        },
        _ => return,
    };
    inbound.lock().expect("inbound lock").insert(from.clone(), BufWriter::new(stream));
    loop {
        match read_frame(&mut reader) {
            Ok(Some(bytes)) => match codec::decode::<Message>(&bytes) {
                Ok(msg) => {
                    if events.send(Event::Inbound { from: from.clone(), msg }).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    warn!("dropping undecodable frame from {from}: {e}");
                    break;
                }
            },
            Ok(None) => break,
            Err(e) => {
                debug!("connection from {from} closed: {e}");
                break;
            }
        }
    }
    inbound.lock().expect("inbound lock").remove(&from);
}

fn listen(listener: TcpListener, events: Sender<Event>, inbound: Inbound, stop: Arc<AtomicBool>) {
    listener.set_nonblocking(true).expect("nonblocking listener");
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let (ev, ib) = (events.clone(), inbound.clone());
                thread::spawn(move || serve(stream, ev, ib));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

/// Owns the outgoing connection to one destination. Messages queue in
/// order; if the destination cannot be reached every queued message is
/// reported back as [`Message::SendFailed`].
fn write_loop(me: String, to: String, addr: SocketAddr, rx: Receiver<Message>, events: Sender<Event>) {
    let fail = |reason: String| {
        let _ = events.send(Event::Inbound {
            from: me.clone(),
            msg: Message::SendFailed { to: to.clone(), reason },
        });
    };
    let mut stream = None;
    for _ in 0..CONNECT_ATTEMPTS {
        match TcpStream::connect(addr) {
            Ok(mut s) => {
                let _ = s.set_nodelay(true);
                if hello(&mut s, &me).is_ok() {
                    stream = Some(s);
                    break;
                }
            }
            Err(_) => thread::sleep(CONNECT_BACKOFF),
        }
    }
    let Some(stream) = stream else {
        fail(format!("cannot connect to {addr}"));
        return;
    };
    let mut w = BufWriter::new(stream);
    for msg in rx.iter() {
        if let Err(e) = send_frame(&mut w, &msg) {
            fail(e.to_string());
            return;
        }
    }
}

struct SocketIo {
    now: u64,
    sends: Vec<(String, Message)>,
    timers: Vec<(u64, u64)>,
}

impl NodeIo for SocketIo {
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

struct Runtime {
    node: Box<dyn Node>,
    label: String,
    addresses: BTreeMap<String, SocketAddr>,
    events_tx: Sender<Event>,
    inbound: Inbound,
    writers: HashMap<String, (Sender<Message>, JoinHandle<()>)>,
    timers: BinaryHeap<Reverse<(u64, u64)>>,
    /// Timer token by scheduling sequence number.
    tokens: HashMap<u64, u64>,
    seq: u64,
    epoch: Instant,
    reports: Option<Sender<(String, ClientReport)>>,
}

impl Runtime {
    fn now(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn dispatch(&mut self, f: impl FnOnce(&mut dyn Node, &mut SocketIo)) {
        let mut io = SocketIo {
            now: self.now(),
            sends: Vec::new(),
            timers: Vec::new(),
        };
        f(self.node.as_mut(), &mut io);
        for r in self.node.drain_reports() {
            self.deliver(OPERATOR, Message::Report(r.clone()));
            if let Some(tx) = &self.reports {
                let _ = tx.send((self.label.clone(), r));
            }
        }
        for (at, token) in io.timers {
            let seq = self.seq;
            self.seq += 1;
            self.timers.push(Reverse((at, seq)));
            self.tokens.insert(seq, token);
        }
        for (to, msg) in io.sends {
            self.deliver(&to, msg);
        }
    }

    fn deliver(&mut self, to: &str, msg: Message) {
        if let Some(addr) = self.addresses.get(to).copied() {
            let msg = match self.writers.get(to) {
                Some((tx, _)) => match tx.send(msg) {
                    Ok(()) => return,
                    Err(mpsc::SendError(m)) => m,
                },
                None => msg,
            };
            // First use, or the previous writer gave up: start a new one.
            let (tx, rx) = mpsc::channel();
            let _ = tx.send(msg);
            let (me, dest, ev) = (self.label.clone(), to.to_string(), self.events_tx.clone());
            let handle = thread::spawn(move || write_loop(me, dest, addr, rx, ev));
            self.writers.insert(to.to_string(), (tx, handle));
            return;
        }
        let mut inbound = self.inbound.lock().expect("inbound lock");
        match inbound.get_mut(to) {
            Some(w) => {
                if let Err(e) = send_frame(w, &msg) {
                    debug!("{}: reply to {to} failed: {e}", self.label);
                    inbound.remove(to);
                }
            }
            None if to == OPERATOR => {}
            None => {
                drop(inbound);
                let reason = "unknown destination".to_string();
                let _ = self.events_tx.send(Event::Inbound {
                    from: self.label.clone(),
                    msg: Message::SendFailed { to: to.to_string(), reason },
                });
            }
        }
    }

    fn fire_due(&mut self) {
        loop {
            let now = self.now();
            match self.timers.peek() {
                Some(Reverse((at, _))) if *at <= now => {}
                _ => return,
            }
            let Reverse((_, seq)) = self.timers.pop().expect("peeked");
            if let Some(token) = self.tokens.remove(&seq) {
                self.dispatch(|n, io| n.on_timer(token, io));
            }
        }
    }

    fn wait(&self) -> Duration {
        let now = self.now();
        match self.timers.peek() {
            Some(Reverse((at, _))) => Duration::from_nanos(at.saturating_sub(now)).min(POLL),
            None => POLL,
        }
    }
}

/// Runs `node` until `stop` is set, serving `listen` and reaching other
/// nodes at `addresses`. Client outcomes also go to `reports` if given.
pub fn run_socket_node(
    node: Box<dyn Node>,
    listen_addr: SocketAddr,
    addresses: BTreeMap<String, SocketAddr>,
    reports: Option<Sender<(String, ClientReport)>>,
    stop: Arc<AtomicBool>,
) -> io::Result<()> {
    let listener = TcpListener::bind(listen_addr)?;
    run_on_listener(node, listener, addresses, reports, stop, None)
}

fn run_on_listener(
    node: Box<dyn Node>,
    listener: TcpListener,
    addresses: BTreeMap<String, SocketAddr>,
    reports: Option<Sender<(String, ClientReport)>>,
    stop: Arc<AtomicBool>,
    channel: Option<(Sender<Event>, Receiver<Event>)>,
) -> io::Result<()> {
    let (events_tx, events_rx) = channel.unwrap_or_else(mpsc::channel);
    let inbound: Inbound = Arc::default();
    let listener_thread = {
        let (ev, ib, st) = (events_tx.clone(), inbound.clone(), stop.clone());
        thread::spawn(move || listen(listener, ev, ib, st))
    };
    let label = node.label().to_string();
    let mut rt = Runtime {
        node,
        label,
        addresses,
        events_tx,
        inbound,
        writers: HashMap::new(),
        timers: BinaryHeap::new(),
        tokens: HashMap::new(),
        seq: 0,
        epoch: Instant::now(),
        reports,
    };
    rt.dispatch(|n, io| n.on_start(io));
    while !stop.load(Ordering::Relaxed) {
        rt.fire_due();
        match events_rx.recv_timeout(rt.wait()) {
            Ok(Event::Inbound { from, msg }) => rt.dispatch(|n, io| n.on_message(&from, msg, io)),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    rt.node.shutdown();
    let writers: Vec<_> = rt.writers.drain().collect();
    for (_, (tx, handle)) in writers {
        drop(tx);
        let _ = handle.join();
    }
    let _ = listener_thread.join();
    Ok(())
}

/// Operator-side control of one running node.
pub struct SocketHandle {
    pub label: String,
    pub addr: SocketAddr,
    events: Sender<Event>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl SocketHandle {
    pub fn inject(&self, msg: Message) {
        let _ = self.events.send(Event::Inbound {
            from: OPERATOR.to_string(),
            msg,
        });
    }
}

/// All nodes of a configuration running in this process over loopback TCP.
pub struct SocketNetwork {
    handles: BTreeMap<String, SocketHandle>,
    reports: Receiver<(String, ClientReport)>,
    parked: Vec<(String, ClientReport)>,
    stop: Arc<AtomicBool>,
    next_req: u64,
}

/// Starts every node of `config`. Listeners bind to the configured
/// addresses, or to ephemeral loopback ports when a node has none.
pub fn spawn_socket_network(
    config: &NetworkConfig,
    keys: &BTreeMap<String, SigningKey>,
    dirs: &NodeDirs,
    seed: u64,
) -> Result<SocketNetwork, NodeError> {
    let nodes = build_nodes(config, keys, dirs, seed, false, None)?;
    let io_err = |e: io::Error| NodeError::Config(e.to_string());
    let mut listeners = Vec::new();
    let mut addresses = BTreeMap::new();
    for n in &nodes {
        let label = n.label().to_string();
        let bind = config
            .addresses
            .get(&label)
            .copied()
            .unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 0)));
        let l = TcpListener::bind(bind).map_err(io_err)?;
        addresses.insert(label, l.local_addr().map_err(io_err)?);
        listeners.push(l);
    }
    let stop = Arc::new(AtomicBool::new(false));
    let (rep_tx, rep_rx) = mpsc::channel();
    let mut handles = BTreeMap::new();
    for (node, listener) in nodes.into_iter().zip(listeners) {
        let label = node.label().to_string();
        let addr = addresses[&label];
        let (ev_tx, ev_rx) = mpsc::channel();
        let (book, reports, st, ev) = (addresses.clone(), rep_tx.clone(), stop.clone(), ev_tx.clone());
        let thread = thread::Builder::new()
            .name(label.clone())
            .spawn(move || run_on_listener(node, listener, book, Some(reports), st, Some((ev, ev_rx))))
            .map_err(io_err)?;
        handles.insert(label.clone(), SocketHandle {
            label,
            addr,
            events: ev_tx,
            thread: Some(thread),
        });
    }
    Ok(SocketNetwork {
        handles,
        reports: rep_rx,
        parked: Vec::new(),
        stop,
        next_req: 1,
    })
}

impl SocketNetwork {
    pub fn handle(&self, label: &str) -> Option<&SocketHandle> {
        self.handles.get(label)
    }

    pub fn next_req(&mut self) -> u64 {
        let r = self.next_req;
        self.next_req += 1;
        r
    }

    pub fn command(&self, client: &str, cmd: ClientCommand) -> Result<(), NodeError> {
        let h = self
            .handles
            .get(client)
            .ok_or_else(|| NodeError::Config(format!("unknown node {client}")))?;
        h.inject(Message::Command(cmd));
        Ok(())
    }

    /// Waits for `expect` reports of request `req` from `client`. Returns
    /// what arrived before `timeout`.
    pub fn wait_reports(&mut self, client: &str, req: u64, expect: usize, timeout: Duration) -> Vec<ClientReport> {
        let deadline = Instant::now() + timeout;
        let matches = |l: &str, r: &ClientReport| l == client && r.req() == req;
        loop {
            if self.parked.iter().filter(|(l, r)| matches(l, r)).count() >= expect {
                break;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            match self.reports.recv_timeout(left) {
                Ok(r) => self.parked.push(r),
                Err(_) => break,
            }
        }
        let (hit, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.parked).into_iter().partition(|(l, r)| matches(l, r));
        self.parked = keep;
        hit.into_iter().map(|(_, r)| r).collect()
    }

    /// Sends a command and waits for its reports.
    pub fn run_command(
        &mut self,
        client: &str,
        cmd: impl FnOnce(u64) -> ClientCommand,
        expect: usize,
        timeout: Duration,
    ) -> Result<Vec<ClientReport>, NodeError> {
        let req = self.next_req();
        self.command(client, cmd(req))?;
        Ok(self.wait_reports(client, req, expect, timeout))
    }

    /// Stops every node and waits for its thread to finish.
    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.handles.values_mut() {
            if let Some(t) = h.thread.take() {
                match t.join() {
                    Ok(Err(e)) => warn!("{} stopped with error: {e}", h.label),
                    Err(_) => warn!("{} panicked", h.label),
                    Ok(Ok(())) => {}
                }
            }
        }
    }
}

impl Drop for SocketNetwork {
    fn drop(&mut self) {
        self.stop_all();
    }
}

/// Sends one command to a client running elsewhere and collects `expect`
/// reports for it over the same connection.
pub fn operator_command(addr: SocketAddr, cmd: ClientCommand, expect: usize, timeout: Duration) -> io::Result<Vec<ClientReport>> {
    let req = match &cmd {
        ClientCommand::Upload { req, .. } | ClientCommand::Share { req, .. } | ClientCommand::Query { req, .. } => *req,
    };
    let deadline = Instant::now() + timeout;
    let mut stream = loop {
        match TcpStream::connect(addr) {
            Ok(s) => break s,
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => thread::sleep(CONNECT_BACKOFF),
        }
    };
    hello(&mut stream, OPERATOR)?;
    send_frame(&mut stream, &Message::Command(cmd))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut out = Vec::new();
    while out.len() < expect {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            break;
        }
        stream.set_read_timeout(Some(left))?;
        match read_frame(&mut reader) {
            Ok(Some(bytes)) => {
                if let Ok(Message::Report(r)) = codec::decode::<Message>(&bytes) {
                    if r.req() == req {
                        out.push(r);
                    }
                }
            }
            Ok(None) => break,
            Err(e) => return Err(io::Error::new(io::ErrorKind::Other, e.to_string())),
        }
    }
    Ok(out)
}
