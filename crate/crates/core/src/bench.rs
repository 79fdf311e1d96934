// SPDX-License-Identifier: Apache-2.0

//! Sharing benchmarks: per-phase latency of parallel sessions on the
//! three-org network, in simulation or over loopback sockets. One CSV row
//! per session.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{client_label, LinkSpec, NetworkConfig, Testbed, TransportKind};
use crate::identity::{OrgId, Role, SigningKey};
use crate::ledger::{replay, ChainFile, WorldState};
use crate::netsim::{
    spawn_socket_network, ClientCommand, ClientReport, Mode, NodeDirs, NodeError, SessionOutcome, SessionPlan, SessionReport,
    SimError, Step, Topology,
};
use crate::offstate::OffStateStore;

/// Link used by benchmark runs unless the caller overrides it.
pub const BENCH_LINK: LinkSpec = LinkSpec {
    bandwidth: 20_000_000,
    latency_ms: 2.0,
    drop_rate: 0.0,
};

pub const MB: u64 = 1 << 20;

const SOCKET_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("upload failed: {0}")]
    Upload(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0} sessions did not report in time")]
    Timeout(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchParams {
    pub file_size: u64,
    pub parallel: u32,
    pub buffer: u32,
    pub reps: u32,
    pub seed: u64,
    pub transport: TransportKind,
}

/// One session of one repetition. Latencies are milliseconds of simulated
/// time, or wall-clock time over sockets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub file_size: u64,
    pub parallel: u32,
    pub buffer: u32,
    pub rep: u32,
    pub session: u32,
    pub request_ms: f64,
    pub transfer_ms: f64,
    pub keyaccess_ms: f64,
    pub decrypt_ms: f64,
    pub session_ms: f64,
    pub outcome: String,
    /// Every peer's world state equals a replay of its exported chain.
    pub replay_ok: bool,
}

impl BenchRow {
    pub fn completed(&self) -> bool {
        self.outcome == "verified"
    }
}

/// Deterministic pseudo-random fixture bytes.
pub fn fixture(len: u64, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6669_7874_7572_6500);
    let mut v = vec![0u8; len as usize];
    rng.fill_bytes(&mut v);
    v
}

/// The three-org network with the benchmark link, generated from `seed`.
pub fn bench_network(seed: u64) -> (NetworkConfig, std::collections::BTreeMap<String, SigningKey>) {
    let (genesis, keys) = Testbed::ThreeOrg.generate(seed, TransportKind::Sim, 0);
    let mut config = genesis.validate().expect("generated genesis validates");
    config.sim.default_link = BENCH_LINK;
    (config, keys)
}

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

/// Runs `reps` repetitions, each on a fresh network under `root/rep-<n>`.
/// `tweak` adjusts the network before it starts.
pub fn run_with(params: &BenchParams, root: &Path, tweak: impl Fn(&mut NetworkConfig)) -> Result<Vec<BenchRow>, BenchError> {
    let mut rows = Vec::new();
    for rep in 0..params.reps {
        rows.extend(run_rep(params, root, rep, &tweak)?);
    }
    Ok(rows)
}

pub fn run(params: &BenchParams, root: &Path) -> Result<Vec<BenchRow>, BenchError> {
    run_with(params, root, |_| {})
}

/// One repetition: upload a fixture as Org1, then `parallel` sessions to
/// Org2. The network directory is removed afterwards.
pub fn run_rep(params: &BenchParams, root: &Path, rep: u32, tweak: impl Fn(&mut NetworkConfig)) -> Result<Vec<BenchRow>, BenchError> {
    let seed = params.seed.wrapping_add(rep as u64);
    let (mut config, keys) = bench_network(params.seed);
    config.peer.buffer_size = params.buffer;
    tweak(&mut config);
    let dir = root.join(format!("rep-{rep}"));
    let bytes = fixture(params.file_size, seed);
    let plan = |file_id: String| SessionPlan {
        file_id,
        sender: OrgId::new("Org1").expect("valid org"),
        receiver: OrgId::new("Org2").expect("valid org"),
        mode: Mode::Auto,
        parallelism: params.parallel,
        event_id: None,
    };
    let result = match params.transport {
        TransportKind::Sim => sim_rep(config, &keys, &dir, seed, bytes, plan),
        TransportKind::Socket => socket_rep(config, &keys, &dir, seed, bytes, plan),
    };
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let (reports, replay_ok) = result?;
    Ok(reports
        .into_iter()
        .map(|r| {
            let phase = |s: Step| r.phase(s).map_or(f64::NAN, |p| ms(p.latency_ns));
            BenchRow {
                file_size: params.file_size,
                parallel: params.parallel,
                buffer: params.buffer,
                rep,
                session: r.index,
                request_ms: phase(Step::Request),
                transfer_ms: phase(Step::Transfer),
                keyaccess_ms: phase(Step::KeyAccess),
                decrypt_ms: phase(Step::Decrypt),
                session_ms: ms(r.latency_ns()),
                outcome: outcome_label(&r.outcome),
                replay_ok,
            }
        })
        .collect())
}

type RepResult = Result<(Vec<SessionReport>, bool), BenchError>;

fn sim_rep(
    config: NetworkConfig,
    keys: &BTreeMap<String, SigningKey>,
    dir: &Path,
    seed: u64,
    bytes: Vec<u8>,
    plan: impl Fn(String) -> SessionPlan,
) -> RepResult {
    let mut topo = Topology::build(config, keys, dir, seed)?;
    let owner = client_label("Org1");
    let src = topo.put_fixture(&owner, "fixture.bin", &bytes)?;
    drop(bytes);
    let file = topo
        .upload(&owner, &src, "fixture.bin", "Org2", "bench fixture")
        .map_err(BenchError::Upload)?;
    let reports = topo.share(&client_label("Org2"), plan(file.id))?;
    topo.settle()?;
    let replay_ok = topo.peer_labels().iter().all(|p| {
        let peer = &topo.peer(p).peer;
        let exported = ChainFile::read_all(&peer.chain_path());
        exported.and_then(|b| replay(&b)).ok().map(|s| s.digest()) == Some(peer.state.digest())
    });
    Ok((reports, replay_ok))
}

/// Over loopback sockets latencies are wall-clock. The live state is read
/// back from the snapshot each peer writes when it stops.
fn socket_rep(
    config: NetworkConfig,
    keys: &BTreeMap<String, SigningKey>,
    dir: &Path,
    seed: u64,
    bytes: Vec<u8>,
    plan: impl Fn(String) -> SessionPlan,
) -> RepResult {
    let dirs = NodeDirs::new(dir);
    let owner = client_label("Org1");
    let src = OffStateStore::open(dirs.client_workspace(&owner))
        .and_then(|s| s.put("fixture.bin", &bytes, 0))
        .map_err(NodeError::from)?;
    drop(bytes);
    let mut net = spawn_socket_network(&config, keys, &dirs, seed)?;
    let up = net.run_command(
        &owner,
        |req| ClientCommand::Upload {
            req,
            source: src,
            name: "fixture.bin".into(),
            rule: "Org2".into(),
            description: "bench fixture".into(),
        },
        1,
        SOCKET_TIMEOUT,
    )?;
    let file = match up.into_iter().next() {
        Some(ClientReport::Upload(u)) => u.result.map_err(BenchError::Upload)?,
        other => return Err(BenchError::Upload(format!("no upload report: {other:?}"))),
    };
    let n = plan(String::new()).parallelism.max(1) as usize;
    let mut reports: Vec<SessionReport> = net
        .run_command(&client_label("Org2"), |req| ClientCommand::Share { req, plan: plan(file.id) }, n, SOCKET_TIMEOUT)?
        .into_iter()
        .filter_map(|r| match r {
            ClientReport::Session(s) => Some(s),
            _ => None,
        })
        .collect();
    if reports.len() < n {
        return Err(BenchError::Timeout(n - reports.len()));
    }
    reports.sort_by_key(|s| s.index);
    // Let commit notices and private-data pushes drain before stopping.
    std::thread::sleep(Duration::from_millis(200));
    net.shutdown();
    let replay_ok = config.nodes.iter().filter(|n| n.role == Role::Peer).all(|n| {
        let d = dirs.node(&n.label);
        let chain = ChainFile::read_all(&d.join(ChainFile::file_name(config.channel.registry.channel())));
        let live = WorldState::load_snapshot(&d.join("state.snapshot"));
        match (chain.and_then(|b| replay(&b)), live) {
            (Ok(a), Ok(b)) => a.digest() == b.digest(),
            _ => false,
        }
    });
    Ok((reports, replay_ok))
}

pub fn outcome_label(o: &SessionOutcome) -> String {
    match o {
        SessionOutcome::Completed { verdict, .. } => match verdict {
            crate::contract::Verdict::Verified => "verified".into(),
            v => format!("{v:?}").to_lowercase(),
        },
        SessionOutcome::Denied => "denied".into(),
        SessionOutcome::Dropped { after } => format!("dropped-after-{after}"),
        SessionOutcome::Stopped { after } => format!("stopped-after-{after}"),
        SessionOutcome::Failed { step, .. } => format!("failed-{step}"),
    }
}

pub fn write_csv<W: Write>(w: W, rows: &[BenchRow]) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        // Header only, so an empty run still yields a parseable file.
        out.write_record([
            "file_size",
            "parallel",
            "buffer",
            "rep",
            "session",
            "request_ms",
            "transfer_ms",
            "keyaccess_ms",
            "decrypt_ms",
            "session_ms",
            "outcome",
            "replay_ok",
        ])?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Appends rows to a results file, writing the header when the file is new
/// or empty.
pub fn append_csv(path: &Path, rows: &[BenchRow]) -> Result<(), BenchError> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        return write_csv(file, rows);
    }
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    xs.retain(|x| !x.is_nan());
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { (xs[n / 2 - 1] + xs[n / 2]) / 2.0 })
}

/// Median of one column over `rows`.
pub fn median_of(rows: &[BenchRow], col: impl Fn(&BenchRow) -> f64) -> Option<f64> {
    median(rows.iter().map(col).collect())
}
