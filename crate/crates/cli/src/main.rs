// SPDX-License-Identifier: Apache-2.0

mod plan;

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use bbs_core::audit::audit_file;
use bbs_core::bench::{self, BenchParams};
use bbs_core::codec;
use bbs_core::config::{client_label, peer_label, GenesisFile, KeyStore, NetworkConfig, Testbed, TransportKind};
use bbs_core::contract::{self, FileEntity};
use bbs_core::identity::SigningKey;
use bbs_core::ledger::ChainFile;
use bbs_core::netsim::{build_nodes, operator_command, run_socket_node, ClientCommand, ClientReport, NodeDirs, SessionReport, Topology};
use bbs_core::offstate::{EntryKind, OffStateStore};
use clap::{Args, Parser, Subcommand, ValueEnum};

use plan::PlanFile;

#[derive(Parser)]
#[command(name = "bbs", version, about = "Big-file sharing over a permissioned ledger")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a genesis file and node keys for a built-in testbed.
    Init(InitArgs),
    /// Run node daemons.
    Node {
        #[command(subcommand)]
        cmd: NodeCmd,
    },
    /// Register a file through a running client.
    Upload(UploadArgs),
    /// Run a sharing session plan.
    Share(ShareArgs),
    /// Read-only contract call through a running client.
    Query(QueryArgs),
    /// Measure per-phase latency of parallel sessions.
    Bench(BenchArgs),
    /// Re-verify an exported chain for one file.
    Audit(AuditArgs),
    /// Maintain a node's off-state store.
    Offstate {
        #[command(subcommand)]
        cmd: OffstateCmd,
    },
}

#[derive(Subcommand)]
enum NodeCmd {
    Run(NodeRunArgs),
}

#[derive(Subcommand)]
enum OffstateCmd {
    /// Remove partial transfers, staged values and, with --ciphers, received
    /// ciphertexts.
    Gc {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        ciphers: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TestbedArg {
    ThreeOrg,
    TwoOrg,
    FourOrg,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Sim,
    Socket,
}

impl From<TransportArg> for TransportKind {
    fn from(t: TransportArg) -> Self {
        match t {
            TransportArg::Sim => TransportKind::Sim,
            TransportArg::Socket => TransportKind::Socket,
        }
    }
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, value_enum, default_value = "three-org")]
    testbed: TestbedArg,
    #[arg(long, value_enum, default_value = "socket")]
    transport: TransportArg,
    #[arg(long, default_value_t = 7050)]
    base_port: u16,
    /// Directory for genesis.toml and keys/.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, env = "BBS_SEED", default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct Network {
    /// Genesis file.
    #[arg(long)]
    config: PathBuf,
    /// Key directory; defaults to keys/ next to the genesis file.
    #[arg(long)]
    keys: Option<PathBuf>,
}

impl Network {
    fn load(&self) -> Result<NetworkConfig> {
        let g = GenesisFile::load(&self.config)?;
        Ok(g.validate()?)
    }

    fn keys_dir(&self) -> PathBuf {
        self.keys
            .clone()
            .unwrap_or_else(|| self.config.parent().unwrap_or(Path::new(".")).join("keys"))
    }

    fn all_keys(&self, config: &NetworkConfig) -> Result<BTreeMap<String, SigningKey>> {
        let dir = self.keys_dir();
        config
            .nodes
            .iter()
            .map(|n| Ok((n.label.clone(), KeyStore::load(&dir, &n.label)?)))
            .collect()
    }
}

#[derive(Args)]
struct NodeRunArgs {
    #[command(flatten)]
    net: Network,
    /// Node label from the genesis file.
    #[arg(long)]
    id: String,
    /// Root of the node data directories.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, env = "BBS_SEED", default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct UploadArgs {
    #[command(flatten)]
    net: Network,
    /// Client label, e.g. client.org1.
    #[arg(long)]
    client: String,
    /// Data root the client daemon runs with.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    file: PathBuf,
    /// Comma-separated orgs allowed to receive the file.
    #[arg(long)]
    rule: String,
    #[arg(long, default_value = "")]
    description: String,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
}

#[derive(Args)]
struct ShareArgs {
    /// Session plan (TOML).
    #[arg(long)]
    plan: PathBuf,
    /// Genesis file; in simulation the built-in testbed is used without one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    keys: Option<PathBuf>,
    /// Run the network in-process on the simulated transport.
    #[arg(long)]
    sim: bool,
    /// Where the simulated run writes `<channel>.chain`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, env = "BBS_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 600)]
    timeout_secs: u64,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    net: Network,
    #[arg(long)]
    client: String,
    #[arg(long)]
    function: String,
    args: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Bytes; accepts K, M and G suffixes.
    #[arg(long, value_parser = parse_size)]
    file_size: u64,
    #[arg(long, default_value_t = 1)]
    parallel: u32,
    #[arg(long, value_parser = parse_size, default_value = "1M")]
    buffer: u64,
    #[arg(long, default_value_t = 1)]
    reps: u32,
    /// Results file; rows are appended.
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "sim")]
    transport: TransportArg,
    #[arg(long, env = "BBS_SEED", default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    chain: PathBuf,
    #[arg(long)]
    file_id: String,
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, mult) = match s.char_indices().last() {
        Some((i, 'K' | 'k')) => (&s[..i], 1u64 << 10),
        Some((i, 'M' | 'm')) => (&s[..i], 1 << 20),
        Some((i, 'G' | 'g')) => (&s[..i], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<u64>()
        .ok()
        .and_then(|n| n.checked_mul(mult))
        .ok_or_else(|| format!("bad size {s:?}"))
}

/// The operation ran but did not reach its postcondition.
struct Unmet;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Unmet)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<Result<(), Unmet>> {
    match cmd {
        Cmd::Init(a) => init(a).map(Ok),
        Cmd::Node { cmd: NodeCmd::Run(a) } => node_run(a).map(Ok),
        Cmd::Upload(a) => upload(a),
        Cmd::Share(a) => share(a),
        Cmd::Query(a) => query(a),
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::Audit(a) => {
            let r = audit_file(&a.chain, &a.file_id);
            print!("{r}");
            Ok(if r.passed() { Ok(()) } else { Err(Unmet) })
        }
        Cmd::Offstate {
            cmd: OffstateCmd::Gc { dir, ciphers },
        } => {
            let r = OffStateStore::open(&dir)?.gc(ciphers)?;
            println!("removed {} partial, {} staged, {} cipher entries", r.partials, r.staged, r.ciphers);
            Ok(Ok(()))
        }
    }
}

fn init(a: InitArgs) -> Result<()> {
    let testbed = match a.testbed {
        TestbedArg::ThreeOrg => Testbed::ThreeOrg,
        TestbedArg::TwoOrg => Testbed::TwoOrg,
        TestbedArg::FourOrg => Testbed::Orgs(4),
    };
    let (genesis, keys) = testbed.generate(a.seed, a.transport.into(), a.base_port);
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("genesis.toml");
    std::fs::write(&path, genesis.to_toml())?;
    KeyStore::write(&a.out.join("keys"), &keys)?;
    println!("wrote {} and {} keys", path.display(), keys.len());
    for n in &genesis.nodes {
        println!("  {:<16} {:?} {}", n.label, n.role, n.address.as_deref().unwrap_or("-"));
    }
    Ok(())
}

fn node_run(a: NodeRunArgs) -> Result<()> {
    let config = a.net.load()?;
    if config.transport != TransportKind::Socket {
        bail!("genesis transport is {}; node daemons need socket", config.transport);
    }
    if config.identity(&a.id).is_none() {
        bail!("{} is not in the genesis file", a.id);
    }
    let addr = *config.addresses.get(&a.id).ok_or_else(|| anyhow!("no address for {}", a.id))?;
    let dirs = NodeDirs::new(&a.data);
    let node_dir = dirs.node(&a.id);
    std::fs::create_dir_all(&node_dir)?;
    // Held for the life of the process so a second daemon for the same
    // identity is refused.
    let lock = File::create(node_dir.join("node.lock"))?;
    if lock.try_lock().is_err() {
        bail!("{} is already running from {}", a.id, node_dir.display());
    }
    let key = KeyStore::load(&a.net.keys_dir(), &a.id)?;
    let keys = BTreeMap::from([(a.id.clone(), key)]);
    let node = build_nodes(&config, &keys, &dirs, a.seed, false, Some(&a.id))?
        .pop()
        .ok_or_else(|| anyhow!("{} has no runtime", a.id))?;
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, stop.clone())?;
    }
    eprintln!("{} listening on {addr}", a.id);
    run_socket_node(node, addr, config.addresses.clone(), None, stop).with_context(|| format!("{} on {addr}", a.id))?;
    eprintln!("{} stopped", a.id);
    Ok(())
}

fn request_id() -> u64 {
    let t = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_micros() as u64);
    (t << 16) ^ std::process::id() as u64
}

fn client_addr(config: &NetworkConfig, client: &str) -> Result<std::net::SocketAddr> {
    config
        .addresses
        .get(client)
        .copied()
        .ok_or_else(|| anyhow!("no address for {client}"))
}

fn upload(a: UploadArgs) -> Result<Result<(), Unmet>> {
    let config = a.net.load()?;
    let addr = client_addr(&config, &a.client)?;
    let name = a
        .file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| anyhow!("bad file name {}", a.file.display()))?
        .to_string();
    let workspace = OffStateStore::open(NodeDirs::new(&a.data).client_workspace(&a.client))?;
    let src = File::open(&a.file).with_context(|| a.file.display().to_string())?;
    let (source, _) = workspace.put_reader(&name, src, EntryKind::Plain, None, 0)?;
    let cmd = ClientCommand::Upload {
        req: request_id(),
        source,
        name,
        rule: a.rule,
        description: a.description,
    };
    let reports = operator_command(addr, cmd, 1, Duration::from_secs(a.timeout_secs))?;
    match reports.into_iter().next() {
        Some(ClientReport::Upload(u)) => match u.result {
            Ok(f) => {
                print_file(&f);
                Ok(Ok(()))
            }
            Err(e) => {
                eprintln!("upload failed: {e}");
                Ok(Err(Unmet))
            }
        },
        _ => {
            eprintln!("no upload report before the timeout");
            Ok(Err(Unmet))
        }
    }
}

fn print_file(f: &FileEntity) {
    let rule: Vec<_> = f.access_rule.iter().map(|o| o.to_string()).collect();
    println!("{} {} owner={} hash={} rule={}", f.id, f.name, f.owner, f.hash, rule.join(","));
}

fn report_sessions(reports: &[SessionReport], expect: usize, mode: bbs_core::netsim::Mode) -> Result<(), Unmet> {
    for r in reports {
        let phases: Vec<String> = r
            .phases
            .iter()
            .map(|p| format!("{}={:.1}ms", p.step, p.latency_ns as f64 / 1e6))
            .collect();
        println!(
            "session {} event={} outcome={:?} [{}] total={:.1}ms",
            r.index,
            r.event_id.as_deref().unwrap_or("-"),
            r.outcome,
            phases.join(" "),
            r.latency_ns() as f64 / 1e6
        );
    }
    if reports.len() < expect {
        eprintln!("{} of {expect} sessions reported", reports.len());
        return Err(Unmet);
    }
    if reports.iter().all(|r| plan::met(mode, &r.outcome)) {
        Ok(())
    } else {
        Err(Unmet)
    }
}

fn share(a: ShareArgs) -> Result<Result<(), Unmet>> {
    let pf = PlanFile::load(&a.plan)?;
    if a.sim {
        return share_sim(&a, &pf);
    }
    let config_path = a.config.clone().ok_or_else(|| anyhow!("--config is required without --sim"))?;
    let net = Network {
        config: config_path,
        keys: a.keys.clone(),
    };
    let config = net.load()?;
    let file_id = pf.file_id.clone().ok_or_else(|| anyhow!("plan has no file_id"))?;
    let plan = pf.to_plan(file_id)?;
    let receiver = client_label(plan.receiver.as_str());
    let addr = client_addr(&config, &receiver)?;
    let (mode, n) = (plan.mode, plan.parallelism as usize);
    let reports = operator_command(addr, ClientCommand::Share { req: request_id(), plan }, n, Duration::from_secs(a.timeout_secs))?;
    let sessions: Vec<SessionReport> = reports
        .into_iter()
        .filter_map(|r| match r {
            ClientReport::Session(s) => Some(s),
            _ => None,
        })
        .collect();
    Ok(report_sessions(&sessions, n, mode))
}

fn share_sim(a: &ShareArgs, pf: &PlanFile) -> Result<Result<(), Unmet>> {
    let (config, keys) = match &a.config {
        Some(path) => {
            let net = Network {
                config: path.clone(),
                keys: a.keys.clone(),
            };
            let config = net.load()?;
            let keys = net.all_keys(&config)?;
            (config, keys)
        }
        None => {
            let (g, keys) = Testbed::ThreeOrg.generate(a.seed, TransportKind::Sim, 0);
            (g.validate()?, keys)
        }
    };
    let channel = config.channel.registry.channel().to_string();
    let data = tempfile::tempdir()?;
    let mut topo = Topology::build(config, &keys, data.path(), a.seed)?;
    let receiver_client = client_label(&pf.receiver);
    let file_id = match (&pf.file_id, &pf.source, pf.fixture_size) {
        (Some(id), None, None) => id.clone(),
        (None, source, size) => {
            let owner = client_label(&pf.sender);
            let (name, bytes) = match (source, size) {
                (Some(p), _) => {
                    let name = Path::new(p).file_name().and_then(|n| n.to_str()).unwrap_or("file").to_string();
                    (name, std::fs::read(p).with_context(|| p.clone())?)
                }
                (None, Some(n)) => ("fixture.bin".to_string(), bench::fixture(n, a.seed)),
                (None, None) => bail!("plan needs file_id, source or fixture_size"),
            };
            let src = topo.put_fixture(&owner, &name, &bytes)?;
            let rule = pf.rule.clone().unwrap_or_else(|| pf.receiver.clone());
            let f = topo
                .upload(&owner, &src, &name, &rule, "")
                .map_err(|e| anyhow!("upload failed: {e}"))?;
            print_file(&f);
            f.id
        }
        _ => bail!("give either file_id or an upload source, not both"),
    };
    let plan = pf.to_plan(file_id.clone())?;
    let (mode, n) = (plan.mode, plan.parallelism as usize);
    let reports = topo.share(&receiver_client, plan)?;
    topo.settle()?;
    std::fs::create_dir_all(&a.out)?;
    let chain = a.out.join(ChainFile::file_name(&channel));
    std::fs::copy(topo.peer(&peer_label(&pf.receiver)).peer.chain_path(), &chain)?;
    let result = report_sessions(&reports, n, mode);
    let custody = audit_file(&chain, &file_id);
    println!("chain exported to {}", chain.display());
    print!("{custody}");
    Ok(result)
}

fn query(a: QueryArgs) -> Result<Result<(), Unmet>> {
    let config = a.net.load()?;
    let addr = client_addr(&config, &a.client)?;
    let cmd = ClientCommand::Query {
        req: request_id(),
        function: a.function.clone(),
        args: a.args,
    };
    let reports = operator_command(addr, cmd, 1, Duration::from_secs(30))?;
    match reports.into_iter().next() {
        Some(ClientReport::Query { result: Ok(bytes), .. }) => {
            match a.function.as_str() {
                contract::LIST => {
                    for f in codec::decode::<Vec<FileEntity>>(&bytes)? {
                        print_file(&f);
                    }
                }
                contract::VERIFY => println!("{}", codec::decode::<bool>(&bytes)?),
                _ => println!("{} bytes", bytes.len()),
            }
            Ok(Ok(()))
        }
        Some(ClientReport::Query { result: Err(e), .. }) => {
            eprintln!("query failed: {e}");
            Ok(Err(Unmet))
        }
        _ => {
            eprintln!("no answer before the timeout");
            Ok(Err(Unmet))
        }
    }
}

fn bench_cmd(a: BenchArgs) -> Result<Result<(), Unmet>> {
    let buffer = u32::try_from(a.buffer).map_err(|_| anyhow!("buffer too large"))?;
    let params = BenchParams {
        file_size: a.file_size,
        parallel: a.parallel,
        buffer,
        reps: a.reps,
        seed: a.seed,
        transport: a.transport.into(),
    };
    if a.reps == 0 {
        bench::append_csv(&a.out, &[])?;
        println!("no repetitions requested");
        return Ok(Ok(()));
    }
    let root = tempfile::tempdir()?;
    let mut rows = Vec::new();
    for rep in 0..a.reps {
        let r = bench::run_rep(&params, root.path(), rep, |_| {})?;
        // Written per repetition so an abort keeps what finished.
        bench::append_csv(&a.out, &r)?;
        rows.extend(r);
    }
    let med = |f: fn(&bench::BenchRow) -> f64| bench::median_of(&rows, f).map_or("-".into(), |m| format!("{m:.1}"));
    println!(
        "{} sessions  median ms: request {}  transfer {}  keyaccess {}  decrypt {}  session {}",
        rows.len(),
        med(|r| r.request_ms),
        med(|r| r.transfer_ms),
        med(|r| r.keyaccess_ms),
        med(|r| r.decrypt_ms),
        med(|r| r.session_ms)
    );
    println!("rows appended to {}", a.out.display());
    let ok = rows.iter().all(|r| r.completed() && r.replay_ok);
    Ok(if ok { Ok(()) } else { Err(Unmet) })
}
