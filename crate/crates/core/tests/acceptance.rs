// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite: one PASS/FAIL line per criterion. Pass criterion ids
//! (e.g. `AC3`) as arguments to run a subset.

mod common;
#[path = "common/oracle.rs"]
mod oracle;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use bbs_core::audit::audit_file;
use bbs_core::bench::{self, BenchParams, BenchRow, MB};
use bbs_core::codec;
use bbs_core::config::{client_label, peer_label, LinkSpec, TransportKind};
use bbs_core::contract::{self, EventEntity, Phase, Verdict};
use bbs_core::ledger::{hash, Block, Namespace, Validity};
use bbs_core::netsim::{
    spawn_socket_network, ClientCommand, ClientReport, Mode, NodeDirs, SessionOutcome, SessionPlan, Step, Topology,
};
use bbs_core::offstate::OffStateStore;
use bbs_core::pdc::{hash_key, CollectionDef};
use bbs_core::testkit::Consortium;
use common::tamper;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("AC1", "honest end-to-end session over loopback", ac1),
        ("AC2", "dropped key release leaks nothing to the receiver", ac2),
        ("AC3", "receivers outside the rule are refused", ac3),
        ("AC4", "private data bound to ledger hashes", ac4),
        ("AC5", "validity flags match a serial model", ac5),
        ("AC6", "replayed state matches live state", ac6),
        ("AC7", "parallel sessions scale", ac7),
        ("AC8", "buffer size sweep", ac8),
        ("AC9", "requests commit during a throttled transfer", ac9),
        ("AC10", "custody audit verdicts and fault locations", ac10),
    ];
    let mut failed = 0;
    for (id, title, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == id) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{id:<5} PASS  {title} [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id:<5} FAIL  {title} [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ac1() -> Outcome {
    let c = Consortium::three_org(101);
    let dir = tempfile::tempdir().unwrap();
    let dirs = NodeDirs::new(dir.path());
    let bytes = bench::fixture(16 * MB, 101);
    let owner = client_label("Org1");
    let src = OffStateStore::open(dirs.client_workspace(&owner))
        .unwrap()
        .put("fixture.bin", &bytes, 0)
        .unwrap();
    let mut net = spawn_socket_network(&c.network, &c.keys, &dirs, 101).map_err(|e| e.to_string())?;
    let timeout = Duration::from_secs(120);
    let up = net
        .run_command(
            &owner,
            |req| ClientCommand::Upload {
                req,
                source: src.clone(),
                name: "fixture.bin".into(),
                rule: "Org2".into(),
                description: "16 MB fixture".into(),
            },
            1,
            timeout,
        )
        .map_err(|e| e.to_string())?;
    let file = match up.into_iter().next() {
        Some(ClientReport::Upload(u)) => u.result?,
        other => return Err(format!("upload: {other:?}")),
    };
    let start = Instant::now();
    let reports = net
        .run_command(&receiver_client(), |req| ClientCommand::Share { req, plan: plan(&file, Mode::Auto) }, 1, timeout)
        .map_err(|e| e.to_string())?;
    let wall = start.elapsed();
    net.shutdown();
    let s = match reports.into_iter().next() {
        Some(ClientReport::Session(s)) => s,
        other => return Err(format!("share: {other:?}")),
    };
    ensure!(s.phases.len() == 4, "only {} phases committed: {:?}", s.phases.len(), s.outcome);
    ensure!(s.phases.iter().all(|p| p.flag == Validity::Valid), "non-VALID phase: {:?}", s.phases);
    ensure!(
        s.outcome
            == SessionOutcome::Completed {
                verdict: Verdict::Verified,
                digest: Some(file.hash)
            },
        "outcome {:?}",
        s.outcome
    );
    ensure!(file.hash == hash(&bytes), "file record hash differs from the fixture");
    let store = OffStateStore::open(dirs.peer_offstate(&receiver_peer())).unwrap();
    let name = store.find_by_hash(&file.hash).unwrap().ok_or("plaintext missing at receiver")?;
    ensure!(store.hash_of(&name).unwrap() == file.hash, "delivered plaintext hash differs");
    ensure!(wall < Duration::from_secs(30), "16 MB session took {wall:?}");
    Ok(format!("16 MB session in {:.2}s wall", wall.as_secs_f64()))
}

fn ac2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for run in 0..100 {
        let seed = rng.gen::<u32>() as u64;
        let len = rng.gen_range(4_096..200_000);
        let mut s = setup(seed, len, "Org2");
        let r = s
            .topo
            .share(&receiver_client(), plan(&s.file, Mode::DishonestDrop(Step::KeyAccess)))
            .map_err(|e| e.to_string())?;
        ensure!(
            r[0].outcome == SessionOutcome::Dropped { after: Step::KeyAccess },
            "run {run}: outcome {:?}",
            r[0].outcome
        );
        s.topo.settle().map_err(|e| e.to_string())?;
        let eid = r[0].event_id.clone().ok_or("no event id")?;
        let k = key_of(&s.topo, &eid).ok_or("sender lost the key")?;
        let windows = windows64(&s.bytes);
        for (p, b) in files_under(&s.dir.path().join(receiver_peer())) {
            ensure!(!contains(&b, &k), "run {run} (seed {seed}): key bytes in {}", p.display());
            ensure!(!has_plaintext_window(&b, &windows), "run {run} (seed {seed}): plaintext in {}", p.display());
        }
        ensure!(
            s.topo.peer(&receiver_peer()).peer.offstate.exists(&contract::cipher_name(&eid)),
            "run {run}: ciphertext not delivered"
        );
        for p in s.topo.peer_labels() {
            ensure!(
                !flags_for(&s.topo, &p, contract::KEYACCESS).contains(&Validity::Valid),
                "run {run}: VALID key release on {p}"
            );
        }
    }
    Ok("100/100 runs".into())
}

fn ac3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let orgs = ["Org1", "Org2", "Org3"];
    for case in 0..200 {
        let seed = rng.gen::<u32>() as u64;
        let (owner, receiver) = if rng.gen_bool(0.5) { ("Org1", "Org2") } else { ("Org2", "Org1") };
        let mut rule: Vec<&str> = orgs.iter().copied().filter(|o| *o != receiver && rng.gen_bool(0.5)).collect();
        if rule.is_empty() {
            rule.push("Org3");
        }
        let mode = if rng.gen_bool(0.5) { Mode::Auto } else { Mode::WrongReceiver };
        let c = Consortium::three_org(seed);
        let dir = tempfile::tempdir().unwrap();
        let mut topo = Topology::build(c.network.clone(), &c.keys, dir.path(), seed).map_err(|e| e.to_string())?;
        let bytes = fixture(rng.gen_range(1_000..50_000), seed);
        let src = topo.put_fixture(&client_label(owner), "f.bin", &bytes).unwrap();
        let file = topo.upload(&client_label(owner), &src, "f.bin", &rule.join(","), "")?;
        let p = SessionPlan {
            file_id: file.id.clone(),
            sender: org(owner),
            receiver: org(receiver),
            mode,
            parallelism: 1,
            event_id: None,
        };
        let r = topo.share(&client_label(receiver), p).map_err(|e| e.to_string())?;
        topo.settle().map_err(|e| e.to_string())?;
        ensure!(r[0].outcome == SessionOutcome::Denied, "case {case}: outcome {:?}", r[0].outcome);
        let req = r[0].phase(Step::Request).ok_or("request not committed")?;
        ensure!(req.flag == Validity::Valid, "case {case}: request committed {}", req.flag);
        let eid = r[0].event_id.clone().ok_or("no event id")?;
        let st = &topo.peer(&peer_label(receiver)).peer.state;
        let ev: EventEntity = st
            .get(&contract::event_key(&eid))
            .map(|v| codec::decode(&v.value).unwrap())
            .ok_or("event not in state")?;
        ensure!(!ev.flag, "case {case}: event flag true for rule {rule:?}");
        ensure!(ev.phase == Phase::Requested, "case {case}: event advanced to {}", ev.phase);
        let peers: BTreeSet<String> = topo.peer_labels().into_iter().collect();
        let session_start = r[0].started_ns;
        let pushed = topo.sim.trace().iter().any(|t| {
            t.time_ns >= session_start && peers.contains(&t.from) && peers.contains(&t.to) && (t.kind == "chunk" || t.kind == "transfer")
        });
        ensure!(!pushed, "case {case}: a file transfer started");
        for p in &peers {
            ensure!(
                !flags_for(&topo, p, contract::TRANSFER).contains(&Validity::Valid),
                "case {case}: VALID transfer on {p}"
            );
        }
    }
    Ok("200/200 cases".into())
}

fn ac4() -> Outcome {
    let mut checked = 0;
    for seed in 0..6u64 {
        let mut s = setup(400 + seed, 20_000, "Org2");
        let mut p = plan(&s.file, Mode::Auto);
        p.parallelism = 1 + seed as u32 % 3;
        let mode_drop = seed % 2 == 1;
        s.topo.share(&receiver_client(), p).map_err(|e| e.to_string())?;
        if mode_drop {
            s.topo
                .share(&receiver_client(), plan(&s.file, Mode::DishonestDrop(Step::KeyAccess)))
                .map_err(|e| e.to_string())?;
        }
        s.topo.settle().map_err(|e| e.to_string())?;
        let ledger = &s.topo.peer(&peer_label("Org3")).peer.state;
        for (_, v) in ledger.namespace(Namespace::Collection) {
            let def: CollectionDef = codec::decode(&v.value).map_err(|e| e.to_string())?;
            let hk = hash_key(&def.id, &def.key);
            let Some(h) = ledger.get(&hk) else { continue };
            for label in s.topo.peer_labels() {
                let peer = &s.topo.peer(&label).peer;
                ensure!(peer.state.get(&hk).map(|x| &x.value) == Some(&h.value), "{label}: ledger hash differs");
                let held = peer.private.get(&def.id, &def.key);
                if def.is_member(peer.org()) {
                    let e = held.ok_or(format!("{label}: member lacks {}", def.key))?;
                    ensure!(hash(&e.value).0.to_vec() == h.value, "{label}: value does not hash to ledger");
                } else {
                    ensure!(held.is_none(), "{label}: non-member holds {}", def.key);
                }
                checked += 1;
            }
        }
    }
    ensure!(checked > 0, "no collections were checked");
    Ok(format!("{checked} (collection, peer) pairs"))
}

fn ac5() -> Outcome {
    let c = Consortium::three_org(5);
    let mut m = oracle::Model::new();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut nonce = 0;
    let mut prev = Block::genesis(c.config.clone());
    let mut tally = std::collections::BTreeMap::new();
    for _ in 0..1000 {
        let (b, got, want) = oracle::step(&c, &mut m, &prev, &mut rng, &mut nonce);
        ensure!(got == want, "block {}: validator {got:?}, model {want:?}", b.header.height);
        for f in got {
            *tally.entry(f.to_string()).or_insert(0) += 1;
        }
        prev = b;
    }
    Ok(format!("1000 blocks {tally:?}"))
}

/// Bench runs shared by AC6 to AC8, so each configuration runs once.
struct Runs {
    parallel: Vec<(u32, Vec<BenchRow>)>,
    parallel_again: Vec<BenchRow>,
    buffers: Vec<(u32, Vec<BenchRow>)>,
}

fn runs() -> &'static Result<Runs, String> {
    static RUNS: std::sync::OnceLock<Result<Runs, String>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let go = |p: &BenchParams| bench::run(p, dir.path()).map_err(|e| e.to_string());
        let base = BenchParams {
            file_size: 16 * MB,
            parallel: 1,
            buffer: 1 << 20,
            reps: 3,
            seed: 700,
            transport: TransportKind::Sim,
        };
        let mut parallel = Vec::new();
        for p in [1, 2, 4, 8] {
            parallel.push((p, go(&BenchParams { parallel: p, ..base.clone() })?));
        }
        let parallel_again = go(&BenchParams { parallel: 8, ..base.clone() })?;
        let mut buffers = Vec::new();
        for b in [32 * 1024, 1 << 20, 4 << 20] {
            buffers.push((b, go(&BenchParams { buffer: b, ..base.clone() })?));
        }
        Ok(Runs {
            parallel,
            parallel_again,
            buffers,
        })
    })
}

fn ac6() -> Outcome {
    let r = runs().as_ref().map_err(Clone::clone)?;
    let all: Vec<&BenchRow> = r
        .parallel
        .iter()
        .chain(&r.buffers)
        .flat_map(|(_, rows)| rows)
        .chain(&r.parallel_again)
        .collect();
    ensure!(!all.is_empty(), "no bench rows");
    let bad: Vec<_> = all.iter().filter(|x| !x.replay_ok).collect();
    ensure!(bad.is_empty(), "{} rows with diverging replay, first {:?}", bad.len(), bad[0]);
    Ok(format!("{} sessions across {} runs", all.len(), r.parallel.len() + r.buffers.len() + 1))
}

fn col(rows: &[BenchRow], f: impl Fn(&BenchRow) -> f64) -> Result<f64, String> {
    ensure!(rows.iter().all(BenchRow::completed), "incomplete session: {:?}", rows.iter().find(|r| !r.completed()));
    bench::median_of(rows, f).ok_or_else(|| "no samples".to_string())
}

fn ac7() -> Outcome {
    let r = runs().as_ref().map_err(Clone::clone)?;
    let at = |p: u32| &r.parallel.iter().find(|(q, _)| *q == p).expect("run").1;
    let (p1, p8) = (at(1), at(8));
    let req = (col(p1, |x| x.request_ms)?, col(p8, |x| x.request_ms)?);
    let key = (col(p1, |x| x.keyaccess_ms)?, col(p8, |x| x.keyaccess_ms)?);
    let ses = (col(p1, |x| x.session_ms)?, col(p8, |x| x.session_ms)?);
    let detail = format!(
        "request {:.0}->{:.0} ms, keyaccess {:.0}->{:.0} ms, session {:.0}->{:.0} ms",
        req.0, req.1, key.0, key.1, ses.0, ses.1
    );
    ensure!(req.1 <= 3.0 * req.0, "request latency grew more than 3x: {detail}");
    ensure!(key.1 <= 3.0 * key.0, "keyaccess latency grew more than 3x: {detail}");
    ensure!(ses.1 >= 2.0 * ses.0, "session latency grew less than 2x: {detail}");
    ensure!(r.parallel_again == *p8, "repeated P=8 run differs");
    for (p, rows) in &r.parallel {
        ensure!(rows.len() == 3 * *p as usize, "P={p}: {} rows", rows.len());
    }
    Ok(detail)
}

fn ac8() -> Outcome {
    let r = runs().as_ref().map_err(Clone::clone)?;
    let lat = |b: u32| col(&r.buffers.iter().find(|(x, _)| *x == b).expect("run").1, |x| x.transfer_ms);
    let (small, mid, big) = (lat(32 * 1024)?, lat(1 << 20)?, lat(4 << 20)?);
    let detail = format!("32KB {small:.0} ms, 1MB {mid:.0} ms, 4MB {big:.0} ms");
    ensure!(mid <= small, "transfer at 1MB slower than at 32KB: {detail}");
    ensure!((big - mid).abs() <= 0.1 * mid, "4MB not within 10% of 1MB: {detail}");
    Ok(detail)
}

fn ac9() -> Outcome {
    const SEC: u64 = 1_000_000_000;
    let mut s = setup_with(909, 16 * MB as usize, "Org2", |n| n.sim.default_link = bench::BENCH_LINK);
    let (sender, receiver) = (peer_label("Org1"), receiver_peer());
    let slow = LinkSpec {
        bandwidth: 2_000_000,
        latency_ms: 2.0,
        drop_rate: 0.0,
    };
    s.topo.sim.set_link(&sender, &receiver, slow);
    let owner = client_label("Org1");
    let src = s.topo.put_fixture(&owner, "small.bin", &fixture(10_000, 910)).unwrap();
    let other = s.topo.upload(&owner, &src, "small.bin", "Org2", "")?;

    let rc = receiver_client();
    s.topo
        .sim
        .command(&rc, ClientCommand::Share { req: 1000, plan: plan(&s.file, Mode::Auto) })
        .map_err(|e| e.to_string())?;
    let chunks = |sim: &bbs_core::netsim::Simulator| {
        sim.trace().iter().filter(|t| t.kind == "chunk" && t.from == sender && t.to == receiver).count()
    };
    while chunks(&s.topo.sim) < 2 {
        ensure!(s.topo.sim.step(), "transfer never started");
    }
    let t0 = s.topo.sim.now();
    s.topo
        .sim
        .command(&rc, ClientCommand::Share { req: 1001, plan: plan(&other, Mode::Manual(Step::Request)) })
        .map_err(|e| e.to_string())?;
    let is = |req: u64| move |_: &str, r: &ClientReport| r.req() == req;
    s.topo
        .sim
        .run_until(t0 + 60 * SEC, |rs| rs.iter().any(|(_, r)| r.req() == 1001))
        .map_err(|e| e.to_string())?;
    let t1 = s.topo.sim.now();
    let ClientReport::Session(small) = s.topo.sim.take_reports_where(is(1001)).remove(0).1 else {
        return Err("unexpected report for the request".into());
    };
    let req = small.phase(Step::Request).ok_or("request not committed")?;
    ensure!(req.flag == Validity::Valid, "request committed {}", req.flag);
    ensure!(s.topo.sim.reports().iter().all(|(_, r)| r.req() != 1000), "transfer finished before the request");

    s.topo
        .sim
        .run_until(t0 + 600 * SEC, |rs| rs.iter().any(|(_, r)| r.req() == 1000))
        .map_err(|e| e.to_string())?;
    let ClientReport::Session(big) = s.topo.sim.take_reports_where(is(1000)).remove(0).1 else {
        return Err("unexpected report for the transfer".into());
    };
    ensure!(matches!(big.outcome, SessionOutcome::Completed { verdict: Verdict::Verified, .. }), "throttled session: {:?}", big.outcome);
    let stamps: Vec<u64> = s
        .topo
        .sim
        .trace()
        .iter()
        .filter(|t| t.kind == "chunk" && t.from == sender && t.to == receiver)
        .map(|t| t.time_ns)
        .collect();
    let span = stamps.last().unwrap() - stamps.first().unwrap();
    let lat = (t1 - t0) as f64 / 1e9;
    let detail = format!("request committed in {lat:.3} sim s during a {:.1} sim s transfer", span as f64 / 1e9);
    ensure!(span >= 5 * SEC, "transfer too short: {detail}");
    ensure!(t1 - t0 < SEC, "{detail}");
    Ok(detail)
}

fn ac10() -> Outcome {
    let (s, blocks) = tamper::honest(1010);
    for p in s.topo.peer_labels() {
        let r = audit_file(&s.topo.peer(&p).peer.chain_path(), &s.file.id);
        ensure!(r.passed(), "honest export from {p}: {r}");
    }
    let (tb, _) = find_tx(&blocks, contract::TRANSFER).ok_or("no transfer")?;
    let cases = [
        ("byte flip", tamper::byte_flip(&s, &blocks, tb)),
        ("forged orderer signature", tamper::forged_signature(1011, 3)),
        ("missing endorsement", tamper::missing_endorsement(1012)),
        ("access rule violation", tamper::access_violation(1013)),
        ("phase reordering", tamper::phase_reordering(1014)),
    ];
    for (name, t) in &cases {
        ensure!(t.located(), "{name}: got {:?}, want {:?}", t.failure, t.want);
    }
    Ok(format!("honest exports pass, {} tamper classes located", cases.len()))
}
