//! Acceptance suite. Prints one PASS or FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Arguments that are not flags select criteria by number or by a word of
//! their name, e.g. `cargo test --test acceptance -- 3 idempotence`.

use std::collections::{BTreeMap, BTreeSet};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use gums_cli::gums::SyncJson;
use gums_cli::{save_credential, CommandOutcome};
use gums_core::domain::{AttributeProjection, DistinguishedName, PeerIdentity, RoleName, UserRecord};
use gums_core::gridmap::{self, GridMapDocument};
use gums_core::policy::{MemorySink, NullSink, RequestKind, ReviewAction, SitePolicy};
use gums_core::provision::{AutoBackend, Latency};
use gums_core::registry::{parse_query_response, query_request, RegistryNode, RegistryServer, SharedRegistry};
use gums_core::sim::{synthetic_record, Crash, Simulation};
use gums_core::store::{HistoryEvent, HoldCause, LocalStore, UserStatus};
use gums_core::sync::{MemorySource, Site, SiteOptions, VoSource};
use gums_core::transport::{self, handshake, Credential, Direction, TranscriptEntry};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

macro_rules! check {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("end-to-end convergence", convergence),
        ("idempotence", idempotence),
        ("revocation", revocation),
        ("projection leak-freedom", leak_freedom),
        ("auth gating", auth_gating),
        ("pool exhaustion", pool_exhaustion),
        ("crash consistency", crash_consistency),
        ("desk-scale performance", performance),
        ("grid-mapfile round-trip", round_trip),
    ];
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.iter().any(|s| *s == n.to_string() || name.contains(s.as_str())) {
            continue;
        }
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(*run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.1}s]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {n} {name}: {reason} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn dn(s: &str) -> DistinguishedName {
    DistinguishedName::parse(s).expect("valid DN")
}

fn role(s: &str) -> RoleName {
    RoleName::parse(s).expect("valid role")
}

const ROLES: [&str; 3] = ["simulation", "reconstruction", "analysis"];
const ROOT: &str = "/atlas";

fn operator() -> PeerIdentity {
    PeerIdentity::operator(dn("/O=Grid/OU=Operator/CN=acceptance"))
}

fn gums(config: &Path, args: &[&str]) -> CommandOutcome {
    let mut argv = vec!["gums".to_string(), "--config".into(), config.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    gums_cli::gums::run(argv)
}

fn gums_ok(config: &Path, args: &[&str]) -> Result<String, String> {
    let out = gums(config, args);
    check!(out.code == 0, "gums {} exited {}: {}", args.join(" "), out.code, out.stderr.trim());
    Ok(out.stdout)
}

/// Independent grid-mapfile rendering: DN byte order, quotes and
/// backslashes escaped.
fn oracle_render(entries: &BTreeMap<String, String>) -> Vec<u8> {
    let mut out = Vec::new();
    for (dn, account) in entries {
        out.push(b'"');
        for b in dn.bytes() {
            if b == b'"' || b == b'\\' {
                out.push(b'\\');
            }
            out.push(b);
        }
        out.extend_from_slice(b"\" ");
        out.extend_from_slice(account.as_bytes());
        out.push(b'\n');
    }
    out
}

fn is_pool_account(a: &str, end: u32) -> bool {
    a.strip_prefix("grid")
        .filter(|n| n.len() >= 3 && n.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|n| n.parse::<u32>().ok())
        .is_some_and(|n| (1..=end).contains(&n))
}

/// A topology and membership, kept independently of the simulation so the
/// expected site contents can be computed from it directly.
#[derive(Debug, Clone)]
struct Plan {
    ras: Vec<(String, String)>,
    sites: Vec<(String, String)>,
    users: Vec<(DistinguishedName, BTreeSet<String>, String)>,
    bans: BTreeMap<String, BTreeSet<DistinguishedName>>,
    rolemap: BTreeMap<String, BTreeMap<String, String>>,
}

fn random_roles(rng: &mut StdRng) -> BTreeSet<String> {
    ROLES.iter().filter(|_| rng.gen_bool(0.5)).map(|r| r.to_string()).collect()
}

fn random_rolemap(rng: &mut StdRng, site: &str) -> BTreeMap<String, String> {
    ROLES
        .iter()
        .map(|r| {
            let group = if rng.gen_bool(0.5) { r.to_string() } else { format!("{site}-{}", &r[..3]) };
            (r.to_string(), group)
        })
        .collect()
}

impl Plan {
    /// Two authorities feeding one VO, two sites, 50 users.
    fn tiered(rng: &mut StdRng) -> Self {
        let sites = [("bnl", "dn,roles,email"), ("fnal", "dn,roles")];
        let labs = ["BNL", "CERN", "FNAL", "IN2P3"];
        let users = (0..50)
            .map(|i| {
                let lab = labs[rng.gen_range(0..labs.len())];
                let via = if rng.gen_bool(0.5) { "east" } else { "west" };
                (dn(&format!("/O=Grid/O={lab}/CN=User {i:02}")), random_roles(rng), via.to_string())
            })
            .collect();
        Self::finish(
            rng,
            vec![("east".into(), ROOT.into()), ("west".into(), ROOT.into())],
            sites.iter().map(|(s, p)| (s.to_string(), p.to_string())).collect(),
            users,
        )
    }

    /// One to three authorities in random tiers, one to three sites.
    fn random(rng: &mut StdRng) -> Self {
        let mut ras: Vec<(String, String)> = Vec::new();
        for i in 0..rng.gen_range(1..=3) {
            let parent = if i == 0 || rng.gen_bool(0.5) {
                ROOT.to_string()
            } else {
                ras[rng.gen_range(0..ras.len())].0.clone()
            };
            ras.push((format!("ra{i}"), parent));
        }
        let projections = ["dn,roles", "dn,roles,email", "dn,roles,realName,institution"];
        let sites = (0..rng.gen_range(1..=3))
            .map(|i| (format!("site{i}"), projections[rng.gen_range(0..projections.len())].to_string()))
            .collect();
        let mut nodes: Vec<String> = ras.iter().map(|(n, _)| n.clone()).collect();
        nodes.push(ROOT.into());
        let users = (0..rng.gen_range(5..=20))
            .map(|i| {
                let via = nodes[rng.gen_range(0..nodes.len())].clone();
                (dn(&format!("/O=Grid/OU=People/CN=Person {i}")), random_roles(rng), via)
            })
            .collect();
        Self::finish(rng, ras, sites, users)
    }

    fn finish(
        rng: &mut StdRng,
        ras: Vec<(String, String)>,
        sites: Vec<(String, String)>,
        users: Vec<(DistinguishedName, BTreeSet<String>, String)>,
    ) -> Self {
        let mut bans = BTreeMap::new();
        let mut rolemap = BTreeMap::new();
        for (site, _) in &sites {
            let banned: BTreeSet<DistinguishedName> =
                users.iter().filter(|_| rng.gen_bool(0.08)).map(|(d, _, _)| d.clone()).collect();
            bans.insert(site.clone(), banned);
            rolemap.insert(site.clone(), random_rolemap(rng, site));
        }
        Self {
            ras,
            sites,
            users,
            bans,
            rolemap,
        }
    }

    fn build(&self, latency: u32, seed: u64) -> Result<Simulation, String> {
        let mut sim = Simulation::in_tempdir().map_err(err)?;
        sim.set_latency(latency);
        sim.set_seed(seed);
        sim.add_vo(ROOT).map_err(err)?;
        for (name, parent) in &self.ras {
            sim.add_ra(name, parent).map_err(err)?;
        }
        for (site, projection) in &self.sites {
            sim.add_site(site, ROOT, AttributeProjection::parse(projection).map_err(err)?)
                .map_err(err)?;
            for (r, g) in &self.rolemap[site] {
                sim.map_role(site, role(r), g).map_err(err)?;
            }
            for d in &self.bans[site] {
                sim.ban(site, d.clone()).map_err(err)?;
            }
        }
        for (d, roles, via) in &self.users {
            sim.add_user(d.clone(), roles.iter().map(|r| role(r)).collect(), via)
                .map_err(err)?;
        }
        Ok(sim)
    }

    /// VO membership minus the site's bans, roles mapped through the
    /// site's role map.
    fn expected(&self, site: &str) -> BTreeMap<String, BTreeSet<String>> {
        let carries_roles = self
            .sites
            .iter()
            .any(|(s, p)| s == site && p.split(',').any(|a| a == "roles"));
        self.users
            .iter()
            .filter(|(d, _, _)| !self.bans[site].contains(d))
            .map(|(d, roles, _)| {
                let groups = if carries_roles {
                    roles.iter().map(|r| self.rolemap[site][r].clone()).collect()
                } else {
                    BTreeSet::new()
                };
                (d.as_str().to_string(), groups)
            })
            .collect()
    }

    fn agrees(&self, sim: &Simulation, site: &str) -> Result<(), String> {
        let live = sim.site(site).ok_or_else(|| format!("{site} is not running"))?;
        let mut active = BTreeMap::new();
        let mut accounts = BTreeMap::new();
        for s in live.store.state().states().filter(|s| s.status == UserStatus::Active) {
            active.insert(s.dn.as_str().to_string(), s.groups.clone());
            accounts.insert(s.dn.as_str().to_string(), s.local_account.clone().unwrap_or_default());
        }
        let expected = self.expected(site);
        check!(
            active == expected,
            "{site}: {} Active users, oracle expects {}",
            active.len(),
            expected.len()
        );
        let mut seen = BTreeSet::new();
        for (d, a) in &accounts {
            check!(is_pool_account(a, 99), "{site}: {d} holds {a:?}, not a pool account");
            check!(seen.insert(a), "{site}: account {a} bound twice");
        }
        check!(
            sim.gridmap_bytes(site) == oracle_render(&accounts),
            "{site}: grid-mapfile differs from the oracle rendering"
        );
        Ok(())
    }

    fn all_agree(&self, sim: &Simulation) -> Result<(), String> {
        self.sites.iter().try_for_each(|(s, _)| self.agrees(sim, s))
    }
}

struct Run {
    /// First cycle from which every site agreed with the oracle.
    settled: u64,
    last_result: u64,
}

/// Steps until three consecutive quiet cycles with every site agreeing,
/// optionally killing a site before cycle `crash.0`.
fn drive(sim: &mut Simulation, plan: &Plan, crash: Option<(u64, &str, Crash)>, max: u64) -> Result<Run, String> {
    let mut since = None;
    let mut quiet = 0;
    let mut last_err = String::new();
    while sim.cycle() < max {
        if let Some((at, site, c)) = crash {
            if sim.cycle() + 1 == at {
                sim.schedule_crash(site, c);
            }
        }
        let report = sim.step().map_err(err)?;
        match plan.all_agree(sim) {
            Ok(()) => {
                since.get_or_insert(sim.cycle());
            }
            Err(e) => {
                since = None;
                last_err = e;
            }
        }
        quiet = if report.is_quiet() { quiet + 1 } else { 0 };
        let crashed = crash.is_none_or(|(at, _, _)| sim.cycle() >= at);
        if quiet >= 3 && since.is_some() && crashed {
            break;
        }
    }
    let settled = since.ok_or_else(|| format!("no agreement after {max} cycles: {last_err}"))?;
    check!(quiet >= 3, "still busy after {max} cycles");
    Ok(Run {
        settled,
        last_result: sim.last_result_cycle().unwrap_or(0),
    })
}

fn convergence() -> Verdict {
    let mut worst = 0;
    for seed in 0..100u64 {
        let mut rng = StdRng::seed_from_u64(0x5eed_0000 + seed);
        let plan = Plan::tiered(&mut rng);
        let mut sim = plan.build(3, seed)?;
        let run = drive(&mut sim, &plan, None, 60).map_err(|e| format!("seed {seed}: {e}"))?;
        check!(
            run.settled <= run.last_result + 2,
            "seed {seed}: agreed at cycle {} but the last result landed in cycle {}",
            run.settled,
            run.last_result
        );
        worst = worst.max(run.settled.saturating_sub(run.last_result));
    }
    Ok(format!("100 seeds agree with the oracle; worst lag after last result {worst} cycle(s)"))
}

fn crash_consistency() -> Verdict {
    let mut worst = 0;
    let mut kinds = BTreeMap::new();
    for i in 0..50u64 {
        let seed = 0xc4a5_0000 + i;
        let mut rng = StdRng::seed_from_u64(seed);
        let plan = Plan::tiered(&mut rng);
        let mut sim = plan.build(3, seed)?;
        let at = rng.gen_range(1..=6);
        let site = if rng.gen_bool(0.5) { "bnl" } else { "fnal" };
        let crash = match rng.gen_range(0..3) {
            0 => Crash::BeforeCycle,
            1 => Crash::MidCycle,
            _ => Crash::TornWrite(rng.gen_range(0..4096)),
        };
        *kinds.entry(format!("{crash:?}").split('(').next().unwrap_or_default().to_string()).or_insert(0) += 1;
        let run = drive(&mut sim, &plan, Some((at, site, crash)), 60)
            .map_err(|e| format!("run {i} ({crash:?} at cycle {at} on {site}): {e}"))?;
        check!(
            run.settled <= run.last_result + 3,
            "run {i} ({crash:?} at cycle {at} on {site}): agreed at cycle {} but the last result landed in cycle {}",
            run.settled,
            run.last_result
        );
        worst = worst.max(run.settled.saturating_sub(run.last_result));
    }
    Ok(format!("50 crash points {kinds:?}; worst lag after last result {worst} cycle(s)"))
}

fn write_history_config(dir: &Path, store: &Path) -> Result<PathBuf, String> {
    let cfg = dir.join("history.toml");
    std::fs::write(&cfg, format!("[store]\ndir = {:?}\n", store.display().to_string())).map_err(err)?;
    Ok(cfg)
}

fn revocation() -> Verdict {
    let scratch = tempfile::tempdir().map_err(err)?;
    let mut checked = 0;
    for t in 0..50u64 {
        let seed = 0x4e70_0000 + t;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut plan = Plan::random(&mut rng);
        let latency = rng.gen_range(0..=1);
        let mut sim = plan.build(latency, seed)?;
        drive(&mut sim, &plan, None, 40).map_err(|e| format!("topology {t}: {e}"))?;

        let candidates: Vec<DistinguishedName> = plan
            .users
            .iter()
            .map(|(d, _, _)| d.clone())
            .filter(|d| plan.sites.iter().any(|(s, _)| !plan.bans[s].contains(d)))
            .collect();
        let Some(victim) = candidates.choose(&mut rng).cloned() else {
            continue;
        };
        let was_active: Vec<String> = plan
            .sites
            .iter()
            .map(|(s, _)| s.clone())
            .filter(|s| !plan.bans[s].contains(&victim))
            .collect();
        sim.remove_user_at(ROOT, &victim).map_err(err)?;
        plan.users.retain(|(d, _, _)| *d != victim);
        sim.step().map_err(err)?;
        sim.step().map_err(err)?;

        for site in &was_active {
            let live = sim.site(site).ok_or("site not running")?;
            let s = live
                .store
                .state()
                .get(ROOT, &victim)
                .ok_or_else(|| format!("topology {t}: {site} lost the state of {victim}"))?;
            check!(
                s.status == UserStatus::Disabled,
                "topology {t}: {victim} is {} at {site} two cycles after removal",
                s.status
            );
            check!(s.groups.is_empty(), "topology {t}: {victim} keeps groups {:?} at {site}", s.groups);
            let text = String::from_utf8(sim.gridmap_bytes(site)).map_err(err)?;
            check!(
                !text.contains(&format!("\"{victim}\"")),
                "topology {t}: {victim} still in the {site} grid-mapfile"
            );
            let doc = gridmap::parse(&text).map_err(err)?;
            check!(doc.account_of(&victim).is_none(), "topology {t}: {victim} still mapped at {site}");

            let site_dir = sim.site_dir(site).ok_or("no site dir")?;
            let cfg = write_history_config(scratch.path(), site_dir)?;
            let json = gums_ok(&cfg, &["history", victim.as_str(), "--json"])?;
            let events: Vec<HistoryEvent> = serde_json::from_str(&json).map_err(err)?;
            let chain: Vec<(Option<UserStatus>, UserStatus)> =
                events.iter().filter(|e| e.vo == ROOT).map(|e| (e.from, e.to)).collect();
            check!(
                chain
                    == [
                        (None, UserStatus::PendingCreate),
                        (Some(UserStatus::PendingCreate), UserStatus::Active),
                        (Some(UserStatus::Active), UserStatus::Disabled),
                    ],
                "topology {t}: history of {victim} at {site} is {chain:?}"
            );
            let text = gums_ok(&cfg, &["history", victim.as_str()])?;
            check!(text.contains("Active -> Disabled"), "topology {t}: history text lacks the removal: {text}");
            checked += 1;
        }
        plan.all_agree(&sim).map_err(|e| format!("topology {t} after removal: {e}"))?;
    }
    Ok(format!("50 topologies, {checked} site revocations complete within 2 cycles"))
}

struct IdemWorld {
    _server: RegistryServer,
    node: SharedRegistry,
    config: PathBuf,
    dir: tempfile::TempDir,
    next_user: usize,
}

const IDEM_SITE: &str = "/O=Grid/OU=Site/CN=idem.example.org";
const IDEM_ROLES: [&str; 4] = ["simulation", "reconstruction", "analysis", "calibration"];

impl IdemWorld {
    fn new(rng: &mut StdRng) -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(err)?;
        let mut vo = Credential::new(dn("/O=Grid/OU=VO/CN=atlas"), "fp:vo");
        let mut site = Credential::new(dn(IDEM_SITE), "fp:site");
        vo.trust(site.dn().clone(), "fp:site").map_err(err)?;
        site.trust(vo.dn().clone(), "fp:vo").map_err(err)?;
        save_credential(&site, &dir.path().join("site.cred")).map_err(err)?;
        let mut node = RegistryNode::in_memory(ROOT);
        node.add_registrar(operator().dn().clone()).map_err(err)?;
        node.enroll_site_admin(dn(IDEM_SITE), AttributeProjection::parse("dn,roles,email").map_err(err)?)
            .map_err(err)?;
        let node = node.into_shared();
        let listener = TcpListener::bind("127.0.0.1:0").map_err(err)?;
        let server = RegistryServer::spawn(listener, node.clone(), vo, false).map_err(err)?;
        let config = dir.path().join("gums.toml");
        let backend = if rng.gen_bool(0.3) { "queue" } else { "auto" };
        std::fs::write(
            &config,
            format!(
                "credential = \"site.cred\"\nauto-approve = {}\n\n[[vo]]\naddr = \"{}\"\npath = \"{ROOT}\"\n\
                 projection = \"dn,roles,email\"\n\n[gridmap]\npath = \"grid-mapfile\"\n\n\
                 [notify]\nfile = \"notifications.txt\"\n\n[policy]\nfile = \"policy.txt\"\n\n\
                 [provision]\nbackend = \"{backend}\"\n",
                rng.gen_bool(0.5),
                server.addr()
            ),
        )
        .map_err(err)?;
        let world = Self {
            _server: server,
            node,
            config,
            dir,
            next_user: 0,
        };
        world.write_policy(rng, &[])?;
        gums_ok(&world.config, &["initdb"])?;
        Ok(world)
    }

    fn write_policy(&self, rng: &mut StdRng, members: &[DistinguishedName]) -> Result<(), String> {
        let mut text = String::new();
        for r in ROLES {
            if rng.gen_bool(0.85) {
                text.push_str(&format!("rolemap {r} {r}\n"));
            }
        }
        for d in members {
            if rng.gen_bool(0.1) {
                text.push_str(&format!("ban {d}\n"));
            }
        }
        std::fs::write(self.dir.path().join("policy.txt"), text).map_err(err)
    }

    fn members(&self) -> Vec<DistinguishedName> {
        self.node.read().expect("registry lock").users().map(|(d, _)| d.clone()).collect()
    }

    fn mutate(&mut self, rng: &mut StdRng) -> Result<(), String> {
        let op = operator();
        let mut node = self.node.write().expect("registry lock");
        let current: Vec<DistinguishedName> = node.users().map(|(d, _)| d.clone()).collect();
        for d in &current {
            match rng.gen_range(0..10) {
                0 => {
                    node.remove_user(&op, d).map_err(err)?;
                }
                1 => {
                    let roles = IDEM_ROLES.iter().filter(|_| rng.gen_bool(0.4)).map(|r| role(r)).collect();
                    node.assign_roles(&op, d, roles).map_err(err)?;
                }
                _ => {}
            }
        }
        for _ in 0..rng.gen_range(0..15) {
            let d = dn(&format!("/O=Grid/OU=People/CN=Member {}", self.next_user));
            self.next_user += 1;
            let roles = IDEM_ROLES.iter().filter(|_| rng.gen_bool(0.4)).map(|r| role(r)).collect();
            node.register_user(&op, synthetic_record(&d, roles, ROOT)).map_err(err)?;
        }
        Ok(())
    }

    fn sync(&self) -> Result<SyncJson, String> {
        let out = gums_ok(&self.config, &["sync", "--json"])?;
        serde_json::from_str(&out).map_err(err)
    }

    /// Every file of the store except its lock, plus the grid-mapfile.
    fn fingerprint(&self) -> Result<BTreeMap<String, Vec<u8>>, String> {
        let mut files = BTreeMap::new();
        let store = self.dir.path().join("gums-db");
        for entry in std::fs::read_dir(&store).map_err(err)? {
            let entry = entry.map_err(err)?;
            let name = entry.file_name().to_string_lossy().to_string();
            if name != "store.lock" {
                files.insert(name, std::fs::read(entry.path()).map_err(err)?);
            }
        }
        let gridmap = std::fs::read(self.dir.path().join("grid-mapfile")).unwrap_or_default();
        files.insert("grid-mapfile".into(), gridmap);
        Ok(files)
    }
}

fn idempotence() -> Verdict {
    let mut users = 0;
    let mut active = 0;
    for i in 0..200u64 {
        let mut rng = StdRng::seed_from_u64(0x1de0_0000 + i);
        let mut world = IdemWorld::new(&mut rng).map_err(|e| format!("state {i}: {e}"))?;
        for _ in 0..rng.gen_range(1..=3) {
            world.mutate(&mut rng)?;
            if rng.gen_bool(0.3) {
                world.write_policy(&mut rng, &world.members())?;
            }
            world.sync().map_err(|e| format!("state {i}: {e}"))?;
        }
        let before = world.fingerprint()?;
        let second = world.sync().map_err(|e| format!("state {i}: {e}"))?;
        check!(!second.journal_written, "state {i}: second sync wrote the journal ({})", second.report);
        check!(second.report.is_zero(), "state {i}: second sync reported {}", second.report);
        let after = world.fingerprint()?;
        for (name, bytes) in &after {
            check!(before.get(name) == Some(bytes), "state {i}: {name} changed on the second sync");
        }
        check!(before.len() == after.len(), "state {i}: store files appeared or vanished");
        users += world.members().len();
        active += String::from_utf8_lossy(&after["grid-mapfile"]).lines().count();
    }
    Ok(format!("200 quiescent states ({users} members, {active} mapped); second sync wrote nothing"))
}

const LEAK_USERS: usize = 30;

struct Sentinels {
    by_attr: BTreeMap<&'static str, Vec<String>>,
}

fn leak_registry() -> Result<(RegistryNode, Sentinels), String> {
    let mut node = RegistryNode::in_memory(ROOT);
    node.add_registrar(operator().dn().clone()).map_err(err)?;
    let signed: DateTime<Utc> = "2004-03-17T08:09:10Z".parse().map_err(err)?;
    let mut by_attr: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
    for i in 0..LEAK_USERS {
        let record = UserRecord {
            dn: dn(&format!("/O=Grid/OU=People/CN=Member {i}")),
            certificate_ref: format!("certref-{i}-q7"),
            real_name: format!("Realname{i} Zed"),
            institution: format!("Institute{i}Labs"),
            email: format!("member{i}@mailhost{i}.example"),
            registrar_dn: operator().dn().clone(),
            agreement_signed_at: signed,
            roles: [role(ROLES[i % 3])].into_iter().collect(),
            vo_path: ROOT.into(),
        };
        by_attr.entry("certificateRef").or_default().push(record.certificate_ref.clone());
        by_attr.entry("realName").or_default().push(record.real_name.clone());
        by_attr.entry("institution").or_default().push(record.institution.clone());
        by_attr.entry("email").or_default().push(record.email.clone());
        node.register_user(&operator(), record).map_err(err)?;
    }
    by_attr.insert("registrarDn", vec!["OU=Operator".into()]);
    by_attr.insert("agreementSignedAt", vec!["2004-03-17".into()]);
    by_attr.insert("roles", ROLES.iter().map(|r| r.to_string()).collect());
    by_attr.insert("voPath", vec![ROOT.into()]);
    Ok((node, Sentinels { by_attr }))
}

const ATTRS: [&str; 8] = [
    "certificateRef",
    "realName",
    "institution",
    "email",
    "registrarDn",
    "agreementSignedAt",
    "roles",
    "voPath",
];

fn random_attrs(rng: &mut StdRng) -> BTreeSet<&'static str> {
    let mut set: BTreeSet<&str> = ATTRS.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
    set.insert("dn");
    set
}

fn projection_of(attrs: &BTreeSet<&str>) -> AttributeProjection {
    AttributeProjection::parse(&attrs.iter().copied().collect::<Vec<_>>().join(",")).expect("known attributes")
}

/// Checks one client transcript: every block carries exactly `allowed`,
/// and no value of any other attribute appears anywhere on the wire.
fn audit_transcript(
    transcript: &[TranscriptEntry],
    allowed: &BTreeSet<&str>,
    sentinels: &Sentinels,
) -> Result<(), String> {
    let received: String = transcript
        .iter()
        .filter(|e| e.direction == Direction::Received)
        .map(|e| String::from_utf8_lossy(&e.bytes).to_string())
        .collect();
    let mut blocks = 0;
    let mut keys: BTreeSet<&str> = BTreeSet::new();
    for line in received.lines().chain(std::iter::once("")) {
        if line.is_empty() || line.starts_with("END count=") {
            if !keys.is_empty() {
                check!(keys == *allowed, "block carries {keys:?}, allowed {allowed:?}");
                blocks += 1;
                keys.clear();
            }
            continue;
        }
        let (key, _) = line.split_once(": ").ok_or_else(|| format!("unexpected line {line:?}"))?;
        check!(allowed.contains(key), "attribute {key} outside {allowed:?}");
        keys.insert(key);
    }
    check!(blocks == LEAK_USERS, "{blocks} records received, expected {LEAK_USERS}");
    let wire: String = transcript.iter().map(|e| String::from_utf8_lossy(&e.bytes).to_string()).collect();
    for (attr, values) in &sentinels.by_attr {
        if allowed.contains(attr) {
            continue;
        }
        for v in values {
            check!(!wire.contains(v.as_str()), "value of withheld {attr} ({v:?}) on the wire");
        }
    }
    Ok(())
}

fn leak_freedom() -> Verdict {
    let mut rng = StdRng::seed_from_u64(0x1eaf);
    let (mut node, sentinels) = leak_registry()?;
    let mut server_cred = Credential::new(dn("/O=Grid/OU=VO/CN=atlas"), "fp:vo");
    let mut queries = Vec::new();
    for i in 0..100 {
        let acl = random_attrs(&mut rng);
        let want = random_attrs(&mut rng);
        let admin = dn(&format!("/O=Grid/OU=Site/CN=admin{i}"));
        let mut client = Credential::new(admin.clone(), format!("fp:admin{i}"));
        client.trust(server_cred.dn().clone(), "fp:vo").map_err(err)?;
        server_cred.trust(admin.clone(), format!("fp:admin{i}")).map_err(err)?;
        node.enroll_site_admin(admin, projection_of(&acl)).map_err(err)?;
        queries.push((client, acl, want));
    }
    let node = node.into_shared();
    let server = RegistryServer::spawn(
        TcpListener::bind("127.0.0.1:0").map_err(err)?,
        node.clone(),
        server_cred.clone(),
        false,
    )
    .map_err(err)?;
    let mut narrowed = 0;
    for (i, (client, acl, want)) in queries.into_iter().enumerate() {
        let allowed: BTreeSet<&str> = acl.intersection(&want).copied().collect();
        if allowed.len() < want.len() {
            narrowed += 1;
        }
        let transcript = if i % 2 == 0 {
            let mut source =
                MemorySource::new(ROOT, projection_of(&want), node.clone(), client, server_cred.clone());
            source.fetch().map_err(|e| format!("query {i}: {e}"))?;
            source.last_transcript().to_vec()
        } else {
            let mut ch = transport::connect(server.addr(), &client, false, Some(Duration::from_secs(10)))
                .map_err(|e| format!("query {i}: {e}"))?;
            ch.send_str(&query_request(&projection_of(&want))).map_err(err)?;
            let reply = ch.recv_string().map_err(err)?;
            parse_query_response(&reply).map_err(|e| format!("query {i}: {e}"))?;
            ch.transcript().to_vec()
        };
        audit_transcript(&transcript, &allowed, &sentinels).map_err(|e| format!("query {i}: {e}"))?;
    }
    Ok(format!("100 transcripts (50 in-memory, 50 TCP, {narrowed} narrowed by the ACL), zero leaked attributes"))
}

fn tcp_query(addr: std::net::SocketAddr, cred: &Credential) -> Result<usize, String> {
    let mut ch = transport::connect(addr, cred, false, Some(Duration::from_secs(10))).map_err(err)?;
    ch.send_str(&query_request(&AttributeProjection::parse("dn,roles").map_err(err)?))
        .map_err(err)?;
    let reply = ch.recv_string().map_err(err)?;
    parse_query_response(&reply).map(|r| r.len()).map_err(err)
}

fn auth_gating() -> Verdict {
    let mut node = RegistryNode::in_memory(ROOT);
    node.add_registrar(operator().dn().clone()).map_err(err)?;
    for i in 0..5 {
        let d = dn(&format!("/O=Grid/OU=People/CN=Member {i}"));
        node.register_user(&operator(), synthetic_record(&d, BTreeSet::new(), ROOT))
            .map_err(err)?;
    }
    let mut server_cred = Credential::new(dn("/O=Grid/OU=VO/CN=atlas"), "fp:vo");
    let client = |name: &str, fp: &str| -> Result<Credential, String> {
        let mut c = Credential::new(dn(name), fp);
        c.trust(dn("/O=Grid/OU=VO/CN=atlas"), "fp:vo").map_err(err)?;
        Ok(c)
    };
    let mut enrolled = Vec::new();
    for i in 0..100 {
        let name = format!("/O=Grid/OU=Site/CN=enrolled{i}");
        server_cred.trust(dn(&name), format!("fp:e{i}")).map_err(err)?;
        node.enroll_site_admin(dn(&name), AttributeProjection::parse("dn,roles").map_err(err)?)
            .map_err(err)?;
        enrolled.push(client(&name, &format!("fp:e{i}"))?);
    }
    let mut unenrolled = Vec::new();
    for i in 0..40 {
        let name = format!("/O=Grid/OU=Site/CN=trusted-only{i}");
        server_cred.trust(dn(&name), format!("fp:t{i}")).map_err(err)?;
        unenrolled.push(("trusted but not enrolled", client(&name, &format!("fp:t{i}"))?));
    }
    for i in 0..40 {
        let name = format!("/O=Grid/OU=Site/CN=stranger{i}");
        unenrolled.push(("unknown to the server", client(&name, &format!("fp:s{i}"))?));
    }
    for i in 0..20 {
        let name = format!("/O=Grid/OU=Site/CN=enrolled{i}");
        unenrolled.push(("impostor", client(&name, &format!("fp:forged{i}"))?));
    }
    let server = RegistryServer::spawn(
        TcpListener::bind("127.0.0.1:0").map_err(err)?,
        node.into_shared(),
        server_cred,
        false,
    )
    .map_err(err)?;
    for c in &enrolled {
        let n = tcp_query(server.addr(), c).map_err(|e| format!("enrolled {} refused: {e}", c.dn()))?;
        check!(n == 5, "enrolled {} got {n} records", c.dn());
    }
    for (what, c) in &unenrolled {
        check!(
            tcp_query(server.addr(), c).is_err(),
            "{what} identity {} was answered",
            c.dn()
        );
    }

    let mut cells = Vec::new();
    for (client_trusts, server_trusts) in [(true, true), (true, false), (false, true), (false, false)] {
        let mut c = Credential::new(dn("/O=Grid/OU=Site/CN=matrix"), "fp:m");
        let mut s = Credential::new(dn("/O=Grid/OU=VO/CN=matrix"), "fp:ms");
        if client_trusts {
            c.trust(s.dn().clone(), "fp:ms").map_err(err)?;
        }
        if server_trusts {
            s.trust(c.dn().clone(), "fp:m").map_err(err)?;
        }
        let expect = client_trusts && server_trusts;
        let memory = handshake(&c, &s).is_ok();
        let mut matrix_node = RegistryNode::in_memory(ROOT);
        matrix_node
            .enroll_site_admin(c.dn().clone(), AttributeProjection::dn_only())
            .map_err(err)?;
        let srv = RegistryServer::spawn(
            TcpListener::bind("127.0.0.1:0").map_err(err)?,
            matrix_node.into_shared(),
            s,
            false,
        )
        .map_err(err)?;
        let tcp = tcp_query(srv.addr(), &c).is_ok();
        check!(
            memory == expect && tcp == expect,
            "client trusts {client_trusts}, server trusts {server_trusts}: in-memory {memory}, tcp {tcp}"
        );
        cells.push(format!("{}{}", u8::from(client_trusts), u8::from(server_trusts)));
    }
    Ok(format!(
        "100/100 enrolled answered, {0}/{0} unenrolled refused, trust matrix {1} exhaustive",
        unenrolled.len(),
        cells.join("/")
    ))
}

fn pool_exhaustion() -> Verdict {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut node = RegistryNode::in_memory(ROOT);
    node.add_registrar(operator().dn().clone()).map_err(err)?;
    let site_dn = dn("/O=Grid/OU=Site/CN=pool.example.org");
    node.enroll_site_admin(site_dn.clone(), AttributeProjection::parse("dn,roles").map_err(err)?)
        .map_err(err)?;
    for i in 0..120 {
        let d = dn(&format!("/O=Grid/OU=People/CN=Member {i:03}"));
        node.register_user(&operator(), synthetic_record(&d, [role(ROLES[i % 3])].into(), ROOT))
            .map_err(err)?;
    }
    let mut vo = Credential::new(dn("/O=Grid/OU=VO/CN=atlas"), "fp:vo");
    let mut client = Credential::new(site_dn.clone(), "fp:site");
    vo.trust(site_dn, "fp:site").map_err(err)?;
    client.trust(vo.dn().clone(), "fp:vo").map_err(err)?;
    let mut store = LocalStore::open(dir.path().join("db")).map_err(err)?;
    store.initdb("grid", 1, 99, false).map_err(err)?;
    let sink = MemorySink::new();
    let gridmap_path = dir.path().join("grid-mapfile");
    let mut site = Site::new(
        store,
        SitePolicy::default().map_roles_to_same_name(ROLES),
        Box::new(AutoBackend::new(Latency::None)),
        Box::new(sink.clone()),
        vec![Box::new(MemorySource::new(
            ROOT,
            AttributeProjection::parse("dn,roles").map_err(err)?,
            node.into_shared(),
            client,
            vo,
        ))],
        SiteOptions {
            auto_approve: true,
            gridmap_path: Some(gridmap_path.clone()),
            ..SiteOptions::default()
        },
    )
    .map_err(err)?;
    for _ in 0..4 {
        site.run_cycle().map_err(err)?;
    }
    let state = site.store.state();
    let active = state.list_by_status(UserStatus::Active);
    let held = state.list_by_status(UserStatus::Held);
    check!(active.len() == 99, "{} Active", active.len());
    check!(held.len() == 21, "{} Held", held.len());
    let notified: Vec<_> = sink.notifications();
    for h in &held {
        check!(
            matches!(h.hold, Some(HoldCause::Provisioning { .. })),
            "{} held for {:?}",
            h.dn,
            h.hold
        );
        let request = state
            .open_requests()
            .find(|r| {
                matches!(&r.kind, RequestKind::ReviewAccount { dn, action: ReviewAction::Held { .. }, .. } if *dn == h.dn)
            })
            .ok_or_else(|| format!("no review request for {}", h.dn))?;
        check!(
            notified.iter().any(|n| n.related_request.as_ref() == Some(&request.id)),
            "no notification for {}",
            h.dn
        );
    }
    let text = std::fs::read_to_string(&gridmap_path).map_err(err)?;
    let doc = gridmap::parse(&text).map_err(err)?;
    let accounts: BTreeSet<&str> = doc.entries().iter().map(|(_, a)| a.as_str()).collect();
    check!(doc.len() == 99, "grid-mapfile has {} entries", doc.len());
    check!(accounts.len() == 99, "grid-mapfile has {} distinct accounts", accounts.len());
    check!(
        accounts.iter().all(|a| is_pool_account(a, 99)),
        "grid-mapfile maps an account outside the pool"
    );
    Ok(format!(
        "99 Active, 21 Held with {} notifications, 99 distinct accounts mapped",
        notified.len()
    ))
}

fn performance() -> Verdict {
    const USERS: usize = 10_000;
    let dir = tempfile::tempdir().map_err(err)?;
    let mut node = RegistryNode::in_memory(ROOT);
    node.add_registrar(operator().dn().clone()).map_err(err)?;
    let site_dn = dn("/O=Grid/OU=Site/CN=big.example.org");
    node.enroll_site_admin(site_dn.clone(), AttributeProjection::parse("dn,roles,email").map_err(err)?)
        .map_err(err)?;
    for i in 0..USERS {
        let d = dn(&format!("/O=Grid/O=Lab{}/CN=Member {i:05}", i % 17));
        node.register_user(&operator(), synthetic_record(&d, [role(ROLES[i % 3])].into(), ROOT))
            .map_err(err)?;
    }
    let mut vo = Credential::new(dn("/O=Grid/OU=VO/CN=atlas"), "fp:vo");
    let mut client = Credential::new(site_dn.clone(), "fp:site");
    vo.trust(site_dn, "fp:site").map_err(err)?;
    client.trust(vo.dn().clone(), "fp:vo").map_err(err)?;
    let mut store = LocalStore::open(dir.path().join("db")).map_err(err)?;
    store.initdb("grid", 1, USERS as u32, false).map_err(err)?;
    let mut site = Site::new(
        store,
        SitePolicy::default().map_roles_to_same_name(ROLES),
        Box::new(AutoBackend::new(Latency::None)),
        Box::new(NullSink),
        vec![Box::new(MemorySource::new(
            ROOT,
            AttributeProjection::parse("dn,roles,email").map_err(err)?,
            node.into_shared(),
            client,
            vo,
        ))],
        SiteOptions {
            auto_approve: true,
            gridmap_path: Some(dir.path().join("grid-mapfile")),
            ..SiteOptions::default()
        },
    )
    .map_err(err)?;
    let start = Instant::now();
    site.run_cycle().map_err(err)?;
    let first = start.elapsed();
    let active = site.store.state().list_by_status(UserStatus::Active).len();
    check!(active == USERS, "{active} Active after the first cycle");
    check!(first < Duration::from_secs(5), "first 10k-user cycle took {first:?}");
    let start = Instant::now();
    site.run_cycle().map_err(err)?;
    let steady = start.elapsed();
    check!(steady < Duration::from_secs(5), "steady 10k-user cycle took {steady:?}");

    let doc = site.gridmap();
    check!(doc.len() == USERS, "gridmap document has {} entries", doc.len());
    let start = Instant::now();
    let rendered = gridmap::render(&doc);
    let render = start.elapsed();
    check!(rendered.lines().count() == USERS, "rendered {} lines", rendered.lines().count());
    check!(render < Duration::from_millis(200), "rendering 10k entries took {render:?}");
    Ok(format!(
        "10k-user cycle {:.0} ms (steady {:.0} ms), 10k-entry render {:.1} ms",
        first.as_secs_f64() * 1e3,
        steady.as_secs_f64() * 1e3,
        render.as_secs_f64() * 1e3
    ))
}

fn random_dn(rng: &mut StdRng) -> DistinguishedName {
    const KEYS: [&str; 5] = ["CN", "O", "OU", "DC", "L"];
    const CHARS: &[u8] = b"abcXYZ019 \"\\.'-=_,";
    loop {
        let mut raw = String::new();
        for _ in 0..rng.gen_range(1..=4) {
            raw.push('/');
            raw.push_str(KEYS[rng.gen_range(0..KEYS.len())]);
            raw.push('=');
            for _ in 0..rng.gen_range(1..=12) {
                raw.push(char::from(CHARS[rng.gen_range(0..CHARS.len())]));
            }
        }
        if let Ok(d) = DistinguishedName::parse(&raw) {
            return d;
        }
    }
}

fn random_account(rng: &mut StdRng) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789._-";
    let mut a = String::from(char::from(b'a' + rng.gen_range(0..26)));
    for _ in 0..rng.gen_range(0..10) {
        a.push(char::from(CHARS[rng.gen_range(0..CHARS.len())]));
    }
    a
}

fn round_trip() -> Verdict {
    let mut rng = StdRng::seed_from_u64(0x9a1d);
    let mut quoted = 0;
    let mut entries_total = 0;
    for i in 0..1000 {
        let entries: Vec<(DistinguishedName, String)> = (0..rng.gen_range(0..40))
            .map(|_| (random_dn(&mut rng), random_account(&mut rng)))
            .collect();
        let doc = GridMapDocument::new(entries.clone());
        let oracle: BTreeMap<String, String> = entries.iter().map(|(d, a)| (d.as_str().to_string(), a.clone())).collect();
        let text = gridmap::render(&doc);
        check!(
            text.as_bytes() == oracle_render(&oracle),
            "document {i}: rendering differs from the oracle"
        );
        let back = gridmap::parse(&text).map_err(|e| format!("document {i}: {e}"))?;
        check!(back == doc, "document {i}: parse(render(d)) != d");
        quoted += doc.entries().iter().filter(|(d, _)| d.as_str().contains(['"', '\\', ' '])).count();
        entries_total += doc.len();
    }
    Ok(format!(
        "1000 documents, {entries_total} entries ({quoted} with spaces, quotes or backslashes) round-trip"
    ))
}
