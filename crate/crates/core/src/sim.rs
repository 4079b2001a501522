//! In-process simulation of a whole deployment: VO registries, tiers of
//! registration authorities feeding them, and sites pulling from them.
//!
//! Scenario files are line oriented:
//!
//! ```text
//! vo /atlas
//! ra east feeds /atlas
//! ra east-sub feeds east
//! site bnl pulls /atlas projection=dn,roles
//! user /O=atlas/CN=Alice Adams roles=simulation,analysis via east
//! ban bnl /O=atlas/CN=Eve
//! rolemap bnl analysis ana
//! latency 3
//! seed 7
//! step 2
//! remove /O=atlas/CN=Alice Adams
//! ```
//!
//! After the last directive the simulation runs until it is quiescent and
//! every site matches the expected membership.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::domain::{parse_roles, AttributeProjection, DistinguishedName, PeerIdentity, RoleName, UserRecord};
use crate::feedup::{sync_up, FeedUpState, MemoryUpstream};
use crate::gridmap::{self, GridMapDocument};
use crate::policy::{roles_to_groups, NullSink, SitePolicy};
use crate::provision::{AutoBackend, Latency};
use crate::registry::{RegistryError, RegistryNode, SharedRegistry};
use crate::store::{LocalStore, UserStatus};
use crate::sync::{CycleFault, MemorySource, Site, SiteOptions, SyncError};
use crate::transport::Credential;

pub const DEFAULT_ROLES: [&str; 3] = ["simulation", "reconstruction", "analysis"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Vo(String),
    Ra { name: String, feeds: String },
    Site { name: String, vo: String, projection: AttributeProjection },
    User { dn: DistinguishedName, roles: BTreeSet<RoleName>, via: String },
    Ban { site: String, dn: DistinguishedName },
    RoleMap { site: String, role: RoleName, group: String },
    Latency(u32),
    Seed(u64),
    Step(u32),
    Remove(DistinguishedName),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("scenario line {line}: {reason}")]
pub struct ScenarioError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scenario {
    pub directives: Vec<(usize, Directive)>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut directives = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| ScenarioError {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            let words: Vec<&str> = rest.split_whitespace().collect();
            let parse_dn = |s: &str| DistinguishedName::parse(s).map_err(|e| err(&e.to_string()));
            let d = match (word, words.as_slice()) {
                ("vo", [path]) => Directive::Vo(path.to_string()),
                ("ra", [name, "feeds", parent]) => Directive::Ra {
                    name: name.to_string(),
                    feeds: parent.to_string(),
                },
                ("site", [name, "pulls", vo, projection]) => {
                    let attrs = projection
                        .strip_prefix("projection=")
                        .ok_or_else(|| err("expected projection=<attrs>"))?;
                    Directive::Site {
                        name: name.to_string(),
                        vo: vo.to_string(),
                        projection: AttributeProjection::parse(attrs).map_err(|e| err(&e.to_string()))?,
                    }
                }
                ("user", _) => {
                    let (head, via) = rest.rsplit_once(" via ").ok_or_else(|| err("expected `via <node>`"))?;
                    let (dn, roles) = head.rsplit_once(" roles=").ok_or_else(|| err("expected `roles=`"))?;
                    Directive::User {
                        dn: parse_dn(dn)?,
                        roles: parse_roles(roles).map_err(|e| err(&e.to_string()))?,
                        via: via.trim().to_string(),
                    }
                }
                ("ban", [site, ..]) => Directive::Ban {
                    site: site.to_string(),
                    dn: parse_dn(rest[site.len()..].trim())?,
                },
                ("rolemap", [site, role, group]) => Directive::RoleMap {
                    site: site.to_string(),
                    role: RoleName::parse(role).map_err(|e| err(&e.to_string()))?,
                    group: group.to_string(),
                },
                ("latency", [n]) => Directive::Latency(n.parse().map_err(|_| err("latency takes a cycle count"))?),
                ("seed", [n]) => Directive::Seed(n.parse().map_err(|_| err("seed takes an integer"))?),
                ("step", [n]) => Directive::Step(n.parse().map_err(|_| err("step takes a cycle count"))?),
                ("remove", _) if !rest.is_empty() => Directive::Remove(parse_dn(rest)?),
                _ => return Err(err(&format!("cannot parse {line:?}"))),
            };
            directives.push((i + 1, d));
        }
        Ok(Self { directives })
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Topology(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Ways to kill a site daemon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crash {
    /// Between cycles.
    BeforeCycle,
    /// Inside a cycle, before its batch is committed.
    MidCycle,
    /// While writing the cycle's batch, after `n` bytes.
    TornWrite(usize),
}

struct Registry {
    node: SharedRegistry,
    cred: Credential,
    /// Parent registry name for authorities; `None` for a root VO.
    parent: Option<String>,
    feed: FeedUpState,
}

struct SimSite {
    vo: String,
    projection: AttributeProjection,
    bans: BTreeSet<DistinguishedName>,
    rolemap: BTreeMap<RoleName, String>,
    dir: PathBuf,
    cred: Credential,
    restarts: u64,
    site: Option<Site>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Member {
    roles: BTreeSet<RoleName>,
    via: String,
}

/// What a site is expected to look like once converged.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SiteExpectation {
    /// Active DN → groups.
    pub active: BTreeMap<DistinguishedName, BTreeSet<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub converged: bool,
    pub cycles: u64,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.converged {
            write!(f, "CONVERGED cycles={}", self.cycles)
        } else {
            write!(f, "NOT CONVERGED after {} cycles", self.cycles)
        }
    }
}

/// What one simulated cycle did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepReport {
    pub frames_fed: usize,
    pub journal_writes: usize,
    pub results: usize,
    pub outstanding: usize,
    pub failed_sites: Vec<String>,
}

impl StepReport {
    pub fn is_quiet(&self) -> bool {
        self.frames_fed == 0 && self.journal_writes == 0 && self.outstanding == 0 && self.failed_sites.is_empty()
    }
}

pub struct Simulation {
    workdir: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    registries: BTreeMap<String, Registry>,
    sites: BTreeMap<String, SimSite>,
    members: BTreeMap<DistinguishedName, Member>,
    operator: PeerIdentity,
    latency: u32,
    seed: u64,
    cycle: u64,
    last_result_cycle: Option<u64>,
    crashes: BTreeMap<String, Crash>,
}

impl fmt::Debug for Simulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulation")
            .field("workdir", &self.workdir)
            .field("registries", &self.registries.keys().collect::<Vec<_>>())
            .field("sites", &self.sites.keys().collect::<Vec<_>>())
            .field("cycle", &self.cycle)
            .finish()
    }
}

fn node_dn(kind: &str, name: &str) -> DistinguishedName {
    let cn: String = name
        .chars()
        .map(|c| if c == '/' || c == '=' { '_' } else { c })
        .collect();
    DistinguishedName::parse(&format!("/O=Grid/OU={kind}/CN={cn}")).expect("node names form valid DNs")
}

fn fingerprint(dn: &DistinguishedName) -> String {
    format!("sha1:{:016x}", {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in dn.as_str().bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
        }
        h
    })
}

fn credential(dn: DistinguishedName) -> Credential {
    let fp = fingerprint(&dn);
    Credential::new(dn, fp)
}

fn trust_each_other(a: &mut Credential, b: &mut Credential) {
    let (adn, bdn) = (a.dn().clone(), b.dn().clone());
    a.trust(bdn.clone(), fingerprint(&bdn)).expect("distinct identities");
    b.trust(adn.clone(), fingerprint(&adn)).expect("distinct identities");
}

/// A complete record for a simulated user.
pub fn synthetic_record(dn: &DistinguishedName, roles: BTreeSet<RoleName>, vo_path: &str) -> UserRecord {
    let cn = dn
        .components()
        .filter(|(k, _)| k.eq_ignore_ascii_case("CN"))
        .map(|(_, v)| v.to_string())
        .last()
        .unwrap_or_else(|| dn.as_str().to_string());
    let local: String = cn
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '.' })
        .collect();
    let local = local.trim_matches('.');
    UserRecord {
        dn: dn.clone(),
        certificate_ref: format!("cert:{}", fingerprint(dn)),
        real_name: cn.clone(),
        institution: "Example Laboratory".into(),
        email: format!("{}@example.org", if local.is_empty() { "user" } else { local }),
        registrar_dn: node_dn("Operator", "sim"),
        agreement_signed_at: "2004-01-01T00:00:00Z".parse().expect("fixed timestamp"),
        roles,
        vo_path: vo_path.to_string(),
    }
}

impl Simulation {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        Self {
            workdir: workdir.into(),
            _tmp: None,
            registries: BTreeMap::new(),
            sites: BTreeMap::new(),
            members: BTreeMap::new(),
            operator: PeerIdentity::operator(node_dn("Operator", "sim")),
            latency: 0,
            seed: 0,
            cycle: 0,
            last_result_cycle: None,
            crashes: BTreeMap::new(),
        }
    }

    /// A simulation whose site stores live in a fresh temporary directory.
    pub fn in_tempdir() -> Result<Self, SimError> {
        let tmp = tempfile::tempdir()?;
        let mut sim = Self::new(tmp.path());
        sim._tmp = Some(tmp);
        Ok(sim)
    }

    pub fn set_latency(&mut self, max_cycles: u32) {
        self.latency = max_cycles;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// The cycle in which the last provisioning result was applied.
    pub fn last_result_cycle(&self) -> Option<u64> {
        self.last_result_cycle
    }

    pub fn site_names(&self) -> impl Iterator<Item = &str> {
        self.sites.keys().map(String::as_str)
    }

    pub fn site(&self, name: &str) -> Option<&Site> {
        self.sites.get(name).and_then(|s| s.site.as_ref())
    }

    pub fn site_mut(&mut self, name: &str) -> Option<&mut Site> {
        self.sites.get_mut(name).and_then(|s| s.site.as_mut())
    }

    pub fn site_vo(&self, name: &str) -> Option<&str> {
        self.sites.get(name).map(|s| s.vo.as_str())
    }

    pub fn site_dir(&self, name: &str) -> Option<&Path> {
        self.sites.get(name).map(|s| s.dir.as_path())
    }

    pub fn registry(&self, name: &str) -> Option<&SharedRegistry> {
        self.registries.get(name).map(|r| &r.node)
    }

    pub fn gridmap_path(&self, site: &str) -> Option<PathBuf> {
        self.sites.get(site).map(|s| s.dir.join("grid-mapfile"))
    }

    /// Bytes of the site's installed grid-mapfile (empty if none yet).
    pub fn gridmap_bytes(&self, site: &str) -> Vec<u8> {
        self.gridmap_path(site)
            .and_then(|p| std::fs::read(p).ok())
            .unwrap_or_default()
    }

    pub fn add_vo(&mut self, path: &str) -> Result<(), SimError> {
        if self.registries.contains_key(path) {
            return Err(SimError::Topology(format!("{path} declared twice")));
        }
        let mut node = RegistryNode::in_memory(path);
        node.add_registrar(self.operator.dn().clone())?;
        self.registries.insert(
            path.to_string(),
            Registry {
                node: node.into_shared(),
                cred: credential(node_dn("VO", path)),
                parent: None,
                feed: FeedUpState::new(Duration::from_secs(0)),
            },
        );
        Ok(())
    }

    pub fn add_ra(&mut self, name: &str, feeds: &str) -> Result<(), SimError> {
        if self.registries.contains_key(name) {
            return Err(SimError::Topology(format!("{name} declared twice")));
        }
        let mut cred = credential(node_dn("RA", name));
        let parent = self
            .registries
            .get_mut(feeds)
            .ok_or_else(|| SimError::Topology(format!("ra {name} feeds unknown node {feeds}")))?;
        parent.node.write().expect("registry lock").add_registrar(cred.dn().clone())?;
        trust_each_other(&mut cred, &mut parent.cred);
        let mut node = RegistryNode::in_memory(format!("{feeds}/{name}"));
        node.add_registrar(self.operator.dn().clone())?;
        self.registries.insert(
            name.to_string(),
            Registry {
                node: node.into_shared(),
                cred,
                parent: Some(feeds.to_string()),
                feed: FeedUpState::new(Duration::from_secs(0)),
            },
        );
        Ok(())
    }

    fn root_of(&self, name: &str) -> Option<String> {
        let mut cur = name;
        for _ in 0..=self.registries.len() {
            match &self.registries.get(cur)?.parent {
                None => return Some(cur.to_string()),
                Some(p) => cur = p,
            }
        }
        None
    }

    fn depth_of(&self, name: &str) -> usize {
        let mut depth = 0;
        let mut cur = name;
        while let Some(Some(p)) = self.registries.get(cur).map(|r| &r.parent) {
            depth += 1;
            cur = p;
        }
        depth
    }

    pub fn add_site(&mut self, name: &str, vo: &str, projection: AttributeProjection) -> Result<(), SimError> {
        if self.sites.contains_key(name) {
            return Err(SimError::Topology(format!("site {name} declared twice")));
        }
        let mut cred = credential(node_dn("Site", name));
        let reg = self
            .registries
            .get_mut(vo)
            .filter(|r| r.parent.is_none())
            .ok_or_else(|| SimError::Topology(format!("site {name} pulls unknown VO {vo}")))?;
        reg.node
            .write()
            .expect("registry lock")
            .enroll_site_admin(cred.dn().clone(), projection.clone())?;
        trust_each_other(&mut cred, &mut reg.cred);
        let dir = self.workdir.join(format!("site-{name}"));
        let mut store = LocalStore::open(&dir).map_err(SyncError::from)?;
        if !store.state().is_initialized() {
            store.initdb("grid", 1, 99, false).map_err(SyncError::from)?;
        }
        drop(store);
        let mut s = SimSite {
            vo: vo.to_string(),
            projection,
            bans: BTreeSet::new(),
            rolemap: DEFAULT_ROLES
                .iter()
                .map(|r| (RoleName::parse(r).expect("valid role"), r.to_string()))
                .collect(),
            dir,
            cred,
            restarts: 0,
            site: None,
        };
        s.site = Some(self.build_site(&s)?);
        self.sites.insert(name.to_string(), s);
        Ok(())
    }

    fn build_site(&self, s: &SimSite) -> Result<Site, SimError> {
        let reg = &self.registries[&s.vo];
        let store = LocalStore::open(&s.dir).map_err(SyncError::from)?;
        let mut policy = SitePolicy::default();
        policy.role_group_map = s.rolemap.clone();
        policy.banned_dns = s.bans.clone();
        let latency = if self.latency == 0 {
            Latency::None
        } else {
            let seed = self.seed ^ fnv(s.dir.as_os_str().as_encoded_bytes()) ^ s.restarts.wrapping_mul(0x9e37_79b9);
            Latency::random_cycles(self.latency, seed)
        };
        let source = MemorySource::new(
            s.vo.clone(),
            s.projection.clone(),
            reg.node.clone(),
            s.cred.clone(),
            reg.cred.clone(),
        );
        Ok(Site::new(
            store,
            policy,
            Box::new(AutoBackend::new(latency)),
            Box::new(NullSink),
            vec![Box::new(source)],
            SiteOptions {
                auto_approve: true,
                admin_email: "admin@site.example".into(),
                gridmap_path: Some(s.dir.join("grid-mapfile")),
            },
        )?)
    }

    fn sim_site(&mut self, name: &str) -> Result<&mut SimSite, SimError> {
        self.sites
            .get_mut(name)
            .ok_or_else(|| SimError::Topology(format!("unknown site {name}")))
    }

    pub fn ban(&mut self, site: &str, dn: DistinguishedName) -> Result<(), SimError> {
        let s = self.sim_site(site)?;
        s.bans.insert(dn.clone());
        if let Some(live) = s.site.as_mut() {
            live.policy.banned_dns.insert(dn);
        }
        Ok(())
    }

    pub fn map_role(&mut self, site: &str, role: RoleName, group: &str) -> Result<(), SimError> {
        let s = self.sim_site(site)?;
        s.rolemap.insert(role.clone(), group.to_string());
        if let Some(live) = s.site.as_mut() {
            live.policy.role_group_map.insert(role, group.to_string());
        }
        Ok(())
    }

    /// Registers a user at `via` (an authority or a root VO).
    pub fn add_user(&mut self, dn: DistinguishedName, roles: BTreeSet<RoleName>, via: &str) -> Result<(), SimError> {
        let root = self
            .root_of(via)
            .ok_or_else(|| SimError::Topology(format!("user registered via unknown node {via}")))?;
        let record = synthetic_record(&dn, roles.clone(), &root);
        let reg = &self.registries[via];
        reg.node.write().expect("registry lock").register_user(&self.operator, record)?;
        self.members.insert(
            dn,
            Member {
                roles,
                via: via.to_string(),
            },
        );
        Ok(())
    }

    /// Removes a user at the node that registered it.
    pub fn remove_user(&mut self, dn: &DistinguishedName) -> Result<(), SimError> {
        let m = self
            .members
            .remove(dn)
            .ok_or_else(|| SimError::Topology(format!("remove of unknown user {dn}")))?;
        let reg = &self.registries[&m.via];
        reg.node.write().expect("registry lock").remove_user(&self.operator, dn)?;
        Ok(())
    }

    /// Removes a user at `node`, which may be any registry holding it,
    /// e.g. the root VO for a user fed up from an authority.
    pub fn remove_user_at(&mut self, node: &str, dn: &DistinguishedName) -> Result<(), SimError> {
        let reg = self
            .registries
            .get(node)
            .ok_or_else(|| SimError::Topology(format!("remove at unknown node {node}")))?;
        reg.node.write().expect("registry lock").remove_user(&self.operator, dn)?;
        self.members.remove(dn);
        Ok(())
    }

    /// Kills `site` at the chosen point of its next cycle and restarts it.
    pub fn schedule_crash(&mut self, site: &str, crash: Crash) {
        self.crashes.insert(site.to_string(), crash);
    }

    fn restart(&mut self, name: &str) -> Result<(), SimError> {
        let s = self.sites.get_mut(name).expect("known site");
        s.site = None;
        s.restarts += 1;
        let s = &self.sites[name];
        let site = self.build_site(s)?;
        self.sites.get_mut(name).expect("known site").site = Some(site);
        Ok(())
    }

    /// One cycle: feed-up from the deepest authorities first, then every
    /// site's daemon cycle.
    pub fn step(&mut self) -> Result<StepReport, SimError> {
        self.cycle += 1;
        let mut report = StepReport::default();
        let mut ras: Vec<(usize, String)> = self
            .registries
            .iter()
            .filter(|(_, r)| r.parent.is_some())
            .map(|(n, _)| (self.depth_of(n), n.clone()))
            .collect();
        ras.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        for (_, name) in ras {
            let parent_name = self.registries[&name].parent.clone().expect("authority has a parent");
            let parent_node = self.registries[&parent_name].node.clone();
            let parent_cred = self.registries[&parent_name].cred.clone();
            let reg = self.registries.get_mut(&name).expect("known authority");
            let source = reg.node.read().expect("registry lock");
            let mut link = match MemoryUpstream::connect(&parent_node, &reg.cred, &parent_cred) {
                Ok(l) => l,
                Err(e) => {
                    tracing::warn!(ra = %name, error = %e, "feed-up handshake failed");
                    continue;
                }
            };
            match sync_up(&mut reg.feed, &source, &AttributeProjection::all(), &mut link) {
                Ok(r) => report.frames_fed += r.frames_sent,
                Err(e) => {
                    tracing::warn!(ra = %name, error = %e, "feed-up failed");
                    report.frames_fed += 1;
                }
            }
        }

        let names: Vec<String> = self.sites.keys().cloned().collect();
        for name in names {
            let crash = self.crashes.remove(&name);
            if crash == Some(Crash::BeforeCycle) {
                self.restart(&name)?;
            }
            let site = self.sites.get_mut(&name).and_then(|s| s.site.as_mut()).expect("site running");
            match crash {
                Some(Crash::MidCycle) => site.inject_fault(CycleFault::AbortBeforeCommit),
                Some(Crash::TornWrite(n)) => site.inject_fault(CycleFault::TornCommit(n)),
                _ => {}
            }
            let before = site.store.journal_writes();
            let result = site.run_cycle();
            let after = site.store.journal_writes();
            report.journal_writes += (after - before) as usize;
            match result {
                Ok(c) => {
                    if c.report.results > 0 {
                        report.results += c.report.results;
                        self.last_result_cycle = Some(self.cycle);
                    }
                }
                Err(e) => {
                    if crash.is_none() || crash == Some(Crash::BeforeCycle) {
                        tracing::warn!(site = %name, error = %e, "site cycle failed");
                    }
                    report.failed_sites.push(name.clone());
                }
            }
            if matches!(crash, Some(Crash::MidCycle | Crash::TornWrite(_))) {
                self.restart(&name)?;
            }
            let site = self.sites[&name].site.as_ref().expect("site running");
            report.outstanding += site.store.state().outstanding().count();
        }
        Ok(report)
    }

    /// What each site should hold, computed from the scenario's inputs.
    pub fn expected(&self, site: &str) -> SiteExpectation {
        let Some(s) = self.sites.get(site) else {
            return SiteExpectation::default();
        };
        let mut policy = SitePolicy::default();
        policy.role_group_map = s.rolemap.clone();
        let carries_roles = s.projection.contains(crate::domain::Attribute::Roles);
        let mut active = BTreeMap::new();
        for (dn, m) in &self.members {
            if self.root_of(&m.via).as_deref() != Some(s.vo.as_str()) || s.bans.contains(dn) {
                continue;
            }
            let roles = if carries_roles { m.roles.clone() } else { BTreeSet::new() };
            let (groups, missing) = roles_to_groups(&roles, &policy);
            if missing.is_empty() {
                active.insert(dn.clone(), groups);
            }
        }
        SiteExpectation { active }
    }

    /// Whether the site's Active set, groups and installed grid-mapfile
    /// match [`Simulation::expected`].
    pub fn site_matches(&self, name: &str) -> bool {
        let Some(site) = self.site(name) else {
            return false;
        };
        let expected = self.expected(name);
        let active: BTreeMap<DistinguishedName, BTreeSet<String>> = site
            .store
            .state()
            .list_by_status(UserStatus::Active)
            .into_iter()
            .map(|s| (s.dn.clone(), s.groups.clone()))
            .collect();
        if active != expected.active {
            return false;
        }
        let Some(pool) = site.store.state().pool() else {
            return false;
        };
        let mut entries = Vec::new();
        for dn in expected.active.keys() {
            match pool.account_of(dn) {
                Some(a) => entries.push((dn.clone(), a.to_string())),
                None => return false,
            }
        }
        let doc = GridMapDocument::new(entries);
        self.gridmap_bytes(name) == gridmap::render(&doc).into_bytes()
    }

    pub fn all_sites_match(&self) -> bool {
        self.sites.keys().all(|n| self.site_matches(n))
    }

    /// Steps until a cycle changes nothing and every site matches, or
    /// `max` cycles pass.
    pub fn run_until_converged(&mut self, max: u64) -> Result<Outcome, SimError> {
        if self.sites.is_empty() {
            return Ok(Outcome {
                converged: true,
                cycles: 0,
            });
        }
        for n in 1..=max {
            let r = self.step()?;
            if r.is_quiet() && self.all_sites_match() {
                return Ok(Outcome {
                    converged: true,
                    cycles: n,
                });
            }
        }
        Ok(Outcome {
            converged: false,
            cycles: max,
        })
    }

    pub fn apply(&mut self, d: &Directive) -> Result<(), SimError> {
        match d {
            Directive::Vo(path) => self.add_vo(path),
            Directive::Ra { name, feeds } => self.add_ra(name, feeds),
            Directive::Site { name, vo, projection } => self.add_site(name, vo, projection.clone()),
            Directive::User { dn, roles, via } => self.add_user(dn.clone(), roles.clone(), via),
            Directive::Ban { site, dn } => self.ban(site, dn.clone()),
            Directive::RoleMap { site, role, group } => self.map_role(site, role.clone(), group),
            Directive::Latency(n) => {
                self.latency = *n;
                let names: Vec<String> = self.sites.keys().cloned().collect();
                for name in names {
                    self.restart(&name)?;
                }
                Ok(())
            }
            Directive::Seed(n) => {
                self.seed = *n;
                Ok(())
            }
            Directive::Step(n) => {
                for _ in 0..*n {
                    self.step()?;
                }
                Ok(())
            }
            Directive::Remove(dn) => self.remove_user(dn),
        }
    }

    /// Applies every directive, then runs to convergence.
    pub fn run_scenario(&mut self, scenario: &Scenario, max_cycles: u64) -> Result<Outcome, SimError> {
        for (line, d) in &scenario.directives {
            self.apply(d).map_err(|e| match e {
                SimError::Topology(reason) => SimError::Scenario(ScenarioError { line: *line, reason }),
                other => other,
            })?;
        }
        self.run_until_converged(max_cycles)
    }
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h = (h ^ u64::from(*b)).wrapping_mul(0x100000001b3);
    }
    h
}
