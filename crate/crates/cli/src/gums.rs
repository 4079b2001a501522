//! The site tool: `gums <command>`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gums_core::block::render_blocks;
use gums_core::domain::{DistinguishedName, RoleName};
use gums_core::policy::{FileSink, NotificationSink, NullSink, PendingRequest, RequestId, RequestStatus, SitePolicy};
use gums_core::provision::{AutoBackend, Latency, Provisioner, QueueBackend};
use gums_core::sim::{Scenario, Simulation};
use gums_core::store::{AccountPool, HistoryEvent, LocalStore, SiteUserState, UserStatus};
use gums_core::sync::{Completion, Site, SiteOptions, SyncReport, TcpSource, VoSource};

use crate::config::{Backend, SiteConfig};
use crate::{load_credential, parse_args, parse_dn, CommandOutcome};

const PULL_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Parser)]
#[command(name = "gums", about = "Site-side grid user management", version)]
pub struct Cli {
    /// Site configuration file.
    #[arg(long, short, global = true, default_value = "gums.toml")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the local database and its account pool.
    Initdb {
        /// Discard an existing database.
        #[arg(long)]
        force: bool,
    },
    /// Run one full cycle: pull, reconcile, provisioning results, grid-mapfile.
    Sync {
        /// Plaintext identity assertion; only for test registries.
        #[arg(long)]
        insecure: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run cycles forever, one per configured interval.
    Daemon {
        #[arg(long)]
        insecure: bool,
        /// Stop after this many cycles.
        #[arg(long)]
        cycles: Option<u64>,
    },
    /// List open requests; with --cron, mail a reminder for each.
    Updategroup {
        #[arg(long)]
        cron: bool,
        #[arg(long)]
        json: bool,
    },
    /// Role to group mappings.
    Group {
        #[command(subcommand)]
        action: GroupAction,
    },
    /// Close a pending request.
    Complete {
        request: String,
        outcome: Resolution,
        #[arg(long)]
        note: Option<String>,
        /// Account created by hand (account reviews).
        #[arg(long)]
        account: Option<String>,
        /// Group created (group creation; defaults to the role name).
        #[arg(long)]
        group: Option<String>,
    },
    /// Regenerate and install the grid-mapfile.
    Gridmap {
        /// Write here instead of the configured path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Status transitions of one DN.
    History {
        #[arg(value_parser = parse_dn)]
        dn: DistinguishedName,
        #[arg(long)]
        json: bool,
    },
    /// Print every user state.
    Dumpdb {
        #[arg(long)]
        json: bool,
    },
    /// List requests.
    Requests {
        /// Include closed requests.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        json: bool,
    },
    /// Return a banned user's account to the pool.
    Release { account: String },
    /// Lift a site ban recorded in the database.
    Unban {
        #[arg(value_parser = parse_dn)]
        dn: DistinguishedName,
    },
    /// Run a scenario file in-process and report convergence.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 64)]
        max_cycles: u64,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum GroupAction {
    /// Map a VO role to a local group.
    Register { role: String, group: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Resolution {
    Done,
    Rejected,
}

/// `gums sync --json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncJson {
    pub report: SyncReport,
    pub failed_endpoints: BTreeMap<String, String>,
    pub journal_written: bool,
    pub gridmap_written: bool,
    pub notifications: usize,
}

/// `gums dumpdb --json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpJson {
    pub pool: Option<AccountPool>,
    pub states: Vec<SiteUserState>,
    pub requests: Vec<PendingRequest>,
}

/// `gums simulate --json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulateJson {
    pub converged: bool,
    pub cycles: u64,
    /// Site → number of Active users.
    pub active: BTreeMap<String, usize>,
}

pub fn run<I, T>(args: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse_args::<Cli, _, _>(args) {
        Ok(cli) => execute(cli),
        Err(outcome) => outcome,
    }
}

pub fn execute(cli: Cli) -> CommandOutcome {
    let config = cli.config;
    match cli.command {
        Command::Simulate {
            scenario,
            max_cycles,
            json,
        } => simulate(&scenario, max_cycles, json),
        command => match SiteConfig::load(&config) {
            Ok(cfg) => dispatch(&cfg, command),
            Err(e) => CommandOutcome::failure(format!("{e:#}")),
        },
    }
}

fn dispatch(cfg: &SiteConfig, command: Command) -> CommandOutcome {
    match command {
        Command::Initdb { force } => initdb(cfg, force).into(),
        Command::Sync { insecure, json } => sync(cfg, insecure, json).into(),
        Command::Daemon { insecure, cycles } => daemon(cfg, insecure, cycles).into(),
        Command::Updategroup { cron, json } => updategroup(cfg, cron, json).into(),
        Command::Group {
            action: GroupAction::Register { role, group },
        } => register_group(cfg, &role, &group).into(),
        Command::Complete {
            request,
            outcome,
            note,
            account,
            group,
        } => complete(
            cfg,
            &request,
            Completion {
                rejected: outcome == Resolution::Rejected,
                note,
                account,
                group,
            },
        )
        .into(),
        Command::Gridmap { output } => gridmap(cfg, output).into(),
        Command::History { dn, json } => history(cfg, &dn, json).into(),
        Command::Dumpdb { json } => dumpdb(cfg, json).into(),
        Command::Requests { all, json } => requests(cfg, all, json).into(),
        Command::Release { account } => release(cfg, &account).into(),
        Command::Unban { dn } => unban(cfg, &dn).into(),
        Command::Simulate { .. } => unreachable!("handled before loading the config"),
    }
}

fn open_store(cfg: &SiteConfig) -> anyhow::Result<LocalStore> {
    let store = LocalStore::open(&cfg.store.dir)?;
    if !store.state().is_initialized() {
        bail!("database {} is not initialized; run `gums initdb`", cfg.store.dir.display());
    }
    Ok(store)
}

fn load_policy(cfg: &SiteConfig) -> anyhow::Result<SitePolicy> {
    Ok(match &cfg.policy.file {
        Some(path) => SitePolicy::load(path)?,
        None => SitePolicy::default(),
    })
}

fn provisioner(cfg: &SiteConfig) -> Box<dyn Provisioner> {
    match cfg.provision.backend {
        Backend::Auto if cfg.provision.latency_ms == 0 => Box::new(AutoBackend::new(Latency::None)),
        Backend::Auto => Box::new(AutoBackend::new(Latency::Millis(cfg.provision.latency_ms))),
        Backend::Queue => Box::new(QueueBackend),
    }
}

fn sink(cfg: &SiteConfig) -> Box<dyn NotificationSink> {
    match &cfg.notify.file {
        Some(path) => Box::new(FileSink::new(path)),
        None => Box::new(NullSink),
    }
}

fn sources(cfg: &SiteConfig, insecure: bool) -> anyhow::Result<Vec<Box<dyn VoSource>>> {
    let endpoints = cfg.endpoints()?;
    let path = cfg
        .credential
        .as_ref()
        .ok_or_else(|| anyhow!("no credential configured"))?;
    let credential = load_credential(path)?;
    Ok(endpoints
        .into_iter()
        .map(|endpoint| {
            Box::new(TcpSource {
                endpoint,
                credential: credential.clone(),
                insecure,
                timeout: PULL_TIMEOUT,
            }) as Box<dyn VoSource>
        })
        .collect())
}

/// Builds the site from its configuration. `sources` is empty for
/// administrative commands that never pull.
pub fn open_site(cfg: &SiteConfig, sources: Vec<Box<dyn VoSource>>) -> anyhow::Result<Site> {
    let store = open_store(cfg)?;
    let options = SiteOptions {
        auto_approve: cfg.auto_approve,
        admin_email: cfg.admin.email.clone(),
        gridmap_path: cfg.gridmap.path.clone(),
    };
    Ok(Site::new(store, load_policy(cfg)?, provisioner(cfg), sink(cfg), sources, options)?)
}

fn to_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn initdb(cfg: &SiteConfig, force: bool) -> anyhow::Result<String> {
    let mut store = LocalStore::open(&cfg.store.dir)?;
    let pool = store.initdb(&cfg.pool.prefix, cfg.pool.start, cfg.pool.end, force)?;
    Ok(format!("initialized {}: pool {}\n", cfg.store.dir.display(), pool.describe()))
}

fn sync_json(c: &gums_core::sync::CycleReport) -> SyncJson {
    SyncJson {
        report: c.report.clone(),
        failed_endpoints: c.failed_endpoints.iter().cloned().collect(),
        journal_written: c.journal_written,
        gridmap_written: c.gridmap_written,
        notifications: c.notifications,
    }
}

pub fn sync(cfg: &SiteConfig, insecure: bool, json: bool) -> anyhow::Result<String> {
    let mut site = open_site(cfg, sources(cfg, insecure)?)?;
    let cycle = site.run_cycle()?;
    if json {
        return to_json(&sync_json(&cycle));
    }
    let mut out = format!("{}\n", cycle.report);
    for (vo, err) in &cycle.failed_endpoints {
        out.push_str(&format!("endpoint {vo} skipped: {err}\n"));
    }
    Ok(out)
}

pub fn daemon(cfg: &SiteConfig, insecure: bool, cycles: Option<u64>) -> anyhow::Result<String> {
    let mut site = open_site(cfg, sources(cfg, insecure)?)?;
    let interval = cfg.interval();
    tracing::info!(store = %cfg.store.dir.display(), interval = ?interval, "site daemon started");
    let mut n = 0u64;
    loop {
        match site.run_cycle() {
            Ok(c) => tracing::info!(report = %c.report, failed = c.failed_endpoints.len(), "cycle done"),
            Err(e) => tracing::warn!(error = %e, "cycle failed"),
        }
        n += 1;
        if cycles.is_some_and(|max| n >= max) {
            return Ok(format!("ran {n} cycles\n"));
        }
        std::thread::sleep(interval);
    }
}

fn request_line(r: &PendingRequest) -> String {
    format!("{} {:?} {}\n", r.id, r.status, r.kind.describe())
}

fn list_requests<'a>(reqs: impl Iterator<Item = &'a PendingRequest>, json: bool) -> anyhow::Result<String> {
    let reqs: Vec<&PendingRequest> = reqs.collect();
    if json {
        return to_json(&reqs);
    }
    Ok(reqs.into_iter().map(request_line).collect())
}

pub fn updategroup(cfg: &SiteConfig, cron: bool, json: bool) -> anyhow::Result<String> {
    if cron {
        let mut site = open_site(cfg, Vec::new())?;
        let sent = site.remind_open_requests();
        return Ok(if sent == 0 {
            String::new()
        } else {
            format!("sent {sent} notifications\n")
        });
    }
    let store = open_store(cfg)?;
    list_requests(store.state().open_requests(), json)
}

pub fn requests(cfg: &SiteConfig, all: bool, json: bool) -> anyhow::Result<String> {
    let store = open_store(cfg)?;
    let state = store.state();
    list_requests(state.requests().filter(|r| all || r.status == RequestStatus::Open), json)
}

pub fn register_group(cfg: &SiteConfig, role: &str, group: &str) -> anyhow::Result<String> {
    let role = RoleName::parse(role)?;
    if group.is_empty() || group.contains(char::is_whitespace) {
        bail!("group name {group:?} is not a valid group");
    }
    let mut site = open_site(cfg, Vec::new())?;
    site.register_group(role.clone(), group)?;
    Ok(format!("role {role} -> group {group}\n"))
}

pub fn complete(cfg: &SiteConfig, request: &str, how: Completion) -> anyhow::Result<String> {
    let mut site = open_site(cfg, Vec::new())?;
    let closed = site.complete(&RequestId(request.to_string()), how)?;
    Ok(request_line(&closed))
}

pub fn gridmap(cfg: &SiteConfig, output: Option<PathBuf>) -> anyhow::Result<String> {
    let path = output
        .or_else(|| cfg.gridmap.path.clone())
        .ok_or_else(|| anyhow!("no gridmap.path configured and no --output given"))?;
    let store = open_store(cfg)?;
    let doc = gums_core::gridmap::build(store.state().states());
    gums_core::gridmap::atomic_write(&doc, &path).with_context(|| format!("writing {}", path.display()))?;
    Ok(format!("wrote {} entries to {}\n", doc.len(), path.display()))
}

pub fn history(cfg: &SiteConfig, dn: &DistinguishedName, json: bool) -> anyhow::Result<String> {
    let store = open_store(cfg)?;
    let events: Vec<HistoryEvent> = store.history(dn)?;
    if json {
        return to_json(&events);
    }
    Ok(events
        .iter()
        .map(|e| {
            format!(
                "{} {} {} -> {} ({})\n",
                e.at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                e.vo,
                e.from.map_or("none", UserStatus::name),
                e.to.name(),
                e.cause
            )
        })
        .collect())
}

pub fn dumpdb(cfg: &SiteConfig, json: bool) -> anyhow::Result<String> {
    let store = open_store(cfg)?;
    let state = store.state();
    if json {
        return to_json(&DumpJson {
            pool: state.pool().cloned(),
            states: state.states().cloned().collect(),
            requests: state.requests().cloned().collect(),
        });
    }
    let blocks: Vec<_> = state.states().map(SiteUserState::to_block).collect();
    Ok(render_blocks(&blocks))
}

pub fn release(cfg: &SiteConfig, account: &str) -> anyhow::Result<String> {
    let mut site = open_site(cfg, Vec::new())?;
    let holder = site.release(account)?;
    Ok(format!("{account} released from {holder}\n"))
}

pub fn unban(cfg: &SiteConfig, dn: &DistinguishedName) -> anyhow::Result<String> {
    let mut site = open_site(cfg, Vec::new())?;
    let n = site.unban(dn)?;
    Ok(format!("unbanned {dn} in {n} VO(s)\n"))
}

pub fn simulate(path: &Path, max_cycles: u64, json: bool) -> CommandOutcome {
    let result = (|| -> anyhow::Result<(bool, String)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let scenario = Scenario::parse(&text)?;
        let mut sim = Simulation::in_tempdir()?;
        let outcome = sim.run_scenario(&scenario, max_cycles)?;
        let active: BTreeMap<String, usize> = sim
            .site_names()
            .map(|n| {
                let count = sim
                    .site(n)
                    .map_or(0, |s| s.store.state().list_by_status(UserStatus::Active).len());
                (n.to_string(), count)
            })
            .collect();
        if json {
            let out = to_json(&SimulateJson {
                converged: outcome.converged,
                cycles: outcome.cycles,
                active,
            })?;
            return Ok((outcome.converged, out));
        }
        let mut out = format!("{outcome}\n");
        for (site, n) in active {
            out.push_str(&format!("site {site}: {n} active\n"));
        }
        Ok((outcome.converged, out))
    })();
    match result {
        Ok((true, out)) => CommandOutcome::ok(out),
        Ok((false, out)) => CommandOutcome {
            code: 1,
            stdout: out,
            stderr: String::new(),
        },
        Err(e) => CommandOutcome::failure(format!("{e:#}")),
    }
}
