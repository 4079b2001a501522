//! The site daemon: pulls VO membership, reconciles it into the local
//! store, drives provisioning and keeps the grid-mapfile current.
//!
//! A cycle pulls every endpoint, applies each VO's diff, then reconciles
//! every stored user against policy until provisioning has nothing more to
//! report. All of it lands as one journal batch. Notifications go out and
//! the grid-mapfile is rewritten only after that batch is durable.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AttributeProjection, DistinguishedName, ProjectedRecord, RoleName};
use crate::gridmap::{self, GridMapDocument};
use crate::policy::{
    evaluate, roles_to_groups, Decision, Notification, NotificationSink, PendingRequest, PolicyError,
    RequestId, RequestKind, RequestStatus, ReviewAction, SitePolicy,
};
use crate::provision::{
    Dispatch, ProvisionId, ProvisionKind, ProvisionOutcome, ProvisionRequest, ProvisionResult, Provisioner,
};
use crate::registry::{parse_query_response, query_request, serve_one, ProtocolError, SharedRegistry};
use crate::store::{HoldCause, LocalStore, Raised, SiteUserState, StoreError, Txn, UserStatus};
use crate::transport::{connect, handshake, Credential, TranscriptEntry, TransportError};

/// One VO registry the site pulls from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoEndpoint {
    pub addr: String,
    pub vo_path: String,
    pub projection: AttributeProjection,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PullError {
    #[error("handshake failed: {0}")]
    HandshakeFailed(String),
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<TransportError> for PullError {
    fn from(e: TransportError) -> Self {
        if e.is_auth_failure() {
            PullError::HandshakeFailed(e.to_string())
        } else {
            PullError::Unreachable(e.to_string())
        }
    }
}

impl From<ProtocolError> for PullError {
    fn from(e: ProtocolError) -> Self {
        PullError::Protocol(e.to_string())
    }
}

/// Where one VO's membership comes from.
pub trait VoSource: Send {
    fn vo_path(&self) -> &str;
    fn fetch(&mut self) -> Result<Vec<ProjectedRecord>, PullError>;
}

/// Queries a registry over an authenticated TCP connection.
#[derive(Debug, Clone)]
pub struct TcpSource {
    pub endpoint: VoEndpoint,
    pub credential: Credential,
    pub insecure: bool,
    pub timeout: Duration,
}

impl VoSource for TcpSource {
    fn vo_path(&self) -> &str {
        &self.endpoint.vo_path
    }

    fn fetch(&mut self) -> Result<Vec<ProjectedRecord>, PullError> {
        let mut ch = connect(
            self.endpoint.addr.as_str(),
            &self.credential,
            self.insecure,
            Some(self.timeout),
        )?;
        ch.send_str(&query_request(&self.endpoint.projection))?;
        let reply = ch.recv_string()?;
        ch.close();
        Ok(parse_query_response(&reply)?)
    }
}

/// Queries an in-process registry over an in-memory authenticated channel.
pub struct MemorySource {
    pub vo_path: String,
    pub projection: AttributeProjection,
    pub node: SharedRegistry,
    pub client: Credential,
    pub server: Credential,
    /// Set to simulate an outage.
    pub down: bool,
    last_transcript: Vec<TranscriptEntry>,
}

impl MemorySource {
    pub fn new(
        vo_path: impl Into<String>,
        projection: AttributeProjection,
        node: SharedRegistry,
        client: Credential,
        server: Credential,
    ) -> Self {
        Self {
            vo_path: vo_path.into(),
            projection,
            node,
            client,
            server,
            down: false,
            last_transcript: Vec::new(),
        }
    }

    /// The client side of the most recent exchange.
    pub fn last_transcript(&self) -> &[TranscriptEntry] {
        &self.last_transcript
    }
}

impl VoSource for MemorySource {
    fn vo_path(&self) -> &str {
        &self.vo_path
    }

    fn fetch(&mut self) -> Result<Vec<ProjectedRecord>, PullError> {
        if self.down {
            return Err(PullError::Unreachable("endpoint down".into()));
        }
        let (mut client, mut server) = handshake(&self.client, &self.server)?;
        client.send_str(&query_request(&self.projection))?;
        serve_one(&self.node, &mut server)?;
        let reply = client.recv_string()?;
        self.last_transcript = client.transcript().to_vec();
        Ok(parse_query_response(&reply)?)
    }
}

/// Pulls every source, in parallel when there is more than one.
pub fn pull(sources: &mut [Box<dyn VoSource>]) -> Vec<(String, Result<Vec<ProjectedRecord>, PullError>)> {
    if sources.len() <= 1 {
        return sources
            .iter_mut()
            .map(|s| (s.vo_path().to_string(), s.fetch()))
            .collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .iter_mut()
            .map(|s| scope.spawn(move || (s.vo_path().to_string(), s.fetch())))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("pull thread panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncDiff {
    pub added: Vec<ProjectedRecord>,
    pub changed: Vec<(ProjectedRecord, ProjectedRecord)>,
    pub departed: Vec<DistinguishedName>,
}

impl SyncDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.changed.is_empty() && self.departed.is_empty()
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("duplicate DN {0} in pulled membership")]
pub struct DuplicateDn(pub DistinguishedName);

/// Splits one VO's pulled membership against the site's states for that
/// VO. A DN the site has banned is in none of the three lists. A stored
/// DN that had left the VO counts as added when it reappears.
pub fn compute_diff<'a>(
    remote: &[ProjectedRecord],
    local: impl IntoIterator<Item = &'a SiteUserState>,
) -> Result<SyncDiff, DuplicateDn> {
    let local: HashMap<&DistinguishedName, &SiteUserState> = local.into_iter().map(|s| (&s.dn, s)).collect();
    let mut seen = HashSet::with_capacity(remote.len());
    let mut diff = SyncDiff::default();
    for r in remote {
        if !seen.insert(&r.dn) {
            return Err(DuplicateDn(r.dn.clone()));
        }
        match local.get(&r.dn) {
            Some(s) if s.status == UserStatus::Banned => {}
            Some(s) if !s.in_vo => diff.added.push(r.clone()),
            Some(s) if s.snapshot != *r => diff.changed.push((s.snapshot.clone(), r.clone())),
            Some(_) => {}
            None => diff.added.push(r.clone()),
        }
    }
    let mut departed: Vec<_> = local
        .values()
        .filter(|s| s.in_vo && s.status != UserStatus::Banned && !seen.contains(&s.dn))
        .map(|s| s.dn.clone())
        .collect();
    departed.sort();
    diff.departed = departed;
    Ok(diff)
}

/// What a cycle did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub added: usize,
    pub changed: usize,
    pub departed: usize,
    pub banned: usize,
    pub held: usize,
    /// Users that became Active, including re-enabled ones.
    pub activated: usize,
    pub disabled: usize,
    pub submitted: usize,
    pub results: usize,
    pub failures: usize,
    pub requests: usize,
}

impl SyncReport {
    pub fn is_zero(&self) -> bool {
        *self == SyncReport::default()
    }
}

impl fmt::Display for SyncReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "added={} active={} changed={} departed={} disabled={} banned={} held={} failed={} requests={}",
            self.added,
            self.activated,
            self.changed,
            self.departed,
            self.disabled,
            self.banned,
            self.held,
            self.failures,
            self.requests
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    pub report: SyncReport,
    /// `(vo, error)` for endpoints skipped this cycle.
    pub failed_endpoints: Vec<(String, String)>,
    pub journal_written: bool,
    pub gridmap_written: bool,
    pub notifications: usize,
    pub unknown_results: usize,
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("no VO endpoints configured")]
    NoEndpoints,
    #[error("every VO endpoint failed: {}", .0.join("; "))]
    AllEndpointsDown(Vec<String>),
    #[error("unknown provisioning request {0}")]
    UnknownRequestId(ProvisionId),
    #[error("{0} is not banned")]
    NotBanned(DistinguishedName),
    #[error("{0} is banned by the policy file; remove it there first")]
    BannedByPolicy(DistinguishedName),
    #[error("grid-mapfile: {0}")]
    Gridmap(io::Error),
    #[error("{0}")]
    BadCompletion(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteOptions {
    pub auto_approve: bool,
    pub admin_email: String,
    pub gridmap_path: Option<PathBuf>,
}

impl Default for SiteOptions {
    fn default() -> Self {
        Self {
            auto_approve: false,
            admin_email: "root@localhost".to_string(),
            gridmap_path: None,
        }
    }
}

/// How an administrator closes a request.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Completion {
    pub rejected: bool,
    pub note: Option<String>,
    /// Account created by hand, for account reviews.
    pub account: Option<String>,
    /// Group name, for CreateGroup; defaults to the role name.
    pub group: Option<String>,
}

/// Test hook: fail the next cycle at a chosen point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleFault {
    /// Abandon the transaction just before commit.
    AbortBeforeCommit,
    /// Write only this many bytes of the journal batch.
    TornCommit(usize),
}

/// A site: its store, policy, provisioner, notification sink and sources.
pub struct Site {
    pub store: LocalStore,
    pub policy: SitePolicy,
    pub provisioner: Box<dyn Provisioner>,
    pub sink: Box<dyn NotificationSink>,
    pub sources: Vec<Box<dyn VoSource>>,
    pub options: SiteOptions,
    fault: Option<CycleFault>,
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Site")
            .field("store", &self.store.dir())
            .field("policy", &self.policy)
            .field("sources", &self.sources.len())
            .field("options", &self.options)
            .finish()
    }
}

impl Site {
    /// Checks the policy against the pool and hands every outstanding
    /// provisioning request to the backend.
    pub fn new(
        store: LocalStore,
        policy: SitePolicy,
        mut provisioner: Box<dyn Provisioner>,
        sink: Box<dyn NotificationSink>,
        sources: Vec<Box<dyn VoSource>>,
        options: SiteOptions,
    ) -> Result<Self, SyncError> {
        let pool = store.state().pool().ok_or(StoreError::NotInitialized)?;
        let names: Vec<String> = pool.accounts().collect();
        policy.check_reserved(names.iter().map(String::as_str))?;
        let outstanding: Vec<ProvisionRequest> = store.state().outstanding().cloned().collect();
        provisioner.recover(&outstanding);
        Ok(Self {
            store,
            policy,
            provisioner,
            sink,
            sources,
            options,
            fault: None,
        })
    }

    pub fn inject_fault(&mut self, fault: CycleFault) {
        self.fault = Some(fault);
    }

    /// The file policy with administrator-registered groups layered on.
    pub fn effective_policy(&self) -> SitePolicy {
        self.policy.with_registered_groups(self.store.state().registered_groups())
    }

    pub fn gridmap(&self) -> GridMapDocument {
        gridmap::build(self.store.state().states())
    }

    /// Rewrites the configured grid-mapfile if its bytes would change.
    pub fn write_gridmap(&self) -> Result<bool, SyncError> {
        match &self.options.gridmap_path {
            Some(path) => gridmap::write_if_changed(&self.gridmap(), path).map_err(SyncError::Gridmap),
            None => Ok(false),
        }
    }

    /// One full cycle: pull, diff, apply, reconcile, drain provisioning
    /// results, commit, notify, grid-mapfile.
    pub fn run_cycle(&mut self) -> Result<CycleReport, SyncError> {
        if self.sources.is_empty() {
            return Err(SyncError::NoEndpoints);
        }
        self.provisioner.begin_cycle();
        let pulled = pull(&mut self.sources);
        let mut cycle = CycleReport::default();
        let mut fresh = Vec::new();
        for (vo, result) in pulled {
            match result {
                Ok(records) => fresh.push((vo, records)),
                Err(e) => {
                    tracing::warn!(vo = %vo, error = %e, "endpoint skipped this cycle");
                    cycle.failed_endpoints.push((vo, e.to_string()));
                }
            }
        }
        if fresh.is_empty() {
            let errors = cycle.failed_endpoints.iter().map(|(v, e)| format!("{v}: {e}")).collect();
            return Err(SyncError::AllEndpointsDown(errors));
        }

        let policy = self.effective_policy();
        let mut txn = self.store.begin()?;
        let mut engine = Engine::new(&mut txn, &policy, self.provisioner.as_mut(), &self.options);
        for (vo, records) in &fresh {
            let diff = match compute_diff(records, engine.txn.state().states_in_vo(vo)) {
                Ok(d) => d,
                Err(e) => {
                    tracing::warn!(vo = %vo, error = %e, "endpoint skipped this cycle");
                    cycle.failed_endpoints.push((vo.clone(), e.to_string()));
                    continue;
                }
            };
            engine.apply(vo, diff)?;
        }
        engine.reconcile()?;
        engine.drain()?;
        let Engine {
            report,
            notifications,
            submitted,
            unknown_results,
            ..
        } = engine;
        cycle.report = report;
        cycle.unknown_results = unknown_results;

        let committed = match self.fault.take() {
            Some(CycleFault::AbortBeforeCommit) => {
                drop(txn);
                Err(SyncError::BadCompletion("cycle aborted by fault injection".into()))
            }
            Some(CycleFault::TornCommit(keep)) => {
                self.store.tear_next_commit(keep);
                self.store.commit(txn).map_err(SyncError::from)
            }
            None => self.store.commit(txn).map_err(SyncError::from),
        };
        match committed {
            Ok(wrote) => cycle.journal_written = wrote,
            Err(e) => {
                self.rollback_provisioner(&submitted);
                return Err(e);
            }
        }
        cycle.notifications = self.deliver(&notifications);
        cycle.gridmap_written = self.write_gridmap()?;
        Ok(cycle)
    }

    fn rollback_provisioner(&mut self, submitted: &[ProvisionId]) {
        self.provisioner.cancel(submitted);
        let outstanding: Vec<ProvisionRequest> = self.store.state().outstanding().cloned().collect();
        self.provisioner.recover(&outstanding);
    }

    fn deliver(&mut self, notifications: &[Notification]) -> usize {
        let mut n = 0;
        for note in notifications {
            match self.sink.deliver(note) {
                Ok(()) => n += 1,
                Err(e) => tracing::error!(error = %e, subject = %note.subject, "notification not delivered"),
            }
        }
        n
    }

    /// Runs `f` in a transaction with a reconcile pass afterwards, then
    /// commits and delivers notifications.
    fn admin_txn<R>(
        &mut self,
        f: impl FnOnce(&mut Engine<'_>) -> Result<R, SyncError>,
    ) -> Result<R, SyncError> {
        let policy = self.effective_policy();
        let mut txn = self.store.begin()?;
        let mut engine = Engine::new(&mut txn, &policy, self.provisioner.as_mut(), &self.options);
        let out = f(&mut engine)?;
        engine.policy_refresh();
        engine.reconcile()?;
        let notifications = std::mem::take(&mut engine.notifications);
        let submitted = std::mem::take(&mut engine.submitted);
        drop(engine);
        if let Err(e) = self.store.commit(txn) {
            self.rollback_provisioner(&submitted);
            return Err(e.into());
        }
        self.deliver(&notifications);
        self.write_gridmap()?;
        Ok(out)
    }

    /// Closes a pending request and carries out what it asked for.
    pub fn complete(&mut self, id: &RequestId, how: Completion) -> Result<PendingRequest, SyncError> {
        self.admin_txn(|e| e.complete(id, how))
    }

    /// Maps `role` to `group` for this site. An open request to create a
    /// group for the role is closed as done.
    pub fn register_group(&mut self, role: RoleName, group: &str) -> Result<(), SyncError> {
        self.admin_txn(|e| {
            let open: Vec<RequestId> = e
                .txn
                .state()
                .open_requests()
                .filter(|r| matches!(&r.kind, RequestKind::CreateGroup { role: r } if *r == role))
                .map(|r| r.id.clone())
                .collect();
            for id in open {
                e.txn
                    .close_request(&id, RequestStatus::Done, Some(format!("registered as group {group}")))?;
            }
            e.txn.register_group(role, group)?;
            Ok(())
        })
    }

    /// Operator override: lifts a site ban. A banned user that still holds
    /// an account comes back Disabled, one without comes back Held; the
    /// next reconcile re-admits either if policy allows.
    pub fn unban(&mut self, dn: &DistinguishedName) -> Result<usize, SyncError> {
        if self.policy.banned_dns.contains(dn) {
            return Err(SyncError::BannedByPolicy(dn.clone()));
        }
        let dn = dn.clone();
        self.admin_txn(move |e| {
            let states: Vec<SiteUserState> = e
                .txn
                .state()
                .states_of(&dn)
                .filter(|s| s.status == UserStatus::Banned)
                .cloned()
                .collect();
            if states.is_empty() {
                return Err(SyncError::NotBanned(dn.clone()));
            }
            for mut s in states.iter().cloned() {
                if s.local_account.is_some() {
                    s.status = UserStatus::Disabled;
                } else {
                    s.status = UserStatus::Held;
                    s.hold = Some(HoldCause::Released);
                }
                e.txn.force_state(s, "operator-unban")?;
            }
            Ok(states.len())
        })
    }

    /// Returns a banned user's account to the pool.
    pub fn release(&mut self, account: &str) -> Result<DistinguishedName, SyncError> {
        let mut txn = self.store.begin()?;
        let holder = txn.release_account(account)?;
        self.store.commit(txn)?;
        Ok(holder)
    }

    /// Re-sends a notification for every open request. Returns how many.
    pub fn remind_open_requests(&mut self) -> usize {
        let to = self.options.admin_email.clone();
        let notes: Vec<Notification> = self
            .store
            .state()
            .open_requests()
            .map(|r| Notification::for_request(&to, r))
            .collect();
        self.deliver(&notes)
    }
}

/// Per-transaction reconciliation logic.
struct Engine<'a> {
    txn: &'a mut Txn,
    policy: SitePolicy,
    base_policy: &'a SitePolicy,
    provisioner: &'a mut dyn Provisioner,
    options: &'a SiteOptions,
    report: SyncReport,
    notifications: Vec<Notification>,
    submitted: Vec<ProvisionId>,
    failed_this_cycle: HashSet<(String, DistinguishedName)>,
    unknown_results: usize,
    /// DN → number of its states that are Active and still in their VO.
    live: HashMap<DistinguishedName, usize>,
}

fn is_live(s: &SiteUserState) -> bool {
    s.status == UserStatus::Active && s.in_vo
}

impl<'a> Engine<'a> {
    fn new(
        txn: &'a mut Txn,
        policy: &'a SitePolicy,
        provisioner: &'a mut dyn Provisioner,
        options: &'a SiteOptions,
    ) -> Self {
        let mut live = HashMap::new();
        for s in txn.state().states().filter(|s| is_live(s)) {
            *live.entry(s.dn.clone()).or_insert(0) += 1;
        }
        Self {
            txn,
            policy: policy.clone(),
            base_policy: policy,
            provisioner,
            options,
            report: SyncReport::default(),
            notifications: Vec::new(),
            submitted: Vec::new(),
            failed_this_cycle: HashSet::new(),
            unknown_results: 0,
            live,
        }
    }

    /// Picks up groups registered inside this transaction.
    fn policy_refresh(&mut self) {
        self.policy = self
            .base_policy
            .with_registered_groups(self.txn.state().registered_groups());
    }

    fn put(&mut self, s: SiteUserState, cause: &str) -> Result<(), SyncError> {
        let was = self.txn.state().get(&s.source_vo, &s.dn).map(is_live).unwrap_or(false);
        let now = is_live(&s);
        let dn = s.dn.clone();
        self.txn.upsert_state(s, cause)?;
        if was != now {
            let n = self.live.entry(dn.clone()).or_insert(0);
            if now {
                *n += 1;
            } else {
                *n = n.saturating_sub(1);
                if *n == 0 {
                    self.live.remove(&dn);
                }
            }
        }
        Ok(())
    }

    fn live_elsewhere(&self, s: &SiteUserState) -> bool {
        let n = self.live.get(&s.dn).copied().unwrap_or(0);
        n > usize::from(is_live(s))
    }

    fn raise(&mut self, kind: RequestKind) {
        if let Raised::New(req) = self.txn.raise(kind) {
            self.report.requests += 1;
            self.notifications
                .push(Notification::for_request(&self.options.admin_email, &req));
        }
    }

    fn submit(&mut self, s: &mut SiteUserState, kind: ProvisionKind) {
        let req = self.txn.new_provision(&s.source_vo, &s.dn, kind);
        s.pending = Some(req.id.clone());
        self.submitted.push(req.id.clone());
        self.report.submitted += 1;
        if self.provisioner.submit(&req) == Dispatch::NeedsReview {
            self.raise(RequestKind::ReviewAccount {
                vo: s.source_vo.clone(),
                dn: s.dn.clone(),
                action: ReviewAction::Provision {
                    request: req.id,
                    kind,
                },
            });
        }
    }

    fn hold_cause(&self, record: &ProjectedRecord, reason: String) -> HoldCause {
        let (_, missing) = roles_to_groups(&record.role_set(), &self.policy);
        if self.policy.hold_unknown_roles && !missing.is_empty() {
            HoldCause::UnknownRoles { roles: missing }
        } else {
            HoldCause::Policy { reason }
        }
    }

    fn apply(&mut self, vo: &str, diff: SyncDiff) -> Result<(), SyncError> {
        for record in diff.added {
            self.report.added += 1;
            if let Some(existing) = self.txn.state().get(vo, &record.dn) {
                let mut s = existing.clone();
                s.in_vo = true;
                s.snapshot = record;
                self.put(s, "vo-added")?;
                continue;
            }
            let now = self.txn.now();
            let mut s = SiteUserState {
                dn: record.dn.clone(),
                source_vo: vo.to_string(),
                status: UserStatus::PendingCreate,
                local_account: None,
                groups: BTreeSet::new(),
                first_seen: now,
                last_updated: now,
                snapshot: record,
                in_vo: true,
                hold: None,
                pending: None,
            };
            match evaluate(&s.snapshot, &self.policy) {
                Decision::Admit => self.submit(&mut s, ProvisionKind::Create),
                Decision::Ban => {
                    s.status = UserStatus::Banned;
                    self.report.banned += 1;
                }
                Decision::Hold(reason) => {
                    s.status = UserStatus::Held;
                    s.hold = Some(self.hold_cause(&s.snapshot, reason));
                    self.report.held += 1;
                }
            }
            self.put(s, "vo-added")?;
        }
        for (_, record) in diff.changed {
            self.report.changed += 1;
            if let Some(existing) = self.txn.state().get(vo, &record.dn) {
                let mut s = existing.clone();
                s.snapshot = record;
                self.put(s, "vo-changed")?;
            }
        }
        for dn in diff.departed {
            self.report.departed += 1;
            if let Some(existing) = self.txn.state().get(vo, &dn) {
                let mut s = existing.clone();
                s.in_vo = false;
                self.put(s, "vo-removed")?;
            }
        }
        Ok(())
    }

    /// Drives every state toward what policy and VO membership say it
    /// should be. Running it twice in a row changes nothing the second
    /// time.
    fn reconcile(&mut self) -> Result<(), SyncError> {
        let keys: Vec<(String, DistinguishedName)> = self.txn.state().states().map(|s| s.key()).collect();
        for key in keys {
            self.reconcile_one(&key)?;
        }
        Ok(())
    }

    fn reconcile_one(&mut self, key: &(String, DistinguishedName)) -> Result<(), SyncError> {
        let Some(current) = self.txn.state().get(&key.0, &key.1) else {
            return Ok(());
        };
        if current.status == UserStatus::Banned {
            return Ok(());
        }
        let mut s = current.clone();
        let decision = evaluate(&s.snapshot, &self.policy);
        let quiet = self.failed_this_cycle.contains(key);

        if decision == Decision::Ban {
            let was_active = s.status == UserStatus::Active;
            s.status = UserStatus::Banned;
            s.groups.clear();
            s.hold = None;
            if was_active && s.pending.is_none() {
                self.submit(&mut s, ProvisionKind::Disable);
            }
            self.report.banned += 1;
            return self.put(s, "policy-ban");
        }

        if s.in_vo {
            let (_, missing) = roles_to_groups(&s.snapshot.role_set(), &self.policy);
            for role in missing {
                self.raise(RequestKind::CreateGroup { role });
            }
        }

        let mut cause = "reconcile";
        match (s.status, s.in_vo) {
            (UserStatus::Active, false) if s.pending.is_none() && !quiet => {
                if self.live_elsewhere(&s) {
                    s.status = UserStatus::Disabled;
                    self.report.disabled += 1;
                    cause = "vo-removed";
                } else {
                    self.submit(&mut s, ProvisionKind::Disable);
                }
            }
            (UserStatus::Held, true) if s.hold.as_ref().is_some_and(HoldCause::auto_release) => match decision {
                Decision::Admit => {
                    s.status = UserStatus::PendingCreate;
                    s.hold = None;
                    cause = "hold-released";
                    self.submit(&mut s, ProvisionKind::Create);
                }
                Decision::Hold(reason) => {
                    s.hold = Some(self.hold_cause(&s.snapshot, reason));
                }
                Decision::Ban => unreachable!("handled above"),
            },
            (UserStatus::Disabled, true) if s.pending.is_none() && !quiet && decision == Decision::Admit => {
                if s.local_account.is_some() && self.live.contains_key(&s.dn) {
                    s.status = UserStatus::Active;
                    self.report.activated += 1;
                    cause = "vo-added";
                } else {
                    self.submit(&mut s, ProvisionKind::Reenable);
                }
            }
            _ => {}
        }

        let desired = match s.status {
            UserStatus::PendingCreate | UserStatus::Active => roles_to_groups(&s.snapshot.role_set(), &self.policy).0,
            _ => BTreeSet::new(),
        };
        if self.options.auto_approve {
            s.groups = desired;
        } else if s.groups != desired {
            for group in desired.difference(&s.groups) {
                self.raise(RequestKind::AddToGroup {
                    vo: s.source_vo.clone(),
                    dn: s.dn.clone(),
                    group: group.clone(),
                });
            }
            for group in s.groups.difference(&desired) {
                self.raise(RequestKind::RemoveFromGroup {
                    vo: s.source_vo.clone(),
                    dn: s.dn.clone(),
                    group: group.clone(),
                });
            }
        }
        self.put(s, cause)
    }

    /// Collects due provisioning results and reconciles after each batch,
    /// until the backend has nothing more to report.
    fn drain(&mut self) -> Result<(), SyncError> {
        loop {
            let results = self.provisioner.poll();
            if results.is_empty() {
                return Ok(());
            }
            for r in results {
                match self.on_result(r) {
                    Ok(()) => {}
                    Err(SyncError::UnknownRequestId(id)) => {
                        tracing::warn!(id = %id, "result for unknown provisioning request");
                        self.unknown_results += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            self.reconcile()?;
        }
    }

    fn on_result(&mut self, result: ProvisionResult) -> Result<(), SyncError> {
        if self.txn.state().is_settled(&result.id) {
            return Ok(());
        }
        let req = self
            .txn
            .state()
            .outstanding_request(&result.id)
            .cloned()
            .ok_or_else(|| SyncError::UnknownRequestId(result.id.clone()))?;
        self.txn.settle(&req.id);
        self.report.results += 1;
        let Some(current) = self.txn.state().get(&req.vo, &req.dn) else {
            return Ok(());
        };
        let mut s = current.clone();
        if s.pending.as_ref() == Some(&req.id) {
            s.pending = None;
        }
        let mut cause = "provision-result";
        match (req.kind, result.outcome) {
            (ProvisionKind::Create, ProvisionOutcome::Success { account }) => {
                if s.status == UserStatus::PendingCreate {
                    let bound = match account {
                        Some(a) => self.txn.bind_account(&s.dn, &a).map(|_| a),
                        None => self.txn.allocate_account(&s.dn),
                    };
                    match bound {
                        Ok(a) => {
                            s.local_account = Some(a);
                            s.status = UserStatus::Active;
                            self.report.activated += 1;
                            cause = "provision-success";
                        }
                        Err(e @ (StoreError::PoolExhausted | StoreError::NotAPoolAccount(_))) => {
                            self.hold_for_review(&mut s, e.to_string());
                            cause = "provision-failure";
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            (ProvisionKind::Create, ProvisionOutcome::Failure { reason }) => {
                self.report.failures += 1;
                if s.status == UserStatus::PendingCreate {
                    self.hold_for_review(&mut s, reason);
                    cause = "provision-failure";
                }
            }
            (ProvisionKind::Disable, ProvisionOutcome::Success { .. }) => {
                if s.status == UserStatus::Active {
                    s.status = UserStatus::Disabled;
                    self.report.disabled += 1;
                    cause = "vo-removed";
                }
            }
            (ProvisionKind::Reenable, ProvisionOutcome::Success { .. }) => {
                if s.status == UserStatus::Disabled {
                    if s.local_account.is_none() {
                        s.local_account = Some(self.txn.allocate_account(&s.dn)?);
                    }
                    s.status = UserStatus::Active;
                    self.report.activated += 1;
                    cause = "provision-reenabled";
                }
            }
            (kind, ProvisionOutcome::Failure { reason }) => {
                self.report.failures += 1;
                self.failed_this_cycle.insert(s.key());
                self.raise(RequestKind::ReviewAccount {
                    vo: s.source_vo.clone(),
                    dn: s.dn.clone(),
                    action: ReviewAction::Held {
                        reason: format!("{kind:?} failed: {reason}"),
                    },
                });
            }
        }
        if s.status == UserStatus::Banned && s.local_account.is_some() && s.pending.is_none() && req.kind != ProvisionKind::Disable {
            self.submit(&mut s, ProvisionKind::Disable);
        }
        self.put(s, cause)
    }

    fn hold_for_review(&mut self, s: &mut SiteUserState, reason: String) {
        s.status = UserStatus::Held;
        s.hold = Some(HoldCause::Provisioning { reason: reason.clone() });
        self.report.held += 1;
        self.failed_this_cycle.insert(s.key());
        self.raise(RequestKind::ReviewAccount {
            vo: s.source_vo.clone(),
            dn: s.dn.clone(),
            action: ReviewAction::Held { reason },
        });
    }

    fn complete(&mut self, id: &RequestId, how: Completion) -> Result<PendingRequest, SyncError> {
        let status = if how.rejected {
            RequestStatus::Rejected
        } else {
            RequestStatus::Done
        };
        let request = self
            .txn
            .state()
            .request(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownRequest(id.clone()))?;
        if request.status != RequestStatus::Open {
            return Err(StoreError::AlreadyClosed(id.clone()).into());
        }
        match (&request.kind, how.rejected) {
            (RequestKind::CreateGroup { role }, false) => {
                let group = how.group.clone().unwrap_or_else(|| role.as_str().to_string());
                self.txn.register_group(role.clone(), &group)?;
                self.policy_refresh();
            }
            (RequestKind::AddToGroup { vo, dn, group }, false) => {
                if let Some(s) = self.txn.state().get(vo, dn) {
                    if s.status != UserStatus::Banned {
                        let mut s = s.clone();
                        s.groups.insert(group.clone());
                        self.put(s, "group-added")?;
                    }
                }
            }
            (RequestKind::RemoveFromGroup { vo, dn, group }, false) => {
                if let Some(s) = self.txn.state().get(vo, dn) {
                    let mut s = s.clone();
                    s.groups.remove(group);
                    self.put(s, "group-removed")?;
                }
            }
            (RequestKind::ReviewAccount { vo, dn, action }, rejected) => match action {
                ReviewAction::Provision { request, .. } => {
                    let outcome = if rejected {
                        ProvisionOutcome::Failure {
                            reason: how.note.clone().unwrap_or_else(|| "rejected by administrator".into()),
                        }
                    } else {
                        ProvisionOutcome::Success {
                            account: how.account.clone(),
                        }
                    };
                    self.on_result(ProvisionResult {
                        id: request.clone(),
                        outcome,
                    })?;
                }
                ReviewAction::Held { .. } if !rejected => {
                    if let Some(s) = self.txn.state().get(vo, dn) {
                        if s.status == UserStatus::Held {
                            let mut s = s.clone();
                            s.hold = Some(HoldCause::Released);
                            self.put(s, "hold-released")?;
                        }
                    }
                }
                ReviewAction::Held { .. } => {}
            },
            (_, true) => {}
        }
        Ok(self.txn.close_request(id, status, how.note)?)
    }
}

/// Per-VO Active sets, for tests and reports.
pub fn active_by_vo(store: &LocalStore) -> BTreeMap<String, BTreeSet<DistinguishedName>> {
    let mut out: BTreeMap<String, BTreeSet<DistinguishedName>> = BTreeMap::new();
    for s in store.state().states().filter(|s| s.status == UserStatus::Active) {
        out.entry(s.source_vo.clone()).or_default().insert(s.dn.clone());
    }
    out
}
