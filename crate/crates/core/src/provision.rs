//! Asynchronous account provisioning.
//!
//! A request is submitted and its result collected later, possibly after a
//! restart. Requests and results correlate by [`ProvisionId`].

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::domain::DistinguishedName;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProvisionId(pub String);

impl ProvisionId {
    pub fn from_counter(n: u64) -> Self {
        Self(format!("prov-{n:06}"))
    }
}

impl fmt::Display for ProvisionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProvisionKind {
    Create,
    Disable,
    Reenable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionRequest {
    pub id: ProvisionId,
    pub vo: String,
    pub dn: DistinguishedName,
    pub kind: ProvisionKind,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum ProvisionOutcome {
    /// `account` is `None` when the site should take one from its pool.
    Success { account: Option<String> },
    Failure { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionResult {
    pub id: ProvisionId,
    pub outcome: ProvisionOutcome,
}

impl ProvisionResult {
    pub fn success(id: ProvisionId) -> Self {
        Self {
            id,
            outcome: ProvisionOutcome::Success { account: None },
        }
    }

    pub fn failure(id: ProvisionId, reason: impl Into<String>) -> Self {
        Self {
            id,
            outcome: ProvisionOutcome::Failure { reason: reason.into() },
        }
    }
}

/// What the backend did with a submitted request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dispatch {
    /// A result will show up in a later [`Provisioner::poll`].
    Async,
    /// A human has to carry it out; the result comes from `gums complete`.
    NeedsReview,
}

pub trait Provisioner: Send {
    fn submit(&mut self, request: &ProvisionRequest) -> Dispatch;

    /// Marks the start of a daemon cycle.
    fn begin_cycle(&mut self) {}

    /// Results that are due now. Each is handed out once.
    fn poll(&mut self) -> Vec<ProvisionResult>;

    /// Re-adopts requests the store still considers outstanding, e.g. after
    /// a restart. Requests already known to the backend are left alone.
    fn recover(&mut self, outstanding: &[ProvisionRequest]);

    /// Forgets requests whose submission was never committed.
    fn cancel(&mut self, ids: &[ProvisionId]);
}

/// How long the automatic backend takes to answer.
#[derive(Debug)]
pub enum Latency {
    None,
    Millis(u64),
    /// Uniform in `0..=max` daemon cycles.
    RandomCycles { max: u32, rng: StdRng },
}

impl Latency {
    pub fn random_cycles(max: u32, seed: u64) -> Self {
        Latency::RandomCycles {
            max,
            rng: StdRng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Due {
    Cycle(u64),
    At(Instant),
}

type FailureHook = Box<dyn FnMut(&ProvisionRequest) -> Option<String> + Send>;

/// Completes every request by itself after some latency. Create results
/// carry no account name, so the site allocates from its pool.
pub struct AutoBackend {
    latency: Latency,
    cycle: u64,
    pending: BTreeMap<ProvisionId, (Due, ProvisionRequest)>,
    fail: Option<FailureHook>,
}

impl fmt::Debug for AutoBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AutoBackend")
            .field("latency", &self.latency)
            .field("cycle", &self.cycle)
            .field("pending", &self.pending.len())
            .finish()
    }
}

impl AutoBackend {
    pub fn new(latency: Latency) -> Self {
        Self {
            latency,
            cycle: 0,
            pending: BTreeMap::new(),
            fail: None,
        }
    }

    /// Requests for which `hook` returns a reason fail with it.
    pub fn with_failures(mut self, hook: impl FnMut(&ProvisionRequest) -> Option<String> + Send + 'static) -> Self {
        self.fail = Some(Box::new(hook));
        self
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn schedule(&mut self, request: &ProvisionRequest) {
        let due = match &mut self.latency {
            Latency::None => Due::Cycle(self.cycle),
            Latency::Millis(ms) => {
                let age = (Utc::now() - request.created_at).to_std().unwrap_or_default();
                Due::At(Instant::now() + Duration::from_millis(*ms).saturating_sub(age))
            }
            Latency::RandomCycles { max, rng } => Due::Cycle(self.cycle + u64::from(rng.gen_range(0..=*max))),
        };
        self.pending.insert(request.id.clone(), (due, request.clone()));
    }
}

impl Provisioner for AutoBackend {
    fn submit(&mut self, request: &ProvisionRequest) -> Dispatch {
        self.schedule(request);
        Dispatch::Async
    }

    fn begin_cycle(&mut self) {
        self.cycle += 1;
    }

    fn poll(&mut self) -> Vec<ProvisionResult> {
        let now = Instant::now();
        let cycle = self.cycle;
        let ready: Vec<ProvisionId> = self
            .pending
            .iter()
            .filter(|(_, (due, _))| match due {
                Due::Cycle(c) => *c <= cycle,
                Due::At(t) => *t <= now,
            })
            .map(|(id, _)| id.clone())
            .collect();
        let mut out = Vec::with_capacity(ready.len());
        for id in ready {
            let (_, request) = self.pending.remove(&id).expect("ready id is pending");
            let failure = self.fail.as_mut().and_then(|f| f(&request));
            out.push(match failure {
                Some(reason) => ProvisionResult::failure(id, reason),
                None => ProvisionResult::success(id),
            });
        }
        out
    }

    fn recover(&mut self, outstanding: &[ProvisionRequest]) {
        for r in outstanding {
            if !self.pending.contains_key(&r.id) {
                self.schedule(r);
            }
        }
    }

    fn cancel(&mut self, ids: &[ProvisionId]) {
        for id in ids {
            self.pending.remove(id);
        }
    }
}

/// Hands every request to the site administrator as a review request.
#[derive(Debug, Default)]
pub struct QueueBackend;

impl Provisioner for QueueBackend {
    fn submit(&mut self, _: &ProvisionRequest) -> Dispatch {
        Dispatch::NeedsReview
    }

    fn poll(&mut self) -> Vec<ProvisionResult> {
        Vec::new()
    }

    fn recover(&mut self, _: &[ProvisionRequest]) {}

    fn cancel(&mut self, _: &[ProvisionId]) {}
}
