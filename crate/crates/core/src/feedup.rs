//! Feed-up replication from a registration authority to its parent VO.
//!
//! Change-log entries newer than the last acknowledged sequence number are
//! pushed in order, each projected to the attributes the parent requires.
//! Removals travel as tombstones. The parent keeps a per-feeder high-water
//! mark, so retransmission after a failure is harmless.

use std::sync::RwLock;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::RecordBlock;
use crate::domain::{AttributeProjection, ProjectedRecord};
use crate::registry::{push_frame, serve_one, ChangeKind, ChangeLogEntry, RegistryNode};
use crate::transport::{connect, handshake, AuthenticatedChannel, Credential, TransportError};

/// Restricts `record` to `required` (which always contains `dn`).
pub fn project_record(record: &ProjectedRecord, required: &AttributeProjection) -> ProjectedRecord {
    record.project(required)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedUpState {
    pub last_acked_seq: u64,
    #[serde(default)]
    pub pending_since: Option<DateTime<Utc>>,
    #[serde(with = "secs")]
    pub interval: Duration,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}

impl FeedUpState {
    pub fn new(interval: Duration) -> Self {
        Self {
            last_acked_seq: 0,
            pending_since: None,
            interval,
        }
    }
}

#[derive(Debug, Error)]
pub enum FeedUpError {
    /// Transient; retry at the next interval.
    #[error("upstream unreachable: {0}")]
    Unreachable(String),
    /// The parent refused a change. Needs an operator.
    #[error("upstream rejected seq {seq}: {code}")]
    Rejected { seq: u64, code: String },
}

/// A request/response link to the parent VO.
pub trait UpstreamLink {
    fn exchange(&mut self, frame: &str) -> Result<String, FeedUpError>;
}

impl From<TransportError> for FeedUpError {
    fn from(e: TransportError) -> Self {
        FeedUpError::Unreachable(e.to_string())
    }
}

impl UpstreamLink for AuthenticatedChannel {
    fn exchange(&mut self, frame: &str) -> Result<String, FeedUpError> {
        self.send_str(frame)?;
        Ok(self.recv_string()?)
    }
}

/// Opens a fresh authenticated TCP connection per sync.
pub struct TcpUpstream {
    pub addr: String,
    pub credential: Credential,
    pub timeout: Duration,
    channel: Option<AuthenticatedChannel>,
}

impl TcpUpstream {
    pub fn new(addr: impl Into<String>, credential: Credential, timeout: Duration) -> Self {
        Self {
            addr: addr.into(),
            credential,
            timeout,
            channel: None,
        }
    }
}

impl UpstreamLink for TcpUpstream {
    fn exchange(&mut self, frame: &str) -> Result<String, FeedUpError> {
        if self.channel.is_none() {
            self.channel = Some(connect(
                self.addr.as_str(),
                &self.credential,
                false,
                Some(self.timeout),
            )?);
        }
        let ch = self.channel.as_mut().expect("channel just opened");
        let r = ch.exchange(frame);
        if r.is_err() {
            self.channel = None;
        }
        r
    }
}

/// Talks to an in-process parent node over an in-memory authenticated
/// channel.
pub struct MemoryUpstream<'a> {
    node: &'a RwLock<RegistryNode>,
    client: AuthenticatedChannel,
    server: AuthenticatedChannel,
}

impl<'a> MemoryUpstream<'a> {
    pub fn connect(
        node: &'a RwLock<RegistryNode>,
        client: &Credential,
        server: &Credential,
    ) -> Result<Self, TransportError> {
        let (client, server) = handshake(client, server)?;
        Ok(Self { node, client, server })
    }

    pub fn transcript(&self) -> &[crate::transport::TranscriptEntry] {
        self.client.transcript()
    }
}

impl UpstreamLink for MemoryUpstream<'_> {
    fn exchange(&mut self, frame: &str) -> Result<String, FeedUpError> {
        self.client.send_str(frame)?;
        serve_one(self.node, &mut self.server)?;
        Ok(self.client.recv_string()?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncUpReport {
    pub frames_sent: usize,
    pub acked_through: u64,
}

fn change_of(entry: &ChangeLogEntry, projection: &AttributeProjection) -> RecordBlock {
    match (&entry.kind, &entry.record) {
        (ChangeKind::Removed, _) | (_, None) => RecordBlock::Tombstone(entry.dn.clone()),
        (_, Some(r)) => RecordBlock::Record(project_record(r, projection)),
    }
}

/// Pushes every change after `state.last_acked_seq` to the parent.
///
/// The state advances entry by entry as ACKs arrive, so a failure part way
/// leaves it at the last acknowledged change.
pub fn sync_up(
    state: &mut FeedUpState,
    source: &RegistryNode,
    projection: &AttributeProjection,
    upstream: &mut dyn UpstreamLink,
) -> Result<SyncUpReport, FeedUpError> {
    push_entries(state, source.entries_after(state.last_acked_seq), projection, upstream, false)
}

/// Recovery path: replays the entire change log and forces the parent to
/// re-apply it even below its high-water mark.
pub fn sync_up_full(
    state: &mut FeedUpState,
    source: &RegistryNode,
    projection: &AttributeProjection,
    upstream: &mut dyn UpstreamLink,
) -> Result<SyncUpReport, FeedUpError> {
    push_entries(state, source.log(), projection, upstream, true)
}

fn push_entries(
    state: &mut FeedUpState,
    entries: &[ChangeLogEntry],
    projection: &AttributeProjection,
    upstream: &mut dyn UpstreamLink,
    full: bool,
) -> Result<SyncUpReport, FeedUpError> {
    let mut report = SyncUpReport {
        frames_sent: 0,
        acked_through: state.last_acked_seq,
    };
    if entries.is_empty() {
        state.pending_since = None;
        return Ok(report);
    }
    if state.pending_since.is_none() {
        state.pending_since = Some(Utc::now());
    }
    for entry in entries {
        let frame = push_frame(entry.seq, &change_of(entry, projection), full);
        report.frames_sent += 1;
        let reply = upstream.exchange(&frame)?;
        let reply = reply.trim_end();
        if let Some(code) = reply.strip_prefix("ERR ") {
            return Err(FeedUpError::Rejected {
                seq: entry.seq,
                code: code.to_string(),
            });
        }
        let acked = reply
            .strip_prefix("ACK seq=")
            .and_then(|n| n.parse::<u64>().ok())
            .ok_or_else(|| FeedUpError::Unreachable(format!("unexpected reply {reply:?}")))?;
        if acked != entry.seq {
            return Err(FeedUpError::Unreachable(format!(
                "ACK for seq {acked}, expected {}",
                entry.seq
            )));
        }
        state.last_acked_seq = state.last_acked_seq.max(acked);
        report.acked_through = state.last_acked_seq;
    }
    state.pending_since = None;
    Ok(report)
}
