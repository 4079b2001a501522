//! Mutually authenticated message transport.
//!
//! Peers prove identity by presenting a `(dn, fingerprint)` pair that must
//! appear in the other side's trust map. The same channel type runs over an
//! in-process queue or a TCP stream; on TCP every message is framed as a
//! 4-byte big-endian length followed by the UTF-8 payload.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DistinguishedName, PeerIdentity};

/// Frames larger than this are refused.
pub const MAX_FRAME: usize = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown peer {0}")]
    UnknownPeer(DistinguishedName),
    #[error("fingerprint mismatch for {0}")]
    FingerprintMismatch(DistinguishedName),
    #[error("channel closed")]
    Closed,
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
    #[error("handshake protocol error: {0}")]
    Protocol(String),
    #[error("peer rejected handshake: {0}")]
    Rejected(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TransportError {
    pub fn is_auth_failure(&self) -> bool {
        matches!(
            self,
            TransportError::UnknownPeer(_)
                | TransportError::FingerprintMismatch(_)
                | TransportError::Rejected(_)
        )
    }
}

#[derive(Debug, Error)]
#[error("credential for {0} trusts itself under a different fingerprint")]
pub struct InconsistentCredential(pub DistinguishedName);

/// A party's own identity plus the identities it trusts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    #[serde(rename = "dn")]
    self_dn: DistinguishedName,
    #[serde(rename = "fingerprint")]
    secret_fingerprint: String,
    #[serde(rename = "trust", default, with = "trust_list")]
    trusted: BTreeMap<DistinguishedName, String>,
}

mod trust_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        dn: DistinguishedName,
        fingerprint: String,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<DistinguishedName, String>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = map
            .iter()
            .map(|(dn, fp)| Entry {
                dn: dn.clone(),
                fingerprint: fp.clone(),
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<DistinguishedName, String>, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v.into_iter().map(|e| (e.dn, e.fingerprint)).collect())
    }
}

impl Credential {
    pub fn new(self_dn: DistinguishedName, secret_fingerprint: impl Into<String>) -> Self {
        Self {
            self_dn,
            secret_fingerprint: secret_fingerprint.into(),
            trusted: BTreeMap::new(),
        }
    }

    pub fn trust(&mut self, dn: DistinguishedName, fingerprint: impl Into<String>) -> Result<(), InconsistentCredential> {
        let fingerprint = fingerprint.into();
        if dn == self.self_dn && fingerprint != self.secret_fingerprint {
            return Err(InconsistentCredential(dn));
        }
        self.trusted.insert(dn, fingerprint);
        Ok(())
    }

    pub fn untrust(&mut self, dn: &DistinguishedName) {
        self.trusted.remove(dn);
    }

    pub fn check(&self) -> Result<(), InconsistentCredential> {
        match self.trusted.get(&self.self_dn) {
            Some(fp) if *fp != self.secret_fingerprint => Err(InconsistentCredential(self.self_dn.clone())),
            _ => Ok(()),
        }
    }

    pub fn dn(&self) -> &DistinguishedName {
        &self.self_dn
    }

    pub fn identity(&self) -> PeerIdentity {
        PeerIdentity::new(self.self_dn.clone(), self.secret_fingerprint.clone())
    }

    pub fn trusted(&self) -> impl Iterator<Item = (&DistinguishedName, &str)> {
        self.trusted.iter().map(|(d, f)| (d, f.as_str()))
    }

    /// Accepts `peer` iff its pair is in the trust map.
    pub fn verify(&self, peer: &PeerIdentity) -> Result<(), TransportError> {
        match self.trusted.get(peer.dn()) {
            None => Err(TransportError::UnknownPeer(peer.dn().clone())),
            Some(fp) if fp != peer.fingerprint() => {
                Err(TransportError::FingerprintMismatch(peer.dn().clone()))
            }
            Some(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub bytes: Vec<u8>,
    pub at: DateTime<Utc>,
}

enum Link {
    Memory {
        tx: Option<Sender<Vec<u8>>>,
        rx: Receiver<Vec<u8>>,
    },
    Tcp(TcpStream),
}

/// One endpoint of an authenticated connection.
///
/// Every message sent or received is appended to the transcript, which is
/// never truncated.
pub struct AuthenticatedChannel {
    local: PeerIdentity,
    remote: PeerIdentity,
    transcript: Vec<TranscriptEntry>,
    link: Link,
}

impl std::fmt::Debug for AuthenticatedChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthenticatedChannel")
            .field("local", &self.local.dn())
            .field("remote", &self.remote.dn())
            .field("messages", &self.transcript.len())
            .finish()
    }
}

impl AuthenticatedChannel {
    pub fn local_identity(&self) -> &PeerIdentity {
        &self.local
    }

    pub fn remote_identity(&self) -> &PeerIdentity {
        &self.remote
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn send(&mut self, msg: &[u8]) -> Result<(), TransportError> {
        if msg.len() > MAX_FRAME {
            return Err(TransportError::FrameTooLarge(msg.len()));
        }
        match &mut self.link {
            Link::Memory { tx, .. } => {
                let tx = tx.as_ref().ok_or(TransportError::Closed)?;
                tx.send(msg.to_vec()).map_err(|_| TransportError::Closed)?;
            }
            Link::Tcp(stream) => write_frame(stream, msg)?,
        }
        self.transcript.push(TranscriptEntry {
            direction: Direction::Sent,
            bytes: msg.to_vec(),
            at: Utc::now(),
        });
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        let msg = match &mut self.link {
            Link::Memory { rx, .. } => rx.recv().map_err(|_| TransportError::Closed)?,
            Link::Tcp(stream) => read_frame(stream)?.ok_or(TransportError::Closed)?,
        };
        self.transcript.push(TranscriptEntry {
            direction: Direction::Received,
            bytes: msg.clone(),
            at: Utc::now(),
        });
        Ok(msg)
    }

    pub fn send_str(&mut self, msg: &str) -> Result<(), TransportError> {
        self.send(msg.as_bytes())
    }

    pub fn recv_string(&mut self) -> Result<String, TransportError> {
        let bytes = self.recv()?;
        String::from_utf8(bytes).map_err(|e| TransportError::Protocol(e.to_string()))
    }

    /// Shuts down the sending half; the peer's pending `recv` returns
    /// `Closed` once queued messages are drained.
    pub fn close(&mut self) {
        match &mut self.link {
            Link::Memory { tx, .. } => {
                tx.take();
            }
            Link::Tcp(stream) => {
                let _ = stream.shutdown(std::net::Shutdown::Write);
            }
        }
    }
}

/// In-process mutual authentication. On success returns the client and
/// server endpoints of a connected channel pair.
pub fn handshake(
    client: &Credential,
    server: &Credential,
) -> Result<(AuthenticatedChannel, AuthenticatedChannel), TransportError> {
    let client_id = client.identity();
    let server_id = server.identity();
    server.verify(&client_id)?;
    client.verify(&server_id)?;
    let (to_server, server_rx) = channel();
    let (to_client, client_rx) = channel();
    let c = AuthenticatedChannel {
        local: client_id.clone(),
        remote: server_id.clone(),
        transcript: Vec::new(),
        link: Link::Memory {
            tx: Some(to_server),
            rx: client_rx,
        },
    };
    let s = AuthenticatedChannel {
        local: server_id,
        remote: client_id,
        transcript: Vec::new(),
        link: Link::Memory {
            tx: Some(to_client),
            rx: server_rx,
        },
    };
    Ok((c, s))
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on clean end of stream before a header.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, TransportError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(TransportError::Closed),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TransportError::Closed
        } else {
            e.into()
        }
    })?;
    Ok(Some(buf))
}

fn hello(cred: &Credential, insecure: bool) -> String {
    let id = cred.identity();
    if insecure {
        format!("HELLO insecure\ndn: {}\n", id.dn())
    } else {
        format!("HELLO\ndn: {}\nfingerprint: {}\n", id.dn(), id.fingerprint())
    }
}

struct Hello {
    identity: PeerIdentity,
    insecure: bool,
}

fn parse_hello(frame: &[u8]) -> Result<Hello, TransportError> {
    let text = std::str::from_utf8(frame).map_err(|e| TransportError::Protocol(e.to_string()))?;
    if let Some(reason) = text.strip_prefix("ERR ") {
        return Err(TransportError::Rejected(reason.trim().to_string()));
    }
    let mut lines = text.lines();
    let head = lines.next().unwrap_or_default();
    let insecure = match head {
        "HELLO" => false,
        "HELLO insecure" => true,
        other => return Err(TransportError::Protocol(format!("expected HELLO, got {other:?}"))),
    };
    let mut dn = None;
    let mut fp = None;
    for line in lines {
        if let Some(v) = line.strip_prefix("dn: ") {
            dn = Some(DistinguishedName::parse(v).map_err(|e| TransportError::Protocol(e.to_string()))?);
        } else if let Some(v) = line.strip_prefix("fingerprint: ") {
            fp = Some(v.to_string());
        }
    }
    let dn = dn.ok_or_else(|| TransportError::Protocol("HELLO without dn".into()))?;
    let fp = match (fp, insecure) {
        (Some(fp), false) => fp,
        (None, true) => "insecure".to_string(),
        _ => return Err(TransportError::Protocol("bad HELLO".into())),
    };
    Ok(Hello {
        identity: PeerIdentity::new(dn, fp),
        insecure,
    })
}

fn reject_code(e: &TransportError) -> &'static str {
    match e {
        TransportError::UnknownPeer(_) => "UnknownPeer",
        TransportError::FingerprintMismatch(_) => "FingerprintMismatch",
        _ => "Protocol",
    }
}

fn tcp_channel(local: PeerIdentity, remote: PeerIdentity, stream: TcpStream) -> AuthenticatedChannel {
    AuthenticatedChannel {
        local,
        remote,
        transcript: Vec::new(),
        link: Link::Tcp(stream),
    }
}

/// Client side of the TCP handshake.
///
/// The client sends `HELLO`; the server answers with its own `HELLO` (or
/// `ERR <code>`); the client then confirms with `OK` (or `ERR <code>`).
/// With `insecure` the client asserts its DN without a fingerprint and does
/// not verify the server; servers refuse this unless configured to allow it.
pub fn connect(
    addr: impl ToSocketAddrs,
    cred: &Credential,
    insecure: bool,
    timeout: Option<Duration>,
) -> Result<AuthenticatedChannel, TransportError> {
    let addrs: Vec<_> = addr.to_socket_addrs()?.collect();
    let mut last = io::Error::new(io::ErrorKind::NotFound, "no address");
    let mut stream = None;
    for a in addrs {
        let attempt = match timeout {
            Some(t) => TcpStream::connect_timeout(&a, t),
            None => TcpStream::connect(a),
        };
        match attempt {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last = e,
        }
    }
    let mut stream = stream.ok_or(last)?;
    stream.set_read_timeout(timeout)?;
    stream.set_nodelay(true)?;
    write_frame(&mut stream, hello(cred, insecure).as_bytes())?;
    let reply = read_frame(&mut stream)?.ok_or(TransportError::Closed)?;
    let server = parse_hello(&reply)?;
    if !insecure {
        if let Err(e) = cred.verify(&server.identity) {
            let _ = write_frame(&mut stream, format!("ERR {}", reject_code(&e)).as_bytes());
            return Err(e);
        }
    }
    write_frame(&mut stream, b"OK")?;
    Ok(tcp_channel(cred.identity(), server.identity, stream))
}

/// Server side of the TCP handshake.
pub fn accept(
    mut stream: TcpStream,
    cred: &Credential,
    allow_insecure: bool,
) -> Result<AuthenticatedChannel, TransportError> {
    stream.set_nodelay(true)?;
    let frame = read_frame(&mut stream)?.ok_or(TransportError::Closed)?;
    let client = parse_hello(&frame)?;
    let verdict = if client.insecure {
        if allow_insecure {
            Ok(())
        } else {
            Err(TransportError::Protocol("insecure mode disabled".into()))
        }
    } else {
        cred.verify(&client.identity)
    };
    if let Err(e) = verdict {
        let _ = write_frame(&mut stream, format!("ERR {}", reject_code(&e)).as_bytes());
        return Err(e);
    }
    write_frame(&mut stream, hello(cred, false).as_bytes())?;
    let confirm = read_frame(&mut stream)?.ok_or(TransportError::Closed)?;
    if confirm != b"OK" {
        let text = String::from_utf8_lossy(&confirm);
        return Err(TransportError::Rejected(
            text.strip_prefix("ERR ").unwrap_or(&text).to_string(),
        ));
    }
    Ok(tcp_channel(cred.identity(), client.identity, stream))
}
