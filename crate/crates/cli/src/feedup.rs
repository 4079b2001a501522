//! `feedup`: pushes a registration authority's changes to its parent VO.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;

use gums_core::feedup::{sync_up, sync_up_full, FeedUpState, SyncUpReport, TcpUpstream};
use gums_core::journal::atomic_write_bytes;
use gums_core::registry::RegistryNode;

use crate::config::{parse_projection, FeedupConfig};
use crate::{load_credential, parse_args, CommandOutcome};

const UPSTREAM_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Parser)]
#[command(name = "feedup", about = "Feed registrations up to the parent VO", version)]
pub struct Cli {
    #[arg(long, short, default_value = "feedup.toml")]
    pub config: PathBuf,
    /// Push once and exit.
    #[arg(long)]
    pub once: bool,
    /// Replay the whole change log, even below the parent's mark.
    #[arg(long)]
    pub full: bool,
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
    let result = FeedupConfig::load(&cli.config).and_then(|cfg| {
        if cli.once {
            push_once(&cfg, cli.full).map(|r| format!("pushed {} frames, acked through {}\n", r.frames_sent, r.acked_through))
        } else {
            daemon(&cfg, cli.full)
        }
    });
    result.into()
}

fn load_state(cfg: &FeedupConfig) -> anyhow::Result<FeedUpState> {
    let interval = Duration::from_secs(cfg.interval.seconds);
    match std::fs::read(&cfg.state) {
        Ok(bytes) => {
            let mut state: FeedUpState =
                serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", cfg.state.display()))?;
            state.interval = interval;
            Ok(state)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(FeedUpState::new(interval)),
        Err(e) => Err(e).with_context(|| format!("reading {}", cfg.state.display())),
    }
}

/// One push of everything past the saved mark. The mark is saved even
/// when the push fails part way.
pub fn push_once(cfg: &FeedupConfig, full: bool) -> anyhow::Result<SyncUpReport> {
    let credential = load_credential(&cfg.credential)?;
    let projection = parse_projection(&cfg.upstream.projection)?;
    let source = RegistryNode::load(&cfg.source)?;
    let mut state = load_state(cfg)?;
    let mut upstream = TcpUpstream::new(cfg.upstream.addr.clone(), credential, UPSTREAM_TIMEOUT);
    let result = if full {
        sync_up_full(&mut state, &source, &projection, &mut upstream)
    } else {
        sync_up(&mut state, &source, &projection, &mut upstream)
    };
    let bytes = serde_json::to_vec_pretty(&state)?;
    atomic_write_bytes(&cfg.state, &bytes).with_context(|| format!("writing {}", cfg.state.display()))?;
    Ok(result?)
}

fn daemon(cfg: &FeedupConfig, mut full: bool) -> anyhow::Result<String> {
    let interval = Duration::from_secs(cfg.interval.seconds);
    loop {
        match push_once(cfg, full) {
            Ok(r) if r.frames_sent > 0 => tracing::info!(frames = r.frames_sent, acked = r.acked_through, "pushed"),
            Ok(_) => {}
            Err(e) => tracing::warn!(error = %format!("{e:#}"), "feed-up failed; retrying next interval"),
        }
        full = false;
        std::thread::sleep(interval);
    }
}
