//! Command implementations behind the `gums`, `vo-admin` and `feedup`
//! binaries. Every command runs in-process and returns a
//! [`CommandOutcome`]; the binaries only print it and exit.

use std::ffi::OsString;
use std::path::Path;

use anyhow::Context;
use gums_core::domain::DistinguishedName;
use gums_core::transport::Credential;

pub mod config;
pub mod feedup;
pub mod gums;
pub mod vo_admin;

/// Exit status plus captured output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandOutcome {
    /// 0 success, 1 operational failure, 2 usage error.
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CommandOutcome {
    pub fn ok(stdout: impl Into<String>) -> Self {
        Self {
            code: 0,
            stdout: stdout.into(),
            stderr: String::new(),
        }
    }

    pub fn failure(message: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            stdout: String::new(),
            stderr: format!("error: {message}\n"),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            stdout: String::new(),
            stderr: message.into(),
        }
    }

    /// Prints the captured output and returns the exit code.
    pub fn emit(self) -> i32 {
        use std::io::Write;
        let _ = std::io::stdout().write_all(self.stdout.as_bytes());
        let _ = std::io::stderr().write_all(self.stderr.as_bytes());
        self.code
    }
}

impl From<anyhow::Result<String>> for CommandOutcome {
    fn from(r: anyhow::Result<String>) -> Self {
        match r {
            Ok(out) => CommandOutcome::ok(out),
            Err(e) => CommandOutcome::failure(format!("{e:#}")),
        }
    }
}

/// Parses arguments with clap, turning help into success and every other
/// parse error into a usage error.
pub(crate) fn parse_args<P, I, T>(args: I) -> Result<P, CommandOutcome>
where
    P: clap::Parser,
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    P::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CommandOutcome::ok(e.to_string())
        }
        _ => CommandOutcome::usage(e.to_string()),
    })
}

pub fn parse_dn(raw: &str) -> Result<DistinguishedName, String> {
    DistinguishedName::parse(raw).map_err(|e| e.to_string())
}

/// Reads a TOML credential file: `dn`, `fingerprint` and `[[trust]]`
/// entries with `dn` and `fingerprint`.
pub fn load_credential(path: &Path) -> anyhow::Result<Credential> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading credential {}", path.display()))?;
    let cred: Credential = toml::from_str(&text).with_context(|| format!("parsing credential {}", path.display()))?;
    cred.check()
        .map_err(|e| anyhow::anyhow!("credential {}: {e}", path.display()))?;
    Ok(cred)
}

pub fn save_credential(cred: &Credential, path: &Path) -> anyhow::Result<()> {
    let text = toml::to_string(cred).context("serializing credential")?;
    std::fs::write(path, text).with_context(|| format!("writing credential {}", path.display()))
}

/// Installs a stderr log subscriber honoring `RUST_LOG`.
pub fn init_logging() {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .try_init();
}
