//! TOML configuration for the three tools. Relative paths are resolved
//! against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use serde::Deserialize;

use gums_core::domain::{Attribute, AttributeProjection};
use gums_core::sync::VoEndpoint;

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn base_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

pub fn parse_projection(raw: &str) -> anyhow::Result<AttributeProjection> {
    let p = AttributeProjection::parse(raw)?;
    if !raw.split(',').any(|a| a.trim() == Attribute::Dn.name()) {
        bail!("projection {raw:?} must include dn");
    }
    Ok(p)
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct StoreSection {
    pub dir: PathBuf,
}

impl Default for StoreSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("gums-db"),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct IntervalSection {
    pub seconds: u64,
}

impl Default for IntervalSection {
    fn default() -> Self {
        Self { seconds: 600 }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PoolSection {
    pub prefix: String,
    pub start: u32,
    pub end: u32,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self {
            prefix: "grid".into(),
            start: 1,
            end: 99,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct FileSection {
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct GridmapSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Auto,
    Queue,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ProvisionSection {
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct AdminSection {
    pub email: String,
}

impl Default for AdminSection {
    fn default() -> Self {
        Self {
            email: "root@localhost".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct VoEntry {
    pub addr: String,
    pub path: String,
    pub projection: String,
}

/// `gums` site configuration.
#[derive(Debug, Clone, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SiteConfig {
    #[serde(default)]
    pub store: StoreSection,
    #[serde(default)]
    pub interval: IntervalSection,
    #[serde(default)]
    pub auto_approve: bool,
    pub credential: Option<PathBuf>,
    #[serde(default)]
    pub admin: AdminSection,
    #[serde(default, rename = "vo")]
    pub vos: Vec<VoEntry>,
    #[serde(default)]
    pub pool: PoolSection,
    #[serde(default)]
    pub policy: FileSection,
    #[serde(default)]
    pub notify: FileSection,
    #[serde(default)]
    pub gridmap: GridmapSection,
    #[serde(default)]
    pub provision: ProvisionSection,
}

impl SiteConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut cfg: SiteConfig = read_toml(path)?;
        let base = base_dir(path);
        resolve(&base, &mut cfg.store.dir);
        resolve_opt(&base, &mut cfg.credential);
        resolve_opt(&base, &mut cfg.policy.file);
        resolve_opt(&base, &mut cfg.notify.file);
        resolve_opt(&base, &mut cfg.gridmap.path);
        if cfg.pool.start > cfg.pool.end {
            bail!("pool start {} is after end {}", cfg.pool.start, cfg.pool.end);
        }
        Ok(cfg)
    }

    /// The configured VO endpoints; there must be at least one.
    pub fn endpoints(&self) -> anyhow::Result<Vec<VoEndpoint>> {
        if self.vos.is_empty() {
            bail!("no [[vo]] endpoints configured");
        }
        self.vos
            .iter()
            .map(|v| {
                Ok(VoEndpoint {
                    addr: v.addr.clone(),
                    vo_path: v.path.clone(),
                    projection: parse_projection(&v.projection).with_context(|| format!("endpoint {}", v.path))?,
                })
            })
            .collect()
    }

    pub fn interval(&self) -> Duration {
        Duration::from_secs(self.interval.seconds)
    }
}

/// `vo-admin` registry configuration.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct VoConfig {
    pub vo_path: String,
    pub journal: PathBuf,
    pub listen: String,
    pub admin_socket: PathBuf,
    pub credential: PathBuf,
    #[serde(default)]
    pub allow_insecure: bool,
}

impl VoConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut cfg: VoConfig = read_toml(path)?;
        let base = base_dir(path);
        resolve(&base, &mut cfg.journal);
        resolve(&base, &mut cfg.admin_socket);
        resolve(&base, &mut cfg.credential);
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct UpstreamSection {
    pub addr: String,
    pub projection: String,
}

/// `feedup` configuration.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct FeedupConfig {
    /// Journal of the registry being fed up.
    pub source: PathBuf,
    /// Where the acknowledged high-water mark is kept.
    pub state: PathBuf,
    pub credential: PathBuf,
    pub upstream: UpstreamSection,
    #[serde(default)]
    pub interval: IntervalSection,
}

impl FeedupConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut cfg: FeedupConfig = read_toml(path)?;
        let base = base_dir(path);
        resolve(&base, &mut cfg.source);
        resolve(&base, &mut cfg.state);
        resolve(&base, &mut cfg.credential);
        parse_projection(&cfg.upstream.projection)?;
        Ok(cfg)
    }
}
