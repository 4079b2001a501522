//! The gatekeeper's grid-mapfile.
//!
//! One line per Active user: `"<dn>" <account>`, sorted by DN bytes. Inside
//! the quotes `"` is written `\"` and `\` is written `\\`.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::domain::DistinguishedName;
use crate::journal::atomic_write_bytes;
use crate::store::{SiteUserState, UserStatus};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GridMapDocument {
    entries: Vec<(DistinguishedName, String)>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GridMapError {
    #[error("grid-mapfile line {0} is malformed")]
    MalformedLine(usize),
    #[error("grid-mapfile line {0} repeats a DN")]
    DuplicateDn(usize),
}

impl GridMapDocument {
    /// Sorts and de-duplicates by DN; the last account for a DN wins.
    pub fn new(entries: impl IntoIterator<Item = (DistinguishedName, String)>) -> Self {
        let map: BTreeMap<_, _> = entries.into_iter().collect();
        Self {
            entries: map.into_iter().collect(),
        }
    }

    pub fn entries(&self) -> &[(DistinguishedName, String)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn account_of(&self, dn: &DistinguishedName) -> Option<&str> {
        self.entries
            .binary_search_by(|(d, _)| d.cmp(dn))
            .ok()
            .map(|i| self.entries[i].1.as_str())
    }
}

/// Exactly the Active users, one entry per DN.
pub fn build<'a>(states: impl IntoIterator<Item = &'a SiteUserState>) -> GridMapDocument {
    GridMapDocument::new(states.into_iter().filter_map(|s| match (&s.status, &s.local_account) {
        (UserStatus::Active, Some(account)) => Some((s.dn.clone(), account.clone())),
        _ => None,
    }))
}

pub fn render(doc: &GridMapDocument) -> String {
    let mut out = String::with_capacity(doc.entries.len() * 64);
    for (dn, account) in &doc.entries {
        out.push('"');
        for c in dn.as_str().chars() {
            if c == '"' || c == '\\' {
                out.push('\\');
            }
            out.push(c);
        }
        out.push_str("\" ");
        out.push_str(account);
        out.push('\n');
    }
    out
}

/// Reads a grid-mapfile, skipping blank lines and `#` comments.
pub fn parse(text: &str) -> Result<GridMapDocument, GridMapError> {
    let mut entries: Vec<(DistinguishedName, String)> = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = GridMapError::MalformedLine(lineno);
        let rest = trimmed.strip_prefix('"').ok_or(bad.clone())?;
        let mut dn = String::new();
        let mut chars = rest.char_indices();
        let mut close = None;
        while let Some((pos, c)) = chars.next() {
            match c {
                '\\' => match chars.next() {
                    Some((_, e @ ('"' | '\\'))) => dn.push(e),
                    _ => return Err(bad),
                },
                '"' => {
                    close = Some(pos);
                    break;
                }
                c => dn.push(c),
            }
        }
        let close = close.ok_or(bad.clone())?;
        let tail = &rest[close + 1..];
        if !tail.starts_with(char::is_whitespace) {
            return Err(bad);
        }
        let account = tail.trim();
        if account.is_empty() || account.contains(char::is_whitespace) {
            return Err(bad);
        }
        let dn = DistinguishedName::parse(&dn).map_err(|_| bad)?;
        if seen.insert(dn.clone(), ()).is_some() {
            return Err(GridMapError::DuplicateDn(lineno));
        }
        entries.push((dn, account.to_string()));
    }
    Ok(GridMapDocument::new(entries))
}

/// Installs the rendered document through a temporary file and a rename,
/// so readers see either the old or the new file.
pub fn atomic_write(doc: &GridMapDocument, path: &Path) -> io::Result<()> {
    atomic_write_bytes(path, render(doc).as_bytes())
}

/// Writes only when the bytes differ from what is on disk. Returns whether
/// the file was replaced.
pub fn write_if_changed(doc: &GridMapDocument, path: &Path) -> io::Result<bool> {
    let bytes = render(doc);
    match std::fs::read(path) {
        Ok(existing) if existing == bytes.as_bytes() => return Ok(false),
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e),
    }
    atomic_write_bytes(path, bytes.as_bytes())?;
    Ok(true)
}
