//! Line-oriented record blocks: `attr: value` lines, blocks separated by a
//! blank line.
//!
//! Values escape `\` as `\\`, newline as `\n` and carriage return as `\r`
//! so that every field stays on one line.

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

use crate::domain::{
    join_roles, parse_roles, Attribute, AttributeProjection, DistinguishedName, ProjectedRecord,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockError {
    #[error("line {line}: expected `key: value`")]
    MalformedLine { line: usize },
    #[error("block has no dn")]
    MissingDn,
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("duplicate attribute {0:?}")]
    DuplicateAttribute(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
}

/// An ordered list of `key: value` fields.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Block {
    pub fields: Vec<(String, String)>,
}

impl Block {
    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.fields.push((key.into(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render_into(&self, out: &mut String) {
        for (k, v) in &self.fields {
            out.push_str(k);
            out.push_str(": ");
            escape_into(v, out);
            out.push('\n');
        }
    }
}

fn escape_into(value: &str, out: &mut String) {
    for c in value.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
}

fn unescape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Renders blocks separated by blank lines.
pub fn render_blocks(blocks: &[Block]) -> String {
    let mut out = String::new();
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        b.render_into(&mut out);
    }
    out
}

/// Splits `lines` into blocks. `first_line` is the 1-based number of the
/// first line, used in error positions.
pub fn parse_blocks<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    first_line: usize,
) -> Result<Vec<Block>, BlockError> {
    let mut blocks = Vec::new();
    let mut current = Block::default();
    for (i, line) in lines.into_iter().enumerate() {
        if line.is_empty() {
            if !current.fields.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
            continue;
        }
        let (k, v) = line
            .split_once(": ")
            .or_else(|| line.strip_suffix(':').map(|k| (k, "")))
            .ok_or(BlockError::MalformedLine { line: first_line + i })?;
        current.push(k, unescape(v));
    }
    if !current.fields.is_empty() {
        blocks.push(current);
    }
    Ok(blocks)
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_timestamp(raw: &str) -> Result<DateTime<Utc>, chrono::ParseError> {
    DateTime::parse_from_rfc3339(raw).map(|t| t.with_timezone(&Utc))
}

/// A record block as carried by QUERY responses and PUSH frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordBlock {
    Record(ProjectedRecord),
    Tombstone(DistinguishedName),
}

pub fn record_to_block(record: &ProjectedRecord) -> Block {
    let mut b = Block::default();
    for attr in Attribute::ALL {
        let value = match attr {
            Attribute::Dn => Some(record.dn.to_string()),
            Attribute::CertificateRef => record.certificate_ref.clone(),
            Attribute::RealName => record.real_name.clone(),
            Attribute::Institution => record.institution.clone(),
            Attribute::Email => record.email.clone(),
            Attribute::RegistrarDn => record.registrar_dn.as_ref().map(ToString::to_string),
            Attribute::AgreementSignedAt => record.agreement_signed_at.as_ref().map(format_timestamp),
            Attribute::Roles => record.roles.as_ref().map(join_roles),
            Attribute::VoPath => record.vo_path.clone(),
        };
        if let Some(v) = value {
            b.push(attr.name(), v);
        }
    }
    b
}

pub fn tombstone_block(dn: &DistinguishedName) -> Block {
    let mut b = Block::default();
    b.push("dn", dn.as_str());
    b.push("removed", "true");
    b
}

fn bad(key: &str, reason: impl ToString) -> BlockError {
    BlockError::BadValue {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

pub fn block_to_record(block: &Block) -> Result<RecordBlock, BlockError> {
    let dn_raw = block.get("dn").ok_or(BlockError::MissingDn)?;
    let dn = DistinguishedName::parse(dn_raw).map_err(|e| bad("dn", e))?;
    if block.get("removed") == Some("true") {
        return Ok(RecordBlock::Tombstone(dn));
    }
    let mut r = ProjectedRecord::dn_only(dn);
    let mut seen = AttributeProjection::dn_only();
    let mut dn_seen = false;
    for (k, v) in &block.fields {
        let attr = Attribute::from_name(k).ok_or_else(|| BlockError::UnknownAttribute(k.clone()))?;
        if attr == Attribute::Dn {
            if dn_seen {
                return Err(BlockError::DuplicateAttribute(k.clone()));
            }
            dn_seen = true;
            continue;
        }
        if seen.contains(attr) {
            return Err(BlockError::DuplicateAttribute(k.clone()));
        }
        seen = AttributeProjection::new(seen.iter().chain([attr]));
        match attr {
            Attribute::Dn => unreachable!(),
            Attribute::CertificateRef => r.certificate_ref = Some(v.clone()),
            Attribute::RealName => r.real_name = Some(v.clone()),
            Attribute::Institution => r.institution = Some(v.clone()),
            Attribute::Email => r.email = Some(v.clone()),
            Attribute::RegistrarDn => {
                r.registrar_dn = Some(DistinguishedName::parse(v).map_err(|e| bad(k, e))?)
            }
            Attribute::AgreementSignedAt => {
                r.agreement_signed_at = Some(parse_timestamp(v).map_err(|e| bad(k, e))?)
            }
            Attribute::Roles => r.roles = Some(parse_roles(v).map_err(|e| bad(k, e))?),
            Attribute::VoPath => r.vo_path = Some(v.clone()),
        }
    }
    Ok(RecordBlock::Record(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{RoleName, UserRecord};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn record() -> UserRecord {
        UserRecord {
            dn: DistinguishedName::parse("/O=atlas/CN=Alice Adams").unwrap(),
            certificate_ref: "tok\\en".into(),
            real_name: "Alice\nAdams".into(),
            institution: "BNL".into(),
            email: "alice@bnl.gov".into(),
            registrar_dn: DistinguishedName::parse("/O=atlas/CN=Reg").unwrap(),
            agreement_signed_at: "2004-03-01T12:00:00.123Z".parse().unwrap(),
            roles: ["analysis", "simulation"].iter().map(|r| RoleName::parse(r).unwrap()).collect(),
            vo_path: "atlas".into(),
        }
    }

    #[test]
    fn renders_documented_layout() {
        let p = record().project(&AttributeProjection::parse("dn,email,roles").unwrap());
        let text = render_blocks(&[record_to_block(&p)]);
        assert_eq!(
            text,
            "dn: /O=atlas/CN=Alice Adams\nemail: alice@bnl.gov\nroles: analysis,simulation\n"
        );
    }

    #[test]
    fn empty_roles_render_as_empty_value() {
        let mut r = record();
        r.roles = BTreeSet::new();
        let p = r.project(&AttributeProjection::parse("roles").unwrap());
        let text = render_blocks(&[record_to_block(&p)]);
        assert!(text.ends_with("roles: \n"));
        let back = parse_blocks(text.lines(), 1).unwrap();
        assert_eq!(block_to_record(&back[0]).unwrap(), RecordBlock::Record(p));
    }

    #[test]
    fn escaped_values_round_trip() {
        let p: ProjectedRecord = record().into();
        let text = render_blocks(&[record_to_block(&p), tombstone_block(&p.dn)]);
        let blocks = parse_blocks(text.lines(), 1).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(block_to_record(&blocks[0]).unwrap(), RecordBlock::Record(p.clone()));
        assert_eq!(block_to_record(&blocks[1]).unwrap(), RecordBlock::Tombstone(p.dn));
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(
            parse_blocks(["dn: /O=a", "nonsense"], 5),
            Err(BlockError::MalformedLine { line: 6 })
        );
        let mut b = Block::default();
        b.push("email", "x@y");
        assert_eq!(block_to_record(&b), Err(BlockError::MissingDn));
        b.push("dn", "/O=a");
        b.push("shoe", "1");
        assert!(matches!(block_to_record(&b), Err(BlockError::UnknownAttribute(_))));
    }

    proptest! {
        #[test]
        fn value_escaping_round_trips(v in "\\PC{0,12}|[\\\\\n\r a-z]{0,12}") {
            let mut b = Block::default();
            b.push("k", v.clone());
            let text = render_blocks(&[b]);
            let parsed = parse_blocks(text.lines(), 1).unwrap();
            let got = parsed.first().and_then(|b| b.get("k")).unwrap_or("");
            prop_assert_eq!(got, v.as_str());
        }
    }
}
