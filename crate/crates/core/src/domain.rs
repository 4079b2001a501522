//! Shared vocabulary: distinguished names, roles, user records and
//! attribute projections.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed DN {input:?}: {reason}")]
pub struct MalformedDn {
    pub input: String,
    pub reason: &'static str,
}

/// A normalized slash-separated distinguished name such as
/// `/O=atlas/CN=Alice Adams`.
///
/// Normalization trims the input and every component and collapses runs of
/// `/`. Two names are equal iff their normalized text is byte-equal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DistinguishedName(String);

impl DistinguishedName {
    pub fn parse(raw: &str) -> Result<Self, MalformedDn> {
        let err = |reason| MalformedDn {
            input: raw.to_string(),
            reason,
        };
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return Err(err("empty"));
        }
        if !trimmed.starts_with('/') {
            return Err(err("missing leading '/'"));
        }
        if trimmed.chars().any(char::is_control) {
            return Err(err("control character"));
        }
        let mut out = String::with_capacity(trimmed.len());
        for component in trimmed.split('/') {
            let component = component.trim();
            if component.is_empty() {
                continue;
            }
            match component.split_once('=') {
                Some((key, value)) if !key.is_empty() && !value.is_empty() => {}
                _ => return Err(err("component is not key=value")),
            }
            out.push('/');
            out.push_str(component);
        }
        if out.is_empty() {
            return Err(err("no components"));
        }
        Ok(Self(out))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `(key, value)` pairs in order.
    pub fn components(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0[1..]
            .split('/')
            .filter_map(|c| c.split_once('='))
    }
}

impl fmt::Display for DistinguishedName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for DistinguishedName {
    type Err = MalformedDn;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl TryFrom<String> for DistinguishedName {
    type Error = MalformedDn;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<DistinguishedName> for String {
    fn from(dn: DistinguishedName) -> Self {
        dn.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid role name {0:?}")]
pub struct InvalidRoleName(pub String);

/// A VO role token. Roles travel comma-joined on the wire, so a role may
/// not contain whitespace or commas.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RoleName(String);

impl RoleName {
    pub fn parse(raw: &str) -> Result<Self, InvalidRoleName> {
        if raw.is_empty() || raw.chars().any(|c| c.is_whitespace() || c == ',' || c.is_control()) {
            return Err(InvalidRoleName(raw.to_string()));
        }
        Ok(Self(raw.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_lowercase(&self) -> bool {
        !self.0.chars().any(char::is_uppercase)
    }
}

impl fmt::Display for RoleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for RoleName {
    type Err = InvalidRoleName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl TryFrom<String> for RoleName {
    type Error = InvalidRoleName;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<RoleName> for String {
    fn from(r: RoleName) -> Self {
        r.0
    }
}

/// Parses a comma-joined role list. The empty string is the empty set.
pub fn parse_roles(raw: &str) -> Result<BTreeSet<RoleName>, InvalidRoleName> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(RoleName::parse)
        .collect()
}

pub fn join_roles(roles: &BTreeSet<RoleName>) -> String {
    roles.iter().map(RoleName::as_str).collect::<Vec<_>>().join(",")
}

/// One attribute of a user record, named as it appears on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    #[serde(rename = "dn")]
    Dn,
    #[serde(rename = "certificateRef")]
    CertificateRef,
    #[serde(rename = "realName")]
    RealName,
    #[serde(rename = "institution")]
    Institution,
    #[serde(rename = "email")]
    Email,
    #[serde(rename = "registrarDn")]
    RegistrarDn,
    #[serde(rename = "agreementSignedAt")]
    AgreementSignedAt,
    #[serde(rename = "roles")]
    Roles,
    #[serde(rename = "voPath")]
    VoPath,
}

impl Attribute {
    pub const ALL: [Attribute; 9] = [
        Attribute::Dn,
        Attribute::CertificateRef,
        Attribute::RealName,
        Attribute::Institution,
        Attribute::Email,
        Attribute::RegistrarDn,
        Attribute::AgreementSignedAt,
        Attribute::Roles,
        Attribute::VoPath,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Dn => "dn",
            Attribute::CertificateRef => "certificateRef",
            Attribute::RealName => "realName",
            Attribute::Institution => "institution",
            Attribute::Email => "email",
            Attribute::RegistrarDn => "registrarDn",
            Attribute::AgreementSignedAt => "agreementSignedAt",
            Attribute::Roles => "roles",
            Attribute::VoPath => "voPath",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown attribute {0:?}")]
pub struct UnknownAttribute(pub String);

/// An ordered attribute set. `dn` is always a member.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "BTreeSet<Attribute>")]
pub struct AttributeProjection(BTreeSet<Attribute>);

impl AttributeProjection {
    pub fn new(attrs: impl IntoIterator<Item = Attribute>) -> Self {
        let mut set: BTreeSet<Attribute> = attrs.into_iter().collect();
        set.insert(Attribute::Dn);
        Self(set)
    }

    pub fn all() -> Self {
        Self::new(Attribute::ALL)
    }

    pub fn dn_only() -> Self {
        Self::new([])
    }

    /// Parses `dn,email,roles`.
    pub fn parse(raw: &str) -> Result<Self, UnknownAttribute> {
        let attrs = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| Attribute::from_name(s).ok_or_else(|| UnknownAttribute(s.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(attrs))
    }

    pub fn contains(&self, attr: Attribute) -> bool {
        self.0.contains(&attr)
    }

    pub fn iter(&self) -> impl Iterator<Item = Attribute> + '_ {
        self.0.iter().copied()
    }

    pub fn intersect(&self, other: &AttributeProjection) -> AttributeProjection {
        Self::new(self.0.intersection(&other.0).copied())
    }

    pub fn is_subset(&self, other: &AttributeProjection) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<BTreeSet<Attribute>> for AttributeProjection {
    fn from(set: BTreeSet<Attribute>) -> Self {
        Self::new(set)
    }
}

impl fmt::Display for AttributeProjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Attribute::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for AttributeProjection {
    type Err = UnknownAttribute;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// A complete VO membership record as collected by a registrar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UserRecord {
    pub dn: DistinguishedName,
    pub certificate_ref: String,
    pub real_name: String,
    pub institution: String,
    pub email: String,
    pub registrar_dn: DistinguishedName,
    pub agreement_signed_at: DateTime<Utc>,
    pub roles: BTreeSet<RoleName>,
    pub vo_path: String,
}

impl UserRecord {
    pub fn project(&self, projection: &AttributeProjection) -> ProjectedRecord {
        ProjectedRecord::from(self.clone()).project(projection)
    }
}

/// A user record restricted to some attribute subset. Absent attributes are
/// `None`; `dn` is always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProjectedRecord {
    pub dn: DistinguishedName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub institution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registrar_dn: Option<DistinguishedName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement_signed_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<BTreeSet<RoleName>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vo_path: Option<String>,
}

impl ProjectedRecord {
    pub fn dn_only(dn: DistinguishedName) -> Self {
        Self {
            dn,
            certificate_ref: None,
            real_name: None,
            institution: None,
            email: None,
            registrar_dn: None,
            agreement_signed_at: None,
            roles: None,
            vo_path: None,
        }
    }

    /// The set of attributes present on this record.
    pub fn attributes(&self) -> AttributeProjection {
        AttributeProjection::new(Attribute::ALL.into_iter().filter(|a| self.has(*a)))
    }

    pub fn has(&self, attr: Attribute) -> bool {
        match attr {
            Attribute::Dn => true,
            Attribute::CertificateRef => self.certificate_ref.is_some(),
            Attribute::RealName => self.real_name.is_some(),
            Attribute::Institution => self.institution.is_some(),
            Attribute::Email => self.email.is_some(),
            Attribute::RegistrarDn => self.registrar_dn.is_some(),
            Attribute::AgreementSignedAt => self.agreement_signed_at.is_some(),
            Attribute::Roles => self.roles.is_some(),
            Attribute::VoPath => self.vo_path.is_some(),
        }
    }

    pub fn project(&self, projection: &AttributeProjection) -> ProjectedRecord {
        let keep = |a| projection.contains(a);
        ProjectedRecord {
            dn: self.dn.clone(),
            certificate_ref: self.certificate_ref.clone().filter(|_| keep(Attribute::CertificateRef)),
            real_name: self.real_name.clone().filter(|_| keep(Attribute::RealName)),
            institution: self.institution.clone().filter(|_| keep(Attribute::Institution)),
            email: self.email.clone().filter(|_| keep(Attribute::Email)),
            registrar_dn: self.registrar_dn.clone().filter(|_| keep(Attribute::RegistrarDn)),
            agreement_signed_at: self.agreement_signed_at.filter(|_| keep(Attribute::AgreementSignedAt)),
            roles: self.roles.clone().filter(|_| keep(Attribute::Roles)),
            vo_path: self.vo_path.clone().filter(|_| keep(Attribute::VoPath)),
        }
    }

    /// Roles carried by the record; an absent roles attribute reads as no roles.
    pub fn role_set(&self) -> BTreeSet<RoleName> {
        self.roles.clone().unwrap_or_default()
    }

    /// Checks the invariants of every attribute that is present.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        let mut non_empty = |attr, value: &Option<String>| {
            if matches!(value, Some(v) if v.trim().is_empty()) {
                violations.push(Violation::EmptyField(attr));
            }
        };
        non_empty(Attribute::CertificateRef, &self.certificate_ref);
        non_empty(Attribute::RealName, &self.real_name);
        non_empty(Attribute::Institution, &self.institution);
        non_empty(Attribute::VoPath, &self.vo_path);
        if let Some(email) = &self.email {
            if !is_valid_email(email) {
                violations.push(Violation::InvalidEmail(email.clone()));
            }
        }
        for role in self.roles.iter().flatten() {
            if !role.is_lowercase() {
                violations.push(Violation::RoleNotLowercase(role.clone()));
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }
}

impl From<UserRecord> for ProjectedRecord {
    fn from(r: UserRecord) -> Self {
        ProjectedRecord {
            dn: r.dn,
            certificate_ref: Some(r.certificate_ref),
            real_name: Some(r.real_name),
            institution: Some(r.institution),
            email: Some(r.email),
            registrar_dn: Some(r.registrar_dn),
            agreement_signed_at: Some(r.agreement_signed_at),
            roles: Some(r.roles),
            vo_path: Some(r.vo_path),
        }
    }
}

/// One broken record invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    EmptyField(Attribute),
    InvalidEmail(String),
    RoleNotLowercase(RoleName),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyField(a) => write!(f, "{a} is empty"),
            Violation::InvalidEmail(e) => write!(f, "invalid email {e:?}"),
            Violation::RoleNotLowercase(r) => write!(f, "role {r} is not lowercase"),
        }
    }
}

fn is_valid_email(email: &str) -> bool {
    let mut parts = email.split('@');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(local), Some(domain), None) => !local.is_empty() && !domain.is_empty(),
        _ => false,
    }
}

/// Returns every violated invariant of a full record, not just the first.
pub fn validate_record(record: &UserRecord) -> Result<(), Vec<Violation>> {
    ProjectedRecord::from(record.clone()).validate()
}

/// The authenticated identity of a connected peer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PeerIdentity {
    dn: DistinguishedName,
    fingerprint: String,
}

impl PeerIdentity {
    pub(crate) fn new(dn: DistinguishedName, fingerprint: impl Into<String>) -> Self {
        Self {
            dn,
            fingerprint: fingerprint.into(),
        }
    }

    /// An identity asserted by a trusted local operator rather than
    /// established by a handshake, e.g. a command on the admin socket.
    pub fn operator(dn: DistinguishedName) -> Self {
        Self::new(dn, "local-operator")
    }

    pub fn dn(&self) -> &DistinguishedName {
        &self.dn
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dn(s: &str) -> DistinguishedName {
        DistinguishedName::parse(s).unwrap()
    }

    pub(crate) fn sample_record() -> UserRecord {
        UserRecord {
            dn: dn("/O=atlas/CN=Alice Adams"),
            certificate_ref: "cert-0001".into(),
            real_name: "Alice Adams".into(),
            institution: "BNL".into(),
            email: "a@b.org".into(),
            registrar_dn: dn("/O=atlas/CN=Registrar"),
            agreement_signed_at: "2004-03-01T12:00:00Z".parse().unwrap(),
            roles: BTreeSet::new(),
            vo_path: "atlas/us-atlas".into(),
        }
    }

    /// Reference normalizer kept independent of `DistinguishedName::parse`.
    fn reference_normalize(raw: &str) -> Option<String> {
        let raw = raw.trim();
        if !raw.starts_with('/') || raw.chars().any(char::is_control) {
            return None;
        }
        let mut parts = Vec::new();
        for piece in raw.split('/') {
            let piece = piece.trim();
            if piece.is_empty() {
                continue;
            }
            let eq = piece.find('=')?;
            if eq == 0 || eq == piece.len() - 1 {
                return None;
            }
            parts.push(piece.to_string());
        }
        if parts.is_empty() {
            return None;
        }
        Some(format!("/{}", parts.join("/")))
    }

    #[test]
    fn parses_two_components() {
        let d = dn("/O=atlas/CN=Alice Adams");
        assert_eq!(d.components().count(), 2);
        assert_eq!(d.components().nth(1), Some(("CN", "Alice Adams")));
    }

    #[test]
    fn rejects_malformed() {
        assert!(DistinguishedName::parse("").is_err());
        assert!(DistinguishedName::parse("   ").is_err());
        assert!(DistinguishedName::parse("O=atlas").is_err());
        assert!(DistinguishedName::parse("/O=atlas/CN").is_err());
        assert!(DistinguishedName::parse("/=x").is_err());
        assert!(DistinguishedName::parse("/O=").is_err());
        assert!(DistinguishedName::parse("///").is_err());
        assert!(DistinguishedName::parse("/O=a\nCN=b").is_err());
    }

    #[test]
    fn normalizes_separators_and_whitespace() {
        let raw = "/O=atlas//CN=Bob ";
        assert_eq!(dn(raw).as_str(), "/O=atlas/CN=Bob");
        assert_eq!(reference_normalize(raw).as_deref(), Some("/O=atlas/CN=Bob"));
    }

    #[test]
    fn full_record_is_valid() {
        assert_eq!(validate_record(&sample_record()), Ok(()));
    }

    #[test]
    fn bad_email_is_reported() {
        let mut r = sample_record();
        r.email = "nobody".into();
        assert_eq!(validate_record(&r), Err(vec![Violation::InvalidEmail("nobody".into())]));
    }

    #[test]
    fn all_violations_are_reported() {
        let mut r = sample_record();
        r.real_name = String::new();
        r.email = "x@@y".into();
        let v = validate_record(&r).unwrap_err();
        assert_eq!(v.len(), 2);
        assert!(v.contains(&Violation::EmptyField(Attribute::RealName)));
        assert!(v.contains(&Violation::InvalidEmail("x@@y".into())));
    }

    #[test]
    fn uppercase_role_is_a_violation() {
        let mut r = sample_record();
        r.roles = parse_roles("analysis,Reco").unwrap();
        assert_eq!(
            validate_record(&r),
            Err(vec![Violation::RoleNotLowercase(RoleName::parse("Reco").unwrap())])
        );
    }

    #[test]
    fn role_names_reject_separators() {
        assert!(RoleName::parse("").is_err());
        assert!(RoleName::parse("a b").is_err());
        assert!(RoleName::parse("a,b").is_err());
        assert_eq!(parse_roles("").unwrap(), BTreeSet::new());
        assert_eq!(join_roles(&parse_roles("b,a").unwrap()), "a,b");
    }

    #[test]
    fn projection_always_has_dn() {
        let p = AttributeProjection::parse("email,roles").unwrap();
        assert!(p.contains(Attribute::Dn));
        assert_eq!(p.to_string(), "dn,email,roles");
        assert!(AttributeProjection::parse("email,shoe").is_err());
    }

    #[test]
    fn projecting_keeps_only_requested() {
        let p = sample_record().project(&AttributeProjection::parse("dn,email").unwrap());
        assert_eq!(p.attributes().to_string(), "dn,email");
        assert_eq!(p.email.as_deref(), Some("a@b.org"));
    }

    fn component() -> impl Strategy<Value = String> {
        ("[A-Z]{1,3}", "[ -~&&[^/=]]{0,2}[a-zA-Z0-9][ -~&&[^/]]{0,6}")
            .prop_map(|(k, v)| format!("{k}={v}"))
    }

    fn raw_dn() -> impl Strategy<Value = String> {
        (prop::collection::vec((component(), "/{1,3}", " {0,2}"), 1..5), " {0,2}").prop_map(
            |(parts, tail)| {
                let mut s = String::new();
                for (c, sep, pad) in parts {
                    s.push_str(&sep);
                    s.push_str(&pad);
                    s.push_str(&c);
                }
                s.push_str(&tail);
                s
            },
        )
    }

    proptest! {
        #[test]
        fn parse_is_idempotent(raw in raw_dn()) {
            let once = DistinguishedName::parse(&raw).unwrap();
            let twice = DistinguishedName::parse(once.as_str()).unwrap();
            prop_assert_eq!(&once, &twice);
        }

        #[test]
        fn parse_matches_reference(raw in "[ -~]{0,24}") {
            let ours = DistinguishedName::parse(&raw).ok().map(String::from);
            prop_assert_eq!(ours, reference_normalize(&raw));
        }

        #[test]
        fn validate_accepts_exactly_well_formed(
            real in "[a-zA-Z ]{0,6}",
            inst in "[a-zA-Z]{0,4}",
            cert in "[a-z0-9]{0,4}",
            vo in "[a-z/]{0,5}",
            email in "[a-z@.]{0,8}",
            roles in prop::collection::btree_set("[a-zA-Z]{1,5}", 0..4),
        ) {
            let mut r = sample_record();
            r.real_name = real.clone();
            r.institution = inst.clone();
            r.certificate_ref = cert.clone();
            r.vo_path = vo.clone();
            r.email = email.clone();
            r.roles = roles.iter().map(|s| RoleName::parse(s).unwrap()).collect();
            let parts: Vec<&str> = email.split('@').collect();
            let expect_ok = !real.trim().is_empty()
                && !inst.is_empty()
                && !cert.is_empty()
                && !vo.is_empty()
                && parts.len() == 2
                && !parts[0].is_empty()
                && !parts[1].is_empty()
                && roles.iter().all(|r| r.to_lowercase() == *r);
            prop_assert_eq!(validate_record(&r).is_ok(), expect_ok);
        }
    }
}
