use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Maximum length of an address in octets.
pub const MAX_ADDRESS_LEN: usize = 254;
const MAX_LABEL_LEN: usize = 63;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid email address at byte {position}: {reason}")]
pub struct SyntaxError {
    pub position: usize,
    pub reason: &'static str,
}

impl SyntaxError {
    fn at(position: usize, reason: &'static str) -> Self {
        SyntaxError { position, reason }
    }
}

/// A syntactically valid mailbox address.
///
/// Equality, ordering and hashing treat the domain case-insensitively and
/// the local part case-sensitively. The original spelling of both parts is
/// preserved for display.
#[derive(Debug, Clone)]
pub struct EmailAddress {
    local_part: String,
    domain: String,
}

impl EmailAddress {
    pub fn local_part(&self) -> &str {
        &self.local_part
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    /// `local@domain` with the domain lowercased; the comparison key.
    pub fn canonical(&self) -> String {
        format!("{}@{}", self.local_part, self.domain.to_ascii_lowercase())
    }

    /// True if the domain equals `suffix` or is a subdomain of it.
    pub fn domain_matches_suffix(&self, suffix: &str) -> bool {
        let domain = self.domain.to_ascii_lowercase();
        let suffix = suffix.trim_start_matches('.').to_ascii_lowercase();
        domain == suffix
            || (domain.len() > suffix.len()
                && domain.ends_with(&suffix)
                && domain.as_bytes()[domain.len() - suffix.len() - 1] == b'.')
    }

    fn key(&self) -> (&str, impl Iterator<Item = u8> + '_) {
        (self.local_part.as_str(), self.domain.bytes().map(|b| b.to_ascii_lowercase()))
    }
}

/// Parses and validates an address.
pub fn validate_address(raw: &str) -> Result<EmailAddress, SyntaxError> {
    if raw.is_empty() {
        return Err(SyntaxError::at(0, "empty address"));
    }
    if raw.len() > MAX_ADDRESS_LEN {
        return Err(SyntaxError::at(MAX_ADDRESS_LEN, "address longer than 254 octets"));
    }
    let at = match raw.find('@') {
        Some(i) => i,
        None => return Err(SyntaxError::at(raw.len(), "missing '@'")),
    };
    if let Some(second) = raw[at + 1..].find('@') {
        return Err(SyntaxError::at(at + 1 + second, "more than one '@'"));
    }
    let (local, domain) = (&raw[..at], &raw[at + 1..]);
    validate_local(local)?;
    validate_domain(domain, at + 1)?;
    Ok(EmailAddress { local_part: local.to_owned(), domain: domain.to_owned() })
}

fn is_atext(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b"!#$%&'*+/=?^_`{|}~-".contains(&b)
}

fn validate_local(local: &str) -> Result<(), SyntaxError> {
    if local.is_empty() {
        return Err(SyntaxError::at(0, "empty local part"));
    }
    let bytes = local.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'.' {
            if i == 0 || i == bytes.len() - 1 {
                return Err(SyntaxError::at(i, "local part starts or ends with '.'"));
            }
            if bytes[i - 1] == b'.' {
                return Err(SyntaxError::at(i, "consecutive '.' in local part"));
            }
        } else if !is_atext(b) {
            return Err(SyntaxError::at(i, "invalid character in local part"));
        }
    }
    Ok(())
}

fn validate_domain(domain: &str, offset: usize) -> Result<(), SyntaxError> {
    if domain.is_empty() {
        return Err(SyntaxError::at(offset, "empty domain"));
    }
    let mut labels = 0;
    let mut pos = offset;
    for label in domain.split('.') {
        if label.is_empty() {
            return Err(SyntaxError::at(pos, "empty domain label"));
        }
        if label.len() > MAX_LABEL_LEN {
            return Err(SyntaxError::at(pos, "domain label longer than 63 octets"));
        }
        for (i, b) in label.bytes().enumerate() {
            if !(b.is_ascii_alphanumeric() || b == b'-') {
                return Err(SyntaxError::at(pos + i, "invalid character in domain"));
            }
        }
        if label.starts_with('-') || label.ends_with('-') {
            return Err(SyntaxError::at(pos, "domain label starts or ends with '-'"));
        }
        labels += 1;
        pos += label.len() + 1;
    }
    if labels < 2 {
        return Err(SyntaxError::at(offset + domain.len(), "domain needs at least two labels"));
    }
    Ok(())
}

impl FromStr for EmailAddress {
    type Err = SyntaxError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        validate_address(s)
    }
}

impl PartialEq for EmailAddress {
    fn eq(&self, other: &Self) -> bool {
        self.local_part == other.local_part && self.domain.eq_ignore_ascii_case(&other.domain)
    }
}

impl Eq for EmailAddress {}

impl Hash for EmailAddress {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.local_part.hash(state);
        for b in self.domain.bytes() {
            state.write_u8(b.to_ascii_lowercase());
        }
    }
}

impl Ord for EmailAddress {
    fn cmp(&self, other: &Self) -> Ordering {
        let (la, da) = self.key();
        let (lb, db) = other.key();
        la.cmp(lb).then_with(|| da.cmp(db))
    }
}

impl PartialOrd for EmailAddress {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for EmailAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.local_part, self.domain)
    }
}

impl Serialize for EmailAddress {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EmailAddress {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        validate_address(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn well_formed() {
        let a = validate_address("ada@example.com").unwrap();
        assert_eq!(a.local_part(), "ada");
        assert_eq!(a.domain(), "example.com");
    }

    #[test]
    fn missing_at_sign() {
        let err = validate_address("no-at-sign").unwrap_err();
        assert_eq!(err.position, 10);
    }

    #[test]
    fn domain_case_insensitive_local_case_preserving() {
        let a = validate_address("A@b.co").unwrap();
        let b = validate_address("A@B.CO").unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_string(), "A@B.CO");
        let set: HashSet<_> = [a.clone(), b].into_iter().collect();
        assert_eq!(set.len(), 1);
        assert_ne!(a, validate_address("a@b.co").unwrap());
    }

    #[test]
    fn rejects_malformed() {
        for raw in [
            "",
            "@example.com",
            "ada@",
            "ada@localhost",
            "ada@@example.com",
            "a b@example.com",
            ".ada@example.com",
            "ada.@example.com",
            "a..da@example.com",
            "ada@exa_mple.com",
            "ada@-example.com",
            "ada@example..com",
        ] {
            assert!(validate_address(raw).is_err(), "{raw:?} accepted");
        }
    }

    #[test]
    fn length_limit() {
        let long = format!("{}@example.com", "a".repeat(MAX_ADDRESS_LEN - 12));
        assert_eq!(long.len(), MAX_ADDRESS_LEN);
        assert!(validate_address(&long).is_ok());
        let too_long = format!("a{long}");
        assert!(validate_address(&too_long).is_err());
    }

    #[test]
    fn suffix_matching() {
        let a = validate_address("x@mx.Bounce.Sim").unwrap();
        assert!(a.domain_matches_suffix("bounce.sim"));
        assert!(!a.domain_matches_suffix("ounce.sim"));
        assert!(validate_address("x@bounce.sim").unwrap().domain_matches_suffix("bounce.sim"));
    }
}
