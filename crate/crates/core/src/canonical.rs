//! Canonical serialization of structured values and content hashing.
//!
//! The canonical form is compact JSON with map keys sorted by code point,
//! no insignificant whitespace, and numbers written without exponents.
//! Integral numbers always print as integers, so `1`, `1.0` and `1e0`
//! canonicalize to the same bytes. Every digest in the system is SHA-256
//! over these bytes.

use std::fmt::{self, Write as _};

use serde_json::{Map, Number, Value};
use sha2::{Digest as _, Sha256};

/// Name of the hash function, recorded in log headers.
pub const HASH_FUNCTION: &str = "sha256";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CanonicalError {
    #[error("number at {path} is not finite")]
    NonFinite { path: String },
    #[error("number at {path} is not an integer; hash-relevant values must be integral")]
    NonInteger { path: String },
    #[error("map key at {path} is not a string")]
    NonStringKey { path: String },
}

/// The unique canonical byte encoding of a value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalBytes(Vec<u8>);

impl CanonicalBytes {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    /// The canonical form is always valid UTF-8.
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("canonical bytes are utf-8")
    }
}

impl AsRef<[u8]> for CanonicalBytes {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// Lowercase hex of a 256-bit digest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Digest(String);

impl Digest {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Accepts exactly 64 lowercase hex characters.
    pub fn parse(hex: &str) -> Option<Digest> {
        let ok = hex.len() == 64 && hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        ok.then(|| Digest(hex.to_string()))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// SHA-256 over raw bytes.
pub fn digest(bytes: impl AsRef<[u8]>) -> Digest {
    let out = Sha256::digest(bytes.as_ref());
    Digest(hex::encode(out.as_slice()))
}

/// Canonicalizes any payload value. Non-integral finite numbers are allowed
/// and written in shortest round-trip decimal form.
pub fn canonicalize(value: &Value) -> CanonicalBytes {
    let mut out = String::new();
    write_value(&mut out, value);
    CanonicalBytes(out.into_bytes())
}

/// Canonicalizes a hash-relevant value (model requests, tool arguments),
/// rejecting any non-integral number.
pub fn canonicalize_strict(value: &Value) -> Result<CanonicalBytes, CanonicalError> {
    check_integral(value, &mut String::from("$"))?;
    Ok(canonicalize(value))
}

/// `digest(canonicalize_strict(value))`.
pub fn content_key(value: &Value) -> Result<Digest, CanonicalError> {
    Ok(digest(canonicalize_strict(value)?))
}

/// Builds a number value from a float, rejecting NaN and infinities and
/// collapsing integral floats to integers.
pub fn number(f: f64) -> Result<Value, CanonicalError> {
    if !f.is_finite() {
        return Err(CanonicalError::NonFinite { path: "$".into() });
    }
    Ok(normalize_number(&Number::from_f64(f).expect("finite")))
}

/// Rewrites every integral float as an integer so that structurally equal
/// values compare equal after a save/load round trip.
pub fn normalize(value: &Value) -> Value {
    match value {
        Value::Number(n) => normalize_number(n),
        Value::Array(items) => Value::Array(items.iter().map(normalize).collect()),
        Value::Object(map) => {
            Value::Object(map.iter().map(|(k, v)| (k.clone(), normalize(v))).collect::<Map<_, _>>())
        }
        other => other.clone(),
    }
}

fn normalize_number(n: &Number) -> Value {
    if n.is_i64() || n.is_u64() {
        return Value::Number(n.clone());
    }
    let f = n.as_f64().expect("float");
    if f == 0.0 {
        return Value::from(0);
    }
    if f.fract() == 0.0 {
        if f >= i64::MIN as f64 && f < i64::MAX as f64 {
            return Value::from(f as i64);
        }
        if f > 0.0 && f < u64::MAX as f64 {
            return Value::from(f as u64);
        }
    }
    Value::Number(n.clone())
}

fn check_integral(value: &Value, path: &mut String) -> Result<(), CanonicalError> {
    match value {
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                return Ok(());
            }
            let f = n.as_f64().unwrap_or(f64::NAN);
            if f.is_finite() && f.fract() == 0.0 {
                Ok(())
            } else {
                Err(CanonicalError::NonInteger { path: path.clone() })
            }
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                let len = path.len();
                let _ = write!(path, "[{i}]");
                check_integral(item, path)?;
                path.truncate(len);
            }
            Ok(())
        }
        Value::Object(map) => {
            for (k, v) in map {
                let len = path.len();
                let _ = write!(path, ".{k}");
                check_integral(v, path)?;
                path.truncate(len);
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn write_value(out: &mut String, value: &Value) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(out, n),
        Value::String(s) => write_string(out, s),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            // serde_json's default map is ordered by byte order, which for
            // UTF-8 coincides with code point order; sort anyway so the
            // encoding does not depend on that feature flag.
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push('{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(out, k);
                out.push(':');
                write_value(out, v);
            }
            out.push('}');
        }
    }
}

fn write_number(out: &mut String, n: &Number) {
    if let Some(i) = n.as_i64() {
        let _ = write!(out, "{i}");
    } else if let Some(u) = n.as_u64() {
        let _ = write!(out, "{u}");
    } else {
        let f = n.as_f64().expect("json numbers are finite");
        if f == 0.0 {
            out.push('0');
        } else {
            // Display for f64 is the shortest round-trip decimal, never
            // using an exponent.
            let _ = write!(out, "{f}");
        }
    }
}

fn write_string(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            '\u{08}' => out.push_str("\\b"),
            '\u{0c}' => out.push_str("\\f"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}
