//! Canonical JSON: object keys sorted, two-space indent, LF newlines and a
//! trailing newline. Byte-stable for identical values.

use serde::Serialize;

use crate::error::{Error, Result};

pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Map is a BTreeMap without the preserve_order feature,
    // so going through Value sorts every object's keys.
    let v = serde_json::to_value(value).map_err(|e| Error::Internal(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}
