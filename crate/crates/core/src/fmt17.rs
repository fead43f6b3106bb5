//! 17-significant-digit float encoding for every file the toolkit writes.
//!
//! Seventeen digits round-trip any finite `f64` exactly, so save → load is
//! bit-exact.

use serde::ser::{SerializeSeq, Serializer};
use serde_json::value::RawValue;

/// Formats `x` with 17 significant digits as a JSON-compatible number.
pub fn format(x: f64) -> String {
    debug_assert!(x.is_finite(), "non-finite value {x} cannot be encoded");
    format!("{x:.16e}")
}

fn raw(x: f64) -> Box<RawValue> {
    RawValue::from_string(format(x)).expect("formatted float is valid JSON")
}

pub fn f64<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_some(&raw(*x))
}

pub fn vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(&raw(*x))?;
    }
    seq.end()
}

pub fn opt_f64<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match x {
        Some(x) => s.serialize_some(&raw(*x)),
        None => s.serialize_none(),
    }
}
