//! Flat `key = value` configuration text.
//!
//! One assignment per line; `#` starts a comment. Keys are the struct field
//! names. Several config structs may share one file: each key is offered to
//! every target, and a key no target recognizes is an error.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// A value that can appear on the right-hand side of an assignment.
pub trait KvValue: Sized {
    fn parse_kv(raw: &str, key: &str) -> Result<Self>;
    fn to_kv(&self) -> String;
}

fn bad(key: &str, raw: &str, what: &str) -> Error {
    Error::contract(format!("config key {key}: cannot parse {raw:?} as {what}"))
}

macro_rules! kv_from_str {
    ($($t:ty => $what:literal),* $(,)?) => {$(
        impl KvValue for $t {
            fn parse_kv(raw: &str, key: &str) -> Result<Self> {
                raw.parse().map_err(|_| bad(key, raw, $what))
            }
            fn to_kv(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

kv_from_str!(usize => "an unsigned integer", u64 => "an unsigned integer", bool => "true/false");

impl KvValue for f64 {
    fn parse_kv(raw: &str, key: &str) -> Result<Self> {
        let v: f64 = raw.parse().map_err(|_| bad(key, raw, "a number"))?;
        if !v.is_finite() {
            return Err(bad(key, raw, "a finite number"));
        }
        Ok(v)
    }
    fn to_kv(&self) -> String {
        // `{:?}` is the shortest representation that parses back exactly.
        format!("{self:?}")
    }
}

impl KvValue for String {
    fn parse_kv(raw: &str, _key: &str) -> Result<Self> {
        Ok(raw.to_string())
    }
    fn to_kv(&self) -> String {
        self.clone()
    }
}

impl<T: KvValue> KvValue for Option<T> {
    fn parse_kv(raw: &str, key: &str) -> Result<Self> {
        if raw == "none" {
            Ok(None)
        } else {
            T::parse_kv(raw, key).map(Some)
        }
    }
    fn to_kv(&self) -> String {
        match self {
            Some(v) => v.to_kv(),
            None => "none".into(),
        }
    }
}

pub trait KvConfig {
    fn to_pairs(&self) -> Vec<(&'static str, String)>;
    /// Sets `key` if it names a field; returns whether it did.
    fn apply(&mut self, key: &str, value: &str) -> Result<bool>;

    fn to_kv_string(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Implements [`KvConfig`] for a struct whose listed fields are all [`KvValue`].
#[macro_export]
macro_rules! kv_config {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::config::KvConfig for $ty {
            fn to_pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), $crate::config::KvValue::to_kv(&self.$field))),*]
            }
            fn apply(&mut self, key: &str, value: &str) -> $crate::Result<bool> {
                match key {
                    $(stringify!($field) => {
                        self.$field = $crate::config::KvValue::parse_kv(value, key)?;
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }
        }
    };
}

/// Splits config text into ordered `key -> value` pairs.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::contract(format!("config line {}: expected key = value, got {line:?}", no + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::contract(format!("config line {}: empty key", no + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::contract(format!("config key {k} assigned twice")));
        }
    }
    Ok(out)
}

/// Applies every assignment in `text` to the targets.
pub fn apply_text(text: &str, targets: &mut [&mut dyn KvConfig]) -> Result<()> {
    for (k, v) in parse_pairs(text)? {
        let mut taken = false;
        for t in targets.iter_mut() {
            taken |= t.apply(&k, &v)?;
        }
        if !taken {
            return Err(Error::contract(format!("unknown config key {k}")));
        }
    }
    Ok(())
}

pub fn apply_file(path: impl AsRef<Path>, targets: &mut [&mut dyn KvConfig]) -> Result<()> {
    apply_text(&std::fs::read_to_string(path)?, targets)
}
