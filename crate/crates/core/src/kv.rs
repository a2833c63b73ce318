//! Line-oriented `key = value` files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

pub fn render<K: Display, V: Display>(pairs: impl IntoIterator<Item = (K, V)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Removes `key` from `map` and parses it, leaving `target` unchanged when
/// the key is absent.
pub fn take<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str, target: &mut T) -> Result<()>
where
    T::Err: Display,
{
    if let Some(v) = map.remove(key) {
        *target = v
            .parse()
            .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))?;
    }
    Ok(())
}

/// Fails on keys nobody consumed.
pub fn reject_unknown(map: &BTreeMap<String, String>, what: &str) -> Result<()> {
    match map.keys().next() {
        Some(k) => Err(Error::Config(format!("unknown {what} key {k:?}"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let m = parse("# c\n a = 1 \n\nb=x y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x y");
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(parse("a = 1\na = 2").is_err());
        assert!(parse("nonsense").is_err());
    }

    #[test]
    fn take_parses_in_place() {
        let mut m = parse("n = 3").unwrap();
        let mut n = 0usize;
        take(&mut m, "n", &mut n).unwrap();
        assert_eq!(n, 3);
        assert!(reject_unknown(&m, "test").is_ok());
    }
}
