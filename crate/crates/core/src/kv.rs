//! `key=value` text blocks used for config files and checkpoint descriptors.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses one pair per line. Blank lines and lines starting with `#` are
/// skipped; surrounding whitespace is trimmed.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::format(
                "config",
                format!("line {}: expected key=value, got {line:?}", no + 1),
            ));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::format("config", format!("line {}: empty key", no + 1)));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_pairs(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}

/// Parses a value, naming the key on failure.
pub fn parse_value<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("bad value {value:?} for {key}: {e}")))
}

/// Comma-separated list.
pub fn parse_list<T>(key: &str, value: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .split(',')
        .map(|part| parse_value(key, part.trim()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let text = "# header\n a = 1 \n\nb=x=y\n";
        let pairs = parse_pairs(text).unwrap();
        assert_eq!(
            pairs,
            vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]
        );
        assert_eq!(parse_pairs(&format_pairs(&pairs)).unwrap(), pairs);
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_pairs("novalue\n").is_err());
        assert!(parse_pairs("=3\n").is_err());
        assert!(parse_value::<usize>("k", "-1").is_err());
        assert_eq!(parse_list::<usize>("k", "16, 32,64").unwrap(), vec![16, 32, 64]);
    }
}
