//! Effective settings: built-in defaults, then a `key=value` file, then flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::CliError;

/// `key = value` lines; `#` starts a comment, dashes in keys become underscores.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config file {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::usage(format!("{}:{}: expected key=value, got {raw:?}", path.display(), i + 1)));
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(CliError::usage(format!("{}:{}: empty key", path.display(), i + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

fn flag_name(key: &str) -> String {
    format!("--{}", key.replace('_', "-"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Merges `file` and then `flags` over `defaults`. Every key must appear
    /// in `defaults` or `optional`.
    pub fn merge(
        defaults: &[(&str, &str)],
        optional: &[&str],
        file: &BTreeMap<String, String>,
        flags: &[(&str, Option<String>)],
    ) -> Result<Self, CliError> {
        let known = |k: &str| defaults.iter().any(|(d, _)| *d == k) || optional.contains(&k);
        let mut values: BTreeMap<String, String> = defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in file {
            if !known(k) {
                let mut valid: Vec<&str> = defaults.iter().map(|(k, _)| *k).chain(optional.iter().copied()).collect();
                valid.sort_unstable();
                return Err(CliError::usage(format!("unknown config key {k:?} (valid keys: {})", valid.join(", "))));
            }
            values.insert(k.clone(), v.clone());
        }
        for (k, v) in flags {
            if let Some(v) = v {
                if !known(k) {
                    return Err(CliError::usage(format!("{} does not apply here", flag_name(k))));
                }
                values.insert(k.to_string(), v.clone());
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::usage(format!("{}: cannot parse {v:?}", flag_name(key))))
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.get(key)?.ok_or_else(|| CliError::usage(format!("{} is required", flag_name(key))))
    }

    /// Comma-separated numbers; an empty value is an empty list.
    pub fn list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let v = self.raw(key).unwrap_or("").trim();
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite() && *x >= 0.0)
                    .ok_or_else(|| CliError::usage(format!("{}: {p:?} is not a non-negative number", flag_name(key))))
            })
            .collect()
    }

    /// Sorted `key=value` lines.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nepochs = 3\nbatch-size=8  # trailing\n\n").unwrap();
        let file = parse_config_file(&path).unwrap();
        let s = Settings::merge(
            &[("epochs", "25"), ("batch_size", "32"), ("seed", "0")],
            &["data"],
            &file,
            &[("seed", Some("7".into())), ("epochs", None), ("batch_size", Some("4".into()))],
        )
        .unwrap();
        assert_eq!(s.require::<usize>("epochs").unwrap(), 3);
        assert_eq!(s.require::<usize>("batch_size").unwrap(), 4);
        assert_eq!(s.get::<String>("data").unwrap(), None);
        assert_eq!(s.echo(), "batch_size=4\nepochs=3\nseed=7\n");
    }

    #[test]
    fn bad_keys_and_values_are_usage_errors() {
        let file = BTreeMap::from([("color".to_string(), "red".to_string())]);
        let err = Settings::merge(&[("seed", "0")], &[], &file, &[]).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("seed"), "{}", err.message);
        let s = Settings::merge(&[("seed", "x"), ("noise", "3, 5,")], &[], &BTreeMap::new(), &[]).unwrap();
        assert!(s.get::<u64>("seed").is_err());
        assert!(s.list("noise").is_err());
        let s = Settings::merge(&[("noise", "")], &[], &BTreeMap::new(), &[]).unwrap();
        assert!(s.list("noise").unwrap().is_empty());
    }
}
