//! Optional JSON config file and the flag-over-file precedence rule.

use std::path::{Path, PathBuf};

use crate::CliError;

/// Flat bag of optional settings; each subcommand reads the keys it uses.
/// Command-line flags always override file values.
#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub epsilons: Option<Vec<f64>>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub overparam: Option<bool>,
    pub weighting: Option<String>,
    pub sieve_degree: Option<usize>,
    pub bandwidth: Option<f64>,
    pub timeout_secs: Option<u64>,
    pub on_failure: Option<String>,
    pub truth: Option<f64>,
    pub out: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config file {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Usage(format!("config file {}: {e}", path.display()))
        })
    }
}

/// `flag.or(file).unwrap_or(default)` — the whole precedence rule.
pub fn resolve<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Same, but with no default: stays optional.
pub fn resolve_opt<T: Clone>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        assert_eq!(resolve(Some(500usize), Some(2000), 100), 500);
        assert_eq!(resolve(None, Some(2000usize), 100), 2000);
        assert_eq!(resolve::<usize>(None, None, 100), 100);
        assert_eq!(resolve_opt(Some(1.5), Some(2.5)), Some(1.5));
        assert_eq!(resolve_opt(None, Some(2.5)), Some(2.5));
    }

    #[test]
    fn unknown_config_key_is_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"n": 2000, "bogus_key": 1}"#).unwrap();
        let err = FileConfig::load(Some(&path)).unwrap_err();
        match err {
            CliError::Usage(msg) => assert!(msg.contains("bogus_key"), "{msg}"),
            other => panic!("wrong error class: {other:?}"),
        }
    }

    #[test]
    fn absent_config_file_is_default() {
        let cfg = FileConfig::load(None).unwrap();
        assert!(cfg.n.is_none() && cfg.epsilons.is_none());
    }
}
