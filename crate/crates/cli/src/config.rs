use obsfit::experiment::{Experiment, ExperimentConfig};
use obsfit::Error;
use sha2::{Digest, Sha256};
use std::path::Path;

/// A configuration problem, reported with the line it comes from when known.
#[derive(Debug)]
pub struct ConfigError(pub String);

pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub experiment: Experiment,
    /// SHA-256 of the effective configuration (after overrides) as JSON.
    pub hash: String,
}

pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<LoadedConfig, ConfigError> {
    let (text, name) = match path {
        Some(p) => (
            std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?,
            p.display().to_string(),
        ),
        None => (String::new(), "<defaults>".to_string()),
    };
    let mut config: ExperimentConfig = toml::from_str(&text).map_err(|e| ConfigError(format!("{name}: {e}")))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let experiment = config.resolve().map_err(|e| match &e {
        Error::Config { key, .. } => match locate_key(&text, key) {
            Some(line) => ConfigError(format!("{name}:{line}: {e}")),
            None => ConfigError(format!("{name}: {e}")),
        },
        _ => ConfigError(format!("{name}: {e}")),
    })?;
    let json = serde_json::to_string(&config).expect("configuration serializes");
    let hash = Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    Ok(LoadedConfig { config, experiment, hash })
}

/// 1-based line of a dotted key such as `model.drift` or `sweep`.
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut section: Vec<String> = vec![];
    let mut fallback = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            let name = line.trim_matches(|c| c == '[' || c == ']').trim();
            section = name.split('.').map(|s| s.trim().to_string()).collect();
            if section == parts {
                return Some(i + 1);
            }
            if parts.starts_with(&[section[0].as_str()]) && fallback.is_none() {
                fallback = Some(i + 1);
            }
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let mut full = section.clone();
        full.extend(lhs.trim().split('.').map(|s| s.trim().to_string()));
        if full == parts {
            return Some(i + 1);
        }
    }
    fallback
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_found_in_sections() {
        let text = "seed = 3\nobservation = \"sin(\"\n\n[model]\nname = \"ou\"\ndrift = \"x\"\n";
        assert_eq!(locate_key(text, "observation"), Some(2));
        assert_eq!(locate_key(text, "model.drift"), Some(6));
        assert_eq!(locate_key(text, "model"), Some(4));
        assert_eq!(locate_key(text, "model.theta"), Some(4));
        assert_eq!(locate_key(text, "noise"), None);
    }

    #[test]
    fn defaults_resolve_and_hash_is_stable() {
        let a = load(None, None).unwrap();
        let b = load(None, None).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.hash.len(), 64);
        let c = load(None, Some(9)).unwrap();
        assert_ne!(a.hash, c.hash);
        assert_eq!(c.experiment.seed, 9);
    }
}
