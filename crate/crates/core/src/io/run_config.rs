//! Flat `key = value` run configs.
//!
//! One entry per line, `#` starts a comment line, blank lines are ignored.
//! Every command has a fixed key schema: unknown keys are rejected, missing
//! optional keys take their defaults, and missing required keys are errors.
//! The resolved document (all keys, defaults filled in) is written next to a
//! run's outputs and can be fed back through `rerun`.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How a schema key behaves when absent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyDefault {
    Required,
    Value(&'static str),
    /// Absent means "not set"; the resolved config omits it.
    Unset,
}

#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: KeyDefault,
    pub help: &'static str,
}

const fn req(key: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default: KeyDefault::Required, help }
}

const fn val(key: &'static str, value: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default: KeyDefault::Value(value), help }
}

const fn opt(key: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default: KeyDefault::Unset, help }
}

const SINKHORN_KEYS: [KeySpec; 3] = [
    val("epsilon", "0.1", "entropic regularization"),
    val("sinkhorn_tolerance", "1e-6", "max marginal deviation at convergence"),
    val("sinkhorn_max_iterations", "10000", "Sinkhorn iteration cap"),
];

const CONVERT_KEYS: &[KeySpec] = &[
    req("source", "source feature file"),
    req("reference", "reference feature file"),
    req("out", "converted feature file"),
    opt("report", "JSON report path"),
    val("method", "sinkvc", "sinkvc, knn or fmvc"),
    val("k", "4", "reference frames averaged per output frame"),
    opt("model", "trained velocity field for fmvc; trained on the fly when unset"),
    val("seed", "0", "root seed"),
    val("dtype", "f64", "output dtype, f64 or f32"),
    SINKHORN_KEYS[0],
    SINKHORN_KEYS[1],
    SINKHORN_KEYS[2],
    val("cost", "cosine", "fmvc plan cost, cosine or squared_euclidean"),
    val("hidden_dims", "512,512,512", "velocity field hidden widths"),
    val("activation", "tanh", "relu or tanh"),
    val("batch_size", "1000", "flow matching batch size"),
    val("iterations", "1000", "flow matching Adam steps"),
    val("learning_rate", "0.001", "flow matching learning rate"),
    val("ode_steps", "100", "integration steps"),
    val("ode_method", "euler", "euler or rk4"),
];

const TRAIN_FM_KEYS: &[KeySpec] = &[
    req("source", "source feature file"),
    req("reference", "reference feature file"),
    req("out_model", "model file"),
    req("seed", "root seed"),
    SINKHORN_KEYS[0],
    SINKHORN_KEYS[1],
    SINKHORN_KEYS[2],
    val("cost", "cosine", "plan cost, cosine or squared_euclidean"),
    val("hidden_dims", "512,512,512", "velocity field hidden widths"),
    val("activation", "tanh", "relu or tanh"),
    val("batch_size", "1000", "batch size"),
    val("iterations", "1000", "Adam steps"),
    val("learning_rate", "0.001", "learning rate"),
    val("ode_steps", "100", "integration steps recorded for later use"),
    val("ode_method", "euler", "euler or rk4"),
];

const TRAIN_NOT_KEYS: &[KeySpec] = &[
    req("dataset_spec", "JSON conditional dataset description"),
    req("out_model", "model file"),
    req("seed", "root seed"),
    val("extremal", "false", "constrain f <= 0 and weight the target term by w"),
    opt("w", "target weight >= 1; 12 when extremal, else 1"),
    val("inner_steps", "10", "map updates per potential update"),
    val("batch_size", "128", "batch size"),
    val("map_lr", "0.001", "map learning rate"),
    val("potential_lr", "0.001", "potential learning rate"),
    val("weight_decay", "1e-10", "decoupled weight decay"),
    val("outer_iterations", "5000", "potential updates"),
    val("hidden_dims", "128,128", "hidden widths of both networks"),
    val("activation", "tanh", "relu or tanh"),
    val("log_every", "500", "outer iterations between checkpoints"),
    val("eval_samples", "256", "samples per condition at checkpoints"),
];

const EVAL_KEYS: &[KeySpec] = &[
    req("a", "first feature file"),
    req("b", "second feature file"),
    val("metrics", "w2,fd,theorem1", "comma list of w2, fd, theorem1"),
    val("w2_mode", "auto", "auto, exact_small, assignment or sinkhorn"),
    opt("report", "JSON report path"),
];

const SYNTH_KEYS: &[KeySpec] = &[
    req("task", "gauss_shift, gauss_affine, clusters_outlier or two_conditions"),
    req("out", "output directory"),
    req("seed", "root seed"),
    val("n", "1000", "samples per file"),
    val("dim", "2", "feature dimension"),
];

pub const COMMANDS: &[&str] = &["convert", "train-fm", "train-not", "eval", "synth"];

pub fn schema(command: &str) -> Result<&'static [KeySpec]> {
    match command {
        "convert" => Ok(CONVERT_KEYS),
        "train-fm" => Ok(TRAIN_FM_KEYS),
        "train-not" => Ok(TRAIN_NOT_KEYS),
        "eval" => Ok(EVAL_KEYS),
        "synth" => Ok(SYNTH_KEYS),
        other => Err(Error::Validation(format!("unknown command `{other}` (expected one of {})", COMMANDS.join(", ")))),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(Error::Format(format!("config line {}: bad key `{key}`", lineno + 1)));
            }
            if cfg.entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Format(format!("config line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// `self` with every entry of `overrides` applied on top.
    pub fn merged(&self, overrides: &RunConfig) -> RunConfig {
        let mut out = self.clone();
        for (k, v) in &overrides.entries {
            out.entries.insert(k.clone(), v.clone());
        }
        out
    }

    pub fn command(&self) -> Result<&str> {
        self.get("command").ok_or_else(|| Error::MissingKey("command".into()))
    }

    /// Checks keys against the command schema and fills defaults.
    pub fn resolve(&self) -> Result<RunConfig> {
        let command = self.command()?;
        let keys = schema(command)?;
        for key in self.entries.keys() {
            if key != "command" && !keys.iter().any(|s| s.key == key) {
                return Err(Error::UnknownKey(key.clone()));
            }
        }
        let mut out = RunConfig::new();
        out.set("command", command);
        for spec in keys {
            match (self.get(spec.key), spec.default) {
                (Some(v), _) => out.set(spec.key, v),
                (None, KeyDefault::Value(d)) => out.set(spec.key, d),
                (None, KeyDefault::Unset) => {}
                (None, KeyDefault::Required) => return Err(Error::MissingKey(spec.key.into())),
            }
        }
        Ok(out)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key).ok_or_else(|| Error::MissingKey(key.into()))?;
        raw.parse()
            .map_err(|_| Error::Validation(format!("config key `{key}`: cannot parse `{raw}`")))
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            Some(_) => self.require(key).map(Some),
            None => Ok(None),
        }
    }

    /// A comma-separated list such as `512,512,512`.
    pub fn require_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.get(key).ok_or_else(|| Error::MissingKey(key.into()))?;
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|part| {
                part.trim()
                    .parse()
                    .map_err(|_| Error::Validation(format!("config key `{key}`: cannot parse `{}`", part.trim())))
            })
            .collect()
    }

    /// `command` first, then the remaining keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run config\n");
        if let Some(c) = self.get("command") {
            out.push_str(&format!("command = {c}\n"));
        }
        for (k, v) in &self.entries {
            if k != "command" {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let cfg = RunConfig::parse("# hi\n\ncommand = synth\n  seed=7  \nout = a b/c\n").unwrap();
        assert_eq!(cfg.get("seed"), Some("7"));
        assert_eq!(cfg.get("out"), Some("a b/c"));
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(RunConfig::parse("seed 7"), Err(Error::Format(_))));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(Error::Format(_))));
        assert!(matches!(RunConfig::parse("se ed = 1"), Err(Error::Format(_))));
    }

    #[test]
    fn resolve_fills_defaults_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse("command = synth\ntask = gauss_shift\nout = d\nseed = 3\n").unwrap();
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.get("n"), Some("1000"));
        assert_eq!(resolved.get("dim"), Some("2"));
        let mut bad = cfg.clone();
        bad.set("colour", "red");
        assert!(matches!(bad.resolve(), Err(Error::UnknownKey(k)) if k == "colour"));
    }

    #[test]
    fn missing_required_key_is_named() {
        let cfg = RunConfig::parse("command = train-not\ndataset_spec = d.json\nout_model = m\n").unwrap();
        assert!(matches!(cfg.resolve(), Err(Error::MissingKey(k)) if k == "seed"));
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = RunConfig::parse("command = convert\nsource = a\nreference = b\nout = c\n").unwrap().resolve().unwrap();
        let text = cfg.to_text();
        assert!(text.contains("\ncommand = convert\n"));
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.resolve().unwrap().to_text(), text);
        assert!(again.get("model").is_none());
    }

    #[test]
    fn typed_getters() {
        let cfg = RunConfig::parse("a = 1,2, 3\nb = x\nc = 0.5").unwrap();
        assert_eq!(cfg.require_list::<usize>("a").unwrap(), vec![1, 2, 3]);
        assert!(cfg.require::<f64>("b").is_err());
        assert_eq!(cfg.require::<f64>("c").unwrap(), 0.5);
        assert!(matches!(cfg.require::<f64>("d"), Err(Error::MissingKey(_))));
        assert_eq!(cfg.optional::<f64>("d").unwrap(), None);
    }
}
