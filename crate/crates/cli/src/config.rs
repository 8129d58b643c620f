//! `key = value` run configuration with per-command key tables.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::Failure;

/// One accepted setting. `flag` is the long option that overrides it.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub flag: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, flag: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        flag,
        default,
        help,
    }
}

/// Keys every command accepts.
pub const COMMON_KEYS: &[Key] = &[
    key("seed", "seed", "0", "master seed"),
    key("out", "out", "out", "output directory"),
];

pub const TRAIN_KEYS: &[Key] = &[
    key("task", "task", "token", "dataset; only `token`"),
    key("model", "model", "rehub", "rehub | gcn_baseline"),
    key("path_len", "path-len", "32", "nodes per token-task path graph"),
    key("train_graphs", "train-graphs", "512", "training graphs"),
    key("test_graphs", "test-graphs", "256", "held-out graphs"),
    key("batch_size", "batch-size", "32", "graphs per batch"),
    key("hidden_dim", "hidden-dim", "16", "hidden width d"),
    key("heads", "heads", "2", "attention heads"),
    key("layers", "layers", "2", "layers L"),
    key("hub_ratio", "hub-ratio", "1", "hubs per graph = round(r sqrt(N))"),
    key("static_hubs", "static-hubs", "none", "fixed hub count, or none"),
    key("k", "k", "3", "hubs per spoke"),
    key("spoke_encoder", "spoke-encoder", "false", "encode spokes before averaging into hubs"),
    key("hub_init", "hub-init", "cluster_mean", "cluster_mean | learned"),
    key("clustering", "clustering", "bfs_balanced", "bfs_balanced | random | balanced_random"),
    key("assignment", "assignment", "feature_similarity", "feature_similarity | random | balanced_random"),
    key("reassignment", "reassignment", "attention", "attention | none | random | balanced_random"),
    key("fc_mode", "fc-mode", "false", "connect every spoke to every hub"),
    key("layernorm", "layernorm", "true", "normalize after each residual"),
    key("lr", "lr", "3e-4", "Adam learning rate"),
    key("steps", "steps", "1000", "optimizer steps"),
];

pub const SCALE_KEYS: &[Key] = &[
    key(
        "sizes",
        "sizes",
        "1000,2000,4000,8000,16000,32000,64000",
        "comma-separated graph sizes for the hub model",
    ),
    key("dense_sizes", "dense-sizes", "256,512,1000,2000,4000", "graph sizes for the dense reference"),
    key("dense_budget", "dense-budget", "100000000", "element budget for dense runs"),
    key("input_dim", "input-dim", "4", "node feature width"),
    key("hidden_dim", "hidden-dim", "8", "hidden width d"),
    key("heads", "heads", "2", "attention heads"),
    key("layers", "layers", "1", "layers L"),
    key("hub_ratio", "hub-ratio", "1", "hubs per graph = round(r sqrt(N))"),
    key("k", "k", "3", "hubs per spoke"),
];

pub const ANALYZE_KEYS: &[Key] = &[
    key("checkpoint", "checkpoint", "", "checkpoint manifest; defaults to <out>/checkpoint.json"),
    key("task", "task", "token", "evaluation dataset; only `token`"),
    key("path_len", "path-len", "32", "nodes per token-task path graph"),
    key("test_graphs", "test-graphs", "256", "evaluation graphs"),
    key("batch_size", "batch-size", "32", "graphs per batch"),
];

pub const GEN_GRAPH_KEYS: &[Key] = &[
    key("n", "n", "10", "node count"),
    key("d", "d", "3", "degree"),
    key("file", "file", "graph.json", "output file name inside the output directory"),
];

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Failure::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Failure::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Settings for one command after defaults, file and flags are merged.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then `file_pairs`, then `overrides`; later sources win.
    /// Keys outside `keys` and [`COMMON_KEYS`] are rejected.
    pub fn resolve(
        command: &str,
        keys: &[Key],
        file_pairs: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self, Failure> {
        let mut values: BTreeMap<String, String> = COMMON_KEYS
            .iter()
            .chain(keys)
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        for (k, v) in file_pairs.iter().chain(overrides) {
            match values.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(Failure::Config(format!("unknown key `{k}` for `{command}`"))),
            }
        }
        Ok(Self {
            command: command.to_string(),
            values,
        })
    }

    pub fn from_file(command: &str, keys: &[Key], path: &Path, overrides: &[(String, String)]) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::resolve(command, keys, &parse_pairs(&text)?, overrides)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a key of `{}`", self.command))
    }

    pub fn get<T>(&self, key: &str) -> Result<T, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| Failure::Config(format!("key `{key}`: cannot parse `{v}`: {e}")))
    }

    /// `none` maps to `None`.
    pub fn get_opt<T>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        if self.raw(key) == "none" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn get_list<T>(&self, key: &str) -> Result<Vec<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| Failure::Config(format!("key `{key}`: cannot parse `{s}`: {e}")))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.get("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    /// The resolved settings in config-file form; feeding it back through
    /// `--config` reproduces the run.
    pub fn echo(&self) -> String {
        let mut s = format!("# rehub {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
