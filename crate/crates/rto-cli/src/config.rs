//! Flat key = value run configuration.
//!
//! A run starts from a preset, merges an optional config file over it, then
//! applies command-line overrides. Unknown keys are rejected at every layer
//! and the fully resolved document is written next to the outputs so any
//! artifact directory is self-describing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Every known key with its baseline (l-bracket-30) default.
const DEFAULTS: &[(&str, &str)] = &[
    ("problem", "l-bracket"),
    ("grid_n", "30"),
    ("grid_ny", "10"),
    ("arm_fraction", "0.4"),
    ("sink_fraction", "0.3"),
    ("field_seed", "7"),
    ("magnitude", "1.0"),
    ("volume_fraction", "0.4"),
    ("penalty", "3.0"),
    ("theta_min", "0.001"),
    ("lambda", "1.0"),
    ("quadrature_points", "7"),
    ("filter_radius", "1.1"),
    ("move_limit", "0.2"),
    ("oc_exponent", "0.5"),
    ("simp_max_iters", "200"),
    ("change_tol", "0.01"),
    ("corpus_n", "160"),
    ("corpus_seed", "100"),
    ("k_exclude", "10"),
    ("n_test", "25"),
    ("split_seed", "101"),
    ("latent_dim", "2"),
    ("hidden", "256,64"),
    ("pool_window", "3"),
    ("vae_epochs", "2000"),
    ("vae_batch", "16"),
    ("vae_lr", "0.001"),
    ("vae_seed", "103"),
    ("vae_init_seed", "102"),
    ("surrogate_hidden", "256,64"),
    ("surrogate_epochs", "400"),
    ("surrogate_batch", "16"),
    ("surrogate_lr", "0.001"),
    ("surrogate_seed", "105"),
    ("surrogate_init_seed", "104"),
    ("descent_lr", "0.05"),
    ("descent_max_iters", "500"),
    ("stall_tol", "1e-6"),
    ("stall_patience", "10"),
    ("n_init", "100"),
    ("n_restarts", "3"),
    ("descent_seed", "106"),
    ("frame_every", "25"),
    ("workers", "0"),
];

/// Preset overrides on top of [`DEFAULTS`].
const PRESETS: &[(&str, &[(&str, &str)])] = &[
    ("l-bracket-30", &[]),
    (
        "l-bracket-100",
        &[
            ("grid_n", "100"),
            ("filter_radius", "1.5"),
            ("corpus_n", "1000"),
            ("k_exclude", "10"),
            ("n_test", "90"),
            ("hidden", "5000,2500,1000,500,100,50,10"),
            ("surrogate_hidden", "5000,2500,1000,500,100,50,10"),
            ("pool_window", "9"),
            ("vae_epochs", "100"),
            ("vae_lr", "0.0001"),
            ("surrogate_epochs", "200"),
            ("surrogate_lr", "0.0001"),
        ],
    ),
    (
        "heat-sink-32",
        &[
            ("problem", "heat-sink"),
            ("grid_n", "32"),
            // members at least two elements thick survive 0/1 projection
            ("filter_radius", "2.2"),
            ("corpus_n", "160"),
            ("k_exclude", "10"),
            ("n_test", "25"),
            ("corpus_seed", "200"),
            ("split_seed", "201"),
            ("vae_init_seed", "202"),
            ("vae_seed", "203"),
            ("surrogate_init_seed", "204"),
            ("surrogate_seed", "205"),
            ("descent_seed", "206"),
        ],
    ),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(name, _)| *name).collect()
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, String> {
        let overrides = PRESETS
            .iter()
            .find(|(p, _)| *p == name)
            .map(|(_, o)| *o)
            .ok_or_else(|| {
                format!("unknown preset '{name}' (available: {})", preset_names().join(", "))
            })?;
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect();
        for &(k, v) in overrides {
            values.insert(k.to_string(), v.to_string());
        }
        Ok(RunConfig { values })
    }

    /// Merges `key = value` lines from a file; `#` starts a comment.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                format!("{}:{}: expected key = value, got '{raw}'", path.display(), lineno + 1)
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if !DEFAULTS.iter().any(|&(k, _)| k == key) {
            return Err(format!("unknown config key '{key}'"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` override arguments.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), String> {
        for s in sets {
            let (key, value) =
                s.split_once('=').ok_or_else(|| format!("--set expects key=value, got '{s}'"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| {
            panic!("key '{key}' missing from defaults table");
        })
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, String> {
        self.get(key).parse().map_err(|e| format!("key '{key}': {e}"))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, String> {
        self.get(key).parse().map_err(|e| format!("key '{key}': {e}"))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, String> {
        self.get(key).parse().map_err(|e| format!("key '{key}': {e}"))
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>, String> {
        self.get(key)
            .split(',')
            .map(|t| t.trim().parse().map_err(|e| format!("key '{key}': {e}")))
            .collect()
    }

    /// Writes the resolved document: one sorted `key = value` line per key.
    pub fn write_resolved(&self, path: &Path) -> Result<(), String> {
        let mut doc = String::new();
        for (k, v) in &self.values {
            writeln!(doc, "{k} = {v}").unwrap();
        }
        std::fs::write(path, doc).map_err(|e| format!("cannot write {}: {e}", path.display()))
    }
}
