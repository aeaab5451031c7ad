//! Flat `key = value` run configuration. Every key has a default; unknown
//! keys are rejected so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// `(key, default, description)` for every recognized key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.dir", "data", "scene root; synth writes <dir>/train and <dir>/val"),
    ("data.n_train", "64", "training scenes"),
    ("data.n_val", "16", "validation scenes"),
    (
        "data.seed",
        "1",
        "seed of the first training scene; validation seeds start at seed + 100000",
    ),
    ("data.n_cameras", "1", "cameras per scene (1 or 2)"),
    ("data.n_meteors", "3", "meteors per scene"),
    ("data.n_platforms", "1", "platforms per scene"),
    ("data.lighting", "bright", "bright | dim"),
    ("grid.x_min", "0", "BEV x range start (m)"),
    ("grid.x_max", "16", "BEV x range end (m)"),
    ("grid.y_min", "-8", "BEV y range start (m)"),
    ("grid.y_max", "8", "BEV y range end (m)"),
    ("grid.cell", "0.5", "BEV cell size (m)"),
    ("depth.bins", "16", "categorical depth bins"),
    ("depth.min", "1", "first bin edge (m)"),
    ("depth.max", "20", "last bin edge (m)"),
    ("encoder.channels", "8,16,16", "camera encoder stage widths"),
    ("encoder.downsample", "1,1,0", "per-stage 2x downsampling flags"),
    ("pillar.max_points", "32", "points kept per pillar"),
    ("pillar.embed", "16", "pillar embedding width"),
    ("fusion.channels", "32", "fused BEV width"),
    ("align.enabled", "true", "contrastive alignment (training only)"),
    ("align.tau", "0.07", "InfoNCE temperature"),
    (
        "align.symmetric",
        "false",
        "also score depth anchors against image candidates",
    ),
    ("align.weight", "0.1", "loss weight of the alignment term"),
    ("auxbranch.enabled", "true", "camera auxiliary branch (training only)"),
    ("auxbranch.weight", "0.5", "loss weight of the auxiliary detection term"),
    ("adapter.enabled", "true", "adapters in the camera encoder"),
    ("adapter.r", "4", "adapter bottleneck ratio"),
    ("adapter.slots", "2B,3B", "adapter slots, <stage><A|B> comma separated"),
    ("coordatt.enabled", "true", "coordinate attention after fusion"),
    ("coordatt.reduction", "8", "coordinate attention reduction ratio"),
    ("detect.k_max", "20", "peaks kept per sample before thresholding"),
    ("detect.score_thresh", "0.1", "minimum detection score"),
    ("detect.reg_weight", "1", "weight of the box regression loss"),
    ("model.seed", "0", "parameter initialization seed"),
    ("train.steps", "4000", "optimizer steps"),
    ("train.batch", "2", "scenes per step"),
    ("train.lr", "0.01", "initial learning rate (cosine decay to 0)"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.clip", "5", "global gradient-norm clip, 0 disables"),
    ("train.seed", "0", "batch-order seed"),
    (
        "train.init",
        "",
        "checkpoint whose leaves seed same-named, same-shaped model leaves (e.g. before delta tuning)",
    ),
    (
        "train.checkpoint_every",
        "0",
        "extra checkpoint interval in steps, 0 = final only",
    ),
    (
        "freeze.mode",
        "full",
        "full | delta (delta freezes the camera encoder outside adapters)",
    ),
    ("eval.split", "val", "train | val"),
    (
        "eval.checkpoint",
        "",
        "checkpoint to score; empty = <out.dir>/checkpoints/final.ckpt",
    ),
    (
        "ablate.rows",
        "0000,1000,0100,0010,1100,1110,1111",
        "on/off rows over align,auxbranch,coordatt,adapter; or grid:<k> for the full 2^k grid",
    ),
    ("ablate.seeds", "0,1,2", "model/train seeds per row"),
    ("report.scenes", "4", "scenes rendered as BEV overlays"),
    ("out.dir", "out", "output directory"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} is not declared"))
    }

    fn typed<V: std::str::FromStr>(&self, key: &str, what: &str) -> Result<V> {
        let s = self.str(key);
        s.parse()
            .map_err(|_| Error::Config(format!("{key} = {s:?} is not {what}")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.typed(key, "a number")?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{key} must be finite")));
        }
        Ok(v)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.typed(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.typed(key, "a non-negative integer")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            s => Err(Error::Config(format!("{key} = {s:?} is not a boolean"))),
        }
    }

    pub fn list<V: std::str::FromStr>(&self, key: &str) -> Result<Vec<V>> {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse element {s:?}")))
            })
            .collect()
    }

    /// Canonical text form: every key, sorted, one `key = value` per line.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the snapshot, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot().as_bytes()))
    }
}

/// SHA-256 of arbitrary bytes, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
