//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known; unset
//! keys keep their defaults. [`RunConfig::to_text`] writes every key, so a
//! written config reproduces the run exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Family;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub f32: bool,

    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training samples used (0 = all), taken in split order.
    pub train_limit: usize,
    pub val_limit: usize,

    pub partial_points: usize,
    pub gt_points: usize,
    pub ref_points: usize,
    pub shapes_per_family: usize,
    pub views_per_shape: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seen_families: Vec<Family>,
    pub unseen_families: Vec<Family>,
    pub sparse_points: usize,
    pub sparse_sigma: f64,

    pub corpus: PathBuf,
    pub index: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            seed: 0,
            f32: false,
            lr: 2e-4,
            lr_decay: 0.7,
            decay_every: 50,
            epochs: 200,
            batch_size: 8,
            train_limit: 0,
            val_limit: 0,
            partial_points: 2048,
            gt_points: 2048,
            ref_points: 2048,
            shapes_per_family: 20,
            views_per_shape: 2,
            val_fraction: 0.15,
            test_fraction: 0.15,
            seen_families: vec![Family::Box, Family::Chair, Family::Lamp],
            unseen_families: vec![Family::Cylinder, Family::SphereUnion],
            sparse_points: 256,
            sparse_sigma: 0.01,
            corpus: PathBuf::from("corpus"),
            index: PathBuf::from("corpus/index.bin"),
            checkpoints: PathBuf::from("runs/checkpoints"),
            reports: PathBuf::from("runs/reports"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_families(key: &str, v: &str) -> Result<Vec<Family>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Family>().map_err(|e| Error::Config(format!("{key}: {e}"))))
        .collect()
}

fn families_text(f: &[Family]) -> String {
    f.iter().map(|x| x.as_str()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Small preset used by the examples and the acceptance experiments.
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig {
                d_model: 32,
                d_global: 64,
                blocks: 2,
                heads: 4,
                input_proxies: 32,
                ref_proxies: 32,
                radius: 0.25,
                max_k: 12,
                seeds: 128,
                group: 4,
                ..ModelConfig::default()
            },
            lr: 1e-3,
            decay_every: 100,
            epochs: 60,
            batch_size: 4,
            partial_points: 512,
            gt_points: 512,
            ref_points: 512,
            shapes_per_family: 8,
            views_per_shape: 2,
            val_fraction: 0.25,
            test_fraction: 0.25,
            ..RunConfig::default()
        }
    }

    pub fn precision(&self) -> Precision {
        if self.f32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = epoch / self.decay_every.max(1);
        self.lr * self.lr_decay.powi(k as i32)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "d_model" => m.d_model = parse(key, v)?,
            "d_global" => m.d_global = parse(key, v)?,
            "blocks" => m.blocks = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "input_proxies" => m.input_proxies = parse(key, v)?,
            "ref_proxies" => m.ref_proxies = parse(key, v)?,
            "radius" => m.radius = parse(key, v)?,
            "max_k" => m.max_k = parse(key, v)?,
            "seeds" => m.seeds = parse(key, v)?,
            "group" => m.group = parse(key, v)?,
            "rounds" => m.rounds = parse(key, v)?,
            "k_geo" => m.k_geo = parse(key, v)?,
            "k_sem" => m.k_sem = parse(key, v)?,
            "gate_neighbors" => m.gate_neighbors = parse(key, v)?,
            "image_res" => m.image_res = parse(key, v)?,
            "patch" => m.patch = parse(key, v)?,
            "use_pos_input" => m.use_pos_input = parse_bool(key, v)?,
            "use_sacg" => m.use_sacg = parse_bool(key, v)?,
            "progressive_decode" => m.progressive_decode = parse_bool(key, v)?,
            "use_reference" => m.use_reference = parse_bool(key, v)?,
            "use_image" => m.use_image = parse_bool(key, v)?,
            "global_from_reference" => m.global_from_reference = parse_bool(key, v)?,
            "ft_reference_pair" => m.ft_reference_pair = parse_bool(key, v)?,
            "w_seed" => m.weights.seed = parse(key, v)?,
            "w_output" => m.weights.output = parse(key, v)?,
            "w_ft" => m.weights.ft = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "f32" => self.f32 = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "decay_every" => self.decay_every = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "train_limit" => self.train_limit = parse(key, v)?,
            "val_limit" => self.val_limit = parse(key, v)?,
            "partial_points" => self.partial_points = parse(key, v)?,
            "gt_points" => self.gt_points = parse(key, v)?,
            "ref_points" => self.ref_points = parse(key, v)?,
            "shapes_per_family" => self.shapes_per_family = parse(key, v)?,
            "views_per_shape" => self.views_per_shape = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "seen_families" => self.seen_families = parse_families(key, v)?,
            "unseen_families" => self.unseen_families = parse_families(key, v)?,
            "sparse_points" => self.sparse_points = parse(key, v)?,
            "sparse_sigma" => self.sparse_sigma = parse(key, v)?,
            "corpus" => self.corpus = PathBuf::from(v),
            "index" => self.index = PathBuf::from(v),
            "checkpoints" => self.checkpoints = PathBuf::from(v),
            "reports" => self.reports = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let p = |p: &Path| p.display().to_string();
        vec![
            ("d_model", m.d_model.to_string()),
            ("d_global", m.d_global.to_string()),
            ("blocks", m.blocks.to_string()),
            ("heads", m.heads.to_string()),
            ("input_proxies", m.input_proxies.to_string()),
            ("ref_proxies", m.ref_proxies.to_string()),
            ("radius", format!("{:?}", m.radius)),
            ("max_k", m.max_k.to_string()),
            ("seeds", m.seeds.to_string()),
            ("group", m.group.to_string()),
            ("rounds", m.rounds.to_string()),
            ("k_geo", m.k_geo.to_string()),
            ("k_sem", m.k_sem.to_string()),
            ("gate_neighbors", m.gate_neighbors.to_string()),
            ("image_res", m.image_res.to_string()),
            ("patch", m.patch.to_string()),
            ("use_pos_input", m.use_pos_input.to_string()),
            ("use_sacg", m.use_sacg.to_string()),
            ("progressive_decode", m.progressive_decode.to_string()),
            ("use_reference", m.use_reference.to_string()),
            ("use_image", m.use_image.to_string()),
            ("global_from_reference", m.global_from_reference.to_string()),
            ("ft_reference_pair", m.ft_reference_pair.to_string()),
            ("w_seed", format!("{:?}", m.weights.seed)),
            ("w_output", format!("{:?}", m.weights.output)),
            ("w_ft", format!("{:?}", m.weights.ft)),
            ("seed", self.seed.to_string()),
            ("f32", self.f32.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("lr_decay", format!("{:?}", self.lr_decay)),
            ("decay_every", self.decay_every.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("val_limit", self.val_limit.to_string()),
            ("partial_points", self.partial_points.to_string()),
            ("gt_points", self.gt_points.to_string()),
            ("ref_points", self.ref_points.to_string()),
            ("shapes_per_family", self.shapes_per_family.to_string()),
            ("views_per_shape", self.views_per_shape.to_string()),
            ("val_fraction", format!("{:?}", self.val_fraction)),
            ("test_fraction", format!("{:?}", self.test_fraction)),
            ("seen_families", families_text(&self.seen_families)),
            ("unseen_families", families_text(&self.unseen_families)),
            ("sparse_points", self.sparse_points.to_string()),
            ("sparse_sigma", format!("{:?}", self.sparse_sigma)),
            ("corpus", p(&self.corpus)),
            ("index", p(&self.index)),
            ("checkpoints", p(&self.checkpoints)),
            ("reports", p(&self.reports)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Reads a config file. A `preset = toy` first line starts from the toy
    /// preset instead of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut base = RunConfig::default();
        let mut body = String::new();
        for line in text.lines() {
            let t = line.split('#').next().unwrap_or("").trim();
            match t.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                Some(("preset", "toy")) => base = RunConfig::toy(),
                Some(("preset", "default")) => base = RunConfig::default(),
                Some(("preset", other)) => {
                    return Err(Error::Config(format!("unknown preset {other:?}")));
                }
                _ => body.push_str(line),
            }
            body.push('\n');
        }
        base.apply_text(&body, path)?;
        base.model.validate()?;
        Ok(base)
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
