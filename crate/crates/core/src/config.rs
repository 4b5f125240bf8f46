//! Run configuration as flat `key = value` text.
//!
//! Later assignments override earlier ones, so a file followed by command-line
//! `key=value` pairs gives flags precedence over the file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::encoder::TierName;
use crate::error::{Error, Result};
use crate::model::{Fusion, ModelConfig};

/// Storage precision used for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub precision: Precision,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

/// Learning rate used when none is given.
pub const DEFAULT_LR: f64 = 1e-3;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 30,
            batch: 4,
            lr: DEFAULT_LR,
            weight_decay: 0.01,
            seed: 0,
            augment: true,
            precision: Precision::F32,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}` as a number")))
}

impl RunConfig {
    /// Desk-scale defaults, or the larger crop/epoch/batch and smaller-lr regime for `"large"`.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" | "default" => Ok(Self::default()),
            "large" => {
                let mut c = Self::default();
                c.model.crop = 256;
                c.epochs = 100;
                c.batch = 8;
                c.lr = 2e-4;
                Ok(c)
            }
            other => Err(Error::Config(format!("unknown profile `{other}` (desk or large)"))),
        }
    }

    /// Assign one key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "rgb_tier" => m.rgb_tier = v.parse()?,
            "dsm_tier" => {
                m.dsm_tier = match v {
                    "none" => None,
                    t => Some(t.parse::<TierName>()?),
                }
            }
            "fusion" => m.fusion = v.parse::<Fusion>()?,
            "da_enabled" => m.da_enabled = parse_bool(key, v)?,
            "da_alpha" => m.da_alpha = parse_num(key, v)?,
            "da_latent_len" => m.latent_len = parse_num(key, v)?,
            "num_classes" => m.num_classes = parse_num(key, v)?,
            "crop" => m.crop = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision must be f32 or f64, got `{v}`"))),
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Every field except the two directories, one `key = value` per line in a fixed order.
    pub fn canonical_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let dsm = m.dsm_tier.map_or("none".to_string(), |t| t.to_string());
        let _ = writeln!(s, "rgb_tier = {}", m.rgb_tier);
        let _ = writeln!(s, "dsm_tier = {dsm}");
        let _ = writeln!(s, "fusion = {}", m.fusion);
        let _ = writeln!(s, "da_enabled = {}", m.da_enabled);
        let _ = writeln!(s, "da_alpha = {:e}", m.da_alpha);
        let _ = writeln!(s, "da_latent_len = {}", m.latent_len);
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "crop = {}", m.crop);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "lr = {:e}", self.lr);
        let _ = writeln!(s, "weight_decay = {:e}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "precision = {}", self.precision.name());
        s
    }

    /// Full text including directories, suitable for `apply_text`.
    pub fn to_text(&self) -> String {
        let mut s = self.canonical_text();
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }

    /// First 16 hex digits of the SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.apply_text("rgb_tier = tiny\ndsm_tier=none # single modal\nda_enabled=false\nda_alpha=0\nlr=3e-4\n")
            .unwrap();
        assert_eq!(c.model.dsm_tier, None);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
        back.seed = 1;
        assert_ne!(back.config_hash(), c.config_hash());
        let mut moved = c.clone();
        moved.out_dir = PathBuf::from("elsewhere");
        assert_eq!(moved.config_hash(), c.config_hash());
    }

    #[test]
    fn later_values_win() {
        let mut c = RunConfig::default();
        c.apply_text("epochs = 3\nepochs = 5").unwrap();
        assert_eq!(c.epochs, 5);
    }

    #[test]
    fn errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("colour", "red"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("epochs"), Err(Error::Config(_))));
        c.set("da_enabled", "false").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert_eq!(RunConfig::profile("large").unwrap().model.crop, 256);
    }
}
