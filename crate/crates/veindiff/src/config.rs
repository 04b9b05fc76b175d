//! Training configuration: a flat `key = value` file format plus
//! command-line overrides, with paper defaults baked in.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Result, VeinError};

/// Every knob of the training pipeline. `total_epochs` counts pretraining
/// and joint training together, so the joint phase runs for
/// `total_epochs - pretrain_epochs` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data_root: PathBuf,
    pub num_classes: usize,
    pub samples_per_session: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub batch_size: usize,
    pub lr_seg: f64,
    pub lr_denoise: f64,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub total_epochs: usize,
    pub t_steps: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub circle_gamma: f64,
    pub circle_delta_p: f64,
    pub circle_delta_n: f64,
    pub seed: u64,
    pub w_seg: f64,
    pub w_auth: f64,
    pub w_diff: f64,
    pub use_diffusion: bool,
    pub use_mask_condition: bool,
    pub use_fouriersim: bool,
    pub use_sdformer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            num_classes: 12,
            samples_per_session: 6,
            image_h: 256,
            image_w: 320,
            batch_size: 4,
            lr_seg: 1e-4,
            lr_denoise: 1e-3,
            weight_decay: 1e-2,
            pretrain_epochs: 50,
            total_epochs: 500,
            t_steps: 100,
            lambda: 0.5,
            alpha: 0.8,
            circle_gamma: 128.0,
            circle_delta_p: 0.95,
            circle_delta_n: 0.05,
            seed: 7,
            w_seg: 1.0,
            w_auth: 1.0,
            w_diff: 1.0,
            use_diffusion: true,
            use_mask_condition: true,
            use_fouriersim: true,
            use_sdformer: true,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(VeinError::config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| VeinError::config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Number of joint (end-to-end) epochs after pretraining.
    pub fn joint_epochs(&self) -> usize {
        self.total_epochs.saturating_sub(self.pretrain_epochs)
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data_root" => self.data_root = PathBuf::from(v),
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "samples_per_session" => self.samples_per_session = parse_num(key, v)?,
            "image_h" => self.image_h = parse_num(key, v)?,
            "image_w" => self.image_w = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr_seg" => self.lr_seg = parse_num(key, v)?,
            "lr_denoise" => self.lr_denoise = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(key, v)?,
            "total_epochs" => self.total_epochs = parse_num(key, v)?,
            "t_steps" => self.t_steps = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "circle_gamma" => self.circle_gamma = parse_num(key, v)?,
            "circle_delta_p" => self.circle_delta_p = parse_num(key, v)?,
            "circle_delta_n" => self.circle_delta_n = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "w_seg" => self.w_seg = parse_num(key, v)?,
            "w_auth" => self.w_auth = parse_num(key, v)?,
            "w_diff" => self.w_diff = parse_num(key, v)?,
            "use_diffusion" => self.use_diffusion = parse_bool(key, v)?,
            "use_mask_condition" => self.use_mask_condition = parse_bool(key, v)?,
            "use_fouriersim" => self.use_fouriersim = parse_bool(key, v)?,
            "use_sdformer" => self.use_sdformer = parse_bool(key, v)?,
            _ => return Err(VeinError::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` text (one assignment per line, `#` comments).
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        // reject duplicate keys: silent last-wins hides config mistakes
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(VeinError::config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(VeinError::config(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VeinError::Dataset {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` override strings (from CLI flags) on top.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for ov in overrides {
            let Some((key, value)) = ov.split_once('=') else {
                return Err(VeinError::config(format!(
                    "override {ov:?} must look like key=value"
                )));
            };
            self.set(key.trim(), value)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes as f64),
            ("samples_per_session", self.samples_per_session as f64),
            ("batch_size", self.batch_size as f64),
            ("lr_seg", self.lr_seg),
            ("lr_denoise", self.lr_denoise),
            ("circle_gamma", self.circle_gamma),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(VeinError::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.num_classes < 2 {
            return Err(VeinError::config("num_classes must be at least 2"));
        }
        if self.t_steps < 2 {
            return Err(VeinError::config("t_steps must be at least 2"));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 {
            return Err(VeinError::config("lambda and alpha must be nonnegative"));
        }
        if self.weight_decay < 0.0 {
            return Err(VeinError::config("weight_decay must be nonnegative"));
        }
        if self.w_seg < 0.0 || self.w_auth < 0.0 || self.w_diff < 0.0 {
            return Err(VeinError::config("loss weights must be nonnegative"));
        }
        if !(0.0 < self.circle_delta_n && self.circle_delta_n < self.circle_delta_p
            && self.circle_delta_p < 1.0)
        {
            return Err(VeinError::config(
                "need 0 < circle_delta_n < circle_delta_p < 1",
            ));
        }
        if self.pretrain_epochs > self.total_epochs {
            return Err(VeinError::config(
                "pretrain_epochs cannot exceed total_epochs",
            ));
        }
        if self.image_h < 64 || self.image_w < 64 {
            return Err(VeinError::config("image dims must be at least 64"));
        }
        Ok(())
    }
}
