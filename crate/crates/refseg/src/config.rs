//! Plain-text key/value training configuration (`key = value`, `#` comments).

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::{ModelDims, Variant};
use crate::optim::SgdConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidConfig(format!("precision must be f32 or f64, got {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,
    pub variant: Variant,
    pub data_dir: Option<PathBuf>,
    /// Consistency-loss coefficient.
    pub alpha: f64,
    pub batch_size: usize,
    pub stage_steps: [usize; 3],
    pub stage_lr: [f64; 3],
    pub momentum: f64,
    pub weight_decay: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub channels: usize,
    pub att_dim: usize,
    pub cap_hidden: usize,
    pub max_caption_len: usize,
    /// 0 disables the caption-input resize.
    pub caption_grid: usize,
    pub fusion_bias: bool,
    /// Train comprehension weights during the caption warm-up stage.
    pub unfreeze_stage2: bool,
    pub log_every: usize,
    // Dataset generation knobs (used by `gen-data` defaults and `ablate`).
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub duplicate_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            precision: Precision::F32,
            variant: Variant::Full,
            data_dir: None,
            alpha: 0.1,
            batch_size: 8,
            stage_steps: [3000, 1000, 3000],
            stage_lr: [0.05, 0.05, 0.05],
            momentum: 0.9,
            weight_decay: 0.0,
            embed_dim: 16,
            hidden_dim: 32,
            channels: 32,
            att_dim: 32,
            cap_hidden: 64,
            max_caption_len: 15,
            caption_grid: 0,
            fusion_bias: true,
            unfreeze_stage2: false,
            log_every: 50,
            n_train: 2000,
            n_test: 500,
            image_size: 64,
            duplicate_prob: 0.35,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.stage_steps.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig("stage step counts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        for (i, &lr) in self.stage_lr.iter().enumerate() {
            (SgdConfig { learning_rate: lr, momentum: self.momentum, weight_decay: self.weight_decay })
                .validate()
                .map_err(|_| {
                    Error::InvalidConfig(format!("bad SGD settings for stage {}", i + 1))
                })?;
        }
        Ok(())
    }

    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            channels: self.channels,
            att_dim: self.att_dim,
            cap_hidden: self.cap_hidden,
            max_caption_len: self.max_caption_len,
            caption_grid: if self.caption_grid == 0 { None } else { Some(self.caption_grid) },
            fusion_bias: self.fusion_bias,
        }
    }

    pub fn sgd_for_stage(&self, stage: usize) -> SgdConfig {
        SgdConfig {
            learning_rate: self.stage_lr[stage],
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn data_config(&self, seed: u64) -> DataConfig {
        DataConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            seed,
            image_size: self.image_size,
            duplicate_prob: self.duplicate_prob,
            ..DataConfig::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("{}:{}: expected 'key = value'", path.display(), lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| {
                Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::Parse(format!("bad value '{v}' for {k}"));
        macro_rules! parse {
            ($v:expr, $k:expr) => {
                $v.parse().map_err(|_| bad($k, $v))?
            };
        }
        match key {
            "seed" => self.seed = parse!(value, key),
            "precision" => self.precision = Precision::parse(value)?,
            "variant" => self.variant = Variant::parse(value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "alpha" => self.alpha = parse!(value, key),
            "batch_size" => self.batch_size = parse!(value, key),
            "stage1_steps" => self.stage_steps[0] = parse!(value, key),
            "stage2_steps" => self.stage_steps[1] = parse!(value, key),
            "stage3_steps" => self.stage_steps[2] = parse!(value, key),
            "stage1_lr" => self.stage_lr[0] = parse!(value, key),
            "stage2_lr" => self.stage_lr[1] = parse!(value, key),
            "stage3_lr" => self.stage_lr[2] = parse!(value, key),
            "momentum" => self.momentum = parse!(value, key),
            "weight_decay" => self.weight_decay = parse!(value, key),
            "embed_dim" => self.embed_dim = parse!(value, key),
            "hidden_dim" => self.hidden_dim = parse!(value, key),
            "channels" => self.channels = parse!(value, key),
            "att_dim" => self.att_dim = parse!(value, key),
            "cap_hidden" => self.cap_hidden = parse!(value, key),
            "max_caption_len" => self.max_caption_len = parse!(value, key),
            "caption_grid" => self.caption_grid = parse!(value, key),
            "fusion_bias" => self.fusion_bias = parse!(value, key),
            "unfreeze_stage2" => self.unfreeze_stage2 = parse!(value, key),
            "log_every" => self.log_every = parse!(value, key),
            "n_train" => self.n_train = parse!(value, key),
            "n_test" => self.n_test = parse!(value, key),
            "image_size" => self.image_size = parse!(value, key),
            "duplicate_prob" => self.duplicate_prob = parse!(value, key),
            other => return Err(Error::Parse(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision.name());
        let _ = writeln!(s, "variant = {}", self.variant.id());
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "data_dir = {}", d.display());
        }
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        for i in 0..3 {
            let _ = writeln!(s, "stage{}_steps = {}", i + 1, self.stage_steps[i]);
            let _ = writeln!(s, "stage{}_lr = {}", i + 1, self.stage_lr[i]);
        }
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "att_dim = {}", self.att_dim);
        let _ = writeln!(s, "cap_hidden = {}", self.cap_hidden);
        let _ = writeln!(s, "max_caption_len = {}", self.max_caption_len);
        let _ = writeln!(s, "caption_grid = {}", self.caption_grid);
        let _ = writeln!(s, "fusion_bias = {}", self.fusion_bias);
        let _ = writeln!(s, "unfreeze_stage2 = {}", self.unfreeze_stage2);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "n_train = {}", self.n_train);
        let _ = writeln!(s, "n_test = {}", self.n_test);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "duplicate_prob = {}", self.duplicate_prob);
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}
