//! Flat `section.key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored; every key must be known and may
//! appear once. Missing keys keep the toy defaults.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::DataConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::shrunk::ShrunkConfig;
use crate::train::{Schedule, TrainConfig};

/// Synthetic dataset recipe. Image size and class count come from the model.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub train_images: usize,
    pub eval_images: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            train_images: 2000,
            eval_images: 200,
            train_seed: 1,
            eval_seed: 2,
            min_shapes: 1,
            max_shapes: 3,
            noise: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegVitConfig {
    pub model: ModelConfig,
    /// Kept while `model.shrunk` is off so the file round-trips.
    pub shrunk: ShrunkConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
    pub data: DataSpec,
}

impl Default for SegVitConfig {
    /// 32×32 images, P=4, depth 4, width 64, K=4, cascade [2,3,4].
    fn default() -> Self {
        let encoder = EncoderConfig {
            image_height: 32,
            image_width: 32,
            patch_size: 4,
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
        };
        let shrunk = ShrunkConfig::for_depth(encoder.depth);
        SegVitConfig {
            model: ModelConfig {
                encoder,
                num_classes: 4,
                cascade_layers: vec![2, 3, 4],
                shrunk: None,
            },
            shrunk,
            losses: LossWeights::default(),
            train: TrainConfig::default(),
            data: DataSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|v| parse(key, v.trim())).collect()
}

impl SegVitConfig {
    /// Data settings are checked when data is generated, so configs for
    /// models without a synthetic dataset (K above the palette) still load.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        self.train.validate()
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            num_classes: self.model.num_classes,
            height: self.model.encoder.image_height,
            width: self.model.encoder.image_width,
            min_shapes: self.data.min_shapes,
            max_shapes: self.data.max_shapes,
            noise: self.data.noise,
        }
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let enc = &mut self.model.encoder;
        match key {
            "model.image_height" => enc.image_height = parse(key, v)?,
            "model.image_width" => enc.image_width = parse(key, v)?,
            "model.patch_size" => enc.patch_size = parse(key, v)?,
            "model.depth" => enc.depth = parse(key, v)?,
            "model.width" => enc.width = parse(key, v)?,
            "model.heads" => enc.heads = parse(key, v)?,
            "model.mlp_ratio" => enc.mlp_ratio = parse(key, v)?,
            "model.num_classes" => self.model.num_classes = parse(key, v)?,
            "model.cascade_layers" => self.model.cascade_layers = parse_list(key, v)?,
            "shrunk.enabled" => {
                let on: bool = parse(key, v)?;
                self.model.shrunk = on.then(|| self.shrunk.clone());
            }
            "shrunk.qd_layer" => self.shrunk.qd_layer = parse(key, v)?,
            "shrunk.factor" => self.shrunk.factor = parse(key, v)?,
            "shrunk.use_qu" => self.shrunk.use_qu = parse(key, v)?,
            "loss.focal" => self.losses.focal = parse(key, v)?,
            "loss.dice" => self.losses.dice = parse(key, v)?,
            "loss.no_object" => self.losses.no_object = parse(key, v)?,
            "loss.focal_gamma" => self.losses.focal_gamma = parse(key, v)?,
            "loss.focal_alpha" => self.losses.focal_alpha = parse(key, v)?,
            "train.optimizer" => {
                if v != "adamw" {
                    return Err(Error::config(format!("{key}: only adamw is supported, got {v:?}")));
                }
            }
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.schedule" => self.train.schedule = parse::<Schedule>(key, v)?,
            "train.warmup" => self.train.warmup = parse(key, v)?,
            "train.iterations" => self.train.iterations = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.log_every" => self.train.log_every = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.eval_images" => self.train.eval_images = parse(key, v)?,
            "data.train_images" => self.data.train_images = parse(key, v)?,
            "data.eval_images" => self.data.eval_images = parse(key, v)?,
            "data.train_seed" => self.data.train_seed = parse(key, v)?,
            "data.eval_seed" => self.data.eval_seed = parse(key, v)?,
            "data.min_shapes" => self.data.min_shapes = parse(key, v)?,
            "data.max_shapes" => self.data.max_shapes = parse(key, v)?,
            "data.noise" => self.data.noise = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        if key.starts_with("shrunk.") && self.model.shrunk.is_some() {
            self.model.shrunk = Some(self.shrunk.clone());
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Parse a whole file's text on top of the defaults and validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SegVitConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in canonical order; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let e = &self.model.encoder;
        let (l, t, d) = (&self.losses, &self.train, &self.data);
        let layers: Vec<String> = self.model.cascade_layers.iter().map(|v| v.to_string()).collect();
        let entries: Vec<(&str, String)> = vec![
            ("model.image_height", e.image_height.to_string()),
            ("model.image_width", e.image_width.to_string()),
            ("model.patch_size", e.patch_size.to_string()),
            ("model.depth", e.depth.to_string()),
            ("model.width", e.width.to_string()),
            ("model.heads", e.heads.to_string()),
            ("model.mlp_ratio", e.mlp_ratio.to_string()),
            ("model.num_classes", self.model.num_classes.to_string()),
            ("model.cascade_layers", layers.join(",")),
            ("shrunk.qd_layer", self.shrunk.qd_layer.to_string()),
            ("shrunk.factor", self.shrunk.factor.to_string()),
            ("shrunk.use_qu", self.shrunk.use_qu.to_string()),
            ("shrunk.enabled", self.model.shrunk.is_some().to_string()),
            ("loss.focal", format!("{:?}", l.focal)),
            ("loss.dice", format!("{:?}", l.dice)),
            ("loss.no_object", format!("{:?}", l.no_object)),
            ("loss.focal_gamma", format!("{:?}", l.focal_gamma)),
            ("loss.focal_alpha", format!("{:?}", l.focal_alpha)),
            ("train.optimizer", "adamw".into()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.beta1", format!("{:?}", t.beta1)),
            ("train.beta2", format!("{:?}", t.beta2)),
            ("train.eps", format!("{:?}", t.eps)),
            ("train.schedule", t.schedule.to_string()),
            ("train.warmup", t.warmup.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.eval_images", t.eval_images.to_string()),
            ("data.train_images", d.train_images.to_string()),
            ("data.eval_images", d.eval_images.to_string()),
            ("data.train_seed", d.train_seed.to_string()),
            ("data.eval_seed", d.eval_seed.to_string()),
            ("data.min_shapes", d.min_shapes.to_string()),
            ("data.max_shapes", d.max_shapes.to_string()),
            ("data.noise", format!("{:?}", d.noise)),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
