//! Flat `key = value` run configuration covering training, network,
//! loss, synthetic-data and data-source settings.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::config_hash;
use crate::data::{load_reid_dir, synth_pair, Dataset, SyntheticDomainSpec};
use crate::error::{Error, Result};
use crate::geometry::{Transform, TransformKind};
use crate::training::{Lipschitz, TrainConfig, TrainData};

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// Two directories of ReID-named images: source domain X, target domain Y.
    Folders {
        source: PathBuf,
        target: PathBuf,
    },
}

/// Both training domains, with ground truth when synthetic.
#[derive(Clone, Debug)]
pub struct RunData {
    pub x: Dataset,
    pub y: Dataset,
    pub gt: Option<Vec<Transform>>,
}

impl RunData {
    pub fn as_train_data(&self) -> TrainData<'_> {
        TrainData {
            x: &self.x,
            y: &self.y,
            gt: self.gt.as_deref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SyntheticDomainSpec,
    pub data: DataSource,
    /// Weight-clipping bound, used when `lipschitz = clip`.
    pub clip_value: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SyntheticDomainSpec::default(),
            data: DataSource::Synthetic,
            clip_value: 0.01,
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "steps",
    "batch_size",
    "critic_steps",
    "lr_critic",
    "lr_gen",
    "lr_stm",
    "beta1",
    "beta2",
    "lambda_pcl",
    "lambda_cyc",
    "lambda_idt",
    "lambda_siam",
    "siamese_margin",
    "gp_weight",
    "lipschitz",
    "clip_value",
    "transform_critic",
    "disentangled",
    "adapt_m",
    "checkpoint_every",
    "eval_every",
    "transform",
    "image_height",
    "image_width",
    "code_dim",
    "code_at_input",
    "loc_width",
    "loc_hidden",
    "gen_width",
    "gen_res_blocks",
    "generator_skip",
    "critic_width",
    "dt_hidden",
    "siam_width",
    "embed_dim",
    "data",
    "source_dir",
    "target_dir",
    "synth_seed",
    "synth_transform",
    "synth_max_rotation_deg",
    "synth_max_perspective",
    "synth_max_translation",
    "synth_item_jitter",
    "synth_gain_min",
    "synth_gain_max",
    "synth_bias_min",
    "synth_bias_max",
    "synth_noise_std",
    "synth_identities",
    "synth_views",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value {value:?} for {key}: expected true or false"
        ))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown and repeated
    /// keys are errors. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let n = &mut t.net;
        let w = &mut t.weights;
        let s = &mut self.synth;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "critic_steps" => t.critic_steps_per_gen = parse(key, value)?,
            "lr_critic" => t.lr_critic = parse(key, value)?,
            "lr_gen" => t.lr_gen = parse(key, value)?,
            "lr_stm" => t.lr_stm = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "lambda_pcl" => w.lambda_pcl = parse(key, value)?,
            "lambda_cyc" => w.lambda_cyc = parse(key, value)?,
            "lambda_idt" => w.lambda_idt = parse(key, value)?,
            "lambda_siam" => w.lambda_siam = parse(key, value)?,
            "siamese_margin" => w.siamese_margin = parse(key, value)?,
            "gp_weight" => w.gp_weight = parse(key, value)?,
            "lipschitz" => {
                t.lipschitz = match value {
                    "gp" => Lipschitz::GradientPenalty,
                    "clip" => Lipschitz::Clip(self.clip_value),
                    _ => {
                        return Err(Error::Config(format!(
                            "bad value {value:?} for lipschitz: expected gp or clip"
                        )))
                    }
                }
            }
            "clip_value" => {
                self.clip_value = parse(key, value)?;
                if let Lipschitz::Clip(c) = &mut t.lipschitz {
                    *c = self.clip_value;
                }
            }
            "transform_critic" => t.transform_critic = parse_bool(key, value)?,
            "disentangled" => t.disentangled = parse_bool(key, value)?,
            "adapt_m" => t.adapt_m = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "transform" => n.kind = parse(key, value)?,
            "image_height" => {
                n.size.0 = parse(key, value)?;
                s.size.0 = n.size.0;
            }
            "image_width" => {
                n.size.1 = parse(key, value)?;
                s.size.1 = n.size.1;
            }
            "code_dim" => n.code_dim = parse(key, value)?,
            "code_at_input" => n.code_at_input = parse_bool(key, value)?,
            "loc_width" => n.loc_width = parse(key, value)?,
            "loc_hidden" => n.loc_hidden = parse(key, value)?,
            "gen_width" => n.gen_width = parse(key, value)?,
            "gen_res_blocks" => n.gen_res_blocks = parse(key, value)?,
            "generator_skip" => n.generator_skip = parse_bool(key, value)?,
            "critic_width" => n.critic_width = parse(key, value)?,
            "dt_hidden" => n.dt_hidden = parse(key, value)?,
            "siam_width" => n.siam_width = parse(key, value)?,
            "embed_dim" => n.embed_dim = parse(key, value)?,
            "data" => {
                self.data = match value {
                    "synthetic" => DataSource::Synthetic,
                    "folders" => match &self.data {
                        DataSource::Folders { .. } => self.data.clone(),
                        DataSource::Synthetic => DataSource::Folders {
                            source: PathBuf::new(),
                            target: PathBuf::new(),
                        },
                    },
                    _ => {
                        return Err(Error::Config(format!(
                            "bad value {value:?} for data: expected synthetic or folders"
                        )))
                    }
                }
            }
            "source_dir" | "target_dir" => {
                if let DataSource::Synthetic = self.data {
                    self.data = DataSource::Folders {
                        source: PathBuf::new(),
                        target: PathBuf::new(),
                    };
                }
                if let DataSource::Folders { source, target } = &mut self.data {
                    let slot = if key == "source_dir" { source } else { target };
                    *slot = PathBuf::from(value);
                }
            }
            "synth_seed" => s.seed = parse(key, value)?,
            "synth_transform" => s.gt_kind = parse(key, value)?,
            "synth_max_rotation_deg" => s.max_rotation_deg = parse(key, value)?,
            "synth_max_perspective" => s.max_perspective = parse(key, value)?,
            "synth_max_translation" => s.max_translation = parse(key, value)?,
            "synth_item_jitter" => s.item_jitter = parse(key, value)?,
            "synth_gain_min" => s.gain_range.0 = parse(key, value)?,
            "synth_gain_max" => s.gain_range.1 = parse(key, value)?,
            "synth_bias_min" => s.bias_range.0 = parse(key, value)?,
            "synth_bias_max" => s.bias_range.1 = parse(key, value)?,
            "synth_noise_std" => s.noise_std = parse(key, value)?,
            "synth_identities" => s.n_identities = parse(key, value)?,
            "synth_views" => s.n_views = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.train.net.size != self.synth.size {
            return Err(Error::Config(
                "synthetic image size differs from network size".into(),
            ));
        }
        if let DataSource::Folders { source, target } = &self.data {
            if source.as_os_str().is_empty() || target.as_os_str().is_empty() {
                return Err(Error::Config(
                    "folder data needs both source_dir and target_dir".into(),
                ));
            }
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let t = &self.train;
        let n = &t.net;
        let w = &t.weights;
        let s = &self.synth;
        let f = |v: f64| format!("{v:?}");
        let kind = |k: TransformKind| k.name().to_string();
        match key {
            "seed" => t.seed.to_string(),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "critic_steps" => t.critic_steps_per_gen.to_string(),
            "lr_critic" => f(t.lr_critic),
            "lr_gen" => f(t.lr_gen),
            "lr_stm" => f(t.lr_stm),
            "beta1" => f(t.beta1),
            "beta2" => f(t.beta2),
            "lambda_pcl" => f(w.lambda_pcl),
            "lambda_cyc" => f(w.lambda_cyc),
            "lambda_idt" => f(w.lambda_idt),
            "lambda_siam" => f(w.lambda_siam),
            "siamese_margin" => f(w.siamese_margin),
            "gp_weight" => f(w.gp_weight),
            "lipschitz" => match t.lipschitz {
                Lipschitz::GradientPenalty => "gp".into(),
                Lipschitz::Clip(_) => "clip".into(),
            },
            "clip_value" => f(self.clip_value),
            "transform_critic" => t.transform_critic.to_string(),
            "disentangled" => t.disentangled.to_string(),
            "adapt_m" => t.adapt_m.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "transform" => kind(n.kind),
            "image_height" => n.size.0.to_string(),
            "image_width" => n.size.1.to_string(),
            "code_dim" => n.code_dim.to_string(),
            "code_at_input" => n.code_at_input.to_string(),
            "loc_width" => n.loc_width.to_string(),
            "loc_hidden" => n.loc_hidden.to_string(),
            "gen_width" => n.gen_width.to_string(),
            "gen_res_blocks" => n.gen_res_blocks.to_string(),
            "generator_skip" => n.generator_skip.to_string(),
            "critic_width" => n.critic_width.to_string(),
            "dt_hidden" => n.dt_hidden.to_string(),
            "siam_width" => n.siam_width.to_string(),
            "embed_dim" => n.embed_dim.to_string(),
            "data" => match self.data {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Folders { .. } => "folders".into(),
            },
            "source_dir" | "target_dir" => match &self.data {
                DataSource::Synthetic => String::new(),
                DataSource::Folders { source, target } => {
                    let p = if key == "source_dir" { source } else { target };
                    p.display().to_string()
                }
            },
            "synth_seed" => s.seed.to_string(),
            "synth_transform" => kind(s.gt_kind),
            "synth_max_rotation_deg" => f(s.max_rotation_deg),
            "synth_max_perspective" => f(s.max_perspective),
            "synth_max_translation" => f(s.max_translation),
            "synth_item_jitter" => f(s.item_jitter),
            "synth_gain_min" => f(s.gain_range.0),
            "synth_gain_max" => f(s.gain_range.1),
            "synth_bias_min" => f(s.bias_range.0),
            "synth_bias_max" => f(s.bias_range.1),
            "synth_noise_std" => f(s.noise_std),
            "synth_identities" => s.n_identities.to_string(),
            "synth_views" => s.n_views.to_string(),
            _ => unreachable!("key list and value_of disagree on {key}"),
        }
    }

    /// Canonical text: every key in fixed order, values round-trippable.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let v = self.value_of(k);
            if v.is_empty() {
                continue;
            }
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Generates or loads the two domains.
    pub fn load_data(&self) -> Result<RunData> {
        match &self.data {
            DataSource::Synthetic => {
                let pair = synth_pair(&self.synth)?;
                Ok(RunData {
                    x: pair.x,
                    y: pair.y,
                    gt: Some(pair.gt),
                })
            }
            DataSource::Folders { source, target } => {
                let size = self.train.net.size;
                Ok(RunData {
                    x: load_reid_dir(source, size)?.dataset,
                    y: load_reid_dir(target, size)?.dataset,
                    gt: None,
                })
            }
        }
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_text())
    }
}
