//! Layered run configuration: built-in defaults, then a TOML file, then
//! `--set key=value` overrides. Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use scmis::discriminator::{BackboneDepth, DiscriminatorConfig, HeadKind};
use scmis::generator::GeneratorConfig;
use scmis::trainer::{ClassWeightMode, LossConfig, Precision, TrainConfig, TrainerConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root with `rgb/`, `depth/`, `label/` (optionally under `train/`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub num_classes: usize,
    pub max_depth_m: f32,
    /// Training resolution as `[height, width]`.
    pub size: [usize; 2],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            num_classes: 40,
            max_depth_m: 10.0,
            size: [256, 512],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub noise_channels: usize,
    pub eps: f64,
    pub stem_channels: usize,
    pub encoder_channels: usize,
    pub decoder_channels: Vec<usize>,
    pub spade_hidden: usize,
}

impl Default for GenSection {
    fn default() -> Self {
        let g = GeneratorConfig::new(1);
        Self {
            noise_channels: g.noise_channels,
            eps: g.eps,
            stem_channels: g.stem_channels,
            encoder_channels: g.encoder_channels,
            decoder_channels: g.decoder_channels,
            spade_hidden: g.spade_hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscInput {
    Rgb,
    Rgbd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscInit {
    Scratch,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscSection {
    pub depth: BackboneDepth,
    pub head: HeadKind,
    pub input: DiscInput,
    pub init: DiscInit,
    /// Checkpoint whose discriminator backbone seeds `init = "pretrained"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub widths: [usize; 4],
}

impl Default for DiscSection {
    fn default() -> Self {
        let d = DiscriminatorConfig::new(1);
        Self {
            depth: d.depth,
            head: d.head,
            input: DiscInput::Rgb,
            init: DiscInit::Scratch,
            weights: None,
            widths: d.widths,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub w_adv: f64,
    pub w_ap: f64,
    pub w_depth: f64,
    pub w_lm: f64,
    pub ap_updates_disc: bool,
    pub class_weights: ClassWeightMode,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            w_adv: l.w_adv,
            w_ap: l.w_ap,
            w_depth: l.w_depth,
            w_lm: l.w_lm,
            ap_updates_disc: l.ap_updates_disc,
            class_weights: l.class_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: [f64; 2],
    pub ema_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub ckpt_every: u64,
    pub precision: Precision,
    /// Checkpoints and loss logs are written here.
    pub out_dir: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr_g: t.lr_g,
            lr_d: t.lr_d,
            betas: [t.betas.0, t.betas.1],
            ema_decay: t.ema_decay,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            seed: t.seed,
            ckpt_every: t.ckpt_every,
            precision: Precision::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub gen: GenSection,
    pub disc: DiscSection,
    pub loss: LossSection,
    pub train: TrainSection,
}

impl RunConfig {
    /// Merges defaults, an optional TOML file and `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = Value::try_from(RunConfig::default())
            .map_err(|e| CliError::Config(format!("cannot serialize defaults: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let table: Table = toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, Value::Table(table));
        }
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not of the form key=value")))?;
            set_path(&mut tree, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.data.num_classes == 0 || self.data.num_classes > 255 {
            return bad(format!("data.num_classes must be in 1..=255, got {}", self.data.num_classes));
        }
        if self.disc.init == DiscInit::Pretrained && self.disc.weights.is_none() {
            return bad("disc.init = \"pretrained\" requires disc.weights".into());
        }
        self.trainer_config()
            .validate()
            .or_else(|e| bad(e.to_string()))
    }

    /// The dataset root; training cannot start without it.
    pub fn data_root(&self) -> Result<&Path, CliError> {
        self.data
            .root
            .as_deref()
            .ok_or_else(|| CliError::Config("missing required key `data.root`".into()))
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let n = self.data.num_classes;
        let g = &self.gen;
        let generator = GeneratorConfig {
            noise_channels: g.noise_channels,
            eps: g.eps,
            stem_channels: g.stem_channels,
            encoder_channels: g.encoder_channels,
            decoder_channels: g.decoder_channels.clone(),
            spade_hidden: g.spade_hidden,
            image_size: (self.data.size[0], self.data.size[1]),
            ..GeneratorConfig::new(n)
        };
        let discriminator = DiscriminatorConfig {
            depth: self.disc.depth,
            head: self.disc.head,
            in_channels: match self.disc.input {
                DiscInput::Rgb => 3,
                DiscInput::Rgbd => 4,
            },
            widths: self.disc.widths,
            ..DiscriminatorConfig::new(n)
        };
        let t = &self.train;
        let l = &self.loss;
        TrainerConfig {
            generator,
            discriminator,
            train: TrainConfig {
                lr_g: t.lr_g,
                lr_d: t.lr_d,
                betas: (t.betas[0], t.betas[1]),
                ema_decay: t.ema_decay,
                batch_size: t.batch_size,
                max_steps: t.max_steps,
                seed: t.seed,
                ckpt_every: t.ckpt_every,
            },
            loss: LossConfig {
                w_adv: l.w_adv,
                w_ap: l.w_ap,
                w_depth: l.w_depth,
                w_lm: l.w_lm,
                ap_updates_disc: l.ap_updates_disc,
                class_weights: l.class_weights,
            },
            max_depth_m: self.data.max_depth_m,
            precision: t.precision,
        }
    }
}

/// Values parse as TOML when possible (`3`, `1e-4`, `[1, 2]`, `true`) and
/// fall back to bare strings (`middle`, `/data/nyu`).
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let Value::Table(table) = node else {
            return Err(CliError::Config(format!("`{key}` does not name a configuration key")));
        };
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    let Value::Table(table) = node else {
        return Err(CliError::Config(format!("`{key}` does not name a configuration key")));
    };
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
