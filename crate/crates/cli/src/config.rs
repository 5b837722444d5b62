//! Run configuration: a strict JSON file merged with command-line overrides.

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttnet::compression::Assumptions;
use ttnet::contrastive::AugmentConfig;
use ttnet::nn::TtSpec;
use ttnet::pipeline::{ModelConfig, TrainConfig};
use ttnet::{Error, Result};

/// Augmentation strengths; the output size and seed come from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSettings {
    pub crop_scale: (f64, f64),
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub flip_prob: f64,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        let d = AugmentConfig::new((1, 1), 0);
        Self {
            crop_scale: d.crop_scale,
            brightness: d.brightness,
            contrast: d.contrast,
            saturation: d.saturation,
            flip_prob: d.flip_prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub threads: usize,
    pub image_size: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentSettings,
    /// Used by `analyze`.
    pub assumptions: Assumptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("run"),
            threads: 1,
            image_size: 256,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentSettings::default(),
            assumptions: Assumptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn augment_config(&self) -> AugmentConfig {
        let a = &self.augment;
        AugmentConfig {
            crop_scale: a.crop_scale,
            brightness: a.brightness,
            contrast: a.contrast,
            saturation: a.saturation,
            flip_prob: a.flip_prob,
            ..AugmentConfig::new((self.image_size, self.image_size), self.train.seed)
        }
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given (--data or \"data\" in the config)".into()))
    }
}

/// Factorization overrides for the first projection layer.
#[derive(Clone, Debug, Default)]
pub struct TtOverrides {
    pub tensorized: bool,
    pub bond: Option<usize>,
    pub in_split: Option<(usize, usize)>,
    pub out_split: Option<(usize, usize)>,
}

pub const DEFAULT_BOND: usize = 16;

impl TtOverrides {
    fn any(&self) -> bool {
        self.tensorized || self.bond.is_some() || self.in_split.is_some() || self.out_split.is_some()
    }

    /// Applies the overrides to `model`, filling unset parts from the file
    /// value or the balanced split.
    pub fn apply(&self, model: &mut ModelConfig) -> Result<()> {
        if !self.any() {
            return model.validate();
        }
        let base = model.tt;
        let spec = TtSpec {
            in_split: self
                .in_split
                .or(base.map(|s| s.in_split))
                .unwrap_or_else(|| TtSpec::balanced_split(model.encoder.feat_dim())),
            out_split: self
                .out_split
                .or(base.map(|s| s.out_split))
                .unwrap_or_else(|| TtSpec::balanced_split(model.head[0])),
            bond: self.bond.or(base.map(|s| s.bond)).unwrap_or(DEFAULT_BOND),
        };
        model.tt = Some(spec);
        model.validate()
    }
}

pub fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected two comma-separated integers, got {s:?}"))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

/// `target` expressed relative to `base`, falling back to the path as given.
pub fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let (Ok(t), Ok(b)) = (target.canonicalize(), base.canonicalize()) else {
        return target.to_path_buf();
    };
    let tc: Vec<Component> = t.components().collect();
    let bc: Vec<Component> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    out
}
