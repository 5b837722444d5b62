//! Two-phase training: contrastive pretraining of encoder plus projection
//! head, then head snipping, classifier attachment and supervised
//! fine-tuning.
//!
//! The layer stack after the encoder is `projection ++ classifier`, with a
//! relu between consecutive layers and none after the last.

mod checkpoint;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;
use crate::nn::{DenseLayer, Encoder, EncoderConfig, Module, TtDenseLayer, TtSpec};
use crate::rng;
use crate::tensor::{Graph, Result as TensorResult, Tensor, Var};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use optim::{adam_step, lr_at, AdamState};
pub(crate) use train::train_step;
pub use train::{
    cross_entropy, evaluate_top1, finetune, predict, pretrain, top1_from_logits, EpochRecord, FinetuneRecord, RunReport, TrainConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// `4096 -> 4096 -> 11` with a relu in between.
    #[default]
    TwoLayer,
    /// `4096 -> 11`.
    SingleLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Projection head widths.
    pub head: Vec<usize>,
    /// Factorization of the first projection layer, if tensorized.
    pub tt: Option<TtSpec>,
    pub classifier: ClassifierKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: vec![4096, 1024, 512],
            tt: None,
            classifier: ClassifierKind::TwoLayer,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head.len() != 3 || self.head.contains(&0) {
            return Err(Error::Config(format!("projection head needs three positive widths, got {:?}", self.head)));
        }
        if let Some(spec) = &self.tt {
            spec.check_dims(self.encoder.feat_dim(), self.head[0])?;
        }
        Ok(())
    }
}

/// A layer after the encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Tt(TtDenseLayer),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.in_dim(),
            Layer::Tt(l) => l.spec.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.out_dim(),
            Layer::Tt(l) => l.spec.out_dim(),
        }
    }

    fn inner(&self) -> &dyn Module {
        match self {
            Layer::Dense(l) => l,
            Layer::Tt(l) => l,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Module {
        match self {
            Layer::Dense(l) => l,
            Layer::Tt(l) => l,
        }
    }
}

impl Module for Layer {
    fn params(&self) -> Vec<&Tensor> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.inner_mut().params_mut()
    }

    fn forward<'t>(&'t self, g: &mut Graph<'t>, x: Var, bound: &mut Vec<Var>) -> TensorResult<Var> {
        match self {
            Layer::Dense(l) => l.forward(g, x, bound),
            Layer::Tt(l) => l.forward(g, x, bound),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub projection: Vec<Layer>,
    pub classifier: Vec<Layer>,
}

impl Model {
    /// Encoder plus full projection head, no classifier.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::init(config.encoder.clone(), rng::derive(seed, &[0]))?;
        let feat = config.encoder.feat_dim();
        let h = &config.head;
        let first = match config.tt {
            Some(spec) => Layer::Tt(TtDenseLayer::init(spec, rng::derive(seed, &[1]))?),
            None => Layer::Dense(DenseLayer::init(feat, h[0], rng::derive(seed, &[1]))?),
        };
        let projection = vec![
            first,
            Layer::Dense(DenseLayer::init(h[0], h[1], rng::derive(seed, &[2]))?),
            Layer::Dense(DenseLayer::init(h[1], h[2], rng::derive(seed, &[3]))?),
        ];
        Ok(Self {
            config,
            encoder,
            projection,
            classifier: Vec::new(),
        })
    }

    pub fn is_snipped(&self) -> bool {
        self.projection.len() == 1
    }

    pub fn has_classifier(&self) -> bool {
        !self.classifier.is_empty()
    }

    pub fn out_dim(&self) -> usize {
        self.head_layers().last().map_or(self.encoder.feat_dim(), |l| l.out_dim())
    }

    fn head_layers(&self) -> impl Iterator<Item = &Layer> {
        self.projection.iter().chain(&self.classifier)
    }

    /// Drops the last two projection layers and attaches a freshly
    /// initialized classifier on the first projection layer's output.
    pub fn snip_and_attach(&mut self, kind: ClassifierKind, seed: u64) -> Result<()> {
        if self.projection.len() != 3 || self.has_classifier() {
            return Err(Error::State("projection head is already snipped".into()));
        }
        let width = self.projection[0].out_dim();
        self.projection.truncate(1);
        self.config.classifier = kind;
        self.classifier = match kind {
            ClassifierKind::TwoLayer => vec![
                Layer::Dense(DenseLayer::init(width, width, rng::derive(seed, &[4]))?),
                Layer::Dense(DenseLayer::init(width, NUM_CLASSES, rng::derive(seed, &[5]))?),
            ],
            ClassifierKind::SingleLayer => {
                vec![Layer::Dense(DenseLayer::init(width, NUM_CLASSES, rng::derive(seed, &[4]))?)]
            }
        };
        Ok(())
    }

    pub fn set_encoder_trainable(&mut self, on: bool) {
        self.encoder.set_trainable(on);
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

impl Module for Model {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.params();
        out.extend(self.head_layers().flat_map(|l| l.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.projection.iter_mut().chain(&mut self.classifier).flat_map(|l| l.params_mut()));
        out
    }

    /// `(batch, H, W, 3) -> (batch, out_dim)`.
    fn forward<'t>(&'t self, g: &mut Graph<'t>, x: Var, bound: &mut Vec<Var>) -> TensorResult<Var> {
        let mut h = self.encoder.forward(g, x, bound)?;
        let layers: Vec<&Layer> = self.head_layers().collect();
        for (i, layer) in layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.forward(g, h, bound)?;
        }
        Ok(h)
    }
}
