//! Shared experiment configuration: model dimensions, schedule, and loss
//! weighting. Every knob has a desk-scale default; the CLI layers a config
//! file and flag overrides on top.

use crate::imaging::ImageGeometry;

/// How the two modality embeddings are fused before the fused head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Factorized outer-product space (the default).
    Ops,
    Summation,
    Concatenation,
}

/// Which branches the model trains and predicts with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Full,
    DexOnly,
    XmlOnly,
}

/// Which head decides at inference time for the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionHead {
    /// Argmax over the fused-head probabilities.
    Ops,
    /// Average the three heads' probabilities first.
    Average,
}

/// Weights of the joint loss: xml, dex, and fused cross-entropies plus the
/// contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            delta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("loss weight {name} = {v} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Full training configuration. Defaults: batch 8, 64 epochs, lr 0.001 with
/// momentum 0.9 decayed by 0.9 every 2 epochs, 32 local feature maps,
/// 64-dimensional embeddings, rank-8 fusion, margin 1.0.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Number of local feature maps (mask kernels).
    pub k: usize,
    /// DEX-branch embedding length.
    pub l: usize,
    /// XML-branch and fused embedding length.
    pub h: usize,
    /// Rank of the factorized fusion.
    pub rank: usize,
    /// Contrastive margin.
    pub margin: f64,
    pub weights: LossWeights,
    pub geometry: ImageGeometry,
    pub fusion: FusionKind,
    pub variant: ModelVariant,
    pub decision: DecisionHead,
    /// Per-stage output channels of the strided conv backbones.
    pub dex_channels: Vec<usize>,
    pub xml_channels: Vec<usize>,
    /// Hidden width of the projection MLPs.
    pub mlp_hidden: usize,
    /// Constant output scale of each backbone's feature map. The local-map
    /// rescaling divides DEX tokens by the map area, so the DEX branch runs
    /// a much larger gain to keep embeddings at a trainable magnitude.
    pub dex_feature_gain: f64,
    pub xml_feature_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 64,
            batch_size: 8,
            learning_rate: 0.001,
            momentum: 0.9,
            lr_decay: 0.9,
            lr_decay_every: 2,
            k: 32,
            l: 64,
            h: 64,
            rank: 8,
            margin: 1.0,
            weights: LossWeights::default(),
            geometry: ImageGeometry::new(64, 64).expect("static geometry"),
            fusion: FusionKind::Ops,
            variant: ModelVariant::Full,
            decision: DecisionHead::Ops,
            dex_channels: vec![8, 16, 32],
            xml_channels: vec![8, 16, 32],
            mlp_hidden: 64,
            dex_feature_gain: 2048.0,
            xml_feature_gain: 4.0,
        }
    }
}

impl TrainConfig {
    /// Paper-scale embedding widths on 256x256 inputs. Heavy; the desk
    /// default is what the test suites run.
    pub fn paper_preset() -> Self {
        TrainConfig {
            l: 512,
            h: 512,
            geometry: ImageGeometry::new(256, 256).expect("static geometry"),
            dex_channels: vec![16, 32, 64, 64, 32],
            xml_channels: vec![16, 32, 64, 64, 32],
            mlp_hidden: 512,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.k == 0
            || self.l == 0
            || self.h == 0
            || self.rank == 0
        {
            return Err("epochs, batch_size, k, l, h, rank must all be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(format!("lr_decay {} must be in (0, 1]", self.lr_decay));
        }
        if self.lr_decay_every == 0 {
            return Err("lr_decay_every must be positive".into());
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(format!("margin {} must be positive", self.margin));
        }
        self.weights.validate()?;
        if self.fusion == FusionKind::Summation && self.l != self.h {
            return Err(format!(
                "summation fusion needs l == h, got l={} h={}",
                self.l, self.h
            ));
        }
        if self.dex_channels.is_empty() || self.xml_channels.is_empty() {
            return Err("backbones need at least one conv stage".into());
        }
        for (name, g) in [
            ("dex_feature_gain", self.dex_feature_gain),
            ("xml_feature_gain", self.xml_feature_gain),
        ] {
            if !(g > 0.0 && g.is_finite()) {
                return Err(format!("{name} = {g} must be positive and finite"));
            }
        }
        Ok(())
    }
}
