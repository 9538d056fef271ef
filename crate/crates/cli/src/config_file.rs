//! Key-value config file handling. Every key is optional and mirrors a
//! training, backbone, geometry, or corpus knob; unknown keys are rejected.

use bido_core::config::{DecisionHead, FusionKind, LossWeights, ModelVariant, TrainConfig};
use bido_core::corpus::CorpusParams;
use bido_core::imaging::ImageGeometry;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // Schedule.
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub lr_decay: Option<f64>,
    pub lr_decay_every: Option<usize>,
    // Model dimensions.
    pub k: Option<usize>,
    pub l: Option<usize>,
    pub h: Option<usize>,
    pub rank: Option<usize>,
    pub margin: Option<f64>,
    // Loss weights.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    // Geometry.
    pub width: Option<u32>,
    pub height: Option<u32>,
    // Wiring.
    pub fusion: Option<FusionKind>,
    pub variant: Option<ModelVariant>,
    pub decision: Option<DecisionHead>,
    // Backbones.
    pub dex_channels: Option<Vec<usize>>,
    pub xml_channels: Option<Vec<usize>>,
    pub mlp_hidden: Option<usize>,
    pub dex_feature_gain: Option<f64>,
    pub xml_feature_gain: Option<f64>,
    // Corpus knobs.
    pub corpus_n: Option<usize>,
    pub malicious_fraction: Option<f64>,
    pub motif_strength: Option<f64>,
    pub drift: Option<f64>,
    pub transforms: Option<String>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config file: {e}"))
    }

    /// Layer the file's values over a base training config.
    pub fn apply_train(&self, cfg: &mut TrainConfig) -> Result<(), String> {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        set!(
            seed,
            epochs,
            batch_size,
            learning_rate,
            momentum,
            lr_decay,
            lr_decay_every,
            k,
            l,
            h,
            rank,
            margin,
            fusion,
            variant,
            decision,
            dex_channels,
            xml_channels,
            mlp_hidden,
            dex_feature_gain,
            xml_feature_gain
        );
        let w = LossWeights {
            alpha: self.alpha.unwrap_or(cfg.weights.alpha),
            beta: self.beta.unwrap_or(cfg.weights.beta),
            gamma: self.gamma.unwrap_or(cfg.weights.gamma),
            delta: self.delta.unwrap_or(cfg.weights.delta),
        };
        cfg.weights = w;
        if self.width.is_some() || self.height.is_some() {
            let width = self.width.unwrap_or(cfg.geometry.width);
            let height = self.height.unwrap_or(cfg.geometry.height);
            cfg.geometry = ImageGeometry::new(width, height).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Layer the corpus knobs over generation parameters.
    pub fn apply_corpus(&self, params: &mut CorpusParams) -> Result<(), String> {
        if let Some(n) = self.corpus_n {
            params.n = n;
        }
        if let Some(f) = self.malicious_fraction {
            params.malicious_fraction = f;
        }
        if let Some(p) = self.motif_strength {
            params.motif_strength = p;
        }
        if let Some(t) = self.drift {
            params.drift = t;
        }
        if let Some(s) = &self.transforms {
            params.transforms = bido_core::corpus::parse_transforms(s)?;
        }
        if let Some(seed) = self.seed {
            params.seed = seed;
        }
        if self.width.is_some() || self.height.is_some() {
            let width = self.width.unwrap_or(params.geometry.width);
            let height = self.height.unwrap_or(params.geometry.height);
            params.geometry = ImageGeometry::new(width, height).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}
