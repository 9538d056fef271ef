//! Compact convolutional feature extractors for the two image branches.
//!
//! The DEX branch keeps a spatial feature map for the local-selection stage;
//! the XML branch pools to a vector and projects it with an MLP. Both are
//! small strided conv stacks; every downstream stage depends only on the
//! declared output shapes.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imaging::RgbImage;
use crate::tensor::{Binder, ParamId, Params, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("backbone config invalid: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Conv-stack layout plus the declared output contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub in_channels: usize,
    pub stages: Vec<ConvStage>,
}

impl BackboneConfig {
    /// Halving 3x3 stages over an RGB input; e.g. channels `[8, 16, 32]`
    /// takes 64x64x3 to 8x8x32.
    pub fn strided(height: usize, width: usize, channels: &[usize]) -> Self {
        BackboneConfig {
            input_height: height,
            input_width: width,
            in_channels: 3,
            stages: channels
                .iter()
                .map(|&c| ConvStage {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                })
                .collect(),
        }
    }

    /// Derived output shape `(height, width, channels)`.
    pub fn output_shape(&self) -> Result<(usize, usize, usize), BackboneError> {
        let (mut h, mut w, mut c) = (self.input_height, self.input_width, self.in_channels);
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.stride == 0 || stage.kernel == 0 || stage.out_channels == 0 {
                return Err(BackboneError::BadConfig(format!(
                    "stage {i}: kernel, stride, channels must be positive"
                )));
            }
            if h + 2 * stage.pad < stage.kernel || w + 2 * stage.pad < stage.kernel {
                return Err(BackboneError::BadConfig(format!(
                    "stage {i}: kernel {} too large for {h}x{w} input",
                    stage.kernel
                )));
            }
            h = (h + 2 * stage.pad - stage.kernel) / stage.stride + 1;
            w = (w + 2 * stage.pad - stage.kernel) / stage.stride + 1;
            c = stage.out_channels;
        }
        if h == 0 || w == 0 {
            return Err(BackboneError::BadConfig("output collapsed to zero extent".into()));
        }
        Ok((h, w, c))
    }
}

/// Scale byte pixels to [0, 1] and lay them out as `[H, W, 3]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let data = img.pixels().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(
        vec![img.geometry.height as usize, img.geometry.width as usize, 3],
        data,
    )
}

/// Centered uniform on +/- gain/sqrt(fan_in). Conv stacks use the
/// relu-friendly gain sqrt(6); projection layers take theirs explicitly.
fn uniform_init(shape: &[usize], gain: f64, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, gain / (fan_in as f64).sqrt(), rng)
}

const CONV_INIT_GAIN: f64 = 2.449489742783178; // sqrt(6)

#[derive(Debug, Clone)]
struct StageParams {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

/// Conv stack producing a spatial feature map for the DEX branch. The
/// constant output gain sets the working scale of the features the selector
/// consumes.
#[derive(Debug, Clone)]
pub struct DexBackbone {
    stages: Vec<StageParams>,
    output: (usize, usize, usize),
    input: (usize, usize, usize),
    feature_gain: f64,
}

impl DexBackbone {
    pub fn init(
        cfg: &BackboneConfig,
        feature_gain: f64,
        name: &str,
        params: &mut Params,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BackboneError> {
        let output = cfg.output_shape()?;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut in_c = cfg.in_channels;
        for (i, stage) in cfg.stages.iter().enumerate() {
            let fan_in = stage.kernel * stage.kernel * in_c;
            let kernel = params.add(
                format!("{name}.stage{i}.kernel"),
                uniform_init(
                    &[stage.out_channels, stage.kernel, stage.kernel, in_c],
                    CONV_INIT_GAIN,
                    fan_in,
                    rng,
                ),
            );
            let bias = params.add(
                format!("{name}.stage{i}.bias"),
                Tensor::zeros(&[stage.out_channels]),
            );
            stages.push(StageParams {
                kernel,
                bias,
                stride: stage.stride,
                pad: stage.pad,
            });
            in_c = stage.out_channels;
        }
        Ok(DexBackbone {
            stages,
            output,
            input: (cfg.input_height, cfg.input_width, cfg.in_channels),
            feature_gain,
        })
    }

    /// `(height, width, channels)` of the produced feature map.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        self.output
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
        image: Var,
    ) -> Result<Var, TensorError> {
        let got = tape.value(image).shape().to_vec();
        if got != [self.input.0, self.input.1, self.input.2] {
            return Err(TensorError::ShapeMismatch {
                op: "dex_backbone",
                detail: format!("input {:?}, expected {:?}", got, self.input),
            });
        }
        let mut x = image;
        for stage in &self.stages {
            let kernel = binder.var(tape, params, stage.kernel);
            let bias = binder.var(tape, params, stage.bias);
            x = tape.conv2d(x, kernel, stage.stride, stage.pad)?;
            x = tape.channel_bias(x, bias)?;
            x = tape.relu(x)?;
        }
        if self.feature_gain != 1.0 {
            x = tape.scale(x, self.feature_gain)?;
        }
        Ok(x)
    }
}

/// Two-layer perceptron. The activation is configurable so gradient checks
/// can run a smooth or transparent variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpActivation {
    Relu,
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pub activation: MlpActivation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        activation: MlpActivation,
        init_gain: f64,
        params: &mut Params,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            w1: params.add(
                format!("{name}.w1"),
                uniform_init(&[hidden, input], init_gain, input, rng),
            ),
            b1: params.add(format!("{name}.b1"), Tensor::zeros(&[hidden])),
            w2: params.add(
                format!("{name}.w2"),
                uniform_init(&[output, hidden], init_gain, hidden, rng),
            ),
            b2: params.add(format!("{name}.b2"), Tensor::zeros(&[output])),
            activation,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w1 = binder.var(tape, params, self.w1);
        let b1 = binder.var(tape, params, self.b1);
        let w2 = binder.var(tape, params, self.w2);
        let b2 = binder.var(tape, params, self.b2);
        let mut hid = tape.matvec(w1, x)?;
        hid = tape.add(hid, b1)?;
        hid = match self.activation {
            MlpActivation::Relu => tape.relu(hid)?,
            MlpActivation::Sigmoid => tape.sigmoid(hid)?,
            MlpActivation::Identity => hid,
        };
        let out = tape.matvec(w2, hid)?;
        tape.add(out, b2)
    }
}

/// Conv stack plus global average pooling plus MLP, producing the manifest
/// embedding.
#[derive(Debug, Clone)]
pub struct XmlBackbone {
    conv: DexBackbone,
    mlp: Mlp,
    embed: usize,
}

impl XmlBackbone {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        cfg: &BackboneConfig,
        embed: usize,
        mlp_hidden: usize,
        feature_gain: f64,
        name: &str,
        params: &mut Params,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BackboneError> {
        let conv = DexBackbone::init(cfg, feature_gain, name, params, rng)?;
        let (_, _, channels) = conv.output_shape();
        let mlp = Mlp::init(
            &format!("{name}.mlp"),
            channels,
            mlp_hidden,
            embed,
            MlpActivation::Relu,
            CONV_INIT_GAIN,
            params,
            rng,
        );
        Ok(XmlBackbone { conv, mlp, embed })
    }

    pub fn embedding_len(&self) -> usize {
        self.embed
    }

    pub fn set_mlp_activation(&mut self, activation: MlpActivation) {
        self.mlp.activation = activation;
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
        image: Var,
    ) -> Result<Var, TensorError> {
        let fmap = self.conv.forward(tape, params, binder, image)?;
        let (h, w, c) = self.conv.output_shape();
        // Global average pool: [H,W,C] -> [C].
        let flat = tape.reshape(fmap, vec![h * w, c])?;
        let cols = tape.transpose(flat)?;
        let pooled = tape.mean_last_axis(cols)?;
        self.mlp.forward(tape, params, binder, pooled)
    }
}
