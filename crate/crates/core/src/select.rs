//! Local feature selection over the DEX feature map: per-pixel mask kernels,
//! masked local maps, CLS-token self-attention across the local maps, and an
//! MLP projection to the DEX embedding.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Mlp, MlpActivation};
use crate::tensor::{Binder, ParamId, Params, Tape, Tensor, TensorError, Var};

/// Activation applied to the mask logits. Sigmoid keeps mask entries in
/// (0, 1), read as the chance that a pixel carries discriminative signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskActivation {
    Sigmoid,
    Relu,
}

/// Mask kernels, CLS token, positional table, attention projections, and the
/// output MLP for one feature-map shape.
#[derive(Debug, Clone)]
pub struct LocalSelector {
    mask_kernels: ParamId,
    cls: ParamId,
    positional: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    mlp: Mlp,
    pub activation: MaskActivation,
    k: usize,
    map_height: usize,
    map_width: usize,
    channels: usize,
}

impl LocalSelector {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        k: usize,
        feature_shape: (usize, usize, usize),
        embed: usize,
        mlp_hidden: usize,
        activation: MaskActivation,
        name: &str,
        params: &mut Params,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(k >= 1, "need at least one mask kernel");
        let (h, w, c) = feature_shape;
        let d = h * w;
        let scale = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mask_kernels = params.add(
            format!("{name}.mask_kernels"),
            Tensor::uniform(&[k, 1, 1, c], scale(c), rng),
        );
        let cls = params.add(format!("{name}.cls"), Tensor::zeros(&[d]));
        let positional = params.add(format!("{name}.positional"), Tensor::zeros(&[k + 1, d]));
        let w_q = params.add(
            format!("{name}.w_q"),
            Tensor::uniform(&[d, d], scale(d), rng),
        );
        let w_k = params.add(
            format!("{name}.w_k"),
            Tensor::uniform(&[d, d], scale(d), rng),
        );
        let w_v = params.add(
            format!("{name}.w_v"),
            Tensor::uniform(&[d, d], scale(d), rng),
        );
        let mlp = Mlp::init(
            &format!("{name}.mlp"),
            d,
            mlp_hidden,
            embed,
            MlpActivation::Relu,
            1.0,
            params,
            rng,
        );
        LocalSelector {
            mask_kernels,
            cls,
            positional,
            w_q,
            w_k,
            w_v,
            mlp,
            activation,
            k,
            map_height: h,
            map_width: w,
            channels: c,
        }
    }

    pub fn mask_count(&self) -> usize {
        self.k
    }

    /// Token length: one flattened local map.
    pub fn token_len(&self) -> usize {
        self.map_height * self.map_width
    }

    pub fn set_mlp_activation(&mut self, activation: MlpActivation) {
        self.mlp.activation = activation;
    }

    /// 1x1-convolve the feature map with each mask kernel: `[H, W, k]` of
    /// activated per-pixel scores.
    pub fn candidate_masks(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
        feature_map: Var,
    ) -> Result<Var, TensorError> {
        self.check_map(tape, feature_map)?;
        let kernels = binder.var(tape, params, self.mask_kernels);
        let logits = tape.conv2d(feature_map, kernels, 1, 0)?;
        match self.activation {
            MaskActivation::Sigmoid => tape.sigmoid(logits),
            MaskActivation::Relu => tape.relu(logits),
        }
    }

    /// Mask the (channel-averaged) feature map and rescale: one `[H, W]`
    /// local map per mask.
    pub fn local_feature_maps(
        &self,
        tape: &mut Tape,
        feature_map: Var,
        masks: Var,
    ) -> Result<Vec<Var>, TensorError> {
        self.check_map(tape, feature_map)?;
        let got = tape.value(masks).shape().to_vec();
        if got != [self.map_height, self.map_width, self.k] {
            return Err(TensorError::ShapeMismatch {
                op: "local_feature_maps",
                detail: format!("masks {:?}", got),
            });
        }
        let pooled = tape.mean_last_axis(feature_map)?;
        let norm = 1.0 / (self.map_height * self.map_width) as f64;
        (0..self.k)
            .map(|i| {
                let mask = tape.slice_channel(masks, i)?;
                let masked = tape.hadamard(pooled, mask)?;
                tape.scale(masked, norm)
            })
            .collect()
    }

    /// Append the CLS token, add positions, and run one self-attention
    /// block. Returns the attended token matrix `[(k+1), d]`.
    pub fn attend_local(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
        local_maps: &[Var],
    ) -> Result<Var, TensorError> {
        let d = self.token_len();
        let mut rows = Vec::with_capacity(local_maps.len() + 1);
        for &m in local_maps {
            rows.push(tape.flatten(m)?);
        }
        rows.push(binder.var(tape, params, self.cls));

        let stacked = tape.stack_rows(&rows)?;
        let positional = binder.var(tape, params, self.positional);
        let pos = if local_maps.len() == self.k {
            positional
        } else {
            // Degenerate guard (fewer tokens than configured): use the tail
            // of the positional table so the CLS row keeps its slot.
            let full = tape.value(positional).clone();
            let rows_n = rows.len();
            let start = (self.k + 1 - rows_n) * d;
            tape.constant(Tensor::matrix(rows_n, d, full.data()[start..].to_vec()))
        };
        let tokens = tape.add(stacked, pos)?;

        let w_q = binder.var(tape, params, self.w_q);
        let w_k = binder.var(tape, params, self.w_k);
        let w_v = binder.var(tape, params, self.w_v);
        let q = tape.matmul(tokens, w_q)?;
        let k = tape.matmul(tokens, w_k)?;
        let v = tape.matmul(tokens, w_v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let weights = tape.softmax(scaled)?;
        tape.matmul(weights, v)
    }

    /// Read out the CLS row of the attended matrix and project it to the
    /// embedding length.
    pub fn project_dex(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
        attended: Var,
    ) -> Result<Var, TensorError> {
        let rows = tape.value(attended).shape()[0];
        let cls_row = tape.slice_row(attended, rows - 1)?;
        self.mlp.forward(tape, params, binder, cls_row)
    }

    /// Full selection pipeline: masks, local maps, attention, projection.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
        feature_map: Var,
    ) -> Result<Var, TensorError> {
        let masks = self.candidate_masks(tape, params, binder, feature_map)?;
        let locals = self.local_feature_maps(tape, feature_map, masks)?;
        let attended = self.attend_local(tape, params, binder, &locals)?;
        self.project_dex(tape, params, binder, attended)
    }

    fn check_map(&self, tape: &Tape, feature_map: Var) -> Result<(), TensorError> {
        let got = tape.value(feature_map).shape().to_vec();
        if got != [self.map_height, self.map_width, self.channels] {
            return Err(TensorError::ShapeMismatch {
                op: "local_select",
                detail: format!(
                    "feature map {:?}, expected {:?}",
                    got,
                    (self.map_height, self.map_width, self.channels)
                ),
            });
        }
        Ok(())
    }
}
