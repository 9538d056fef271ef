//! Model assembly, the training loop, evaluation, and checkpointing.
//!
//! One model couples the two backbones, the local selector, the fusion
//! stage, a learnable metric over the fused embeddings, and three two-way
//! classification heads. Training is single-threaded and bit-deterministic
//! under a fixed seed.

pub mod harness;
mod metrics;

pub use harness::{run_fusion_comparison, run_k_sweep, FusionReport, FusionRow, KSweepReport, KSweepRow};
pub use metrics::{compute_metrics, Metrics};

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{image_to_tensor, BackboneConfig, BackboneError, DexBackbone, XmlBackbone};
use crate::config::{DecisionHead, FusionKind, LossWeights, ModelVariant, TrainConfig};
use crate::corpus::{splitmix64, Label, LoadedSample};
use crate::fusion::FactorBank;
use crate::metric::{contrastive_loss, MetricError, MetricFactor};
use crate::select::{LocalSelector, MaskActivation};
use crate::tensor::{
    read_checkpoint, write_checkpoint, Binder, CheckpointError, ParamId, Params, SgdMomentum,
    Tape, TensorError, Var,
};

/// Joint loss above this bound aborts training as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("training diverged at epoch {epoch}: joint loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("bad configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

impl From<BackboneError> for TrainError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::BadConfig(msg) => TrainError::Config(msg),
            BackboneError::Tensor(t) => TrainError::Tensor(t),
        }
    }
}

/// Two-logit linear head.
#[derive(Debug, Clone)]
struct Head {
    w: ParamId,
    b: ParamId,
}

impl Head {
    fn init(name: &str, dim: usize, params: &mut Params, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        Head {
            w: params.add(
                format!("{name}.w"),
                crate::tensor::Tensor::uniform(&[2, dim], scale, rng),
            ),
            b: params.add(format!("{name}.b"), crate::tensor::Tensor::zeros(&[2])),
        }
    }

    fn logits(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = binder.var(tape, params, self.w);
        let b = binder.var(tape, params, self.b);
        let wx = tape.matvec(w, x)?;
        tape.add(wx, b)
    }
}

/// The full detector. Components are always initialized (so a given seed
/// yields one parameter set regardless of variant); the variant decides
/// which branches forward, learn, and decide.
pub struct BidoModel {
    pub cfg: TrainConfig,
    pub params: Params,
    dex_backbone: DexBackbone,
    xml_backbone: XmlBackbone,
    selector: LocalSelector,
    bank: FactorBank,
    metric: MetricFactor,
    head_xml: Head,
    head_dex: Head,
    head_fused: Head,
}

fn fused_len(cfg: &TrainConfig) -> usize {
    match cfg.fusion {
        FusionKind::Ops | FusionKind::Summation => cfg.h,
        FusionKind::Concatenation => cfg.l + cfg.h,
    }
}

impl BidoModel {
    pub fn init(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate().map_err(TrainError::Config)?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x6D6F_64656C));

        let (h, w) = (cfg.geometry.height as usize, cfg.geometry.width as usize);
        let dex_cfg = BackboneConfig::strided(h, w, &cfg.dex_channels);
        let dex_backbone = DexBackbone::init(
            &dex_cfg,
            cfg.dex_feature_gain,
            "dex_backbone",
            &mut params,
            &mut rng,
        )?;
        let xml_cfg = BackboneConfig::strided(h, w, &cfg.xml_channels);
        let xml_backbone = XmlBackbone::init(
            &xml_cfg,
            cfg.h,
            cfg.mlp_hidden,
            cfg.xml_feature_gain,
            "xml_backbone",
            &mut params,
            &mut rng,
        )?;
        let selector = LocalSelector::init(
            cfg.k,
            dex_backbone.output_shape(),
            cfg.l,
            cfg.mlp_hidden,
            MaskActivation::Sigmoid,
            "select",
            &mut params,
            &mut rng,
        );
        let bank = FactorBank::init(cfg.h, cfg.l, cfg.rank, "fusion", &mut params, &mut rng);
        let e_len = fused_len(cfg);
        let metric = MetricFactor::init(e_len, "metric", &mut params);
        let head_xml = Head::init("head_xml", cfg.h, &mut params, &mut rng);
        let head_dex = Head::init("head_dex", cfg.l, &mut params, &mut rng);
        let head_fused = Head::init("head_fused", e_len, &mut params, &mut rng);

        Ok(BidoModel {
            cfg: cfg.clone(),
            params,
            dex_backbone,
            xml_backbone,
            selector,
            bank,
            metric,
            head_xml,
            head_dex,
            head_fused,
        })
    }

    fn check_geometry(&self, sample: &LoadedSample) -> Result<(), TrainError> {
        for img in [&sample.dex_img, &sample.xml_img] {
            if img.geometry != self.cfg.geometry {
                return Err(TrainError::Config(format!(
                    "sample {} has geometry {}x{}, model expects {}x{}",
                    sample.id,
                    img.geometry.width,
                    img.geometry.height,
                    self.cfg.geometry.width,
                    self.cfg.geometry.height
                )));
            }
        }
        Ok(())
    }

    /// Forward one sample on an existing tape. Branches not used by the
    /// active variant stay `None`.
    fn forward_sample(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        sample: &LoadedSample,
    ) -> Result<SampleForward, TrainError> {
        self.check_geometry(sample)?;
        let params = &self.params;
        let use_dex = self.cfg.variant != ModelVariant::XmlOnly;
        let use_xml = self.cfg.variant != ModelVariant::DexOnly;

        let mut out = SampleForward::default();
        if use_dex {
            let img = tape.leaf(image_to_tensor(&sample.dex_img), false);
            let fmap = self.dex_backbone.forward(tape, params, binder, img)?;
            let z_dex = self.selector.forward(tape, params, binder, fmap)?;
            out.logits_dex = Some(self.head_dex.logits(tape, params, binder, z_dex)?);
            out.z_dex = Some(z_dex);
        }
        if use_xml {
            let img = tape.leaf(image_to_tensor(&sample.xml_img), false);
            let z_xml = self.xml_backbone.forward(tape, params, binder, img)?;
            out.logits_xml = Some(self.head_xml.logits(tape, params, binder, z_xml)?);
            out.z_xml = Some(z_xml);
        }
        if self.cfg.variant == ModelVariant::Full {
            let (z_xml, z_dex) = (out.z_xml.unwrap(), out.z_dex.unwrap());
            let fused = match self.cfg.fusion {
                FusionKind::Ops => self.bank.factorize(tape, params, binder, z_xml, z_dex)?,
                FusionKind::Summation => tape.add(z_xml, z_dex)?,
                FusionKind::Concatenation => tape.concat(&[z_xml, z_dex])?,
            };
            out.logits_fused = Some(self.head_fused.logits(tape, params, binder, fused)?);
            out.fused = Some(fused);
        }
        Ok(out)
    }

    /// Class probabilities for one sample under the configured decision rule.
    pub fn predict_probs(&self, sample: &LoadedSample) -> Result<[f64; 2], TrainError> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let fwd = self.forward_sample(&mut tape, &mut binder, sample)?;
        let softmax_of = |tape: &mut Tape, logits: Var| -> Result<[f64; 2], TrainError> {
            let s = tape.softmax(logits)?;
            let d = tape.value(s).data();
            Ok([d[0], d[1]])
        };
        let probs = match (self.cfg.variant, self.cfg.decision) {
            (ModelVariant::DexOnly, _) => softmax_of(&mut tape, fwd.logits_dex.unwrap())?,
            (ModelVariant::XmlOnly, _) => softmax_of(&mut tape, fwd.logits_xml.unwrap())?,
            (ModelVariant::Full, DecisionHead::Ops) => {
                softmax_of(&mut tape, fwd.logits_fused.unwrap())?
            }
            (ModelVariant::Full, DecisionHead::Average) => {
                let mut acc = [0.0; 2];
                for logits in [fwd.logits_xml, fwd.logits_dex, fwd.logits_fused] {
                    let p = softmax_of(&mut tape, logits.unwrap())?;
                    acc[0] += p[0] / 3.0;
                    acc[1] += p[1] / 3.0;
                }
                acc
            }
        };
        Ok(probs)
    }

    /// Joint batch loss value without gradients.
    pub fn batch_loss_value(&self, batch: &[&LoadedSample]) -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let (_, terms) = self.batch_loss(&mut tape, &mut binder, batch)?;
        Ok(terms.joint)
    }

    /// Joint batch loss and its gradients in parameter order, for gradient
    /// checking and custom training drivers.
    pub fn batch_gradients(
        &self,
        batch: &[&LoadedSample],
    ) -> Result<(f64, Vec<Option<crate::tensor::Tensor>>), TrainError> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let (joint, terms) = self.batch_loss(&mut tape, &mut binder, batch)?;
        tape.backward(joint)?;
        Ok((terms.joint, binder.grads(&tape)))
    }

    /// The branch embeddings of one sample, for inspection tooling.
    pub fn embeddings(&self, sample: &LoadedSample) -> Result<SampleEmbeddings, TrainError> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let fwd = self.forward_sample(&mut tape, &mut binder, sample)?;
        let take = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec());
        Ok(SampleEmbeddings {
            z_xml: take(fwd.z_xml),
            z_dex: take(fwd.z_dex),
            fused: take(fwd.fused),
        })
    }

    pub fn predict(&self, sample: &LoadedSample) -> Result<Label, TrainError> {
        let probs = self.predict_probs(sample)?;
        Ok(if probs[1] > probs[0] {
            Label::Malicious
        } else {
            Label::Benign
        })
    }

    /// Joint loss over one batch. Returns the loss node and the individual
    /// term values for the history record.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &[&LoadedSample],
    ) -> Result<(Var, LossTerms), TrainError> {
        let mut xml_ces = Vec::new();
        let mut dex_ces = Vec::new();
        let mut fused_ces = Vec::new();
        let mut fused_embeddings = Vec::new();
        let mut labels = Vec::new();

        for sample in batch {
            let fwd = self.forward_sample(tape, binder, sample)?;
            let class = sample.label.class_index();
            if let Some(logits) = fwd.logits_xml {
                xml_ces.push(tape.cross_entropy_logits(logits, class)?);
            }
            if let Some(logits) = fwd.logits_dex {
                dex_ces.push(tape.cross_entropy_logits(logits, class)?);
            }
            if let Some(logits) = fwd.logits_fused {
                fused_ces.push(tape.cross_entropy_logits(logits, class)?);
            }
            if let Some(e) = fwd.fused {
                fused_embeddings.push(e);
                labels.push(sample.label);
            }
        }

        let mean_of = |tape: &mut Tape, terms: &[Var]| -> Result<Option<Var>, TensorError> {
            if terms.is_empty() {
                return Ok(None);
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)?))
        };

        let l_xml = mean_of(tape, &xml_ces)?;
        let l_dex = mean_of(tape, &dex_ces)?;
        let l_fused = mean_of(tape, &fused_ces)?;
        // The contrastive term needs pairs; a trailing single-sample batch
        // contributes no metric signal.
        let l_con = if self.cfg.weights.delta > 0.0 && fused_embeddings.len() >= 2 {
            Some(contrastive_loss(
                tape,
                &self.params,
                binder,
                &self.metric,
                &fused_embeddings,
                &labels,
                self.cfg.margin,
            )?)
        } else {
            None
        };

        let joint = joint_loss(tape, l_xml, l_dex, l_fused, l_con, &self.cfg.weights)?;
        let value_of = |tape: &Tape, v: &Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let terms = LossTerms {
            joint: tape.value(joint).item(),
            xml: value_of(tape, &l_xml),
            dex: value_of(tape, &l_dex),
            fused: value_of(tape, &l_fused),
            contrastive: value_of(tape, &l_con),
        };
        Ok((joint, terms))
    }
}

/// Raw embedding values of one sample.
#[derive(Debug, Clone)]
pub struct SampleEmbeddings {
    pub z_xml: Option<Vec<f64>>,
    pub z_dex: Option<Vec<f64>>,
    pub fused: Option<Vec<f64>>,
}

#[derive(Default)]
struct SampleForward {
    z_xml: Option<Var>,
    z_dex: Option<Var>,
    fused: Option<Var>,
    logits_xml: Option<Var>,
    logits_dex: Option<Var>,
    logits_fused: Option<Var>,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossTerms {
    joint: f64,
    xml: f64,
    dex: f64,
    fused: f64,
    contrastive: f64,
}

/// Mean cross entropy of per-sample logit vectors against class indices.
pub fn head_loss(
    tape: &mut Tape,
    logits: &[Var],
    classes: &[usize],
) -> Result<Var, TensorError> {
    if logits.is_empty() || logits.len() != classes.len() {
        return Err(TensorError::ShapeMismatch {
            op: "head_loss",
            detail: format!("{} logits, {} labels", logits.len(), classes.len()),
        });
    }
    let mut acc: Option<Var> = None;
    for (&lv, &c) in logits.iter().zip(classes) {
        let ce = tape.cross_entropy_logits(lv, c)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    tape.scale(acc.unwrap(), 1.0 / logits.len() as f64)
}

/// Weighted sum of the loss terms; absent terms contribute nothing.
pub fn joint_loss(
    tape: &mut Tape,
    l_xml: Option<Var>,
    l_dex: Option<Var>,
    l_fused: Option<Var>,
    l_con: Option<Var>,
    weights: &LossWeights,
) -> Result<Var, TensorError> {
    let mut acc: Option<Var> = None;
    for (term, weight) in [
        (l_xml, weights.alpha),
        (l_dex, weights.beta),
        (l_fused, weights.gamma),
        (l_con, weights.delta),
    ] {
        if let Some(t) = term {
            let scaled = tape.scale(t, weight)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(tape.constant(crate::tensor::Tensor::scalar(0.0))),
    }
}

/// Index split of a corpus, seeded: 80% train, 10% validation, 10% test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.gen::<u64>() % (i as u64 + 1)) as usize;
        v.swap(i, j);
    }
    v
}

pub fn split_corpus(n: usize, seed: u64) -> SplitIndices {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x73706C_69));
    let order = shuffled_indices(n, &mut rng);
    let n_test = n / 10;
    let n_val = n / 10;
    SplitIndices {
        test: order[..n_test].to_vec(),
        val: order[n_test..n_test + n_val].to_vec(),
        train: order[n_test + n_val..].to_vec(),
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_xml: f64,
    pub loss_dex: f64,
    pub loss_ops: f64,
    pub loss_con: f64,
    pub val: Metrics,
}

pub struct TrainOutcome {
    pub model: BidoModel,
    pub history: Vec<EpochRecord>,
    pub split: SplitIndices,
}

pub fn history_to_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Train on a corpus with an internal 80/10/10 split. Deterministic under
/// `cfg.seed`; per-epoch validation metrics land in the history.
pub fn train(samples: &[LoadedSample], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let split = split_corpus(samples.len(), cfg.seed);
    let train_set: Vec<&LoadedSample> = split.train.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&LoadedSample> = split.val.iter().map(|&i| &samples[i]).collect();

    let has = |label: Label| train_set.iter().any(|s| s.label == label);
    if train_set.is_empty() || !has(Label::Benign) || !has(Label::Malicious) {
        return Err(TrainError::DegenerateCorpus(format!(
            "train split of {} samples must contain both classes",
            train_set.len()
        )));
    }

    let mut model = BidoModel::init(cfg)?;
    let mut optimizer = SgdMomentum::new(
        &model.params.shapes(),
        cfg.learning_rate,
        cfg.momentum,
        cfg.lr_decay,
        cfg.lr_decay_every,
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x7368_7566));
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        optimizer.begin_epoch(epoch);
        let order = shuffled_indices(train_set.len(), &mut shuffle_rng);
        let mut sums = LossTerms::default();
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LoadedSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.params);
            let (joint, terms) = model.batch_loss(&mut tape, &mut binder, &batch)?;
            if !terms.joint.is_finite() || terms.joint > DIVERGENCE_BOUND {
                return Err(TrainError::Diverged {
                    epoch,
                    loss: terms.joint,
                });
            }
            tape.backward(joint)?;
            let grads = binder.grads(&tape);
            optimizer.step(model.params.tensors_mut(), &grads)?;

            sums.joint += terms.joint;
            sums.xml += terms.xml;
            sums.dex += terms.dex;
            sums.fused += terms.fused;
            sums.contrastive += terms.contrastive;
            batches += 1;
        }

        let val = if val_set.is_empty() {
            Metrics::empty()
        } else {
            evaluate(&model, &val_set)?
        };
        let inv = 1.0 / batches.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            lr: optimizer.learning_rate(),
            loss: sums.joint * inv,
            loss_xml: sums.xml * inv,
            loss_dex: sums.dex * inv,
            loss_ops: sums.fused * inv,
            loss_con: sums.contrastive * inv,
            val,
        });
    }

    Ok(TrainOutcome {
        model,
        history,
        split,
    })
}

pub fn evaluate(model: &BidoModel, samples: &[&LoadedSample]) -> Result<Metrics, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for sample in samples {
        predictions.push(model.predict(sample)?);
        truths.push(sample.label);
    }
    Ok(compute_metrics(&predictions, &truths))
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// Write the parameter checkpoint plus a sidecar JSON with the resolved
/// configuration, so `load_model` can rebuild the exact architecture.
pub fn save_model(model: &BidoModel, path: &Path) -> Result<(), TrainError> {
    let mut file = fs::File::create(path)?;
    write_checkpoint(&mut file, &model.params.to_named_vec())?;
    fs::write(
        meta_path(path),
        serde_json::to_string_pretty(&model.cfg).expect("config serializes"),
    )?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<BidoModel, TrainError> {
    let meta = fs::read_to_string(meta_path(path))?;
    let cfg: TrainConfig = serde_json::from_str(&meta)
        .map_err(|e| TrainError::Config(format!("bad model metadata: {e}")))?;
    let mut model = BidoModel::init(&cfg)?;
    let tensors = read_checkpoint(fs::File::open(path)?)?;
    model.params.load_named(&tensors)?;
    Ok(model)
}
