//! Comparison harnesses: fusion-variant sweep and local-feature-map-count
//! sweep, each emitting a serializable report.

use serde::Serialize;

use super::{evaluate, train, Metrics, TrainError};
use crate::config::{FusionKind, TrainConfig};
use crate::corpus::LoadedSample;

#[derive(Debug, Clone, Serialize)]
pub struct FusionRow {
    pub fusion: FusionKind,
    pub per_seed_f1: Vec<Option<f64>>,
    /// Mean over seeds with undefined F1 counted as 0.
    pub mean_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FusionReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<FusionRow>,
}

impl FusionReport {
    pub fn mean_f1(&self, fusion: FusionKind) -> Option<f64> {
        self.rows.iter().find(|r| r.fusion == fusion).map(|r| r.mean_f1)
    }
}

/// Train and evaluate each fusion kind across the given seeds. Evaluation
/// runs on `eval_samples` when provided, otherwise on each run's own
/// held-out test split.
pub fn run_fusion_comparison(
    train_samples: &[LoadedSample],
    eval_samples: Option<&[LoadedSample]>,
    base_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<FusionReport, TrainError> {
    let kinds = [
        FusionKind::Ops,
        FusionKind::Summation,
        FusionKind::Concatenation,
    ];
    let mut rows = Vec::with_capacity(kinds.len());
    for fusion in kinds {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                fusion,
                seed,
                ..base_cfg.clone()
            };
            let outcome = train(train_samples, &cfg)?;
            let metrics = match eval_samples {
                Some(eval) => {
                    let refs: Vec<&LoadedSample> = eval.iter().collect();
                    evaluate(&outcome.model, &refs)?
                }
                None => {
                    let refs: Vec<&LoadedSample> =
                        outcome.split.test.iter().map(|&i| &train_samples[i]).collect();
                    evaluate(&outcome.model, &refs)?
                }
            };
            per_seed.push(metrics.f1);
        }
        let mean_f1 =
            per_seed.iter().map(|f| f.unwrap_or(0.0)).sum::<f64>() / seeds.len().max(1) as f64;
        rows.push(FusionRow {
            fusion,
            per_seed_f1: per_seed,
            mean_f1,
        });
    }
    Ok(FusionReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct KSweepRow {
    pub k: usize,
    pub val: Metrics,
    pub test: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct KSweepReport {
    pub rows: Vec<KSweepRow>,
}

/// Train once per requested local-feature-map count and evaluate on the
/// held-out split.
pub fn run_k_sweep(
    samples: &[LoadedSample],
    base_cfg: &TrainConfig,
    ks: &[usize],
) -> Result<KSweepReport, TrainError> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let cfg = TrainConfig {
            k,
            ..base_cfg.clone()
        };
        let outcome = train(samples, &cfg)?;
        let test_refs: Vec<&LoadedSample> =
            outcome.split.test.iter().map(|&i| &samples[i]).collect();
        let test = evaluate(&outcome.model, &test_refs)?;
        let val = outcome
            .history
            .last()
            .map(|r| r.val)
            .unwrap_or_else(Metrics::empty);
        rows.push(KSweepRow { k, val, test });
    }
    Ok(KSweepReport { rows })
}
