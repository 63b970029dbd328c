use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::classifier::{train_classifier, ClassifierConfig};
use super::stats::{auroc, summarize, Summary};
use super::SynthBank;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par::parallel_map;
use crate::phantom::{split_kfold, Dataset, Fold, Label};
use crate::rng::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    /// Synthetic images per lesion original added to training folds.
    pub oversample_factor: usize,
    pub classifier: ClassifierConfig,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            oversample_factor: 4,
            classifier: ClassifierConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub auroc: f64,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_train: usize,
    pub n_synthetic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvArm {
    pub use_synth: bool,
    pub folds: Vec<FoldResult>,
    pub auroc: Summary,
    pub accuracy: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub oversample_factor: usize,
    pub without_synth: CvArm,
    pub with_synth: CvArm,
}

/// Training images for a fold: originals in `fold.train`, plus up to
/// `factor` synthetics per lesion original when `use_synth`. Fails if any
/// synthetic traces back to a test-fold image.
pub fn assemble_training<'a>(
    dataset: &'a Dataset,
    bank: &'a SynthBank,
    fold: &Fold,
    factor: usize,
    use_synth: bool,
) -> Result<(Vec<(&'a Image, usize)>, usize)> {
    let mut train = Vec::new();
    let mut provenance = Vec::new();
    for id in &fold.train {
        let s = dataset
            .get(id)
            .ok_or_else(|| Error::Config(format!("fold refers to unknown sample {id}")))?;
        train.push((&s.image, s.label.index()));
        if use_synth && s.label == Label::Lesion {
            for synth in bank.for_source(id).iter().take(factor) {
                train.push((&synth.image, Label::Lesion.index()));
                provenance.push(synth.source_id.as_str());
            }
        }
    }
    check_leakage(&provenance, &fold.test)?;
    Ok((train, provenance.len()))
}

pub fn check_leakage(provenance: &[&str], test_ids: &[String]) -> Result<()> {
    let test: BTreeSet<&str> = test_ids.iter().map(String::as_str).collect();
    match provenance.iter().find(|p| test.contains(*p)) {
        Some(p) => Err(Error::Leakage(format!(
            "synthetic derived from test image {p} in training"
        ))),
        None => Ok(()),
    }
}

fn evaluate_fold(
    dataset: &Dataset,
    bank: &SynthBank,
    cfg: &CvConfig,
    use_synth: bool,
    index: usize,
    fold: &Fold,
) -> Result<FoldResult> {
    let (train, n_synthetic) = assemble_training(dataset, bank, fold, cfg.oversample_factor, use_synth)?;
    let model = train_classifier(&train, &cfg.classifier, mix_seed(cfg.seed, index as u64))?;
    let test: Vec<_> = fold.test.iter().filter_map(|id| dataset.get(id)).collect();
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let probs = model.predict_proba(&images)?;
    let labels: Vec<bool> = test.iter().map(|s| s.label == Label::Lesion).collect();
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in probs.iter().zip(&labels) {
        match (p >= 0.5, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(FoldResult {
        fold: index,
        auroc: auroc(&probs, &labels)?,
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        tp,
        fp,
        tn,
        fn_,
        n_train: train.len(),
        n_synthetic,
    })
}

/// Stratified k-fold classification; synthetics only ever join training folds.
pub fn run_cv(dataset: &Dataset, bank: &SynthBank, cfg: &CvConfig, use_synth: bool, workers: usize) -> Result<CvArm> {
    let folds = split_kfold(dataset, cfg.k, cfg.seed)?;
    let results = parallel_map(&folds, workers, |i, fold| {
        evaluate_fold(dataset, bank, cfg, use_synth, i, fold)
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let auroc = summarize(&folds.iter().map(|f| f.auroc).collect::<Vec<_>>())?;
    let accuracy = summarize(&folds.iter().map(|f| f.accuracy).collect::<Vec<_>>())?;
    Ok(CvArm {
        use_synth,
        folds,
        auroc,
        accuracy,
    })
}

pub fn run_cv_report(dataset: &Dataset, bank: &SynthBank, cfg: &CvConfig, workers: usize) -> Result<CvReport> {
    Ok(CvReport {
        k: cfg.k,
        oversample_factor: cfg.oversample_factor,
        without_synth: run_cv(dataset, bank, cfg, false, workers)?,
        with_synth: run_cv(dataset, bank, cfg, true, workers)?,
    })
}
