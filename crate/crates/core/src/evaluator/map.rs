use serde::{Deserialize, Serialize};

use super::cv::check_leakage;
use super::detect::{Detection, Detector, DetectorConfig, PatchDetector, PixelBox};
use super::SynthBank;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::par::parallel_map;
use crate::phantom::{split_kfold, Dataset, Label, Sample};
use crate::rng::stage_seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per prediction, in input order.
    pub tp: Vec<bool>,
    pub false_negatives: usize,
}

/// Greedy matching of confidence-sorted predictions: each takes the best
/// still-unmatched ground truth at or above the IoU threshold.
pub fn match_detections(preds: &[Detection], gts: &[PixelBox], iou_threshold: f64) -> MatchResult {
    let mut used = vec![false; gts.len()];
    let tp = preds
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, g)| (j, p.bbox.iou(g)))
                .filter(|(_, iou)| *iou >= iou_threshold)
                .fold(None, |acc: Option<(usize, f64)>, c| match acc {
                    Some(a) if a.1 >= c.1 => Some(a),
                    _ => Some(c),
                });
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    MatchResult {
        tp,
        false_negatives: used.iter().filter(|u| !**u).count(),
    }
}

/// IoU thresholds 0.50, 0.55, .., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// 101-point interpolated average precision over `(confidence, is_tp)` pairs.
pub fn average_precision(ranked: &[(f64, bool)], total_gt: usize) -> Result<f64> {
    if total_gt == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one ground truth".into(),
        ));
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (n, &i) in order.iter().enumerate() {
        tp += usize::from(ranked[i].1);
        precision.push(tp as f64 / (n + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    Ok(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_pred: usize,
}

/// Scores per-image predictions against per-image ground truth. Precision with
/// no predictions is 0.
pub fn evaluate_predictions(preds: &[Vec<Detection>], gts: &[Vec<PixelBox>]) -> Result<DetReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets, {} ground-truth sets",
            preds.len(),
            gts.len()
        )));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let n_pred: usize = preds.iter().map(Vec::len).sum();
    let mut aps = Vec::with_capacity(10);
    let mut at50 = (0, 0);
    for thr in iou_thresholds() {
        let mut ranked = Vec::with_capacity(n_pred);
        let mut tps = 0;
        for (p, g) in preds.iter().zip(gts) {
            let mut sorted = p.clone();
            sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            let m = match_detections(&sorted, g, thr);
            tps += m.tp.iter().filter(|t| **t).count();
            ranked.extend(sorted.iter().zip(&m.tp).map(|(d, &t)| (d.confidence, t)));
        }
        if thr == 0.5 {
            at50 = (tps, ranked.len());
        }
        aps.push(average_precision(&ranked, n_gt)?);
    }
    Ok(DetReport {
        precision: if at50.1 == 0 {
            0.0
        } else {
            at50.0 as f64 / at50.1 as f64
        },
        recall: at50.0 as f64 / n_gt as f64,
        map50: aps[0],
        map50_95: aps.iter().sum::<f64>() / aps.len() as f64,
        n_images: preds.len(),
        n_gt,
        n_pred,
    })
}

pub fn evaluate_detector<D: Detector + ?Sized>(detector: &D, samples: &[&Sample], workers: usize) -> Result<DetReport> {
    let preds = parallel_map(samples, workers, |_, s| detector.detect(&s.image))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<PixelBox>> = samples
        .iter()
        .map(|s| {
            s.boxes
                .iter()
                .map(|b| PixelBox::from_bbox(b, s.image.width(), s.image.height()))
                .collect()
        })
        .collect();
    evaluate_predictions(&preds, &gts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetExperimentConfig {
    pub detector: DetectorConfig,
    pub oversample_factor: usize,
    /// The held-out split is the first fold of a stratified k-fold partition.
    pub k: usize,
    pub seed: u64,
}

impl Default for DetExperimentConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            oversample_factor: 4,
            k: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetComparison {
    pub without_synth: DetReport,
    pub with_synth: DetReport,
}

/// Trains a patch detector on the training split (plus synthetics, which keep
/// their source's lesion mask and boxes) and scores it on the held-out split.
pub fn run_detection_experiment(
    dataset: &Dataset,
    bank: &SynthBank,
    cfg: &DetExperimentConfig,
    use_synth: bool,
    workers: usize,
) -> Result<DetReport> {
    let fold = split_kfold(dataset, cfg.k, cfg.seed)?.swap_remove(0);
    let mut owned_masks: Vec<(&Image, Mask)> = Vec::new();
    let mut provenance = Vec::new();
    for id in &fold.train {
        let s = dataset
            .get(id)
            .ok_or_else(|| Error::Config(format!("fold refers to unknown sample {id}")))?;
        let mask = s.union_mask();
        if use_synth && s.label == Label::Lesion {
            for synth in bank.for_source(id).iter().take(cfg.oversample_factor) {
                owned_masks.push((&synth.image, synth.mask.clone()));
                provenance.push(synth.source_id.as_str());
            }
        }
        owned_masks.push((&s.image, mask));
    }
    check_leakage(&provenance, &fold.test)?;
    let data: Vec<(&Image, &Mask)> = owned_masks.iter().map(|(i, m)| (*i, m)).collect();
    let seed = stage_seed(cfg.seed, "detector");
    let mut det = PatchDetector::new(cfg.detector.clone(), seed)?;
    det.train(&data, seed)?;
    let test: Vec<&Sample> = fold.test.iter().filter_map(|id| dataset.get(id)).collect();
    evaluate_detector(&det, &test, workers)
}

pub fn run_detection_comparison(
    dataset: &Dataset,
    bank: &SynthBank,
    cfg: &DetExperimentConfig,
    workers: usize,
) -> Result<DetComparison> {
    Ok(DetComparison {
        without_synth: run_detection_experiment(dataset, bank, cfg, false, workers)?,
        with_synth: run_detection_experiment(dataset, bank, cfg, true, workers)?,
    })
}
