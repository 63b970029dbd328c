//! Classification and detection experiments with synthetic oversampling.

pub mod classifier;
pub mod cv;
pub mod detect;
pub mod gradcam;
pub mod map;
pub mod stats;

use std::collections::BTreeMap;

use crate::image::{BBox, Image, Mask};

pub use classifier::{image_batch, train_classifier, Classifier, ClassifierConfig};
pub use cv::{run_cv, run_cv_report, CvArm, CvConfig, CvReport, FoldResult};
pub use detect::{Detection, Detector, DetectorConfig, PatchDetector, PixelBox};
pub use gradcam::{containment, grad_cam, lesion_cams, ContainmentReport, LesionCam};
pub use map::{
    average_precision, evaluate_predictions, match_detections, run_detection_comparison, run_detection_experiment,
    DetComparison, DetExperimentConfig, DetReport,
};
pub use stats::{auroc, summarize, Summary};

/// A synthesized image and the original it was derived from.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub source_id: String,
    pub image: Image,
    /// Region that was inpainted.
    pub mask: Mask,
    /// Boxes carried over from the source.
    pub boxes: Vec<BBox>,
}

/// Synthetic images grouped by source id, each group in variant order.
#[derive(Debug, Clone, Default)]
pub struct SynthBank {
    by_source: BTreeMap<String, Vec<SynthImage>>,
}

impl SynthBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, item: SynthImage) {
        self.by_source.entry(item.source_id.clone()).or_default().push(item);
    }

    pub fn for_source(&self, id: &str) -> &[SynthImage] {
        self.by_source.get(id).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_source.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.by_source.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SynthImage> {
        self.by_source.values().flatten()
    }
}
