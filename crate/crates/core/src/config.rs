//! Run configuration: one JSON document covering every stage, with presets.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{ConditionToken, ScheduleConfig, SynthParams, TrainConfig, UNetConfig};
use crate::error::{Error, Result};
use crate::evaluator::{ClassifierConfig, CvConfig, DetExperimentConfig};
use crate::phantom::PhantomConfig;
use crate::rng::stage_seed;
use crate::segmenter::GrowParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Tiny end-to-end run: 32×32, 50 images, 200 diffusion steps, 20 inference steps.
    Smoke,
    #[default]
    Desk,
    /// Continue training an existing checkpoint with the fine-tuning constants.
    PaperFinetune,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown preset {s:?} (smoke | desk | paper-finetune)")))
    }
}

/// Constants for the fine-tuning / inpainting / evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaperConstants {
    pub finetune_learning_rate: f64,
    pub finetune_steps: usize,
    pub finetune_batch_size: usize,
    pub guidance_scale: f64,
    pub inference_steps: usize,
    pub variants: usize,
    pub oversample_factor: usize,
    pub detector_epochs: usize,
    pub detector_batch_size: usize,
    pub detector_learning_rate: f64,
    pub detector_momentum: f64,
}

impl Default for PaperConstants {
    fn default() -> Self {
        Self {
            finetune_learning_rate: 5e-6,
            finetune_steps: 1000,
            finetune_batch_size: 1,
            guidance_scale: 7.5,
            inference_steps: 100,
            variants: 3,
            oversample_factor: 4,
            detector_epochs: 120,
            detector_batch_size: 4,
            detector_learning_rate: 0.005,
            detector_momentum: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct DiffusionStage {
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    /// Continue from `models/diffusion.ckpt` instead of a fresh network.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthStage {
    pub params: SynthParams,
    pub positive: ConditionToken,
    pub negative: Option<ConditionToken>,
    /// Pixels added around the predicted lesion mask before inpainting.
    pub mask_dilation: usize,
    /// Number of originals rendered as figure panels.
    pub figure_panels: usize,
}

impl Default for SynthStage {
    fn default() -> Self {
        Self {
            params: SynthParams::default(),
            positive: ConditionToken::Lesion,
            negative: Some(ConditionToken::Degraded),
            mask_dilation: 1,
            figure_panels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsStage {
    /// Classifier whose trunk provides FID / perceptual features.
    pub extractor: ClassifierConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationStage {
    pub cv: CvConfig,
    /// Grad-CAM panels written for correctly classified lesions.
    pub figure_panels: usize,
}

impl Default for ClassificationStage {
    fn default() -> Self {
        Self {
            cv: CvConfig::default(),
            figure_panels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: String,
    pub synth: String,
    pub models: String,
    pub reports: String,
    pub figures: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            synth: "synth".into(),
            models: "models".into(),
            reports: "reports".into(),
            figures: "figures".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub description: String,
    pub preset: Preset,
    /// Master seed; every module seed is derived from it.
    pub seed: u64,
    pub workers: usize,
    pub phantom: PhantomConfig,
    pub segmenter: GrowParams,
    pub diffusion: DiffusionStage,
    pub synth: SynthStage,
    pub metrics: MetricsStage,
    pub classification: ClassificationStage,
    pub detection: DetExperimentConfig,
    pub paths: Paths,
    pub paper: PaperConstants,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            description: String::new(),
            preset: Preset::Desk,
            seed: 0,
            workers: 1,
            phantom: PhantomConfig::default(),
            segmenter: GrowParams::default(),
            diffusion: DiffusionStage::default(),
            synth: SynthStage::default(),
            metrics: MetricsStage::default(),
            classification: ClassificationStage::default(),
            detection: DetExperimentConfig::default(),
            paths: Paths::default(),
            paper: PaperConstants::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self {
            preset,
            ..Self::default()
        };
        match preset {
            Preset::Desk => {}
            Preset::Smoke => {
                c.phantom.image_size = 32;
                c.phantom.n_normal = 10;
                c.phantom.n_lesion = 40;
                c.diffusion.unet.base_width = 16;
                c.diffusion.train.steps = 200;
                c.synth.params.inference_steps = 20;
                c.synth.params.output_size = 32;
                c.synth.figure_panels = 2;
                c.metrics.extractor.epochs = 8;
                c.classification.cv.classifier.epochs = 8;
                c.classification.figure_panels = 2;
                c.detection.detector.epochs = 20;
            }
            Preset::PaperFinetune => {
                let p = c.paper.clone();
                c.apply_paper_constants(&p);
            }
        }
        c
    }

    fn apply_paper_constants(&mut self, p: &PaperConstants) {
        self.diffusion.resume = true;
        self.diffusion.train.learning_rate = p.finetune_learning_rate;
        self.diffusion.train.steps = p.finetune_steps;
        self.diffusion.train.batch_size = p.finetune_batch_size;
        self.synth.params.guidance_scale = p.guidance_scale;
        self.synth.params.inference_steps = p.inference_steps;
        self.synth.params.variants = p.variants;
        self.classification.cv.oversample_factor = p.oversample_factor;
        self.detection.oversample_factor = p.oversample_factor;
        self.detection.detector.epochs = p.detector_epochs;
        self.detection.detector.batch_size = p.detector_batch_size;
        self.detection.detector.learning_rate = p.detector_learning_rate;
        self.detection.detector.momentum = p.detector_momentum;
    }

    /// Preset defaults overlaid with the JSON document `text`. The preset comes
    /// from `preset` if given, else from the document, else desk.
    pub fn from_json(text: &str, preset: Option<Preset>) -> Result<Self> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let preset = match preset {
            Some(p) => p,
            None => match doc.get("preset") {
                Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
                None => Preset::Desk,
            },
        };
        let mut base = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        merge(&mut base, doc);
        base["preset"] = serde_json::to_value(preset).expect("preset serializes");
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        match path {
            None => Ok(Self::preset(preset.unwrap_or_default())),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::MissingInput(p.to_path_buf()),
                    _ => Error::io(p, e),
                })?;
                Self::from_json(&text, preset)
            }
        }
    }

    /// Fills derived fields (module seeds, synthesis size) and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.phantom.seed = self.seed;
        self.synth.params.seed = stage_seed(self.seed, "synth");
        self.synth.params.output_size = self.phantom.image_size;
        self.classification.cv.seed = stage_seed(self.seed, "classification");
        self.detection.seed = stage_seed(self.seed, "detection");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.segmenter.validate()?;
        if !self.phantom.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "phantom.image_size {} must be a multiple of 4 for the denoiser",
                self.phantom.image_size
            )));
        }
        crate::diffusion::NoiseSchedule::from_config(&self.diffusion.schedule)?;
        self.diffusion.train.validate()?;
        let u = &self.diffusion.unet;
        if u.channels != 3
            || u.tokens != ConditionToken::COUNT
            || u.base_width == 0
            || u.emb_dim < 2
            || !u.emb_dim.is_multiple_of(2)
        {
            return Err(Error::Config(
                "diffusion.unet needs channels 3, tokens 3, base_width >= 1 and an even emb_dim".into(),
            ));
        }
        self.synth.params.validate(self.diffusion.schedule.timesteps)?;
        if self.synth.positive == ConditionToken::Null {
            return Err(Error::Config("synth.positive cannot be null".into()));
        }
        self.metrics.extractor.validate()?;
        self.classification.cv.classifier.validate()?;
        if self.classification.cv.k < 2 || self.detection.k < 2 {
            return Err(Error::Config("k-fold experiments need k >= 2".into()));
        }
        self.detection.detector.validate()?;
        for (name, p) in [
            ("dataset", &self.paths.dataset),
            ("synth", &self.paths.synth),
            ("models", &self.paths.models),
            ("reports", &self.paths.reports),
            ("figures", &self.paths.figures),
        ] {
            let path = Path::new(p);
            if p.is_empty()
                || path.is_absolute()
                || path.components().any(|c| matches!(c, std::path::Component::ParentDir))
            {
                return Err(Error::Config(format!(
                    "paths.{name} must be a relative path inside --out"
                )));
            }
        }
        Ok(())
    }

    /// Synthetic variants rendered per lesion image: enough for both the
    /// inpainting protocol and the oversampling factor.
    pub fn synth_variants(&self) -> usize {
        self.synth
            .params
            .variants
            .max(self.classification.cv.oversample_factor)
            .max(self.detection.oversample_factor)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Resolved locations under an output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub dataset: PathBuf,
    pub synth: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
    pub figures: PathBuf,
}

impl Layout {
    pub fn new(root: &Path, paths: &Paths) -> Self {
        Self {
            root: root.to_path_buf(),
            dataset: root.join(&paths.dataset),
            synth: root.join(&paths.synth),
            models: root.join(&paths.models),
            reports: root.join(&paths.reports),
            figures: root.join(&paths.figures),
        }
    }

    pub fn diffusion_checkpoint(&self) -> PathBuf {
        self.models.join("diffusion.ckpt")
    }

    pub fn extractor_checkpoint(&self) -> PathBuf {
        self.models.join("extractor.ckpt")
    }

    pub fn masks_pred(&self) -> PathBuf {
        self.dataset.join("masks_pred")
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.resolved.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default().resolve().unwrap();
        assert_eq!(c.synth.params.variants, 3);
        assert_eq!(c.synth_variants(), 4);
        assert_eq!(c.classification.cv.k, 5);
    }

    #[test]
    fn presets_resolve() {
        for p in [Preset::Smoke, Preset::Desk, Preset::PaperFinetune] {
            RunConfig::preset(p).resolve().unwrap();
        }
        let smoke = RunConfig::preset(Preset::Smoke);
        assert_eq!(smoke.phantom.n_normal + smoke.phantom.n_lesion, 50);
        assert_eq!(
            (smoke.diffusion.train.steps, smoke.synth.params.inference_steps),
            (200, 20)
        );
        let paper = RunConfig::preset(Preset::PaperFinetune);
        assert!(paper.diffusion.resume);
        assert_eq!(paper.diffusion.train.learning_rate, 5e-6);
        assert_eq!(paper.detection.detector.momentum, 0.95);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_json(r#"{"phantom": {"n_normals": 3}}"#, None).unwrap_err();
        assert_eq!(e.category(), "config");
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#, None).is_err());
    }

    #[test]
    fn partial_documents_overlay_the_preset() {
        let c = RunConfig::from_json(
            r#"{"description": "note", "preset": "smoke", "phantom": {"n_lesion": 30}}"#,
            None,
        )
        .unwrap();
        assert_eq!(c.preset, Preset::Smoke);
        assert_eq!(c.phantom.n_lesion, 30);
        assert_eq!(c.phantom.image_size, 32);
        let forced = RunConfig::from_json(r#"{"preset": "smoke"}"#, Some(Preset::Desk)).unwrap();
        assert_eq!(forced.phantom.image_size, 64);
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::preset(Preset::Smoke).resolve().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json(), None).unwrap(), c);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        c.synth.params.guidance_scale = -1.0;
        assert!(c.resolve().is_err());
        let mut c = RunConfig::default();
        c.paths.synth = "../elsewhere".into();
        assert!(c.resolve().is_err());
        let mut c = RunConfig::default();
        c.phantom.image_size = 62;
        assert!(c.resolve().is_err());
    }

    #[test]
    fn preset_names() {
        assert_eq!("paper-finetune".parse::<Preset>().unwrap(), Preset::PaperFinetune);
        assert!("fast".parse::<Preset>().is_err());
    }
}
