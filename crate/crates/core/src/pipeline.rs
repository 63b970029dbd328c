//! Stage runners behind the command-line tool. Every stage reads its inputs
//! from the output tree and writes only below it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Layout, RunConfig};
use crate::diffusion::sampler::{SynthEntry, SynthManifest};
use crate::diffusion::{
    build_training_set, inpaint, load_denoiser, save_denoiser, train, NoiseSchedule, SynthParams, UNet,
};
use crate::error::{Error, Result};
use crate::evaluator::gradcam::heatmap_image;
use crate::evaluator::{
    lesion_cams, run_cv_report, run_detection_comparison, train_classifier, ContainmentReport, SynthBank, SynthImage,
};
use crate::image::{Image, Mask};
use crate::metrics::{metric_report, FeatureExtractor, MetricPair};
use crate::par::parallel_map;
use crate::phantom::{generate_dataset, load_dataset, load_indexed_masks, save_dataset, split_kfold, Dataset, Label};
use crate::rng::{mix_seed, rng_from, stage_seed};
use crate::segmenter::{mask_iou, segment_boxes};
use crate::tensornet::OptimState;

/// A resolved configuration bound to an output root.
pub struct Run {
    pub config: RunConfig,
    pub layout: Layout,
    pub workers: usize,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Side-by-side panel with a 2-pixel white gutter.
pub fn panel(images: &[Image]) -> Result<Image> {
    let h = images.iter().map(Image::height).max().unwrap_or(0);
    let gutter = 2;
    let w = images.iter().map(Image::width).sum::<usize>() + gutter * images.len().saturating_sub(1);
    let mut out = Image::filled(w, h, [1.0; 3]);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set_pixel(x0 + x, y, img.pixel(x, y));
            }
        }
        x0 += img.width() + gutter;
    }
    Ok(out)
}

pub fn mask_image(mask: &Mask) -> Image {
    let data = mask.data().iter().flat_map(|&m| [f32::from(u8::from(m)); 3]).collect();
    Image::from_vec(mask.width(), mask.height(), data).expect("mask dimensions")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub n_images: usize,
    pub n_masks: usize,
    pub mean_iou: f64,
    pub min_iou: f64,
    /// Masks containing their own seed point.
    pub seeds_contained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainReport {
    pub start_step: u64,
    pub final_step: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub training_items: usize,
    pub loss_first_100: f64,
    pub loss_last_100: f64,
    /// Mean loss per consecutive block of `curve_block` steps.
    pub curve_block: usize,
    pub curve: Vec<f64>,
}

impl Run {
    pub fn new(config: RunConfig, out: &Path, workers: usize) -> Self {
        let layout = Layout::new(out, &config.paths);
        Self {
            config,
            layout,
            workers: workers.max(1),
        }
    }

    fn synth_missing(&self) -> Error {
        Error::MissingInput(PathBuf::from(format!("{}/", self.config.paths.synth)))
    }

    pub fn write_echo(&self) -> Result<()> {
        fs::create_dir_all(&self.layout.root).map_err(|e| Error::io(&self.layout.root, e))?;
        let path = self.layout.config_echo();
        fs::write(&path, self.config.to_json()).map_err(|e| Error::io(&path, e))
    }

    fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.layout.dataset)
    }

    pub fn generate(&self) -> Result<()> {
        let ds = generate_dataset(&self.config.phantom)?;
        fresh_dir(&self.layout.dataset)?;
        save_dataset(&ds, &self.layout.dataset)?;
        log::info!("generated {} phantoms", ds.samples.len());
        Ok(())
    }

    pub fn segment(&self) -> Result<SegmentReport> {
        let ds = self.dataset()?;
        let params = self.config.segmenter;
        let with_boxes: Vec<_> = ds.samples.iter().filter(|s| !s.boxes.is_empty()).collect();
        let results = parallel_map(&with_boxes, self.workers, |_, s| {
            segment_boxes(&s.image, &s.boxes, &params)
        });
        let out = self.layout.masks_pred();
        fresh_dir(&out)?;
        let mut ious = Vec::new();
        let mut contained = 0;
        for (s, r) in with_boxes.iter().zip(results) {
            for (j, (seed, mask)) in r?.into_iter().enumerate() {
                mask.save_png(&out.join(format!("{}_{j}.png", s.id)))?;
                contained += usize::from(mask.get(seed.x, seed.y));
                if let Some(gt) = s.masks.get(j) {
                    ious.push(mask_iou(&mask, gt)?);
                }
            }
        }
        let report = SegmentReport {
            n_images: with_boxes.len(),
            n_masks: ious.len(),
            mean_iou: ious.iter().sum::<f64>() / ious.len().max(1) as f64,
            min_iou: ious.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
            seeds_contained: contained,
        };
        write_json(&self.layout.reports.join("segment.json"), &report)?;
        log::info!("segmented {} lesions, mean IoU {:.3}", report.n_masks, report.mean_iou);
        Ok(report)
    }

    pub fn train_diffusion(&self) -> Result<DiffusionTrainReport> {
        let ds = self.dataset()?;
        let stage = &self.config.diffusion;
        let seed = self.config.seed;
        let lesions: Vec<Image> = ds
            .samples
            .iter()
            .filter(|s| s.label == Label::Lesion)
            .map(|s| s.image.clone())
            .collect();
        let items = build_training_set(&lesions, &stage.train, stage_seed(seed, "diffusion-data"))?;
        let sched = NoiseSchedule::from_config(&stage.schedule)?;
        let ckpt = self.layout.diffusion_checkpoint();
        let (mut net, start) = if stage.resume {
            let (net, m) = load_denoiser(&ckpt)?;
            (net, m.step)
        } else {
            (
                UNet::new(stage.unet, &mut rng_from(stage_seed(seed, "diffusion-init"))),
                0,
            )
        };
        let mut opt = OptimState::adam(stage.train.learning_rate);
        let log = train(
            &mut net,
            &items,
            &sched,
            &mut opt,
            &stage.train,
            mix_seed(stage_seed(seed, "diffusion-train"), start),
        )?;
        let final_step = start + stage.train.steps as u64;
        save_denoiser(&net, &ckpt, final_step, seed)?;
        let block = (stage.train.steps / 100).max(1);
        let report = DiffusionTrainReport {
            start_step: start,
            final_step,
            learning_rate: stage.train.learning_rate,
            batch_size: stage.train.batch_size,
            training_items: items.len(),
            loss_first_100: log.window_mean(0, 100),
            loss_last_100: log.window_mean(log.losses.len().saturating_sub(100), 100),
            curve_block: block,
            curve: log
                .losses
                .chunks(block)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect(),
        };
        write_json(&self.layout.reports.join("diffusion_train.json"), &report)?;
        log::info!(
            "diffusion trained to step {final_step}, loss {:.4}",
            report.loss_last_100
        );
        Ok(report)
    }

    /// Inpainting mask for a lesion image: union of its predicted masks, dilated.
    fn inpaint_mask(&self, id: &str, width: usize, height: usize) -> Result<Mask> {
        let dir = self.layout.masks_pred();
        if !dir.is_dir() {
            return Err(Error::MissingInput(dir));
        }
        let mut m = Mask::new(width, height);
        for pm in load_indexed_masks(&dir, id)? {
            m = m.union(&pm)?;
        }
        Ok(m.dilate(self.config.synth.mask_dilation))
    }

    pub fn synth(&self) -> Result<SynthManifest> {
        let ds = self.dataset()?;
        let ckpt = self.layout.diffusion_checkpoint();
        let (net, _) = load_denoiser(&ckpt)?;
        let sched = NoiseSchedule::from_config(&self.config.diffusion.schedule)?;
        let stage = &self.config.synth;
        let lesions: Vec<_> = ds.samples.iter().filter(|s| s.label == Label::Lesion).collect();
        let masks = lesions
            .iter()
            .map(|s| self.inpaint_mask(&s.id, s.image.width(), s.image.height()))
            .collect::<Result<Vec<_>>>()?;
        let base = SynthParams {
            variants: self.config.synth_variants(),
            ..stage.params
        };
        let outputs = parallel_map(&lesions, self.workers, |i, s| {
            let params = SynthParams {
                seed: stage_seed(base.seed, &s.id),
                ..base
            };
            inpaint(
                &s.image,
                &masks[i],
                &net,
                &sched,
                &params,
                stage.positive,
                stage.negative,
            )
        });
        let dir = &self.layout.synth;
        fresh_dir(dir)?;
        let mut entries = Vec::with_capacity(lesions.len());
        for ((s, mask), out) in lesions.iter().zip(&masks).zip(outputs) {
            let out = out?;
            let mask_file = format!("{}_mask.png", s.id);
            mask.save_png(&dir.join(&mask_file))?;
            let mut files = Vec::with_capacity(out.variants.len());
            for (k, v) in out.variants.iter().enumerate() {
                let name = format!("{}_v{k}.png", s.id);
                v.save_png(&dir.join(&name))?;
                files.push(name);
            }
            if entries.len() < stage.figure_panels {
                let fig = panel(&[s.image.clone(), mask_image(mask), out.variants[0].clone()])?;
                fig.save_png(&self.layout.figures.join(format!("synth_{}.png", s.id)))?;
            }
            entries.push(SynthEntry {
                input_id: s.id.clone(),
                mask_file,
                variant_seeds: out.seeds,
                outputs: files,
                empty_mask: out.empty_mask,
            });
        }
        let manifest = SynthManifest {
            params: base,
            positive: stage.positive,
            negative: stage.negative,
            checkpoint: format!("{}/diffusion.ckpt", self.config.paths.models),
            boxes_from_source: true,
            entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        log::info!(
            "synthesized {} images",
            manifest.entries.iter().map(|e| e.outputs.len()).sum::<usize>()
        );
        Ok(manifest)
    }

    /// Synthetic images listed in the synthesis manifest.
    pub fn synth_bank(&self, ds: &Dataset) -> Result<SynthBank> {
        let path = self.layout.synth.join("manifest.json");
        if !path.is_file() {
            return Err(self.synth_missing());
        }
        let manifest: SynthManifest = read_json(&path)?;
        if manifest.entries.iter().all(|e| e.outputs.is_empty()) {
            return Err(self.synth_missing());
        }
        let mut bank = SynthBank::new();
        for e in &manifest.entries {
            let src = ds
                .get(&e.input_id)
                .ok_or_else(|| Error::format(&path, format!("unknown source id {}", e.input_id)))?;
            let mask = Mask::load_png(&self.layout.synth.join(&e.mask_file))?;
            for f in &e.outputs {
                bank.push(SynthImage {
                    source_id: e.input_id.clone(),
                    image: Image::load_png(&self.layout.synth.join(f))?,
                    mask: mask.clone(),
                    boxes: src.boxes.clone(),
                });
            }
        }
        Ok(bank)
    }

    pub fn metrics(&self) -> Result<crate::metrics::MetricReport> {
        let ds = self.dataset()?;
        let bank = self.synth_bank(&ds)?;
        let labelled: Vec<(&Image, usize)> = ds.samples.iter().map(|s| (&s.image, s.label.index())).collect();
        let seed = stage_seed(self.config.seed, "extractor");
        let model = train_classifier(&labelled, &self.config.metrics.extractor, seed)?;
        let ckpt = self.layout.extractor_checkpoint();
        model.save(&ckpt, seed, self.config.metrics.extractor.epochs as u64)?;
        let fx = FeatureExtractor::from_classifier(&model, format!("{}/extractor.ckpt", self.config.paths.models))?;
        let pairs: Vec<MetricPair<'_>> = bank
            .iter()
            .map(|s| {
                let original = &ds.get(&s.source_id).expect("bank built from this dataset").image;
                MetricPair {
                    original,
                    synthetic: &s.image,
                    mask: &s.mask,
                }
            })
            .collect();
        let reference: Vec<&Image> = ds
            .samples
            .iter()
            .filter(|s| s.label == Label::Lesion)
            .map(|s| &s.image)
            .collect();
        let report = metric_report(&pairs, &reference, &fx, self.workers)?;
        write_json(&self.layout.reports.join("metrics.json"), &report)?;
        log::info!("metrics over {} pairs, FID {:.3}", report.n_pairs, report.fid);
        Ok(report)
    }

    pub fn eval_cls(&self) -> Result<crate::evaluator::CvReport> {
        let ds = self.dataset()?;
        let bank = self.synth_bank(&ds)?;
        let stage = &self.config.classification;
        let report = run_cv_report(&ds, &bank, &stage.cv, self.workers)?;
        write_json(&self.layout.reports.join("cv_report.json"), &report)?;

        let fold = split_kfold(&ds, stage.cv.k, stage.cv.seed)?.swap_remove(0);
        let train: Vec<(&Image, usize)> = fold
            .train
            .iter()
            .filter_map(|id| ds.get(id))
            .map(|s| (&s.image, s.label.index()))
            .collect();
        let model = train_classifier(&train, &stage.cv.classifier, stage_seed(self.config.seed, "gradcam"))?;
        let test: Vec<_> = fold.test.iter().filter_map(|id| ds.get(id)).collect();
        let cams = lesion_cams(&model, &test)?;
        for cam in cams.iter().take(stage.figure_panels) {
            let img = &ds.get(&cam.id).expect("cam of a dataset sample").image;
            let heat = heatmap_image(&cam.heatmap, img.width(), img.height())?;
            let fig = panel(&[img.clone(), heat, mask_image(&cam.mask)])?;
            fig.save_png(&self.layout.figures.join(format!("gradcam_{}.png", cam.id)))?;
        }
        let cam_report = ContainmentReport::from_cams(&cams);
        write_json(&self.layout.reports.join("gradcam.json"), &cam_report)?;
        log::info!(
            "accuracy {} without, {} with synthetic images",
            report.without_synth.accuracy.display(),
            report.with_synth.accuracy.display()
        );
        Ok(report)
    }

    pub fn eval_det(&self) -> Result<crate::evaluator::DetComparison> {
        let ds = self.dataset()?;
        let bank = self.synth_bank(&ds)?;
        let report = run_detection_comparison(&ds, &bank, &self.config.detection, self.workers)?;
        write_json(&self.layout.reports.join("det_report.json"), &report)?;
        log::info!(
            "mAP50 {:.3} without, {:.3} with synthetic images",
            report.without_synth.map50,
            report.with_synth.map50
        );
        Ok(report)
    }

    pub fn pipeline(&self) -> Result<()> {
        self.generate()?;
        self.segment()?;
        self.train_diffusion()?;
        self.synth()?;
        self.metrics()?;
        self.eval_cls()?;
        self.eval_det()?;
        Ok(())
    }
}
