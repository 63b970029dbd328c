use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BBox, Image, Mask};
use crate::rng::rng_from;
use crate::segmenter::{components, Connectivity};
use crate::tensornet::{cross_entropy_loss, softmax, LayerSpec, Network, OptimState, Parameterized, Tensor};

/// Axis-aligned box in pixels: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelBox {
    pub fn from_bbox(b: &BBox, width: usize, height: usize) -> Self {
        let (x0, y0, x1, y1) = b.to_pixels(width, height);
        Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix = ((self.x + self.w).min(other.x + other.w) - self.x.max(other.x)).max(0.0);
        let iy = ((self.y + self.h).min(other.y + other.h) - self.y.max(other.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: PixelBox,
    pub confidence: f64,
}

pub trait Detector: Sync {
    /// Detections sorted by descending confidence.
    fn detect(&self, image: &Image) -> Result<Vec<Detection>>;
}

/// Greedy non-maximum suppression; keeps the highest-confidence box of any
/// group overlapping above `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

/// Thresholds a per-pixel probability map and turns each 8-connected component
/// into a box whose confidence is the component's mean probability.
pub fn detections_from_map(
    prob: &[f64],
    width: usize,
    height: usize,
    threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    if prob.len() != width * height {
        return Err(Error::Shape(format!(
            "{} probabilities for {width}x{height}",
            prob.len()
        )));
    }
    let mask = Mask::from_vec(width, height, prob.iter().map(|&p| p >= threshold).collect())?;
    let mut dets = Vec::new();
    for comp in components(&mask, Connectivity::Eight) {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut total = 0.0;
        for &i in &comp {
            let (x, y) = (i % width, i / width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            total += prob[i];
        }
        dets.push(Detection {
            bbox: PixelBox {
                x: x0 as f64,
                y: y0 as f64,
                w: (x1 - x0 + 1) as f64,
                h: (y1 - y0 + 1) as f64,
            },
            confidence: total / comp.len() as f64,
        });
    }
    Ok(nms(dets, nms_iou))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub patch: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Background patches kept per lesion patch when building the training set.
    pub negatives_per_positive: usize,
    pub threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            hidden: 32,
            epochs: 120,
            batch_size: 4,
            learning_rate: 0.005,
            momentum: 0.95,
            negatives_per_positive: 3,
            threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        (self.patch / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch < 2 || self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "detector patch >= 2, hidden/epochs/batch_size >= 1".into(),
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("detector needs lr > 0 and momentum in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("detector thresholds must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Sliding-window lesion detector: an MLP scores every `patch × patch` window
/// on a half-patch grid, window scores are averaged into a pixel map.
#[derive(Debug, Clone)]
pub struct PatchDetector {
    config: DetectorConfig,
    net: Network<f32>,
    trained: bool,
}

fn patch_origins(size: usize, patch: usize, stride: usize) -> Vec<usize> {
    if size < patch {
        return Vec::new();
    }
    let mut v: Vec<usize> = (0..=size - patch).step_by(stride).collect();
    if *v.last().expect("size >= patch") != size - patch {
        v.push(size - patch);
    }
    v
}

fn patch_vector(img: &Image, x0: usize, y0: usize, patch: usize, out: &mut Vec<f32>) {
    for c in 0..3 {
        for y in y0..y0 + patch {
            for x in x0..x0 + patch {
                out.push(img.pixel(x, y)[c] * 2.0 - 1.0);
            }
        }
    }
}

impl PatchDetector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let inputs = 3 * config.patch * config.patch;
        let net = Network::new(
            &[inputs],
            &[
                LayerSpec::Dense {
                    inputs,
                    outputs: config.hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: config.hidden,
                    outputs: 2,
                },
            ],
            &mut rng_from(seed),
        )?;
        Ok(Self {
            config,
            net,
            trained: false,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Balanced patch set: every window whose lesion coverage is at least half,
    /// plus a random subset of background windows.
    fn patches(&self, data: &[(&Image, &Mask)], seed: u64) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
        let (p, s) = (self.config.patch, self.config.stride());
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (img, mask) in data {
            if !mask.matches_image(img) {
                return Err(Error::Shape("detector mask does not match its image".into()));
            }
            for &y0 in &patch_origins(img.height(), p, s) {
                for &x0 in &patch_origins(img.width(), p, s) {
                    let mut covered = 0;
                    for y in y0..y0 + p {
                        for x in x0..x0 + p {
                            covered += usize::from(mask.get(x, y));
                        }
                    }
                    let mut v = Vec::with_capacity(3 * p * p);
                    patch_vector(img, x0, y0, p, &mut v);
                    if 2 * covered >= p * p {
                        pos.push(v);
                    } else {
                        neg.push(v);
                    }
                }
            }
        }
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::Config(
                "detector training needs lesion and background patches".into(),
            ));
        }
        let mut rng = rng_from(seed);
        neg.shuffle(&mut rng);
        neg.truncate((pos.len() * self.config.negatives_per_positive).max(1));
        let labels = std::iter::repeat_n(1, pos.len())
            .chain(std::iter::repeat_n(0, neg.len()))
            .collect();
        pos.extend(neg);
        Ok((pos, labels))
    }

    /// Fits the patch classifier with SGD-momentum. `data` pairs each image with
    /// its lesion mask.
    pub fn train(&mut self, data: &[(&Image, &Mask)], seed: u64) -> Result<()> {
        let (patches, labels) = self.patches(data, seed)?;
        let dim = patches[0].len();
        let mut opt = OptimState::sgd(self.config.learning_rate, self.config.momentum);
        let mut rng = rng_from(seed ^ 0xDE7);
        let mut order: Vec<usize> = (0..patches.len()).collect();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let mut x = Vec::with_capacity(chunk.len() * dim);
                for &i in chunk {
                    x.extend_from_slice(&patches[i]);
                }
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                self.net.zero_grad();
                let logits = self.net.forward(&Tensor::from_vec(&[chunk.len(), dim], x)?)?;
                let (loss, grad) = cross_entropy_loss(&logits, &y)?;
                self.net.backward(&grad)?;
                opt.step(self.net.params_mut())?;
                total += f64::from(loss) * chunk.len() as f64;
            }
            if epoch % 20 == 0 {
                log::debug!("detector epoch {epoch}: loss {:.4}", total / patches.len() as f64);
            }
        }
        self.trained = true;
        Ok(())
    }

    /// Per-pixel lesion probability: mean over the windows covering the pixel.
    pub fn probability_map(&self, img: &Image) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::Usage("detector has not been trained".into()));
        }
        let (p, s) = (self.config.patch, self.config.stride());
        let (w, h) = (img.width(), img.height());
        let xs = patch_origins(w, p, s);
        let ys = patch_origins(h, p, s);
        if xs.is_empty() || ys.is_empty() {
            return Err(Error::Shape(format!("image {w}x{h} smaller than patch {p}")));
        }
        let mut data = Vec::with_capacity(xs.len() * ys.len() * 3 * p * p);
        for &y0 in &ys {
            for &x0 in &xs {
                patch_vector(img, x0, y0, p, &mut data);
            }
        }
        let logits = self
            .net
            .infer(&Tensor::from_vec(&[xs.len() * ys.len(), 3 * p * p], data)?)?;
        let mut sum = vec![0.0f64; w * h];
        let mut count = vec![0u32; w * h];
        for (k, row) in logits.data().chunks_exact(2).enumerate() {
            let prob = f64::from(softmax(row)[1]);
            let (x0, y0) = (xs[k % xs.len()], ys[k / xs.len()]);
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    sum[y * w + x] += prob;
                    count[y * w + x] += 1;
                }
            }
        }
        Ok(sum.iter().zip(&count).map(|(s, &c)| s / f64::from(c.max(1))).collect())
    }
}

impl Detector for PatchDetector {
    fn detect(&self, image: &Image) -> Result<Vec<Detection>> {
        let map = self.probability_map(image)?;
        detections_from_map(
            &map,
            image.width(),
            image.height(),
            self.config.threshold,
            self.config.nms_iou,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_hand_geometry() {
        let a = PixelBox {
            x: 0.0,
            y: 0.0,
            w: 10.0,
            h: 10.0,
        };
        let b = PixelBox {
            x: 5.0,
            y: 0.0,
            w: 10.0,
            h: 10.0,
        };
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(
            a.iou(&PixelBox {
                x: 20.0,
                y: 0.0,
                w: 1.0,
                h: 1.0
            }),
            0.0
        );
    }

    #[test]
    fn background_map_gives_nothing() {
        let d = detections_from_map(&[0.1; 64 * 64], 64, 64, 0.5, 0.5).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn single_blob_gives_one_detection() {
        let mut map = vec![0.0; 64 * 64];
        for y in 20..30 {
            for x in 7..17 {
                map[y * 64 + x] = 0.9;
            }
        }
        let d = detections_from_map(&map, 64, 64, 0.5, 0.5).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0].confidence - 0.9).abs() < 1e-12);
        assert_eq!(
            d[0].bbox,
            PixelBox {
                x: 7.0,
                y: 20.0,
                w: 10.0,
                h: 10.0
            }
        );
    }

    #[test]
    fn nms_drops_duplicates() {
        let b = PixelBox {
            x: 1.0,
            y: 1.0,
            w: 5.0,
            h: 5.0,
        };
        let out = nms(
            vec![
                Detection {
                    bbox: b,
                    confidence: 0.4,
                },
                Detection {
                    bbox: b,
                    confidence: 0.8,
                },
            ],
            0.5,
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.8);
    }

    #[test]
    fn untrained_detector_is_a_usage_error() {
        let d = PatchDetector::new(DetectorConfig::default(), 0).unwrap();
        assert_eq!(d.detect(&Image::new(16, 16)).unwrap_err().category(), "usage");
    }

    #[test]
    fn origins_cover_the_edge() {
        assert_eq!(patch_origins(16, 8, 4), vec![0, 4, 8]);
        assert_eq!(patch_origins(18, 8, 4), vec![0, 4, 8, 10]);
        assert!(patch_origins(4, 8, 4).is_empty());
    }

    #[test]
    fn bbox_conversion_matches_mask_extent() {
        let mask = Mask::from_fn(64, 64, |x, y| (10..20).contains(&x) && (30..34).contains(&y));
        let b = PixelBox::from_bbox(&mask.tight_box(0).unwrap(), 64, 64);
        assert!((b.x - 10.0).abs() < 1e-9 && (b.w - 10.0).abs() < 1e-9);
        assert!((b.y - 30.0).abs() < 1e-9 && (b.h - 4.0).abs() < 1e-9);
    }
}
