use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::rng_from;
use crate::tensornet::checkpoint::{self, Manifest};
use crate::tensornet::{cross_entropy_loss, softmax, LayerSpec, Network, OptimState, Param, Parameterized, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Output widths of the three conv blocks.
    pub widths: [usize; 3],
    pub flip_augment: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 8,
            widths: [16, 32, 64],
            flip_augment: true,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("classifier epochs and batch_size must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "classifier learning_rate {}",
                self.learning_rate
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("classifier widths must be positive".into()));
        }
        Ok(())
    }
}

/// Stacks images into a `[N, 3, H, W]` batch scaled to `[-1,1]`.
pub fn image_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyInput("no images to batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(Error::Shape(format!(
                "batch mixes {w}x{h} and {}x{}",
                img.width(),
                img.height()
            )));
        }
        data.extend(img.to_planar(2.0, -1.0));
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Three conv blocks (strides 1, 2, 2) feeding global pooling and a 2-way dense head.
#[derive(Debug, Clone)]
pub struct Classifier {
    features: Network<f32>,
    head: Network<f32>,
}

fn feature_specs(widths: [usize; 3]) -> Vec<LayerSpec> {
    let conv = |i, o, s| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: s,
    };
    vec![
        conv(3, widths[0], 1),
        LayerSpec::Relu,
        conv(widths[0], widths[1], 2),
        LayerSpec::Relu,
        conv(widths[1], widths[2], 2),
        LayerSpec::Relu,
    ]
}

#[derive(Serialize, Deserialize)]
struct Architecture {
    image_size: [usize; 2],
    widths: [usize; 3],
}

impl Classifier {
    pub fn new(width: usize, height: usize, widths: [usize; 3], seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed);
        let mut features = Network::new(&[3, height, width], &feature_specs(widths), &mut rng)?;
        let fshape = features.output_shape().to_vec();
        let mut head = Network::new(
            &fshape,
            &[
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    inputs: widths[2],
                    outputs: 2,
                },
            ],
            &mut rng,
        )?;
        for p in features.params_mut() {
            p.name = format!("features.{}", p.name);
        }
        for p in head.params_mut() {
            p.name = format!("head.{}", p.name);
        }
        Ok(Self { features, head })
    }

    pub fn features(&self) -> &Network<f32> {
        &self.features
    }

    pub fn head(&self) -> &Network<f32> {
        &self.head
    }

    pub fn input_size(&self) -> (usize, usize) {
        let s = self.features.input_shape();
        (s[2], s[1])
    }

    pub fn widths(&self) -> [usize; 3] {
        let w: Vec<usize> = self
            .features
            .architecture()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        [w[0], w[1], w[2]]
    }

    pub fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.head.infer(&self.features.infer(batch)?)
    }

    /// Probability of the lesion class for each image.
    pub fn predict_proba(&self, images: &[&Image]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let logits = self.logits(&image_batch(chunk)?)?;
            for row in logits.data().chunks_exact(2) {
                out.push(f64::from(softmax(row)[1]));
            }
        }
        Ok(out)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut v = self.features.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param<f32>> {
        let mut v = self.features.params();
        v.extend(self.head.params());
        v
    }

    /// Forward and backward for one labelled batch; returns the mean loss.
    fn accumulate(&mut self, batch: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let maps = self.features.forward(batch)?;
        let logits = self.head.forward(&maps)?;
        let (loss, grad) = cross_entropy_loss(&logits, labels)?;
        let g_maps = self.head.backward(&grad)?;
        self.features.backward(&g_maps)?;
        Ok(f64::from(loss))
    }

    /// Gradient of the chosen logit with respect to the final feature maps, and
    /// the maps themselves, for a single image.
    pub fn class_map_gradient(&self, img: &Image, class: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if class > 1 {
            return Err(Error::Usage(format!("class {class} outside 0..2")));
        }
        let maps = self.features.infer(&image_batch(&[img])?)?;
        let mut head = self.head.clone();
        let logits = head.forward(&maps)?;
        let mut g = Tensor::zeros(logits.shape());
        g.data_mut()[class] = 1.0;
        let grad = head.backward(&g)?;
        Ok((maps, grad))
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64) -> Result<()> {
        let (w, h) = self.input_size();
        let arch = Architecture {
            image_size: [w, h],
            widths: self.widths(),
        };
        let manifest = Manifest {
            format_version: checkpoint::VERSION,
            architecture: serde_json::to_value(arch).expect("plain struct serializes"),
            step,
            seed,
        };
        checkpoint::save(path, &self.params(), &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = checkpoint::manifest_path(path);
        let text = std::fs::read_to_string(&mpath).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(mpath.clone()),
            _ => Error::io(&mpath, e),
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let arch: Architecture =
            serde_json::from_value(manifest.architecture).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let mut c = Self::new(arch.image_size[0], arch.image_size[1], arch.widths, 0)?;
        checkpoint::load(path, c.params_mut())?;
        Ok(c)
    }
}

fn flip_planar(data: &mut [f32], w: usize) {
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Trains from scratch with cross-entropy and Adam. Labels are 0 (normal) / 1 (lesion).
pub fn train_classifier(train: &[(&Image, usize)], cfg: &ClassifierConfig, seed: u64) -> Result<Classifier> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::EmptyInput("empty classifier training set".into()))?;
    if train.iter().any(|(_, l)| *l > 1) {
        return Err(Error::Config("classifier labels must be 0 or 1".into()));
    }
    if train.iter().all(|(_, l)| *l == first.1) {
        return Err(Error::Config("classifier training set has a single class".into()));
    }
    let (w, h) = (first.0.width(), first.0.height());
    let mut model = Classifier::new(w, h, cfg.widths, seed)?;
    let mut opt = OptimState::adam(cfg.learning_rate);
    let mut rng = rng_from(seed ^ 0x5EED);
    let planar: Vec<Vec<f32>> = train.iter().map(|(img, _)| img.to_planar(2.0, -1.0)).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * 3 * w * h);
            for &i in chunk {
                let start = data.len();
                data.extend_from_slice(&planar[i]);
                if cfg.flip_augment && rand::Rng::random::<bool>(&mut rng) {
                    flip_planar(&mut data[start..], w);
                }
            }
            let batch = Tensor::from_vec(&[chunk.len(), 3, h, w], data)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            for p in model.params_mut() {
                p.zero_grad();
            }
            total += model.accumulate(&batch, &labels)? * chunk.len() as f64;
            opt.step(model.params_mut())?;
        }
        log::debug!("classifier epoch {epoch}: loss {:.4}", total / train.len() as f64);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<(Image, usize)> {
        (0..10)
            .map(|i| {
                let label = i % 2;
                let base = if label == 1 { 0.7 } else { 0.3 };
                let mut img = Image::new(8, 8);
                for (j, v) in img.data_mut().iter_mut().enumerate() {
                    *v = base + ((i * 13 + j * 7) % 10) as f32 * 0.01;
                }
                (img, label)
            })
            .collect()
    }

    fn cfg() -> ClassifierConfig {
        ClassifierConfig {
            epochs: 200,
            batch_size: 4,
            widths: [4, 8, 8],
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn separable_toy_set_is_fit() {
        let data = toy();
        let refs: Vec<(&Image, usize)> = data.iter().map(|(i, l)| (i, *l)).collect();
        let model = train_classifier(&refs, &cfg(), 1).unwrap();
        let imgs: Vec<&Image> = data.iter().map(|(i, _)| i).collect();
        let p = model.predict_proba(&imgs).unwrap();
        for ((_, l), pv) in data.iter().zip(p) {
            assert_eq!(usize::from(pv >= 0.5), *l);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = toy();
        let refs: Vec<(&Image, usize)> = data.iter().map(|(i, l)| (i, *l)).collect();
        let c = ClassifierConfig { epochs: 5, ..cfg() };
        let a = train_classifier(&refs, &c, 3).unwrap();
        let b = train_classifier(&refs, &c, 3).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn single_class_rejected() {
        let data = toy();
        let refs: Vec<(&Image, usize)> = data.iter().filter(|(_, l)| *l == 1).map(|(i, l)| (i, *l)).collect();
        assert_eq!(train_classifier(&refs, &cfg(), 0).unwrap_err().category(), "config");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.ckpt");
        let model = Classifier::new(8, 8, [4, 8, 8], 9).unwrap();
        model.save(&path, 9, 0).unwrap();
        let back = Classifier::load(&path).unwrap();
        let img = toy().remove(0).0;
        assert_eq!(
            model.predict_proba(&[&img]).unwrap(),
            back.predict_proba(&[&img]).unwrap()
        );
    }
}
