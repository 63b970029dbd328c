use super::frechet::{frechet_distance, gaussian_fit};
use crate::error::{Error, Result};
use crate::evaluator::{image_batch, Classifier};
use crate::image::Image;
use crate::par::parallel_map;
use crate::tensornet::{Layer, Network, Tensor};

/// Deep features from a trained classifier's convolutional trunk. The pooled
/// output of the last activation is the embedding; every activation map is a
/// tap for the perceptual distance.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    net: Network<f32>,
    taps: Vec<usize>,
    provenance: String,
}

impl FeatureExtractor {
    pub fn new(net: Network<f32>, provenance: impl Into<String>) -> Result<Self> {
        let taps: Vec<usize> = net
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Relu(_)))
            .map(|(i, _)| i)
            .collect();
        if taps.is_empty() || net.output_shape().len() != 3 {
            return Err(Error::Config(
                "feature network must end in activation maps [C, H, W]".into(),
            ));
        }
        Ok(Self {
            net,
            taps,
            provenance: provenance.into(),
        })
    }

    pub fn from_classifier(model: &Classifier, provenance: impl Into<String>) -> Result<Self> {
        Self::new(model.features().clone(), provenance)
    }

    pub fn dim(&self) -> usize {
        self.net.output_shape()[0]
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    fn trace(&self, img: &Image) -> Result<Vec<Tensor<f32>>> {
        self.net.infer_trace(&image_batch(&[img])?)
    }

    /// Spatially averaged final activations.
    pub fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let maps = self.net.infer(&image_batch(&[img])?)?;
        let c = maps.shape()[1];
        let plane = maps.len() / c;
        Ok(maps
            .data()
            .chunks_exact(plane)
            .map(|ch| ch.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64)
            .collect())
    }

    pub fn embed_all(&self, images: &[&Image], workers: usize) -> Result<Vec<Vec<f64>>> {
        parallel_map(images, workers, |_, img| self.embed(img))
            .into_iter()
            .collect()
    }
}

/// Mean over positions of the squared difference between unit-normalized
/// channel vectors, averaged over all taps.
pub fn perceptual_distance(a: &Image, b: &Image, fx: &FeatureExtractor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let ta = fx.trace(a)?;
    let tb = fx.trace(b)?;
    let mut total = 0.0;
    for &i in &fx.taps {
        let (ma, mb) = (&ta[i], &tb[i]);
        let c = ma.shape()[1];
        let plane = ma.len() / c;
        let unit = |m: &Tensor<f32>, p: usize| {
            let v: Vec<f64> = (0..c).map(|k| f64::from(m.data()[k * plane + p])).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-10;
            v.into_iter().map(move |x| x / norm)
        };
        let mut layer = 0.0;
        for p in 0..plane {
            layer += unit(ma, p).zip(unit(mb, p)).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
        total += layer / plane as f64;
    }
    Ok(total / fx.taps.len() as f64)
}

/// Fréchet distance between Gaussian fits of the two sets' embeddings.
pub fn fid(set_a: &[&Image], set_b: &[&Image], fx: &FeatureExtractor, workers: usize) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::EmptyInput("FID needs two non-empty image sets".into()));
    }
    let d = fx.dim();
    if set_a.len() <= d || set_b.len() <= d {
        log::warn!(
            "FID on {} and {} images with {d}-dimensional features; covariances are rank-deficient",
            set_a.len(),
            set_b.len()
        );
    }
    let fa = fx.embed_all(set_a, workers)?;
    let fb = fx.embed_all(set_b, workers)?;
    let (mu1, c1) = gaussian_fit(&fa)?;
    let (mu2, c2) = gaussian_fit(&fb)?;
    frechet_distance(&mu1, &c1, &mu2, &c2)
}
