use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::phantom::{Label, Sample};
use crate::tensornet::Tensor;

/// Class-activation heatmap from final feature maps `[1, C, h, w]` and the
/// gradient of the class score with respect to them. Returns `out_h × out_w`
/// values in `[0,1]`, max-normalized; an all-zero map stays zero.
pub fn cam_from_gradients(maps: &Tensor<f32>, grads: &Tensor<f32>, out_w: usize, out_h: usize) -> Result<Vec<f64>> {
    if maps.shape() != grads.shape() || maps.shape().len() != 4 || maps.shape()[0] != 1 {
        return Err(Error::Shape(format!(
            "feature maps {:?} and gradients {:?}",
            maps.shape(),
            grads.shape()
        )));
    }
    let (c, h, w) = (maps.shape()[1], maps.shape()[2], maps.shape()[3]);
    let plane = h * w;
    let mut cam = vec![0.0f64; plane];
    for k in 0..c {
        let g = &grads.data()[k * plane..(k + 1) * plane];
        let weight = g.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64;
        let a = &maps.data()[k * plane..(k + 1) * plane];
        for (o, &v) in cam.iter_mut().zip(a) {
            *o += weight * f64::from(v);
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let mut up = bilinear_resize(&cam, w, h, out_w, out_h);
    let max = up.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut up {
            *v /= max;
        }
    }
    Ok(up)
}

/// Half-pixel-centred bilinear resampling with edge clamping.
pub fn bilinear_resize(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let sample = |pos: f64, n: usize| {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        let (y0, y1, fy) = sample((y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5, h);
        for x in 0..out_w {
            let (x0, x1, fx) = sample((x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

pub fn grad_cam(model: &Classifier, img: &Image, target_class: usize) -> Result<Vec<f64>> {
    let (maps, grads) = model.class_map_gradient(img, target_class)?;
    cam_from_gradients(&maps, &grads, img.width(), img.height())
}

/// Share of heatmap mass inside the mask; `None` when the heatmap is all zero.
pub fn containment(heatmap: &[f64], mask: &Mask) -> Option<f64> {
    let total: f64 = heatmap.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let inside: f64 = heatmap
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    Some(inside / total)
}

/// Grad-CAM of one lesion image the model classified correctly.
#[derive(Debug, Clone)]
pub struct LesionCam {
    pub id: String,
    pub heatmap: Vec<f64>,
    pub mask: Mask,
    pub inside: Option<f64>,
    pub area: f64,
}

impl LesionCam {
    /// More heatmap mass inside the mask than its area share.
    pub fn contained(&self) -> bool {
        self.inside.is_some_and(|c| c > self.area)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub correct_lesions: usize,
    pub contained: usize,
    pub fraction: f64,
}

impl ContainmentReport {
    pub fn from_cams(cams: &[LesionCam]) -> Self {
        let contained = cams.iter().filter(|c| c.contained()).count();
        Self {
            correct_lesions: cams.len(),
            contained,
            fraction: contained as f64 / cams.len().max(1) as f64,
        }
    }
}

/// Lesion-class heatmaps for the lesion samples `model` gets right.
pub fn lesion_cams(model: &Classifier, samples: &[&Sample]) -> Result<Vec<LesionCam>> {
    let mut out = Vec::new();
    for s in samples.iter().filter(|s| s.label == Label::Lesion) {
        if model.predict_proba(&[&s.image])?[0] < 0.5 {
            continue;
        }
        let heatmap = grad_cam(model, &s.image, Label::Lesion.index())?;
        let mask = s.union_mask();
        let area = mask.count() as f64 / (mask.width() * mask.height()) as f64;
        let inside = containment(&heatmap, &mask);
        out.push(LesionCam {
            id: s.id.clone(),
            heatmap,
            mask,
            inside,
            area,
        });
    }
    Ok(out)
}

/// Heatmap as a grayscale-on-red overlay for figure panels.
pub fn heatmap_image(heatmap: &[f64], width: usize, height: usize) -> Result<Image> {
    let data = heatmap
        .iter()
        .flat_map(|&v| {
            let v = v.clamp(0.0, 1.0) as f32;
            [v, v * v, 0.2 * (1.0 - v)]
        })
        .collect();
    Image::from_vec(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_give_zero_map() {
        let maps = Tensor::full(&[1, 2, 4, 4], 1.0f32);
        let grads = Tensor::zeros(&[1, 2, 4, 4]);
        let cam = cam_from_gradients(&maps, &grads, 16, 16).unwrap();
        assert!(cam.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonnegative_and_max_normalized() {
        let maps = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0f32, 0.0, 0.5, 2.0, -1.0, 1.0, 0.0, 0.0]).unwrap();
        let grads = Tensor::from_vec(&[1, 2, 2, 2], vec![0.3f32, 0.1, 0.2, 0.2, -0.4, 0.0, 0.1, 0.1]).unwrap();
        let cam = cam_from_gradients(&maps, &grads, 8, 8).unwrap();
        assert!(cam.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((cam.iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let out = bilinear_resize(&[0.25; 9], 3, 3, 7, 5);
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn containment_ratio() {
        let mask = Mask::from_fn(2, 2, |x, _| x == 0);
        assert_eq!(containment(&[1.0, 0.0, 3.0, 0.0], &mask), Some(1.0));
        assert_eq!(containment(&[1.0, 1.0, 1.0, 1.0], &mask), Some(0.5));
        assert_eq!(containment(&[0.0; 4], &mask), None);
    }
}
