//! Image-quality metrics: PSNR, SSIM, deep-feature perceptual distance and FID,
//! with region-restricted variants.

pub mod features;
pub mod frechet;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub use features::{fid, perceptual_distance, FeatureExtractor};
pub use frechet::{frechet_distance, gaussian_fit};

fn check_pair(a: &Image, b: &Image, region: Option<&Mask>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if let Some(m) = region {
        if !m.matches_image(a) {
            return Err(Error::Shape("region mask does not match the images".into()));
        }
        if m.is_empty() {
            return Err(Error::EmptyInput("empty metric region".into()));
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with peak 1.0; identical inputs give `+inf`.
pub fn psnr(a: &Image, b: &Image, region: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, region)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, (pa, pb)) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)).enumerate() {
        if region.is_some_and(|m| !m.data()[p]) {
            continue;
        }
        for c in 0..3 {
            sum += (f64::from(pa[c]) - f64::from(pb[c])).powi(2);
        }
        n += 3;
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let (x, y) = ((i % SSIM_WINDOW) as f64 - r, (i / SSIM_WINDOW) as f64 - r);
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean SSIM over 11×11 Gaussian windows lying fully inside the image, on
/// Rec.601 luma. With a region, only windows centred in the region count.
pub fn ssim(a: &Image, b: &Image, region: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, region)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("{w}x{h} image is smaller than the SSIM window")));
    }
    let (la, lb) = (a.luma(), b.luma());
    let win = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in r..h - r {
        for cx in r..w - r {
            if region.is_some_and(|m| !m.get(cx, cy)) {
                continue;
            }
            let at = |img: &[f64], i: usize| img[(cy - r + i / SSIM_WINDOW) * w + cx - r + i % SSIM_WINDOW];
            let (mut ma, mut mb) = (0.0, 0.0);
            for (i, &k) in win.iter().enumerate() {
                ma += k * at(&la, i);
                mb += k * at(&lb, i);
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (i, &k) in win.iter().enumerate() {
                let (da, db) = (at(&la, i) - ma, at(&lb, i) - mb);
                va += k * da * da;
                vb += k * db * db;
                cov += k * da * db;
            }
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "no SSIM window is centred inside the region".into(),
        ));
    }
    Ok(total / count as f64)
}

mod inf_number {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {t}"))),
        }
    }
}

/// Paired image-quality summary of a synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "inf_number")]
    pub psnr: f64,
    pub ssim: f64,
    pub perc: f64,
    pub fid: f64,
    #[serde(with = "inf_number")]
    pub psnr_mask: f64,
    pub ssim_mask: f64,
    pub n_pairs: usize,
    /// Pairs whose mask admits at least one SSIM window centre.
    pub n_mask_pairs: usize,
    pub extractor: String,
}

/// An original, one image synthesized from it, and the inpainted region.
pub struct MetricPair<'a> {
    pub original: &'a Image,
    pub synthetic: &'a Image,
    pub mask: &'a Mask,
}

/// Per-pair PSNR, SSIM, perceptual distance and the optional masked PSNR/SSIM.
type Row = (f64, f64, f64, Option<(f64, Option<f64>)>);

/// Averages the paired metrics and computes FID between all synthetic images
/// and `reference` (real lesion images).
pub fn metric_report(
    pairs: &[MetricPair<'_>],
    reference: &[&Image],
    fx: &FeatureExtractor,
    workers: usize,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no synthesized pairs to score".into()));
    }
    let rows = crate::par::parallel_map(pairs, workers, |_, p| -> Result<_> {
        let region = (!p.mask.is_empty()).then_some(p.mask);
        let masked = match region {
            Some(m) => Some((
                psnr(p.original, p.synthetic, Some(m))?,
                ssim(p.original, p.synthetic, Some(m)).ok(),
            )),
            None => None,
        };
        Ok((
            psnr(p.original, p.synthetic, None)?,
            ssim(p.original, p.synthetic, None)?,
            perceptual_distance(p.original, p.synthetic, fx)?,
            masked,
        ))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&Row) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        (vals.iter().sum::<f64>() / vals.len().max(1) as f64, vals.len())
    };
    let synthetic: Vec<&Image> = pairs.iter().map(|p| p.synthetic).collect();
    let (psnr_mask, _) = mean(&|r| r.3.map(|m| m.0));
    let (ssim_mask, n_mask_pairs) = mean(&|r| r.3.and_then(|m| m.1));
    Ok(MetricReport {
        psnr: rows.iter().map(|r| r.0).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.1).sum::<f64>() / n,
        perc: rows.iter().map(|r| r.2).sum::<f64>() / n,
        fid: fid(&synthetic, reference, fx, workers)?,
        psnr_mask,
        ssim_mask,
        n_pairs: pairs.len(),
        n_mask_pairs,
        extractor: fx.provenance().to_string(),
    })
}
