use serde::{Deserialize, Serialize};

use super::{image_to_model, model_to_image, q_sample, ConditionToken, Denoiser, NoiseSchedule, SynthParams};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng::{fill_normal, mix_seed, rng_from, StageRng};
use crate::tensornet::Tensor;

/// Guided noise estimate `ε_neg + g·(ε_pos − ε_neg)`; NULL stands in for a
/// missing negative.
pub fn cfg_epsilon<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &Tensor<f32>,
    t: usize,
    positive: ConditionToken,
    negative: Option<ConditionToken>,
    guidance: f64,
) -> Result<Tensor<f32>> {
    let negative = negative.unwrap_or(ConditionToken::Null);
    let n = x_t.batch();
    let eval = |token| denoiser.predict(x_t, &vec![t; n], &vec![token; n]);
    if guidance == 1.0 {
        return eval(positive);
    }
    let neg = eval(negative)?;
    if guidance == 0.0 || positive == negative {
        return Ok(neg);
    }
    let pos = eval(positive)?;
    let g = guidance as f32;
    neg.zip_map(&pos, |e_neg, e_pos| e_neg + g * (e_pos - e_neg))
}

/// One ancestral update from `t` to `t_prev` (`t_prev == 0` returns the
/// predicted clean image). The clean-image estimate is clipped to `[-1,1]`.
fn reverse_step(
    x: &Tensor<f32>,
    eps: &Tensor<f32>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    rng: &mut StageRng,
) -> Result<Tensor<f32>> {
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let (sa, sb) = (ab_t.sqrt() as f32, (1.0 - ab_t).sqrt() as f32);
    let x0 = x.zip_map(eps, |xv, ev| ((xv - sb * ev) / sa).clamp(-1.0, 1.0))?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let beta = 1.0 - ab_t / ab_prev;
    let c0 = (ab_prev.sqrt() * beta / (1.0 - ab_t)) as f32;
    let ct = ((1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t)) as f32;
    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt() as f32;
    let mut z = Tensor::zeros(x.shape());
    fill_normal(rng, z.data_mut());
    let mut out = x0.zip_map(x, |a, b| c0 * a + ct * b)?;
    for (o, zv) in out.data_mut().iter_mut().zip(z.data()) {
        *o += sigma * zv;
    }
    Ok(out)
}

fn ensure_finite(x: &Tensor<f32>, t: usize) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("sampler state became non-finite at t={t}")))
    }
}

/// Unconditional-shape generation of one `output_size`² image, seeded by `params.seed`.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    params: &SynthParams,
    positive: ConditionToken,
    negative: Option<ConditionToken>,
) -> Result<Image> {
    params.validate(sched.timesteps())?;
    let size = params.output_size;
    let mut rng = rng_from(params.seed);
    let mut x = Tensor::zeros(&[1, 3, size, size]);
    fill_normal(&mut rng, x.data_mut());
    let steps = sched.subsequence(params.inference_steps)?;
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps = cfg_epsilon(denoiser, &x, t, positive, negative, params.guidance_scale)?;
        x = reverse_step(&x, &eps, t, t_prev, sched, &mut rng)?;
        ensure_finite(&x, t)?;
    }
    model_to_image(x.item(0), size, size)
}

#[derive(Debug, Clone)]
pub struct InpaintOutput {
    pub variants: Vec<Image>,
    pub seeds: Vec<u64>,
    /// Set when the mask selected nothing and the input was copied through.
    pub empty_mask: bool,
}

/// Per-variant seed derived from the run seed.
pub fn variant_seed(seed: u64, variant: usize) -> u64 {
    mix_seed(seed, variant as u64)
}

/// Single inpainting chain. At each step the known region (mask false) is
/// replaced by the noised original; after the loop only masked pixels are taken
/// from the chain.
#[allow(clippy::too_many_arguments)]
pub fn inpaint_variant<D: Denoiser + ?Sized>(
    image: &Image,
    mask: &Mask,
    denoiser: &D,
    sched: &NoiseSchedule,
    params: &SynthParams,
    positive: ConditionToken,
    negative: Option<ConditionToken>,
    seed: u64,
) -> Result<Image> {
    if !mask.matches_image(image) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    if mask.is_empty() {
        return Ok(image.clone());
    }
    let (w, h) = (image.width(), image.height());
    let original = image_to_model(image)?;
    let plane = w * h;
    let mut rng = rng_from(seed);
    let mut x = Tensor::zeros(original.shape());
    fill_normal(&mut rng, x.data_mut());
    let steps = sched.subsequence(params.inference_steps)?;
    let mut noise = Tensor::zeros(original.shape());
    for (i, &t) in steps.iter().enumerate() {
        fill_normal(&mut rng, noise.data_mut());
        let known = q_sample(&original, t, &noise, sched)?;
        for (j, (xv, kv)) in x.data_mut().iter_mut().zip(known.data()).enumerate() {
            if !mask.data()[j % plane] {
                *xv = *kv;
            }
        }
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps = cfg_epsilon(denoiser, &x, t, positive, negative, params.guidance_scale)?;
        x = reverse_step(&x, &eps, t, t_prev, sched, &mut rng)?;
        ensure_finite(&x, t)?;
    }
    let generated = model_to_image(x.item(0), w, h)?;
    let mut out = image.clone();
    for (p, &inside) in mask.data().iter().enumerate() {
        if inside {
            out.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&generated.data()[p * 3..p * 3 + 3]);
        }
    }
    Ok(out)
}

/// `params.variants` inpainted versions of `image`, each from its own derived seed.
pub fn inpaint<D: Denoiser + ?Sized>(
    image: &Image,
    mask: &Mask,
    denoiser: &D,
    sched: &NoiseSchedule,
    params: &SynthParams,
    positive: ConditionToken,
    negative: Option<ConditionToken>,
) -> Result<InpaintOutput> {
    params.validate(sched.timesteps())?;
    if !image.width().is_multiple_of(4) || !image.height().is_multiple_of(4) {
        return Err(Error::Shape(format!(
            "inpainting needs sides divisible by 4, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Numeric(format!("image value {v} outside [0,1]")));
    }
    let seeds: Vec<u64> = (0..params.variants).map(|k| variant_seed(params.seed, k)).collect();
    let empty_mask = mask.is_empty();
    if empty_mask {
        log::warn!("empty inpainting mask; returning input copies");
    }
    let variants = seeds
        .iter()
        .map(|&s| inpaint_variant(image, mask, denoiser, sched, params, positive, negative, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(InpaintOutput {
        variants,
        seeds,
        empty_mask,
    })
}

/// One synthesized file in a synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    pub input_id: String,
    pub mask_file: String,
    pub variant_seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub empty_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub params: SynthParams,
    pub positive: ConditionToken,
    pub negative: Option<ConditionToken>,
    pub checkpoint: String,
    /// Synthetic images keep the boxes of their source image.
    pub boxes_from_source: bool,
    pub entries: Vec<SynthEntry>,
}
