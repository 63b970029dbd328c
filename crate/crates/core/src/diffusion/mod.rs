//! Conditional pixel-space diffusion: schedule, noise predictor, training,
//! guided ancestral sampling and masked inpainting.

pub mod sampler;
pub mod schedule;
pub mod train;
pub mod unet;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tensornet::checkpoint::{self, Manifest};
use crate::tensornet::{Param, Parameterized, Tensor};

pub use sampler::{cfg_epsilon, inpaint, sample, InpaintOutput};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use train::{build_training_set, train, train_step, TrainConfig, TrainItem, TrainLog};
pub use unet::{UNet, UNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionToken {
    Lesion,
    Degraded,
    Null,
}

impl ConditionToken {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            ConditionToken::Lesion => 0,
            ConditionToken::Degraded => 1,
            ConditionToken::Null => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub guidance_scale: f64,
    pub inference_steps: usize,
    pub variants: usize,
    pub output_size: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            inference_steps: 100,
            variants: 3,
            output_size: 64,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance_scale {} must be >= 0",
                self.guidance_scale
            )));
        }
        if self.inference_steps == 0 || self.inference_steps > timesteps {
            return Err(Error::Config(format!(
                "inference_steps {} not in 1..={timesteps}",
                self.inference_steps
            )));
        }
        if self.variants == 0 {
            return Err(Error::Config("variants must be >= 1".into()));
        }
        if self.output_size == 0 || !self.output_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "output_size {} must be a positive multiple of 4",
                self.output_size
            )));
        }
        Ok(())
    }
}

/// Noise predictor `ε(x_t, t, token)` evaluated without caching.
pub trait Denoiser: Sync {
    fn predict(&self, x: &Tensor<f32>, t: &[usize], tokens: &[ConditionToken]) -> Result<Tensor<f32>>;
}

/// A denoiser that can be fitted by [`train_step`].
pub trait TrainableDenoiser: Denoiser {
    fn forward_train(&mut self, x: &Tensor<f32>, t: &[usize], tokens: &[ConditionToken]) -> Result<Tensor<f32>>;
    fn backward(&mut self, grad: &Tensor<f32>) -> Result<()>;
    fn trainable_params(&mut self) -> Vec<&mut Param<f32>>;
}

fn token_ids(tokens: &[ConditionToken]) -> Vec<usize> {
    tokens.iter().map(|t| t.index()).collect()
}

impl Denoiser for UNet<f32> {
    fn predict(&self, x: &Tensor<f32>, t: &[usize], tokens: &[ConditionToken]) -> Result<Tensor<f32>> {
        self.infer(x, t, &token_ids(tokens))
    }
}

impl TrainableDenoiser for UNet<f32> {
    fn forward_train(&mut self, x: &Tensor<f32>, t: &[usize], tokens: &[ConditionToken]) -> Result<Tensor<f32>> {
        self.forward(x, t, &token_ids(tokens))
    }

    fn backward(&mut self, grad: &Tensor<f32>) -> Result<()> {
        UNet::backward(self, grad).map(|_| ())
    }

    fn trainable_params(&mut self) -> Vec<&mut Param<f32>> {
        self.params_mut()
    }
}

/// Writes the denoiser weights with an architecture manifest.
pub fn save_denoiser(net: &UNet<f32>, path: &Path, step: u64, seed: u64) -> Result<()> {
    let manifest = Manifest {
        format_version: checkpoint::VERSION,
        architecture: serde_json::to_value(net.config()).expect("plain struct serializes"),
        step,
        seed,
    };
    checkpoint::save(path, &net.params(), &manifest)
}

/// Rebuilds a denoiser from a checkpoint written by [`save_denoiser`].
pub fn load_denoiser(path: &Path) -> Result<(UNet<f32>, Manifest)> {
    let mpath = checkpoint::manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(mpath.clone()),
        _ => Error::io(&mpath, e),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let config: UNetConfig =
        serde_json::from_value(manifest.architecture.clone()).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let mut net = UNet::new(config, &mut crate::rng::rng_from(0));
    checkpoint::load(path, net.params_mut())?;
    Ok((net, manifest))
}

/// `[0,1]` image → `[1, 3, H, W]` tensor in `[-1,1]`.
pub fn image_to_model(img: &Image) -> Result<Tensor<f32>> {
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Numeric(format!("image value {v} outside [0,1]")));
    }
    Tensor::from_vec(&[1, 3, img.height(), img.width()], img.to_planar(2.0, -1.0))
}

/// One batch item in `[-1,1]` → clamped `[0,1]` image.
pub fn model_to_image(planar: &[f32], width: usize, height: usize) -> Result<Image> {
    let clamped: Vec<f32> = planar.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let mut img = Image::from_planar(width, height, &clamped, 2.0, -1.0)?;
    img.clamp01();
    Ok(img)
}

fn forward_mix<S: Scalar>(alpha_bar: f64, x0: &Tensor<S>, eps: &Tensor<S>) -> Result<Tensor<S>> {
    let a = S::of(alpha_bar.sqrt());
    let b = S::of((1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Forward noising `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·ε` on model-space values.
pub fn q_sample<S: Scalar>(x0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} differs from input {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    if t == 0 || t > sched.timesteps() {
        return Err(Error::Config(format!("timestep {t} not in 1..={}", sched.timesteps())));
    }
    forward_mix(sched.alpha_bar(t), x0, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng_from};

    #[test]
    fn hand_arithmetic_mix() {
        let x0 = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        let eps = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        let v = forward_mix(0.25, &x0, &eps).unwrap().data()[0];
        assert!((v - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((v - 1.3660).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_scales_input() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x0 = Tensor::from_vec(&[3], vec![0.5f64, -1.0, 0.25]).unwrap();
        let xt = q_sample(&x0, 400, &Tensor::zeros(&[3]), &s).unwrap();
        let a = s.alpha_bar(400).sqrt();
        for (o, i) in xt.data().iter().zip(x0.data()) {
            assert!((o - a * i).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = Tensor::<f32>::zeros(&[3]);
        assert!(q_sample(&x0, 1, &Tensor::zeros(&[4]), &s).is_err());
        assert!(q_sample(&x0, 0, &Tensor::zeros(&[3]), &s).is_err());
        assert!(q_sample(&x0, 11, &Tensor::zeros(&[3]), &s).is_err());
        let mut img = Image::new(4, 4);
        img.data_mut()[0] = 1.5;
        assert!(image_to_model(&img).is_err());
    }

    #[test]
    fn monte_carlo_moments() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let t = 300;
        let n = 100_000;
        let mut rng = rng_from(11);
        let x0 = Tensor::from_vec(&[1], vec![0.7f64]).unwrap();
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let e = Tensor::from_vec(&[1], vec![normal(&mut rng)]).unwrap();
                q_sample(&x0, t, &e, &s).unwrap().data()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let want_var = 1.0 - ab;
        let mean_se = (want_var / n as f64).sqrt();
        let var_se = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * 0.7).abs() < 3.0 * mean_se);
        assert!((var - want_var).abs() < 3.0 * var_se);
    }

    #[test]
    fn model_space_round_trip() {
        let mut img = Image::new(8, 4);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        let t = image_to_model(&img).unwrap();
        let back = model_to_image(t.item(0), 8, 4).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let cfg = UNetConfig {
            channels: 3,
            base_width: 4,
            emb_dim: 8,
            tokens: 3,
        };
        let net = UNet::<f32>::new(cfg, &mut rng_from(8));
        save_denoiser(&net, &path, 12, 5).unwrap();
        let (back, m) = load_denoiser(&path).unwrap();
        assert_eq!((m.step, m.seed), (12, 5));
        let x = Tensor::full(&[1, 3, 8, 8], 0.3f32);
        let tok = [ConditionToken::Lesion];
        assert_eq!(
            net.predict(&x, &[7], &tok).unwrap(),
            back.predict(&x, &[7], &tok).unwrap()
        );
        let missing = load_denoiser(&dir.path().join("none.ckpt")).unwrap_err();
        assert_eq!(missing.category(), "missing-input");
    }

    #[test]
    fn params_validation() {
        assert!(SynthParams::default().validate(1000).is_ok());
        for p in [
            SynthParams {
                guidance_scale: -1.0,
                ..SynthParams::default()
            },
            SynthParams {
                inference_steps: 1001,
                ..SynthParams::default()
            },
            SynthParams {
                variants: 0,
                ..SynthParams::default()
            },
        ] {
            assert!(p.validate(1000).is_err());
        }
    }
}
