use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{image_to_model, q_sample, ConditionToken, NoiseSchedule, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{fill_normal, rng_from};
use crate::tensornet::{mse_loss, OptimState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability of replacing the token with NULL.
    pub dropout_p: f64,
    /// Share of the training set made of degraded copies.
    pub degraded_fraction: f64,
    pub degrade_blur_sigma: f32,
    pub degrade_noise_std: f32,
    /// Random horizontal flips.
    pub flip_augment: bool,
    /// Decay of the weight average returned by [`train`]; 0 keeps the raw weights.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            learning_rate: 2e-4,
            batch_size: 1,
            dropout_p: 0.1,
            degraded_fraction: 0.1,
            degrade_blur_sigma: 1.5,
            degrade_noise_std: 0.05,
            flip_augment: true,
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} not in [0,1]", self.dropout_p)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} not in [0,1)", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.degraded_fraction) {
            return Err(Error::Config(format!(
                "degraded_fraction {} not in [0,1)",
                self.degraded_fraction
            )));
        }
        Ok(())
    }
}

/// A clean image in model space (`[3, H, W]`, values in `[-1,1]`) and its token.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: Tensor<f32>,
    pub token: ConditionToken,
}

impl TrainItem {
    pub fn new(img: &Image, token: ConditionToken) -> Result<Self> {
        let x0 = image_to_model(img)?.reshape(&[3, img.height(), img.width()])?;
        Ok(Self { x0, token })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over a window of steps, clipped to the recorded range.
    pub fn window_mean(&self, start: usize, len: usize) -> f64 {
        let end = (start + len).min(self.losses.len());
        let w = &self.losses[start.min(end)..end];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

pub fn degrade(img: &Image, blur_sigma: f32, noise_std: f32, rng: &mut impl Rng) -> Image {
    let mut out = img.gaussian_blur(blur_sigma);
    let mut noise = vec![0.0f32; out.data().len()];
    fill_normal(rng, &mut noise);
    for (v, n) in out.data_mut().iter_mut().zip(noise) {
        *v += noise_std * n;
    }
    out.clamp01();
    out
}

/// Lesion images tagged LESION plus degraded copies tagged DEGRADED, sized so
/// the copies make up `degraded_fraction` of the result.
pub fn build_training_set(images: &[Image], cfg: &TrainConfig, seed: u64) -> Result<Vec<TrainItem>> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no training images".into()));
    }
    let n = images.len();
    let copies = (n as f64 * cfg.degraded_fraction / (1.0 - cfg.degraded_fraction)).round() as usize;
    let mut rng = rng_from(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut items = Vec::with_capacity(n + copies);
    for img in images {
        items.push(TrainItem::new(img, ConditionToken::Lesion)?);
    }
    for k in 0..copies {
        let src = &images[order[k % n]];
        let d = degrade(src, cfg.degrade_blur_sigma, cfg.degrade_noise_std, &mut rng);
        items.push(TrainItem::new(&d, ConditionToken::Degraded)?);
    }
    Ok(items)
}

/// One optimizer step on a batch. Draws `t`, `ε` and the dropout coin per item.
pub fn train_step<D: TrainableDenoiser + ?Sized>(
    denoiser: &mut D,
    batch: &[TrainItem],
    sched: &NoiseSchedule,
    opt: &mut OptimState<f32>,
    dropout_p: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty training batch".into()));
    }
    let mut noisy = Vec::with_capacity(batch.len());
    let mut noises = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    let mut tokens = Vec::with_capacity(batch.len());
    for item in batch {
        let t = rng.random_range(1..=sched.timesteps());
        let mut eps = Tensor::zeros(item.x0.shape());
        fill_normal(rng, eps.data_mut());
        let token = if rng.random::<f64>() < dropout_p {
            ConditionToken::Null
        } else {
            item.token
        };
        noisy.push(q_sample(&item.x0, t, &eps, sched)?);
        noises.push(eps);
        ts.push(t);
        tokens.push(token);
    }
    let x = Tensor::stack(&noisy)?;
    let target = Tensor::stack(&noises)?;
    for p in denoiser.trainable_params() {
        p.zero_grad();
    }
    let pred = denoiser.forward_train(&x, &ts, &tokens)?;
    let (loss, grad) = mse_loss(&pred, &target)?;
    let loss = f64::from(loss);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss is {loss}")));
    }
    denoiser.backward(&grad)?;
    opt.step(denoiser.trainable_params())?;
    Ok(loss)
}

fn flip_horizontal(x: &Tensor<f32>) -> Tensor<f32> {
    let s = x.shape();
    let w = s[s.len() - 1];
    let mut out = x.clone();
    for (dst, src) in out.data_mut().chunks_exact_mut(w).zip(x.data().chunks_exact(w)) {
        for (d, v) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *v;
        }
    }
    out
}

/// Runs `cfg.steps` optimizer steps with epoch-wise shuffling. Single-threaded
/// and fully determined by `seed`. With `ema_decay > 0` the denoiser is left
/// holding the exponential moving average of its weights, with decay ramped
/// as `min(ema_decay, (1+k)/(10+k))` over steps `k`.
pub fn train<D: TrainableDenoiser + ?Sized>(
    denoiser: &mut D,
    items: &[TrainItem],
    sched: &NoiseSchedule,
    opt: &mut OptimState<f32>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::EmptyInput("no training items".into()));
    }
    let mut rng = rng_from(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = TrainLog::default();
    let mut ema: Vec<Tensor<f32>> = if cfg.ema_decay > 0.0 {
        denoiser.trainable_params().iter().map(|p| p.value.clone()).collect()
    } else {
        Vec::new()
    };
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..items.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let item = &items[order[cursor]];
            cursor += 1;
            let x0 = if cfg.flip_augment && rng.random::<bool>() {
                flip_horizontal(&item.x0)
            } else {
                item.x0.clone()
            };
            batch.push(TrainItem { x0, token: item.token });
        }
        let loss = train_step(denoiser, &batch, sched, opt, cfg.dropout_p, &mut rng)?;
        if step % 500 == 0 {
            log::debug!("diffusion step {step}: loss {loss:.5}");
        }
        log.losses.push(loss);
        if !ema.is_empty() {
            let d = cfg.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64)) as f32;
            for (avg, p) in ema.iter_mut().zip(denoiser.trainable_params()) {
                for (a, &v) in avg.data_mut().iter_mut().zip(p.value.data()) {
                    *a = d * *a + (1.0 - d) * v;
                }
            }
        }
    }
    for (avg, p) in ema.into_iter().zip(denoiser.trainable_params()) {
        p.value = avg;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Denoiser, UNet, UNetConfig};
    use crate::tensornet::{Param, Parameterized};

    /// Recovers the exact noise from `x_t` given the clean image.
    struct Oracle {
        x0: Tensor<f32>,
        sched: NoiseSchedule,
        bias: Param<f32>,
    }

    impl Denoiser for Oracle {
        fn predict(&self, x: &Tensor<f32>, t: &[usize], _: &[ConditionToken]) -> Result<Tensor<f32>> {
            let ab = self.sched.alpha_bar(t[0]);
            let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            x.zip_map(&self.x0, |xt, x0| (xt - a * x0) / b)
        }
    }

    impl TrainableDenoiser for Oracle {
        fn forward_train(&mut self, x: &Tensor<f32>, t: &[usize], k: &[ConditionToken]) -> Result<Tensor<f32>> {
            self.predict(x, t, k)
        }
        fn backward(&mut self, _: &Tensor<f32>) -> Result<()> {
            Ok(())
        }
        fn trainable_params(&mut self) -> Vec<&mut Param<f32>> {
            vec![&mut self.bias]
        }
    }

    fn toy_images(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| {
                let mut img = Image::new(8, 8);
                for (j, v) in img.data_mut().iter_mut().enumerate() {
                    *v = ((i * 7 + j) % 11) as f32 / 10.0;
                }
                img
            })
            .collect()
    }

    #[test]
    fn true_noise_predictor_has_zero_loss() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let item = TrainItem::new(&toy_images(1)[0], ConditionToken::Lesion).unwrap();
        let mut oracle = Oracle {
            x0: image_to_model(&toy_images(1)[0]).unwrap(),
            sched: sched.clone(),
            bias: Param::new("b", Tensor::zeros(&[1])),
        };
        let mut opt = OptimState::adam(1e-3);
        let mut rng = rng_from(3);
        let batch = [item];
        for _ in 0..5 {
            let loss = train_step(&mut oracle, &batch, &sched, &mut opt, 0.1, &mut rng).unwrap();
            assert!(loss < 1e-8, "{loss}");
        }
    }

    fn tiny_net() -> UNet<f32> {
        UNet::new(
            UNetConfig {
                channels: 3,
                base_width: 8,
                emb_dim: 16,
                tokens: 3,
            },
            &mut rng_from(5),
        )
    }

    #[test]
    fn loss_trajectory_is_seed_determined() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            steps: 10,
            ..TrainConfig::default()
        };
        let items = build_training_set(&toy_images(6), &cfg, 1).unwrap();
        let run = || {
            let mut net = tiny_net();
            let mut opt = OptimState::adam(cfg.learning_rate);
            train(&mut net, &items, &sched, &mut opt, &cfg, 9).unwrap()
        };
        let a = run();
        assert_eq!(a.losses.len(), 10);
        assert_eq!(a, run());
    }

    #[test]
    fn non_finite_loss_leaves_parameters_untouched() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut net = tiny_net();
        let before: Vec<_> = net.params().iter().map(|p| p.value.clone()).collect();
        let mut x0 = TrainItem::new(&toy_images(1)[0], ConditionToken::Lesion).unwrap().x0;
        x0.data_mut()[0] = f32::NAN;
        let mut opt = OptimState::adam(1e-3);
        let batch = [TrainItem {
            x0,
            token: ConditionToken::Lesion,
        }];
        let err = train_step(&mut net, &batch, &sched, &mut opt, 0.0, &mut rng_from(0)).unwrap_err();
        assert_eq!(err.category(), "numeric");
        let after: Vec<_> = net.params().iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn degraded_share() {
        let cfg = TrainConfig::default();
        let items = build_training_set(&toy_images(90), &cfg, 0).unwrap();
        let degraded = items.iter().filter(|i| i.token == ConditionToken::Degraded).count();
        assert_eq!(items.len(), 100);
        assert_eq!(degraded, 10);
    }

    #[test]
    fn flip_is_an_involution() {
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = flip_horizontal(&x);
        assert_eq!(f.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(flip_horizontal(&f), x);
    }
}
