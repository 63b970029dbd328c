//! Small conditional U-Net used as the noise predictor.
//!
//! ```text
//! x ─ in_conv ─ b0 ──────────────────────────────┐ (skip s0, width w)
//!               └ down1 (stride 2) ───────────┐   │ (skip s1, width 2w)
//!                 └ down2 (stride 2) ─ mid ─ up ─ cat ─ up1 ─ up ─ cat ─ up2 ─ out_conv
//! ```
//!
//! Every block is conv → group norm → (+ embedding projection) → SiLU. The
//! embedding is `SiLU(fc2(SiLU(fc1(sinusoidal(t)))) + token_table[token])`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensornet::layers::{
    add_channel_vector, channel_sums, sinusoidal_embedding, Conv2d, Dense, Embedding, GroupNorm, Silu, Upsample2x,
};
use crate::tensornet::{Param, Parameterized, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub channels: usize,
    pub base_width: usize,
    pub emb_dim: usize,
    /// Number of condition tokens in the embedding table.
    pub tokens: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_width: 32,
            emb_dim: 64,
            tokens: 3,
        }
    }
}

#[derive(Debug, Clone)]
struct Block<S> {
    conv: Conv2d<S>,
    norm: GroupNorm<S>,
    proj: Dense<S>,
    act: Silu<S>,
}

impl<S: Scalar> Block<S> {
    fn new(cin: usize, cout: usize, stride: usize, emb: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, stride, rng),
            norm: GroupNorm::new(cout),
            proj: Dense::new(emb, cout, rng),
            act: Silu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor<S>, e: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.conv.forward(x)?;
        let h = self.norm.forward(&h)?;
        let p = self.proj.forward(e)?;
        let h = add_channel_vector(&h, &p)?;
        self.act.forward(&h)
    }

    fn infer(&self, x: &Tensor<S>, e: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.conv.infer(x)?;
        let h = self.norm.infer(&h)?;
        let p = self.proj.infer(e)?;
        self.act.infer(&add_channel_vector(&h, &p)?)
    }

    /// Returns (grad wrt input, grad wrt embedding).
    fn backward(&mut self, g: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let gh = self.act.backward(g)?;
        let ge = self.proj.backward(&channel_sums(&gh)?)?;
        let gn = self.norm.backward(&gh)?;
        Ok((self.conv.backward(&gn)?, ge))
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut v = self.conv.params();
        v.extend(self.norm.params());
        v.extend(self.proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = self.conv.params_mut();
        v.extend(self.norm.params_mut());
        v.extend(self.proj.params_mut());
        v
    }

    fn prefix(&mut self, name: &str) {
        for (p, part) in self.params_mut().into_iter().zip([
            "conv.weight",
            "conv.bias",
            "norm.gamma",
            "norm.beta",
            "proj.weight",
            "proj.bias",
        ]) {
            p.name = format!("{name}.{part}");
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNet<S> {
    config: UNetConfig,
    fc1: Dense<S>,
    act1: Silu<S>,
    fc2: Dense<S>,
    tokens: Embedding<S>,
    act_e: Silu<S>,
    in_conv: Conv2d<S>,
    b0: Block<S>,
    down1: Block<S>,
    down2: Block<S>,
    mid: Block<S>,
    up_a: Upsample2x,
    up1: Block<S>,
    up_b: Upsample2x,
    up2: Block<S>,
    out_conv: Conv2d<S>,
}

impl<S: Scalar> UNet<S> {
    pub fn new(config: UNetConfig, rng: &mut impl Rng) -> Self {
        let (c, w, e) = (config.channels, config.base_width, config.emb_dim);
        let mut fc1 = Dense::new(e, e, rng);
        let mut fc2 = Dense::new(e, e, rng);
        let mut tokens = Embedding::new(config.tokens, e, rng);
        let mut in_conv = Conv2d::new(c, w, 3, 1, rng);
        let mut b0 = Block::new(w, w, 1, e, rng);
        let mut down1 = Block::new(w, 2 * w, 2, e, rng);
        let mut down2 = Block::new(2 * w, 2 * w, 2, e, rng);
        let mut mid = Block::new(2 * w, 2 * w, 1, e, rng);
        let mut up1 = Block::new(4 * w, 2 * w, 1, e, rng);
        let mut up2 = Block::new(3 * w, w, 1, e, rng);
        let mut out_conv = Conv2d::new(w, c, 3, 1, rng);
        // start close to a zero predictor
        for v in out_conv.weight.value.data_mut() {
            *v *= S::of(0.1);
        }
        fc1.weight.name = "time.fc1.weight".into();
        fc1.bias.name = "time.fc1.bias".into();
        fc2.weight.name = "time.fc2.weight".into();
        fc2.bias.name = "time.fc2.bias".into();
        tokens.table.name = "token.table".into();
        in_conv.weight.name = "in_conv.weight".into();
        in_conv.bias.name = "in_conv.bias".into();
        out_conv.weight.name = "out_conv.weight".into();
        out_conv.bias.name = "out_conv.bias".into();
        b0.prefix("b0");
        down1.prefix("down1");
        down2.prefix("down2");
        mid.prefix("mid");
        up1.prefix("up1");
        up2.prefix("up2");
        Self {
            config,
            fc1,
            act1: Silu::new(),
            fc2,
            tokens,
            act_e: Silu::new(),
            in_conv,
            b0,
            down1,
            down2,
            mid,
            up_a: Upsample2x::new(),
            up1,
            up_b: Upsample2x::new(),
            up2,
            out_conv,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn check(&self, x: &Tensor<S>, t: &[usize], tokens: &[usize]) -> Result<()> {
        let s = x.shape();
        if s.len() != 4
            || s[1] != self.config.channels
            || !s[2].is_multiple_of(4)
            || !s[3].is_multiple_of(4)
            || s[2] == 0
        {
            return Err(Error::Shape(format!(
                "denoiser expects [N, {}, H, W] with H, W multiples of 4, got {s:?}",
                self.config.channels
            )));
        }
        if t.len() != s[0] || tokens.len() != s[0] {
            return Err(Error::Shape(format!(
                "batch of {} needs as many timesteps ({}) and tokens ({})",
                s[0],
                t.len(),
                tokens.len()
            )));
        }
        Ok(())
    }

    fn time_features(&self, t: &[usize]) -> Tensor<S> {
        let ts: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        sinusoidal_embedding(&ts, self.config.emb_dim)
    }

    pub fn forward(&mut self, x: &Tensor<S>, t: &[usize], tokens: &[usize]) -> Result<Tensor<S>> {
        self.check(x, t, tokens)?;
        let w = self.config.base_width;
        let a1 = self.fc1.forward(&self.time_features(t))?;
        let a2 = self.fc2.forward(&self.act1.forward(&a1)?)?;
        let mut e = self.tokens.forward(tokens)?;
        e.add_assign(&a2)?;
        let e = self.act_e.forward(&e)?;

        let h0 = self.in_conv.forward(x)?;
        let s0 = self.b0.forward(&h0, &e)?;
        let s1 = self.down1.forward(&s0, &e)?;
        let h2 = self.down2.forward(&s1, &e)?;
        let m = self.mid.forward(&h2, &e)?;
        let u = self.up_a.forward(&m)?;
        let u1 = self.up1.forward(&Tensor::concat_channels(&u, &s1)?, &e)?;
        let uu = self.up_b.forward(&u1)?;
        let u2 = self.up2.forward(&Tensor::concat_channels(&uu, &s0)?, &e)?;
        debug_assert_eq!(u2.shape()[1], w);
        self.out_conv.forward(&u2)
    }

    pub fn infer(&self, x: &Tensor<S>, t: &[usize], tokens: &[usize]) -> Result<Tensor<S>> {
        self.check(x, t, tokens)?;
        let a1 = self.fc1.infer(&self.time_features(t))?;
        let a2 = self.fc2.infer(&self.act1.infer(&a1)?)?;
        let mut e = self.tokens.infer(tokens)?;
        e.add_assign(&a2)?;
        let e = self.act_e.infer(&e)?;

        let h0 = self.in_conv.infer(x)?;
        let s0 = self.b0.infer(&h0, &e)?;
        let s1 = self.down1.infer(&s0, &e)?;
        let h2 = self.down2.infer(&s1, &e)?;
        let m = self.mid.infer(&h2, &e)?;
        let u = self.up_a.infer(&m)?;
        let u1 = self.up1.infer(&Tensor::concat_channels(&u, &s1)?, &e)?;
        let uu = self.up_b.infer(&u1)?;
        let u2 = self.up2.infer(&Tensor::concat_channels(&uu, &s0)?, &e)?;
        self.out_conv.infer(&u2)
    }

    /// Accumulates parameter gradients; returns the gradient wrt the input image.
    pub fn backward(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let w = self.config.base_width;
        let g_u2 = self.out_conv.backward(g)?;
        let (g_c2, mut ge) = self.up2.backward(&g_u2)?;
        let (g_uu, g_s0_skip) = g_c2.split_channels(2 * w)?;
        let g_u1 = self.up_b.backward(&g_uu)?;
        let (g_c1, ge1) = self.up1.backward(&g_u1)?;
        ge.add_assign(&ge1)?;
        let (g_u, g_s1_skip) = g_c1.split_channels(2 * w)?;
        let g_m = self.up_a.backward(&g_u)?;
        let (g_h2, ge_mid) = self.mid.backward(&g_m)?;
        ge.add_assign(&ge_mid)?;
        let (mut g_s1, ge_d2) = self.down2.backward(&g_h2)?;
        ge.add_assign(&ge_d2)?;
        g_s1.add_assign(&g_s1_skip)?;
        let (mut g_s0, ge_d1) = self.down1.backward(&g_s1)?;
        ge.add_assign(&ge_d1)?;
        g_s0.add_assign(&g_s0_skip)?;
        let (g_h0, ge_b0) = self.b0.backward(&g_s0)?;
        ge.add_assign(&ge_b0)?;
        let g_x = self.in_conv.backward(&g_h0)?;

        let g_e = self.act_e.backward(&ge)?;
        self.tokens.backward(&g_e)?;
        let g_s = self.fc2.backward(&g_e)?;
        let g_a1 = self.act1.backward(&g_s)?;
        self.fc1.backward(&g_a1)?;
        Ok(g_x)
    }
}

impl<S: Scalar> Parameterized<S> for UNet<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v.push(&self.tokens.table);
        v.extend(self.in_conv.params());
        for b in [&self.b0, &self.down1, &self.down2, &self.mid, &self.up1, &self.up2] {
            v.extend(b.params());
        }
        v.extend(self.out_conv.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v.push(&mut self.tokens.table);
        v.extend(self.in_conv.params_mut());
        for b in [
            &mut self.b0,
            &mut self.down1,
            &mut self.down2,
            &mut self.mid,
            &mut self.up1,
            &mut self.up2,
        ] {
            v.extend(b.params_mut());
        }
        v.extend(self.out_conv.params_mut());
        v
    }
}
