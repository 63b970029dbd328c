//! Layer primitives with analytic backward passes.
//!
//! Every layer computes through `run(&self, ..)`, which returns the output and
//! whatever the backward pass needs. `forward` keeps that cache, `infer`
//! drops it, so immutable parameters can be shared for inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

/// He-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

fn missing_cache(layer: &str) -> Error {
    Error::Usage(format!("{layer}: backward called without a recorded forward pass"))
}

fn expect_rank(x_shape: &[usize], rank: usize, layer: &str) -> Result<()> {
    if x_shape.len() != rank {
        return Err(Error::Shape(format!(
            "{layer} expects a rank-{rank} input, got {x_shape:?}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Conv2d

#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in·k·k]`
    pub weight: Param<S>,
    pub bias: Param<S>,
    cache: Option<ConvCache<S>>,
}

#[derive(Debug, Clone)]
struct ConvCache<S> {
    in_shape: Vec<usize>,
    cols: Vec<Vec<S>>,
}

impl<S: Scalar> Conv2d<S> {
    /// `padding = kernel / 2`, so stride 1 preserves spatial size.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: stride.max(1),
            padding: kernel / 2,
            weight: Param::new("weight", he_uniform(&[out_channels, fan_in], fan_in, rng)),
            bias: Param::new("bias", Tensor::zeros(&[out_channels])),
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, p, s) = (self.kernel, self.padding, self.stride);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::Shape(format!("conv {k}x{k} does not fit a {h}x{w} input")));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        expect_rank(shape, 4, "conv2d")?;
        if shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got {shape:?}",
                self.in_channels
            )));
        }
        Ok(())
    }

    fn im2col(&self, x: &[S], h: usize, w: usize, ho: usize, wo: usize) -> Vec<S> {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let plane_out = ho * wo;
        let mut cols = vec![S::zero(); self.in_channels * k * k * plane_out];
        for c in 0..self.in_channels {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[S], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [S]) {
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let plane_out = ho * wo;
        for c in 0..self.in_channels {
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * plane_out..(row + 1) * plane_out];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor<S>, keep: bool) -> Result<(Tensor<S>, Option<ConvCache<S>>)> {
        self.check_input(x.shape())?;
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (ho, wo) = self.output_hw(h, w)?;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        let mut all_cols = Vec::with_capacity(if keep { n } else { 0 });
        for i in 0..n {
            let cols = self.im2col(x.item(i), h, w, ho, wo);
            let o = out.item_mut(i);
            for (oc, chunk) in o.chunks_exact_mut(ho * wo).enumerate() {
                chunk.fill(self.bias.value.data()[oc]);
            }
            S::gemm(
                false,
                false,
                self.out_channels,
                kk,
                ho * wo,
                S::one(),
                self.weight.value.data(),
                &cols,
                S::one(),
                o,
            );
            if keep {
                all_cols.push(cols);
            }
        }
        let cache = keep.then(|| ConvCache {
            in_shape: x.shape().to_vec(),
            cols: all_cols,
        });
        Ok((out, cache))
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (y, cache) = self.run(x, true)?;
        self.cache = cache;
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.run(x, false)?.0)
    }

    pub fn backward(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let (n, h, w) = (cache.in_shape[0], cache.in_shape[2], cache.in_shape[3]);
        let (ho, wo) = self.output_hw(h, w)?;
        g.expect_shape(&[n, self.out_channels, ho, wo])?;
        let kk = self.in_channels * self.kernel * self.kernel;
        let plane_out = ho * wo;
        let mut dx = Tensor::zeros(&cache.in_shape);
        let mut dcols = vec![S::zero(); kk * plane_out];
        for i in 0..n {
            let gi = g.item(i);
            S::gemm(
                false,
                true,
                self.out_channels,
                plane_out,
                kk,
                S::one(),
                gi,
                &cache.cols[i],
                S::one(),
                self.weight.grad.data_mut(),
            );
            for (oc, chunk) in gi.chunks_exact(plane_out).enumerate() {
                self.bias.grad.data_mut()[oc] += chunk.iter().copied().sum::<S>();
            }
            S::gemm(
                true,
                false,
                kk,
                self.out_channels,
                plane_out,
                S::one(),
                self.weight.value.data(),
                gi,
                S::zero(),
                &mut dcols,
            );
            self.col2im(&dcols, h, w, ho, wo, dx.item_mut(i));
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Debug, Clone)]
pub struct Dense<S> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out, in]`
    pub weight: Param<S>,
    pub bias: Param<S>,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new("weight", he_uniform(&[outputs, inputs], inputs, rng)),
            bias: Param::new("bias", Tensor::zeros(&[outputs])),
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        expect_rank(x.shape(), 2, "dense")?;
        if x.shape()[1] != self.inputs {
            return Err(Error::Shape(format!(
                "dense expects {} inputs, got {:?}",
                self.inputs,
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let mut y = Tensor::zeros(&[n, self.outputs]);
        for row in y.data_mut().chunks_exact_mut(self.outputs) {
            row.copy_from_slice(self.bias.value.data());
        }
        S::gemm(
            false,
            true,
            n,
            self.inputs,
            self.outputs,
            S::one(),
            x.data(),
            self.weight.value.data(),
            S::one(),
            y.data_mut(),
        );
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = self.run(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.run(x)
    }

    pub fn backward(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("dense"))?;
        let n = x.shape()[0];
        g.expect_shape(&[n, self.outputs])?;
        S::gemm(
            true,
            false,
            self.outputs,
            n,
            self.inputs,
            S::one(),
            g.data(),
            x.data(),
            S::one(),
            self.weight.grad.data_mut(),
        );
        for row in g.data().chunks_exact(self.outputs) {
            for (b, &v) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b += v;
            }
        }
        let mut dx = Tensor::zeros(&[n, self.inputs]);
        S::gemm(
            false,
            false,
            n,
            self.outputs,
            self.inputs,
            S::one(),
            g.data(),
            self.weight.value.data(),
            S::zero(),
            dx.data_mut(),
        );
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Activations

#[derive(Debug, Clone, Default)]
pub struct Relu<S> {
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Relu<S> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(x.map(|v| v.max(S::zero())))
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.cache = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("relu"))?;
        x.zip_map(g, |xv, gv| if xv > S::zero() { gv } else { S::zero() })
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

/// `x · sigmoid(x)`.
#[derive(Debug, Clone, Default)]
pub struct Silu<S> {
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Silu<S> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(x.map(|v| v * sigmoid(v)))
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.cache = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("silu"))?;
        x.zip_map(g, |xv, gv| {
            let s = sigmoid(xv);
            gv * s * (S::one() + xv * (S::one() - s))
        })
    }
}

// ---------------------------------------------------------------------------
// GroupNorm

/// Largest group count `≤ 8` that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(8))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm<S> {
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
    pub gamma: Param<S>,
    pub beta: Param<S>,
    cache: Option<NormCache<S>>,
}

#[derive(Debug, Clone)]
struct NormCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
}

impl<S: Scalar> GroupNorm<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            groups: group_count(channels),
            eps: 1e-5,
            gamma: Param::new("gamma", Tensor::full(&[channels], S::one())),
            beta: Param::new("beta", Tensor::zeros(&[channels])),
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<S>) -> Result<(Tensor<S>, NormCache<S>)> {
        expect_rank(x.shape(), 4, "group_norm")?;
        if x.shape()[1] != self.channels {
            return Err(Error::Shape(format!(
                "group_norm expects {} channels, got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let plane = x.shape()[2] * x.shape()[3];
        let per_group = self.channels / self.groups;
        let m = S::of((per_group * plane) as f64);
        let eps = S::of(self.eps);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * self.groups);
        for i in 0..n {
            let xi = x.item(i);
            for g in 0..self.groups {
                let range = g * per_group * plane..(g + 1) * per_group * plane;
                let xs = &xi[range.clone()];
                let mean = xs.iter().copied().sum::<S>() / m;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / m;
                let is = S::one() / (var + eps).sqrt();
                inv_std.push(is);
                let xh = &mut xhat.item_mut(i)[range.clone()];
                for (o, &v) in xh.iter_mut().zip(xs) {
                    *o = (v - mean) * is;
                }
            }
            let xh = xhat.item(i).to_vec();
            let yi = y.item_mut(i);
            for c in 0..self.channels {
                let (gm, bt) = (self.gamma.value.data()[c], self.beta.value.data()[c]);
                for p in 0..plane {
                    yi[c * plane + p] = gm * xh[c * plane + p] + bt;
                }
            }
        }
        Ok((y, NormCache { xhat, inv_std }))
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (y, cache) = self.run(x)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.run(x)?.0)
    }

    pub fn backward(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("group_norm"))?;
        g.expect_shape(cache.xhat.shape())?;
        let n = g.shape()[0];
        let plane = g.shape()[2] * g.shape()[3];
        let per_group = self.channels / self.groups;
        let m = S::of((per_group * plane) as f64);
        let mut dx = Tensor::zeros(g.shape());
        for i in 0..n {
            let (gi, xh) = (g.item(i), cache.xhat.item(i));
            for c in 0..self.channels {
                let s = c * plane..(c + 1) * plane;
                let (gs, xs) = (&gi[s.clone()], &xh[s]);
                self.beta.grad.data_mut()[c] += gs.iter().copied().sum::<S>();
                self.gamma.grad.data_mut()[c] += gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<S>();
            }
            let dxi = dx.item_mut(i);
            for grp in 0..self.groups {
                let is = cache.inv_std[i * self.groups + grp];
                let mut sum_d = S::zero();
                let mut sum_dx = S::zero();
                for c in grp * per_group..(grp + 1) * per_group {
                    let gm = self.gamma.value.data()[c];
                    for p in c * plane..(c + 1) * plane {
                        let d = gi[p] * gm;
                        sum_d += d;
                        sum_dx += d * xh[p];
                    }
                }
                let (mean_d, mean_dx) = (sum_d / m, sum_dx / m);
                for c in grp * per_group..(grp + 1) * per_group {
                    let gm = self.gamma.value.data()[c];
                    for p in c * plane..(c + 1) * plane {
                        dxi[p] = is * (gi[p] * gm - mean_d - xh[p] * mean_dx);
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

// ---------------------------------------------------------------------------
// Shape-only layers

/// Nearest-neighbour 2× upsampling.
#[derive(Debug, Clone, Default)]
pub struct Upsample2x {
    in_shape: Option<Vec<usize>>,
}

impl Upsample2x {
    pub fn new() -> Self {
        Self { in_shape: None }
    }

    pub fn infer<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        expect_rank(x.shape(), 4, "upsample")?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for (src, dst) in x
            .data()
            .chunks_exact(h * w)
            .zip(y.data_mut().chunks_exact_mut(4 * h * w))
        {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
        Ok(y)
    }

    pub fn forward<S: Scalar>(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.in_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn backward<S: Scalar>(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = self.in_shape.as_ref().ok_or_else(|| missing_cache("upsample"))?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        g.expect_shape(&[n, c, 2 * h, 2 * w])?;
        let mut dx = Tensor::zeros(shape);
        for (src, dst) in g
            .data()
            .chunks_exact(4 * h * w)
            .zip(dx.data_mut().chunks_exact_mut(h * w))
        {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                }
            }
        }
        Ok(dx)
    }
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self { in_shape: None }
    }

    pub fn infer<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        expect_rank(x.shape(), 4, "global_avg_pool")?;
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let plane = x.shape()[2] * x.shape()[3];
        let inv = S::one() / S::of(plane as f64);
        let data = x
            .data()
            .chunks_exact(plane)
            .map(|ch| ch.iter().copied().sum::<S>() * inv)
            .collect();
        Tensor::from_vec(&[n, c], data)
    }

    pub fn forward<S: Scalar>(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.in_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn backward<S: Scalar>(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = self.in_shape.as_ref().ok_or_else(|| missing_cache("global_avg_pool"))?;
        g.expect_shape(&shape[..2])?;
        let plane = shape[2] * shape[3];
        let inv = S::one() / S::of(plane as f64);
        let mut dx = Tensor::zeros(shape);
        for (dst, &gv) in dx.data_mut().chunks_exact_mut(plane).zip(g.data()) {
            dst.fill(gv * inv);
        }
        Ok(dx)
    }
}

/// `[N, ...] -> [N, prod(...)]`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    in_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self { in_shape: None }
    }

    pub fn infer<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let n = x.batch();
        let rest = x.len() / n.max(1);
        x.clone().reshape(&[n, rest])
    }

    pub fn forward<S: Scalar>(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.in_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn backward<S: Scalar>(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = self.in_shape.as_ref().ok_or_else(|| missing_cache("flatten"))?;
        g.clone().reshape(shape)
    }
}

// ---------------------------------------------------------------------------
// Conditioning helpers

/// Learned lookup table `[rows, dim]`.
#[derive(Debug, Clone)]
pub struct Embedding<S> {
    pub table: Param<S>,
    cache: Option<Vec<usize>>,
}

impl<S: Scalar> Embedding<S> {
    pub fn new(rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * dim).map(|_| S::of(rng.random_range(-1.0..1.0))).collect();
        Self {
            table: Param::new("table", Tensor::from_vec(&[rows, dim], data).expect("shape")),
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn infer(&self, ids: &[usize]) -> Result<Tensor<S>> {
        let (rows, dim) = (self.table.value.shape()[0], self.dim());
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape(format!("embedding row {id} out of {rows}")));
            }
            out.extend_from_slice(&self.table.value.data()[id * dim..(id + 1) * dim]);
        }
        Tensor::from_vec(&[ids.len(), dim], out)
    }

    pub fn forward(&mut self, ids: &[usize]) -> Result<Tensor<S>> {
        let y = self.infer(ids)?;
        self.cache = Some(ids.to_vec());
        Ok(y)
    }

    pub fn backward(&mut self, g: &Tensor<S>) -> Result<()> {
        let ids = self.cache.as_ref().ok_or_else(|| missing_cache("embedding"))?;
        let dim = self.dim();
        g.expect_shape(&[ids.len(), dim])?;
        for (row, &id) in g.data().chunks_exact(dim).zip(ids) {
            for (t, &v) in self.table.grad.data_mut()[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                *t += v;
            }
        }
        Ok(())
    }
}

/// Add a per-item, per-channel vector `[N, C]` to every pixel of `[N, C, H, W]`.
pub fn add_channel_vector<S: Scalar>(x: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
    expect_rank(x.shape(), 4, "channel add")?;
    v.expect_shape(&x.shape()[..2])?;
    let plane = x.shape()[2] * x.shape()[3];
    let mut y = x.clone();
    for (chunk, &b) in y.data_mut().chunks_exact_mut(plane).zip(v.data()) {
        chunk.iter_mut().for_each(|p| *p += b);
    }
    Ok(y)
}

/// Gradient of [`add_channel_vector`] with respect to the vector: spatial sums.
pub fn channel_sums<S: Scalar>(g: &Tensor<S>) -> Result<Tensor<S>> {
    expect_rank(g.shape(), 4, "channel sums")?;
    let plane = g.shape()[2] * g.shape()[3];
    let data = g.data().chunks_exact(plane).map(|c| c.iter().copied().sum()).collect();
    Tensor::from_vec(&g.shape()[..2], data)
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `[N, dim]`.
pub fn sinusoidal_embedding<S: Scalar>(timesteps: &[f64], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[timesteps.len(), dim]);
    for (row, &t) in out.data_mut().chunks_exact_mut(dim).zip(timesteps) {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = S::of((t * freq).sin());
            row[half + i] = S::of((t * freq).cos());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Sequential layer enum

/// Serializable description of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Silu,
    GroupNorm {
        channels: usize,
    },
    Upsample2x,
    GlobalAvgPool,
    Flatten,
}

impl LayerSpec {
    /// Per-item output shape (no batch dimension) for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::Shape(format!("{self:?} cannot take input {input:?}"));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(bad());
                }
                let p = kernel / 2;
                if input[1] + 2 * p < kernel || input[2] + 2 * p < kernel {
                    return Err(bad());
                }
                let s = stride.max(1);
                Ok(vec![
                    out_channels,
                    (input[1] + 2 * p - kernel) / s + 1,
                    (input[2] + 2 * p - kernel) / s + 1,
                ])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(bad());
                }
                Ok(vec![outputs])
            }
            LayerSpec::Relu | LayerSpec::Silu => Ok(input.to_vec()),
            LayerSpec::GroupNorm { channels } => {
                if input.len() != 3 || input[0] != channels {
                    return Err(bad());
                }
                Ok(input.to_vec())
            }
            LayerSpec::Upsample2x => {
                if input.len() != 3 {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1] * 2, input[2] * 2])
            }
            LayerSpec::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(bad());
                }
                Ok(vec![input[0]])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<S> {
    Conv2d(Conv2d<S>),
    Dense(Dense<S>),
    Relu(Relu<S>),
    Silu(Silu<S>),
    GroupNorm(GroupNorm<S>),
    Upsample2x(Upsample2x),
    GlobalAvgPool(GlobalAvgPool),
    Flatten(Flatten),
}

impl<S: Scalar> Layer<S> {
    pub fn from_spec(spec: &LayerSpec, rng: &mut impl Rng) -> Self {
        match *spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => Layer::Conv2d(Conv2d::new(in_channels, out_channels, kernel, stride, rng)),
            LayerSpec::Dense { inputs, outputs } => Layer::Dense(Dense::new(inputs, outputs, rng)),
            LayerSpec::Relu => Layer::Relu(Relu::new()),
            LayerSpec::Silu => Layer::Silu(Silu::new()),
            LayerSpec::GroupNorm { channels } => Layer::GroupNorm(GroupNorm::new(channels)),
            LayerSpec::Upsample2x => Layer::Upsample2x(Upsample2x::new()),
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::new()),
            LayerSpec::Flatten => Layer::Flatten(Flatten::new()),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
            },
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs,
                outputs: d.outputs,
            },
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::Silu(_) => LayerSpec::Silu,
            Layer::GroupNorm(g) => LayerSpec::GroupNorm { channels: g.channels },
            Layer::Upsample2x(_) => LayerSpec::Upsample2x,
            Layer::GlobalAvgPool(_) => LayerSpec::GlobalAvgPool,
            Layer::Flatten(_) => LayerSpec::Flatten,
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::Dense(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::Silu(l) => l.forward(x),
            Layer::GroupNorm(l) => l.forward(x),
            Layer::Upsample2x(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
        }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Conv2d(l) => l.infer(x),
            Layer::Dense(l) => l.infer(x),
            Layer::Relu(l) => l.infer(x),
            Layer::Silu(l) => l.infer(x),
            Layer::GroupNorm(l) => l.infer(x),
            Layer::Upsample2x(l) => l.infer(x),
            Layer::GlobalAvgPool(l) => l.infer(x),
            Layer::Flatten(l) => l.infer(x),
        }
    }

    pub fn backward(&mut self, g: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Conv2d(l) => l.backward(g),
            Layer::Dense(l) => l.backward(g),
            Layer::Relu(l) => l.backward(g),
            Layer::Silu(l) => l.backward(g),
            Layer::GroupNorm(l) => l.backward(g),
            Layer::Upsample2x(l) => l.backward(g),
            Layer::GlobalAvgPool(l) => l.backward(g),
            Layer::Flatten(l) => l.backward(g),
        }
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        match self {
            Layer::Conv2d(l) => l.params(),
            Layer::Dense(l) => l.params(),
            Layer::GroupNorm(l) => l.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        match self {
            Layer::Conv2d(l) => l.params_mut(),
            Layer::Dense(l) => l.params_mut(),
            Layer::GroupNorm(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn ones_kernel_on_constant_interior_gives_nine() {
        let mut rng = rng_from(0);
        let mut conv = Conv2d::<f64>::new(1, 1, 3, 1, &mut rng);
        conv.weight.value.fill(1.0);
        let x = Tensor::full(&[1, 1, 5, 5], 1.0);
        let y = conv.infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(y.data()[yy * 5 + xx], 9.0);
            }
        }
        // corners see four in-bounds taps
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn stride_two_halves_spatial_size() {
        let mut rng = rng_from(1);
        let conv = Conv2d::<f32>::new(3, 4, 3, 2, &mut rng);
        let y = conv.infer(&Tensor::zeros(&[2, 3, 8, 8])).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn relu_clamps_negative() {
        let x = Tensor::<f64>::from_vec(&[1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(Relu::new().infer(&x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn dense_sum_loss_gradient_is_input_pattern() {
        let mut rng = rng_from(2);
        let mut d = Dense::<f64>::new(3, 2, &mut rng);
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        d.forward(&x).unwrap();
        d.backward(&Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_eq!(d.weight.grad.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
        assert_eq!(d.bias.grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let mut rng = rng_from(3);
        let mut d = Dense::<f64>::new(2, 2, &mut rng);
        let err = d.backward(&Tensor::zeros(&[1, 2])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn group_count_caps_at_eight() {
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(3), 3);
        assert_eq!(group_count(12), 6);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![1.0, 3.0, -5.0, 5.0]).unwrap();
        let y = GroupNorm::new(2).infer(&x).unwrap();
        let d = y.data();
        assert!((d[0] + 1.0).abs() < 1e-4 && (d[1] - 1.0).abs() < 1e-4);
    }
}
