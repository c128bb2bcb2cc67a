//! Layers and the Gaussian stochastic machinery.
//!
//! Parameters are plain [`Tensor`]s held by layer structs; a forward
//! pass binds them onto a [`Graph`] with [`Graph::param`], so the same
//! layer applied several times in one graph accumulates gradients
//! correctly. Initialization is uniform Glorot for weights and zero for
//! biases, except the sigma head bias which starts at softplus^-1(1) so
//! the stochastic layer opens with unit standard deviation.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

const HALF_LN_TWO_PI: f64 = 0.918938533204672741780329736406; // ln(2*pi)/2

/// softplus^-1(1) = ln(e - 1); gives sigma = 1 at init.
pub const SIGMA_BIAS_INIT: f64 = 0.541324854612918108978;

/// Visits every learnable tensor with a stable, hierarchical name.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Uniform Glorot draw: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(-a, a)).collect();
    Tensor::from_vec(shape, data).expect("glorot shape")
}

/// Dense affine map `W x + b`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor, // [out, in]
    pub bias: Tensor,   // [out]
}

impl LinearLayer {
    pub fn new(rng: &mut Rng, dim_in: usize, dim_out: usize) -> Self {
        LinearLayer {
            weight: glorot_uniform(rng, &[dim_out, dim_in], dim_in, dim_out),
            bias: Tensor::zeros(&[dim_out]),
        }
    }

    pub fn dim_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn dim_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies the layer to a vector `[in]`, yielding `[out]`.
    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        let (din, dout) = (self.dim_in(), self.dim_out());
        if x.shape() != [din] {
            return Err(Error::shape(format!(
                "linear layer wants [{din}], got {:?}",
                x.shape()
            )));
        }
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        w.matmul(&x.reshape(&[din, 1])?)?
            .reshape(&[dout])?
            .add(&b)
    }
}

impl Parameterized for LinearLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Convolution stage: cross-correlation plus per-channel bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernels: Tensor, // [co, ci, kh, kw]
    pub bias: Tensor,    // [co]
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn new(rng: &mut Rng, ci: usize, co: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvLayer {
            kernels: glorot_uniform(rng, &[co, ci, k, k], ci * k * k, co * k * k),
            bias: Tensor::zeros(&[co]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        let co = self.kernels.shape()[0];
        let k = g.param(&self.kernels);
        let b = g.param(&self.bias).reshape(&[co, 1, 1])?;
        x.conv2d(&k, self.stride, self.pad)?.add(&b)
    }
}

impl Parameterized for ConvLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.kernels"), &self.kernels);
        f(&format!("{prefix}.bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.kernels"), &mut self.kernels);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Transposed convolution stage (adjoint of [`ConvLayer`]'s map).
///
/// Kernels keep the conv2d layout `[c_in_of_stage, c_out_of_stage, kh, kw]`
/// because the stage's forward is the conv adjoint.
#[derive(Clone, Debug)]
pub struct ConvTransposeLayer {
    pub kernels: Tensor, // [ci_stage, co_stage, kh, kw]
    pub bias: Tensor,    // [co_stage]
    pub stride: usize,
    pub pad: usize,
}

impl ConvTransposeLayer {
    pub fn new(rng: &mut Rng, ci: usize, co: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvTransposeLayer {
            kernels: glorot_uniform(rng, &[ci, co, k, k], ci * k * k, co * k * k),
            bias: Tensor::zeros(&[co]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        let co = self.kernels.shape()[1];
        let k = g.param(&self.kernels);
        let b = g.param(&self.bias).reshape(&[co, 1, 1])?;
        x.conv_transpose2d(&k, self.stride, self.pad)?.add(&b)
    }
}

impl Parameterized for ConvTransposeLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.kernels"), &self.kernels);
        f(&format!("{prefix}.bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.kernels"), &mut self.kernels);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Linear heads producing the mean and (softplus-positive) standard
/// deviation of the latent Gaussian.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mu: LinearLayer,
    pub sigma: LinearLayer,
}

impl GaussianHead {
    pub fn new(rng: &mut Rng, dim_in: usize, dim_latent: usize) -> Self {
        let mu = LinearLayer::new(rng, dim_in, dim_latent);
        let mut sigma = LinearLayer::new(rng, dim_in, dim_latent);
        for b in sigma.bias.data_mut() {
            *b = SIGMA_BIAS_INIT;
        }
        GaussianHead { mu, sigma }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.dim_out()
    }

    /// mu = W_mu f + b_mu; sigma = softplus(W_sigma f + b_sigma).
    pub fn forward(&self, g: &Graph, features: &Var) -> Result<GaussianVars> {
        Ok(GaussianVars {
            mu: self.mu.forward(g, features)?,
            sigma: self.sigma.forward(g, features)?.softplus(),
        })
    }
}

impl Parameterized for GaussianHead {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.mu.visit_params(&format!("{prefix}.mu"), f);
        self.sigma.visit_params(&format!("{prefix}.sigma"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.mu.visit_params_mut(&format!("{prefix}.mu"), f);
        self.sigma.visit_params_mut(&format!("{prefix}.sigma"), f);
    }
}

/// Diagonal Gaussian on the tape: differentiable mean and standard
/// deviation vectors of equal length.
#[derive(Clone)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianVars {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Snapshot of the current values.
    pub fn params(&self) -> GaussianParams {
        GaussianParams {
            mu: self.mu.value(),
            sigma: self.sigma.value(),
        }
    }
}

/// Diagonal Gaussian as plain values (mu, sigma), sigma strictly
/// positive.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() || mu.rank() != 1 {
            return Err(Error::shape(format!(
                "gaussian wants matching vectors, got mu {:?} sigma {:?}",
                mu.shape(),
                sigma.shape()
            )));
        }
        if sigma.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::domain("gaussian sigma must be strictly positive"));
        }
        Ok(GaussianParams { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams {
            mu: Tensor::zeros(&[dim]),
            sigma: Tensor::full(&[dim], 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// log N(z; mu, diag(sigma^2)).
    pub fn log_density(&self, z: &Tensor) -> Result<f64> {
        if z.shape() != self.mu.shape() {
            return Err(Error::shape(format!(
                "log_density wants {:?}, got {:?}",
                self.mu.shape(),
                z.shape()
            )));
        }
        let mut acc = 0.0;
        for ((&zv, &m), &s) in z.iter().zip(self.mu.iter()).zip(self.sigma.iter()) {
            let e = (zv - m) / s;
            acc += -HALF_LN_TWO_PI - s.ln() - 0.5 * e * e;
        }
        Ok(acc)
    }

    /// Reparameterized draw z = mu + eps * sigma with the prior log
    /// density of z.
    pub fn sample_with(&self, eps: &Tensor) -> Result<(Tensor, f64)> {
        if eps.shape() != self.mu.shape() {
            return Err(Error::shape(format!(
                "epsilon wants {:?}, got {:?}",
                self.mu.shape(),
                eps.shape()
            )));
        }
        let mut z = Vec::with_capacity(self.dim());
        let mut log_density = 0.0;
        for ((&e, &m), &s) in eps.iter().zip(self.mu.iter()).zip(self.sigma.iter()) {
            z.push(m + e * s);
            log_density += -HALF_LN_TWO_PI - s.ln() - 0.5 * e * e;
        }
        Ok((Tensor::from_vec(self.mu.shape(), z)?, log_density))
    }

    /// Closed-form KL( self || p ) between diagonal Gaussians.
    pub fn kl_diag(&self, p: &GaussianParams) -> Result<f64> {
        if self.dim() != p.dim() {
            return Err(Error::shape(format!(
                "KL dimension mismatch: {} vs {}",
                self.dim(),
                p.dim()
            )));
        }
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let (mq, sq) = (self.mu.data()[i], self.sigma.data()[i]);
            let (mp, sp) = (p.mu.data()[i], p.sigma.data()[i]);
            acc += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
        }
        Ok(acc)
    }
}

/// One reparameterized latent draw, on the tape.
///
/// `z = mu + epsilon * sigma` elementwise; gradients reach mu and sigma
/// only, never epsilon. The prior log density is evaluated at draw time
/// from the current parameter values.
pub struct LatentSample {
    pub z: Var,
    pub epsilon: Tensor,
    pub prior_log_density: f64,
}

/// Reparameterization trick: epsilon enters the graph as a constant.
pub fn sample(g: &Graph, params: &GaussianVars, epsilon: &Tensor) -> Result<LatentSample> {
    if epsilon.shape() != params.mu.value().shape() {
        return Err(Error::shape(format!(
            "epsilon shape {:?} does not match latent dim {}",
            epsilon.shape(),
            params.dim()
        )));
    }
    let eps = g.input(epsilon.clone());
    let z = params.mu.add(&eps.mul(&params.sigma)?)?;
    let mut log_density = 0.0;
    let sig = params.sigma.value();
    for (&e, &s) in epsilon.iter().zip(sig.iter()) {
        log_density += -HALF_LN_TWO_PI - s.ln() - 0.5 * e * e;
    }
    Ok(LatentSample {
        z,
        epsilon: epsilon.clone(),
        prior_log_density: log_density,
    })
}

/// Differentiable KL( q || p ) between diagonal Gaussians on the tape:
/// sum_i ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2.
pub fn kl_diag(q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
    if q.dim() != p.dim() {
        return Err(Error::shape(format!(
            "KL dimension mismatch: {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    let log_ratio = p.sigma.log().sub(&q.sigma.log())?;
    let num = q.sigma.square()?.add(&q.mu.sub(&p.mu)?.square()?)?;
    let quad = num.div(&p.sigma.square()?.mul_scalar(2.0))?;
    log_ratio.add(&quad)?.add_scalar(-0.5).sum(None)
}
