//! Parameterized building blocks shared by the networks.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

/// Negative slope of every LeakyReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl ConvLayer {
    /// He-initialized `k x k` convolution with zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self::with_std(store, name, cin, cout, k, dilation, std, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], std, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        Self { weight, bias, dilation }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.dilation)
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, n: usize, m: usize, rng: &mut R) -> Self {
        Self::with_std(store, name, n, m, (2.0 / n as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        m: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[n, m], std, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[m]), true);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], p[self.bias])
    }
}

/// Convolutions each followed by a LeakyReLU.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

impl ConvStack {
    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            let y = layer.forward(g, p, x)?;
            x = g.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(x)
    }
}
