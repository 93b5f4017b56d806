use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// U(±√(6/fan_in)), for layers followed by a ReLU.
    He,
    /// U(±√(6/(fan_in + fan_out))).
    Xavier,
    /// Xavier bound times a gain.
    ScaledXavier(f64),
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// Affine map `x·W + b` on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = match init {
            Init::He => (6.0 / in_dim as f64).sqrt(),
            Init::Xavier => (6.0 / (in_dim + out_dim) as f64).sqrt(),
            Init::ScaledXavier(gain) => gain * (6.0 / (in_dim + out_dim) as f64).sqrt(),
        };
        let w = store.add(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w)?, g.param(self.b)?);
        g.linear(x, w, b)
    }
}

/// 3×3 convolution with padding 1.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (cin * 9) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[cout, cin, 3, 3], bound))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv { w, b, stride })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w)?, g.param(self.b)?);
        g.conv2d(x, w, Some(b), self.stride, 1)
    }
}
