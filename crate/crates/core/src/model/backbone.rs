//! Four-stage convolutional encoder.
//!
//! Stage `i` is `conv3×3/stride 2 → relu → conv3×3 → relu` and doubles the
//! channel count, so the pyramid is `c, 2c, 4c, 8c` channels at `H/2 … H/16`.
//! The representation feature is `normalize(W·GAP(stage4) + b)`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::layers::{Conv, Init, Linear};
use crate::numerics::{Graph, ParamStore, Var};

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Input channels including the spacing plane.
    pub in_channels: usize,
    pub base_channels: usize,
    pub proj_dim: usize,
    pub image_size: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels {} < 4", self.base_channels)));
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by 16",
                self.image_size
            )));
        }
        if self.in_channels == 0 || self.proj_dim == 0 {
            return Err(Error::Config("in_channels and proj_dim must be positive".into()));
        }
        Ok(())
    }

    /// `(channels, side)` of stage `i`.
    pub fn stage_shape(&self, i: usize) -> (usize, usize) {
        (self.base_channels << i, self.image_size >> (i + 1))
    }

    pub fn final_channels(&self) -> usize {
        self.base_channels << (NUM_STAGES - 1)
    }
}

/// Per-stage feature maps plus the unit-norm representation feature `z`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: Vec<Var>,
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<[Conv; 2]>,
    projection: Linear,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &BackboneConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = config.in_channels;
        for i in 0..NUM_STAGES {
            let (cout, _) = config.stage_shape(i);
            let down = Conv::new(store, &format!("{prefix}.stage{}.conv1", i + 1), cin, cout, 2, rng)?;
            let same = Conv::new(store, &format!("{prefix}.stage{}.conv2", i + 1), cout, cout, 1, rng)?;
            stages.push([down, same]);
            cin = cout;
        }
        let projection = Linear::new(
            store,
            &format!("{prefix}.projection"),
            config.final_channels(),
            config.proj_dim,
            Init::Xavier,
            rng,
        )?;
        Ok(Backbone {
            config: config.clone(),
            stages,
            projection,
        })
    }

    /// `x: [B, C_in + 1, H, W]`.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<FeaturePyramid> {
        let c = &self.config;
        let want = [c.in_channels, c.image_size, c.image_size];
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape("encode", &shape, &want));
        }
        let mut h = x;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for [down, same] in &self.stages {
            h = down.forward(g, h)?;
            h = g.relu(h)?;
            h = same.forward(g, h)?;
            h = g.relu(h)?;
            stages.push(h);
        }
        let pooled = g.global_avg_pool(h)?;
        let projected = self.projection.forward(g, pooled)?;
        let z = g.l2_normalize(projected, 1)?;
        if let Some(&row) = g.degenerate_rows(z).first() {
            return Err(Error::ZeroNorm {
                context: "encode",
                row,
            });
        }
        Ok(FeaturePyramid { stages, z })
    }
}
