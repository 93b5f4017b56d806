//! Cascaded down-sampling attention blocks and the cross-view fusion.
//!
//! One block maps `[B, C, H, W]` to `[B, 2C, H/2, W/2]`:
//! 2×2 max-pool, split the channels into `P` groups, flatten each group to a
//! token of dimension `D = (C/P)·(H/2)·(W/2)`, run multi-head self-attention
//! with a residual, then a per-token feed-forward map `D → 2D → 2D` whose
//! output is reshaped back to a map with twice the channels.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::backbone::{BackboneConfig, FeaturePyramid, NUM_STAGES};
use crate::model::layers::{Init, Linear};
use crate::numerics::{Graph, ParamStore, Var};

/// Initial gain of the attention output and the last FFN layer. Without any
/// normalisation the cascade otherwise amplifies its input at every stage.
pub const BRANCH_GAIN: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct DsamStage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patches: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl DsamStage {
    /// Block for inputs of shape `[·, channels, height, width]`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        (height, width): (usize, usize),
        patches: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if patches == 0 || channels % patches != 0 {
            return Err(Error::Config(format!(
                "{prefix}: {channels} channels are not divisible into {patches} patches"
            )));
        }
        if height % 2 != 0 || width % 2 != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!("{prefix}: odd spatial size {height}x{width}")));
        }
        let d = channels / patches * (height / 2) * (width / 2);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{prefix}: token dim {d} is not divisible by {heads} heads"
            )));
        }
        let mut lin = |name: &str, i, o, init| Linear::new(store, &format!("{prefix}.{name}"), i, o, init, rng);
        Ok(DsamStage {
            channels,
            height,
            width,
            patches,
            heads,
            q: lin("attn.q", d, d, Init::Xavier)?,
            k: lin("attn.k", d, d, Init::Xavier)?,
            v: lin("attn.v", d, d, Init::Xavier)?,
            o: lin("attn.o", d, d, Init::ScaledXavier(BRANCH_GAIN))?,
            ffn_in: lin("ffn.fc1", d, 2 * d, Init::He)?,
            ffn_out: lin("ffn.fc2", 2 * d, 2 * d, Init::ScaledXavier(BRANCH_GAIN))?,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.channels / self.patches * (self.height / 2) * (self.width / 2)
    }

    pub fn output_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 2 * self.channels, self.height / 2, self.width / 2]
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [self.channels, self.height, self.width] {
            return Err(Error::shape("dsam", &shape, &[self.channels, self.height, self.width]));
        }
        let b = shape[0];
        let (p, d, nh) = (self.patches, self.token_dim(), self.heads);
        let dh = d / nh;

        let pooled = g.max_pool2d(x, 2, 2)?;
        let tokens = g.reshape(pooled, &[b * p, d])?;

        let split_heads = |g: &mut Graph<'_>, proj: &Linear| -> Result<Var> {
            let t = proj.forward(g, tokens)?;
            let t = g.reshape(t, &[b, p, nh, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[b * nh, p, dh])
        };
        let q = split_heads(g, &self.q)?;
        let k = split_heads(g, &self.k)?;
        let v = split_heads(g, &self.v)?;

        let a = g.attention(q, k, v)?;
        let a = g.reshape(a, &[b, nh, p, dh])?;
        let a = g.permute(a, &[0, 2, 1, 3])?;
        let a = g.reshape(a, &[b * p, d])?;
        let a = self.o.forward(g, a)?;
        let y = g.add(tokens, a)?;

        let h = self.ffn_in.forward(g, y)?;
        let h = g.relu(h)?;
        let out = self.ffn_out.forward(g, h)?;
        g.reshape(out, &self.output_shape(b))
    }
}

/// Fused cross-view feature.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeature {
    pub long: Var,
    pub trans: Var,
    /// `long ++ trans` along the feature axis.
    pub z_f: Var,
}

#[derive(Clone, Debug)]
pub struct DsamCascade {
    pub stages: Vec<DsamStage>,
}

impl DsamCascade {
    /// One block per backbone stage; both views share all blocks.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        backbone: &BackboneConfig,
        patches: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let stages = (0..NUM_STAGES)
            .map(|i| {
                let (c, side) = backbone.stage_shape(i);
                DsamStage::new(store, &format!("{prefix}.stage{}", i + 1), c, (side, side), patches, heads, rng)
            })
            .collect::<Result<_>>()?;
        Ok(DsamCascade { stages })
    }

    /// Width of the fused vector for one view.
    pub fn view_dim(&self) -> usize {
        2 * self.stages.last().map_or(0, |s| s.channels)
    }

    /// `GAP(h₄)` where `h₁ = S₁(x₁)` and `hᵢ = Sᵢ(hᵢ₋₁ + xᵢ)`.
    pub fn fuse_view(&self, g: &mut Graph<'_>, pyramid: &[Var]) -> Result<Var> {
        if pyramid.len() != self.stages.len() {
            return Err(Error::invalid(
                "cascade",
                format!("pyramid has {} levels, expected {}", pyramid.len(), self.stages.len()),
            ));
        }
        let mut h = self.stages[0].forward(g, pyramid[0])?;
        for (stage, &x) in self.stages.iter().zip(pyramid).skip(1) {
            if g.shape(h) != g.shape(x) {
                let (a, b) = (g.shape(h).to_vec(), g.shape(x).to_vec());
                return Err(Error::shape("cascade", &a, &b));
            }
            let sum = g.add(h, x)?;
            h = stage.forward(g, sum)?;
        }
        g.global_avg_pool(h)
    }

    pub fn forward(&self, g: &mut Graph<'_>, long: &FeaturePyramid, trans: &FeaturePyramid) -> Result<FusedFeature> {
        let l = self.fuse_view(g, &long.stages)?;
        let t = self.fuse_view(g, &trans.stages)?;
        let z_f = g.concat(&[l, t], 1)?;
        Ok(FusedFeature { long: l, trans: t, z_f })
    }
}

/// Fusion without the cascade: `GAP(stage₄_long) ++ GAP(stage₄_trans)`.
pub fn late_fusion(g: &mut Graph<'_>, long: &FeaturePyramid, trans: &FeaturePyramid) -> Result<FusedFeature> {
    let last = |p: &FeaturePyramid| {
        p.stages
            .last()
            .copied()
            .ok_or_else(|| Error::invalid("late fusion", "empty pyramid"))
    };
    let l = g.global_avg_pool(last(long)?)?;
    let t = g.global_avg_pool(last(trans)?)?;
    let z_f = g.concat(&[l, t], 1)?;
    Ok(FusedFeature { long: l, trans: t, z_f })
}
