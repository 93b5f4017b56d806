//! The dual-view network: shared encoder, attention cascade, gated experts.

pub mod backbone;
pub mod dsam;
mod layers;
pub mod memory;
pub mod moe;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

pub use backbone::{Backbone, BackboneConfig, FeaturePyramid};
pub use dsam::{late_fusion, DsamCascade, DsamStage, FusedFeature};
pub use layers::{Conv, Linear};
pub use memory::{contrastive_view_loss, logsumexp_stable, ClassCenters, MemoryBank};
pub use moe::{gate_weights, Expert, MoeHead};

/// Architecture knobs that are not switched by ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub proj_dim: usize,
    pub patches: usize,
    pub heads: usize,
    /// One encoder for both views. `false` gives each view its own weights.
    pub shared_backbone: bool,
    /// Detach the concatenated feature before the gate.
    pub gate_stop_gradient: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 8,
            proj_dim: 128,
            patches: 4,
            heads: 2,
            shared_backbone: true,
            gate_stop_gradient: false,
        }
    }
}

/// Which views reach the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewMode {
    #[default]
    Both,
    /// Longitudinal only; its stream is duplicated into the transverse slot.
    Long,
    /// Transverse only, duplicated into the longitudinal slot.
    Trans,
}

impl ViewMode {
    pub fn name(self) -> &'static str {
        match self {
            ViewMode::Both => "both",
            ViewMode::Long => "long",
            ViewMode::Trans => "trans",
        }
    }
}

/// Everything that fixes the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub model: ModelConfig,
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub use_dsam: bool,
    pub use_moe: bool,
}

impl Architecture {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            base_channels: self.model.base_channels,
            proj_dim: self.model.proj_dim,
            image_size: self.image_size,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub backbone_long: Backbone,
    /// Present only without weight sharing.
    pub backbone_trans: Option<Backbone>,
    pub dsam: Option<DsamCascade>,
    pub head: MoeHead,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub long: FeaturePyramid,
    pub trans: FeaturePyramid,
    pub fused: FusedFeature,
    pub gate: Option<Var>,
    pub logits: Var,
}

impl Model {
    /// Registers all parameters in `store` under `backbone.*`, `dsam.*` and `head.*`.
    pub fn new(store: &mut ParamStore, arch: &Architecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bcfg = arch.backbone();
        bcfg.validate()?;
        if arch.model.patches == 0 || bcfg.base_channels % arch.model.patches != 0 {
            return Err(Error::Config(format!(
                "base_channels {} is not divisible by patches {}",
                bcfg.base_channels, arch.model.patches
            )));
        }
        if arch.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let (backbone_long, backbone_trans) = if arch.model.shared_backbone {
            (Backbone::new(store, "backbone", &bcfg, rng)?, None)
        } else {
            (
                Backbone::new(store, "backbone.long", &bcfg, rng)?,
                Some(Backbone::new(store, "backbone.trans", &bcfg, rng)?),
            )
        };
        let dsam = if arch.use_dsam {
            Some(DsamCascade::new(store, "dsam", &bcfg, arch.model.patches, arch.model.heads, rng)?)
        } else {
            None
        };
        let view_dim = dsam.as_ref().map_or(bcfg.final_channels(), DsamCascade::view_dim);
        let experts = if arch.use_moe { arch.num_classes } else { 1 };
        let head = MoeHead::new(store, "head", 2 * view_dim, experts, arch.num_classes, rng)?;
        Ok(Model {
            arch: arch.clone(),
            backbone_long,
            backbone_trans,
            dsam,
            head,
        })
    }

    pub fn fused_dim(&self) -> usize {
        self.head.in_dim
    }

    fn backbone_for(&self, trans: bool) -> &Backbone {
        match (&self.backbone_trans, trans) {
            (Some(b), true) => b,
            _ => &self.backbone_long,
        }
    }

    /// Encodes the views selected by `mode`; a missing view reuses the
    /// present view's pyramid.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        x_long: Option<Var>,
        x_trans: Option<Var>,
        mode: ViewMode,
    ) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let need = |x: Option<Var>, which| x.ok_or_else(|| Error::invalid("encode", format!("missing {which} view")));
        match mode {
            ViewMode::Both => {
                let l = self.backbone_for(false).encode(g, need(x_long, "long")?)?;
                let t = self.backbone_for(true).encode(g, need(x_trans, "trans")?)?;
                Ok((l, t))
            }
            ViewMode::Long => {
                let l = self.backbone_for(false).encode(g, need(x_long, "long")?)?;
                Ok((l.clone(), l))
            }
            ViewMode::Trans => {
                let t = self.backbone_for(true).encode(g, need(x_trans, "trans")?)?;
                Ok((t.clone(), t))
            }
        }
    }

    pub fn fuse(&self, g: &mut Graph<'_>, long: &FeaturePyramid, trans: &FeaturePyramid) -> Result<FusedFeature> {
        match &self.dsam {
            Some(c) => c.forward(g, long, trans),
            None => late_fusion(g, long, trans),
        }
    }

    /// Gate (when enabled), fusion and head on already encoded views.
    pub fn head_forward(
        &self,
        g: &mut Graph<'_>,
        long: FeaturePyramid,
        trans: FeaturePyramid,
        centers: Option<&ClassCenters>,
    ) -> Result<ForwardOutput> {
        let gate = if self.arch.use_moe {
            let centers = centers.ok_or_else(|| Error::invalid("forward", "class centers are required by the gate"))?;
            Some(gate_weights(g, long.z, trans.z, centers, self.arch.model.gate_stop_gradient)?)
        } else {
            None
        };
        let fused = self.fuse(g, &long, &trans)?;
        let logits = self.head.forward(g, fused.z_f, gate)?;
        Ok(ForwardOutput {
            long,
            trans,
            fused,
            gate,
            logits,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x_long: Option<Var>,
        x_trans: Option<Var>,
        mode: ViewMode,
        centers: Option<&ClassCenters>,
    ) -> Result<ForwardOutput> {
        let (l, t) = self.encode(g, x_long, x_trans, mode)?;
        self.head_forward(g, l, t, centers)
    }
}
