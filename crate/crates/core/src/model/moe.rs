//! Similarity-gated mixture of class experts and the final classifier.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::layers::{Init, Linear};
use crate::model::memory::{normalized_rows, ClassCenters};
use crate::numerics::{Graph, ParamStore, Var};

/// `softmax_k cos(z_long ++ z_trans, μ_k^cat)`, shape `[B, K]`.
///
/// The centres are constants. With `stop_gradient` the concatenated feature is
/// detached as well, so the gate contributes no gradient at all.
pub fn gate_weights(
    g: &mut Graph<'_>,
    z_long: Var,
    z_trans: Var,
    centers: &ClassCenters,
    stop_gradient: bool,
) -> Result<Var> {
    let cat = g.concat(&[z_long, z_trans], 1)?;
    let cat = if stop_gradient { g.detach(cat) } else { cat };
    let width = g.shape(cat)[1];
    if width != centers.mu_cat.shape()[1] {
        return Err(Error::shape("gate", g.shape(cat), centers.mu_cat.shape()));
    }
    let unit = g.l2_normalize(cat, 1)?;
    if let Some(&row) = g.degenerate_rows(unit).first() {
        return Err(Error::ZeroNorm { context: "gate", row });
    }
    let mu = normalized_rows(&centers.mu_cat, "gate center")?;
    let mu_t = g.constant(mu.transposed());
    let sims = g.matmul(unit, mu_t)?;
    g.softmax(sims, 1)
}

/// Two-layer perceptron `in → hidden → out` with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Expert {
    pub hidden: Linear,
    pub output: Linear,
}

impl Expert {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        self.output.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct MoeHead {
    pub experts: Vec<Expert>,
    pub classifier: Linear,
    pub in_dim: usize,
}

impl MoeHead {
    /// `num_experts` experts of width `in_dim → in_dim → in_dim/2`, then a
    /// linear classifier to `num_classes` logits.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        num_experts: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_experts == 0 || in_dim < 2 {
            return Err(Error::Config(format!(
                "mixture head needs at least one expert and input width >= 2 (got {num_experts}, {in_dim})"
            )));
        }
        let out_dim = in_dim / 2;
        let experts = (0..num_experts)
            .map(|k| {
                Ok(Expert {
                    hidden: Linear::new(store, &format!("{prefix}.expert{k}.fc1"), in_dim, in_dim, Init::He, rng)?,
                    output: Linear::new(store, &format!("{prefix}.expert{k}.fc2"), in_dim, out_dim, Init::Xavier, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let classifier = Linear::new(store, &format!("{prefix}.classifier"), out_dim, num_classes, Init::Xavier, rng)?;
        Ok(MoeHead {
            experts,
            classifier,
            in_dim,
        })
    }

    /// `classifier(Σ_k w_k · expert_k(z_f))`. `weights` is `[B, K]`; `None`
    /// is only allowed for a single expert, which then gets weight 1.
    pub fn forward(&self, g: &mut Graph<'_>, z_f: Var, weights: Option<Var>) -> Result<Var> {
        let shape = g.shape(z_f).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape("moe", &shape, &[self.in_dim]));
        }
        let b = shape[0];
        let mixed = match weights {
            None if self.experts.len() == 1 => self.experts[0].forward(g, z_f)?,
            None => {
                return Err(Error::invalid("moe", "gate weights are required for more than one expert"));
            }
            Some(w) => {
                let k = self.experts.len();
                if g.shape(w) != [b, k] {
                    let ws = g.shape(w).to_vec();
                    return Err(Error::shape("moe", &ws, &[b, k]));
                }
                let e = self.in_dim / 2;
                let outs = self
                    .experts
                    .iter()
                    .map(|ex| {
                        let o = ex.forward(g, z_f)?;
                        g.reshape(o, &[b, 1, e])
                    })
                    .collect::<Result<Vec<_>>>()?;
                let stacked = g.concat(&outs, 1)?;
                let w = g.reshape(w, &[b, 1, k])?;
                let mixed = g.matmul(w, stacked)?;
                g.reshape(mixed, &[b, e])?
            }
        };
        self.classifier.forward(g, mixed)
    }
}
