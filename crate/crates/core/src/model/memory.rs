//! Per-view feature memory, class centres and the centre-memory contrastive loss.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var, NORM_EPS};

/// Per-view class means of the memory rows, plus their concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters {
    /// `[K, d]`
    pub mu_long: Tensor,
    /// `[K, d]`
    pub mu_trans: Tensor,
    /// `[K, 2d]`, row `k` is `mu_long[k] ++ mu_trans[k]`.
    pub mu_cat: Tensor,
}

impl ClassCenters {
    pub fn from_views(mu_long: Tensor, mu_trans: Tensor) -> Result<Self> {
        if mu_long.shape() != mu_trans.shape() || mu_long.ndim() != 2 {
            return Err(Error::shape("class centers", mu_long.shape(), mu_trans.shape()));
        }
        let (k, d) = (mu_long.shape()[0], mu_long.shape()[1]);
        let mut cat = Vec::with_capacity(k * 2 * d);
        for i in 0..k {
            cat.extend_from_slice(mu_long.row(i));
            cat.extend_from_slice(mu_trans.row(i));
        }
        let mu_cat = Tensor::new(vec![k, 2 * d], cat)?;
        Ok(ClassCenters {
            mu_long,
            mu_trans,
            mu_cat,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.mu_long.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mu_long.shape()[1]
    }
}

/// One feature row per training sample and view.
///
/// Slot `j` belongs to the `j`-th entry of the index list passed to
/// [`MemoryBank::new`]; [`MemoryBank::slot`] maps dataset indices back.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub alpha: f64,
    pub tau: f64,
    pub num_classes: usize,
    indices: Vec<usize>,
    /// `(dataset index, slot)` sorted by index.
    lookup: Vec<(usize, usize)>,
    labels: Vec<usize>,
    m_long: Tensor,
    m_trans: Tensor,
}

impl MemoryBank {
    pub fn new(
        indices: Vec<usize>,
        labels: Vec<usize>,
        m_long: Tensor,
        m_trans: Tensor,
        num_classes: usize,
        alpha: f64,
        tau: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau {tau} must be positive")));
        }
        let n = indices.len();
        if labels.len() != n || m_long.ndim() != 2 || m_long.shape()[0] != n {
            return Err(Error::shape("memory bank", m_long.shape(), &[n]));
        }
        if m_long.shape() != m_trans.shape() {
            return Err(Error::shape("memory bank", m_long.shape(), m_trans.shape()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid("memory bank", format!("label {bad} >= {num_classes}")));
        }
        for k in 0..num_classes {
            if !labels.contains(&k) {
                return Err(Error::EmptyClass(k));
            }
        }
        let mut lookup: Vec<(usize, usize)> = indices.iter().enumerate().map(|(s, &i)| (i, s)).collect();
        lookup.sort_unstable();
        if lookup.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("memory bank", "duplicate sample index"));
        }
        Ok(MemoryBank {
            alpha,
            tau,
            num_classes,
            indices,
            lookup,
            labels,
            m_long,
            m_trans,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.m_long.shape()[1]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn long(&self) -> &Tensor {
        &self.m_long
    }

    pub fn trans(&self) -> &Tensor {
        &self.m_trans
    }

    /// Slot holding dataset sample `index`.
    pub fn slot(&self, index: usize) -> Option<usize> {
        self.lookup
            .binary_search_by_key(&index, |&(i, _)| i)
            .ok()
            .map(|p| self.lookup[p].1)
    }

    /// `m ← α·m + (1−α)·z` on slot `slot` for both views.
    pub fn ema_update(&mut self, slot: usize, z_long: &[f64], z_trans: &[f64]) -> Result<()> {
        let n = self.len();
        if slot >= n {
            return Err(Error::IndexOutOfRange { index: slot, len: n });
        }
        let d = self.dim();
        if z_long.len() != d || z_trans.len() != d {
            return Err(Error::shape("ema_update", &[z_long.len(), z_trans.len()], &[d]));
        }
        let a = self.alpha;
        for (bank, z) in [(&mut self.m_long, z_long), (&mut self.m_trans, z_trans)] {
            let row = &mut bank.data_mut()[slot * d..(slot + 1) * d];
            for (m, &zi) in row.iter_mut().zip(z) {
                *m = a * *m + (1.0 - a) * zi;
            }
        }
        Ok(())
    }

    /// Arithmetic mean of the rows of each class, per view.
    pub fn class_centers(&self) -> Result<ClassCenters> {
        let (k, d) = (self.num_classes, self.dim());
        let mut counts = vec![0usize; k];
        let mut long = vec![0.0; k * d];
        let mut trans = vec![0.0; k * d];
        for (j, &y) in self.labels.iter().enumerate() {
            counts[y] += 1;
            for (acc, v) in long[y * d..(y + 1) * d].iter_mut().zip(self.m_long.row(j)) {
                *acc += v;
            }
            for (acc, v) in trans[y * d..(y + 1) * d].iter_mut().zip(self.m_trans.row(j)) {
                *acc += v;
            }
        }
        for (y, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(Error::EmptyClass(y));
            }
            let inv = c as f64;
            long[y * d..(y + 1) * d].iter_mut().for_each(|v| *v /= inv);
            trans[y * d..(y + 1) * d].iter_mut().for_each(|v| *v /= inv);
        }
        ClassCenters::from_views(Tensor::new(vec![k, d], long)?, Tensor::new(vec![k, d], trans)?)
    }

    /// Mean over the batch of `ℓ_long + ℓ_trans`.
    pub fn cmcl_loss(
        &self,
        g: &mut Graph<'_>,
        centers: &ClassCenters,
        z_long: Var,
        z_trans: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let long = contrastive_view_loss(g, z_long, labels, &self.m_long, &self.labels, &centers.mu_long, self.tau)?;
        let trans = contrastive_view_loss(g, z_trans, labels, &self.m_trans, &self.labels, &centers.mu_trans, self.tau)?;
        let both = g.add(long, trans)?;
        g.mean(both)
    }
}

/// Unit rows of `t`; a row below the norm threshold is an error.
pub(crate) fn normalized_rows(t: &Tensor, context: &'static str) -> Result<Tensor> {
    let d = t.shape()[1];
    let mut out = t.clone();
    for (row, chunk) in out.data_mut().chunks_mut(d).enumerate() {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_EPS {
            return Err(Error::ZeroNorm { context, row });
        }
        chunk.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Per-sample loss `[B]` for one view.
///
/// For sample `i` of class `k`, with `s(a, b)` the cosine similarity:
/// `ℓ = −log( e^{s(z, μ_k)/τ} / (e^{s(z, μ_k)/τ} + Σ_{j: y_j ≠ k} e^{s(z, m_j)/τ}) )`.
/// `bank` and `centers` are treated as constants.
pub fn contrastive_view_loss(
    g: &mut Graph<'_>,
    z: Var,
    labels: &[usize],
    bank: &Tensor,
    bank_labels: &[usize],
    centers: &Tensor,
    tau: f64,
) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cmcl", &shape, &[labels.len()]));
    }
    let (b, d) = (shape[0], shape[1]);
    if bank.shape()[1] != d || centers.shape()[1] != d || bank.shape()[0] != bank_labels.len() {
        return Err(Error::shape("cmcl", bank.shape(), centers.shape()));
    }
    let k = centers.shape()[0];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid("cmcl", format!("label {bad} >= {k} centers")));
    }
    let n = bank_labels.len();

    let zn = g.l2_normalize(z, 1)?;
    if let Some(&row) = g.degenerate_rows(zn).first() {
        return Err(Error::ZeroNorm { context: "cmcl", row });
    }
    let bank_n = normalized_rows(bank, "memory row")?;
    let centers_n = normalized_rows(centers, "class center")?;

    let mut pos_rows = Vec::with_capacity(b * d);
    for &y in labels {
        pos_rows.extend_from_slice(centers_n.row(y));
    }
    let pos_c = g.constant(Tensor::new(vec![b, d], pos_rows)?);
    let prod = g.mul(zn, pos_c)?;
    let pos = g.sum_axis(prod, 1)?;
    let pos = g.scale(pos, 1.0 / tau)?;
    let pos_col = g.reshape(pos, &[b, 1])?;

    let bank_t = g.constant(bank_n.transposed());
    let sims = g.matmul(zn, bank_t)?;
    let sims = g.scale(sims, 1.0 / tau)?;
    let logits = g.concat(&[pos_col, sims], 1)?;

    let mut mask = Vec::with_capacity(b * (n + 1));
    for &y in labels {
        mask.push(true);
        mask.extend(bank_labels.iter().map(|&yj| yj != y));
    }
    let lse = g.logsumexp_masked(logits, &mask)?;
    g.sub(lse, pos)
}

/// `log Σ exp(s)` by max subtraction. Empty input gives `-inf`.
pub fn logsumexp_stable(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}
