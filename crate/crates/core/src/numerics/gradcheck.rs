//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates forward values, so it shares no
//! code with the backward rules it checks.
//!
//! A central difference is meaningless when the stencil straddles a kink
//! (a relu crossing zero, a max-pool winner changing). Such coordinates are
//! detected through [`Graph::branch_signature`] and counted as skipped
//! rather than compared.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so that coordinates with a
    /// vanishing gradient are compared absolutely. Scaled by `max(1, |f|)`
    /// because central-difference round-off grows with the loss magnitude.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose stencil crossed a kink.
    pub skipped: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn record(&mut self, tensor: &str, coord: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(Mismatch {
                tensor: tensor.to_string(),
                coord,
                analytic,
                numeric,
            });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Checks `∂f/∂inputs` where `f` maps leaf variables to a scalar.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], track: bool| -> Result<(Graph<'static>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(inputs, true)?;
    let floor = opts.floor * g.value(out).item().abs().max(1.0);
    let branches = g.branch_signature();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for c in coords(input.len(), opts, i as u64) {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let (g, _, o) = eval(&work, false)?;
            let (plus, kink_plus) = (g.value(o).item(), g.branch_signature() != branches);
            work[i].data_mut()[c] = orig - opts.step;
            let (g, _, o) = eval(&work, false)?;
            let (minus, kink_minus) = (g.value(o).item(), g.branch_signature() != branches);
            work[i].data_mut()[c] = orig;
            if kink_plus || kink_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.record(&format!("input{i}"), c, analytic[i][c], numeric, floor);
        }
    }
    Ok(report)
}

/// Checks `∂f/∂θ` for the parameters `ids` of `store` (all when empty).
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let ids: Vec<ParamId> = if ids.is_empty() { store.ids().collect() } else { ids.to_vec() };
    let (analytic, floor, branches) = {
        let mut g = Graph::with_params(store, true);
        let out = f(&mut g)?;
        let floor = opts.floor * g.value(out).item().abs().max(1.0);
        let branches = g.branch_signature();
        g.backward(out)?;
        (g.param_grads(), floor, branches)
    };
    let analytic_for = |id: ParamId| analytic.iter().find(|(p, _)| *p == id).map(|(_, g)| g);

    let value = |s: &ParamStore| -> Result<(f64, bool)> {
        let mut g = Graph::with_params(s, false);
        let out = f(&mut g)?;
        Ok((g.value(out).item(), g.branch_signature() != branches))
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for &id in &ids {
        let len = store.value(id).len();
        let name = store.get(id).name.clone();
        for c in coords(len, opts, id.index() as u64) {
            let orig = store.value(id).data()[c];
            work.get_mut(id).value.data_mut()[c] = orig + opts.step;
            let (plus, kink_plus) = value(&work)?;
            work.get_mut(id).value.data_mut()[c] = orig - opts.step;
            let (minus, kink_minus) = value(&work)?;
            work.get_mut(id).value.data_mut()[c] = orig;
            if kink_plus || kink_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic_for(id).map_or(0.0, |g| g[c]);
            report.record(&name, c, a, numeric, floor);
        }
    }
    Ok(report)
}
