mod common;

use common::{cosine, rng, small_model, uniform, unit_rows};
use dualview_core::model::{
    contrastive_view_loss, gate_weights, late_fusion, logsumexp_stable, Architecture, Backbone, BackboneConfig,
    ClassCenters, DsamCascade, DsamStage, MemoryBank, Model, MoeHead, ViewMode,
};
use dualview_core::numerics::gradcheck::{check_inputs, check_params, GradCheckOptions};
use dualview_core::{Error, Graph, ParamStore, Tensor};
use rand::Rng;

fn backbone_cfg(c: usize, size: usize) -> BackboneConfig {
    BackboneConfig {
        in_channels: 2,
        base_channels: c,
        proj_dim: 128,
        image_size: size,
    }
}

fn arch(use_dsam: bool, use_moe: bool) -> Architecture {
    Architecture {
        model: small_model(),
        in_channels: 2,
        image_size: 32,
        num_classes: 3,
        use_dsam,
        use_moe,
    }
}

// ---------------------------------------------------------------- backbone

#[test]
fn indivisible_image_size_fails_at_construction() {
    let mut store = ParamStore::new();
    let err = Backbone::new(&mut store, "b", &backbone_cfg(8, 24), &mut rng(0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(matches!(Backbone::new(&mut store, "c", &backbone_cfg(2, 32), &mut rng(0)), Err(Error::Config(_))));
}

#[test]
fn duplicated_inputs_encode_identically() {
    let mut store = ParamStore::new();
    let b = Backbone::new(&mut store, "b", &backbone_cfg(4, 16), &mut rng(1)).unwrap();
    let one = uniform(&mut rng(2), &[1, 2, 16, 16]);
    let two = Tensor::new(vec![2, 2, 16, 16], [one.data(), one.data()].concat()).unwrap();
    let mut g = Graph::with_params(&store, false);
    let x = g.constant(two);
    let z = b.encode(&mut g, x).unwrap().z;
    let z = g.value(z);
    assert_eq!(z.row(0), z.row(1));
}

#[test]
fn representation_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let b = Backbone::new(&mut store, "b", &backbone_cfg(4, 16), &mut rng(3)).unwrap();
    let x = uniform(&mut rng(4), &[2, 2, 16, 16]);
    let probe = uniform(&mut rng(5), &[2, 128]);
    let first = store.find("b.stage1.conv1.weight").unwrap();
    let report = check_params(
        &store,
        &[first],
        |g| {
            let xv = g.constant(x.clone());
            let z = b.encode(g, xv)?.z;
            let p = g.constant(probe.clone());
            let prod = g.mul(z, p)?;
            g.sum(prod)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
    assert_eq!(report.checked, 4 * 2 * 9);
}

// ---------------------------------------------------------------- memory

/// Direct evaluation of the per-sample loss.
fn loss_oracle(z: &[f64], y: usize, bank: &Tensor, labels: &[usize], centers: &Tensor, tau: f64) -> f64 {
    let pos = cosine(z, centers.row(y)) / tau;
    let mut scores = vec![pos];
    for (j, &yj) in labels.iter().enumerate() {
        if yj != y {
            scores.push(cosine(z, bank.row(j)) / tau);
        }
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln() - pos
}

fn view_loss(z: &Tensor, labels: &[usize], bank: &Tensor, bank_labels: &[usize], centers: &Tensor, tau: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let zv = g.leaf(z.clone(), true);
    let l = contrastive_view_loss(&mut g, zv, labels, bank, bank_labels, centers, tau).unwrap();
    g.value(l).data().to_vec()
}

fn random_memory(seed: u64, n: usize, d: usize, k: usize) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..n).map(|j| if j < k { j } else { r.random_range(0..k) }).collect();
    (unit_rows(&mut r, n, d), labels)
}

#[test]
fn loss_matches_direct_evaluation() {
    for seed in 0..10 {
        let (bank, bank_labels) = random_memory(seed, 12, 5, 3);
        let mut r = rng(seed + 100);
        let centers = uniform(&mut r, &[3, 5]);
        let z = unit_rows(&mut r, 4, 5);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
        let tau = r.random_range(0.05..1.0);
        let got = view_loss(&z, &labels, &bank, &bank_labels, &centers, tau);
        for i in 0..4 {
            let want = loss_oracle(z.row(i), labels[i], &bank, &bank_labels, &centers, tau);
            assert!((got[i] - want).abs() <= 1e-10 * want.abs().max(1.0), "{} vs {want}", got[i]);
        }
    }
}

/// Gram-Schmidt on a random matrix.
fn random_rotation(seed: u64, d: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let p = common::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = common::dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn rotate(t: &Tensor, q: &[Vec<f64>]) -> Tensor {
    let d = t.shape()[1];
    let mut out = Vec::with_capacity(t.len());
    for i in 0..t.shape()[0] {
        out.extend((0..d).map(|a| common::dot(&q[a], t.row(i))));
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

#[test]
fn loss_is_rotation_invariant() {
    for seed in 0..5 {
        let (bank, bl) = random_memory(seed, 10, 6, 3);
        let mut r = rng(seed + 7);
        let centers = uniform(&mut r, &[3, 6]);
        let z = unit_rows(&mut r, 3, 6);
        let labels = [0, 1, 2];
        let q = random_rotation(seed + 50, 6);
        let a = view_loss(&z, &labels, &bank, &bl, &centers, 0.1);
        let b = view_loss(&rotate(&z, &q), &labels, &rotate(&bank, &q), &bl, &rotate(&centers, &q), 0.1);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
    }
}

#[test]
fn temperature_scaling_equals_similarity_scaling() {
    // τ·t on cosines s is the same as τ on cosines s/t; the oracle takes the
    // second route explicitly.
    let (bank, bl) = random_memory(3, 9, 4, 3);
    let mut r = rng(8);
    let centers = unit_rows(&mut r, 3, 4);
    let z = unit_rows(&mut r, 2, 4);
    let (tau, t) = (0.2, 3.5);
    let got = view_loss(&z, &[1, 2], &bank, &bl, &centers, tau * t);
    for (i, &y) in [1usize, 2].iter().enumerate() {
        let pos = cosine(z.row(i), centers.row(y)) / t / tau;
        let mut scores = vec![pos];
        scores.extend((0..9).filter(|&j| bl[j] != y).map(|j| cosine(z.row(i), bank.row(j)) / t / tau));
        let want = logsumexp_stable(&scores) - pos;
        assert!((got[i] - want).abs() <= 1e-10);
    }
}

#[test]
fn adding_a_negative_increases_the_loss() {
    let mut r = rng(9);
    let centers = unit_rows(&mut r, 2, 4);
    let z = unit_rows(&mut r, 1, 4);
    let rows = unit_rows(&mut r, 8, 4);
    let mut labels = vec![0, 1];
    let mut prev = view_loss(&z, &[0], &Tensor::new(vec![2, 4], rows.data()[..8].to_vec()).unwrap(), &labels, &centers, 0.5)[0];
    assert!(prev > 0.0);
    for n in 3..=8 {
        labels.push(1);
        let bank = Tensor::new(vec![n, 4], rows.data()[..n * 4].to_vec()).unwrap();
        let l = view_loss(&z, &[0], &bank, &labels, &centers, 0.5)[0];
        assert!(l > prev, "{n} negatives: {l} <= {prev}");
        prev = l;
    }
}

#[test]
fn loss_shrinks_as_the_sample_moves_to_its_center() {
    // e₁ is the centre, the negative sits at −e₁; z rotates from e₂ to e₁.
    let centers = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    let bank = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    let mut prev = f64::INFINITY;
    for step in 0..=20 {
        let a = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 20.0);
        let z = Tensor::from_rows(&[vec![a.cos(), a.sin()]]).unwrap();
        let l = view_loss(&z, &[0], &bank, &[0, 1], &centers, 0.5)[0];
        assert!(l < prev && l > 0.0);
        prev = l;
    }
}

#[test]
fn loss_gradient_reaches_the_features() {
    let (bank, bl) = random_memory(1, 6, 3, 2);
    let centers = unit_rows(&mut rng(3), 2, 3);
    let z0 = unit_rows(&mut rng(2), 2, 3);
    let report = check_inputs(
        &[z0],
        |g, v| {
            let l = contrastive_view_loss(g, v[0], &[0, 1], &bank, &bl, &centers, 0.3)?;
            g.sum(l)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn zero_feature_is_an_error() {
    let (bank, bl) = random_memory(1, 6, 3, 2);
    let centers = unit_rows(&mut rng(3), 2, 3);
    let mut g = Graph::new();
    let z = g.leaf(Tensor::zeros(&[1, 3]), true);
    let err = contrastive_view_loss(&mut g, z, &[0], &bank, &bl, &centers, 0.3).unwrap_err();
    assert!(matches!(err, Error::ZeroNorm { row: 0, .. }));
}

#[test]
fn center_order_does_not_depend_on_member_order() {
    let (rows, labels) = random_memory(5, 10, 4, 3);
    let idx: Vec<usize> = (0..10).collect();
    let a = MemoryBank::new(idx.clone(), labels.clone(), rows.clone(), rows.clone(), 3, 0.5, 0.1).unwrap();
    let perm = [3, 9, 0, 7, 1, 8, 2, 6, 4, 5];
    let prow: Vec<f64> = perm.iter().flat_map(|&j| rows.row(j).to_vec()).collect();
    let prow = Tensor::new(vec![10, 4], prow).unwrap();
    let plab: Vec<usize> = perm.iter().map(|&j| labels[j]).collect();
    let b = MemoryBank::new(idx, plab, prow.clone(), prow, 3, 0.5, 0.1).unwrap();
    let (ca, cb) = (a.class_centers().unwrap(), b.class_centers().unwrap());
    assert!(ca.mu_long.max_abs_diff(&cb.mu_long) <= 1e-15);
}

/// log Σ exp by summing exp(s − m) with compensated (Neumaier) addition.
fn lse_compensated(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for s in scores {
        let term = (s - m).exp();
        let t = sum + term;
        comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
        sum = t;
    }
    m + (sum + comp).ln()
}

#[test]
fn stabilised_logsumexp_matches_compensated_sum() {
    let mut r = rng(11);
    for _ in 0..200 {
        let n = r.random_range(1..300);
        let scale = [1.0, 100.0, 1e4][r.random_range(0..3)];
        let s: Vec<f64> = (0..n).map(|_| r.random_range(-scale..scale)).collect();
        let (a, b) = (logsumexp_stable(&s), lse_compensated(&s));
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
    }
}

// ---------------------------------------------------------------- attention cascade

#[test]
fn dsam_gradient_on_a_small_input() {
    let mut store = ParamStore::new();
    let stage = DsamStage::new(&mut store, "s", 4, (4, 4), 2, 2, &mut rng(12)).unwrap();
    let x = store.add("input", uniform(&mut rng(13), &[1, 4, 4, 4])).unwrap();
    let probe = uniform(&mut rng(14), &[1, 8, 2, 2]);
    let report = check_params(
        &store,
        &[],
        |g| {
            let xv = g.param(x)?;
            let y = stage.forward(g, xv)?;
            let p = g.constant(probe.clone());
            let prod = g.mul(y, p)?;
            g.sum(prod)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn dsam_rejects_indivisible_configs() {
    let mut store = ParamStore::new();
    assert!(DsamStage::new(&mut store, "a", 6, (4, 4), 4, 1, &mut rng(0)).is_err());
    assert!(DsamStage::new(&mut store, "b", 4, (5, 4), 2, 1, &mut rng(0)).is_err());
    assert!(DsamStage::new(&mut store, "c", 4, (4, 4), 2, 3, &mut rng(0)).is_err());
}

#[test]
fn cascade_shapes_and_weight_sharing() {
    let cfg = backbone_cfg(8, 32);
    let mut store = ParamStore::new();
    let b = Backbone::new(&mut store, "b", &cfg, &mut rng(15)).unwrap();
    let cascade = DsamCascade::new(&mut store, "d", &cfg, 4, 2, &mut rng(16)).unwrap();
    let mut g = Graph::with_params(&store, false);
    let x = g.constant(uniform(&mut rng(17), &[2, 2, 32, 32]));
    let p = b.encode(&mut g, x).unwrap();
    let fused = cascade.forward(&mut g, &p, &p).unwrap();
    assert_eq!(g.shape(fused.z_f), &[2, 256]);
    let z = g.value(fused.z_f);
    for r in 0..2 {
        assert_eq!(z.row(r)[..128], z.row(r)[128..]);
    }
    let late = late_fusion(&mut g, &p, &p).unwrap();
    assert_eq!(g.shape(late.z_f), &[2, 128]);
    assert_eq!(cascade.stages[3].output_shape(2), [2, 128, 1, 1]);
}

#[test]
fn zero_pyramid_with_zero_biases_fuses_to_zero() {
    let cfg = backbone_cfg(4, 32);
    let mut store = ParamStore::new();
    let cascade = DsamCascade::new(&mut store, "d", &cfg, 4, 2, &mut rng(18)).unwrap();
    let biases: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with(".bias")).map(|(id, _)| id).collect();
    for id in biases {
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    let mut g = Graph::with_params(&store, false);
    let stages: Vec<_> = (0..4)
        .map(|i| {
            let (c, s) = cfg.stage_shape(i);
            g.constant(Tensor::zeros(&[1, c, s, s]))
        })
        .collect();
    let v = cascade.fuse_view(&mut g, &stages).unwrap();
    assert!(g.value(v).data().iter().all(|&x| x == 0.0));
}

#[test]
fn disabling_the_cascade_leaves_the_encoder_untouched() {
    let mut s1 = ParamStore::new();
    let mut s2 = ParamStore::new();
    let with = Model::new(&mut s1, &arch(true, true), &mut rng(19)).unwrap();
    let without = Model::new(&mut s2, &arch(false, true), &mut rng(19)).unwrap();
    assert_eq!(without.fused_dim(), 2 * 32);
    assert_eq!(with.fused_dim(), 2 * 64);
    let x = uniform(&mut rng(20), &[2, 2, 32, 32]);
    let z = |m: &Model, s: &ParamStore| {
        let mut g = Graph::with_params(s, false);
        let xv = g.constant(x.clone());
        let (p, _) = m.encode(&mut g, Some(xv), Some(xv), ViewMode::Both).unwrap();
        p.stages.iter().chain([&p.z]).map(|v| g.value(*v).clone()).collect::<Vec<_>>()
    };
    assert_eq!(z(&with, &s1), z(&without, &s2));
}

// ---------------------------------------------------------------- gate and experts

fn centers3() -> ClassCenters {
    let mu_long = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
    let mu_trans = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
    ClassCenters::from_views(mu_long, mu_trans).unwrap()
}

fn gate(zl: &Tensor, zt: &Tensor, c: &ClassCenters) -> Tensor {
    let mut g = Graph::new();
    let (a, b) = (g.leaf(zl.clone(), true), g.leaf(zt.clone(), true));
    let w = gate_weights(&mut g, a, b, c, false).unwrap();
    g.value(w).clone()
}

#[test]
fn gate_with_one_aligned_center() {
    let e1 = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let w = gate(&e1, &e1, &centers3());
    let e = std::f64::consts::E;
    let want = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
    for (a, b) in w.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((w.data()[0] - 0.5761).abs() < 5e-5 && (w.data()[1] - 0.2119).abs() < 5e-5);
}

#[test]
fn equal_similarities_give_uniform_weights() {
    let c = ClassCenters::from_views(
        Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, 1.0]]).unwrap(),
        Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap(),
    )
    .unwrap();
    let e1 = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    for v in gate(&e1, &e1, &c).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn zero_center_is_rejected_by_the_gate() {
    let c = ClassCenters::from_views(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])).unwrap();
    let mut g = Graph::new();
    let z = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), true);
    assert!(matches!(gate_weights(&mut g, z, z, &c, false), Err(Error::ZeroNorm { .. })));
}

#[test]
fn stop_gradient_gate_passes_nothing_back() {
    let c = centers3();
    let mut g = Graph::new();
    let zl = g.leaf(unit_rows(&mut rng(21), 2, 2), true);
    let zt = g.leaf(unit_rows(&mut rng(22), 2, 2), true);
    let w = gate_weights(&mut g, zl, zt, &c, true).unwrap();
    let probe = g.constant(uniform(&mut rng(23), &[2, 3]));
    let p = g.mul(w, probe).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(zl).is_none_or(|gr| gr.iter().all(|v| *v == 0.0)));
}

fn head(k: usize) -> (ParamStore, MoeHead) {
    let mut store = ParamStore::new();
    let h = MoeHead::new(&mut store, "head", 6, k, 3, &mut rng(24)).unwrap();
    (store, h)
}

fn head_logits(store: &ParamStore, h: &MoeHead, zf: &Tensor, w: Option<&Tensor>) -> Tensor {
    let mut g = Graph::with_params(store, false);
    let z = g.constant(zf.clone());
    let w = w.map(|w| g.constant(w.clone()));
    let out = h.forward(&mut g, z, w).unwrap();
    g.value(out).clone()
}

#[test]
fn one_hot_weights_select_a_single_expert() {
    let (store, h) = head(3);
    let zf = uniform(&mut rng(25), &[2, 6]);
    for k in 0..3 {
        let mut w = Tensor::zeros(&[2, 3]);
        w.data_mut()[k] = 1.0;
        w.data_mut()[3 + k] = 1.0;
        let mixed = head_logits(&store, &h, &zf, Some(&w));
        let mut g = Graph::with_params(&store, false);
        let z = g.constant(zf.clone());
        let e = h.experts[k].forward(&mut g, z).unwrap();
        let direct = h.classifier.forward(&mut g, e).unwrap();
        assert_eq!(&mixed, g.value(direct));
    }
}

#[test]
fn mass_split_between_identical_experts_is_irrelevant() {
    let (mut store, h) = head(3);
    for (a, b) in [(h.experts[0].hidden.w, h.experts[1].hidden.w), (h.experts[0].hidden.b, h.experts[1].hidden.b),
        (h.experts[0].output.w, h.experts[1].output.w), (h.experts[0].output.b, h.experts[1].output.b)]
    {
        let v = store.value(a).clone();
        store.get_mut(b).value = v;
    }
    let zf = uniform(&mut rng(26), &[1, 6]);
    let split = |p: f64| head_logits(&store, &h, &zf, Some(&Tensor::new(vec![1, 3], vec![p, 0.7 - p, 0.3]).unwrap()));
    let base = split(0.7);
    for p in [0.0, 0.1, 0.35, 0.6] {
        assert!(split(p).max_abs_diff(&base) < 1e-12);
    }
}

#[test]
fn expert_gradients_match_finite_differences() {
    let (store, h) = head(3);
    let zf = uniform(&mut rng(27), &[3, 6]);
    let w = Tensor::new(vec![3, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.3, 0.3, 0.4]).unwrap();
    let report = check_params(
        &store,
        &[],
        |g| {
            let z = g.constant(zf.clone());
            let wv = g.constant(w.clone());
            let logits = h.forward(g, z, Some(wv))?;
            g.cross_entropy(logits, &[0, 2, 1])
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn single_expert_head_is_the_k1_mixture() {
    let (store, h) = head(1);
    let zf = uniform(&mut rng(28), &[2, 6]);
    let plain = head_logits(&store, &h, &zf, None);
    let ones = Tensor::full(&[2, 1], 1.0);
    assert_eq!(plain, head_logits(&store, &h, &zf, Some(&ones)));
    let (store3, h3) = head(3);
    let mut g = Graph::with_params(&store3, false);
    let z = g.constant(zf);
    assert!(h3.forward(&mut g, z, None).is_err());
}

#[test]
fn removing_the_mixture_changes_only_head_parameters() {
    let mut s1 = ParamStore::new();
    let mut s2 = ParamStore::new();
    Model::new(&mut s1, &arch(true, true), &mut rng(29)).unwrap();
    Model::new(&mut s2, &arch(true, false), &mut rng(29)).unwrap();
    assert!(s2.num_scalars() < s1.num_scalars());
    let body = |s: &ParamStore| {
        s.iter()
            .filter(|(_, p)| !p.name.starts_with("head."))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(body(&s1), body(&s2));
    assert_eq!(s1.num_scalars_with_prefix("head.") - s2.num_scalars_with_prefix("head."), 2 * (128 * 128 + 128 + 128 * 64 + 64));
}

#[test]
fn gate_gradient_reaches_the_projection() {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &arch(true, true), &mut rng(30)).unwrap();
    let x = uniform(&mut rng(31), &[2, 2, 32, 32]);
    let centers = ClassCenters::from_views(unit_rows(&mut rng(32), 3, 16), unit_rows(&mut rng(33), 3, 16)).unwrap();
    let proj = store.find("backbone.projection.weight").unwrap();
    let grad_of = |stop: bool| {
        let mut m = model.clone();
        m.arch.model.gate_stop_gradient = stop;
        let mut g = Graph::with_params(&store, true);
        let xv = g.constant(x.clone());
        let out = m.forward(&mut g, Some(xv), Some(xv), ViewMode::Both, Some(&centers)).unwrap();
        let w = out.gate.unwrap();
        let p = g.constant(uniform(&mut rng(34), &[2, 3]));
        let wp = g.mul(w, p).unwrap();
        let s = g.sum(wp).unwrap();
        g.backward(s).unwrap();
        g.param_grads().into_iter().find(|(id, _)| *id == proj).map(|(_, v)| v)
    };
    let live = grad_of(false).unwrap();
    assert!(live.iter().any(|v| v.abs() > 0.0));
    assert!(grad_of(true).is_none_or(|g| g.iter().all(|v| *v == 0.0)));
}

#[test]
fn single_view_mode_duplicates_the_stream() {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &arch(true, true), &mut rng(35)).unwrap();
    let x = uniform(&mut rng(36), &[2, 2, 32, 32]);
    let mut g = Graph::with_params(&store, false);
    let xv = g.constant(x);
    let (l, t) = model.encode(&mut g, None, Some(xv), ViewMode::Trans).unwrap();
    assert_eq!(l.z, t.z);
    assert!(model.encode(&mut g, None, Some(xv), ViewMode::Long).is_err());
}
