//! Criterion checks shared by the integration tests and the acceptance runner.
//! Each returns a one-line summary, or the reason it failed.

use asymseg::alignment::{alignment_loss, latent_map, Alignment, LatentMapper};
use asymseg::encoder::TierName;
use asymseg::fuser::{fuse, prior_matrix};
use asymseg::metrics::ConfusionMatrix;
use asymseg::model::{Fusion, ModelConfig, SegModel};
use asymseg::nn::{ParamStore, Session};
use asymseg::profile::profile_model;
use asymseg::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_cases, uniform};

pub type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn gradients() -> Outcome {
    let mut failures = Vec::new();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    let cases = grad_cases();
    for case in &cases {
        let r = (case.run)().map_err(|e| format!("{}: {e}", case.name))?;
        checked += r.checked;
        skipped += r.skipped;
        worst = worst.max(r.max_rel_err);
        if !r.passes(case.tolerance()) || r.checked == 0 {
            failures.push(format!("{} rel {:.2e}", case.name, r.max_rel_err));
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    // a kink-heavy probe set would hollow the check out
    ensure(skipped * 20 <= checked, || format!("{skipped} of {} probes straddled a kink", checked + skipped))?;
    Ok(format!(
        "{} cases, {checked} probes, {skipped} kink-straddling probes skipped, worst rel {worst:.2e}",
        cases.len()
    ))
}

/// Random prior/fusion instances: row sums, identity prior, convexity.
pub fn prior_and_fusion(instances: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_row = 0.0f64;
    for k in 0..instances {
        let n = rng.random_range(1..=12);
        let d = rng.random_range(1..=8);
        let scale = rng.random_range(0.1..6.0);
        let seed = rng.random();
        let mut store = ParamStore::<f64>::new();
        let mut s = Session::new(&mut store, false);
        let sem = s.graph.constant(uniform(&[n, d], seed, -scale, scale));
        let st = s.graph.constant(uniform(&[n, d], seed ^ 1, -scale, scale));
        let con_t = uniform(&[n, d], seed ^ 2, -scale, scale);
        let con = s.graph.constant(con_t.clone());
        let prior = prior_matrix(&mut s, sem, st).map_err(|e| e.to_string())?;
        for row in s.graph.value(prior).data().chunks_exact(n) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            ensure(row.iter().all(|&p| p >= 0.0), || format!("instance {k}: negative prior entry"))?;
        }
        let fused = fuse(&mut s, prior, con).map_err(|e| e.to_string())?;
        let f = s.graph.value(fused).data();
        let c = con_t.data();
        for j in 0..d {
            let col = (0..n).map(|i| c[i * d + j]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            // rounding of an n-term sum
            let slack = 1e-12 * lo.abs().max(hi.abs());
            for i in 0..n {
                let v = f[i * d + j];
                ensure(v >= lo - slack && v <= hi + slack, || {
                    format!("instance {k}: fused[{i},{j}] = {v} outside [{lo}, {hi}]")
                })?;
            }
        }
        let eye = s.graph.constant(Tensor::eye(n));
        let same = fuse(&mut s, eye, con).map_err(|e| e.to_string())?;
        ensure(s.graph.value(same) == &con_t, || format!("instance {k}: identity prior changed f_con"))?;
    }
    ensure(worst_row <= 1e-6, || format!("row sum off by {worst_row:e}"))?;
    Ok(format!("{instances} instances, worst row-sum error {worst_row:.1e}"))
}

fn random_rows(rng: &mut ChaCha8Rng, b: usize, l: usize) -> Tensor<f64> {
    let sharp = rng.random_range(0.1..8.0);
    let mut t = Tensor::from_fn([b, l], |_| (sharp * rng.random_range(-1.0..1.0f64)).exp());
    for row in t.data_mut().chunks_exact_mut(l) {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    t
}

fn kl(p: &Tensor<f64>, q: &Tensor<f64>) -> std::result::Result<f64, String> {
    let mut store = ParamStore::<f64>::new();
    let mut s = Session::new(&mut store, true);
    let (pv, qv) = (s.graph.constant(p.clone()), s.graph.constant(q.clone()));
    let loss = alignment_loss(&mut s, pv, qv).map_err(|e| e.to_string())?;
    Ok(s.graph.value(loss).item())
}

/// Non-negativity, zero at equality, reparameterization moments, stop-gradient routing.
pub fn alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut min_kl = f64::INFINITY;
    let mut max_self = 0.0f64;
    for _ in 0..1000 {
        let (b, l) = (rng.random_range(1..=4), rng.random_range(2..=16));
        let p = random_rows(&mut rng, b, l);
        let q = random_rows(&mut rng, b, l);
        min_kl = min_kl.min(kl(&p, &q)?);
        max_self = max_self.max(kl(&p, &p)?.abs());
    }
    ensure(min_kl >= 0.0, || format!("negative divergence {min_kl:e}"))?;
    ensure(max_self <= 1e-9, || format!("divergence {max_self:e} at equality"))?;

    // μ = 1, σ = 2 through zero weights and constant biases
    let mut store = ParamStore::<f64>::new();
    let lm = LatentMapper::new(&mut store, "lm", 1, 1).map_err(|e| e.to_string())?;
    *store.get_mut(lm.to_mu.bias) = Tensor::scalar(1.0).reshape([1]).map_err(|e| e.to_string())?;
    *store.get_mut(lm.to_logvar.bias) = Tensor::scalar(4f64.ln()).reshape([1]).map_err(|e| e.to_string())?;
    let draws = 10_000;
    let mut s = Session::new(&mut store, true);
    let f = s.graph.constant(uniform(&[draws, 1], 5, -1.0, 1.0));
    let z = latent_map(&mut s, f, &lm, 123).map_err(|e| e.to_string())?.z;
    let zs = s.graph.value(z).data();
    let mean = zs.iter().sum::<f64>() / draws as f64;
    let std = (zs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
    ensure((mean - 1.0).abs() <= 0.06 && (std - 2.0).abs() <= 0.06, || {
        format!("z mean {mean:.4}, std {std:.4}")
    })?;

    let mut store = ParamStore::<f64>::new();
    let da = Alignment::new(&mut store, 6, 8).map_err(|e| e.to_string())?;
    store.init(9);
    let mut s = Session::new(&mut store, true);
    let fr = s.graph.param(uniform(&[3, 6], 10, -1.0, 1.0));
    let fd = s.graph.param(uniform(&[3, 6], 11, -1.0, 1.0));
    let out = da.forward(&mut s, fr, fd, 12).map_err(|e| e.to_string())?;
    let grads = s.backward(out.loss).map_err(|e| e.to_string())?;
    let norm = |ids: [asymseg::nn::ParamId; 4]| -> f64 {
        ids.iter()
            .map(|&id| grads.get(id).map_or(0.0, |g| g.data().iter().map(|v| v * v).sum::<f64>()))
            .sum::<f64>()
            .sqrt()
    };
    let side = |m: &LatentMapper| [m.to_mu.weight, m.to_mu.bias, m.to_logvar.weight, m.to_logvar.bias];
    let (rgb, dsm) = (norm(side(&da.rgb)), norm(side(&da.dsm)));
    let input_rgb = s.graph.grad(fr).map_or(0.0, |g| g.data().iter().map(|v| v.abs()).sum());
    ensure(rgb == 0.0 && input_rgb == 0.0, || format!("RGB side received gradient {rgb:e}"))?;
    ensure(dsm > 0.0, || "DSM mappers received no gradient".to_string())?;
    Ok(format!(
        "min KL {min_kl:.2e}, max KL(p,p) {max_self:.1e}, z mean {mean:.4} std {std:.4}, grad RGB {rgb} DSM {dsm:.3e}"
    ))
}

/// Per-pixel tally, independent of [`ConfusionMatrix`].
pub struct Tally {
    pub moa: f64,
    pub mf1: f64,
    pub miou: f64,
}

pub fn brute_force(pred: &[u8], truth: &[u8], classes: usize) -> Tally {
    let (mut acc, mut f1, mut iou) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..classes as u8 {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (&p, &t) in pred.iter().zip(truth) {
            if t == 255 {
                continue;
            }
            match (p == k, t == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if tp + fneg > 0 {
            acc.push(tp as f64 / (tp + fneg) as f64);
        }
        if tp + fp + fneg > 0 {
            f1.push(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64);
            iou.push(tp as f64 / (tp + fp + fneg) as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Tally {
        moa: mean(&acc),
        mf1: mean(&f1),
        miou: mean(&iou),
    }
}

pub fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst = 0.0f64;
    let mut worst_identity = 0.0f64;
    for i in 0..100 {
        let classes = rng.random_range(2..=6);
        let truth: Vec<u8> = (0..256)
            .map(|_| if rng.random_bool(0.05) { 255 } else { rng.random_range(0..classes) as u8 })
            .collect();
        let pred: Vec<u8> = truth
            .iter()
            .map(|&t| {
                if t != 255 && rng.random_bool(0.6) {
                    t
                } else {
                    rng.random_range(0..classes) as u8
                }
            })
            .collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&pred, &truth).map_err(|e| e.to_string())?;
        let oracle = brute_force(&pred, &truth, classes);
        let got = [cm.moa(), cm.mf1(), cm.miou()].map(|m| m.map_err(|e| e.to_string()));
        let [moa, mf1, miou] = [got[0].clone()?, got[1].clone()?, got[2].clone()?];
        for (a, b) in [(moa, oracle.moa), (mf1, oracle.mf1), (miou, oracle.miou)] {
            worst = worst.max((a - b).abs());
        }
        for (f, u) in cm.per_class_f1().iter().zip(cm.per_class_iou()) {
            if let (Some(f), Some(u)) = (f, u) {
                let d = (f - 2.0 * u / (1.0 + u)).abs();
                worst_identity = worst_identity.max(d);
                ensure(d <= 4.0 * f64::EPSILON, || format!("pair {i}: F1 {f} vs IoU {u}"))?;
            }
        }
    }
    ensure(worst <= 1e-12, || format!("metrics differ from the tally by {worst:e}"))?;
    let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).map_err(|e| e.to_string())?;
    let hand = (cm.moa(), cm.mf1(), cm.miou());
    let (a, f, u) = (hand.0.map_err(|e| e.to_string())?, hand.1.map_err(|e| e.to_string())?, hand.2.map_err(|e| e.to_string())?);
    ensure(
        a == 0.75 && (f - 11.0 / 15.0).abs() < 1e-15 && (u - 7.0 / 12.0).abs() < 1e-15,
        || format!("hand example gave ({a}, {f}, {u})"),
    )?;
    Ok(format!(
        "100 pairs, worst tally gap {worst:.1e}, worst F1/IoU identity gap {worst_identity:.1e}, hand ({a}, {f:.5}, {u:.5})"
    ))
}

pub fn profiler() -> Outcome {
    let mut rows = Vec::new();
    for dsm in [TierName::Tiny, TierName::Small, TierName::Base] {
        let cfg = ModelConfig {
            rgb_tier: TierName::Base,
            dsm_tier: Some(dsm),
            ..ModelConfig::default()
        };
        let r = profile_model(&cfg, 64).map_err(|e| e.to_string())?;
        rows.push((dsm, r.flops, r.params));
    }
    for w in rows.windows(2) {
        ensure(w[0].1 < w[1].1 && w[0].2 < w[1].2, || format!("not strictly ordered: {rows:?}"))?;
    }
    let mut store = ParamStore::<f32>::new();
    let cfg = ModelConfig {
        fusion: Fusion::Apf,
        ..ModelConfig::default()
    };
    SegModel::new(&mut store, cfg).map_err(|e| e.to_string())?;
    let (c1, c2) = (TierName::Base.tier().final_width(), TierName::Small.tier().final_width());
    let cm = store.num_params_under("enc.cm.");
    ensure(cm == c1 * c2 + 2 * c1, || format!("matcher has {cm} parameters, expected {}", c1 * c2 + 2 * c1))?;
    let report = profile_model(&ModelConfig::default(), 64).map_err(|e| e.to_string())?;
    let layer = report.layers.iter().find(|l| l.name == "enc.cm").map_or(0, |l| l.params);
    ensure(layer as usize == cm, || format!("profiler attributes {layer} parameters to the matcher"))?;
    Ok(format!(
        "FLOPs {} < {} < {}, params {} < {} < {}, matcher {cm} = {c1}·{c2} + 2·{c1}",
        rows[0].1, rows[1].1, rows[2].1, rows[0].2, rows[1].2, rows[2].2
    ))
}
