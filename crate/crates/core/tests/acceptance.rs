//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! `ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.

mod common;

use std::time::Instant;

use asymseg::checkpoint::{decode_checkpoint, decode_state, encode_checkpoint, encode_state, store_entries};
use asymseg::config::{Precision, RunConfig};
use asymseg::data::{GenSpec, Raster, Split, SplitData};
use asymseg::harness::{
    evaluate_record, fit, study_rows, train_and_test, AblationResult, Datasets, Study,
};
use asymseg::model::ModelConfig;
use asymseg::tensor::Tensor;
use asymseg::train::Trainer;
use common::checks::{self, Outcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let detail = checks::gradients()?;
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("{detail}; took {secs:.0}s"));
    }
    Ok(format!("{detail}; {secs:.0}s"))
}

/// Test mIoU of every row and seed on the occluded corpus, shared by criteria 6 and 7.
struct Study200 {
    full: AblationResult,
    rgb_only: AblationResult,
    apf_ade: AblationResult,
    baseline: AblationResult,
}

fn mean_runs(name: &str, config: &RunConfig, data: &Datasets) -> Result<AblationResult, String> {
    let mut runs = Vec::new();
    for seed in SEEDS {
        let mut c = config.clone();
        c.seed = seed;
        let start = Instant::now();
        let out = train_and_test(&c, data).map_err(err)?;
        eprintln!("  {name} seed {seed}: test mIoU {:.4} ({:.0}s)", out.test.miou, start.elapsed().as_secs_f64());
        runs.push(out.test);
    }
    Ok(AblationResult::from_runs(name, runs))
}

fn occluded_study() -> Result<Study200, String> {
    let spec = GenSpec {
        occlusion_rate: 0.3,
        seed: 1234,
        ..GenSpec::default()
    };
    let data = Datasets::generate(&spec, 200).map_err(err)?;
    let base = RunConfig::default();
    let rows = study_rows(Study::Components, &base).map_err(err)?;
    let row = |name: &str| {
        rows.iter()
            .find(|r| r.name == name)
            .map(|r| r.config.clone())
            .ok_or_else(|| format!("no `{name}` row"))
    };
    let full = row("APF+DA+ADE")?;
    if full != base {
        return Err("full row differs from the default configuration".into());
    }
    let rgb_only = RunConfig {
        model: ModelConfig::rgb_only(base.model.rgb_tier),
        ..base.clone()
    };
    Ok(Study200 {
        full: mean_runs("full", &full, &data)?,
        rgb_only: mean_runs("RGB only", &rgb_only, &data)?,
        apf_ade: mean_runs("APF+ADE", &row("APF+ADE")?, &data)?,
        baseline: mean_runs("baseline", &row("baseline")?, &data)?,
    })
}

fn pts(x: f64) -> f64 {
    100.0 * x
}

fn multimodal(s: &Study200) -> Outcome {
    let gain = pts(s.full.miou - s.rgb_only.miou);
    let detail = format!(
        "full {:.2} vs RGB-only {:.2} test mIoU, gain {gain:.2} points",
        pts(s.full.miou),
        pts(s.rgb_only.miou)
    );
    if gain >= 2.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablation(s: &Study200) -> Outcome {
    let base = RunConfig::default();
    let sizes = [Study::Components, Study::Tiers, Study::Alpha].map(|st| study_rows(st, &base).map(|r| r.len()));
    let sizes = sizes.into_iter().collect::<Result<Vec<_>, _>>().map_err(err)?;
    let alphas: Vec<f64> = study_rows(Study::Alpha, &base)
        .map_err(err)?
        .iter()
        .map(|r| r.config.model.da_alpha)
        .collect();
    let (f, m, b) = (pts(s.full.miou), pts(s.apf_ade.miou), pts(s.baseline.miou));
    let detail = format!(
        "full {f:.2} / APF+ADE {m:.2} / baseline {b:.2}, margin {:.2} points; grids {sizes:?}, alphas {alphas:?}",
        f - b
    );
    let grids = sizes == [8, 9, 5] && alphas == [1e-3, 7.5e-4, 5e-4, 2.5e-4, 1e-4];
    if f >= m && m >= b && f - b >= 0.5 && grids {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bits64(t: &[(String, Tensor<f64>)]) -> Vec<(String, Vec<u64>)> {
    t.iter()
        .map(|(n, v)| (n.clone(), v.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn bits32(t: &[(String, Tensor<f32>)]) -> Vec<(String, Vec<u32>)> {
    t.iter()
        .map(|(n, v)| (n.clone(), v.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn f64_run(data: &Datasets) -> Result<(Vec<u64>, Trainer<f64>), String> {
    let config = RunConfig {
        epochs: 2,
        precision: Precision::F64,
        model: ModelConfig {
            crop: 32,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    let mut trainer = Trainer::<f64>::new(config, data.train.len()).map_err(err)?;
    let mut losses = Vec::new();
    fit(&mut trainer, data, false, usize::MAX, |_, r| {
        losses.push(r.stats.loss.to_bits());
        Ok(())
    })
    .map_err(err)?;
    Ok((losses, trainer))
}

fn random_raster(rng: &mut ChaCha8Rng, float: bool) -> Result<Raster, String> {
    let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..20), rng.random_range(1..20));
    let n = c * h * w;
    if float {
        let special = [0.0, -0.0, f32::MIN_POSITIVE / 3.0, f32::MAX, f32::INFINITY, f32::NAN];
        let v = (0..n)
            .map(|i| if i % 7 == 0 { special[i % special.len()] } else { f32::from_bits(rng.random()) })
            .collect();
        Raster::f32(c, h, w, v).map_err(err)
    } else {
        Raster::u8(c, h, w, (0..n).map(|_| rng.random()).collect()).map_err(err)
    }
}

fn reproducibility() -> Outcome {
    let small = Datasets::generate(&GenSpec { size: 32, seed: 8, ..GenSpec::default() }, 12).map_err(err)?;
    let (la, a) = f64_run(&small)?;
    let (lb, b) = f64_run(&small)?;
    if la != lb || bits64(&store_entries(&a.store)) != bits64(&store_entries(&b.store)) {
        return Err("two identical f64 runs diverged".into());
    }
    let state = a.state_entries();
    let back = decode_state::<f64>(&encode_state(&state).map_err(err)?).map_err(err)?;
    if bits64(&state) != bits64(&back) {
        return Err("training state round-trip changed bits".into());
    }

    let mut t32 = Trainer::<f32>::new(RunConfig::default(), 1).map_err(err)?;
    t32.store.init(3);
    let entries = store_entries(&t32.store);
    let back = decode_checkpoint::<f32>(&encode_checkpoint(&entries).map_err(err)?).map_err(err)?;
    if bits32(&entries) != bits32(&back) {
        return Err("checkpoint round-trip changed bits".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..200 {
        let r = random_raster(&mut rng, i % 2 == 0)?;
        let bytes = r.encode();
        let again = Raster::decode(&bytes).map_err(err)?.encode();
        if bytes != again {
            return Err(format!("raster {i} round-trip changed bytes"));
        }
    }

    let (epochs, miou) = overfit()?;
    let detail = format!("f64 runs identical, state/checkpoint/200 rasters bit-exact, overfit mIoU {miou:.4} at epoch {epochs}");
    if miou >= 0.95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Epochs until train mIoU reaches 0.95 on five scenes, capped at 200.
fn overfit() -> Result<(usize, f64), String> {
    let mut data = Datasets::generate(&GenSpec { seed: 99, ..GenSpec::default() }, 10).map_err(err)?;
    data.train.ids.truncate(5);
    data.train.scenes.truncate(5);
    data.val = SplitData::default();
    // memorization run, so plain inputs and no decay
    let config = RunConfig {
        epochs: 200,
        augment: false,
        batch: 2,
        lr: 3e-3,
        weight_decay: 0.0,
        ..RunConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(config, data.train.len()).map_err(err)?;
    let mut best = (0, 0.0);
    while trainer.epoch < 200 {
        let next = trainer.epoch + 1;
        fit(&mut trainer, &data, false, next, |_, _| Ok(())).map_err(err)?;
        let miou = evaluate_record(&mut trainer, data.get(Split::Train), "train").map_err(err)?.miou;
        if miou > best.1 {
            best = (trainer.epoch, miou);
        }
        if miou >= 0.95 {
            return Ok((trainer.epoch, miou));
        }
    }
    Ok(best)
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));

    let study = (wanted(6) || wanted(7)).then(occluded_study);
    let with_study = |f: fn(&Study200) -> Outcome| match &study {
        Some(Ok(s)) => f(s),
        Some(Err(e)) => Err(e.clone()),
        None => Err("study not run".into()),
    };

    let mut failed = 0;
    for n in 1..=8 {
        if !wanted(n) {
            continue;
        }
        let (name, outcome) = match n {
            1 => ("gradients", gradients()),
            2 => ("prior and fusion", checks::prior_and_fusion(1000)),
            3 => ("alignment", checks::alignment()),
            4 => ("metrics", checks::metrics()),
            5 => ("profiler", checks::profiler()),
            6 => ("multi-modal advantage", with_study(multimodal)),
            7 => ("ablation", with_study(ablation)),
            _ => ("reproducibility", reproducibility()),
        };
        match outcome {
            Ok(d) => println!("PASS criterion {n} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
