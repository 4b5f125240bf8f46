use std::fs;
use std::path::Path;

use asymseg::config::RunConfig;
use asymseg::data::{generate, GenSpec, Split};
use asymseg::harness::{
    cmd_eval, cmd_train, gen_data, meta_path, resolve_config, RunFiles, TrainOptions,
};
use asymseg::metrics::MetricRecord;
use asymseg::Error;

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "val", "test"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(split))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out
}

fn spec(size: usize, seed: u64) -> GenSpec {
    GenSpec {
        size,
        seed,
        ..GenSpec::default()
    }
}

#[test]
fn gen_data_writes_triples_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let summary = gen_data(&a, &spec(64, 7), 10).unwrap();
    gen_data(&b, &spec(64, 7), 10).unwrap();
    assert_eq!(summary.sizes.iter().sum::<usize>(), 10);
    assert_eq!(summary.histogram.iter().sum::<u64>(), 10 * 64 * 64);
    let files = tree_bytes(&a);
    let rasters = files.iter().filter(|(n, _)| n.ends_with(".amrd")).count();
    assert_eq!(rasters, 30);
    assert_eq!(files.iter().filter(|(n, _)| n == "manifest.txt").count(), 3);
    assert_eq!(files, tree_bytes(&b));
}

#[test]
fn occlusion_darkens_a_quarter_of_pixels() {
    let mut changed = 0.0;
    let n = 20;
    for seed in 0..n {
        let clear = generate(&spec(64, seed)).unwrap();
        let occ = generate(&GenSpec {
            occlusion_rate: 0.3,
            ..spec(64, seed)
        })
        .unwrap();
        let plane = 64 * 64;
        let (c, o) = (clear.rgb_data(), occ.rgb_data());
        let hit = (0..plane)
            .filter(|&p| (0..3).any(|ch| c[ch * plane + p] != o[ch * plane + p]))
            .count();
        changed += hit as f64 / plane as f64;
    }
    let mean = changed / n as f64;
    assert!(mean >= 0.25, "{mean}");
}

fn small_run(tmp: &Path, name: &str, seed: u64, extra: &[&str]) -> RunConfig {
    let mut overrides: Vec<String> = vec![
        "crop=32".into(),
        "epochs=2".into(),
        format!("seed={seed}"),
        format!("data_dir={}", tmp.join("data").display()),
        format!("out_dir={}", tmp.join(name).display()),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    resolve_config("desk", None, &overrides).unwrap()
}

fn losses(config: &RunConfig) -> Vec<f64> {
    let text = fs::read_to_string(RunFiles::new(&config.out_dir).metrics()).unwrap();
    text.lines()
        .map(|l| serde_json::from_str::<MetricRecord>(l).unwrap().train_loss.unwrap())
        .collect()
}

#[test]
fn smoke_training_reduces_loss() {
    let tmp = tempfile::tempdir().unwrap();
    gen_data(&tmp.path().join("data"), &spec(32, 3), 20).unwrap();
    let mut decreased = 0;
    for seed in 0..3 {
        let config = small_run(tmp.path(), &format!("run{seed}"), seed, &[]);
        let summary = cmd_train(&config, TrainOptions::default(), &mut std::io::sink()).unwrap();
        assert_eq!(summary.epochs, 2);
        let l = losses(&config);
        assert_eq!(l.len(), 2);
        decreased += usize::from(l[1] < l[0]);
        let files = RunFiles::new(&config.out_dir);
        for p in [files.checkpoint("final"), files.checkpoint("best"), files.state(), files.config()] {
            assert!(p.exists(), "{}", p.display());
        }
    }
    assert!(decreased >= 2, "loss fell on {decreased} of 3 seeds");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    gen_data(&tmp.path().join("data"), &spec(32, 4), 12).unwrap();
    let extra = ["precision=f64", "rgb_tier=tiny", "dsm_tier=tiny", "fusion=concat", "da_enabled=false", "da_alpha=0"];
    let whole = small_run(tmp.path(), "whole", 1, &extra);
    cmd_train(&whole, TrainOptions::default(), &mut std::io::sink()).unwrap();

    let split = small_run(tmp.path(), "split", 1, &extra);
    let first = TrainOptions {
        stop_after: Some(1),
        ..TrainOptions::default()
    };
    assert_eq!(cmd_train(&split, first, &mut std::io::sink()).unwrap().epochs, 1);
    let resumed = TrainOptions {
        resume: true,
        ..TrainOptions::default()
    };
    cmd_train(&split, resumed, &mut std::io::sink()).unwrap();

    assert_eq!(losses(&whole), losses(&split));
    let (a, b) = (RunFiles::new(&whole.out_dir), RunFiles::new(&split.out_dir));
    assert_eq!(fs::read(a.checkpoint("final")).unwrap(), fs::read(b.checkpoint("final")).unwrap());
    assert_eq!(fs::read(a.state()).unwrap(), fs::read(b.state()).unwrap());

    let mut other = split.clone();
    other.seed = 9;
    let err = cmd_train(&other, resumed, &mut std::io::sink()).unwrap_err();
    assert!(matches!(err, Error::Version(_)), "{err}");
}

#[test]
fn eval_is_deterministic_and_checks_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    gen_data(&tmp.path().join("data"), &spec(32, 5), 12).unwrap();
    let config = small_run(tmp.path(), "run", 0, &["epochs=1", "rgb_tier=small", "dsm_tier=tiny"]);
    cmd_train(&config, TrainOptions::default(), &mut std::io::sink()).unwrap();
    let ckpt = RunFiles::new(&config.out_dir).checkpoint("final");
    let preds = tmp.path().join("preds");
    let a = cmd_eval(&config, &ckpt, Split::Test, Some(&preds)).unwrap();
    let b = cmd_eval(&config, &ckpt, Split::Test, None).unwrap();
    assert_eq!(a.to_json_line(), b.to_json_line());
    assert_eq!((a.split.as_str(), a.epoch), ("test", 1));
    assert!(preds.join("legend.txt").exists());
    let tiles = fs::read_dir(&preds).unwrap().filter(|e| {
        e.as_ref().unwrap().path().to_string_lossy().ends_with(".pred.ppm")
    });
    assert_eq!(tiles.count(), 2);

    let mut changed = config.clone();
    changed.model.da_alpha = 1e-3;
    assert!(matches!(cmd_eval(&changed, &ckpt, Split::Test, None), Err(Error::Version(_))));
    fs::remove_file(meta_path(&ckpt)).unwrap();
    assert!(matches!(cmd_eval(&config, &ckpt, Split::Test, None), Err(Error::Io { .. })));
}
