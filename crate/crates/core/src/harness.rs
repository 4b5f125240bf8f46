//! Experiment recipes behind the command-line tool: dataset generation,
//! training with checkpoints and resume, evaluation, ablation grids.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, read_state, save_checkpoint, save_state, load_entries};
use crate::config::{Precision, RunConfig};
use crate::data::synth::{class_histogram, CLASS_NAMES, NUM_CLASSES};
use crate::data::{generate_splits, read_split, write_split, GenSpec, Raster, Split, SplitData};
use crate::encoder::TierName;
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::model::{Fusion, DEFAULT_ALPHA};
use crate::tensor::Real;
use crate::train::{EpochStats, Trainer};

/// Colour of each class in emitted prediction images.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
];

/// Weights of the alignment-loss study, largest first.
pub const ALPHA_GRID: [f64; 5] = [1e-3, 7.5e-4, 5e-4, 2.5e-4, 1e-4];

/// Profile, then an optional file, then `key=value` overrides; later wins.
pub fn resolve_config(profile: &str, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut c = RunConfig::profile(profile)?;
    if let Some(f) = file {
        c.apply_file(f)?;
    }
    apply_overrides(&mut c, overrides)?;
    c.validate()?;
    Ok(c)
}

pub fn apply_overrides(c: &mut RunConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected key=value, got `{o}`")))?;
        c.set(k, v)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- data

/// Split sizes and label histogram of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSummary {
    pub sizes: [usize; 3],
    pub histogram: [u64; NUM_CLASSES],
}

impl std::fmt::Display for DataSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "scenes: train {} / val {} / test {}",
            self.sizes[0], self.sizes[1], self.sizes[2]
        )?;
        let total: u64 = self.histogram.iter().sum();
        for (name, &n) in CLASS_NAMES.iter().zip(&self.histogram) {
            writeln!(f, "  {name:<16} {n:>10} {:>7.2}%", 100.0 * n as f64 / total.max(1) as f64)?;
        }
        Ok(())
    }
}

/// Generate `count` scenes into `out/{train,val,test}`.
pub fn gen_data(out: &Path, spec: &GenSpec, count: usize) -> Result<DataSummary> {
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    let splits = generate_splits(spec, count)?;
    create_dir(out)?;
    let mut histogram = [0; NUM_CLASSES];
    let mut sizes = [0; 3];
    for (i, (split, data)) in splits.iter().enumerate() {
        write_split(out, *split, data)?;
        sizes[i] = data.len();
        for scene in &data.scenes {
            for (h, n) in histogram.iter_mut().zip(class_histogram(scene.label_data())) {
                *h += n;
            }
        }
    }
    let meta = serde_json::to_string_pretty(spec).expect("generator spec serializes");
    write_file(&out.join("dataset.json"), meta + "\n")?;
    Ok(DataSummary { sizes, histogram })
}

/// All three splits in memory.
#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl Datasets {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: read_split(dir, Split::Train)?,
            val: read_split(dir, Split::Val)?,
            test: read_split(dir, Split::Test)?,
        })
    }

    pub fn generate(spec: &GenSpec, count: usize) -> Result<Self> {
        let mut d = Self::default();
        for (split, data) in generate_splits(spec, count)? {
            *d.get_mut(split) = data;
        }
        Ok(d)
    }

    pub fn get(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut SplitData {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

// ---------------------------------------------------------------- training

/// Losses of one epoch and, when validation ran, its metrics.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub stats: EpochStats,
    pub val: Option<MetricRecord>,
}

/// Record for `split` with the trainer's seed and config hash.
pub fn evaluate_record<T: Real>(trainer: &mut Trainer<T>, split: &SplitData, name: &str) -> Result<MetricRecord> {
    let cm = trainer.evaluate(split)?;
    let (seed, hash) = (trainer.config.seed, trainer.config.config_hash());
    MetricRecord::from_matrix(&cm, trainer.epoch, name, seed, &hash)
}

/// Train until `until` or `config.epochs` epochs are complete, calling
/// `on_epoch` after each epoch.
pub fn fit<T: Real>(
    trainer: &mut Trainer<T>,
    data: &Datasets,
    validate: bool,
    until: usize,
    mut on_epoch: impl FnMut(&Trainer<T>, &EpochReport) -> Result<()>,
) -> Result<()> {
    while trainer.epoch < until.min(trainer.config.epochs) {
        let stats = trainer.run_epoch(&data.train)?;
        let val = if validate && !data.val.is_empty() {
            let mut r = evaluate_record(trainer, &data.val, "val")?;
            r.train_loss = Some(stats.loss);
            Some(r)
        } else {
            None
        };
        on_epoch(trainer, &EpochReport { stats, val })?;
    }
    Ok(())
}

/// Loss history and final test metrics of one in-memory run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub history: Vec<EpochStats>,
    pub test: MetricRecord,
}

fn train_and_test_as<T: Real>(config: &RunConfig, data: &Datasets) -> Result<RunOutcome> {
    let mut trainer = Trainer::<T>::new(config.clone(), data.train.len())?;
    let mut history = Vec::new();
    fit(&mut trainer, data, false, usize::MAX, |_, r| {
        history.push(r.stats);
        Ok(())
    })?;
    let test = evaluate_record(&mut trainer, &data.test, "test")?;
    Ok(RunOutcome { history, test })
}

/// Train from scratch without touching the disk and score the final model on the test split.
pub fn train_and_test(config: &RunConfig, data: &Datasets) -> Result<RunOutcome> {
    match config.precision {
        Precision::F32 => train_and_test_as::<f32>(config, data),
        Precision::F64 => train_and_test_as::<f64>(config, data),
    }
}

/// Sidecar written next to every checkpoint and training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub precision: String,
    pub best_miou: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl CheckpointMeta {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self).expect("meta serializes") + "\n")
    }

    /// Version error unless the sidecar was written for `config`.
    pub fn check(&self, config: &RunConfig) -> Result<()> {
        let hash = config.config_hash();
        if self.config_hash != hash {
            return Err(Error::Version(format!(
                "checkpoint was written for config {} but the current config hashes to {hash}",
                self.config_hash
            )));
        }
        Ok(())
    }
}

/// Files of a training run directory.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn checkpoint(&self, which: &str) -> PathBuf {
        self.dir.join(format!("{which}.ammn"))
    }
    pub fn state(&self) -> PathBuf {
        self.dir.join("state.amst")
    }
}

/// Sidecar path of a checkpoint or state file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from the state saved in the run directory.
    pub resume: bool,
    /// Stop once this many epochs are complete; the run stays resumable.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub best_miou: Option<f64>,
    pub best_epoch: Option<usize>,
}

fn cmd_train_as<T: Real>(config: &RunConfig, opts: TrainOptions, log: &mut dyn Write) -> Result<TrainSummary> {
    let data = Datasets::load(&config.data_dir)?;
    let files = RunFiles::new(&config.out_dir);
    create_dir(&files.dir)?;
    let hash = config.config_hash();
    let mut trainer = Trainer::<T>::new(config.clone(), data.train.len())?;
    let (mut best_miou, mut best_epoch) = (None, None);
    let mut metrics_text = String::new();
    if opts.resume {
        let meta = CheckpointMeta::read(&meta_path(&files.state()))?;
        meta.check(config)?;
        trainer.restore_state(&read_state::<T>(&files.state())?)?;
        (best_miou, best_epoch) = (meta.best_miou, meta.best_epoch);
        // drop records written after the state was saved
        if let Ok(old) = fs::read_to_string(files.metrics()) {
            for line in old.lines() {
                let r: MetricRecord =
                    serde_json::from_str(line).map_err(|e| Error::Data(format!("metrics log: {e}")))?;
                if r.epoch <= meta.epoch {
                    metrics_text.push_str(line);
                    metrics_text.push('\n');
                }
            }
        }
        let _ = writeln!(log, "resuming {hash} after epoch {}", meta.epoch);
    }
    write_file(&files.config(), config.to_text())?;
    write_file(&files.metrics(), &metrics_text)?;
    let mut final_loss = f64::NAN;
    fit(&mut trainer, &data, true, opts.stop_after.unwrap_or(usize::MAX), |t, report| {
        let s = report.stats;
        final_loss = s.loss;
        let mut line = format!(
            "epoch {:>3}  loss {:.4}  sup {:.4}  align {:.4}",
            s.epoch, s.loss, s.sup_loss, s.align_loss
        );
        if let Some(v) = &report.val {
            let _ = write!(line, "  val mIoU {:.4}  mF1 {:.4}", v.miou, v.mf1);
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(files.metrics())
                .map_err(|e| Error::io(&files.metrics(), e))?;
            writeln!(f, "{}", v.to_json_line()).map_err(|e| Error::io(&files.metrics(), e))?;
            if best_miou.is_none_or(|b| v.miou > b) {
                best_miou = Some(v.miou);
                best_epoch = Some(s.epoch);
                save_with_meta(&files.checkpoint("best"), t, best_miou, best_epoch, false)?;
            }
        }
        let _ = writeln!(log, "{line}");
        save_with_meta(&files.state(), t, best_miou, best_epoch, true)
    })?;
    if trainer.epoch == config.epochs {
        save_with_meta(&files.checkpoint("final"), &trainer, best_miou, best_epoch, false)?;
    }
    Ok(TrainSummary {
        epochs: trainer.epoch,
        final_loss,
        best_miou,
        best_epoch,
    })
}

fn save_with_meta<T: Real>(
    path: &Path,
    t: &Trainer<T>,
    best_miou: Option<f64>,
    best_epoch: Option<usize>,
    full_state: bool,
) -> Result<()> {
    if full_state {
        save_state(path, &t.state_entries())?;
    } else {
        save_checkpoint(path, &t.store)?;
    }
    CheckpointMeta {
        config_hash: t.config.config_hash(),
        seed: t.config.seed,
        epoch: t.epoch,
        precision: t.config.precision.name().into(),
        best_miou,
        best_epoch,
    }
    .write(&meta_path(path))
}

/// Train on `config.data_dir`, writing the metrics log, `final`/`best`
/// checkpoints and a resumable state into `config.out_dir`.
pub fn cmd_train(config: &RunConfig, opts: TrainOptions, log: &mut dyn Write) -> Result<TrainSummary> {
    config.validate()?;
    match config.precision {
        Precision::F32 => cmd_train_as::<f32>(config, opts, log),
        Precision::F64 => cmd_train_as::<f64>(config, opts, log),
    }
}

// ---------------------------------------------------------------- evaluation

/// Fixed class/colour table.
pub fn legend() -> String {
    let mut s = String::new();
    for (k, (name, [r, g, b])) in CLASS_NAMES.iter().zip(PALETTE).enumerate() {
        let _ = writeln!(s, "{k} {name} #{r:02x}{g:02x}{b:02x}");
    }
    s
}

/// Binary PPM of a label map coloured with [`PALETTE`].
pub fn color_ppm(labels: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &l in labels {
        out.extend_from_slice(&PALETTE.get(l as usize).copied().unwrap_or([0, 0, 0]));
    }
    out
}

fn cmd_eval_as<T: Real>(config: &RunConfig, checkpoint: &Path, split: Split, pred_dir: Option<&Path>) -> Result<MetricRecord> {
    let meta = CheckpointMeta::read(&meta_path(checkpoint))?;
    meta.check(config)?;
    let data = read_split(&config.data_dir, split)?;
    let mut trainer = Trainer::<T>::new(config.clone(), data.len().max(1))?;
    load_entries(&mut trainer.store, &read_checkpoint::<T>(checkpoint)?)?;
    trainer.epoch = meta.epoch;
    let record = evaluate_record(&mut trainer, &data, split.name())?;
    if let Some(dir) = pred_dir {
        create_dir(dir)?;
        write_file(&dir.join("legend.txt"), legend())?;
        let scenes: Vec<_> = data.scenes.iter().collect();
        let preds = trainer.predict(&scenes)?;
        for ((id, scene), pred) in data.ids.iter().zip(&data.scenes).zip(preds) {
            let (h, w) = (scene.height(), scene.width());
            write_file(&dir.join(format!("{id}.pred.ppm")), color_ppm(&pred, h, w))?;
            Raster::u8(1, h, w, pred)?.write(&dir.join(format!("{id}.pred.amrd")))?;
        }
    }
    Ok(record)
}

/// Score a checkpoint on one split; optionally write per-tile predictions.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, split: Split, pred_dir: Option<&Path>) -> Result<MetricRecord> {
    match config.precision {
        Precision::F32 => cmd_eval_as::<f32>(config, checkpoint, split, pred_dir),
        Precision::F64 => cmd_eval_as::<f64>(config, checkpoint, split, pred_dir),
    }
}

// ---------------------------------------------------------------- ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    Components,
    Tiers,
    Alpha,
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Study::Components),
            "tiers" => Ok(Study::Tiers),
            "alpha" => Ok(Study::Alpha),
            other => Err(Error::Usage(format!(
                "unknown study `{other}` (components, tiers or alpha)"
            ))),
        }
    }
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Components => "components",
            Study::Tiers => "tiers",
            Study::Alpha => "alpha",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub config: RunConfig,
}

/// Row name of a component toggle combination; all off is the concatenation baseline.
pub fn components_name(apf: bool, da: bool, ade: bool) -> String {
    let parts: Vec<&str> = [(apf, "APF"), (da, "DA"), (ade, "ADE")]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
    if parts.is_empty() {
        "baseline".into()
    } else {
        parts.join("+")
    }
}

/// Configurations of a study derived from `base`.
///
/// Components: APF off means concatenation fusion, DA off means no alignment
/// term, ADE off means the DSM encoder uses the RGB tier.
pub fn study_rows(study: Study, base: &RunConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let alpha = if base.model.da_alpha > 0.0 { base.model.da_alpha } else { DEFAULT_ALPHA };
    match study {
        Study::Components => {
            let small = base.model.dsm_tier.unwrap_or(TierName::Small);
            if small == base.model.rgb_tier {
                return Err(Error::Config(format!(
                    "components study needs a DSM tier different from the RGB tier {}",
                    base.model.rgb_tier
                )));
            }
            for bits in 0..8u8 {
                let (apf, da, ade) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
                let mut c = base.clone();
                c.model.fusion = if apf { Fusion::Apf } else { Fusion::Concat };
                c.model.da_enabled = da;
                c.model.da_alpha = if da { alpha } else { 0.0 };
                c.model.dsm_tier = Some(if ade { small } else { base.model.rgb_tier });
                rows.push(AblationRow {
                    name: components_name(apf, da, ade),
                    config: c,
                });
            }
        }
        Study::Tiers => {
            for rgb in TierName::ALL {
                for dsm in TierName::ALL {
                    let mut c = base.clone();
                    c.model.rgb_tier = rgb;
                    c.model.dsm_tier = Some(dsm);
                    rows.push(AblationRow {
                        name: format!("{rgb}/{dsm}"),
                        config: c,
                    });
                }
            }
        }
        Study::Alpha => {
            for a in ALPHA_GRID {
                let mut c = base.clone();
                c.model.dsm_tier = c.model.dsm_tier.or(Some(TierName::Small));
                c.model.da_enabled = true;
                c.model.da_alpha = a;
                rows.push(AblationRow {
                    name: format!("alpha={a:e}"),
                    config: c,
                });
            }
        }
    }
    for r in &rows {
        r.config.validate()?;
    }
    Ok(rows)
}

/// Test metrics of one row, one record per seed, with their means.
#[derive(Clone, Debug)]
pub struct AblationResult {
    pub name: String,
    pub runs: Vec<MetricRecord>,
    pub moa: f64,
    pub mf1: f64,
    pub miou: f64,
}

impl AblationResult {
    pub fn from_runs(name: &str, runs: Vec<MetricRecord>) -> Self {
        let n = runs.len().max(1) as f64;
        Self {
            name: name.to_string(),
            moa: runs.iter().map(|r| r.moa).sum::<f64>() / n,
            mf1: runs.iter().map(|r| r.mf1).sum::<f64>() / n,
            miou: runs.iter().map(|r| r.miou).sum::<f64>() / n,
            runs,
        }
    }
}

/// Train every row once per seed. Runs are spread over `jobs` threads;
/// results come back in row order regardless.
pub fn run_study(
    rows: &[AblationRow],
    seeds: &[u64],
    data: &Datasets,
    jobs: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<Vec<AblationResult>> {
    let tasks: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let slots: Vec<Mutex<Option<Result<MetricRecord>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(r, seed)) = tasks.get(i) else { break };
        let mut config = rows[r].config.clone();
        config.seed = seed;
        let result = train_and_test(&config, data).map(|o| o.test);
        if let Ok(rec) = &result {
            progress(&format!("{} seed {seed}: mIoU {:.4}", rows[r].name, rec.miou));
        }
        *slots[i].lock().expect("result slot") = Some(result);
    };
    std::thread::scope(|scope| {
        for _ in 1..jobs.max(1) {
            scope.spawn(worker);
        }
        worker();
    });
    let mut records = slots.into_iter().map(|m| m.into_inner().expect("result slot").expect("task ran"));
    rows.iter()
        .map(|row| {
            let runs = (0..seeds.len()).map(|_| records.next().expect("one per task")).collect::<Result<Vec<_>>>()?;
            Ok(AblationResult::from_runs(&row.name, runs))
        })
        .collect()
}

/// Rows sorted by mean mIoU, best first.
pub fn ranked_table(results: &[AblationResult]) -> String {
    let mut order: Vec<&AblationResult> = results.iter().collect();
    order.sort_by(|a, b| b.miou.total_cmp(&a.miou));
    let mut s = format!("{:<4} {:<20} {:>8} {:>8} {:>8}  seeds\n", "rank", "config", "mOA", "mF1", "mIoU");
    for (i, r) in order.iter().enumerate() {
        let seeds: Vec<String> = r.runs.iter().map(|x| x.seed.to_string()).collect();
        let _ = writeln!(
            s,
            "{:<4} {:<20} {:>8.4} {:>8.4} {:>8.4}  {}",
            i + 1,
            r.name,
            r.moa,
            r.mf1,
            r.miou,
            seeds.join(",")
        );
    }
    s
}

/// Run a study on `base.data_dir` and write `ablation_{study}.{jsonl,txt}` into `base.out_dir`.
pub fn cmd_ablate(study: Study, base: &RunConfig, seeds: &[u64], jobs: usize, log: &(dyn Fn(&str) + Sync)) -> Result<Vec<AblationResult>> {
    if seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    let rows = study_rows(study, base)?;
    let data = Datasets::load(&base.data_dir)?;
    let results = run_study(&rows, seeds, &data, jobs, log)?;
    create_dir(&base.out_dir)?;
    let mut jsonl = String::new();
    for r in &results {
        for run in &r.runs {
            let line = serde_json::json!({ "study": study.name(), "row": r.name, "record": run });
            jsonl.push_str(&line.to_string());
            jsonl.push('\n');
        }
    }
    write_file(&base.out_dir.join(format!("ablation_{}.jsonl", study.name())), jsonl)?;
    write_file(&base.out_dir.join(format!("ablation_{}.txt", study.name())), ranked_table(&results))?;
    Ok(results)
}
