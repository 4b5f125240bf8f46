use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::raster::Raster;
use super::synth::{generate_layers, GenSpec, Scene, CLUTTER};
use crate::error::{Error, Result};
use crate::nn::stream_seed;
use crate::tensor::{Real, Tensor, IGNORE_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split `{other}` (train, val or test)"))),
        }
    }
}

/// Scenes of one split with their identifiers.
#[derive(Clone, Debug, Default)]
pub struct SplitData {
    pub ids: Vec<String>,
    pub scenes: Vec<Scene>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Split sizes for `count` scenes: 70% train, 15% validation, the rest test.
pub fn split_sizes(count: usize) -> [usize; 3] {
    let train = (count as f64 * 0.7).round() as usize;
    let val = ((count as f64 * 0.15).round() as usize).min(count - train);
    [train, val, count - train - val]
}

/// Generate `count` scenes; scene `i` uses the seed derived from `(spec.seed, i)`.
pub fn generate_splits(spec: &GenSpec, count: usize) -> Result<Vec<(Split, SplitData)>> {
    spec.validate()?;
    let sizes = split_sizes(count);
    let mut next = 0;
    let mut out = Vec::new();
    for (split, &n) in Split::ALL.iter().zip(&sizes) {
        let mut data = SplitData::default();
        for _ in 0..n {
            let scene_spec = GenSpec {
                seed: stream_seed(spec.seed, &format!("scene{next}")),
                ..spec.clone()
            };
            data.ids.push(format!("{next:05}"));
            data.scenes.push(generate_layers(&scene_spec)?.scene);
            next += 1;
        }
        out.push((*split, data));
    }
    Ok(out)
}

fn layer_paths(dir: &Path, id: &str) -> [PathBuf; 3] {
    ["rgb", "dsm", "lbl"].map(|k| dir.join(format!("{id}.{k}.amrd")))
}

pub fn write_split(root: &Path, split: Split, data: &SplitData) -> Result<()> {
    let dir = root.join(split.name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = String::new();
    for (id, scene) in data.ids.iter().zip(&data.scenes) {
        let [rgb, dsm, lbl] = layer_paths(&dir, id);
        scene.rgb.write(&rgb)?;
        scene.dsm.write(&dsm)?;
        scene.labels.write(&lbl)?;
        manifest.push_str(id);
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_split(root: &Path, split: Split) -> Result<SplitData> {
    let dir = root.join(split.name());
    let path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut data = SplitData::default();
    for id in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let [rgb, dsm, lbl] = layer_paths(&dir, id);
        let scene = Scene::new(Raster::read(&rgb)?, Raster::read(&dsm)?, Raster::read(&lbl)?)
            .map_err(|e| Error::Data(format!("scene `{id}` in {}: {e}", dir.display())))?;
        data.ids.push(id.to_string());
        data.scenes.push(scene);
    }
    Ok(data)
}

/// Normalized network inputs for a batch of equally sized scenes.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// B×3×H×W, channels scaled to [0, 1].
    pub rgb: Tensor<T>,
    /// B×1×H×W, standardized per tile.
    pub dsm: Tensor<T>,
    /// B·H·W labels with clutter mapped to the ignore value.
    pub labels: Vec<u8>,
}

/// Zero-mean, unit-variance heights of one tile.
pub fn standardize(dsm: &[f32]) -> Vec<f64> {
    let n = dsm.len().max(1) as f64;
    let mean = dsm.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = dsm.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-6);
    dsm.iter().map(|&v| (v as f64 - mean) / std).collect()
}

/// Training label of a ground-truth class: clutter is ignored.
pub fn train_label(class: u8) -> u8 {
    if class == CLUTTER {
        IGNORE_LABEL
    } else {
        class
    }
}

pub fn make_batch<T: Real>(scenes: &[&Scene]) -> Result<Batch<T>> {
    let first = scenes.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let plane = h * w;
    let b = scenes.len();
    let mut rgb = Vec::with_capacity(b * 3 * plane);
    let mut dsm = Vec::with_capacity(b * plane);
    let mut labels = Vec::with_capacity(b * plane);
    for s in scenes {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Data(format!(
                "batch mixes {h}×{w} and {}×{} scenes",
                s.height(),
                s.width()
            )));
        }
        rgb.extend(s.rgb_data().iter().map(|&v| T::from_f64_lossy(v as f64 / 255.0)));
        dsm.extend(standardize(s.dsm_data()).into_iter().map(T::from_f64_lossy));
        labels.extend(s.label_data().iter().map(|&l| train_label(l)));
    }
    Ok(Batch {
        rgb: Tensor::new(vec![b, 3, h, w], rgb)?,
        dsm: Tensor::new(vec![b, 1, h, w], dsm)?,
        labels,
    })
}
