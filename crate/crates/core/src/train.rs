//! Training and evaluation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::store_entries;
use crate::config::RunConfig;
use crate::data::{augment, make_batch, Scene, SplitData, Transform};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{final_loss, supervised_loss, SegModel};
use crate::nn::{cosine_factor, stream_seed, AdamW, AdamWConfig, ParamStore, Session};
use crate::tensor::{Real, Tensor};

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub sup_loss: f64,
    pub align_loss: f64,
}

/// Model, parameters and optimizer of one run.
pub struct Trainer<T: Real> {
    pub config: RunConfig,
    pub model: SegModel,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
    /// Completed epochs.
    pub epoch: usize,
    steps_per_epoch: usize,
}

/// Square crop of `size` at `(r0, c0)`.
fn crop(scene: &Scene, r0: usize, c0: usize, size: usize) -> Result<Scene> {
    use crate::data::{Pixels, Raster};
    let (h, w) = (scene.height(), scene.width());
    let cut = |r: &Raster| -> Result<Raster> {
        let plane = h * w;
        let idx = move |i: usize| {
            let (ch, p) = (i / (size * size), i % (size * size));
            ch * plane + (r0 + p / size) * w + c0 + p % size
        };
        let n = r.channels * size * size;
        let pixels = match &r.pixels {
            Pixels::U8(v) => Pixels::U8((0..n).map(|i| v[idx(i)]).collect()),
            Pixels::F32(v) => Pixels::F32((0..n).map(|i| v[idx(i)]).collect()),
        };
        Raster::new(r.channels, size, size, pixels)
    };
    Scene::new(cut(&scene.rgb)?, cut(&scene.dsm)?, cut(&scene.labels)?)
}

impl<T: Real> Trainer<T> {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: RunConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = SegModel::new(&mut store, config.model.clone())?;
        store.init(config.seed);
        let opt = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(Self {
            model,
            store,
            opt,
            epoch: 0,
            steps_per_epoch: train_len.div_ceil(config.batch),
            config,
        })
    }

    fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config.epochs
    }

    /// Training view of scene `i` in epoch `epoch`: augmented and cropped.
    fn prepare(&self, scene: &Scene, epoch: usize, i: usize) -> Result<Scene> {
        let crop_size = self.config.model.crop;
        if scene.height() < crop_size || scene.width() < crop_size {
            return Err(Error::Data(format!(
                "scene {}×{} is smaller than the {crop_size} crop",
                scene.height(),
                scene.width()
            )));
        }
        let seed = stream_seed(self.config.seed, &format!("augment/{epoch}/{i}"));
        let mut s = if self.config.augment {
            augment(scene, seed)
        } else {
            crate::data::augment::apply(scene, &Transform::IDENTITY)
        };
        if s.height() > crop_size || s.width() > crop_size {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let r0 = rand::Rng::random_range(&mut rng, 0..=s.height() - crop_size);
            let c0 = rand::Rng::random_range(&mut rng, 0..=s.width() - crop_size);
            s = crop(&s, r0, c0, crop_size)?;
        }
        Ok(s)
    }

    /// One optimization step; returns (final, supervised, alignment) losses.
    pub fn step(&mut self, scenes: &[&Scene], step_index: usize) -> Result<(f64, f64, f64)> {
        let batch = make_batch::<T>(scenes)?;
        let lr_factor = cosine_factor(step_index, self.total_steps());
        let noise_seed = stream_seed(self.config.seed, &format!("noise/{step_index}"));
        let alpha = self.config.model.da_alpha;
        let mut s = Session::new(&mut self.store, true);
        let rgb = s.graph.constant(batch.rgb);
        let dsm = s.graph.constant(batch.dsm);
        let out = self.model.forward(&mut s, rgb, Some(dsm), noise_seed)?;
        let sup = supervised_loss(&mut s, out.logits, &batch.labels)?;
        let loss = final_loss(&mut s, sup, out.align_loss, alpha)?;
        let values = (
            s.graph.value(loss).item().to_f64_lossy(),
            s.graph.value(sup).item().to_f64_lossy(),
            out.align_loss.map_or(0.0, |a| s.graph.value(a).item().to_f64_lossy()),
        );
        if !values.0.is_finite() {
            return Err(Error::Numeric(format!("loss became {} at step {step_index}", values.0)));
        }
        let grads = s.backward(loss)?;
        drop(s);
        self.opt.step(&mut self.store, &grads, lr_factor)?;
        Ok(values)
    }

    /// Train one epoch over `train` in a seed-determined order.
    pub fn run_epoch(&mut self, train: &SplitData) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, &format!("order/{epoch}")));
        order.shuffle(&mut rng);
        let prepared = order
            .iter()
            .map(|&i| self.prepare(&train.scenes[i], epoch, i))
            .collect::<Result<Vec<_>>>()?;
        let (mut total, mut sup, mut align) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for (b, chunk) in prepared.chunks(self.config.batch).enumerate() {
            let refs: Vec<&Scene> = chunk.iter().collect();
            let (l, s, a) = self.step(&refs, epoch * self.steps_per_epoch + b)?;
            total += l;
            sup += s;
            align += a;
            steps += 1;
        }
        self.epoch += 1;
        let n = steps as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            loss: total / n,
            sup_loss: sup / n,
            align_loss: align / n,
        })
    }

    /// Per-pixel argmax predictions for scenes, in eval mode.
    pub fn predict(&mut self, scenes: &[&Scene]) -> Result<Vec<Vec<u8>>> {
        predict(&self.model, &mut self.store, scenes, self.config.batch)
    }

    /// Confusion matrix over a split (clutter ignored).
    pub fn evaluate(&mut self, split: &SplitData) -> Result<ConfusionMatrix> {
        evaluate(&self.model, &mut self.store, split, self.config.batch)
    }

    /// Parameters, buffers and optimizer moments as named tensors.
    pub fn state_entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut e = store_entries(&self.store);
        e.extend(self.opt.export_state(&self.store));
        e.push(("train.epoch".into(), Tensor::scalar(T::from_usize(self.epoch).expect("epoch fits"))));
        e
    }

    pub fn restore_state(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        crate::checkpoint::load_entries(&mut self.store, entries)?;
        self.opt.import_state(&self.store, entries)?;
        let epoch = entries
            .iter()
            .find(|(n, _)| n == "train.epoch")
            .ok_or_else(|| Error::Data("training state lacks train.epoch".into()))?;
        self.epoch = epoch.1.item().to_usize().unwrap_or(0);
        Ok(())
    }
}

pub fn predict<T: Real>(model: &SegModel, store: &mut ParamStore<T>, scenes: &[&Scene], batch: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch.max(1)) {
        let b = make_batch::<T>(chunk)?;
        let mut s = Session::new(store, false);
        let rgb = s.graph.constant(b.rgb);
        let dsm = s.graph.constant(b.dsm);
        let logits = model.forward(&mut s, rgb, Some(dsm), 0)?.logits;
        let v = s.graph.value(logits);
        let (k, plane) = (v.shape()[1], v.shape()[2] * v.shape()[3]);
        for sample in v.data().chunks_exact(k * plane) {
            let pred = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if sample[c * plane + p] > sample[best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            out.push(pred);
        }
    }
    Ok(out)
}

pub fn evaluate<T: Real>(model: &SegModel, store: &mut ParamStore<T>, split: &SplitData, batch: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    let scenes: Vec<&Scene> = split.scenes.iter().collect();
    let preds = predict(model, store, &scenes, batch)?;
    for (scene, pred) in scenes.iter().zip(&preds) {
        let truth: Vec<u8> = scene.label_data().iter().map(|&l| crate::data::dataset::train_label(l)).collect();
        cm.accumulate(pred, &truth)?;
    }
    Ok(cm)
}
