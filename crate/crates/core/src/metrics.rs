//! Confusion-matrix metrics. Rows index ground truth, columns predictions.
//!
//! Class means run over the classes a metric is defined for: mean accuracy
//! over classes present in the ground truth, F1 and IoU over classes present
//! in the ground truth or the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::IGNORE_LABEL;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Build from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim(format!(
                "{classes}×{classes} confusion matrix needs {} counts, got {}",
                classes * classes,
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one prediction/ground-truth pair; ground-truth pixels equal to the
    /// ignore value are skipped.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.classes;
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::Data(format!(
                    "pixel {i}: class pair (truth {t}, prediction {p}) outside 0..{k}"
                )));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Ground-truth total of class `k`.
    pub fn truth_total(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    /// Predicted total of class `k`.
    pub fn pred_total(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric("confusion matrix holds no pixels".into()));
        }
        Ok(())
    }

    /// Per-class F1 `2n_kk/(p_k+t_k)`, `None` where the class never occurs.
    pub fn per_class_f1(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let denom = self.pred_total(k) + self.truth_total(k);
                (denom > 0).then(|| 2.0 * self.get(k, k) as f64 / denom as f64)
            })
            .collect()
    }

    /// Per-class IoU `n_kk/(t_k+p_k−n_kk)`, `None` where the class never occurs.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let union = self.pred_total(k) + self.truth_total(k) - self.get(k, k);
                (union > 0).then(|| self.get(k, k) as f64 / union as f64)
            })
            .collect()
    }

    /// Mean per-class accuracy `n_kk/t_k` over classes present in the ground truth.
    pub fn moa(&self) -> Result<f64> {
        self.check_nonempty()?;
        let vals: Vec<f64> = (0..self.classes)
            .filter_map(|k| {
                let t = self.truth_total(k);
                (t > 0).then(|| self.get(k, k) as f64 / t as f64)
            })
            .collect();
        Ok(mean(&vals))
    }

    pub fn mf1(&self) -> Result<f64> {
        self.check_nonempty()?;
        Ok(mean(&self.per_class_f1().into_iter().flatten().collect::<Vec<_>>()))
    }

    pub fn miou(&self) -> Result<f64> {
        self.check_nonempty()?;
        Ok(mean(&self.per_class_iou().into_iter().flatten().collect::<Vec<_>>()))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One evaluation, serialized as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub per_class_f1: Vec<Option<f64>>,
    pub moa: f64,
    pub mf1: f64,
    pub miou: f64,
    pub seed: u64,
    pub config_hash: String,
    /// Mean training loss of the epoch, on per-epoch validation records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
}

impl MetricRecord {
    pub fn from_matrix(cm: &ConfusionMatrix, epoch: usize, split: &str, seed: u64, config_hash: &str) -> Result<Self> {
        Ok(Self {
            epoch,
            split: split.to_string(),
            per_class_f1: cm.per_class_f1(),
            moa: cm.moa()?,
            mf1: cm.mf1()?,
            miou: cm.miou()?,
            seed,
            config_hash: config_hash.to_string(),
            train_loss: None,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric record serializes")
    }
}
