//! Analytic cost accounting from a recorded inference graph.
//!
//! FLOPs follow [`Graph::flops`](crate::tensor::Graph::flops) (a multiply-add
//! is 2). Parameters are the trainable entries the pass touched. Activation
//! memory counts every non-leaf node at 4 bytes per value, i.e. what a training
//! pass would keep alive for the backward sweep.

use std::fmt;

use serde::Serialize;

use crate::error::Result;
use crate::model::{ModelConfig, SegModel};
use crate::nn::{EntryKind, ParamStore, Session};
use crate::tensor::{Op, Real, Tensor};

pub const BYTES_PER_VALUE: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub flops: u64,
    pub params: u64,
    pub activation_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub label: String,
    pub input: [usize; 2],
    pub layers: Vec<LayerCost>,
    pub flops: u64,
    pub params: u64,
    pub activation_bytes: u64,
}

impl CostReport {
    /// Group every node recorded in `s` by scope. Totals are sums over layers.
    pub fn from_session<T: Real>(s: &Session<'_, T>, label: &str, input: [usize; 2]) -> Self {
        let mut layers: Vec<LayerCost> = Vec::new();
        let slot = |name: &str, layers: &mut Vec<LayerCost>| -> usize {
            let name = if name.is_empty() { "(top)" } else { name };
            match layers.iter().position(|l| l.name == name) {
                Some(i) => i,
                None => {
                    layers.push(LayerCost {
                        name: name.to_string(),
                        flops: 0,
                        params: 0,
                        activation_bytes: 0,
                    });
                    layers.len() - 1
                }
            }
        };
        let trainable: Vec<_> = s
            .bound_params()
            .filter(|(id, _)| s.store().entry(*id).1.kind == EntryKind::Param)
            .map(|(_, v)| v)
            .collect();
        for v in s.graph.vars() {
            let i = slot(s.graph.scope_of(v), &mut layers);
            let numel = s.graph.value(v).numel() as u64;
            if matches!(s.graph.op(v), Op::Leaf) {
                if trainable.contains(&v) {
                    layers[i].params += numel;
                }
            } else {
                layers[i].flops += s.graph.flops(v);
                layers[i].activation_bytes += numel * BYTES_PER_VALUE;
            }
        }
        layers.retain(|l| l.flops > 0 || l.params > 0 || l.activation_bytes > 0);
        Self {
            label: label.to_string(),
            input,
            flops: layers.iter().map(|l| l.flops).sum(),
            params: layers.iter().map(|l| l.params).sum(),
            activation_bytes: layers.iter().map(|l| l.activation_bytes).sum(),
            layers,
        }
    }
}

/// Cost of one inference pass of a freshly built model on a 1×C×size×size input.
pub fn profile_model(config: &ModelConfig, size: usize) -> Result<CostReport> {
    let config = ModelConfig {
        crop: size,
        ..config.clone()
    };
    config.validate()?;
    let mut store = ParamStore::<f32>::new();
    let model = SegModel::new(&mut store, config.clone())?;
    let mut s = Session::new(&mut store, false);
    let rgb = s.graph.constant(Tensor::zeros([1, 3, size, size]));
    let dsm = s.graph.constant(Tensor::zeros([1, 1, size, size]));
    model.forward(&mut s, rgb, Some(dsm), 0)?;
    let dsm_name = config.dsm_tier.map_or("none".to_string(), |t| t.to_string());
    let label = format!("{}/{} {}", config.rgb_tier, dsm_name, config.fusion);
    Ok(CostReport::from_session(&s, &label, [size, size]))
}

fn human(v: u64) -> String {
    match v {
        v if v >= 1_000_000_000 => format!("{:.3} G", v as f64 / 1e9),
        v if v >= 1_000_000 => format!("{:.3} M", v as f64 / 1e6),
        v if v >= 1_000 => format!("{:.2} K", v as f64 / 1e3),
        v => v.to_string(),
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} @ {}x{}", self.label, self.input[0], self.input[1])?;
        writeln!(f, "{:<40} {:>14} {:>12} {:>12}", "layer", "FLOPs", "params", "act bytes")?;
        for l in &self.layers {
            writeln!(f, "{:<40} {:>14} {:>12} {:>12}", l.name, l.flops, l.params, l.activation_bytes)?;
        }
        writeln!(
            f,
            "{:<40} {:>14} {:>12} {:>12}",
            "total", self.flops, self.params, self.activation_bytes
        )?;
        write!(
            f,
            "= {}FLOPs, {} params, {}B activations",
            human(self.flops),
            human(self.params),
            human(self.activation_bytes)
        )
    }
}

/// Two reports side by side (totals only).
pub fn compare(a: &CostReport, b: &CostReport) -> String {
    let mut out = format!("{:<12} {:>24} {:>24}\n", "", a.label, b.label);
    for (name, x, y) in [
        ("FLOPs", a.flops, b.flops),
        ("params", a.params, b.params),
        ("act bytes", a.activation_bytes, b.activation_bytes),
    ] {
        out.push_str(&format!("{name:<12} {x:>24} {y:>24}\n"));
    }
    out
}
