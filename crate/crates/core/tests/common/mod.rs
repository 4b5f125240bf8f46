//! Finite-difference cases shared by the gradient tests and the acceptance runner.
#![allow(dead_code)]

pub mod checks;

use asymseg::alignment::{alignment_loss, latent_map, latent_to_probs, LatentMapper};
use asymseg::encoder::{ChannelMatcher, TierName};
use asymseg::fuser::{fuse, prior_matrix, residual_map, semantic_enhance, SemanticEnhancer};
use asymseg::gradcheck::{check, check_module, GradReport, Probe};
use asymseg::model::{final_loss, supervised_loss, Fusion, ModelConfig, SegModel};
use asymseg::nn::{Linear, ParamStore, Session};
use asymseg::tensor::{Graph, NormStats, Tensor, Var};
use asymseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const LINEAR_TOL: f64 = 1e-6;

pub struct GradCase {
    pub name: &'static str,
    pub linear: bool,
    pub run: fn() -> Result<GradReport>,
}

impl GradCase {
    pub fn tolerance(&self) -> f64 {
        if self.linear {
            LINEAR_TOL
        } else {
            TOL
        }
    }
}

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform values with magnitude in [0.1, 1], random sign; keeps ReLU-style kinks out of reach of the step.
pub fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ y` with fixed random weights, so every output element gets a distinct upstream gradient.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(uniform(g.shape(y), seed, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn ops(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<GradReport> {
    check(inputs, STEP, None, |g, v| {
        let y = f(g, v)?;
        project(g, y, 99)
    })
}

fn module(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    probe: Probe<'_>,
    training: bool,
    f: impl Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    check_module(store, inputs, STEP, probe, training, |s, v| {
        let y = f(s, v)?;
        if s.graph.value(y).numel() == 1 {
            Ok(y)
        } else {
            project(&mut s.graph, y, 98)
        }
    })
}

/// Batch of the full-model checks. Batch statistics over fewer samples at the
/// 1×1 deepest stage are close to a step function, which third-order
/// difference errors then dominate.
const MODEL_BATCH: usize = 8;

pub fn small_model(fusion: Fusion) -> Result<(SegModel, ParamStore<f64>)> {
    let config = ModelConfig {
        rgb_tier: TierName::Small,
        dsm_tier: Some(TierName::Tiny),
        fusion,
        da_alpha: 0.5,
        crop: 32,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let model = SegModel::new(&mut store, config)?;
    store.init(17);
    Ok((model, store))
}

fn labels(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..6) })
        .collect()
}

pub fn rgb_batch() -> Tensor<f64> {
    uniform(&[MODEL_BATCH, 3, 32, 32], 31, 0.0, 1.0)
}

pub fn dsm_batch(seed: u64) -> Tensor<f64> {
    uniform(&[MODEL_BATCH, 1, 32, 32], seed, -1.0, 1.0)
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            linear: true,
            run: || ops(&[uniform(&[2, 3], 1, -1.0, 1.0), uniform(&[2, 3], 2, -1.0, 1.0)], |g, v| g.add(v[0], v[1])),
        },
        GradCase {
            name: "add (broadcast)",
            linear: true,
            run: || ops(&[uniform(&[2, 3, 4], 1, -1.0, 1.0), uniform(&[4], 2, -1.0, 1.0)], |g, v| g.add(v[0], v[1])),
        },
        GradCase {
            name: "sub (broadcast)",
            linear: true,
            run: || ops(&[uniform(&[2, 3, 4], 3, -1.0, 1.0), uniform(&[3, 4], 4, -1.0, 1.0)], |g, v| g.sub(v[0], v[1])),
        },
        GradCase {
            name: "mul (broadcast)",
            linear: true,
            run: || ops(&[uniform(&[2, 3, 4], 5, -1.0, 1.0), uniform(&[4], 6, -1.0, 1.0)], |g, v| g.mul(v[0], v[1])),
        },
        GradCase {
            name: "div (broadcast)",
            linear: false,
            run: || ops(&[uniform(&[2, 3], 7, -1.0, 1.0), uniform(&[3], 8, 0.5, 2.0)], |g, v| g.div(v[0], v[1])),
        },
        GradCase {
            name: "scale",
            linear: true,
            run: || ops(&[uniform(&[5], 9, -1.0, 1.0)], |g, v| Ok(g.scale(v[0], -1.7))),
        },
        GradCase {
            name: "shift",
            linear: true,
            run: || ops(&[uniform(&[5], 10, -1.0, 1.0)], |g, v| Ok(g.shift(v[0], 0.3))),
        },
        GradCase {
            name: "exp",
            linear: false,
            run: || ops(&[uniform(&[6], 11, -2.0, 2.0)], |g, v| Ok(g.exp(v[0]))),
        },
        GradCase {
            name: "log",
            linear: false,
            run: || ops(&[uniform(&[6], 12, 0.2, 3.0)], |g, v| Ok(g.log(v[0]))),
        },
        GradCase {
            name: "relu",
            linear: false,
            run: || ops(&[off_zero(&[12], 13)], |g, v| Ok(g.relu(v[0]))),
        },
        GradCase {
            name: "clamp_min",
            linear: false,
            run: || ops(&[off_zero(&[12], 14)], |g, v| Ok(g.clamp_min(v[0], 0.0))),
        },
        GradCase {
            name: "matmul",
            linear: true,
            run: || ops(&[uniform(&[3, 4], 15, -1.0, 1.0), uniform(&[4, 2], 16, -1.0, 1.0)], |g, v| g.matmul(v[0], v[1])),
        },
        GradCase {
            name: "matmul (batched)",
            linear: true,
            run: || ops(&[uniform(&[2, 3, 4], 17, -1.0, 1.0), uniform(&[2, 4, 2], 18, -1.0, 1.0)], |g, v| g.matmul(v[0], v[1])),
        },
        GradCase {
            name: "matmul (shared rhs)",
            linear: true,
            run: || ops(&[uniform(&[2, 3, 4], 19, -1.0, 1.0), uniform(&[4, 2], 20, -1.0, 1.0)], |g, v| g.matmul(v[0], v[1])),
        },
        GradCase {
            name: "transpose",
            linear: true,
            run: || ops(&[uniform(&[2, 3, 4], 21, -1.0, 1.0)], |g, v| g.transpose(v[0])),
        },
        GradCase {
            name: "reshape",
            linear: true,
            run: || ops(&[uniform(&[2, 6], 22, -1.0, 1.0)], |g, v| g.reshape(v[0], &[3, 4])),
        },
        GradCase {
            name: "softmax",
            linear: false,
            run: || ops(&[uniform(&[2, 3, 5], 23, -2.0, 2.0)], |g, v| g.softmax(v[0])),
        },
        GradCase {
            name: "sum",
            linear: true,
            run: || ops(&[uniform(&[2, 3], 24, -1.0, 1.0)], |g, v| Ok(g.sum(v[0]))),
        },
        GradCase {
            name: "mean",
            linear: true,
            run: || ops(&[uniform(&[2, 3], 25, -1.0, 1.0)], |g, v| Ok(g.mean(v[0]))),
        },
        GradCase {
            name: "conv2d 3×3 stride 1 with bias",
            linear: true,
            run: || {
                let x = uniform(&[2, 2, 5, 5], 26, -1.0, 1.0);
                let w = uniform(&[3, 2, 3, 3], 27, -1.0, 1.0);
                let b = uniform(&[3], 28, -1.0, 1.0);
                ops(&[x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))
            },
        },
        GradCase {
            name: "conv2d 3×3 stride 2",
            linear: true,
            run: || {
                let x = uniform(&[2, 2, 6, 6], 29, -1.0, 1.0);
                let w = uniform(&[3, 2, 3, 3], 30, -1.0, 1.0);
                ops(&[x, w], |g, v| g.conv2d(v[0], v[1], None, 2, 1))
            },
        },
        GradCase {
            name: "conv2d 1×1 stride 2",
            linear: true,
            run: || {
                let x = uniform(&[1, 3, 5, 5], 31, -1.0, 1.0);
                let w = uniform(&[2, 3, 1, 1], 32, -1.0, 1.0);
                ops(&[x, w], |g, v| g.conv2d(v[0], v[1], None, 2, 0))
            },
        },
        GradCase {
            name: "batch_norm (batch statistics)",
            linear: false,
            run: || {
                let x = uniform(&[3, 2, 2, 2], 33, -1.0, 1.0);
                let gamma = uniform(&[2], 34, 0.5, 1.5);
                let beta = uniform(&[2], 35, -0.5, 0.5);
                ops(&[x, gamma, beta], |g, v| Ok(g.batch_norm(v[0], v[1], v[2], NormStats::Batch { eps: 1e-5 })?.0))
            },
        },
        GradCase {
            name: "batch_norm (rows, batch statistics)",
            linear: false,
            run: || {
                let x = uniform(&[5, 3], 36, -1.0, 1.0);
                let gamma = uniform(&[3], 37, 0.5, 1.5);
                let beta = uniform(&[3], 38, -0.5, 0.5);
                ops(&[x, gamma, beta], |g, v| Ok(g.batch_norm(v[0], v[1], v[2], NormStats::Batch { eps: 1e-5 })?.0))
            },
        },
        GradCase {
            name: "batch_norm (running statistics)",
            linear: true,
            run: || {
                let x = uniform(&[2, 2, 2, 2], 39, -1.0, 1.0);
                let gamma = uniform(&[2], 40, 0.5, 1.5);
                let beta = uniform(&[2], 41, -0.5, 0.5);
                ops(&[x, gamma, beta], |g, v| {
                    let stats = NormStats::Running {
                        mean: &[0.1, -0.2],
                        var: &[0.8, 1.3],
                        eps: 1e-5,
                    };
                    Ok(g.batch_norm(v[0], v[1], v[2], stats)?.0)
                })
            },
        },
        GradCase {
            name: "upsample_nearest",
            linear: true,
            run: || ops(&[uniform(&[1, 2, 2, 3], 42, -1.0, 1.0)], |g, v| g.upsample_nearest(v[0], 2)),
        },
        GradCase {
            name: "global_avg_pool",
            linear: true,
            run: || ops(&[uniform(&[2, 3, 2, 2], 43, -1.0, 1.0)], |g, v| g.global_avg_pool(v[0])),
        },
        GradCase {
            name: "concat_channels",
            linear: true,
            run: || {
                let a = uniform(&[2, 1, 2, 2], 44, -1.0, 1.0);
                let b = uniform(&[2, 2, 2, 2], 45, -1.0, 1.0);
                ops(&[a, b], |g, v| g.concat_channels(v[0], v[1]))
            },
        },
        GradCase {
            name: "channels_to_tokens",
            linear: true,
            run: || ops(&[uniform(&[2, 3, 2, 2], 46, -1.0, 1.0)], |g, v| g.channels_to_tokens(v[0])),
        },
        GradCase {
            name: "tokens_to_channels",
            linear: true,
            run: || ops(&[uniform(&[2, 6, 3], 47, -1.0, 1.0)], |g, v| g.tokens_to_channels(v[0], 2, 3)),
        },
        GradCase {
            name: "cross_entropy",
            linear: false,
            run: || {
                let logits = uniform(&[2, 4, 3, 3], 48, -2.0, 2.0);
                let mut l = labels(18, 49);
                l.iter_mut().for_each(|x| *x = if *x == 255 { 255 } else { *x % 4 });
                check(&[logits], STEP, None, move |g, v| g.cross_entropy(v[0], &l))
            },
        },
        GradCase {
            name: "channel matcher",
            linear: false,
            run: || {
                let mut store = ParamStore::new();
                let cm = ChannelMatcher::new(&mut store, "cm", 3, 5)?;
                store.init(50);
                let x = uniform(&[2, 3, 3, 3], 51, -1.0, 1.0);
                module(&store, &[x], Probe::ALL, true, |s, v| cm.forward(s, v[0]))
            },
        },
        GradCase {
            name: "residual map",
            linear: true,
            run: || {
                let mut store = ParamStore::new();
                let rm = Linear::new(&mut store, "rm", 6, 4)?;
                store.init(52);
                let x = uniform(&[2, 5, 6], 53, -1.0, 1.0);
                module(&store, &[x], Probe::ALL, true, |s, v| residual_map(s, v[0], &rm))
            },
        },
        GradCase {
            name: "semantic enhancer",
            linear: false,
            run: || {
                let mut store = ParamStore::new();
                let se = SemanticEnhancer::new(&mut store, "se", 6, 4)?;
                store.init(54);
                let x = uniform(&[2, 5, 6], 55, -1.0, 1.0);
                module(&store, &[x], Probe::ALL, true, |s, v| semantic_enhance(s, v[0], &se))
            },
        },
        GradCase {
            name: "prior matrix + fuse",
            linear: false,
            run: || {
                let store = ParamStore::new();
                let inputs = [
                    uniform(&[2, 5, 4], 56, -1.0, 1.0),
                    uniform(&[2, 5, 4], 57, -1.0, 1.0),
                    uniform(&[2, 5, 4], 58, -1.0, 1.0),
                ];
                module(&store, &inputs, Probe::ALL, true, |s, v| {
                    let prior = prior_matrix(s, v[0], v[1])?;
                    fuse(s, prior, v[2])
                })
            },
        },
        GradCase {
            name: "latent map + alignment loss",
            linear: false,
            run: || {
                let mut store = ParamStore::new();
                let lm = LatentMapper::new(&mut store, "da.dsm", 6, 8)?;
                store.init(59);
                let target = uniform(&[3, 8], 60, -1.0, 1.0);
                let f = uniform(&[3, 6], 61, -1.0, 1.0);
                module(&store, &[f], Probe::ALL, true, |s, v| {
                    let z = latent_map(s, v[0], &lm, 62)?.z;
                    let p_dsm = latent_to_probs(s, z)?;
                    let t = s.graph.constant(target.clone());
                    let p_rgb = s.graph.softmax(t)?;
                    alignment_loss(s, p_dsm, p_rgb)
                })
            },
        },
        GradCase {
            name: "full forward (training loss, DSM side)",
            linear: false,
            run: || {
                // the alignment target is detached, so RGB-side parameters are
                // covered by the inference check below instead
                let (model, store) = small_model(Fusion::Apf)?;
                let rgb = rgb_batch();
                let dsm = dsm_batch(63);
                let y = labels(MODEL_BATCH * 32 * 32, 64);
                let probe = Probe {
                    per_tensor: Some(2),
                    params: &|n: &str| !(n.starts_with("enc.rgb") || n.starts_with("da.rgb")),
                };
                module(&store, &[dsm], probe, true, |s, v| {
                    let r = s.graph.constant(rgb.clone());
                    let out = model.forward(s, r, Some(v[0]), 65)?;
                    let sup = supervised_loss(s, out.logits, &y)?;
                    final_loss(s, sup, out.align_loss, model.config.da_alpha)
                })
            },
        },
        GradCase {
            name: "full forward (inference)",
            linear: false,
            run: || {
                let (model, mut store) = small_model(Fusion::Apf)?;
                let inputs = [rgb_batch(), dsm_batch(62)];
                // fresh running statistics map post-ReLU zeros exactly onto the next kink;
                // this input keeps every kink input at least 1e-5 from its threshold
                {
                    let mut s = Session::new(&mut store, true);
                    let r = s.graph.constant(inputs[0].clone());
                    let d = s.graph.constant(inputs[1].clone());
                    model.forward(&mut s, r, Some(d), 0)?;
                }
                let y = labels(MODEL_BATCH * 32 * 32, 67);
                module(&store, &inputs, Probe::sampled(2), false, |s, v| {
                    let out = model.forward(s, v[0], Some(v[1]), 0)?;
                    supervised_loss(s, out.logits, &y)
                })
            },
        },
    ]
}
