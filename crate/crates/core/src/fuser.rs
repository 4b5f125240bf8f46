//! Asymmetric prior fuser: RGB contextual tokens are mixed by a row-stochastic
//! token-to-token prior built from RGB semantic and DSM structural tokens.
//!
//! Token inputs are `N×c` or `B×N×c`; batched inputs get one prior per sample.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Linear, ParamStore, Session};
use crate::tensor::{Real, Var};

/// Projections of the fuser; all map `c₁` to the fusion width `d`.
#[derive(Clone, Debug)]
pub struct ApfWeights {
    pub rm_rgb: Linear,
    pub rm_dsm: Linear,
    pub se: SemanticEnhancer,
    pub width: usize,
}

/// Linear → BN → ReLU, applied to RGB tokens only.
#[derive(Clone, Debug)]
pub struct SemanticEnhancer {
    pub linear: Linear,
    pub bn: BatchNorm,
}

/// Every intermediate of one fuser pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionBundle {
    pub f_con: Var,
    pub f_str: Var,
    pub f_sem: Var,
    pub f_prior: Var,
    pub f_fuse: Var,
    /// Width `d` used in the `1/√d` logit scaling.
    pub d_str: usize,
}

/// Fusion width for a given RGB width.
pub fn fusion_width(c1: usize) -> usize {
    (c1 / 2).max(1)
}

impl SemanticEnhancer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c1: usize, d: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, &format!("{name}.linear"), c1, d)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), d)?,
        })
    }
}

impl ApfWeights {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c1: usize, d: usize) -> Result<Self> {
        Ok(Self {
            rm_rgb: Linear::new(store, &format!("{name}.rm_rgb"), c1, d)?,
            rm_dsm: Linear::new(store, &format!("{name}.rm_dsm"), c1, d)?,
            se: SemanticEnhancer::new(store, &format!("{name}.se"), c1, d)?,
            width: d,
        })
    }
}

/// Plain linear projection of a token matrix.
pub fn residual_map<T: Real>(s: &mut Session<'_, T>, x: Var, rm: &Linear) -> Result<Var> {
    rm.forward(s, x)
}

/// `relu(bn(linear(x)))`, normalizing each output feature over all tokens.
pub fn semantic_enhance<T: Real>(s: &mut Session<'_, T>, x: Var, se: &SemanticEnhancer) -> Result<Var> {
    let h = se.linear.forward(s, x)?;
    let shape = s.graph.shape(h).to_vec();
    let d = *shape.last().expect("linear output has rank ≥ 2");
    let rows = shape[..shape.len() - 1].iter().product();
    let flat = s.graph.reshape(h, &[rows, d])?;
    let normed = se.bn.forward(s, flat)?;
    let normed = s.graph.reshape(normed, &shape)?;
    Ok(s.graph.relu(normed))
}

/// Row-wise `softmax(f_sem · f_strᵀ / √d)`.
pub fn prior_matrix<T: Real>(s: &mut Session<'_, T>, f_sem: Var, f_str: Var) -> Result<Var> {
    let (a, b) = (s.graph.shape(f_sem).to_vec(), s.graph.shape(f_str).to_vec());
    if a != b || !(2..=3).contains(&a.len()) || a[a.len() - 1] == 0 {
        return Err(Error::dim(format!(
            "prior matrix needs equal N×d token matrices, got {a:?} and {b:?}"
        )));
    }
    let d = a[a.len() - 1];
    let key = s.graph.transpose(f_str)?;
    let logits = s.graph.matmul(f_sem, key)?;
    let logits = s.graph.scale(logits, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
    s.graph.softmax(logits)
}

/// `f_prior · f_con`: each fused token is a convex combination of contextual tokens.
pub fn fuse<T: Real>(s: &mut Session<'_, T>, f_prior: Var, f_con: Var) -> Result<Var> {
    let (p, c) = (s.graph.shape(f_prior).to_vec(), s.graph.shape(f_con).to_vec());
    let r = p.len();
    let square = r >= 2 && p[r - 1] == p[r - 2];
    if !square || c.len() != r || c[..r - 1] != p[..r - 1] {
        return Err(Error::dim(format!(
            "fuse expects an N×N prior and N×d context, got {p:?} and {c:?}"
        )));
    }
    s.graph.matmul(f_prior, f_con)
}

/// Full fuser pass on channel-matched token matrices.
pub fn apf_forward<T: Real>(s: &mut Session<'_, T>, f_rgb: Var, f_dsm: Var, w: &ApfWeights) -> Result<FusionBundle> {
    let (a, b) = (s.graph.shape(f_rgb).to_vec(), s.graph.shape(f_dsm).to_vec());
    if a != b {
        return Err(Error::dim(format!(
            "fuser inputs must share shape, got RGB {a:?} and DSM {b:?}"
        )));
    }
    let f_con = s.scoped("rm_rgb", |s| residual_map(s, f_rgb, &w.rm_rgb))?;
    let f_str = s.scoped("rm_dsm", |s| residual_map(s, f_dsm, &w.rm_dsm))?;
    let f_sem = s.scoped("se", |s| semantic_enhance(s, f_rgb, &w.se))?;
    let f_prior = s.scoped("prior", |s| prior_matrix(s, f_sem, f_str))?;
    let f_fuse = s.scoped("fuse", |s| fuse(s, f_prior, f_con))?;
    Ok(FusionBundle {
        f_con,
        f_str,
        f_sem,
        f_prior,
        f_fuse,
        d_str: w.width,
    })
}

/// How the deepest RGB and DSM features are combined before decoding.
#[derive(Clone, Debug)]
pub enum FusionHead {
    Apf(ApfWeights),
    /// Channel concatenation followed by a 1×1 conv to the fusion width.
    Concat(Conv2d),
    /// RGB features alone through a 1×1 conv.
    RgbOnly(Conv2d),
}

impl FusionHead {
    pub fn apf<T: Real>(store: &mut ParamStore<T>, c1: usize) -> Result<Self> {
        Ok(Self::Apf(ApfWeights::new(store, "apf", c1, fusion_width(c1))?))
    }

    pub fn concat<T: Real>(store: &mut ParamStore<T>, c1: usize) -> Result<Self> {
        Ok(Self::Concat(Conv2d::pointwise(store, "fuse.concat", 2 * c1, fusion_width(c1), true)?))
    }

    pub fn rgb_only<T: Real>(store: &mut ParamStore<T>, c1: usize) -> Result<Self> {
        Ok(Self::RgbOnly(Conv2d::pointwise(store, "fuse.rgb", c1, fusion_width(c1), true)?))
    }

    pub fn width(&self) -> usize {
        match self {
            Self::Apf(w) => w.width,
            Self::Concat(c) | Self::RgbOnly(c) => c.out_ch,
        }
    }

    /// Fused B×d×h×w map from B×c₁×h×w inputs. `f_dsm` is ignored by the RGB-only head.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, f_rgb: Var, f_dsm: Option<Var>) -> Result<Var> {
        let shape = s.graph.shape(f_rgb).to_vec();
        let need_dsm = || Error::Invariant("fusion head needs DSM features".into());
        match self {
            Self::Apf(w) => s.scoped("apf", |s| {
                let dsm = f_dsm.ok_or_else(need_dsm)?;
                let tr = s.graph.channels_to_tokens(f_rgb)?;
                let td = s.graph.channels_to_tokens(dsm)?;
                let bundle = apf_forward(s, tr, td, w)?;
                s.graph.tokens_to_channels(bundle.f_fuse, shape[2], shape[3])
            }),
            Self::Concat(conv) => s.scoped("concat", |s| {
                let dsm = f_dsm.ok_or_else(need_dsm)?;
                let cat = s.graph.concat_channels(f_rgb, dsm)?;
                conv.forward(s, cat)
            }),
            Self::RgbOnly(conv) => s.scoped("rgb_proj", |s| conv.forward(s, f_rgb)),
        }
    }
}
