//! Distribution alignment: per-sample features are mapped to Gaussian latents,
//! sampled by reparameterization, turned into discrete distributions and the
//! DSM distribution is pulled toward the (fixed) RGB one by a KL penalty.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{stream_seed, Linear, ParamStore, Session};
use crate::tensor::{Real, Tensor, Var};

/// Default latent length.
pub const LATENT_LEN: usize = 128;
/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation of a distribution row sum from 1.
pub const ROW_SUM_TOL: f64 = 1e-4;

/// Two linear heads producing the latent mean and log-variance.
#[derive(Clone, Debug)]
pub struct LatentMapper {
    pub to_mu: Linear,
    pub to_logvar: Linear,
    pub latent_len: usize,
}

impl LatentMapper {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, features: usize, latent_len: usize) -> Result<Self> {
        Ok(Self {
            to_mu: Linear::new(store, &format!("{name}.to_mu"), features, latent_len)?,
            to_logvar: Linear::new(store, &format!("{name}.to_logvar"), features, latent_len)?,
            latent_len,
        })
    }

    pub fn features(&self) -> usize {
        self.to_mu.in_features
    }
}

/// Mean, standard deviation and sample of a batch of latents, with the noise used.
#[derive(Clone, Debug)]
pub struct LatentPair<T> {
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
    pub eps: Tensor<T>,
}

/// Standard-normal noise of the given shape from a seeded generator.
pub fn standard_normal<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::from_f64_lossy(v)
    })
}

/// `z = μ + σ·ε` with `σ = exp(½·logvar)` and `ε` drawn from `seed`.
pub fn latent_map<T: Real>(s: &mut Session<'_, T>, f: Var, lm: &LatentMapper, seed: u64) -> Result<LatentPair<T>> {
    let shape = s.graph.shape(f).to_vec();
    if shape.len() != 2 || shape[1] != lm.features() {
        return Err(Error::dim(format!(
            "latent mapper expects B×{} features, got {shape:?}",
            lm.features()
        )));
    }
    let eps = standard_normal(&[shape[0], lm.latent_len], seed);
    latent_map_with_noise(s, f, lm, eps)
}

/// [`latent_map`] with caller-supplied noise.
pub fn latent_map_with_noise<T: Real>(
    s: &mut Session<'_, T>,
    f: Var,
    lm: &LatentMapper,
    eps: Tensor<T>,
) -> Result<LatentPair<T>> {
    let mu = lm.to_mu.forward(s, f)?;
    let logvar = lm.to_logvar.forward(s, f)?;
    if s.graph.shape(mu) != eps.shape() {
        return Err(Error::dim(format!(
            "noise shape {:?} differs from latent shape {:?}",
            eps.shape(),
            s.graph.shape(mu)
        )));
    }
    let half = s.graph.scale(logvar, T::from_f64_lossy(0.5));
    let sigma = s.graph.exp(half);
    let e = s.graph.constant(eps.clone());
    let noise = s.graph.mul(sigma, e)?;
    let z = s.graph.add(mu, noise)?;
    Ok(LatentPair { mu, sigma, z, eps })
}

/// Row-wise softmax over the latent dimensions.
pub fn latent_to_probs<T: Real>(s: &mut Session<'_, T>, z: Var) -> Result<Var> {
    s.graph.softmax(z)
}

fn check_stochastic<T: Real>(s: &Session<'_, T>, p: Var, what: &str) -> Result<()> {
    let t = s.graph.value(p);
    let cols = *t.shape().last().unwrap_or(&0);
    if t.rank() != 2 || cols == 0 {
        return Err(Error::dim(format!("{what} must be B×L, got {:?}", t.shape())));
    }
    for (r, row) in t.data().chunks_exact(cols).enumerate() {
        let sum: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
        let negative = row.iter().any(|v| v.to_f64_lossy() < 0.0);
        if negative || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Invariant(format!(
                "{what} row {r} is not a distribution (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Batch mean of `KL(p_dsm ‖ p_rgb)`. The RGB side is a detached target.
pub fn alignment_loss<T: Real>(s: &mut Session<'_, T>, p_dsm: Var, p_rgb: Var) -> Result<Var> {
    if s.graph.shape(p_dsm) != s.graph.shape(p_rgb) {
        return Err(Error::dim(format!(
            "alignment needs equal shapes, got {:?} and {:?}",
            s.graph.shape(p_dsm),
            s.graph.shape(p_rgb)
        )));
    }
    check_stochastic(s, p_dsm, "DSM distribution")?;
    check_stochastic(s, p_rgb, "RGB distribution")?;
    let batch = s.graph.shape(p_dsm)[0];
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let target = s.graph.detach(p_rgb);
    let q = s.graph.clamp_min(target, floor);
    let p = s.graph.clamp_min(p_dsm, floor);
    let log_q = s.graph.log(q);
    let log_p = s.graph.log(p);
    let diff = s.graph.sub(log_p, log_q)?;
    let terms = s.graph.mul(p, diff)?;
    let total = s.graph.sum(terms);
    Ok(s.graph.scale(total, T::from_f64_lossy(1.0 / batch.max(1) as f64)))
}

/// Result of one alignment pass.
#[derive(Clone, Debug)]
pub struct AlignmentOutput<T> {
    pub loss: Var,
    pub rgb: LatentPair<T>,
    pub dsm: LatentPair<T>,
}

/// RGB and DSM mappers of the alignment branch.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub rgb: LatentMapper,
    pub dsm: LatentMapper,
}

impl Alignment {
    pub fn new<T: Real>(store: &mut ParamStore<T>, features: usize, latent_len: usize) -> Result<Self> {
        Ok(Self {
            rgb: LatentMapper::new(store, "da.rgb", features, latent_len)?,
            dsm: LatentMapper::new(store, "da.dsm", features, latent_len)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, f_rgb: Var, f_dsm: Var, seed: u64) -> Result<AlignmentOutput<T>> {
        da_forward(s, f_rgb, f_dsm, &self.rgb, &self.dsm, seed)
    }
}

/// Latents for both modalities, then `KL(p_dsm ‖ p_rgb)`. Each side draws its
/// noise from its own stream derived from `seed`.
pub fn da_forward<T: Real>(
    s: &mut Session<'_, T>,
    f_rgb: Var,
    f_dsm: Var,
    lm_rgb: &LatentMapper,
    lm_dsm: &LatentMapper,
    seed: u64,
) -> Result<AlignmentOutput<T>> {
    let rgb = s.scoped("lm_rgb", |s| latent_map(s, f_rgb, lm_rgb, stream_seed(seed, "da.rgb")))?;
    let dsm = s.scoped("lm_dsm", |s| latent_map(s, f_dsm, lm_dsm, stream_seed(seed, "da.dsm")))?;
    let loss = s.scoped("kl", |s| {
        let p_rgb = latent_to_probs(s, rgb.z)?;
        let p_dsm = latent_to_probs(s, dsm.z)?;
        alignment_loss(s, p_dsm, p_rgb)
    })?;
    Ok(AlignmentOutput { loss, rgb, dsm })
}
