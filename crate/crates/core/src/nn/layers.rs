use super::{Init, ParamId, ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::NormStats;
use crate::tensor::{Real, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// `y = x·Wᵀ + b` over the last axis of an `N×in` or `B×N×in` input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add_param(
                &format!("{name}.weight"),
                &[out_features, in_features],
                Init::KaimingNormal { fan_in: in_features },
            )?,
            bias: store.add_param(&format!("{name}.bias"), &[out_features], Init::Constant(0.0))?,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let last = s.graph.shape(x).last().copied();
        if last != Some(self.in_features) {
            return Err(Error::dim(format!(
                "linear expects last extent {}, got shape {:?}",
                self.in_features,
                s.graph.shape(x)
            )));
        }
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let wt = s.graph.transpose(w)?;
        let y = s.graph.matmul(x, wt)?;
        s.graph.add(y, b)
    }
}

/// 2-D convolution with square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add_param(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::KaimingNormal {
                fan_in: in_ch * kernel * kernel,
            },
        )?;
        let bias = if bias {
            Some(store.add_param(&format!("{name}.bias"), &[out_ch], Init::Constant(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        })
    }

    /// Same-padded 3×3 convolution.
    pub fn same3<T: Real>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, 3, stride, 1, false)
    }

    pub fn pointwise<T: Real>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, bias: bool) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, 1, 1, 0, bias)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization over every axis except the channel axis (axis 1).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(&format!("{name}.gamma"), &[channels], Init::Constant(1.0))?,
            beta: store.add_param(&format!("{name}.beta"), &[channels], Init::Constant(0.0))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.add_buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    /// Training mode normalizes by batch statistics and folds them into the
    /// running buffers; eval mode normalizes by the running buffers.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let eps = T::from_f64_lossy(self.eps);
        if s.training() {
            let (y, moments) = s.graph.batch_norm(x, gamma, beta, NormStats::Batch { eps })?;
            let moments = moments.expect("batch statistics in training mode");
            let m = T::from_f64_lossy(self.momentum);
            let keep = T::one() - m;
            let store = s.store_mut();
            for (r, &v) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&moments.mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&moments.var) {
                *r = keep * *r + m * v;
            }
            Ok(y)
        } else {
            let mean = s.store().get(self.running_mean).data().to_vec();
            let var = s.store().get(self.running_var).data().to_vec();
            let (y, _) = s.graph.batch_norm(
                x,
                gamma,
                beta,
                NormStats::Running {
                    mean: &mean,
                    var: &var,
                    eps,
                },
            )?;
            Ok(y)
        }
    }
}
