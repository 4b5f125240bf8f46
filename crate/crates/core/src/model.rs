//! Segmentation network: dual encoder, deepest-stage fusion head, optional
//! alignment branch and a top-down decoder producing full-resolution logits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{Alignment, LATENT_LEN};
use crate::encoder::{ConvBnRelu, DualEncoder, Encoder, EncoderOutput, TierName, NUM_STAGES, TOTAL_STRIDE};
use crate::error::{Error, Result};
use crate::fuser::FusionHead;
use crate::nn::{Conv2d, ParamStore, Session};
use crate::tensor::{Real, Var};

/// Decoder width at 1/4 resolution and below.
pub const DECODER_WIDTH: usize = 32;
/// Decoder width at 1/2 and full resolution.
pub const DECODER_FINE_WIDTH: usize = 16;
pub const DEFAULT_ALPHA: f64 = 5e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Apf,
    Concat,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Apf => "apf",
            Fusion::Concat => "concat",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "apf" => Ok(Fusion::Apf),
            "concat" => Ok(Fusion::Concat),
            other => Err(Error::Config(format!("unknown fusion `{other}` (expected apf or concat)"))),
        }
    }
}

/// Architecture switches. `dsm_tier: None` builds the RGB-only network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub rgb_tier: TierName,
    pub dsm_tier: Option<TierName>,
    pub fusion: Fusion,
    pub da_enabled: bool,
    pub da_alpha: f64,
    pub latent_len: usize,
    pub num_classes: usize,
    pub crop: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rgb_tier: TierName::Base,
            dsm_tier: Some(TierName::Small),
            fusion: Fusion::Apf,
            da_enabled: true,
            da_alpha: DEFAULT_ALPHA,
            latent_len: LATENT_LEN,
            num_classes: 6,
            crop: 64,
        }
    }
}

impl ModelConfig {
    /// Single-modal baseline: RGB encoder and decoder only.
    pub fn rgb_only(rgb_tier: TierName) -> Self {
        Self {
            rgb_tier,
            dsm_tier: None,
            da_enabled: false,
            da_alpha: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % TOTAL_STRIDE != 0 {
            return Err(Error::Config(format!("crop {} must be a positive multiple of {TOTAL_STRIDE}", self.crop)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if !(self.da_alpha >= 0.0 && self.da_alpha.is_finite()) {
            return Err(Error::Config(format!("da_alpha must be a finite non-negative number, got {}", self.da_alpha)));
        }
        if !self.da_enabled && self.da_alpha > 0.0 {
            return Err(Error::Config(format!(
                "da_alpha = {} has no effect with da_enabled = false",
                self.da_alpha
            )));
        }
        if self.da_enabled && self.dsm_tier.is_none() {
            return Err(Error::Config("alignment needs a DSM encoder".into()));
        }
        if self.da_enabled && self.latent_len == 0 {
            return Err(Error::Config("latent_len must be positive".into()));
        }
        Ok(())
    }

    pub fn multimodal(&self) -> bool {
        self.dsm_tier.is_some()
    }
}

/// Top-down decoder: each level adds 1×1 lateral projections of the encoder
/// features to the upsampled coarser level. The finest level also sees the
/// raw input so that full-resolution boundaries can be recovered.
#[derive(Clone, Debug)]
struct Decoder {
    top: Conv2d,
    /// Laterals of stages 1..=3 (RGB then, if present, DSM).
    laterals: Vec<(Conv2d, Option<Conv2d>)>,
    smooth_quarter: ConvBnRelu,
    narrow: Conv2d,
    stem_lateral: (Conv2d, Option<Conv2d>),
    smooth_half: ConvBnRelu,
    input_lateral: Conv2d,
    smooth_full: ConvBnRelu,
    classifier: Conv2d,
}

impl Decoder {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rgb: &Encoder,
        dsm: Option<&Encoder>,
        fused_width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let (d, fine) = (DECODER_WIDTH, DECODER_FINE_WIDTH);
        let top = Conv2d::pointwise(store, "dec.top", fused_width, d, true)?;
        let mut laterals = Vec::new();
        for s in 0..NUM_STAGES - 1 {
            let r = Conv2d::pointwise(store, &format!("dec.lat{}.rgb", s + 1), rgb.tier.stage_width(s), d, true)?;
            let m = dsm
                .map(|e| Conv2d::pointwise(store, &format!("dec.lat{}.dsm", s + 1), e.tier.stage_width(s), d, false))
                .transpose()?;
            laterals.push((r, m));
        }
        let conv = Conv2d::same3(store, "dec.smooth4.conv", d, d, 1)?;
        let smooth_quarter = ConvBnRelu::new(store, "dec.smooth4", conv, d)?;
        let narrow = Conv2d::pointwise(store, "dec.narrow", d, fine, true)?;
        let sr = Conv2d::pointwise(store, "dec.stem.rgb", rgb.tier.base_width, fine, true)?;
        let sd = dsm
            .map(|e| Conv2d::pointwise(store, "dec.stem.dsm", e.tier.base_width, fine, false))
            .transpose()?;
        let conv = Conv2d::same3(store, "dec.smooth2.conv", fine, fine, 1)?;
        let smooth_half = ConvBnRelu::new(store, "dec.smooth2", conv, fine)?;
        let in_ch = 3 + usize::from(dsm.is_some());
        let input_lateral = Conv2d::pointwise(store, "dec.input", in_ch, fine, true)?;
        let conv = Conv2d::same3(store, "dec.smooth1.conv", fine, fine, 1)?;
        let smooth_full = ConvBnRelu::new(store, "dec.smooth1", conv, fine)?;
        let classifier = Conv2d::pointwise(store, "dec.classifier", fine, num_classes, true)?;
        Ok(Self {
            top,
            laterals,
            smooth_quarter,
            narrow,
            stem_lateral: (sr, sd),
            smooth_half,
            input_lateral,
            smooth_full,
            classifier,
        })
    }

    fn lateral<T: Real>(
        s: &mut Session<'_, T>,
        h: Var,
        pair: &(Conv2d, Option<Conv2d>),
        rgb: Var,
        dsm: Option<Var>,
    ) -> Result<Var> {
        let up = s.graph.upsample_nearest(h, 2)?;
        let r = pair.0.forward(s, rgb)?;
        let mut h = s.graph.add(up, r)?;
        if let (Some(conv), Some(x)) = (&pair.1, dsm) {
            let m = conv.forward(s, x)?;
            h = s.graph.add(h, m)?;
        }
        Ok(h)
    }

    fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        fused: Var,
        rgb: &EncoderOutput,
        dsm: Option<&EncoderOutput>,
        input: Var,
    ) -> Result<Var> {
        let mut h = s.scoped("top", |s| self.top.forward(s, fused))?;
        for st in (0..NUM_STAGES - 1).rev() {
            h = s.scoped(&format!("lat{}", st + 1), |s| {
                Self::lateral(s, h, &self.laterals[st], rgb.stages[st], dsm.map(|d| d.stages[st]))
            })?;
        }
        h = s.scoped("smooth4", |s| self.smooth_quarter.forward(s, h))?;
        h = s.scoped("narrow", |s| self.narrow.forward(s, h))?;
        h = s.scoped("stem", |s| Self::lateral(s, h, &self.stem_lateral, rgb.stem, dsm.map(|d| d.stem)))?;
        h = s.scoped("smooth2", |s| self.smooth_half.forward(s, h))?;
        h = s.scoped("input", |s| {
            let up = s.graph.upsample_nearest(h, 2)?;
            let x = self.input_lateral.forward(s, input)?;
            s.graph.add(up, x)
        })?;
        h = s.scoped("smooth1", |s| self.smooth_full.forward(s, h))?;
        s.scoped("classifier", |s| self.classifier.forward(s, h))
    }
}

/// Encoders for the configured modalities.
#[derive(Clone, Debug)]
enum Encoders {
    Dual(DualEncoder),
    RgbOnly(Encoder),
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    /// Present only in training mode with alignment enabled.
    pub align_loss: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: ModelConfig,
    encoders: Encoders,
    head: FusionHead,
    alignment: Option<Alignment>,
    decoder: Decoder,
}

impl SegModel {
    /// Register every parameter in `store`; call `store.init(seed)` afterwards.
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (encoders, c1) = match config.dsm_tier {
            Some(dsm) => {
                let dual = DualEncoder::new(store, config.rgb_tier, dsm)?;
                let c1 = dual.rgb.tier.final_width();
                (Encoders::Dual(dual), c1)
            }
            None => {
                let enc = Encoder::new(store, "enc.rgb", config.rgb_tier.tier(), 3)?;
                let c1 = enc.tier.final_width();
                (Encoders::RgbOnly(enc), c1)
            }
        };
        let head = match (&encoders, config.fusion) {
            (Encoders::RgbOnly(_), _) => FusionHead::rgb_only(store, c1)?,
            (Encoders::Dual(_), Fusion::Apf) => FusionHead::apf(store, c1)?,
            (Encoders::Dual(_), Fusion::Concat) => FusionHead::concat(store, c1)?,
        };
        let alignment = config
            .da_enabled
            .then(|| Alignment::new(store, c1, config.latent_len))
            .transpose()?;
        let (rgb_enc, dsm_enc) = match &encoders {
            Encoders::Dual(d) => (&d.rgb, Some(&d.dsm)),
            Encoders::RgbOnly(e) => (e, None),
        };
        let decoder = Decoder::new(store, rgb_enc, dsm_enc, head.width(), config.num_classes)?;
        Ok(Self {
            config,
            encoders,
            head,
            alignment,
            decoder,
        })
    }

    /// Logits for a normalized batch. `dsm` is required for multi-modal models
    /// and ignored otherwise; `noise_seed` drives the alignment sampling.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, rgb: Var, dsm: Option<Var>, noise_seed: u64) -> Result<ModelOutput> {
        let (rgb_out, dsm_out, fused, align_loss) = match &self.encoders {
            Encoders::Dual(enc) => {
                let dsm = dsm.ok_or_else(|| Error::Invariant("multi-modal model needs a DSM batch".into()))?;
                let f = enc.forward(s, rgb, dsm)?;
                let fused = s.scoped("fusion", |s| self.head.forward(s, f.rgb.last(), Some(f.dsm_matched)))?;
                let align = match (&self.alignment, s.training()) {
                    (Some(da), true) => Some(s.scoped("da", |s| {
                        let pr = s.graph.global_avg_pool(f.rgb.last())?;
                        let pd = s.graph.global_avg_pool(f.dsm_matched)?;
                        Ok(da.forward(s, pr, pd, noise_seed)?.loss)
                    })?),
                    _ => None,
                };
                (f.rgb, Some(f.dsm), fused, align)
            }
            Encoders::RgbOnly(enc) => {
                let out = s.scoped("enc.rgb", |s| enc.forward(s, rgb))?;
                let fused = s.scoped("fusion", |s| self.head.forward(s, out.last(), None))?;
                (out, None, fused, None)
            }
        };
        let input = match dsm.filter(|_| dsm_out.is_some()) {
            Some(d) => s.graph.concat_channels(rgb, d)?,
            None => rgb,
        };
        let logits = s.scoped("decoder", |s| self.decoder.forward(s, fused, &rgb_out, dsm_out.as_ref(), input))?;
        Ok(ModelOutput { logits, align_loss })
    }
}

/// Mean cross-entropy over non-ignored pixels.
pub fn supervised_loss<T: Real>(s: &mut Session<'_, T>, logits: Var, labels: &[u8]) -> Result<Var> {
    s.graph.cross_entropy(logits, labels)
}

/// `sup + alpha · align`.
pub fn final_loss<T: Real>(s: &mut Session<'_, T>, sup: Var, align: Option<Var>, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alignment weight must be non-negative, got {alpha}")));
    }
    match align {
        Some(a) => {
            let weighted = s.graph.scale(a, T::from_f64_lossy(alpha));
            s.graph.add(sup, weighted)
        }
        None => Ok(sup),
    }
}
