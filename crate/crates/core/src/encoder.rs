//! Asymmetric dual encoder: a deep residual conv encoder for RGB, a shallower
//! one for DSM, and the 1×1 channel matcher that lifts DSM features to the RGB
//! width at the fusion stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ParamStore, Session};
use crate::tensor::{Real, Var};

pub const NUM_STAGES: usize = 4;
/// Spatial reduction of the stem (two stride-2 convolutions).
pub const STEM_STRIDE: usize = 4;
/// Total reduction at the last stage; inputs must be divisible by it.
pub const TOTAL_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierName {
    Tiny,
    Small,
    Base,
}

impl TierName {
    pub const ALL: [TierName; 3] = [TierName::Tiny, TierName::Small, TierName::Base];

    pub fn tier(self) -> EncoderTier {
        match self {
            TierName::Tiny => EncoderTier {
                name: self,
                stage_depths: [1, 1, 1, 1],
                base_width: 16,
            },
            TierName::Small => EncoderTier {
                name: self,
                stage_depths: [2, 2, 2, 2],
                base_width: 24,
            },
            TierName::Base => EncoderTier {
                name: self,
                stage_depths: [2, 2, 4, 2],
                base_width: 32,
            },
        }
    }
}

impl fmt::Display for TierName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TierName::Tiny => "tiny",
            TierName::Small => "small",
            TierName::Base => "base",
        })
    }
}

impl FromStr for TierName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tiny" => Ok(TierName::Tiny),
            "small" => Ok(TierName::Small),
            "base" => Ok(TierName::Base),
            other => Err(Error::Config(format!(
                "unknown encoder tier `{other}` (expected tiny, small or base)"
            ))),
        }
    }
}

/// Capacity descriptor: residual blocks per stage and the stage-0 width.
/// Stage `s` has `base_width · 2^s` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderTier {
    pub name: TierName,
    pub stage_depths: [usize; NUM_STAGES],
    pub base_width: usize,
}

impl EncoderTier {
    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn final_width(&self) -> usize {
        self.stage_width(NUM_STAGES - 1)
    }
}

/// conv → BN → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, conv: Conv2d, channels: usize) -> Result<Self> {
        Ok(Self {
            conv,
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}

/// Pre-activation residual block: `x + conv(relu(bn(conv(relu(bn(x))))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), width)?,
            conv1: Conv2d::same3(store, &format!("{name}.conv1"), width, width, 1)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), width)?,
            conv2: Conv2d::same3(store, &format!("{name}.conv2"), width, width, 1)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.bn1.forward(s, x)?;
        let h = s.graph.relu(h);
        let h = self.conv1.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.conv2.forward(s, h)?;
        s.graph.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<ConvBnRelu>,
    blocks: Vec<ResBlock>,
}

/// Per-branch output: the stem features at 1/2 resolution and one feature map per stage.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub stem: Var,
    pub stages: Vec<Var>,
    /// Channel width of the last stage (c₁ for RGB, c₂ for DSM).
    pub width: usize,
}

impl EncoderOutput {
    pub fn last(&self) -> Var {
        *self.stages.last().expect("encoder has stages")
    }
}

/// Stem (two stride-2 3×3 conv-BN-ReLU) followed by four residual stages; stages
/// 2–4 open with a stride-2 conv-BN-ReLU that doubles the width.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub tier: EncoderTier,
    pub in_channels: usize,
    stem: [ConvBnRelu; 2],
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, tier: EncoderTier, in_channels: usize) -> Result<Self> {
        let w0 = tier.base_width;
        let conv0 = Conv2d::same3(store, &format!("{name}.stem0.conv"), in_channels, w0, 2)?;
        let conv1 = Conv2d::same3(store, &format!("{name}.stem1.conv"), w0, w0, 2)?;
        let stem = [
            ConvBnRelu::new(store, &format!("{name}.stem0"), conv0, w0)?,
            ConvBnRelu::new(store, &format!("{name}.stem1"), conv1, w0)?,
        ];
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (si, &depth) in tier.stage_depths.iter().enumerate() {
            let width = tier.stage_width(si);
            let prefix = format!("{name}.stage{}", si + 1);
            let down = if si == 0 {
                None
            } else {
                let conv = Conv2d::same3(store, &format!("{prefix}.down.conv"), width / 2, width, 2)?;
                Some(ConvBnRelu::new(store, &format!("{prefix}.down"), conv, width)?)
            };
            let blocks = (0..depth)
                .map(|b| ResBlock::new(store, &format!("{prefix}.block{b}"), width))
                .collect::<Result<_>>()?;
            stages.push(Stage { down, blocks });
        }
        Ok(Self {
            tier,
            in_channels,
            stem,
            stages,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<EncoderOutput> {
        let shape = s.graph.shape(x).to_vec();
        check_input(&shape, self.in_channels)?;
        let stem_half = s.scoped("stem0", |s| self.stem[0].forward(s, x))?;
        let mut h = s.scoped("stem1", |s| self.stem[1].forward(s, stem_half))?;
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for (si, stage) in self.stages.iter().enumerate() {
            h = s.scoped(&format!("stage{}", si + 1), |s| {
                let mut h = h;
                if let Some(down) = &stage.down {
                    h = s.scoped("down", |s| down.forward(s, h))?;
                }
                for (bi, block) in stage.blocks.iter().enumerate() {
                    h = s.scoped(&format!("block{bi}"), |s| block.forward(s, h))?;
                }
                Ok(h)
            })?;
            outs.push(h);
        }
        Ok(EncoderOutput {
            stem: stem_half,
            stages: outs,
            width: self.tier.final_width(),
        })
    }
}

fn check_input(shape: &[usize], channels: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::dim(format!(
            "encoder expects B×{channels}×H×W input, got {shape:?}"
        )));
    }
    if shape[2] % TOTAL_STRIDE != 0 || shape[3] % TOTAL_STRIDE != 0 || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::dim(format!(
            "input extents {}×{} must be positive multiples of {TOTAL_STRIDE}",
            shape[2], shape[3]
        )));
    }
    Ok(())
}

/// 1×1 conv (c₂→c₁, no bias) + BN + ReLU lifting DSM features to the RGB width.
#[derive(Clone, Debug)]
pub struct ChannelMatcher {
    pub proj: ConvBnRelu,
    pub in_width: usize,
    pub out_width: usize,
}

impl ChannelMatcher {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_width: usize, out_width: usize) -> Result<Self> {
        let conv = Conv2d::pointwise(store, &format!("{name}.conv"), in_width, out_width, false)?;
        Ok(Self {
            proj: ConvBnRelu::new(store, name, conv, out_width)?,
            in_width,
            out_width,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, f_dsm: Var) -> Result<Var> {
        let shape = s.graph.shape(f_dsm);
        if shape.len() != 4 || shape[1] != self.in_width {
            return Err(Error::dim(format!(
                "channel matcher expects {} input channels, got shape {shape:?}",
                self.in_width
            )));
        }
        self.proj.forward(s, f_dsm)
    }
}

/// Encoder outputs for both modalities; the DSM pyramid's last stage has been
/// channel-matched when the two tiers differ in width.
#[derive(Clone, Debug)]
pub struct DualFeatures {
    pub rgb: EncoderOutput,
    pub dsm: EncoderOutput,
    /// DSM last-stage features at the RGB width.
    pub dsm_matched: Var,
}

/// RGB encoder, DSM encoder and (for unequal widths) the channel matcher.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub rgb: Encoder,
    pub dsm: Encoder,
    pub matcher: Option<ChannelMatcher>,
}

impl DualEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rgb_tier: TierName, dsm_tier: TierName) -> Result<Self> {
        let rgb = Encoder::new(store, "enc.rgb", rgb_tier.tier(), 3)?;
        let dsm = Encoder::new(store, "enc.dsm", dsm_tier.tier(), 1)?;
        let (c1, c2) = (rgb.tier.final_width(), dsm.tier.final_width());
        // equal widths need no matching
        let matcher = (c1 != c2)
            .then(|| ChannelMatcher::new(store, "enc.cm", c2, c1))
            .transpose()?;
        Ok(Self { rgb, dsm, matcher })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, rgb: Var, dsm: Var) -> Result<DualFeatures> {
        let (sr, sd) = (s.graph.shape(rgb).to_vec(), s.graph.shape(dsm).to_vec());
        if sr.len() != 4 || sd.len() != 4 || sr[0] != sd[0] || sr[2..] != sd[2..] {
            return Err(Error::dim(format!(
                "RGB {sr:?} and DSM {sd:?} batches must share batch size and extents"
            )));
        }
        let rgb_out = s.scoped("enc.rgb", |s| self.rgb.forward(s, rgb))?;
        let dsm_out = s.scoped("enc.dsm", |s| self.dsm.forward(s, dsm))?;
        let dsm_matched = match &self.matcher {
            Some(m) => s.scoped("enc.cm", |s| m.forward(s, dsm_out.last()))?,
            None => dsm_out.last(),
        };
        Ok(DualFeatures {
            rgb: rgb_out,
            dsm: dsm_out,
            dsm_matched,
        })
    }
}
