//! Encoder and decoder networks.
//!
//! Encoder stage `i` (1..=4) halves the resolution: strided 3x3 conv, residual
//! block, optional attention, AF gating. Its output is the tap `s_i`. A 3x3
//! head maps the last stage to the latent grid.
//!
//! The decoder mirrors this from the latent grid upwards. The stage at scale
//! `i` fuses `s_i` (when using side information) into its input conv, runs
//! the same block sequence and upsamples by 2 with conv + pixel shuffle. After
//! the last upsampling the raw side image is fused into a 3x3 refine conv, and
//! a final 3x3 conv with a sigmoid produces the reconstruction.
//!
//! Every conv that sees side information is a [`FusedConv2d`], so a side-aware
//! network shares its side-free parameter names with the point-to-point one.

use candle_core::Tensor;

use super::config::{ModelConfig, STAGES};
use crate::nn::{
    leaky_relu, pixel_shuffle, sigmoid, AfModule, AttentionBlock, Conv2d, FusedConv2d, ParamBuilder, ResBlock,
};
use crate::{Error, Result};

/// Encoder activations at the four scales `1/2 .. 1/16`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: [Tensor; STAGES],
}

impl FeaturePyramid {
    /// 1-based level, `s_1 .. s_4`.
    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i - 1]
    }

    pub fn levels(&self) -> &[Tensor; STAGES] {
        &self.levels
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down: FusedConv2d,
    res: ResBlock,
    attn: Option<AttentionBlock>,
    af: AfModule,
}

impl EncoderStage {
    fn forward(&self, x: &Tensor, side: Option<&Tensor>, context: &Tensor) -> candle_core::Result<Tensor> {
        let h = leaky_relu(&self.down.forward(x, side)?)?;
        let h = self.res.forward(&h)?;
        let h = match &self.attn {
            Some(a) => a.forward(&h)?,
            None => h,
        };
        self.af.forward(&h, context)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    stages: Vec<EncoderStage>,
    head: Option<FusedConv2d>,
    fuses_side: bool,
}

impl Encoder {
    /// `context_dims`: SNR only (1) or SNR plus role flag (2).
    /// `with_head`: side-only encoders have no latent head.
    /// `fuses_side`: concatenate a transmitter-side pyramid into every stage.
    pub(crate) fn new(
        pb: &ParamBuilder,
        cfg: &ModelConfig,
        context_dims: usize,
        with_head: bool,
        fuses_side: bool,
    ) -> Result<Self> {
        let widths = cfg.widths();
        let mut stages = Vec::with_capacity(STAGES);
        let mut c_in = cfg.image_dims.channels;
        for (i, &w) in widths.iter().enumerate() {
            let stage = i + 1;
            let fused = if fuses_side && i > 0 { widths[i - 1] } else { 0 };
            let spb = pb.pp(format!("stage{stage}"));
            stages.push(EncoderStage {
                down: FusedConv2d::new(&spb, "down", c_in, fused, w, 3, 2)?,
                res: ResBlock::new(&spb.pp("res"), w)?,
                attn: cfg
                    .has_attention(stage)
                    .then(|| AttentionBlock::new(&spb.pp("attn"), w))
                    .transpose()?,
                af: AfModule::new(&spb.pp("af"), w, context_dims)?,
            });
            c_in = w;
        }
        let head = if with_head {
            let fused = if fuses_side { widths[STAGES - 1] } else { 0 };
            Some(FusedConv2d::new(pb, "head", c_in, fused, cfg.latent_channels(), 3, 1)?)
        } else {
            None
        };
        Ok(Self {
            stages,
            head,
            fuses_side,
        })
    }

    /// Returns the latent grid (if this encoder has a head) and the taps.
    pub(crate) fn forward(
        &self,
        x: &Tensor,
        context: &Tensor,
        tx_side: Option<&FeaturePyramid>,
    ) -> Result<(Option<Tensor>, FeaturePyramid)> {
        if self.fuses_side != tx_side.is_some() {
            return Err(Error::invalid(
                "transmitter-side pyramid must be supplied exactly when the encoder fuses it",
            ));
        }
        let mut taps: Vec<Tensor> = Vec::with_capacity(STAGES);
        let mut h = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let side = tx_side.filter(|_| i > 0).map(|p| p.level(i));
            h = stage.forward(&h, side, context)?;
            taps.push(h.clone());
        }
        let latent = match &self.head {
            Some(head) => Some(head.forward(&h, tx_side.map(|p| p.level(STAGES)))?),
            None => None,
        };
        let levels: [Tensor; STAGES] = taps.try_into().expect("one tap per stage");
        Ok((latent, FeaturePyramid { levels }))
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    fuse: FusedConv2d,
    res: ResBlock,
    attn: Option<AttentionBlock>,
    af: AfModule,
    up: Conv2d,
}

impl DecoderStage {
    fn forward(&self, x: &Tensor, side: Option<&Tensor>, context: &Tensor) -> candle_core::Result<Tensor> {
        let h = leaky_relu(&self.fuse.forward(x, side)?)?;
        let h = self.res.forward(&h)?;
        let h = match &self.attn {
            Some(a) => a.forward(&h)?,
            None => h,
        };
        let h = self.af.forward(&h, context)?;
        leaky_relu(&pixel_shuffle(&self.up.forward(&h)?, 2)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    /// Ordered coarse to fine: scales 4, 3, 2, 1.
    stages: Vec<DecoderStage>,
    refine: FusedConv2d,
    output: Conv2d,
    fuses_side: bool,
}

impl Decoder {
    pub(crate) fn new(pb: &ParamBuilder, cfg: &ModelConfig, fuses_side: bool) -> Result<Self> {
        let widths = cfg.widths();
        let mut stages = Vec::with_capacity(STAGES);
        let mut c_in = cfg.latent_channels();
        for scale in (1..=STAGES).rev() {
            let w = widths[scale - 1];
            let next = widths[scale.saturating_sub(2)];
            let side = if fuses_side { widths[scale - 1] } else { 0 };
            let spb = pb.pp(format!("stage{scale}"));
            stages.push(DecoderStage {
                fuse: FusedConv2d::new(&spb, "fuse", c_in, side, w, 3, 1)?,
                res: ResBlock::new(&spb.pp("res"), w)?,
                attn: cfg
                    .has_attention(scale)
                    .then(|| AttentionBlock::new(&spb.pp("attn"), w))
                    .transpose()?,
                af: AfModule::new(&spb.pp("af"), w, 1)?,
                up: Conv2d::new(&spb.pp("up"), w, 4 * next, 3, 1)?,
            });
            c_in = next;
        }
        let image_c = cfg.image_dims.channels;
        let side = if fuses_side { image_c } else { 0 };
        Ok(Self {
            stages,
            refine: FusedConv2d::new(pb, "refine", c_in, side, c_in, 3, 1)?,
            output: Conv2d::new(&pb.pp("output"), c_in, image_c, 3, 1)?,
            fuses_side,
        })
    }

    pub(crate) fn forward(
        &self,
        latent: &Tensor,
        context: &Tensor,
        side: Option<(&FeaturePyramid, &Tensor)>,
    ) -> Result<Tensor> {
        if self.fuses_side != side.is_some() {
            return Err(Error::invalid(
                "side information must be supplied exactly when the decoder fuses it",
            ));
        }
        let mut h = latent.clone();
        for (stage, scale) in self.stages.iter().zip((1..=STAGES).rev()) {
            h = stage.forward(&h, side.map(|(p, _)| p.level(scale)), context)?;
        }
        let h = leaky_relu(&self.refine.forward(&h, side.map(|(_, x_side)| x_side))?)?;
        Ok(sigmoid(&self.output.forward(&h)?)?)
    }
}
