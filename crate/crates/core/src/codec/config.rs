use serde::{Deserialize, Serialize};

use crate::channel::channel_uses;
use crate::image_tensor::ImageDims;
use crate::{Error, Result};

/// Number of stride-2 stages; also the number of side-information scales.
pub const STAGES: usize = 4;

/// Spatial downsampling factor between the image and the latent grid.
pub const LATENT_STRIDE: usize = 1 << STAGES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// No side information anywhere.
    #[serde(rename = "point2point")]
    Point2Point,
    /// Side information at the receiver, encoded by a separate encoder.
    Wz,
    /// Like `Wz`, but the receiver reuses the transmitter's encoder parameters
    /// and every AF module also sees a binary role flag.
    WzSm,
    /// Side information at both ends.
    Cond,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Point2Point,
        VariantKind::WzSm,
        VariantKind::Wz,
        VariantKind::Cond,
    ];

    pub fn uses_side_info(self) -> bool {
        self != VariantKind::Point2Point
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Point2Point => "point2point",
            VariantKind::Wz => "wz",
            VariantKind::WzSm => "wz_sm",
            VariantKind::Cond => "cond",
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

fn default_attention_stages() -> Vec<usize> {
    vec![2, 4]
}

fn default_p_avg() -> f64 {
    1.0
}

/// Architecture hyperparameters of one codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: VariantKind,
    /// Bandwidth ratio: complex channel uses per source pixel value.
    pub rho: f64,
    pub base_width: usize,
    /// Per-stage channel counts; defaults to `(b, 2b, 4b, 4b)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_schedule: Option<[usize; STAGES]>,
    /// 1-based stage indices carrying an attention block.
    #[serde(default = "default_attention_stages")]
    pub attention_stages: Vec<usize>,
    pub image_dims: ImageDims,
    /// Average transmit power the codec is built for.
    #[serde(default = "default_p_avg")]
    pub p_avg: f64,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(variant: VariantKind, rho: f64, base_width: usize, image_dims: ImageDims) -> Self {
        Self {
            variant,
            rho,
            base_width,
            width_schedule: None,
            attention_stages: default_attention_stages(),
            image_dims,
            p_avg: default_p_avg(),
            init_seed: 0,
        }
    }

    /// Same architecture hyperparameters, different variant.
    pub fn with_variant(&self, variant: VariantKind) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn widths(&self) -> [usize; STAGES] {
        self.width_schedule.unwrap_or({
            let b = self.base_width;
            [b, 2 * b, 4 * b, 4 * b]
        })
    }

    pub fn has_attention(&self, stage: usize) -> bool {
        self.attention_stages.contains(&stage)
    }

    /// Complex channel uses `k = round(rho·C·H·W)`.
    pub fn channel_uses(&self) -> usize {
        let d = self.image_dims;
        channel_uses(self.rho, d.channels, d.height, d.width)
    }

    /// `(H/16, W/16)`.
    pub fn latent_grid(&self) -> (usize, usize) {
        (
            self.image_dims.height / LATENT_STRIDE,
            self.image_dims.width / LATENT_STRIDE,
        )
    }

    /// Real channels of the latent grid, `2k / (H/16 · W/16)`.
    pub fn latent_channels(&self) -> usize {
        let (h, w) = self.latent_grid();
        2 * self.channel_uses() / (h * w)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.image_dims;
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if d.channels == 0 || d.height == 0 || d.width == 0 {
            return Err(Error::Config(format!("empty image dims {d}")));
        }
        if d.height % LATENT_STRIDE != 0 || d.width % LATENT_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image height and width must be divisible by {LATENT_STRIDE}, got {d}"
            )));
        }
        if self.widths().contains(&0) {
            return Err(Error::Config(format!("zero stage width in {:?}", self.widths())));
        }
        if let Some(s) = self.attention_stages.iter().find(|s| !(1..=STAGES).contains(*s)) {
            return Err(Error::Config(format!("attention stage {s} outside 1..={STAGES}")));
        }
        if !(self.p_avg > 0.0) {
            return Err(Error::Config(format!("p_avg must be positive, got {}", self.p_avg)));
        }
        let k = self.channel_uses();
        let (h, w) = self.latent_grid();
        let cells = h * w;
        // Split-half packing needs an even channel count: k must tile the grid.
        if k == 0 || k % cells != 0 {
            return Err(Error::Config(format!(
                "rho={} with W={} H={} gives k={k} channel uses, which does not tile the \
                 {h}x{w} latent grid into an integer number of complex channels",
                self.rho, d.width, d.height
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_dims() -> ImageDims {
        ImageDims::new(3, 128, 256)
    }

    #[test]
    fn channel_uses_at_paper_scale() {
        let wz = ModelConfig::new(VariantKind::Wz, 1.0 / 16.0, 32, paper_dims());
        assert_eq!(wz.channel_uses(), 6144);
        assert_eq!(wz.latent_channels(), 96);
        let p2p = ModelConfig::new(VariantKind::Point2Point, 1.0 / 32.0, 32, paper_dims());
        assert_eq!(p2p.channel_uses(), 3072);
        assert_eq!(p2p.latent_channels(), 48);
        assert!(wz.validate().is_ok() && p2p.validate().is_ok());
    }

    #[test]
    fn rejects_non_integer_latent_width() {
        // 3*16*32*0.3 = 460.8 -> k = 461, not a multiple of the 1x2 grid
        let cfg = ModelConfig::new(VariantKind::Wz, 0.3, 8, ImageDims::new(3, 16, 32));
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("rho=0.3") && err.contains("W=32") && err.contains("H=16"), "{err}");
    }

    #[test]
    fn rejects_bad_dims_and_rho() {
        let cfg = ModelConfig::new(VariantKind::Wz, 0.125, 8, ImageDims::new(3, 20, 32));
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::new(VariantKind::Wz, 1.5, 8, ImageDims::new(3, 16, 32));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let text = r#"
            variant = "wz_sm"
            rho = 0.125
            base_width = 8
            image_dims = { channels = 3, height = 16, width = 32 }
        "#;
        let cfg: ModelConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.variant, VariantKind::WzSm);
        assert_eq!(cfg.attention_stages, vec![2, 4]);
        assert_eq!(cfg.widths(), [8, 16, 32, 32]);
        let again: ModelConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn serde_names_match_display_names() {
        for v in VariantKind::ALL {
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
            assert_eq!(v.name().parse::<VariantKind>().unwrap(), v);
        }
    }
}
