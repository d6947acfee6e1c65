//! Declarative architecture descriptions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockFamily {
    ResnetBasic,
    ResnetBottleneck,
    ResnextBottleneck,
}

impl BlockFamily {
    pub fn expansion(self) -> usize {
        match self {
            BlockFamily::ResnetBasic => 1,
            BlockFamily::ResnetBottleneck | BlockFamily::ResnextBottleneck => 4,
        }
    }
}

/// Residual encoder layout.
///
/// Stage `i` (0-based) has `planes << i` planes; bottleneck blocks widen
/// their grouped 3x3 convolution to `planes_i * base_width / 64 * cardinality`
/// and emit `planes_i * 4` channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub family: BlockFamily,
    pub stage_blocks: [usize; 4],
    #[serde(default = "default_cardinality")]
    pub cardinality: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_planes")]
    pub planes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_planes")]
    pub stem_channels: usize,
}

fn default_cardinality() -> usize {
    1
}

fn default_base_width() -> usize {
    64
}

fn default_planes() -> usize {
    64
}

fn default_in_channels() -> usize {
    1
}

impl BackboneSpec {
    fn resnet(family: BlockFamily, stage_blocks: [usize; 4]) -> Self {
        Self {
            family,
            stage_blocks,
            cardinality: 1,
            base_width: 64,
            planes: 64,
            in_channels: 1,
            stem_channels: 64,
        }
    }

    pub fn resnet34() -> Self {
        Self::resnet(BlockFamily::ResnetBasic, [3, 4, 6, 3])
    }

    pub fn resnet50() -> Self {
        Self::resnet(BlockFamily::ResnetBottleneck, [3, 4, 6, 3])
    }

    pub fn resnet101() -> Self {
        Self::resnet(BlockFamily::ResnetBottleneck, [3, 4, 23, 3])
    }

    pub fn resnext101_32x48d() -> Self {
        Self {
            cardinality: 32,
            base_width: 48,
            ..Self::resnet(BlockFamily::ResnextBottleneck, [3, 4, 23, 3])
        }
    }

    /// Half-width two-block-per-stage encoder for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            planes: 32,
            stem_channels: 32,
            in_channels: 1,
            ..Self::resnet(BlockFamily::ResnetBasic, [2, 2, 2, 2])
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.cardinality == 0 || self.base_width == 0 || self.planes == 0 {
            return Err(Error::Config(
                "cardinality, base_width and planes must be positive".into(),
            ));
        }
        if self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        match self.family {
            BlockFamily::ResnetBasic if self.cardinality != 1 || self.base_width != 64 => Err(
                Error::Config("basic blocks support only cardinality 1 and base_width 64".into()),
            ),
            BlockFamily::ResnetBottleneck if self.cardinality != 1 => Err(Error::Config(
                "plain bottleneck blocks use cardinality 1; use resnext_bottleneck".into(),
            )),
            _ => {
                for stage in 0..4 {
                    let width = self.block_width(stage);
                    if width == 0 || !width.is_multiple_of(self.cardinality) {
                        return Err(Error::Config(format!(
                            "stage {stage} width {width} must be a positive multiple of cardinality {}",
                            self.cardinality
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn stage_planes(&self, stage: usize) -> usize {
        self.planes << stage
    }

    /// Width of the (grouped) 3x3 convolution inside a block of `stage`.
    pub fn block_width(&self, stage: usize) -> usize {
        match self.family {
            BlockFamily::ResnetBasic => self.stage_planes(stage),
            _ => self.stage_planes(stage) * self.base_width / 64 * self.cardinality,
        }
    }

    pub fn groups(&self) -> usize {
        match self.family {
            BlockFamily::ResnextBottleneck => self.cardinality,
            _ => 1,
        }
    }

    pub fn stage_out_channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.stage_planes(i) * self.family.expansion())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    Sum,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub pyramid_channels: usize,
    pub segmentation_channels: usize,
    pub norm_groups: usize,
    pub merge: Merge,
    pub final_upsample_factor: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            pyramid_channels: 256,
            segmentation_channels: 128,
            norm_groups: 32,
            merge: Merge::Sum,
            final_upsample_factor: 4,
        }
    }
}

impl DecoderSpec {
    pub fn desk() -> Self {
        Self {
            pyramid_channels: 64,
            segmentation_channels: 32,
            norm_groups: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pyramid_channels == 0 || self.segmentation_channels == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if self.norm_groups == 0
            || self.norm_groups > self.segmentation_channels
            || !self.segmentation_channels.is_multiple_of(self.norm_groups)
        {
            return Err(Error::Config(format!(
                "segmentation_channels {} must be a multiple of norm_groups {}",
                self.segmentation_channels, self.norm_groups
            )));
        }
        if self.final_upsample_factor != 4 {
            return Err(Error::Config(
                "the fused map sits at stride 4, so final_upsample_factor must be 4".into(),
            ));
        }
        Ok(())
    }

    /// Number of conv units in the segmentation block of pyramid level `level`
    /// (0 = P2 ... 3 = P5).
    pub fn units(level: usize) -> usize {
        level.max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub decoder: DecoderSpec,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
}

fn default_num_classes() -> usize {
    crate::NUM_CLASSES
}

fn default_input_size() -> usize {
    224
}

/// Names accepted by [`ModelSpec::preset`].
pub const PRESETS: [&str; 6] = [
    "resnet34",
    "resnet50",
    "resnet101",
    "resnext101_32x48d",
    "desk",
    "resnext_tiny",
];

impl ModelSpec {
    pub fn new(backbone: BackboneSpec) -> Self {
        Self {
            backbone,
            decoder: DecoderSpec::default(),
            num_classes: crate::NUM_CLASSES,
            input_size: 224,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "resnet34" => Self::new(BackboneSpec::resnet34()),
            "resnet50" => Self::new(BackboneSpec::resnet50()),
            "resnet101" => Self::new(BackboneSpec::resnet101()),
            "resnext101_32x48d" => Self::new(BackboneSpec::resnext101_32x48d()),
            "desk" => Self {
                decoder: DecoderSpec::desk(),
                ..Self::new(BackboneSpec::desk())
            },
            "resnext_tiny" => Self {
                backbone: BackboneSpec {
                    family: BlockFamily::ResnextBottleneck,
                    stage_blocks: [1, 1, 1, 1],
                    cardinality: 32,
                    base_width: 4,
                    planes: 16,
                    in_channels: 3,
                    stem_channels: 16,
                },
                decoder: DecoderSpec {
                    pyramid_channels: 32,
                    segmentation_channels: 16,
                    norm_groups: 4,
                    ..DecoderSpec::default()
                },
                num_classes: crate::NUM_CLASSES,
                input_size: 64,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnext_stage_widths() {
        let b = BackboneSpec::resnext101_32x48d();
        let widths: Vec<usize> = (0..4).map(|i| b.block_width(i)).collect();
        assert_eq!(widths, [1536, 3072, 6144, 12288]);
        assert_eq!(b.stage_out_channels(), [256, 512, 1024, 2048]);
        assert_eq!((0..4).map(|i| b.block_width(i) / b.cardinality).collect::<Vec<_>>(), [48, 96, 192, 384]);
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            ModelSpec::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(BackboneSpec::resnet34().stage_out_channels(), [64, 128, 256, 512]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ModelSpec::new(BackboneSpec::resnet50());
        spec.num_classes = 1;
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::new(BackboneSpec::resnet50());
        spec.input_size = 100;
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::new(BackboneSpec::resnet50());
        spec.backbone.stage_blocks[2] = 0;
        assert!(spec.validate().is_err());

        let mut spec = ModelSpec::new(BackboneSpec::resnet50());
        spec.decoder.norm_groups = 48;
        assert!(spec.validate().is_err());

        assert!(ModelSpec::preset("vgg16").is_err());
    }
}
