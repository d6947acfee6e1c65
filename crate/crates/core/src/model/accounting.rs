//! Analytic parameter and multiply-accumulate accounting.
//!
//! The layer graph here is derived from a [`ModelSpec`] by shape arithmetic
//! alone; no weights are allocated. Convolutions contribute
//! `k^2 * Cin/groups * Cout * Hout * Wout` MACs and `k^2 * Cin/groups * Cout`
//! weights (+ `Cout` with bias). Norm layers carry two parameters per
//! channel. Norms, rectifiers, pooling, upsampling and sums count zero MACs.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use super::spec::{BlockFamily, DecoderSpec, ModelSpec};
use crate::error::{Error, Result};

/// Batch size implied by the reported FLOPs columns.
pub const FLOPS_BATCH: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Encoder,
    Decoder,
    Head,
    Total,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Encoder, Part::Decoder, Part::Head, Part::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            Part::Encoder => "encoder",
            Part::Decoder => "decoder",
            Part::Head => "head",
            Part::Total => "total",
        }
    }

    fn contains(self, other: Part) -> bool {
        self == Part::Total || self == other
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Part::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model part `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerStats {
    pub name: String,
    pub part: Part,
    pub params: u64,
    pub macs: u64,
}

struct GraphBuilder {
    part: Part,
    layers: Vec<LayerStats>,
}

impl GraphBuilder {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
        out_hw: usize,
    ) {
        let weights = (kernel * kernel * (cin / groups) * cout) as u64;
        self.layers.push(LayerStats {
            name,
            part: self.part,
            params: weights + if bias { cout as u64 } else { 0 },
            macs: weights * (out_hw * out_hw) as u64,
        });
    }

    fn norm(&mut self, name: String, channels: usize) {
        self.layers.push(LayerStats {
            name,
            part: self.part,
            params: 2 * channels as u64,
            macs: 0,
        });
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

/// Per-layer statistics for `spec` at a square input of side `input_size`.
pub fn layer_graph(spec: &ModelSpec, input_size: usize) -> Vec<LayerStats> {
    let bb = &spec.backbone;
    let mut g = GraphBuilder {
        part: Part::Encoder,
        layers: Vec::new(),
    };

    let mut size = conv_out(input_size, 7, 2, 3);
    g.conv("encoder.stem.conv".into(), bb.in_channels, bb.stem_channels, 7, 1, false, size);
    g.norm("encoder.stem.bn".into(), bb.stem_channels);
    size = conv_out(size, 3, 2, 1);

    let mut in_ch = bb.stem_channels;
    let mut level_sizes = [0usize; 4];
    for (stage, &blocks) in bb.stage_blocks.iter().enumerate() {
        let planes = bb.stage_planes(stage);
        let width = bb.block_width(stage);
        let out_ch = planes * bb.family.expansion();
        for b in 0..blocks {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let out_size = conv_out(size, 3, stride, 1);
            let prefix = format!("encoder.stages.{stage}.{b}");
            match bb.family {
                BlockFamily::ResnetBasic => {
                    g.conv(format!("{prefix}.conv1"), in_ch, planes, 3, 1, false, out_size);
                    g.norm(format!("{prefix}.bn1"), planes);
                    g.conv(format!("{prefix}.conv2"), planes, planes, 3, 1, false, out_size);
                    g.norm(format!("{prefix}.bn2"), planes);
                }
                _ => {
                    g.conv(format!("{prefix}.conv1"), in_ch, width, 1, 1, false, size);
                    g.norm(format!("{prefix}.bn1"), width);
                    g.conv(format!("{prefix}.conv2"), width, width, 3, bb.groups(), false, out_size);
                    g.norm(format!("{prefix}.bn2"), width);
                    g.conv(format!("{prefix}.conv3"), width, out_ch, 1, 1, false, out_size);
                    g.norm(format!("{prefix}.bn3"), out_ch);
                }
            }
            if stride != 1 || in_ch != out_ch {
                g.conv(format!("{prefix}.downsample.conv"), in_ch, out_ch, 1, 1, false, out_size);
                g.norm(format!("{prefix}.downsample.bn"), out_ch);
            }
            in_ch = out_ch;
            size = out_size;
        }
        level_sizes[stage] = size;
    }

    let dec = &spec.decoder;
    g.part = Part::Decoder;
    for (level, &c) in bb.stage_out_channels().iter().enumerate() {
        g.conv(
            format!("decoder.lateral.{level}"),
            c,
            dec.pyramid_channels,
            1,
            1,
            true,
            level_sizes[level],
        );
    }
    for (level, &level_size) in level_sizes.iter().enumerate() {
        let mut s = level_size;
        for u in 0..DecoderSpec::units(level) {
            let cin = if u == 0 {
                dec.pyramid_channels
            } else {
                dec.segmentation_channels
            };
            g.conv(
                format!("decoder.branches.{level}.{u}.conv"),
                cin,
                dec.segmentation_channels,
                3,
                1,
                false,
                s,
            );
            g.norm(format!("decoder.branches.{level}.{u}.norm"), dec.segmentation_channels);
            if level > 0 {
                s *= 2;
            }
        }
    }

    g.part = Part::Head;
    g.conv(
        "head.conv".into(),
        dec.segmentation_channels,
        spec.num_classes,
        1,
        1,
        true,
        level_sizes[0],
    );
    g.layers
}

pub fn count_params(spec: &ModelSpec, part: Part) -> u64 {
    layer_graph(spec, spec.input_size)
        .iter()
        .filter(|l| part.contains(l.part))
        .map(|l| l.params)
        .sum()
}

/// Per-sample multiply-accumulates.
pub fn count_macs(spec: &ModelSpec, part: Part, input_size: usize) -> u64 {
    layer_graph(spec, input_size)
        .iter()
        .filter(|l| part.contains(l.part))
        .map(|l| l.macs)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StatsRow {
    pub model: String,
    pub part: Part,
    pub params: u64,
    pub macs: u64,
    pub flops_batch8: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StatsTable {
    pub rows: Vec<StatsRow>,
}

pub const STATS_HEADER: [&str; 5] = ["model", "part", "params", "macs", "flops_batch8"];

/// Encoder / decoder / head / total rows for each named spec.
pub fn stats_table(specs: &[(String, ModelSpec)]) -> StatsTable {
    let mut rows = Vec::with_capacity(specs.len() * 4);
    for (name, spec) in specs {
        for part in Part::ALL {
            let macs = count_macs(spec, part, spec.input_size);
            rows.push(StatsRow {
                model: name.clone(),
                part,
                params: count_params(spec, part),
                macs,
                flops_batch8: macs * FLOPS_BATCH,
            });
        }
    }
    StatsTable { rows }
}

impl StatsTable {
    pub fn get(&self, model: &str, part: Part) -> Option<&StatsRow> {
        self.rows.iter().find(|r| r.model == model && r.part == part)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(STATS_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.part.as_str().to_string(),
                r.params.to_string(),
                r.macs.to_string(),
                r.flops_batch8.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let model_w = self
            .rows
            .iter()
            .map(|r| r.model.len())
            .chain(std::iter::once(5))
            .max()
            .unwrap_or(5);
        let _ = writeln!(
            out,
            "{:<model_w$}  {:<8}  {:>14}  {:>12}  {:>12}",
            "model", "part", "params", "macs", "flops_batch8"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<model_w$}  {:<8}  {:>14}  {:>12.4e}  {:>12.4e}",
                r.model,
                r.part.as_str(),
                r.params,
                r.macs as f64,
                r.flops_batch8 as f64
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::BackboneSpec;

    #[test]
    fn head_parameter_count() {
        let spec = ModelSpec::new(BackboneSpec::resnet50());
        assert_eq!(count_params(&spec, Part::Head), 1161);
        let mut two = spec.clone();
        two.num_classes = 2;
        assert_eq!(count_params(&two, Part::Head), 258);
        // 128 -> 9 pointwise conv at 56x56
        assert_eq!(count_macs(&spec, Part::Head, 224), 128 * 9 * 56 * 56);
        assert_eq!(128 * 9 * 56 * 56, 3_612_672);
    }

    #[test]
    fn decoder_counts_by_hand() {
        // laterals (1x1 + bias) then segmentation units (3x3 no bias + group norm)
        let seg_first = 9 * 256 * 128 + 256;
        let seg_next = 9 * 128 * 128 + 256;
        let branches = 4 * seg_first + 3 * seg_next;
        let lateral = |cs: [u64; 4]| cs.iter().map(|c| c * 256 + 256).sum::<u64>();
        assert_eq!(lateral([256, 512, 1024, 2048]) + branches, 2_607_872);
        assert_eq!(lateral([64, 128, 256, 512]) + branches, 1_870_592);

        assert_eq!(count_params(&ModelSpec::new(BackboneSpec::resnet50()), Part::Decoder), 2_607_872);
        assert_eq!(count_params(&ModelSpec::new(BackboneSpec::resnet34()), Part::Decoder), 1_870_592);
    }

    #[test]
    fn totals_are_additive() {
        for name in crate::model::spec::PRESETS {
            let spec = ModelSpec::preset(name).unwrap();
            let parts: u64 = [Part::Encoder, Part::Decoder, Part::Head]
                .iter()
                .map(|&p| count_params(&spec, p))
                .sum();
            assert_eq!(parts, count_params(&spec, Part::Total));
        }
    }

    #[test]
    fn empty_table_has_header_only() {
        let t = stats_table(&[]);
        assert_eq!(t.to_csv().trim(), "model,part,params,macs,flops_batch8");
        assert_eq!(t.to_text().lines().count(), 1);
    }

    #[test]
    fn part_parses() {
        assert_eq!("decoder".parse::<Part>().unwrap(), Part::Decoder);
        assert!("neck".parse::<Part>().is_err());
    }
}
