//! Executable encoder / FPN decoder / segmentation head network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    relu, resize_bilinear, resize_bilinear_backward, upsample_nearest, upsample_nearest_backward,
    BatchNorm2d, Conv2d, ConvShape, GroupNorm, MaxPool, Relu,
};
use super::spec::{BackboneSpec, BlockFamily, DecoderSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{parameterized, Parameterized, Tensor};

/// Encoder outputs at strides 4, 8, 16 and 32 (`levels[0]` is C2).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

parameterized!(ConvBn { conv, bn });

impl ConvBn {
    fn new(shape: ConvShape, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(shape, rng),
            bn: BatchNorm2d::new(shape.out_channels),
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.bn.infer(self.conv.infer(x))
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        self.bn.forward_train(self.conv.forward_train(x))
    }

    fn backward(&mut self, grad: &Tensor) -> Option<Tensor> {
        let g = self.bn.backward(grad);
        self.conv.backward(&g)
    }
}

/// A residual block: a chain of conv+norm units with ReLUs between them,
/// a projection shortcut when the shape changes, and a ReLU after the sum.
///
/// Basic blocks chain two 3x3 units; bottleneck blocks chain 1x1, grouped
/// 3x3 (carrying the stride) and 1x1.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub units: Vec<ConvBn>,
    pub downsample: Option<ConvBn>,
    relus: Vec<Relu>,
}

parameterized!(ResidualBlock { units, downsample });

impl ResidualBlock {
    fn new(
        family: BlockFamily,
        in_channels: usize,
        planes: usize,
        width: usize,
        groups: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let out = planes * family.expansion();
        let units = match family {
            BlockFamily::ResnetBasic => vec![
                ConvBn::new(ConvShape::new(in_channels, planes, 3).stride(stride), rng),
                ConvBn::new(ConvShape::new(planes, planes, 3), rng),
            ],
            _ => vec![
                ConvBn::new(ConvShape::new(in_channels, width, 1), rng),
                ConvBn::new(
                    ConvShape::new(width, width, 3).stride(stride).groups(groups),
                    rng,
                ),
                ConvBn::new(ConvShape::new(width, out, 1), rng),
            ],
        };
        let downsample = (stride != 1 || in_channels != out).then(|| {
            ConvBn::new(
                ConvShape::new(in_channels, out, 1).stride(stride).padding(0),
                rng,
            )
        });
        let relus = vec![Relu::default(); units.len()];
        Self {
            units,
            downsample,
            relus,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let last = self.units.len() - 1;
        for (i, unit) in self.units.iter().enumerate() {
            out = unit.infer(&out);
            if i < last {
                out = relu(out);
            }
        }
        match &self.downsample {
            Some(ds) => out.add_assign(&ds.infer(x)),
            None => out.add_assign(x),
        }
        relu(out)
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let identity = match self.downsample.as_mut() {
            Some(ds) => ds.forward_train(x.clone()),
            None => x.clone(),
        };
        let last = self.units.len() - 1;
        let mut out = x;
        for i in 0..self.units.len() {
            out = self.units[i].forward_train(out);
            if i < last {
                out = self.relus[i].forward_train(out);
            }
        }
        out.add_assign(&identity);
        self.relus[last].forward_train(out)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let last = self.units.len() - 1;
        let grad = self.relus[last].backward(grad);
        let mut g = grad.clone();
        for i in (0..self.units.len()).rev() {
            if i < last {
                g = self.relus[i].backward(g);
            }
            g = self.units[i].backward(&g).expect("residual units propagate gradients");
        }
        match self.downsample.as_mut() {
            Some(ds) => g.add_assign(&ds.backward(&grad).expect("shortcut gradient")),
            None => g.add_assign(&grad),
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvBn,
    pub stages: Vec<Vec<ResidualBlock>>,
    stem_relu: Relu,
    pool: MaxPool,
}

parameterized!(Encoder { stem, stages });

impl Encoder {
    fn new(spec: &BackboneSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut stem = ConvBn::new(
            ConvShape::new(spec.in_channels, spec.stem_channels, 7)
                .stride(2)
                .padding(3),
            rng,
        );
        stem.conv.input_grad = false;
        let mut in_channels = spec.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (stage, &blocks) in spec.stage_blocks.iter().enumerate() {
            let planes = spec.stage_planes(stage);
            let mut layer = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                layer.push(ResidualBlock::new(
                    spec.family,
                    in_channels,
                    planes,
                    spec.block_width(stage),
                    spec.groups(),
                    stride,
                    rng,
                ));
                in_channels = planes * spec.family.expansion();
            }
            stages.push(layer);
        }
        Self {
            stem,
            stages,
            stem_relu: Relu::default(),
            pool: MaxPool::default(),
        }
    }

    pub fn infer(&self, x: &Tensor) -> FeaturePyramid {
        let mut out = self.pool.infer(&relu(self.stem.infer(x)));
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                out = block.infer(&out);
            }
            levels.push(out.clone());
        }
        FeaturePyramid {
            levels: levels.try_into().expect("four stages"),
        }
    }

    fn forward_train(&mut self, x: Tensor) -> FeaturePyramid {
        let stem = self.stem_relu.forward_train(self.stem.forward_train(x));
        let mut out = self.pool.forward_train(&stem);
        let mut levels = Vec::with_capacity(4);
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                out = block.forward_train(out);
            }
            levels.push(out.clone());
        }
        FeaturePyramid {
            levels: levels.try_into().expect("four stages"),
        }
    }

    fn backward(&mut self, grads: [Tensor; 4]) {
        let mut carry: Option<Tensor> = None;
        for (stage, grad) in self.stages.iter_mut().zip(grads).rev() {
            let mut g = match carry.take() {
                Some(mut c) => {
                    c.add_assign(&grad);
                    c
                }
                None => grad,
            };
            for block in stage.iter_mut().rev() {
                g = block.backward(g);
            }
            carry = Some(g);
        }
        let g = self.pool.backward(&carry.expect("at least one stage"));
        let g = self.stem_relu.backward(g);
        let _ = self.stem.backward(&g);
    }
}

/// 3x3 conv (no bias) -> group norm -> ReLU, optionally followed by x2 nearest upsampling.
#[derive(Clone, Debug)]
pub struct SegUnit {
    pub conv: Conv2d,
    pub norm: GroupNorm,
    pub upsample: bool,
    relu: Relu,
}

parameterized!(SegUnit { conv, norm });

impl SegUnit {
    fn infer(&self, x: &Tensor) -> Tensor {
        let out = relu(self.norm.infer(self.conv.infer(x)));
        if self.upsample {
            upsample_nearest(&out, 2)
        } else {
            out
        }
    }

    fn forward_train(&mut self, x: Tensor) -> Tensor {
        let out = self.conv.forward_train(x);
        let out = self.relu.forward_train(self.norm.forward_train(out));
        if self.upsample {
            upsample_nearest(&out, 2)
        } else {
            out
        }
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let g = if self.upsample {
            upsample_nearest_backward(&grad, 2)
        } else {
            grad
        };
        let g = self.relu.backward(g);
        let g = self.norm.backward(&g);
        self.conv.backward(&g).expect("decoder conv gradient")
    }
}

/// FPN decoder: lateral 1x1 projections merged top-down, one segmentation
/// branch per level, all branches summed at stride 4.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// `lateral[i]` projects C(i+2).
    pub lateral: Vec<Conv2d>,
    /// `branches[i]` refines P(i+2) up to stride 4.
    pub branches: Vec<Vec<SegUnit>>,
}

parameterized!(Decoder { lateral, branches });

impl Decoder {
    fn new(spec: &DecoderSpec, in_channels: [usize; 4], rng: &mut ChaCha8Rng) -> Self {
        let lateral = in_channels
            .iter()
            .map(|&c| {
                Conv2d::new(
                    ConvShape::new(c, spec.pyramid_channels, 1).bias(true),
                    rng,
                )
            })
            .collect();
        let branches = (0..4)
            .map(|level| {
                let units = DecoderSpec::units(level);
                (0..units)
                    .map(|u| {
                        let cin = if u == 0 {
                            spec.pyramid_channels
                        } else {
                            spec.segmentation_channels
                        };
                        SegUnit {
                            conv: Conv2d::new(
                                ConvShape::new(cin, spec.segmentation_channels, 3),
                                rng,
                            ),
                            norm: GroupNorm::new(spec.norm_groups, spec.segmentation_channels),
                            upsample: level > 0,
                            relu: Relu::default(),
                        }
                    })
                    .collect()
            })
            .collect();
        Self { lateral, branches }
    }

    fn pyramid(&self, features: &FeaturePyramid) -> Vec<Tensor> {
        let mut maps: Vec<Tensor> = Vec::with_capacity(4);
        let mut above = self.lateral[3].infer(&features.levels[3]);
        maps.push(above.clone());
        for level in (0..3).rev() {
            let mut p = upsample_nearest(&above, 2);
            p.add_assign(&self.lateral[level].infer(&features.levels[level]));
            maps.push(p.clone());
            above = p;
        }
        maps.reverse();
        maps
    }

    pub fn infer(&self, features: &FeaturePyramid) -> Tensor {
        let maps = self.pyramid(features);
        let mut fused: Option<Tensor> = None;
        for (branch, p) in self.branches.iter().zip(maps) {
            let mut out = p;
            for unit in branch {
                out = unit.infer(&out);
            }
            match fused.as_mut() {
                Some(f) => f.add_assign(&out),
                None => fused = Some(out),
            }
        }
        fused.expect("four branches")
    }

    fn forward_train(&mut self, features: FeaturePyramid) -> Tensor {
        let [c2, c3, c4, c5] = features.levels;
        let p5 = self.lateral[3].forward_train(c5);
        let mut p4 = upsample_nearest(&p5, 2);
        p4.add_assign(&self.lateral[2].forward_train(c4));
        let mut p3 = upsample_nearest(&p4, 2);
        p3.add_assign(&self.lateral[1].forward_train(c3));
        let mut p2 = upsample_nearest(&p3, 2);
        p2.add_assign(&self.lateral[0].forward_train(c2));
        let mut fused: Option<Tensor> = None;
        for (branch, p) in self.branches.iter_mut().zip([p2, p3, p4, p5]) {
            let mut out = p;
            for unit in branch.iter_mut() {
                out = unit.forward_train(out);
            }
            match fused.as_mut() {
                Some(f) => f.add_assign(&out),
                None => fused = Some(out),
            }
        }
        fused.expect("four branches")
    }

    fn backward(&mut self, grad: &Tensor) -> [Tensor; 4] {
        let mut dp: Vec<Tensor> = self
            .branches
            .iter_mut()
            .map(|branch| {
                let mut g = grad.clone();
                for unit in branch.iter_mut().rev() {
                    g = unit.backward(g);
                }
                g
            })
            .collect();
        let mut dc: Vec<Tensor> = Vec::with_capacity(4);
        for level in 0..4 {
            if level > 0 {
                let below = upsample_nearest_backward(&dp[level - 1], 2);
                dp[level].add_assign(&below);
            }
            dc.push(
                self.lateral[level]
                    .backward(&dp[level])
                    .expect("lateral gradient"),
            );
        }
        dc.try_into().expect("four levels")
    }
}

/// 1x1 classifier followed by bilinear upsampling to input resolution.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub conv: Conv2d,
    pub upsample_factor: usize,
}

parameterized!(SegHead { conv });

impl SegHead {
    pub fn infer(&self, fused: &Tensor) -> Tensor {
        let logits = self.conv.infer(fused);
        let f = self.upsample_factor;
        resize_bilinear(&logits, logits.h() * f, logits.w() * f)
    }

    fn forward_train(&mut self, fused: Tensor) -> Tensor {
        let logits = self.conv.forward_train(fused);
        let f = self.upsample_factor;
        resize_bilinear(&logits, logits.h() * f, logits.w() * f)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let f = self.upsample_factor;
        let g = resize_bilinear_backward(grad, grad.h() / f, grad.w() / f);
        self.conv.backward(&g).expect("head gradient")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: SegHead,
}

parameterized!(Model {
    encoder,
    decoder,
    head
});

impl Model {
    /// Builds a network with He fan-out conv weights, unit/zero norm affine
    /// parameters and zero biases, drawn from a seeded stream. The head starts
    /// at zero, so initial class probabilities are uniform.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&spec.backbone, &mut rng);
        let decoder = Decoder::new(&spec.decoder, spec.backbone.stage_out_channels(), &mut rng);
        let head = SegHead {
            conv: Conv2d::zeroed(ConvShape::new(spec.decoder.segmentation_channels, spec.num_classes, 1).bias(true)),
            upsample_factor: spec.decoder.final_upsample_factor,
        };
        Ok(Self {
            spec: spec.clone(),
            encoder,
            decoder,
            head,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        let size = self.spec.input_size;
        if c != self.spec.backbone.in_channels || h != size || w != size || x.n() == 0 {
            return Err(Error::Shape(format!(
                "expected (B, {}, {size}, {size}), got {:?}",
                self.spec.backbone.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn encoder_forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(x)?;
        Ok(self.encoder.infer(x))
    }

    pub fn decoder_forward(&self, features: &FeaturePyramid) -> Result<Tensor> {
        let expected = self.spec.backbone.stage_out_channels();
        for (i, (level, &c)) in features.levels.iter().zip(&expected).enumerate() {
            if level.c() != c {
                return Err(Error::Shape(format!(
                    "pyramid level C{} has {} channels, decoder expects {c}",
                    i + 2,
                    level.c()
                )));
            }
        }
        let [_, _, h, w] = features.levels[0].shape();
        for (i, level) in features.levels.iter().enumerate() {
            if level.h() << i != h || level.w() << i != w {
                return Err(Error::Shape("pyramid levels are not successive halvings".into()));
            }
        }
        Ok(self.decoder.infer(features))
    }

    pub fn seg_head(&self, fused: &Tensor) -> Result<Tensor> {
        if fused.c() != self.spec.decoder.segmentation_channels {
            return Err(Error::Shape(format!(
                "head expects {} channels, got {}",
                self.spec.decoder.segmentation_channels,
                fused.c()
            )));
        }
        Ok(self.head.infer(fused))
    }

    /// Inference forward pass; encoder norms use running statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let features = self.encoder_forward(x)?;
        let fused = self.decoder_forward(&features)?;
        self.seg_head(&fused)
    }

    /// Training forward pass; caches activations for [`Model::backward`].
    pub fn forward_train(&mut self, x: Tensor) -> Result<Tensor> {
        self.check_input(&x)?;
        let features = self.encoder.forward_train(x);
        let fused = self.decoder.forward_train(features);
        Ok(self.head.forward_train(fused))
    }

    /// Accumulates parameter gradients for the logits gradient of the last
    /// [`Model::forward_train`] call.
    pub fn backward(&mut self, grad_logits: &Tensor) {
        let g = self.head.backward(grad_logits);
        let grads = self.decoder.backward(&g);
        self.encoder.backward(grads);
    }

    pub fn num_params(&self) -> u64 {
        self.num_trainable()
    }
}
