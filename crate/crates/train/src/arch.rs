//! Layer graphs for each backbone family.
//!
//! The graphs keep each family's block structure (plain conv stacks,
//! bottleneck residuals, multi-branch modules, dense concatenation) at
//! widths small enough to train on a CPU. A composite block counts as one
//! layer in the enumeration, the way a framework model summary lists it.

use crate::registry::{BackboneSpec, Family};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub act: Act,
}

impl ConvSpec {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, act: Act) -> Self {
        // "same" padding for odd kernels, patchify for even ones
        let pad = if k % 2 == 1 { k / 2 } else { 0 };
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            act,
        }
    }

    pub fn kernel_shape(&self) -> (usize, usize, usize, usize) {
        (self.cout, self.cin, self.k, self.k)
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Wiring {
    /// Convs applied in order.
    Sequential,
    /// `act(body(x) + shortcut(x))`; with `projection` the last conv is the
    /// shortcut projection, otherwise the shortcut is identity.
    Residual { projection: bool, post_act: bool },
    /// Consecutive runs of convs of the given lengths, each applied to the
    /// input, concatenated along channels.
    Branches(Vec<usize>),
    /// Each conv's output is concatenated onto its input.
    DenseConcat,
    MaxPool { k: usize, stride: usize },
    AvgPool { k: usize, stride: usize },
    Relu,
    /// `x * scale + offset`, no parameters.
    Rescale { scale: f32, offset: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub convs: Vec<ConvSpec>,
    pub wiring: Wiring,
}

impl LayerDef {
    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.cout * c.fan_in() + c.cout).sum()
    }
}

struct Builder {
    layers: Vec<LayerDef>,
    c: usize,
}

type Step = (usize, usize, usize, Act); // cout, k, stride, act

impl Builder {
    fn new() -> Self {
        Self { layers: Vec::new(), c: 3 }
    }

    fn push(&mut self, name: impl Into<String>, convs: Vec<ConvSpec>, wiring: Wiring, c: usize) {
        self.layers.push(LayerDef {
            name: name.into(),
            convs,
            wiring,
        });
        self.c = c;
    }

    fn conv(&mut self, name: impl Into<String>, cout: usize, k: usize, stride: usize) {
        let spec = ConvSpec::new(self.c, cout, k, stride, Act::Relu);
        self.push(name, vec![spec], Wiring::Sequential, cout);
    }

    fn max_pool(&mut self, name: impl Into<String>) {
        let c = self.c;
        self.push(name, vec![], Wiring::MaxPool { k: 2, stride: 2 }, c);
    }

    fn avg_pool(&mut self, name: impl Into<String>) {
        let c = self.c;
        self.push(name, vec![], Wiring::AvgPool { k: 2, stride: 2 }, c);
    }

    fn relu(&mut self, name: impl Into<String>) {
        let c = self.c;
        self.push(name, vec![], Wiring::Relu, c);
    }

    fn rescale(&mut self, name: impl Into<String>, scale: f32, offset: f32) {
        let c = self.c;
        self.push(name, vec![], Wiring::Rescale { scale, offset }, c);
    }

    /// Residual block; the shortcut gets a 1x1 projection when the shape
    /// changes.
    fn residual(&mut self, name: impl Into<String>, body: &[Step], post_act: bool) {
        let mut convs = Vec::new();
        let mut c = self.c;
        let mut stride = 1;
        for &(cout, k, s, act) in body {
            convs.push(ConvSpec::new(c, cout, k, s, act));
            c = cout;
            stride *= s;
        }
        let projection = stride != 1 || c != self.c;
        if projection {
            convs.push(ConvSpec::new(self.c, c, 1, stride, Act::Linear));
        }
        self.push(name, convs, Wiring::Residual { projection, post_act }, c);
    }

    fn branches(&mut self, name: impl Into<String>, branches: &[&[(usize, usize)]]) {
        let mut convs = Vec::new();
        let mut sizes = Vec::new();
        let mut total = 0;
        for branch in branches {
            let mut c = self.c;
            for &(cout, k) in *branch {
                convs.push(ConvSpec::new(c, cout, k, 1, Act::Relu));
                c = cout;
            }
            sizes.push(branch.len());
            total += c;
        }
        self.push(name, convs, Wiring::Branches(sizes), total);
    }

    fn dense(&mut self, name: impl Into<String>, growth: usize) {
        let spec = ConvSpec::new(self.c, growth, 3, 1, Act::Relu);
        let c = self.c + growth;
        self.push(name, vec![spec], Wiring::DenseConcat, c);
    }
}

/// Widths of the five VGG blocks.
pub const VGG_WIDTHS: [usize; 5] = [4, 8, 8, 16, 64];

fn vgg19() -> Builder {
    let mut b = Builder::new();
    for (block, (n, width)) in [2, 2, 4, 4, 4].into_iter().zip(VGG_WIDTHS).enumerate() {
        for i in 0..n {
            b.conv(format!("block{}_conv{}", block + 1, i + 1), width, 3, 1);
        }
        b.max_pool(format!("block{}_pool", block + 1));
    }
    b
}

fn resnet(v2: bool) -> Builder {
    let mut b = Builder::new();
    b.conv("conv1_conv", 8, 7, 2);
    b.max_pool("pool1_pool");
    for (stage, (blocks, mid, out)) in [(3, 4, 16), (4, 8, 32), (6, 16, 64), (3, 32, 128)].into_iter().enumerate() {
        for i in 0..blocks {
            let stride = if i == 0 && stage > 0 { 2 } else { 1 };
            b.residual(
                format!("conv{}_block{}", stage + 2, i + 1),
                &[(mid, 1, stride, Act::Relu), (mid, 3, 1, Act::Relu), (out, 1, 1, Act::Linear)],
                !v2,
            );
        }
    }
    if v2 {
        b.relu("post_relu");
    }
    b
}

fn efficientnet(v2: bool) -> Builder {
    let mut b = Builder::new();
    b.rescale("rescaling", 1.0 / 255.0, 0.0);
    b.conv("stem_conv", 8, 3, 2);
    let stages: &[(usize, usize, usize)] = &[(8, 2, 1), (12, 2, 2), (16, 3, 2), (24, 3, 2), (32, 2, 2)];
    for (s, &(out, blocks, stride)) in stages.iter().enumerate() {
        for i in 0..blocks {
            let st = if i == 0 { stride } else { 1 };
            let body: Vec<Step> = if v2 && s < 3 {
                // fused MBConv
                vec![(out * 2, 3, st, Act::Relu), (out, 1, 1, Act::Linear)]
            } else {
                vec![(out * 2, 1, 1, Act::Relu), (out * 2, 3, st, Act::Relu), (out, 1, 1, Act::Linear)]
            };
            b.residual(format!("block{}{}", s + 1, (b'a' + i as u8) as char), &body, false);
        }
    }
    b.conv("top_conv", 64, 1, 1);
    b
}

fn inception_stem(b: &mut Builder) {
    b.conv("conv2d_1", 8, 3, 2);
    b.conv("conv2d_2", 8, 3, 1);
    b.conv("conv2d_3", 16, 3, 1);
    b.max_pool("max_pooling2d_1");
    b.conv("conv2d_4", 16, 1, 1);
    b.conv("conv2d_5", 24, 3, 1);
    b.max_pool("max_pooling2d_2");
}

fn inception_v3() -> Builder {
    let mut b = Builder::new();
    inception_stem(&mut b);
    for i in 0..11 {
        let w = if i < 3 { 8 } else if i < 8 { 12 } else { 16 };
        b.branches(format!("mixed{i}"), &[&[(w, 1)], &[(w, 1), (w, 3)], &[(w, 1), (w, 3), (w, 3)]]);
        if i == 2 || i == 7 {
            b.max_pool(format!("reduction{}", if i == 2 { 1 } else { 2 }));
        }
    }
    b
}

fn inception_resnet_v2() -> Builder {
    let mut b = Builder::new();
    inception_stem(&mut b);
    b.conv("mixed_5b", 32, 1, 1);
    for i in 0..5 {
        b.residual(format!("block35_{}", i + 1), &[(16, 1, 1, Act::Relu), (32, 3, 1, Act::Linear)], true);
    }
    b.max_pool("mixed_6a");
    for i in 0..10 {
        b.residual(format!("block17_{}", i + 1), &[(16, 1, 1, Act::Relu), (32, 3, 1, Act::Linear)], true);
    }
    b.max_pool("mixed_7a");
    for i in 0..5 {
        b.residual(format!("block8_{}", i + 1), &[(16, 1, 1, Act::Relu), (32, 3, 1, Act::Linear)], true);
    }
    b.conv("conv_7b", 64, 1, 1);
    b
}

fn xception() -> Builder {
    let mut b = Builder::new();
    b.conv("block1_conv1", 8, 3, 2);
    b.conv("block1_conv2", 16, 3, 1);
    for (i, (out, stride)) in [(24, 2), (32, 2), (48, 2)].into_iter().enumerate() {
        b.residual(
            format!("block{}", i + 2),
            &[(out, 1, 1, Act::Relu), (out, 3, stride, Act::Linear)],
            true,
        );
    }
    for i in 5..13 {
        b.residual(format!("block{i}"), &[(48, 1, 1, Act::Relu), (48, 3, 1, Act::Linear)], true);
    }
    b.residual("block13", &[(64, 1, 1, Act::Relu), (64, 3, 2, Act::Linear)], true);
    b.conv("block14_sepconv1", 64, 3, 1);
    b.conv("block14_sepconv2", 96, 1, 1);
    b
}

fn densenet121() -> Builder {
    let mut b = Builder::new();
    b.conv("conv1_conv", 8, 7, 2);
    b.max_pool("pool1");
    for (stage, blocks) in [6, 12, 24, 16].into_iter().enumerate() {
        for i in 0..blocks {
            b.dense(format!("conv{}_block{}", stage + 2, i + 1), 4);
        }
        if stage < 3 {
            let half = b.c / 2;
            b.conv(format!("pool{}_conv", stage + 2), half, 1, 1);
            b.avg_pool(format!("pool{}_pool", stage + 2));
        }
    }
    b.relu("relu");
    b
}

fn nasnet_mobile() -> Builder {
    let mut b = Builder::new();
    b.conv("stem_conv1", 8, 3, 2);
    let mut cell = 0;
    for (stage, w) in [8usize, 12, 16].into_iter().enumerate() {
        b.max_pool(format!("reduction_{}", stage));
        for _ in 0..4 {
            b.branches(
                format!("normal_concat_{cell}"),
                &[&[(w, 1)], &[(w, 3)], &[(w, 3), (w, 3)]],
            );
            cell += 1;
        }
    }
    b.relu("activation_final");
    b
}

fn convnext() -> Builder {
    let mut b = Builder::new();
    b.rescale("normalization", 1.0 / 127.5, -1.0);
    b.conv("stem", 8, 4, 4);
    for (stage, (blocks, w)) in [(3, 8), (3, 16), (9, 32), (3, 64)].into_iter().enumerate() {
        if stage > 0 {
            b.conv(format!("downsampling_block_{stage}"), w, 2, 2);
        }
        for i in 0..blocks {
            b.residual(
                format!("stage_{stage}_block_{i}"),
                &[(w, 7, 1, Act::Linear), (w * 4, 1, 1, Act::Relu), (w, 1, 1, Act::Linear)],
                false,
            );
        }
    }
    b
}

/// The layer enumeration for a backbone, input to output.
pub fn layers_for(spec: &BackboneSpec) -> Vec<LayerDef> {
    let b = match spec.family {
        Family::Vgg => vgg19(),
        Family::ResNet => resnet(false),
        Family::ResNetV2 => resnet(true),
        Family::EfficientNet => efficientnet(false),
        Family::EfficientNetV2 => efficientnet(true),
        Family::Inception => inception_v3(),
        Family::InceptionResNet => inception_resnet_v2(),
        Family::Xception => xception(),
        Family::DenseNet => densenet121(),
        Family::NasNet => nasnet_mobile(),
        Family::ConvNeXt => convnext(),
    };
    b.layers
}

/// Channels produced by the last layer.
pub fn output_channels(layers: &[LayerDef]) -> usize {
    let mut c = 3;
    for l in layers {
        c = match &l.wiring {
            Wiring::Sequential => l.convs.last().map_or(c, |s| s.cout),
            Wiring::Residual { projection, .. } => {
                let body_end = if *projection { l.convs.len() - 1 } else { l.convs.len() };
                l.convs[..body_end].last().map_or(c, |s| s.cout)
            }
            Wiring::Branches(sizes) => {
                let mut start = 0;
                let mut total = 0;
                for n in sizes {
                    total += l.convs[start + n - 1].cout;
                    start += n;
                }
                total
            }
            Wiring::DenseConcat => c + l.convs.iter().map(|s| s.cout).sum::<usize>(),
            _ => c,
        };
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{find_backbone, list_backbones};

    #[test]
    fn vgg_layer_names_follow_the_reference_model() {
        let layers = layers_for(&find_backbone("VGG19").unwrap());
        assert_eq!(layers.len(), 21);
        let tail: Vec<_> = layers[16..].iter().map(|l| l.name.as_str()).collect();
        assert_eq!(tail, ["block5_conv1", "block5_conv2", "block5_conv3", "block5_conv4", "block5_pool"]);
    }

    #[test]
    fn every_backbone_has_more_than_five_layers_and_unique_names() {
        for spec in list_backbones() {
            let layers = layers_for(&spec);
            assert!(layers.len() > 5, "{}", spec.name);
            let mut names: Vec<_> = layers.iter().map(|l| l.name.clone()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), layers.len(), "{}", spec.name);
            assert!(output_channels(&layers) > 0);
        }
    }

    #[test]
    fn conv_channels_chain() {
        for spec in list_backbones() {
            let layers = layers_for(&spec);
            for (i, l) in layers.iter().enumerate() {
                if let Some(first) = l.convs.first() {
                    assert_eq!(first.cin, output_channels(&layers[..i]), "{} {}", spec.name, l.name);
                }
            }
        }
    }
}
