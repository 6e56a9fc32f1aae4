//! The segmentation network: ICA-style encoder, contracting and expanding
//! backbone with temporal correlation features, and per-level decoders that
//! mix coefficient maps with the frame's basis tensor.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    as_volume, backbone_forward, contract, decode, encode, encode_coefficients, mix, model_forward, BackboneOutputs,
    ModelOutputs,
};
pub use params::{ParamStore, Session};

use crate::error::{Error, Result};
use crate::ops::{ConvSpec, CorrSpec};

/// Negative slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of contracting/expanding blocks.
    pub n: usize,
    /// Basis dimension; also the channel count of the level-n mixing tensor.
    pub m: usize,
    /// Output channels of the mixing operation.
    pub u: usize,
    /// Width of the encoder stem and basis head.
    pub stem_channels: usize,
    pub corr: CorrSpec,
    pub num_classes: usize,
    /// Input extents `(d, h, w)`.
    pub extents: [usize; 3],
    /// Channel groups of the backbone; 1 is the dense model.
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 3,
            m: 32,
            u: 4,
            stem_channels: 16,
            corr: CorrSpec::default(),
            num_classes: 4,
            extents: [8, 64, 64],
            groups: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.extents;
        if self.n < 2 {
            return Err(Error::config(format!("n must be at least 2, got {}", self.n)));
        }
        if self.m == 0 || self.u == 0 || self.stem_channels == 0 {
            return Err(Error::config("m, u and stem_channels must be positive"));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::config(format!("num_classes {} outside 2..=255", self.num_classes)));
        }
        if self.groups == 0 || self.m % self.groups != 0 {
            return Err(Error::config(format!("groups {} must divide m = {}", self.groups, self.m)));
        }
        if d == 0 || d % 2 != 0 {
            return Err(Error::shape(format!("depth {d} must be even")));
        }
        let q = self.in_plane_quantum();
        if h == 0 || w == 0 || h % q != 0 || w % q != 0 {
            return Err(Error::shape(format!(
                "in-plane extents {h}x{w} must be multiples of {q} for n = {}",
                self.n
            )));
        }
        Ok(())
    }

    /// `max(16, 4 * 2^n)`.
    pub fn in_plane_quantum(&self) -> usize {
        16usize.max(4usize << self.n)
    }

    /// Backbone width at level `k`: `min(m * 2^(n-k), 8m)`.
    pub fn channels(&self, level: usize) -> usize {
        let doublings = (self.n - level).min(3);
        self.m << doublings
    }

    /// Extents of the level-`k` mixing tensor.
    pub fn level_extents(&self, level: usize) -> [usize; 3] {
        let [d, h, w] = self.extents;
        let f = 4 << (self.n - level);
        [d / 2, h / f, w / f]
    }

    /// Extents of the level-`k` logits.
    pub fn output_extents(&self, level: usize) -> [usize; 3] {
        let [d, h, w] = self.extents;
        let f = 1 << (self.n - level);
        [d, h / f, w / f]
    }

    /// Shape of the level-`n` mixing tensor.
    pub fn mixing_shape(&self) -> [usize; 5] {
        let [d, h, w] = self.level_extents(self.n);
        [1, self.m, d, h, w]
    }

    /// Shape of the basis tensor.
    pub fn basis_shape(&self) -> [usize; 5] {
        let [d, h, w] = self.extents;
        [1, self.u * self.m, d, h / 16, w / 16]
    }

    /// The same network with a single coefficient group of `m / groups`
    /// channels: the unit that runs on one worker in grouped inference.
    pub fn group_config(&self) -> ModelConfig {
        ModelConfig {
            m: self.m / self.groups,
            groups: 1,
            ..self.clone()
        }
    }
}

/// How a convolution layer is wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Convolution, batch normalization, leaky ReLU; no conv bias.
    Block,
    /// Transposed convolution, batch normalization, leaky ReLU.
    TransBlock,
    /// Convolution with bias and nothing after it.
    Plain,
    /// Transposed convolution with bias and nothing after it.
    PlainTransposed,
}

impl LayerKind {
    pub fn transposed(self) -> bool {
        matches!(self, LayerKind::TransBlock | LayerKind::PlainTransposed)
    }

    pub fn normalized(self) -> bool {
        matches!(self, LayerKind::Block | LayerKind::TransBlock)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: ConvSpec,
    pub kind: LayerKind,
}

impl Layer {
    fn new(name: impl Into<String>, spec: ConvSpec, kind: LayerKind) -> Self {
        Layer {
            name: name.into(),
            spec,
            kind,
        }
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        if self.kind.transposed() {
            self.spec.transposed_weight_shape()
        } else {
            self.spec.weight_shape()
        }
    }

    /// Inputs feeding one output value, used to scale initialization.
    pub fn fan_in(&self) -> usize {
        let taps: usize = self.spec.kernel.iter().product();
        let per_group = self.spec.in_channels / self.spec.groups;
        if self.kind.transposed() {
            let stride: usize = self.spec.stride.iter().product();
            (per_group * taps / stride).max(1)
        } else {
            per_group * taps
        }
    }
}

/// Transposed-convolution geometry that mixes coefficient maps with the
/// basis tensor, taking level extents `(d/2, h', w')` to `(d, 4h', 4w')`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixingGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// Zero border added after the transposed convolution when the basis
    /// kernel is narrower than the stride.
    pub border: [usize; 3],
}

impl MixingGeometry {
    pub fn solve(config: &ModelConfig) -> Result<Self> {
        let [d, h, w] = config.extents;
        let kernel = [d, h / 16, w / 16];
        let stride = [2, 4, 4];
        let mut padding = [0; 3];
        let mut border = [0; 3];
        for a in 0..3 {
            // (in - 1) s + k - 2p must equal s * in, so 2p = k - s.
            let (k, s) = (kernel[a], stride[a]);
            if k >= s && (k - s) % 2 == 0 {
                padding[a] = (k - s) / 2;
            } else if k < s && (s - k) % 2 == 0 {
                border[a] = (s - k) / 2;
            } else {
                return Err(Error::shape(format!(
                    "no symmetric padding maps kernel {k} with stride {s} onto the level extents"
                )));
            }
        }
        Ok(MixingGeometry {
            kernel,
            stride,
            padding,
            border,
        })
    }

    pub fn spec(&self, m: usize, u: usize) -> ConvSpec {
        ConvSpec::new(m, u, self.kernel, self.stride, self.padding)
    }
}

/// Every layer of the network with its geometry, derived from a config.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub stem: [Layer; 2],
    pub a_head: Layer,
    pub x_head: [Layer; 3],
    /// `(downsample, conv)` taking level `k` to `k - 1`, indexed by `k - 1`.
    pub contracting: Vec<(Layer, Layer)>,
    /// Upsampling of the bottleneck to level 1.
    pub bottleneck_up: Layer,
    /// 1x1 fusion of upsampled features with correlation maps, indexed by `k - 1`.
    pub fuse: Vec<Layer>,
    /// Upsampling from level `k` to `k + 1`, indexed by `k - 1`, `k < n`.
    pub up: Vec<Layer>,
    /// 1x1 reduction to `m` channels ahead of mixing, indexed by `k - 1`.
    pub reduce: Vec<Layer>,
    /// Final convolution to class logits, indexed by `k - 1`.
    pub head: Vec<Layer>,
    pub mixing: MixingGeometry,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mixing = MixingGeometry::solve(config)?;
        let c = config;
        let s = c.stem_channels;
        let g = c.groups;
        let down = |cin, cout| ConvSpec::new(cin, cout, [1, 4, 4], [1, 2, 2], [0, 1, 1]);

        let stem = [
            Layer::new(
                "enc.stem1",
                ConvSpec::new(1, s, [2, 4, 4], [2, 2, 2], [0, 1, 1]),
                LayerKind::Block,
            ),
            Layer::new("enc.stem2", down(s, s), LayerKind::Block),
        ];
        let a_head = Layer::new("enc.a_head", ConvSpec::block(s, c.m), LayerKind::Plain);
        let x_head = [
            Layer::new("enc.x_head1", down(s, s), LayerKind::Block),
            Layer::new("enc.x_head2", down(s, s), LayerKind::Block),
            Layer::new(
                "enc.x_head3",
                ConvSpec::new(s, c.u * c.m, [2, 1, 1], [2, 1, 1], [0, 0, 0]),
                LayerKind::PlainTransposed,
            ),
        ];
        let contracting = (1..=c.n)
            .map(|k| {
                let (hi, lo) = (c.channels(k), c.channels(k - 1));
                (
                    Layer::new(format!("bb.down{k}"), down(hi, lo).with_groups(g), LayerKind::Block),
                    Layer::new(format!("bb.conv{k}"), ConvSpec::block(lo, lo).with_groups(g), LayerKind::Block),
                )
            })
            .collect();
        let bottleneck_up = Layer::new(
            "bb.up0",
            ConvSpec::trans_block(c.channels(0), c.channels(1)).with_groups(g),
            LayerKind::TransBlock,
        );
        let corr = 2 * c.corr.out_channels() * g;
        let fuse = (1..=c.n)
            .map(|k| {
                let ck = c.channels(k);
                Layer::new(
                    format!("bb.fuse{k}"),
                    ConvSpec::pointwise(ck + corr, ck).with_groups(g),
                    LayerKind::Block,
                )
            })
            .collect();
        let up = (1..c.n)
            .map(|k| {
                Layer::new(
                    format!("bb.up{k}"),
                    ConvSpec::trans_block(c.channels(k), c.channels(k + 1)).with_groups(g),
                    LayerKind::TransBlock,
                )
            })
            .collect();
        let reduce = (1..=c.n)
            .map(|k| {
                Layer::new(
                    format!("bb.reduce{k}"),
                    ConvSpec::pointwise(c.channels(k), c.m).with_groups(g),
                    LayerKind::Plain,
                )
            })
            .collect();
        let head = (1..=c.n)
            .map(|k| {
                Layer::new(
                    format!("dec{k}.out"),
                    ConvSpec::block(c.u, c.num_classes),
                    LayerKind::Plain,
                )
            })
            .collect();
        Ok(Architecture {
            config: config.clone(),
            stem,
            a_head,
            x_head,
            contracting,
            bottleneck_up,
            fuse,
            up,
            reduce,
            head,
            mixing,
        })
    }

    /// Layers of the encoder, which always runs densely.
    pub fn encoder_layers(&self) -> impl Iterator<Item = &Layer> {
        self.stem.iter().chain(std::iter::once(&self.a_head)).chain(self.x_head.iter())
    }

    /// Layers whose channels split into coefficient groups.
    pub fn backbone_layers(&self) -> impl Iterator<Item = &Layer> {
        self.contracting
            .iter()
            .flat_map(|(a, b)| [a, b])
            .chain(std::iter::once(&self.bottleneck_up))
            .chain(self.fuse.iter())
            .chain(self.up.iter())
            .chain(self.reduce.iter())
    }

    pub fn decoder_layers(&self) -> impl Iterator<Item = &Layer> {
        self.head.iter()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder_layers().chain(self.backbone_layers()).chain(self.decoder_layers())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_schedule_caps_at_eight_m() {
        let c = ModelConfig {
            n: 4,
            m: 8,
            ..ModelConfig::default()
        };
        let widths: Vec<usize> = (0..=4).map(|k| c.channels(k)).collect();
        assert_eq!(widths, vec![64, 64, 32, 16, 8]);
    }

    #[test]
    fn extents_must_respect_quantum() {
        let mut c = ModelConfig {
            n: 3,
            extents: [8, 48, 64],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        c.extents = [7, 64, 64];
        assert!(c.validate().is_err());
        c.extents = [8, 64, 64];
        c.n = 1;
        assert!(c.validate().is_err());
        c.n = 3;
        c.groups = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mixing_geometry_full_resolution() {
        let g = MixingGeometry::solve(&ModelConfig::default()).unwrap();
        assert_eq!(g.kernel, [8, 4, 4]);
        assert_eq!(g.padding, [3, 0, 0]);
        assert_eq!(g.border, [0, 0, 0]);
        let small = ModelConfig {
            n: 2,
            m: 4,
            extents: [2, 32, 32],
            ..ModelConfig::default()
        };
        let g = MixingGeometry::solve(&small).unwrap();
        assert_eq!(g.padding, [0, 0, 0]);
        assert_eq!(g.border, [0, 1, 1]);
        let odd = ModelConfig {
            n: 2,
            m: 4,
            extents: [2, 48, 48],
            ..ModelConfig::default()
        };
        assert!(matches!(MixingGeometry::solve(&odd), Err(Error::Shape(_))));
    }
}
