use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{default_transposed_extent, ConvGeometry, Padding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeKind {
    /// Conventional VAE: convolutional trunk, fully connected code.
    Vae,
    /// Fully convolutional VAE with a spatial field of codes.
    ConvVae,
    /// One conv-VAE per Laplacian pyramid level.
    LaplacianConvVae,
}

impl VaeKind {
    pub fn label(self) -> &'static str {
        match self {
            VaeKind::Vae => "vae",
            VaeKind::ConvVae => "cvae",
            VaeKind::LaplacianConvVae => "lcvae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { filter: usize, stride: usize, padding: Padding, channels: usize },
    Dense { units: usize },
}

impl LayerSpec {
    pub const fn conv(filter: usize, stride: usize, padding: Padding, channels: usize) -> Self {
        LayerSpec::Conv { filter, stride, padding, channels }
    }

    fn width(&self) -> usize {
        match *self {
            LayerSpec::Conv { channels, .. } => channels,
            LayerSpec::Dense { units } => units,
        }
    }
}

/// Encoder layout of a VAE. The decoder mirrors it layer by layer, with
/// transposed convolutions in place of convolutions.
///
/// The encoder body is shared in structure (not weights) by every pyramid
/// level. The code layer's width is `c`; it actually emits `2c` values per
/// code pixel, split into mean and log-variance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArch {
    pub name: String,
    pub kind: VaeKind,
    pub input_channels: usize,
    pub patch_size: usize,
    pub levels: usize,
    pub body: Vec<LayerSpec>,
    pub code: LayerSpec,
}

/// Activation shapes through one level's encoder: `shapes[0]` is the input,
/// `shapes[i]` the output of layer `i` (the code layer reports width `c`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelPlan {
    pub shapes: Vec<Vec<usize>>,
}

impl LevelPlan {
    pub fn code_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }
}

const SAME: Padding = Padding::Same;
const VALID: Padding = Padding::Valid;

fn trunk(c1: usize, c2: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(5, 2, SAME, c1),
        LayerSpec::conv(5, 2, SAME, c2),
        LayerSpec::conv(3, 1, SAME, c2),
    ]
}

fn conv_body(c1: usize, c2: usize, pre_code: usize) -> Vec<LayerSpec> {
    let mut b = trunk(c1, c2);
    b.push(LayerSpec::conv(4, 1, VALID, pre_code));
    b
}

fn dense_body(c1: usize, c2: usize, hidden: usize) -> Vec<LayerSpec> {
    let mut b = trunk(c1, c2);
    b.push(LayerSpec::Dense { units: hidden });
    b
}

impl VaeArch {
    fn new(name: &str, kind: VaeKind, patch: usize, levels: usize, body: Vec<LayerSpec>, code: LayerSpec) -> Self {
        VaeArch { name: name.into(), kind, input_channels: 3, patch_size: patch, levels, body, code }
    }

    /// Conventional VAE with roughly the conv-VAE's parameter count (code 32).
    pub fn vae1() -> Self {
        Self::new("vae-1", VaeKind::Vae, 64, 1, dense_body(64, 128, 128), LayerSpec::Dense { units: 32 })
    }

    /// Conventional VAE with roughly the conv-VAE's code size (code 832).
    pub fn vae2() -> Self {
        Self::new("vae-2", VaeKind::Vae, 64, 1, dense_body(64, 128, 4096), LayerSpec::Dense { units: 832 })
    }

    /// Conv-VAE: 64x64x3 input to a 13x13x8 code field.
    pub fn conv_vae() -> Self {
        Self::new("cvae", VaeKind::ConvVae, 64, 1, conv_body(64, 128, 20), LayerSpec::conv(1, 1, VALID, 8))
    }

    /// Laplacian conv-VAE with three levels: codes 13x13x4, 5x5x4, 1x1x4.
    pub fn laplacian_conv_vae() -> Self {
        Self::new("lcvae", VaeKind::LaplacianConvVae, 64, 3, conv_body(64, 64, 16), LayerSpec::conv(1, 1, VALID, 4))
    }

    /// The layer-model architecture: four levels over 128x128 patches,
    /// codes 29x29x4, 13x13x4, 5x5x4, 1x1x4.
    pub fn authored() -> Self {
        Self::new("authored", VaeKind::LaplacianConvVae, 128, 4, conv_body(64, 64, 64), LayerSpec::conv(1, 1, VALID, 4))
    }

    /// Smaller layer-model architecture for CPU runs: 64x64 patches, three
    /// levels, 32 channels, code width 4.
    pub fn authored_desk() -> Self {
        Self::new("authored-desk", VaeKind::LaplacianConvVae, 64, 3, conv_body(32, 32, 32), LayerSpec::conv(1, 1, VALID, 4))
    }

    /// The four comparison models scaled to 32x32 patches for CPU runs.
    ///
    /// Channel counts are halved relative to the full tables, the second
    /// conventional VAE keeps the conv-VAE's code size (200) with a 256-wide
    /// hidden layer, and the Laplacian model drops to two levels (a third
    /// 8x8 level cannot pass the 4x4 valid layer after two stride-2
    /// reductions).
    pub fn bench_desk() -> Vec<VaeArch> {
        vec![
            Self::new("vae-1", VaeKind::Vae, 32, 1, dense_body(32, 64, 64), LayerSpec::Dense { units: 16 }),
            Self::new("vae-2", VaeKind::Vae, 32, 1, dense_body(32, 64, 256), LayerSpec::Dense { units: 200 }),
            Self::new("cvae", VaeKind::ConvVae, 32, 1, conv_body(32, 64, 20), LayerSpec::conv(1, 1, VALID, 8)),
            Self::new("lcvae", VaeKind::LaplacianConvVae, 32, 2, conv_body(32, 32, 16), LayerSpec::conv(1, 1, VALID, 8)),
        ]
    }

    /// The four comparison models at the full table sizes.
    pub fn bench_paper() -> Vec<VaeArch> {
        vec![Self::vae1(), Self::vae2(), Self::conv_vae(), Self::laplacian_conv_vae()]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vae-1" => Ok(Self::vae1()),
            "vae-2" => Ok(Self::vae2()),
            "cvae" => Ok(Self::conv_vae()),
            "lcvae" => Ok(Self::laplacian_conv_vae()),
            "authored" | "paper" => Ok(Self::authored()),
            "authored-desk" | "desk" => Ok(Self::authored_desk()),
            other => Err(Error::config(format!("unknown architecture preset {other:?}"))),
        }
    }

    pub fn code_width(&self) -> usize {
        self.code.width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("architecture needs at least one level"));
        }
        if self.levels > 1 && self.kind != VaeKind::LaplacianConvVae {
            return Err(Error::config("only the Laplacian kind has several levels"));
        }
        if self.kind != VaeKind::Vae && self.layers().any(|l| matches!(l, LayerSpec::Dense { .. })) {
            return Err(Error::config("convolutional kinds cannot contain dense layers"));
        }
        Ok(())
    }

    /// Body layers followed by the code layer.
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.body.iter().chain(std::iter::once(&self.code))
    }

    pub fn fully_convolutional(&self) -> bool {
        self.kind != VaeKind::Vae
    }

    /// Spatial extent of each pyramid level for an `h x w` input.
    pub fn level_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..self.levels).map(|l| (h >> l, w >> l)).collect()
    }

    /// Encoder shape chain for one level input of `h x w`.
    pub fn plan_level(&self, h: usize, w: usize) -> Result<LevelPlan> {
        let mut shapes = vec![vec![h, w, self.input_channels]];
        for (i, layer) in self.layers().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let next = match *layer {
                LayerSpec::Conv { filter, stride, padding, channels } => {
                    if cur.len() != 3 {
                        return Err(Error::config("convolution after a dense layer"));
                    }
                    let geo = ConvGeometry::new(cur[0], cur[1], cur[2], filter, channels, stride, padding)
                        .map_err(|_| {
                            Error::shape(format!(
                                "{}: {h}x{w} input is smaller than the receptive field (layer {i}, {filter}x{filter} on {}x{})",
                                self.name, cur[0], cur[1]
                            ))
                        })?;
                    vec![geo.out_h, geo.out_w, channels]
                }
                LayerSpec::Dense { units } => vec![units],
            };
            shapes.push(next);
        }
        Ok(LevelPlan { shapes })
    }

    /// Plans for every level of an `h x w` image.
    pub fn plan(&self, h: usize, w: usize) -> Result<Vec<LevelPlan>> {
        self.validate()?;
        crate::pyramid::check_divisible(h, w, self.levels)?;
        if !self.fully_convolutional() && (h != self.patch_size || w != self.patch_size) {
            return Err(Error::shape(format!(
                "{} has dense layers and only accepts {}x{} inputs, got {h}x{w}",
                self.name, self.patch_size, self.patch_size
            )));
        }
        self.level_sizes(h, w)
            .into_iter()
            .map(|(lh, lw)| self.plan_level(lh, lw))
            .collect()
    }

    /// Image extent whose level-0 code field is `code_h x code_w`.
    pub fn image_size_for_code(&self, code_h: usize, code_w: usize) -> (usize, usize) {
        if !self.fully_convolutional() {
            return (self.patch_size, self.patch_size);
        }
        let mut hw = (code_h, code_w);
        for layer in self.layers().collect::<Vec<_>>().into_iter().rev() {
            if let LayerSpec::Conv { filter, stride, padding, .. } = *layer {
                hw = default_transposed_extent(hw.0, hw.1, filter, stride, padding);
            }
        }
        hw
    }

    /// Shapes of every parameter tensor as `(weight, bias)` pairs, per level,
    /// encoder layers first then decoder layers in decoding order.
    pub fn param_shapes(&self) -> Result<Vec<(Vec<ParamShape>, Vec<ParamShape>)>> {
        let plans = self.plan(self.patch_size, self.patch_size)?;
        let c = self.code_width();
        let layers: Vec<&LayerSpec> = self.layers().collect();
        let n = layers.len();
        Ok(plans
            .iter()
            .map(|plan| {
                let s = &plan.shapes;
                let enc = (0..n)
                    .map(|i| {
                        let out = if i == n - 1 { 2 * c } else { layers[i].width() };
                        layer_param(layers[i], &s[i], out, &s[i + 1])
                    })
                    .collect();
                // Decoder step j undoes encoder layer n-1-j: s[n-j] -> s[n-1-j].
                let dec = (0..n)
                    .map(|j| {
                        let i = n - 1 - j;
                        match *layers[i] {
                            LayerSpec::Conv { filter, .. } => ParamShape {
                                weight: vec![filter, filter, s[i][2], s[i + 1][2]],
                                bias: vec![s[i][2]],
                                fan_in: filter * filter * s[i + 1][2] / stride_sq(layers[i]),
                            },
                            LayerSpec::Dense { .. } => {
                                let (a, b) = (numel(&s[i + 1]), numel(&s[i]));
                                ParamShape { weight: vec![a, b], bias: vec![b], fan_in: a }
                            }
                        }
                    })
                    .collect();
                (enc, dec)
            })
            .collect())
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .flat_map(|(e, d)| e.iter().chain(d))
            .map(|p| numel(&p.weight) + numel(&p.bias))
            .sum())
    }

    /// Number of latent values (code width times code pixels, all levels)
    /// for a patch-sized input.
    pub fn code_size(&self) -> Result<usize> {
        Ok(self
            .plan(self.patch_size, self.patch_size)?
            .iter()
            .map(|p| numel(p.code_shape()))
            .sum())
    }
}

fn stride_sq(layer: &LayerSpec) -> usize {
    match *layer {
        LayerSpec::Conv { stride, .. } => (stride * stride).max(1),
        LayerSpec::Dense { .. } => 1,
    }
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub weight: Vec<usize>,
    pub bias: Vec<usize>,
    pub fan_in: usize,
}

fn layer_param(layer: &LayerSpec, input: &[usize], out: usize, _output: &[usize]) -> ParamShape {
    match *layer {
        LayerSpec::Conv { filter, .. } => ParamShape {
            weight: vec![filter, filter, input[2], out],
            bias: vec![out],
            fan_in: filter * filter * input[2],
        },
        LayerSpec::Dense { .. } => ParamShape {
            weight: vec![numel(input), out],
            bias: vec![out],
            fan_in: numel(input),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(arch: &VaeArch, size: usize) -> Vec<Vec<Vec<usize>>> {
        arch.plan(size, size).unwrap().into_iter().map(|p| p.shapes).collect()
    }

    #[test]
    fn conv_vae_table() {
        let c = chain(&VaeArch::conv_vae(), 64);
        assert_eq!(
            c[0],
            vec![vec![64, 64, 3], vec![32, 32, 64], vec![16, 16, 128], vec![16, 16, 128], vec![13, 13, 20], vec![13, 13, 8]]
        );
    }

    #[test]
    fn authored_codes() {
        let c = chain(&VaeArch::authored(), 128);
        let codes: Vec<_> = c.iter().map(|l| l.last().unwrap().clone()).collect();
        assert_eq!(codes, vec![vec![29, 29, 4], vec![13, 13, 4], vec![5, 5, 4], vec![1, 1, 4]]);
        assert_eq!(VaeArch::authored().image_size_for_code(29, 29), (128, 128));
    }

    #[test]
    fn dense_kind_rejects_other_sizes() {
        assert!(VaeArch::vae1().plan(128, 128).is_err());
        assert!(VaeArch::conv_vae().plan(128, 128).is_ok());
        assert!(VaeArch::conv_vae().plan(8, 8).is_err());
    }

    #[test]
    fn bench_desk_shapes() {
        let archs = VaeArch::bench_desk();
        let cvae = archs[2].code_size().unwrap();
        assert_eq!(cvae, 5 * 5 * 8);
        assert_eq!(archs[1].code_size().unwrap(), cvae);
        let l = chain(&archs[3], 32);
        assert_eq!(l[0].last().unwrap(), &vec![5, 5, 8]);
        assert_eq!(l[1].last().unwrap(), &vec![1, 1, 8]);
    }
}
