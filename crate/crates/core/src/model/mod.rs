//! The upsampler: a shallow pixel-dense encoder, one weight-shared 2× decoder
//! ending in the local attender, and an optional residual refiner.
//!
//! [`forward`] holds the eager inference path; [`graph`] records the same
//! computation on a gradient tape for training.

pub mod forward;
pub mod graph;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attender::AttenderParams;
use crate::error::{Error, Result};
use crate::neighborhood::{Neighborhood, Pattern};
use crate::ops::NormAxis;
use crate::tensor::{ConvKernel, Real};

pub use forward::{color_correct, noise_map, InferenceTrace};
pub use graph::{param_slice_lens, taped_inference, ModelNodes};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per-channel statistics over all positions of the map.
    Batch,
    /// Per-position statistics over channels.
    Layer,
}

impl NormKind {
    pub fn axis(self) -> NormAxis {
        match self {
            NormKind::Batch => NormAxis::Spatial,
            NormKind::Layer => NormAxis::Channel,
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            other => Err(Error::Config(format!("unknown norm kind {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UpliftConfig {
    pub backbone_patch: usize,
    pub image_channels: usize,
    /// Channels of the backbone features being upsampled.
    pub feat_channels: usize,
    /// Widths of the stride-1 encoder convolutions; the last is the guide
    /// feature width fed to every decoder step.
    pub encoder_channels: Vec<usize>,
    /// `[pre, up]`: width after the low-resolution conv and after the 2×
    /// transposed conv.
    pub decoder_channels: Vec<usize>,
    /// Channels of the decoder output that drives the attender.
    pub guide_channels: usize,
    pub neighborhood: Neighborhood,
    pub use_refiner: bool,
    pub refiner_channels: usize,
    /// Gaussian channels concatenated before every encoder layer but the first.
    pub noise_channels: usize,
    pub noise_seed: u64,
    pub norm_kind: NormKind,
}

impl UpliftConfig {
    /// The compact predictive configuration.
    pub fn small(backbone_patch: usize, feat_channels: usize) -> Self {
        Self {
            backbone_patch,
            image_channels: 3,
            feat_channels,
            encoder_channels: vec![32, 32, 32],
            decoder_channels: vec![64, 64],
            guide_channels: 64,
            neighborhood: Neighborhood::named(Pattern::N17),
            use_refiner: false,
            refiner_channels: 32,
            noise_channels: 0,
            noise_seed: 0,
            norm_kind: NormKind::Batch,
        }
    }

    pub fn encoder_out_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated non-empty")
    }

    /// Number of 2× steps that reach pixel density; patch sizes that are not
    /// powers of two round up and are resized down afterwards.
    pub fn pixel_dense_steps(&self) -> u32 {
        self.backbone_patch.next_power_of_two().trailing_zeros()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.backbone_patch == 0 {
            return bad("backbone_patch must be positive");
        }
        if self.image_channels == 0 || self.feat_channels == 0 || self.guide_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad("encoder_channels must be a non-empty list of positive widths");
        }
        if self.decoder_channels.len() != 2 || self.decoder_channels.contains(&0) {
            return bad("decoder_channels must list exactly two positive widths");
        }
        if self.use_refiner && self.refiner_channels == 0 {
            return bad("refiner_channels must be positive when the refiner is enabled");
        }
        Ok(())
    }

    /// Ordered `key=value` pairs; the order is fixed so serialization is stable.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| {
            v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        };
        vec![
            ("backbone_patch", self.backbone_patch.to_string()),
            ("image_channels", self.image_channels.to_string()),
            ("feat_channels", self.feat_channels.to_string()),
            ("encoder_channels", list(&self.encoder_channels)),
            ("decoder_channels", list(&self.decoder_channels)),
            ("guide_channels", self.guide_channels.to_string()),
            ("neighborhood", self.neighborhood.to_text()),
            ("use_refiner", self.use_refiner.to_string()),
            ("refiner_channels", self.refiner_channels.to_string()),
            ("noise_channels", self.noise_channels.to_string()),
            ("noise_seed", self.noise_seed.to_string()),
            ("norm_kind", self.norm_kind.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(pairs: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            pairs
                .get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
        }
        fn num<V: FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<V> {
            let raw = get(pairs, key)?;
            raw.trim()
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?}: cannot parse {raw:?}")))
        }
        fn list(pairs: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
            get(pairs, key)?
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("key {key:?}: bad entry {p:?}")))
                })
                .collect()
        }
        let config = Self {
            backbone_patch: num(pairs, "backbone_patch")?,
            image_channels: num(pairs, "image_channels")?,
            feat_channels: num(pairs, "feat_channels")?,
            encoder_channels: list(pairs, "encoder_channels")?,
            decoder_channels: list(pairs, "decoder_channels")?,
            guide_channels: num(pairs, "guide_channels")?,
            neighborhood: get(pairs, "neighborhood")?.parse()?,
            use_refiner: num(pairs, "use_refiner")?,
            refiner_channels: num(pairs, "refiner_channels")?,
            noise_channels: num(pairs, "noise_channels")?,
            noise_seed: num(pairs, "noise_seed")?,
            norm_kind: get(pairs, "norm_kind")?.parse()?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Affine parameters of a normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T: Real = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> NormParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
        }
    }

    fn cast<U: Real>(&self) -> NormParams<U> {
        NormParams {
            gamma: self.gamma.iter().map(|&v| U::lit(v.as_f64())).collect(),
            beta: self.beta.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Convolution followed (optionally) by normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Real = f32> {
    pub conv: ConvKernel<T>,
    pub norm: Option<NormParams<T>>,
}

impl<T: Real> ConvLayer<T> {
    fn cast<U: Real>(&self) -> ConvLayer<U> {
        ConvLayer {
            conv: self.conv.cast(),
            norm: self.norm.as_ref().map(NormParams::cast),
        }
    }
}

/// The single 2× decoder shared by every upsampling step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T: Real = f32> {
    /// 3×3 conv on the low-resolution features.
    pub pre: ConvLayer<T>,
    /// 4×4 stride-2 transposed conv to twice the resolution.
    pub up: ConvLayer<T>,
    /// 3×3 conv over `[upsampled, encoder guide]` producing the attender guide.
    pub fuse: ConvKernel<T>,
}

/// Residual block `x + second(relu(first(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams<T: Real = f32> {
    pub first: ConvKernel<T>,
    pub second: ConvKernel<T>,
}

/// Borrowed view of one parameter tensor, in declaration order.
pub enum ParamRef<'a, T: Real> {
    Kernel(&'a ConvKernel<T>),
    Vector(&'a [T]),
}

pub enum ParamMut<'a, T: Real> {
    Kernel(&'a mut ConvKernel<T>),
    Vector(&'a mut Vec<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpliftModel<T: Real = f32> {
    config: UpliftConfig,
    pub encoder: Vec<ConvLayer<T>>,
    pub decoder: DecoderParams<T>,
    pub attender: AttenderParams<T>,
    pub refiner: Option<RefinerParams<T>>,
}

impl<T: Real> UpliftModel<T> {
    /// Randomly initialized model. The refiner's second conv starts at zero so
    /// the refiner begins as the identity.
    pub fn new(config: UpliftConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = |c: usize| Some(NormParams::identity(c));
        let mut encoder = Vec::with_capacity(config.encoder_channels.len());
        let mut in_ch = config.image_channels;
        let last = config.encoder_channels.len() - 1;
        for (li, &out_ch) in config.encoder_channels.iter().enumerate() {
            if li > 0 {
                in_ch += config.noise_channels;
            }
            encoder.push(ConvLayer {
                conv: ConvKernel::init_uniform(out_ch, in_ch, 3, 3, &mut rng),
                norm: if li < last { norm(out_ch) } else { None },
            });
            in_ch = out_ch;
        }
        let (d0, d1) = (config.decoder_channels[0], config.decoder_channels[1]);
        let decoder = DecoderParams {
            pre: ConvLayer {
                conv: ConvKernel::init_uniform(d0, config.feat_channels, 3, 3, &mut rng),
                norm: norm(d0),
            },
            up: ConvLayer {
                conv: ConvKernel::init_uniform(d1, d0, 4, 4, &mut rng),
                norm: norm(d1),
            },
            fuse: ConvKernel::init_uniform(
                config.guide_channels,
                d1 + config.encoder_out_channels(),
                3,
                3,
                &mut rng,
            ),
        };
        let attender = AttenderParams::init(config.guide_channels, &config.neighborhood, &mut rng);
        let refiner = config.use_refiner.then(|| RefinerParams {
            first: ConvKernel::init_uniform(
                config.refiner_channels,
                config.feat_channels,
                3,
                3,
                &mut rng,
            ),
            second: ConvKernel::zeros(config.feat_channels, config.refiner_channels, 3, 3),
        });
        Ok(Self {
            config,
            encoder,
            decoder,
            attender,
            refiner,
        })
    }

    pub fn config(&self) -> &UpliftConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> UpliftModel<U> {
        UpliftModel {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(ConvLayer::cast).collect(),
            decoder: DecoderParams {
                pre: self.decoder.pre.cast(),
                up: self.decoder.up.cast(),
                fuse: self.decoder.fuse.cast(),
            },
            attender: self.attender.cast(),
            refiner: self.refiner.as_ref().map(|r| RefinerParams {
                first: r.first.cast(),
                second: r.second.cast(),
            }),
        }
    }

    /// Every parameter tensor in declaration order: encoder layers, decoder
    /// (pre, up, fuse), attender projection, refiner.
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        fn push_layer<'a, T: Real>(l: &'a ConvLayer<T>, out: &mut Vec<ParamRef<'a, T>>) {
            out.push(ParamRef::Kernel(&l.conv));
            if let Some(n) = &l.norm {
                out.push(ParamRef::Vector(&n.gamma));
                out.push(ParamRef::Vector(&n.beta));
            }
        }
        let mut out = Vec::new();
        for l in &self.encoder {
            push_layer(l, &mut out);
        }
        push_layer(&self.decoder.pre, &mut out);
        push_layer(&self.decoder.up, &mut out);
        out.push(ParamRef::Kernel(&self.decoder.fuse));
        out.push(ParamRef::Kernel(self.attender.projection()));
        if let Some(r) = &self.refiner {
            out.push(ParamRef::Kernel(&r.first));
            out.push(ParamRef::Kernel(&r.second));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        fn push_layer<'a, T: Real>(l: &'a mut ConvLayer<T>, out: &mut Vec<ParamMut<'a, T>>) {
            out.push(ParamMut::Kernel(&mut l.conv));
            if let Some(n) = &mut l.norm {
                out.push(ParamMut::Vector(&mut n.gamma));
                out.push(ParamMut::Vector(&mut n.beta));
            }
        }
        let mut out = Vec::new();
        for l in &mut self.encoder {
            push_layer(l, &mut out);
        }
        push_layer(&mut self.decoder.pre, &mut out);
        push_layer(&mut self.decoder.up, &mut out);
        out.push(ParamMut::Kernel(&mut self.decoder.fuse));
        out.push(ParamMut::Kernel(self.attender.projection_mut()));
        if let Some(r) = &mut self.refiner {
            out.push(ParamMut::Kernel(&mut r.first));
            out.push(ParamMut::Kernel(&mut r.second));
        }
        out
    }

    /// Flat mutable slices over every scalar parameter, declaration order
    /// (a kernel contributes its weights then its bias).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for p in self.params_mut() {
            match p {
                ParamMut::Kernel(k) => {
                    let (w, b) = k.parts_mut();
                    out.push(w);
                    out.push(b);
                }
                ParamMut::Vector(v) => out.push(v.as_mut_slice()),
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params()
            .iter()
            .map(|p| match p {
                ParamRef::Kernel(k) => k.param_count(),
                ParamRef::Vector(v) => v.len(),
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_pairs_round_trip() {
        let mut cfg = UpliftConfig::small(14, 24);
        cfg.use_refiner = true;
        cfg.noise_channels = 2;
        cfg.norm_kind = NormKind::Layer;
        let pairs: BTreeMap<String, String> = cfg
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(UpliftConfig::from_pairs(&pairs).unwrap(), cfg);
    }

    #[test]
    fn config_validation() {
        let mut cfg = UpliftConfig::small(8, 8);
        cfg.decoder_channels = vec![4];
        assert!(cfg.validate().is_err());
        let mut cfg = UpliftConfig::small(8, 8);
        cfg.encoder_channels.clear();
        assert!(UpliftModel::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn pixel_dense_steps() {
        assert_eq!(UpliftConfig::small(16, 4).pixel_dense_steps(), 4);
        assert_eq!(UpliftConfig::small(14, 4).pixel_dense_steps(), 4);
        assert_eq!(UpliftConfig::small(8, 4).pixel_dense_steps(), 3);
    }

    #[test]
    fn param_views_agree() {
        let mut cfg = UpliftConfig::small(8, 6);
        cfg.use_refiner = true;
        let mut m = UpliftModel::<f32>::new(cfg, 1).unwrap();
        let count = m.param_count();
        let slices: usize = m.param_slices_mut().iter().map(|s| s.len()).sum();
        assert_eq!(count, slices);
        assert!(m.refiner.as_ref().unwrap().second.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn small_config_is_compact() {
        let m = UpliftModel::<f32>::new(UpliftConfig::small(16, 384), 0).unwrap();
        assert!(m.param_count() < 1_500_000, "{}", m.param_count());
    }
}
