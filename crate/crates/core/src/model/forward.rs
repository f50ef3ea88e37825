//! Eager inference: intermediates are dropped as soon as they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ConvLayer, UpliftModel};
use crate::attender;
use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::tensor::{FeatureMap, Real};

/// Seeded standard-normal channels for encoder layer `layer`.
pub fn noise_map<T: Real>(seed: u64, layer: usize, h: usize, w: usize, c: usize) -> FeatureMap<T> {
    let stream = seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    FeatureMap::from_fn(h, w, c, |_, _, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::lit(v)
    })
}

/// What happened during one inference call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferenceTrace {
    pub encoder_calls: usize,
    /// Address of the decoder parameter block read at each step.
    pub decoder_params: Vec<usize>,
    /// `(height, width)` of the features after each step.
    pub step_dims: Vec<(usize, usize)>,
}

fn apply_layer<T: Real>(
    x: &FeatureMap<T>,
    layer: &ConvLayer<T>,
    stride: usize,
    pad: usize,
    transpose: bool,
    axis: ops::NormAxis,
    activate: bool,
) -> Result<FeatureMap<T>> {
    let mut y = if transpose {
        ops::conv_transpose2d(x, &layer.conv, stride, pad)?
    } else {
        ops::conv2d(x, &layer.conv, stride, pad)?
    };
    if let Some(n) = &layer.norm {
        y = ops::normalize(&y, &n.gamma, &n.beta, axis)?;
    }
    if activate {
        y = ops::relu(&y);
    }
    Ok(y)
}

impl<T: Real> UpliftModel<T> {
    /// Dense guide features at the input's pixel resolution.
    pub fn encoder_forward(&self, image: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let cfg = self.config();
        let (h, w, c) = image.shape();
        if c != cfg.image_channels {
            return Err(shape_err!(
                "image has {c} channels, encoder expects {}",
                cfg.image_channels
            ));
        }
        if h < cfg.backbone_patch || w < cfg.backbone_patch {
            return Err(shape_err!(
                "image {h}x{w} is smaller than the backbone patch {}",
                cfg.backbone_patch
            ));
        }
        let axis = cfg.norm_kind.axis();
        let last = self.encoder.len() - 1;
        let mut x = image.clone();
        for (li, layer) in self.encoder.iter().enumerate() {
            if li > 0 && cfg.noise_channels > 0 {
                let noise = noise_map(cfg.noise_seed, li, h, w, cfg.noise_channels);
                x = ops::concat_channels(&x, &noise)?;
            }
            x = apply_layer(&x, layer, 1, 1, false, axis, li < last)?;
        }
        Ok(x)
    }

    fn check_step_inputs(&self, f_in: &FeatureMap<T>, guide: &FeatureMap<T>) -> Result<()> {
        let cfg = self.config();
        if f_in.channels() != cfg.feat_channels {
            return Err(shape_err!(
                "features have {} channels, model expects {}",
                f_in.channels(),
                cfg.feat_channels
            ));
        }
        if guide.height() != 2 * f_in.height() || guide.width() != 2 * f_in.width() {
            return Err(shape_err!(
                "guide {}x{} must be exactly twice the features {}x{}",
                guide.height(),
                guide.width(),
                f_in.height(),
                f_in.width()
            ));
        }
        if guide.channels() != cfg.encoder_out_channels() {
            return Err(shape_err!(
                "guide has {} channels, decoder expects {}",
                guide.channels(),
                cfg.encoder_out_channels()
            ));
        }
        Ok(())
    }

    /// Decoder output `G` at twice the resolution of `f_in`.
    pub fn decoder_guide(&self, f_in: &FeatureMap<T>, guide: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_step_inputs(f_in, guide)?;
        let axis = self.config().norm_kind.axis();
        let d = &self.decoder;
        let low = apply_layer(f_in, &d.pre, 1, 1, false, axis, true)?;
        let up = apply_layer(&low, &d.up, 2, 1, true, axis, true)?;
        drop(low);
        let fused = ops::concat_channels(&up, guide)?;
        drop(up);
        Ok(ops::relu(&ops::conv2d(&fused, &d.fuse, 1, 1)?))
    }

    /// One 2× step: decoder guide, then the local attender over `f_in`.
    pub fn decoder_step(&self, f_in: &FeatureMap<T>, guide: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = self.decoder_guide(f_in, guide)?;
        attender::attend(&g, f_in, &self.config().neighborhood, &self.attender)
    }

    pub fn refiner_forward(&self, feats: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let r = self
            .refiner
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no refiner".into()))?;
        let hidden = ops::relu(&ops::conv2d(feats, &r.first, 1, 1)?);
        let delta = ops::conv2d(&hidden, &r.second, 1, 1)?;
        ops::add(feats, &delta)
    }

    /// Run `steps` decoder steps from `low_feats`, guided by encoder features
    /// `encoded`, returning every intermediate output.
    pub fn upsample_steps(
        &self,
        encoded: &FeatureMap<T>,
        low_feats: &FeatureMap<T>,
        steps: usize,
    ) -> Result<Vec<FeatureMap<T>>> {
        let mut outs: Vec<FeatureMap<T>> = Vec::with_capacity(steps);
        for _ in 0..steps {
            let current = outs.last().unwrap_or(low_feats);
            let guide =
                ops::nearest_resize(encoded, 2 * current.height(), 2 * current.width());
            let next = self.decoder_step(current, &guide)?;
            outs.push(next);
        }
        Ok(outs)
    }

    fn check_inference_inputs(
        &self,
        image: &FeatureMap<T>,
        low_feats: &FeatureMap<T>,
        steps: u32,
    ) -> Result<()> {
        let p = self.config().backbone_patch;
        if steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if steps > self.config().pixel_dense_steps() {
            return Err(Error::InvalidArgument(format!(
                "{steps} steps upsample {}x, beyond the encoder's pixel density for patch {p}",
                1u64 << steps
            )));
        }
        if !image.height().is_multiple_of(p) || !image.width().is_multiple_of(p) {
            return Err(shape_err!(
                "image {}x{} is not divisible by patch {p}",
                image.height(),
                image.width()
            ));
        }
        if low_feats.height() * p != image.height() || low_feats.width() * p != image.width() {
            return Err(shape_err!(
                "features {}x{} do not match image {}x{} at patch {p}",
                low_feats.height(),
                low_feats.width(),
                image.height(),
                image.width()
            ));
        }
        Ok(())
    }

    /// Encoder once, then `steps` weight-shared decoder steps, then the
    /// refiner if enabled. Output is `(H/p)·2^steps` on each axis.
    pub fn uplift_inference(
        &self,
        image: &FeatureMap<T>,
        low_feats: &FeatureMap<T>,
        steps: u32,
    ) -> Result<FeatureMap<T>> {
        self.uplift_inference_traced(image, low_feats, steps)
            .map(|(out, _)| out)
    }

    pub fn uplift_inference_traced(
        &self,
        image: &FeatureMap<T>,
        low_feats: &FeatureMap<T>,
        steps: u32,
    ) -> Result<(FeatureMap<T>, InferenceTrace)> {
        self.check_inference_inputs(image, low_feats, steps)?;
        let mut trace = InferenceTrace::default();
        let encoded = self.encoder_forward(image)?;
        trace.encoder_calls += 1;
        let mut current = low_feats.clone();
        for _ in 0..steps {
            let guide =
                ops::nearest_resize(&encoded, 2 * current.height(), 2 * current.width());
            trace.decoder_params.push(std::ptr::addr_of!(self.decoder) as usize);
            current = self.decoder_step(&current, &guide)?;
            trace.step_dims.push((current.height(), current.width()));
        }
        drop(encoded);
        if self.refiner.is_some() {
            current = self.refiner_forward(&current)?;
        }
        Ok((current, trace))
    }

    /// Upsample to the image's pixel grid. Patch sizes that are not powers of
    /// two are over-upsampled and then bilinearly resized down.
    pub fn uplift_pixel_dense(
        &self,
        image: &FeatureMap<T>,
        low_feats: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        let steps = self.config().pixel_dense_steps();
        if steps == 0 {
            return Ok(low_feats.clone());
        }
        let out = self.uplift_inference(image, low_feats, steps)?;
        if out.height() == image.height() && out.width() == image.width() {
            Ok(out)
        } else {
            Ok(ops::bilinear_resize(&out, image.height(), image.width()))
        }
    }
}

/// Shift `high` so its per-channel means match those of `low`.
pub fn color_correct<T: Real>(low: &FeatureMap<T>, high: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if low.channels() != 3 || high.channels() != 3 {
        return Err(shape_err!(
            "color correction needs 3-channel images, got {} and {}",
            low.channels(),
            high.channels()
        ));
    }
    let shift: Vec<T> = high
        .channel_means()
        .iter()
        .zip(low.channel_means())
        .map(|(h, l)| T::lit(h - l))
        .collect();
    let mut out = high.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for (v, &s) in px.iter_mut().zip(&shift) {
            *v -= s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attender::AttenderParams;
    use crate::model::{NormKind, UpliftConfig};
    use crate::neighborhood::{Neighborhood, Pattern};
    use rand::SeedableRng;

    fn tiny_config(patch: usize) -> UpliftConfig {
        UpliftConfig {
            backbone_patch: patch,
            image_channels: 3,
            feat_channels: 4,
            encoder_channels: vec![6, 5],
            decoder_channels: vec![6, 6],
            guide_channels: 5,
            neighborhood: Neighborhood::named(Pattern::N9),
            use_refiner: false,
            refiner_channels: 4,
            noise_channels: 0,
            noise_seed: 3,
            norm_kind: NormKind::Batch,
        }
    }

    fn inputs(h: usize, w: usize, patch: usize, seed: u64) -> (FeatureMap<f32>, FeatureMap<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            FeatureMap::random_uniform(h, w, 3, 1.0, &mut rng),
            FeatureMap::random_uniform(h / patch, w / patch, 4, 1.0, &mut rng),
        )
    }

    #[test]
    fn encoder_preserves_resolution() {
        for norm in [NormKind::Batch, NormKind::Layer] {
            let mut cfg = tiny_config(4);
            cfg.norm_kind = norm;
            cfg.noise_channels = 2;
            let m = UpliftModel::<f32>::new(cfg, 0).unwrap();
            let (img, _) = inputs(8, 12, 4, 1);
            let enc = m.encoder_forward(&img).unwrap();
            assert_eq!(enc.shape(), (8, 12, 5));
            assert_eq!(m.encoder_forward(&img).unwrap(), enc);
        }
        let m = UpliftModel::<f32>::new(tiny_config(4), 0).unwrap();
        assert!(m.encoder_forward(&FeatureMap::zeros(3, 8, 3)).is_err());
    }

    #[test]
    fn zero_encoder_emits_bias() {
        let mut m = UpliftModel::<f32>::new(tiny_config(4), 0).unwrap();
        for layer in &mut m.encoder {
            layer.conv.weights_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let (img, _) = inputs(8, 8, 4, 2);
        let enc = m.encoder_forward(&img).unwrap();
        let bias = m.encoder.last().unwrap().conv.bias().to_vec();
        for px in enc.data().chunks_exact(5) {
            assert_eq!(px, &bias[..]);
        }
    }

    #[test]
    fn step_shape_and_convexity() {
        let m = UpliftModel::<f32>::new(tiny_config(4), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = FeatureMap::<f32>::random_uniform(3, 5, 4, 1.0, &mut rng);
        let guide = FeatureMap::<f32>::random_uniform(6, 10, 5, 1.0, &mut rng);
        let out = m.decoder_step(&f, &guide).unwrap();
        assert_eq!(out.shape(), (6, 10, 4));
        let ranges = f.channel_ranges();
        for px in out.data().chunks_exact(4) {
            for (v, (lo, hi)) in px.iter().zip(&ranges) {
                assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
            }
        }
        assert!(m.decoder_step(&f, &FeatureMap::zeros(6, 9, 5)).is_err());
    }

    #[test]
    fn one_hot_step_is_nearest() {
        let mut m = UpliftModel::<f32>::new(tiny_config(4), 5).unwrap();
        m.attender = AttenderParams::center_one_hot(5, &m.config().neighborhood);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = FeatureMap::<f32>::random_uniform(3, 4, 4, 1.0, &mut rng);
        let guide = FeatureMap::<f32>::random_uniform(6, 8, 5, 1.0, &mut rng);
        assert_eq!(
            m.decoder_step(&f, &guide).unwrap(),
            ops::nearest_resize(&f, 6, 8)
        );
    }

    #[test]
    fn inference_shapes_and_trace() {
        let m = UpliftModel::<f32>::new(tiny_config(4), 8).unwrap();
        let (img, feats) = inputs(16, 8, 4, 9);
        let (out, trace) = m.uplift_inference_traced(&img, &feats, 2).unwrap();
        assert_eq!(out.shape(), (16, 8, 4));
        assert_eq!(trace.encoder_calls, 1);
        assert_eq!(trace.step_dims, vec![(8, 4), (16, 8)]);
        assert!(trace.decoder_params.windows(2).all(|w| w[0] == w[1]));
        assert!(m.uplift_inference(&img, &feats, 3).is_err());
        assert!(m.uplift_inference(&img, &feats, 0).is_err());
        assert!(m.uplift_inference(&FeatureMap::zeros(15, 8, 3), &feats, 1).is_err());
    }

    #[test]
    fn refiner_identity_at_zero() {
        let mut cfg = tiny_config(4);
        cfg.use_refiner = true;
        let m = UpliftModel::<f32>::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FeatureMap::<f32>::random_uniform(5, 5, 4, 1.0, &mut rng);
        assert_eq!(m.refiner_forward(&f).unwrap(), f);
        let plain = UpliftModel::<f32>::new(tiny_config(4), 1).unwrap();
        assert!(plain.refiner_forward(&f).is_err());
    }

    #[test]
    fn color_correct_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let low = FeatureMap::<f64>::random_uniform(4, 4, 3, 1.0, &mut rng);
        assert!(color_correct(&low, &low).unwrap().max_abs_diff(&low).unwrap() < 1e-12);
        let high = ops::bilinear_resize(&low, 8, 8).map(|v| v + 0.1);
        let fixed = color_correct(&low, &high).unwrap();
        assert!(fixed
            .max_abs_diff(&ops::bilinear_resize(&low, 8, 8))
            .unwrap()
            < 1e-12);
        let other = FeatureMap::<f64>::random_uniform(8, 6, 3, 2.0, &mut rng);
        let fixed = color_correct(&low, &other).unwrap();
        for (a, b) in fixed.channel_means().iter().zip(low.channel_means()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(color_correct(&low, &FeatureMap::zeros(2, 2, 4)).is_err());
    }
}
