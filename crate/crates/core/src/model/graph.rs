//! The model recorded on a [`Tape`] for training. Mirrors [`super::forward`]
//! op for op, so values agree with the eager path bit for bit.

use super::forward::noise_map;
use super::{ConvLayer, ParamRef, UpliftConfig, UpliftModel};
use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{shape_err, Error, Result};
use crate::neighborhood::Offset;
use crate::tensor::Real;

#[derive(Clone, Debug)]
struct LayerNodes {
    conv: NodeId,
    norm: Option<(NodeId, NodeId)>,
}

/// Tape leaves for every model parameter.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    config: UpliftConfig,
    offsets: Vec<Offset>,
    /// Declaration order, matching [`UpliftModel::params`].
    params: Vec<NodeId>,
    encoder: Vec<LayerNodes>,
    pre: LayerNodes,
    up: LayerNodes,
    fuse: NodeId,
    projection: NodeId,
    refiner: Option<(NodeId, NodeId)>,
}

impl ModelNodes {
    /// Push a trainable leaf for each parameter of `model`.
    pub fn register<T: Real>(tape: &mut Tape<T>, model: &UpliftModel<T>) -> Self {
        let mut params = Vec::new();
        let layer = |tape: &mut Tape<T>, l: &ConvLayer<T>, params: &mut Vec<NodeId>| {
            let conv = tape.param_kernel(l.conv.clone());
            params.push(conv);
            let norm = l.norm.as_ref().map(|n| {
                let g = tape.param_vector(n.gamma.clone());
                let b = tape.param_vector(n.beta.clone());
                params.extend([g, b]);
                (g, b)
            });
            LayerNodes { conv, norm }
        };
        let encoder = model
            .encoder
            .iter()
            .map(|l| layer(tape, l, &mut params))
            .collect();
        let pre = layer(tape, &model.decoder.pre, &mut params);
        let up = layer(tape, &model.decoder.up, &mut params);
        let fuse = tape.param_kernel(model.decoder.fuse.clone());
        let projection = tape.param_kernel(model.attender.projection().clone());
        params.extend([fuse, projection]);
        let refiner = model.refiner.as_ref().map(|r| {
            let first = tape.param_kernel(r.first.clone());
            let second = tape.param_kernel(r.second.clone());
            params.extend([first, second]);
            (first, second)
        });
        debug_assert_eq!(params.len(), model.params().len());
        Self {
            config: model.config().clone(),
            offsets: model.config().neighborhood.offsets().to_vec(),
            params,
            encoder,
            pre,
            up,
            fuse,
            projection,
            refiner,
        }
    }

    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }

    fn layer<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        l: &LayerNodes,
        stride: usize,
        transpose: bool,
        activate: bool,
    ) -> Result<NodeId> {
        let mut y = if transpose {
            tape.conv_transpose2d(x, l.conv, stride, 1)?
        } else {
            tape.conv2d(x, l.conv, stride, 1)?
        };
        if let Some((g, b)) = l.norm {
            y = tape.normalize(y, g, b, self.config.norm_kind.axis())?;
        }
        if activate {
            y = tape.relu(y)?;
        }
        Ok(y)
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, image: NodeId) -> Result<NodeId> {
        let (h, w, c) = tape.map(image)?.shape();
        let p = self.config.backbone_patch;
        if c != self.config.image_channels || h < p || w < p {
            return Err(shape_err!("encoder cannot take a {h}x{w}x{c} image"));
        }
        let last = self.encoder.len() - 1;
        let mut x = image;
        for (li, l) in self.encoder.iter().enumerate() {
            if li > 0 && self.config.noise_channels > 0 {
                let noise = tape.constant(noise_map(
                    self.config.noise_seed,
                    li,
                    h,
                    w,
                    self.config.noise_channels,
                ));
                x = tape.concat(x, noise)?;
            }
            x = self.layer(tape, x, l, 1, false, li < last)?;
        }
        Ok(x)
    }

    /// One decoder step; `guide` must already be at twice `f_in`'s size.
    pub fn decoder_step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        f_in: NodeId,
        guide: NodeId,
    ) -> Result<NodeId> {
        {
            let (f, g) = (tape.map(f_in)?, tape.map(guide)?);
            if g.height() != 2 * f.height() || g.width() != 2 * f.width() {
                return Err(shape_err!(
                    "guide {}x{} must be exactly twice the features {}x{}",
                    g.height(),
                    g.width(),
                    f.height(),
                    f.width()
                ));
            }
        }
        let low = self.layer(tape, f_in, &self.pre, 1, false, true)?;
        let up = self.layer(tape, low, &self.up, 2, true, true)?;
        let fused = tape.concat(up, guide)?;
        let g = tape.conv2d(fused, self.fuse, 1, 1)?;
        let g = tape.relu(g)?;
        let (out, _) = tape.attend(g, f_in, self.projection, &self.offsets)?;
        Ok(out)
    }

    /// Resize `encoded` to twice `f_in` and take a decoder step.
    pub fn guided_step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        encoded: NodeId,
        f_in: NodeId,
    ) -> Result<NodeId> {
        let (h, w, _) = tape.map(f_in)?.shape();
        let guide = tape.nearest_resize(encoded, 2 * h, 2 * w)?;
        self.decoder_step(tape, f_in, guide)
    }

    pub fn refine<T: Real>(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let (first, second) = self
            .refiner
            .ok_or_else(|| Error::InvalidArgument("model has no refiner".into()))?;
        let h = tape.conv2d(x, first, 1, 1)?;
        let h = tape.relu(h)?;
        let delta = tape.conv2d(h, second, 1, 1)?;
        tape.add(x, delta)
    }

    /// Gradients of every parameter as flat buffers aligned with
    /// [`UpliftModel::param_slices_mut`]. Unreached parameters get zeros.
    pub fn grad_slices<T: Real>(
        &self,
        tape: &Tape<T>,
        grads: &Gradients<T>,
    ) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::new();
        for &id in &self.params {
            match grads.get(id) {
                Some(g) => out.extend(g.parts().into_iter().map(<[T]>::to_vec)),
                None => out.extend(
                    tape.value(id)?
                        .parts()
                        .into_iter()
                        .map(|p| vec![T::zero(); p.len()]),
                ),
            }
        }
        Ok(out)
    }
}

/// Sizes of the flat parameter buffers, in declaration order.
pub fn param_slice_lens<T: Real>(model: &UpliftModel<T>) -> Vec<usize> {
    let mut out = Vec::new();
    for p in model.params() {
        match p {
            ParamRef::Kernel(k) => out.extend([k.weights().len(), k.bias().len()]),
            ParamRef::Vector(v) => out.push(v.len()),
        }
    }
    out
}

/// Convenience for tests: run `steps` taped steps and return the final node.
pub fn taped_inference<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ModelNodes,
    image: NodeId,
    low_feats: NodeId,
    steps: usize,
) -> Result<NodeId> {
    let encoded = nodes.encode(tape, image)?;
    let mut cur = low_feats;
    for _ in 0..steps {
        cur = nodes.guided_step(tape, encoded, cur)?;
    }
    if nodes.refiner.is_some() {
        cur = nodes.refine(tape, cur)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NormKind, UpliftConfig};
    use crate::neighborhood::{Neighborhood, Pattern};
    use crate::tensor::FeatureMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(refiner: bool, noise: usize, norm: NormKind) -> UpliftConfig {
        UpliftConfig {
            backbone_patch: 4,
            image_channels: 3,
            feat_channels: 3,
            encoder_channels: vec![4, 4],
            decoder_channels: vec![5, 5],
            guide_channels: 4,
            neighborhood: Neighborhood::named(Pattern::N13),
            use_refiner: refiner,
            refiner_channels: 3,
            noise_channels: noise,
            noise_seed: 9,
            norm_kind: norm,
        }
    }

    #[test]
    fn taped_matches_eager() {
        for (refiner, noise, norm) in [
            (false, 0, NormKind::Batch),
            (true, 2, NormKind::Layer),
        ] {
            let model = UpliftModel::<f32>::new(config(refiner, noise, norm), 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let img = FeatureMap::<f32>::random_uniform(8, 12, 3, 1.0, &mut rng);
            let feats = FeatureMap::<f32>::random_uniform(2, 3, 3, 1.0, &mut rng);
            let eager = model.uplift_inference(&img, &feats, 2).unwrap();
            let mut tape = Tape::new();
            let nodes = ModelNodes::register(&mut tape, &model);
            let i = tape.constant(img);
            let f = tape.constant(feats);
            let out = taped_inference(&mut tape, &nodes, i, f, 2).unwrap();
            assert_eq!(tape.map(out).unwrap(), &eager);
        }
    }

    #[test]
    fn grad_slices_align_with_params() {
        let mut model = UpliftModel::<f64>::new(config(true, 0, NormKind::Batch), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = FeatureMap::<f64>::random_uniform(8, 8, 3, 1.0, &mut rng);
        let feats = FeatureMap::<f64>::random_uniform(2, 2, 3, 1.0, &mut rng);
        let target = FeatureMap::<f64>::random_uniform(4, 4, 3, 1.0, &mut rng);
        let mut tape = Tape::new();
        let nodes = ModelNodes::register(&mut tape, &model);
        let (i, f, t) = (tape.constant(img), tape.constant(feats), tape.constant(target));
        let out = taped_inference(&mut tape, &nodes, i, f, 1).unwrap();
        let loss = tape.l2_loss(out, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        let slices = nodes.grad_slices(&tape, &grads).unwrap();
        let lens: Vec<usize> = model.param_slices_mut().iter().map(|s| s.len()).collect();
        assert_eq!(slices.iter().map(Vec::len).collect::<Vec<_>>(), lens);
        assert_eq!(lens, param_slice_lens(&model));
        assert!(slices.iter().flatten().any(|g| *g != 0.0));
    }
}
