use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::ops;
use crate::tensor::{ConvKernel, FeatureMap, Real};

/// Relative strength of the random per-pixel component of the patch embed.
const EMBED_JITTER: f64 = 0.25;

/// Frozen stand-in for a pretrained patch backbone.
///
/// The patch embed is a `p × p`, stride-`p` convolution whose weights are a
/// random colour mix spread evenly over the patch (a box filter) plus a
/// smaller random per-pixel component. The box part makes features at
/// different image scales mutually predictable; the jitter gives them some
/// sub-patch structure.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateBackbone {
    patch: usize,
    embed: ConvKernel<f32>,
    mixing: Option<ConvKernel<f32>>,
}

impl SurrogateBackbone {
    pub fn new(patch: usize, image_channels: usize, channels: usize, seed: u64, mixing: bool) -> Self {
        assert!(patch > 0 && image_channels > 0 && channels > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0B0_5EED);
        let area = (patch * patch) as f64;
        let mut embed = ConvKernel::zeros(channels, image_channels, patch, patch);
        for o in 0..channels {
            for i in 0..image_channels {
                let colour: f64 = rng.gen_range(-1.0..1.0);
                for ky in 0..patch {
                    for kx in 0..patch {
                        let jitter: f64 = rng.gen_range(-1.0..1.0);
                        let w = (colour + EMBED_JITTER * jitter) / area;
                        embed.set_weight(o, i, ky, kx, w as f32);
                    }
                }
            }
        }
        for b in embed.bias_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
        let mixing = mixing.then(|| {
            // Identity plus a weak random 3×3 neighbourhood mix.
            let mut k = ConvKernel::init_uniform(channels, channels, 3, 3, &mut rng);
            for w in k.weights_mut() {
                *w *= 0.2;
            }
            for c in 0..channels {
                let centre = k.weight(c, c, 1, 1);
                k.set_weight(c, c, 1, 1, centre + 1.0);
            }
            k.bias_mut().iter_mut().for_each(|b| *b = 0.0);
            k
        });
        Self {
            patch,
            embed,
            mixing,
        }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.embed.out_channels()
    }

    /// Parameter values, for checking that training leaves them untouched.
    pub fn param_snapshot(&self) -> Vec<f32> {
        let mut out = self.embed.weights().to_vec();
        out.extend_from_slice(self.embed.bias());
        if let Some(m) = &self.mixing {
            out.extend_from_slice(m.weights());
            out.extend_from_slice(m.bias());
        }
        out
    }

    pub fn forward<T: Real>(&self, image: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (h, w, _) = image.shape();
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(shape_err!(
                "image {h}x{w} is not divisible by backbone patch {}",
                self.patch
            ));
        }
        let feats = ops::conv2d(image, &self.embed.cast(), self.patch, 0)?;
        match &self.mixing {
            Some(m) => Ok(mix_replicate(&feats, m)),
            None => Ok(feats),
        }
    }
}

/// 3×3 convolution with replicate padding, so constant inputs stay constant.
fn mix_replicate<T: Real>(x: &FeatureMap<T>, k: &ConvKernel<f32>) -> FeatureMap<T> {
    let (h, w, c) = x.shape();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    FeatureMap::from_fn(h, w, c, |i, j, o| {
        let mut acc = T::lit(k.bias()[o] as f64);
        for ky in 0..3 {
            for kx in 0..3 {
                let si = clamp(i as isize + ky as isize - 1, h);
                let sj = clamp(j as isize + kx as isize - 1, w);
                let px = x.pixel(si, sj);
                for (ci, &v) in px.iter().enumerate() {
                    acc += T::lit(k.weight(o, ci, ky, kx) as f64) * v;
                }
            }
        }
        acc
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let b = SurrogateBackbone::new(8, 3, 6, 1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = FeatureMap::<f32>::random_uniform(64, 64, 3, 1.0, &mut rng);
        let f = b.forward(&img).unwrap();
        assert_eq!(f.shape(), (8, 8, 6));
        assert_eq!(SurrogateBackbone::new(8, 3, 6, 1, false).forward(&img).unwrap(), f);
        assert!(b.forward(&FeatureMap::<f32>::zeros(60, 64, 3)).is_err());
    }

    #[test]
    fn constant_image_gives_constant_features() {
        for mixing in [false, true] {
            let b = SurrogateBackbone::new(4, 3, 5, 2, mixing);
            let img = FeatureMap::<f64>::filled(16, 12, 3, 0.3);
            let f = b.forward(&img).unwrap();
            let first = f.pixel(0, 0).to_vec();
            for px in f.data().chunks_exact(5) {
                for (a, b) in px.iter().zip(&first) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
