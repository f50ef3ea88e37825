//! The multi-depth loss recomputed step by step at 64-bit with the scalar
//! attender reference, sharing only the decoder's convolution stack.

use uplift_core::model::{UpliftConfig, UpliftModel};
use uplift_core::ops;
use uplift_core::training::{depth_loss, synthetic_image, total_loss_grads, SurrogateBackbone};
use uplift_core::{attend_reference, FeatureMap, Neighborhood, Pattern};

fn mse(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn oracle(model: &UpliftModel<f64>, backbone: &SurrogateBackbone, image: &FeatureMap<f64>, depth: u32) -> Vec<f64> {
    let (h, w, _) = image.shape();
    let shrink = |k: u32| if k == 0 { image.clone() } else { ops::bilinear_resize(image, h >> k, w >> k) };
    let input = shrink(depth);
    let encoded = model.encoder_forward(&input).unwrap();
    let n = &model.config().neighborhood;
    let mut f = backbone.forward(&input).unwrap();
    let mut terms = Vec::new();
    for k in 1..=depth {
        let guide = ops::nearest_resize(&encoded, 2 * f.height(), 2 * f.width());
        let g = model.decoder_guide(&f, &guide).unwrap();
        f = attend_reference(&g, &f, n, &model.attender).unwrap();
        let pred = if k == depth && model.refiner.is_some() { model.refiner_forward(&f).unwrap() } else { f.clone() };
        terms.push(mse(&pred, &backbone.forward(&shrink(depth - k)).unwrap()));
    }
    terms
}

fn setup(refiner: bool) -> (UpliftModel, SurrogateBackbone, FeatureMap<f32>) {
    let mut config = UpliftConfig::small(4, 6);
    config.encoder_channels = vec![8, 8];
    config.decoder_channels = vec![8, 8];
    config.guide_channels = 8;
    config.neighborhood = Neighborhood::named(Pattern::N13);
    config.use_refiner = refiner;
    let model = UpliftModel::new(config, 21).unwrap();
    let backbone = SurrogateBackbone::new(4, 3, 6, 4, true);
    (model, backbone, synthetic_image(6, 2, 32, 32))
}

#[test]
fn depth_two_loss_matches_reference_pipeline() {
    for refiner in [false, true] {
        let (model, backbone, image) = setup(refiner);
        let fast = depth_loss(&model, &backbone, &image, 2).unwrap();
        let slow = oracle(&model.cast(), &backbone, &image.cast(), 2);
        assert_eq!(fast.terms.len(), 2);
        for (a, b) in fast.terms.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-4, "refiner={refiner}: {a} vs {b}");
        }
    }
}

#[test]
fn taped_loss_matches_eager() {
    let (model, backbone, image) = setup(true);
    let taped = total_loss_grads(&model, &backbone, &image, &[1, 2]).unwrap();
    let eager: f64 = [1, 2].iter().map(|&d| depth_loss(&model, &backbone, &image, d).unwrap().total()).sum();
    assert_eq!(taped.total(), eager);
}
