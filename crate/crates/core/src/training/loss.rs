//! Multi-depth reconstruction loss.
//!
//! For depth `d` the ground-truth image `I` is reduced by `2^d` to `I'`; the
//! model upsamples `B(I')` through `d` decoder steps, and step `k` is compared
//! against `B` applied to `I` reduced by `2^(d−k)`.

use super::backbone::SurrogateBackbone;
use crate::autodiff::{NodeId, Tape};
use crate::error::{shape_err, Error, Result};
use crate::model::{ModelNodes, UpliftModel};
use crate::ops;
use crate::tensor::{FeatureMap, Real};

/// Inputs and per-step targets for one depth.
#[derive(Clone, Debug)]
pub struct DepthProblem<T: Real> {
    pub depth: u32,
    /// `I'`.
    pub input: FeatureMap<T>,
    /// `B(I')`.
    pub low_feats: FeatureMap<T>,
    /// Targets for steps `1..=d`, coarse to fine.
    pub targets: Vec<FeatureMap<T>>,
}

pub fn depth_problem<T: Real>(
    backbone: &SurrogateBackbone,
    image: &FeatureMap<T>,
    depth: u32,
) -> Result<DepthProblem<T>> {
    if depth == 0 {
        return Err(Error::InvalidArgument("training depth must be at least 1".into()));
    }
    let p = backbone.patch();
    let unit = p << depth;
    let (h, w, _) = image.shape();
    if h % unit != 0 || w % unit != 0 {
        return Err(shape_err!(
            "image {h}x{w} is not divisible by patch·2^depth = {unit}"
        ));
    }
    let reduce = |k: u32| {
        if k == 0 {
            image.clone()
        } else {
            ops::bilinear_resize(image, h >> k, w >> k)
        }
    };
    let input = reduce(depth);
    let low_feats = backbone.forward(&input)?;
    let targets = (1..=depth)
        .map(|k| backbone.forward(&reduce(depth - k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthProblem {
        depth,
        input,
        low_feats,
        targets,
    })
}

fn check_depth<T: Real>(model: &UpliftModel<T>, depth: u32) -> Result<()> {
    if depth > model.config().pixel_dense_steps() {
        return Err(Error::InvalidArgument(format!(
            "depth {depth} needs {}x upsampling, beyond pixel density at patch {}",
            1u64 << depth,
            model.config().backbone_patch
        )));
    }
    Ok(())
}

/// Per-step loss terms for one depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthLoss {
    pub depth: u32,
    pub terms: Vec<f64>,
}

impl DepthLoss {
    pub fn total(&self) -> f64 {
        self.terms.iter().sum()
    }
}

/// Eager evaluation of the depth-`d` loss.
pub fn depth_loss<T: Real>(
    model: &UpliftModel<T>,
    backbone: &SurrogateBackbone,
    image: &FeatureMap<T>,
    depth: u32,
) -> Result<DepthLoss> {
    check_depth(model, depth)?;
    let problem = depth_problem(backbone, image, depth)?;
    let encoded = model.encoder_forward(&problem.input)?;
    let mut outs = model.upsample_steps(&encoded, &problem.low_feats, depth as usize)?;
    if model.refiner.is_some() {
        let last = outs.pop().expect("depth ≥ 1");
        outs.push(model.refiner_forward(&last)?);
    }
    let terms = outs
        .iter()
        .zip(&problem.targets)
        .map(|(pred, target)| {
            assert_eq!(pred.shape(), target.shape(), "prediction/target misaligned");
            ops::l2_loss(pred, target).map(|v| v.as_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthLoss { depth, terms })
}

pub fn total_loss<T: Real>(
    model: &UpliftModel<T>,
    backbone: &SurrogateBackbone,
    image: &FeatureMap<T>,
    depths: &[u32],
) -> Result<Vec<DepthLoss>> {
    if depths.is_empty() {
        return Err(Error::InvalidArgument("depth set is empty".into()));
    }
    depths
        .iter()
        .map(|&d| depth_loss(model, backbone, image, d))
        .collect()
}

/// Record the depth-`d` loss terms on a tape.
pub fn record_depth<T: Real>(
    tape: &mut Tape<T>,
    nodes: &ModelNodes,
    has_refiner: bool,
    problem: &DepthProblem<T>,
) -> Result<Vec<NodeId>> {
    let input = tape.constant(problem.input.clone());
    let encoded = nodes.encode(tape, input)?;
    let mut cur = tape.constant(problem.low_feats.clone());
    let mut terms = Vec::with_capacity(problem.targets.len());
    for (k, target) in problem.targets.iter().enumerate() {
        cur = nodes.guided_step(tape, encoded, cur)?;
        if has_refiner && k + 1 == problem.targets.len() {
            cur = nodes.refine(tape, cur)?;
        }
        let pred_shape = tape.map(cur)?.shape();
        assert_eq!(pred_shape, target.shape(), "prediction/target misaligned");
        let t = tape.constant(target.clone());
        terms.push(tape.l2_loss(cur, t)?);
    }
    Ok(terms)
}

/// Loss values plus parameter gradients for one image.
#[derive(Clone, Debug)]
pub struct LossGrads<T: Real> {
    pub per_depth: Vec<DepthLoss>,
    /// Aligned with [`UpliftModel::param_slices_mut`].
    pub grads: Vec<Vec<T>>,
}

impl<T: Real> LossGrads<T> {
    pub fn total(&self) -> f64 {
        self.per_depth.iter().map(DepthLoss::total).sum()
    }
}

pub fn total_loss_grads<T: Real>(
    model: &UpliftModel<T>,
    backbone: &SurrogateBackbone,
    image: &FeatureMap<T>,
    depths: &[u32],
) -> Result<LossGrads<T>> {
    if depths.is_empty() {
        return Err(Error::InvalidArgument("depth set is empty".into()));
    }
    let mut tape = Tape::new();
    let nodes = ModelNodes::register(&mut tape, model);
    let mut all_terms = Vec::new();
    let mut per_depth_nodes = Vec::new();
    for &d in depths {
        check_depth(model, d)?;
        let problem = depth_problem(backbone, image, d)?;
        let terms = record_depth(&mut tape, &nodes, model.refiner.is_some(), &problem)?;
        all_terms.extend_from_slice(&terms);
        per_depth_nodes.push((d, terms));
    }
    let total = tape.sum(&all_terms)?;
    let grads = tape.backward(total)?;
    let per_depth = per_depth_nodes
        .into_iter()
        .map(|(depth, ids)| {
            let terms = ids
                .iter()
                .map(|&id| tape.scalar(id).map(|v| v.as_f64()))
                .collect::<Result<Vec<_>>>()?;
            Ok(DepthLoss { depth, terms })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossGrads {
        per_depth,
        grads: nodes.grad_slices(&tape, &grads)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UpliftConfig;
    use crate::training::data::synthetic_image;

    fn setup() -> (UpliftModel<f64>, SurrogateBackbone, FeatureMap<f64>) {
        let mut cfg = UpliftConfig::small(4, 4);
        cfg.encoder_channels = vec![4, 4];
        cfg.decoder_channels = vec![4, 4];
        cfg.guide_channels = 4;
        (
            UpliftModel::new(cfg, 3).unwrap(),
            SurrogateBackbone::new(4, 3, 4, 3, false),
            synthetic_image(0, 0, 16, 16).cast(),
        )
    }

    #[test]
    fn problem_shapes() {
        let (_, b, img) = setup();
        let p = depth_problem(&b, &img, 2).unwrap();
        assert_eq!(p.input.shape(), (4, 4, 3));
        assert_eq!(p.low_feats.shape(), (1, 1, 4));
        let dims: Vec<_> = p.targets.iter().map(|t| t.shape()).collect();
        assert_eq!(dims, vec![(2, 2, 4), (4, 4, 4)]);
        assert!(depth_problem(&b, &img, 3).is_err());
        assert!(depth_problem(&b, &img, 0).is_err());
    }

    #[test]
    fn taped_matches_eager() {
        let (m, b, img) = setup();
        let eager = total_loss(&m, &b, &img, &[1, 2]).unwrap();
        let taped = total_loss_grads(&m, &b, &img, &[1, 2]).unwrap();
        assert_eq!(eager, taped.per_depth);
        assert_eq!(eager[0].terms.len(), 1);
        assert_eq!(eager[1].terms.len(), 2);
    }
}
