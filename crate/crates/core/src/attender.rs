//! The local attender: guide-conditioned attention over a fixed neighborhood.
//!
//! A 1×1 projection of the guide `G` gives one logit per neighborhood offset.
//! A softmax over those logits is the attender map `A`. Each output position
//! is then `Σ_k A[k] · V[clamp(⌊x/c⌋ + di_k), clamp(⌊y/c⌋ + dj_k)]`, where
//! `c` is the integer ratio between guide and value resolution. Borders use
//! replication, realised as index clamping. Outputs are convex combinations of
//! value vectors, and cost is `O(n·T)` in the number of guide positions `T`.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::neighborhood::{Neighborhood, Offset};
use crate::ops;
use crate::tensor::{ConvKernel, FeatureMap, Real};

/// The attender's only learnable piece: a 1×1 projection `C_G → n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttenderParams<T: Real = f32> {
    projection: ConvKernel<T>,
}

impl<T: Real> AttenderParams<T> {
    pub fn new(projection: ConvKernel<T>, neighborhood: &Neighborhood) -> Result<Self> {
        if projection.kernel_height() != 1 || projection.kernel_width() != 1 {
            return Err(shape_err!("attender projection must be 1x1"));
        }
        if projection.out_channels() != neighborhood.len() {
            return Err(shape_err!(
                "projection emits {} logits for a neighborhood of {}",
                projection.out_channels(),
                neighborhood.len()
            ));
        }
        Ok(Self { projection })
    }

    pub fn init(guide_channels: usize, neighborhood: &Neighborhood, rng: &mut impl Rng) -> Self {
        Self {
            projection: ConvKernel::init_uniform(neighborhood.len(), guide_channels, 1, 1, rng),
        }
    }

    /// Parameters whose softmax is one-hot on the centre offset for any guide:
    /// zero weights and a large bias on the centre channel.
    pub fn center_one_hot(guide_channels: usize, neighborhood: &Neighborhood) -> Self {
        let mut projection = ConvKernel::zeros(neighborhood.len(), guide_channels, 1, 1);
        projection.bias_mut()[neighborhood.center_index()] = T::lit(1e4);
        Self { projection }
    }

    pub fn projection(&self) -> &ConvKernel<T> {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut ConvKernel<T> {
        &mut self.projection
    }

    pub fn guide_channels(&self) -> usize {
        self.projection.in_channels()
    }

    pub fn cast<U: Real>(&self) -> AttenderParams<U> {
        AttenderParams {
            projection: self.projection.cast(),
        }
    }
}

#[inline]
fn clamp_index(base: usize, delta: i32, size: usize) -> usize {
    (base as i64 + delta as i64).clamp(0, size as i64 - 1) as usize
}

/// Shift `v` by `offset` with replication at the borders.
pub fn offset_gather<T: Real>(v: &FeatureMap<T>, offset: Offset) -> FeatureMap<T> {
    let (h, w, c) = v.shape();
    let mut out = FeatureMap::zeros(h, w, c);
    for i in 0..h {
        let si = clamp_index(i, offset.0, h);
        for j in 0..w {
            let sj = clamp_index(j, offset.1, w);
            out.pixel_mut(i, j).copy_from_slice(v.pixel(si, sj));
        }
    }
    out
}

/// Integer ratio `c` between guide and value resolution, equal on both axes.
pub fn cell_scale(guide_hw: (usize, usize), value_hw: (usize, usize)) -> Result<usize> {
    let (gh, gw) = guide_hw;
    let (vh, vw) = value_hw;
    if gh % vh != 0 || gw % vw != 0 {
        return Err(shape_err!(
            "guide {gh}x{gw} is not an integer multiple of value {vh}x{vw}"
        ));
    }
    let (ch, cw) = (gh / vh, gw / vw);
    if ch != cw {
        return Err(shape_err!(
            "guide/value scale differs between axes ({ch} vs {cw})"
        ));
    }
    Ok(ch)
}

/// Softmax-normalized attention weights, one channel per offset.
pub fn attender_map<T: Real>(g: &FeatureMap<T>, params: &AttenderParams<T>) -> Result<FeatureMap<T>> {
    Ok(ops::softmax_lastdim(&ops::conv1x1(g, &params.projection)?))
}

/// Weighted pooling of `v` with precomputed attention weights `a`.
pub fn local_pool<T: Real>(
    a: &FeatureMap<T>,
    v: &FeatureMap<T>,
    offsets: &[Offset],
    cell: usize,
) -> Result<FeatureMap<T>> {
    if a.channels() != offsets.len() {
        return Err(shape_err!(
            "attender map has {} channels for {} offsets",
            a.channels(),
            offsets.len()
        ));
    }
    let c = cell_scale((a.height(), a.width()), (v.height(), v.width()))?;
    if c != cell {
        return Err(shape_err!("expected cell size {cell}, shapes imply {c}"));
    }
    let (oh, ow, _) = a.shape();
    let (vh, vw, cv) = v.shape();
    let mut out = FeatureMap::zeros(oh, ow, cv);
    for x in 0..oh {
        let bx = x / cell;
        let rows: Vec<usize> = offsets.iter().map(|o| clamp_index(bx, o.0, vh)).collect();
        for y in 0..ow {
            let by = y / cell;
            let weights = a.pixel(x, y);
            let px = out.pixel_mut(x, y);
            for (k, &(_, dj)) in offsets.iter().enumerate() {
                let src = v.pixel(rows[k], clamp_index(by, dj, vw));
                let wk = weights[k];
                for (o, &s) in px.iter_mut().zip(src) {
                    *o += wk * s;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`local_pool`]: `(d a, d v)`.
pub fn local_pool_backward<T: Real>(
    a: &FeatureMap<T>,
    v: &FeatureMap<T>,
    offsets: &[Offset],
    cell: usize,
    grad_out: &FeatureMap<T>,
) -> (FeatureMap<T>, FeatureMap<T>) {
    let (oh, ow, n) = a.shape();
    let (vh, vw, cv) = v.shape();
    let mut grad_a = FeatureMap::zeros(oh, ow, n);
    let mut grad_v = FeatureMap::zeros(vh, vw, cv);
    for x in 0..oh {
        let bx = x / cell;
        for y in 0..ow {
            let by = y / cell;
            let g = grad_out.pixel(x, y);
            for (k, &(di, dj)) in offsets.iter().enumerate() {
                let (si, sj) = (clamp_index(bx, di, vh), clamp_index(by, dj, vw));
                let src = v.pixel(si, sj);
                let mut ga = T::zero();
                for (&gv, &sv) in g.iter().zip(src) {
                    ga += gv * sv;
                }
                let idx = grad_a.index(x, y, k);
                grad_a.data_mut()[idx] = ga;
                let wk = a.get(x, y, k);
                for (d, &gv) in grad_v.pixel_mut(si, sj).iter_mut().zip(g) {
                    *d += wk * gv;
                }
            }
        }
    }
    (grad_a, grad_v)
}

fn check_attend_inputs<T: Real>(
    g: &FeatureMap<T>,
    v: &FeatureMap<T>,
    n: &Neighborhood,
    params: &AttenderParams<T>,
) -> Result<usize> {
    if params.projection.out_channels() != n.len() {
        return Err(shape_err!(
            "projection emits {} logits for a neighborhood of {}",
            params.projection.out_channels(),
            n.len()
        ));
    }
    if g.channels() != params.guide_channels() {
        return Err(shape_err!(
            "guide has {} channels, projection expects {}",
            g.channels(),
            params.guide_channels()
        ));
    }
    cell_scale((g.height(), g.width()), (v.height(), v.width()))
}

/// Local attention of guide `g` over values `v`; output has `g`'s spatial
/// size and `v`'s channels.
pub fn attend<T: Real>(
    g: &FeatureMap<T>,
    v: &FeatureMap<T>,
    n: &Neighborhood,
    params: &AttenderParams<T>,
) -> Result<FeatureMap<T>> {
    let cell = check_attend_inputs(g, v, n, params)?;
    let a = attender_map(g, params)?;
    local_pool(&a, v, n.offsets(), cell)
}

/// Scalar-loop evaluation of [`attend`] with 64-bit accumulation.
///
/// Shares no kernels with the fast path: projection, softmax, and pooling are
/// all written out per position and per offset.
pub fn attend_reference<T: Real>(
    g: &FeatureMap<T>,
    v: &FeatureMap<T>,
    n: &Neighborhood,
    params: &AttenderParams<T>,
) -> Result<FeatureMap<T>> {
    if params.projection.out_channels() != n.len() || g.channels() != params.guide_channels() {
        return Err(shape_err!("attender parameters do not match inputs"));
    }
    let (gh, gw, cg) = g.shape();
    let (vh, vw, cv) = v.shape();
    if gh % vh != 0 || gw % vw != 0 || gh / vh != gw / vw {
        return Err(Error::Shape(format!(
            "guide {gh}x{gw} is not a uniform integer multiple of value {vh}x{vw}"
        )));
    }
    let c = gh / vh;
    let proj = &params.projection;
    let offsets = n.offsets();
    let mut out = vec![T::zero(); gh * gw * cv];
    let mut logits = vec![0.0f64; offsets.len()];
    for x in 0..gh {
        for y in 0..gw {
            for (k, logit) in logits.iter_mut().enumerate() {
                let mut s = proj.bias()[k].as_f64();
                for ch in 0..cg {
                    s += proj.weight(k, ch, 0, 0).as_f64() * g.get(x, y, ch).as_f64();
                }
                *logit = s;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for ch in 0..cv {
                let mut acc = 0.0f64;
                for (k, &(di, dj)) in offsets.iter().enumerate() {
                    let si = ((x / c) as i64 + di as i64).max(0).min(vh as i64 - 1) as usize;
                    let sj = ((y / c) as i64 + dj as i64).max(0).min(vw as i64 - 1) as usize;
                    acc += (logits[k] - m).exp() / z * v.get(si, sj, ch).as_f64();
                }
                out[(x * gw + y) * cv + ch] = T::lit(acc);
            }
        }
    }
    FeatureMap::from_vec(gh, gw, cv, out)
}
