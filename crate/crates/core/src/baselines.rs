//! Comparison upsamplers and the masked-attention view of the local attender.

use rand::Rng;

use crate::attender::{self, AttenderParams};
use crate::error::{shape_err, Error, Result};
use crate::neighborhood::Neighborhood;
use crate::ops;
use crate::tensor::{memory, ConvKernel, FeatureMap, Real};

pub fn nearest_feat_upsample<T: Real>(feats: &FeatureMap<T>, scale: usize) -> Result<FeatureMap<T>> {
    check_scale(scale)?;
    Ok(ops::nearest_resize(feats, feats.height() * scale, feats.width() * scale))
}

pub fn bilinear_feat_upsample<T: Real>(feats: &FeatureMap<T>, scale: usize) -> Result<FeatureMap<T>> {
    check_scale(scale)?;
    Ok(ops::bilinear_resize(feats, feats.height() * scale, feats.width() * scale))
}

fn check_scale(scale: usize) -> Result<()> {
    if scale == 0 {
        return Err(Error::InvalidArgument("upsampling scale must be positive".into()));
    }
    Ok(())
}

/// Single-head QKV cross-attention from guide queries to low-resolution
/// keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnParams {
    query: ConvKernel<f32>,
    key: ConvKernel<f32>,
    /// `None` uses the features themselves as values.
    value: Option<ConvKernel<f32>>,
}

impl CrossAttnParams {
    pub fn new(query: ConvKernel<f32>, key: ConvKernel<f32>, value: Option<ConvKernel<f32>>) -> Result<Self> {
        let one_by_one = |k: &ConvKernel<f32>| k.kernel_height() == 1 && k.kernel_width() == 1;
        if !one_by_one(&query) || !one_by_one(&key) || value.as_ref().is_some_and(|v| !one_by_one(v)) {
            return Err(shape_err!("cross-attention projections must be 1x1"));
        }
        if query.out_channels() != key.out_channels() {
            return Err(shape_err!(
                "query width {} differs from key width {}",
                query.out_channels(),
                key.out_channels()
            ));
        }
        if let Some(v) = &value {
            if v.in_channels() != key.in_channels() {
                return Err(shape_err!("value projection must read the key's input channels"));
            }
        }
        Ok(Self { query, key, value })
    }

    /// Random query/key projections and an identity value projection.
    pub fn init(guide_channels: usize, feat_channels: usize, d_k: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: ConvKernel::init_uniform(d_k, guide_channels, 1, 1, rng),
            key: ConvKernel::init_uniform(d_k, feat_channels, 1, 1, rng),
            value: None,
        }
    }

    pub fn d_k(&self) -> usize {
        self.query.out_channels()
    }

    pub fn query(&self) -> &ConvKernel<f32> {
        &self.query
    }

    pub fn key(&self) -> &ConvKernel<f32> {
        &self.key
    }

    pub fn value(&self) -> Option<&ConvKernel<f32>> {
        self.value.as_ref()
    }

    pub fn query_mut(&mut self) -> &mut ConvKernel<f32> {
        &mut self.query
    }

    pub fn key_mut(&mut self) -> &mut ConvKernel<f32> {
        &mut self.key
    }
}

const LANES: usize = 16;

/// `exp(x)` for `x ≤ 0`, written so the compiler can vectorize it: range
/// reduction by powers of two and a degree-6 Taylor polynomial (relative
/// error below 2e-7).
#[inline(always)]
fn exp_nonpos(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // Adding 1.5·2^23 rounds to an integer held in the low mantissa bits.
    const ROUND: f32 = 12_582_912.0;
    let x = if x < -87.0 { -87.0 } else { x };
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    // The same trick places n + 127 in the low bits; shifting drops the rest.
    let biased = (n + (ROUND + 127.0)).to_bits() << 23;
    p * f32::from_bits(biased)
}

fn lane_max(xs: &[f32]) -> f32 {
    let mut acc = [f32::NEG_INFINITY; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            if v > *a {
                *a = v;
            }
        }
    }
    tail.iter().chain(&acc).fold(f32::NEG_INFINITY, |m, &v| m.max(v))
}

fn lane_sum(xs: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail: f32 = chunks.remainder().iter().sum();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Channel-planar copy: `out[c * n + j] = map[j, c]`.
fn planar(map: &FeatureMap<f32>) -> Vec<f32> {
    let (n, c) = (map.positions(), map.channels());
    let mut out = vec![0.0; n * c];
    for (j, px) in map.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * n + j] = v;
        }
    }
    out
}

/// Full cross-attention upsampling: every guide position attends over every
/// low-resolution token. Cost is `Θ(guide positions · tokens)`.
pub fn cross_attention_upsample(
    guide: &FeatureMap<f32>,
    feats: &FeatureMap<f32>,
    params: &CrossAttnParams,
) -> Result<FeatureMap<f32>> {
    cross_attention_upsample_until(guide, feats, params, None)
}

/// As [`cross_attention_upsample`], giving up with
/// [`Error::BudgetExceeded`] once `deadline` has passed.
pub fn cross_attention_upsample_until(
    guide: &FeatureMap<f32>,
    feats: &FeatureMap<f32>,
    params: &CrossAttnParams,
    deadline: Option<(std::time::Instant, f64)>,
) -> Result<FeatureMap<f32>> {
    if guide.channels() != params.query.in_channels() {
        return Err(shape_err!(
            "guide has {} channels, query projection expects {}",
            guide.channels(),
            params.query.in_channels()
        ));
    }
    if feats.channels() != params.key.in_channels() {
        return Err(shape_err!(
            "features have {} channels, key projection expects {}",
            feats.channels(),
            params.key.in_channels()
        ));
    }
    let scale = 1.0 / (params.d_k() as f32).sqrt();
    let q = ops::conv1x1(guide, &params.query)?.map(|v| v * scale);
    let k = planar(&ops::conv1x1(feats, &params.key)?);
    let values = match &params.value {
        Some(v) => ops::conv1x1(feats, v)?,
        None => feats.clone(),
    };
    let cv = values.channels();
    let v = planar(&values);
    drop(values);
    let n = feats.positions();
    let dk = params.d_k();
    let _scratch = memory::Charge::new(
        (k.len() + v.len() + n) * std::mem::size_of::<f32>(),
    );

    let mut out = FeatureMap::zeros(guide.height(), guide.width(), cv);
    let mut logits = vec![0.0f32; n];
    for (qi, (qv, dst)) in q.data().chunks_exact(dk).zip(out.data_mut().chunks_exact_mut(cv)).enumerate() {
        if let Some((start, budget_ms)) = deadline {
            if qi % 1024 == 0 && start.elapsed().as_secs_f64() * 1e3 > budget_ms {
                return Err(Error::BudgetExceeded { budget_ms });
            }
        }
        logits.fill(0.0);
        for (d, &qd) in qv.iter().enumerate() {
            let row = &k[d * n..(d + 1) * n];
            for (l, &kv) in logits.iter_mut().zip(row) {
                *l += qd * kv;
            }
        }
        let max = lane_max(&logits);
        for l in logits.iter_mut() {
            *l = exp_nonpos(*l - max);
        }
        let inv = 1.0 / lane_sum(&logits);
        for (c, o) in dst.iter_mut().enumerate() {
            *o = lane_dot(&logits, &v[c * n..(c + 1) * n]) * inv;
        }
    }
    Ok(out)
}

/// The local attender written as full cross-attention over every value
/// token, with logits taken from the attender's projection and masked to
/// `-∞` outside the clamped neighbourhood. Offsets that clamp onto the same
/// token merge by log-sum-exp, which is what summing their weights means.
/// Computed with 64-bit scalar loops.
pub fn masked_attention<T: Real>(
    g: &FeatureMap<T>,
    v: &FeatureMap<T>,
    n: &Neighborhood,
    params: &AttenderParams<T>,
) -> Result<FeatureMap<f64>> {
    let c = attender::cell_scale((g.height(), g.width()), (v.height(), v.width()))?;
    let proj = params.projection();
    if proj.in_channels() != g.channels() || proj.out_channels() != n.len() {
        return Err(shape_err!("attender projection does not fit guide and neighbourhood"));
    }
    let (vh, vw, vc) = v.shape();
    let keys = vh * vw;
    let mut out = FeatureMap::<f64>::zeros(g.height(), g.width(), vc);
    let mut masked = vec![f64::NEG_INFINITY; keys];
    for x in 0..g.height() {
        for y in 0..g.width() {
            masked.fill(f64::NEG_INFINITY);
            let gp = g.pixel(x, y);
            for (k, &(di, dj)) in n.offsets().iter().enumerate() {
                let mut logit = proj.bias()[k].as_f64();
                for (ci, &gv) in gp.iter().enumerate() {
                    logit += proj.weight(k, ci, 0, 0).as_f64() * gv.as_f64();
                }
                let a = ((x / c) as i64 + di as i64).clamp(0, vh as i64 - 1) as usize;
                let b = ((y / c) as i64 + dj as i64).clamp(0, vw as i64 - 1) as usize;
                let slot = &mut masked[a * vw + b];
                *slot = if slot.is_infinite() {
                    logit
                } else {
                    let m = slot.max(logit);
                    m + ((*slot - m).exp() + (logit - m).exp()).ln()
                };
            }
            let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let mut acc = vec![0.0f64; vc];
            for (key, &l) in masked.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let w = (l - max).exp();
                denom += w;
                let (a, b) = (key / vw, key % vw);
                for (ch, s) in acc.iter_mut().enumerate() {
                    *s += w * v.get(a, b, ch).as_f64();
                }
            }
            for (ch, s) in acc.iter().enumerate() {
                out.set(x, y, ch, s / denom);
            }
        }
    }
    Ok(out)
}

pub const EQUIV_TOL: f64 = 1e-5;

/// Maximum absolute difference between the attender under `fast` and the
/// masked cross-attention form under `reference`.
pub fn equiv_gap<T: Real>(
    g: &FeatureMap<T>,
    v: &FeatureMap<T>,
    n: &Neighborhood,
    fast: &AttenderParams<T>,
    reference: &AttenderParams<T>,
) -> Result<f64> {
    let local = attender::attend(g, v, n, fast)?.cast::<f64>();
    let masked = masked_attention(g, v, n, reference)?;
    local.max_abs_diff(&masked)
}

/// True iff the local attender equals its masked cross-attention form
/// within [`EQUIV_TOL`].
pub fn local_attender_equiv_check<T: Real>(
    g: &FeatureMap<T>,
    v: &FeatureMap<T>,
    n: &Neighborhood,
    params: &AttenderParams<T>,
) -> Result<bool> {
    Ok(equiv_gap(g, v, n, params, params)? <= EQUIV_TOL)
}
