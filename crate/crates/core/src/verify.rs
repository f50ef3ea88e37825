//! The invariant, oracle and gradient suite behind `uplift verify`.
//!
//! Every check is deterministic (fixed seeds) and reports a measured value
//! against its tolerance, so failures say by how much.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attender::{attend, attend_reference, attender_map, AttenderParams};
use crate::autodiff::{NodeId, Tape, Value};
use crate::baselines::{local_attender_equiv_check, masked_attention};
use crate::checkpoint;
use crate::error::Result;
use crate::gradcheck::{self, GradReport};
use crate::model::{color_correct, NormKind, UpliftConfig, UpliftModel};
use crate::neighborhood::{Neighborhood, Pattern};
use crate::ops::{self, NormAxis};
use crate::tensor::{ConvKernel, FeatureMap};
use crate::training::{total_loss, total_loss_grads, SurrogateBackbone};

pub const ORACLE_TOL: f64 = 1e-5;
pub const CONVEX_TOL: f64 = 1e-6;
pub const COLOR_TOL: f64 = 1e-6;
pub const ADJOINT_TOL: f64 = 1e-5;

/// One line of the verification report.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn within(name: &str, measured: f64, tol: f64) -> Self {
        Self::new(name, measured <= tol, format!("max err {measured:.3e} (tol {tol:.0e})"))
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random guide/value pair at cell scale `c` over an `h`×`w` value grid.
fn random_case(
    r: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    c: usize,
    n: &Neighborhood,
) -> (FeatureMap<f32>, FeatureMap<f32>, AttenderParams<f32>) {
    let cg = r.gen_range(1..=6);
    let cv = r.gen_range(1..=4);
    let g = FeatureMap::random_uniform(h * c, w * c, cg, 2.0, r);
    let v = FeatureMap::random_uniform(h, w, cv, 1.0, r);
    let mut params = AttenderParams::init(cg, n, r);
    // Spread the logits so the attention is neither uniform nor one-hot.
    for x in params.projection_mut().weights_mut() {
        *x *= 3.0;
    }
    (g, v, params)
}

/// Fast attender against the scalar reference over every value grid
/// `H,W ∈ 2..=6`, cell scale `c ∈ {1,2,4}`, every named neighborhood and
/// `seeds` seeds. Returns the largest absolute difference and case count.
pub fn oracle_equivalence(seeds: u64) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for p in Pattern::ALL {
        let n = Neighborhood::named(p);
        for seed in 0..seeds {
            let mut r = rng(seed ^ (p.size() as u64) << 32);
            for h in 2..=6 {
                for w in 2..=6 {
                    for c in [1, 2, 4] {
                        let (g, v, params) = random_case(&mut r, h, w, c, &n);
                        let fast = attend(&g, &v, &n, &params)?;
                        let slow = attend_reference(&g, &v, &n, &params)?;
                        worst = worst.max(fast.max_abs_diff(&slow)?);
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok((worst, cases))
}

/// `local_attender_equiv_check` on `cases` random inputs per neighborhood.
/// Returns `(passed, total)`.
pub fn masked_equivalence(cases: usize) -> Result<(usize, usize)> {
    let mut passed = 0;
    let mut total = 0;
    for p in Pattern::ALL {
        let n = Neighborhood::named(p);
        let mut r = rng(0xA77E_0000 + p.size() as u64);
        for _ in 0..cases {
            let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
            let c = [1, 2, 4][r.gen_range(0..3)];
            let (g, v, params) = random_case(&mut r, h, w, c, &n);
            passed += usize::from(local_attender_equiv_check(&g, &v, &n, &params)?);
            total += 1;
        }
    }
    Ok((passed, total))
}

/// Worst violation of the convexity bound and of the partition of unity over
/// `calls` random attend calls.
pub fn convexity(calls: usize) -> Result<(f64, f64)> {
    let mut r = rng(0xC0_4E7);
    let mut bound = 0.0f64;
    let mut unity = 0.0f64;
    for i in 0..calls {
        let n = Neighborhood::named(Pattern::ALL[i % 5]);
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let c = [1, 2, 4][r.gen_range(0..3)];
        let (g, v, params) = random_case(&mut r, h, w, c, &n);
        let out = attend(&g, &v, &n, &params)?;
        let a = attender_map(&g, &params)?;
        for px in a.data().chunks_exact(n.len()) {
            let s: f64 = px.iter().map(|&x| x as f64).sum();
            unity = unity.max((s - 1.0).abs());
        }
        let (vh, vw, cv) = v.shape();
        for x in 0..out.height() {
            for y in 0..out.width() {
                for ch in 0..cv {
                    let attended = n.offsets().iter().map(|&(di, dj)| {
                        let i = (x / c) as i64 + di as i64;
                        let j = (y / c) as i64 + dj as i64;
                        v.get(i.clamp(0, vh as i64 - 1) as usize, j.clamp(0, vw as i64 - 1) as usize, ch)
                            as f64
                    });
                    let (lo, hi) = attended.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                        (lo.min(x), hi.max(x))
                    });
                    let o = out.get(x, y, ch) as f64;
                    bound = bound.max(lo - o).max(o - hi);
                }
            }
        }
    }
    Ok((bound.max(0.0), unity))
}

fn map64(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Value<f64> {
    Value::Map(FeatureMap::random_uniform(h, w, c, 1.0, r))
}

/// Map entries bounded away from zero, so ReLU kinks stay outside the
/// finite-difference stencil.
fn map64_off_zero(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Value<f64> {
    Value::Map(FeatureMap::from_fn(h, w, c, |_, _, _| {
        let m: f64 = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    }))
}

fn kernel64(r: &mut ChaCha8Rng, o: usize, i: usize, k: usize) -> Value<f64> {
    let mut kernel = ConvKernel::init_uniform(o, i, k, k, r);
    for b in kernel.bias_mut() {
        *b = r.gen_range(-0.5..0.5);
    }
    Value::Kernel(kernel)
}

fn vec64(r: &mut ChaCha8Rng, n: usize, centre: f64) -> Value<f64> {
    Value::Vector((0..n).map(|_| centre + r.gen_range(-0.5..0.5)).collect())
}

/// Reduce a map node to a scalar with a fixed random target, so every output
/// element carries a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let (h, w, c) = tape.map(x)?.shape();
    let target = FeatureMap::random_uniform(h, w, c, 1.0, &mut rng(seed));
    let t = tape.constant(target);
    tape.l2_loss(x, t)
}

/// Finite-difference checks of every differentiable tape op.
pub fn op_gradients() -> Result<Vec<GradReport>> {
    let mut r = rng(0x6DAD);
    let mut out = Vec::new();
    let n9 = Neighborhood::named(Pattern::N9);

    let (x, k) = (map64(&mut r, 5, 4, 2), kernel64(&mut r, 3, 2, 3));
    out.push(gradcheck::check("conv2d 3x3 s1 p1", &[x, k], |t, ids| {
        let y = t.conv2d(ids[0], ids[1], 1, 1)?;
        probe(t, y, 1)
    })?);
    let (x, k) = (map64(&mut r, 6, 6, 2), kernel64(&mut r, 2, 2, 4));
    out.push(gradcheck::check("conv2d 4x4 s2 p1", &[x, k], |t, ids| {
        let y = t.conv2d(ids[0], ids[1], 2, 1)?;
        probe(t, y, 2)
    })?);
    let (x, k) = (map64(&mut r, 3, 2, 2), kernel64(&mut r, 3, 2, 4));
    out.push(gradcheck::check("conv_transpose2d 4x4 s2 p1", &[x, k], |t, ids| {
        let y = t.conv_transpose2d(ids[0], ids[1], 2, 1)?;
        probe(t, y, 3)
    })?);
    let (x, k) = (map64(&mut r, 3, 3, 4), kernel64(&mut r, 5, 4, 1));
    out.push(gradcheck::check("conv1x1", &[x, k], |t, ids| {
        let y = t.conv1x1(ids[0], ids[1])?;
        probe(t, y, 4)
    })?);
    let x = map64_off_zero(&mut r, 3, 4, 3);
    out.push(gradcheck::check("relu", &[x], |t, ids| {
        let y = t.relu(ids[0])?;
        probe(t, y, 5)
    })?);
    let x = map64(&mut r, 3, 3, 5);
    out.push(gradcheck::check("softmax", &[x], |t, ids| {
        let y = t.softmax(ids[0])?;
        probe(t, y, 6)
    })?);
    let x = map64(&mut r, 2, 3, 2);
    out.push(gradcheck::check("nearest_resize", &[x], |t, ids| {
        let y = t.nearest_resize(ids[0], 4, 6)?;
        probe(t, y, 7)
    })?);
    let x = map64(&mut r, 3, 4, 2);
    out.push(gradcheck::check("bilinear_resize up", &[x], |t, ids| {
        let y = t.bilinear_resize(ids[0], 5, 7)?;
        probe(t, y, 8)
    })?);
    let x = map64(&mut r, 6, 4, 2);
    out.push(gradcheck::check("bilinear_resize down", &[x], |t, ids| {
        let y = t.bilinear_resize(ids[0], 3, 2)?;
        probe(t, y, 9)
    })?);
    let (a, b) = (map64(&mut r, 2, 3, 2), map64(&mut r, 2, 3, 2));
    out.push(gradcheck::check("add", &[a, b], |t, ids| {
        let y = t.add(ids[0], ids[1])?;
        probe(t, y, 10)
    })?);
    let (a, b) = (map64(&mut r, 2, 3, 2), map64(&mut r, 2, 3, 3));
    out.push(gradcheck::check("concat", &[a, b], |t, ids| {
        let y = t.concat(ids[0], ids[1])?;
        probe(t, y, 11)
    })?);
    for (name, axis) in [("normalize spatial", NormAxis::Spatial), ("normalize channel", NormAxis::Channel)] {
        let inputs = [map64(&mut r, 3, 3, 4), vec64(&mut r, 4, 1.0), vec64(&mut r, 4, 0.0)];
        out.push(gradcheck::check(name, &inputs, |t, ids| {
            let y = t.normalize(ids[0], ids[1], ids[2], axis)?;
            probe(t, y, 12)
        })?);
    }
    let a = Value::Map(ops::softmax_lastdim(&FeatureMap::random_uniform(4, 6, n9.len(), 2.0, &mut r)));
    let v = map64(&mut r, 2, 3, 2);
    out.push(gradcheck::check("local_pool c=2", &[a, v], |t, ids| {
        let y = t.local_pool(ids[0], ids[1], n9.offsets(), 2)?;
        probe(t, y, 13)
    })?);
    for p in [Pattern::N5, Pattern::N17, Pattern::N25] {
        let n = Neighborhood::named(p);
        let inputs = [map64(&mut r, 4, 4, 3), map64(&mut r, 2, 2, 2), kernel64(&mut r, n.len(), 3, 1)];
        out.push(gradcheck::check(&format!("attend {p}"), &inputs, |t, ids| {
            let (y, _) = t.attend(ids[0], ids[1], ids[2], n.offsets())?;
            probe(t, y, 14)
        })?);
    }
    let (a, b) = (map64(&mut r, 2, 2, 3), map64(&mut r, 2, 2, 3));
    out.push(gradcheck::check("l2_loss + sum", &[a, b], |t, ids| {
        let l1 = t.l2_loss(ids[0], ids[1])?;
        let l2 = probe(t, ids[0], 15)?;
        t.sum(&[l1, l2])
    })?);
    Ok(out)
}

/// The configuration used for the whole-graph gradient check: 8×8 image,
/// patch 4, depth set {1}, narrow widths so every parameter can be perturbed.
pub fn gradcheck_config(norm_kind: NormKind, refiner: bool, noise: usize) -> UpliftConfig {
    UpliftConfig {
        backbone_patch: 4,
        image_channels: 3,
        feat_channels: 3,
        encoder_channels: vec![4, 4],
        decoder_channels: vec![4, 4],
        guide_channels: 4,
        neighborhood: Neighborhood::named(Pattern::N9),
        use_refiner: refiner,
        refiner_channels: 3,
        noise_channels: noise,
        noise_seed: 5,
        norm_kind,
    }
}

/// Tape gradients of the full multi-depth loss against central differences
/// of its eager evaluation, over every model parameter.
pub fn total_loss_gradcheck(config: UpliftConfig, depths: &[u32], image_side: usize) -> Result<GradReport> {
    let name = format!(
        "total_loss {}x{} p={} D={depths:?} norm={} refiner={} noise={}",
        image_side, image_side, config.backbone_patch, config.norm_kind, config.use_refiner, config.noise_channels
    );
    let backbone = SurrogateBackbone::new(config.backbone_patch, 3, config.feat_channels, 3, true);
    let mut model = UpliftModel::<f64>::new(config, 11)?;
    if let Some(refiner) = model.refiner.as_mut() {
        // Start away from the identity so the first refiner conv is exercised.
        let (o, i) = (refiner.second.out_channels(), refiner.second.in_channels());
        refiner.second = ConvKernel::init_uniform(o, i, 3, 3, &mut rng(12));
    }
    let image = crate::training::synthetic_image(2, 0, image_side, image_side).cast::<f64>();
    let analytic = total_loss_grads(&model, &backbone, &image, depths)?.grads;
    let loss = |m: &UpliftModel<f64>| -> Result<f64> {
        Ok(total_loss(m, &backbone, &image, depths)?.iter().map(|d| d.total()).sum())
    };
    let mut report = GradReport {
        name,
        max_rel_err: 0.0,
        checked: 0,
    };
    let lens: Vec<usize> = analytic.iter().map(Vec::len).collect();
    for (s, &len) in lens.iter().enumerate() {
        for e in 0..len {
            let base = model.param_slices_mut()[s][e];
            model.param_slices_mut()[s][e] = base + gradcheck::FD_STEP;
            let plus = loss(&model)?;
            model.param_slices_mut()[s][e] = base - gradcheck::FD_STEP;
            let minus = loss(&model)?;
            model.param_slices_mut()[s][e] = base;
            let numeric = (plus - minus) / (2.0 * gradcheck::FD_STEP);
            report.max_rel_err = report.max_rel_err.max(gradcheck::rel_err(analytic[s][e], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Every op check plus the whole-graph checks.
pub fn all_gradients() -> Result<Vec<GradReport>> {
    let mut reports = op_gradients()?;
    reports.push(total_loss_gradcheck(gradcheck_config(NormKind::Batch, false, 0), &[1], 8)?);
    reports.push(total_loss_gradcheck(gradcheck_config(NormKind::Layer, true, 2), &[1], 8)?);
    Ok(reports)
}

/// One-hot centre attender against nearest upsampling: count of exact
/// matches out of the cases tried.
pub fn one_hot_is_nearest() -> Result<(usize, usize)> {
    let mut r = rng(0x0E40);
    let mut exact = 0;
    let mut total = 0;
    for p in Pattern::ALL {
        let n = Neighborhood::named(p);
        for c in [1, 2, 4] {
            let v = FeatureMap::<f32>::random_uniform(3, 4, 3, 1.0, &mut r);
            let g = FeatureMap::<f32>::random_uniform(3 * c, 4 * c, 5, 3.0, &mut r);
            let params = AttenderParams::center_one_hot(5, &n);
            let out = attend(&g, &v, &n, &params)?;
            exact += usize::from(out == ops::nearest_resize(&v, 3 * c, 4 * c));
            total += 1;
        }
    }
    Ok((exact, total))
}

/// Largest channel-mean mismatch after colour correction.
pub fn color_correct_gap() -> Result<f64> {
    let mut r = rng(0xC01);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let low = FeatureMap::<f32>::random_uniform(4, 4, 3, 1.0, &mut r);
        let high = FeatureMap::<f32>::random_uniform(16, 16, 3, 1.0, &mut r).map(|v| v * 2.0 + 0.7);
        let fixed = color_correct(&low, &high)?;
        for (a, b) in fixed.channel_means().iter().zip(low.channel_means()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn inner(a: &FeatureMap<f32>, b: &FeatureMap<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `|⟨conv(x), y⟩ − ⟨x, convᵀ(y)⟩| / max(1, |⟨conv(x), y⟩|)` over several
/// stride/padding/kernel combinations, with zero bias.
pub fn conv_adjoint_gap() -> Result<f64> {
    let mut r = rng(0xAD1);
    let mut worst = 0.0f64;
    for (k, stride, pad, side) in [(3, 1, 1, 5), (3, 1, 0, 6), (4, 2, 1, 8), (2, 2, 0, 6), (3, 2, 1, 7)] {
        let mut kernel = ConvKernel::<f32>::init_uniform(3, 2, k, k, &mut r);
        kernel.bias_mut().fill(0.0);
        let x = FeatureMap::<f32>::random_uniform(side, side, 2, 1.0, &mut r);
        let y_shape = ops::conv2d(&x, &kernel, stride, pad)?;
        let y = FeatureMap::random_uniform(y_shape.height(), y_shape.width(), 3, 1.0, &mut r);
        let xt = ops::conv_transpose2d(&y, &kernel.swap_roles(), stride, pad)?;
        let xt = if xt.shape() == x.shape() {
            xt
        } else {
            // Output-size rounding: the transpose covers at most the input.
            FeatureMap::from_fn(side, side, 2, |i, j, c| {
                if i < xt.height() && j < xt.width() {
                    xt.get(i, j, c)
                } else {
                    0.0
                }
            })
        };
        let lhs = inner(&y_shape, &y);
        let rhs = inner(&x, &xt);
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    Ok(worst)
}

/// Checkpoint save → load → save is byte-identical and inference after the
/// round trip is bit-identical.
pub fn checkpoint_round_trip() -> Result<bool> {
    let mut config = UpliftConfig::small(4, 3);
    config.encoder_channels = vec![4, 4];
    config.decoder_channels = vec![4, 4];
    config.guide_channels = 4;
    config.use_refiner = true;
    config.noise_channels = 1;
    let model = UpliftModel::<f32>::new(config, 3)?;
    let mut first = Vec::new();
    checkpoint::write_model(&mut first, &model)?;
    let loaded = checkpoint::read_model(&first)?;
    let mut second = Vec::new();
    checkpoint::write_model(&mut second, &loaded)?;
    let image = crate::training::synthetic_image(0, 1, 16, 16);
    let feats = FeatureMap::random_uniform(4, 4, 3, 1.0, &mut rng(1));
    let a = model.uplift_inference(&image, &feats, 2)?;
    let b = loaded.uplift_inference(&image, &feats, 2)?;
    Ok(first == second && a == b)
}

/// Shifting guide and values by one token shifts the output on the interior.
pub fn translation_equivariance() -> Result<f64> {
    let mut r = rng(0x7A5);
    let n = Neighborhood::named(Pattern::N25);
    let c = 2;
    let (h, w) = (8, 8);
    let v = FeatureMap::<f32>::random_uniform(h + 1, w, 2, 1.0, &mut r);
    let g = FeatureMap::<f32>::random_uniform((h + 1) * c, w * c, 3, 1.0, &mut r);
    let params = AttenderParams::init(3, &n, &mut r);
    let out = attend(&g, &v, &n, &params)?;
    let v_shift = FeatureMap::from_fn(h, w, 2, |i, j, ch| v.get(i + 1, j, ch));
    let g_shift = FeatureMap::from_fn(h * c, w * c, 3, |i, j, ch| g.get(i + c, j, ch));
    let shifted = attend(&g_shift, &v_shift, &n, &params)?;
    let radius = n.radius() as usize;
    let mut worst = 0.0f64;
    for i in (radius + 1) * c..(h - radius - 1) * c {
        for j in (radius + 1) * c..(w - radius - 1) * c {
            for ch in 0..2 {
                worst = worst.max((shifted.get(i, j, ch) - out.get(i + c, j, ch)).abs() as f64);
            }
        }
    }
    Ok(worst)
}

/// Masked full attention and the local attender on a case where the
/// neighborhood covers the whole value map: softmax over all tokens.
fn masked_covers_global() -> Result<f64> {
    let mut r = rng(0x61);
    let n = Neighborhood::named(Pattern::N25);
    let (g, v, params) = random_case(&mut r, 2, 2, 2, &n);
    let masked = masked_attention(&g, &v, &n, &params)?;
    let local = attend(&g, &v, &n, &params)?.cast::<f64>();
    local.max_abs_diff(&masked)
}

/// Run the whole suite. `progress` sees each check as it completes.
pub fn run_all(mut progress: impl FnMut(&Check)) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut push = |c: Check| {
        progress(&c);
        checks.push(c);
    };

    let start = Instant::now();
    let (diff, cases) = oracle_equivalence(20)?;
    push(Check::new(
        "attend == attend_reference",
        diff <= ORACLE_TOL,
        format!("{cases} cases, max abs diff {diff:.3e} (tol {ORACLE_TOL:.0e}), {:.1}s", start.elapsed().as_secs_f64()),
    ));
    let (ok, total) = masked_equivalence(50)?;
    push(Check::new(
        "masked-attention equivalence",
        ok == total,
        format!("{ok}/{total} cases"),
    ));
    push(Check::within("masked attention at full coverage", masked_covers_global()?, ORACLE_TOL));
    let (bound, unity) = convexity(100)?;
    push(Check::within("convexity bound", bound, CONVEX_TOL));
    push(Check::within("partition of unity", unity, CONVEX_TOL));
    push(Check::within("translation equivariance", translation_equivariance()?, 1e-6));

    for report in all_gradients()? {
        push(Check::new(
            format!("gradient {}", report.name),
            report.passed(),
            format!(
                "{} entries, max rel err {:.3e} (tol {:.0e})",
                report.checked,
                report.max_rel_err,
                gradcheck::REL_TOL
            ),
        ));
    }

    let (exact, total) = one_hot_is_nearest()?;
    push(Check::new(
        "one-hot attender == nearest",
        exact == total,
        format!("{exact}/{total} exact"),
    ));
    push(Check::within("color_correct channel means", color_correct_gap()?, COLOR_TOL));
    push(Check::within("conv adjoint identity", conv_adjoint_gap()?, ADJOINT_TOL));
    push(Check::new(
        "checkpoint round trip",
        checkpoint_round_trip()?,
        "bytes and inference identical after reload",
    ));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweeps_pass() {
        let (diff, cases) = oracle_equivalence(1).unwrap();
        assert_eq!(cases, 5 * 25 * 3);
        assert!(diff <= ORACLE_TOL, "{diff}");
        assert_eq!(masked_equivalence(3).unwrap(), (15, 15));
        let (bound, unity) = convexity(10).unwrap();
        assert!(bound <= CONVEX_TOL && unity <= CONVEX_TOL);
    }

    #[test]
    fn degenerate_identities() {
        let (exact, total) = one_hot_is_nearest().unwrap();
        assert_eq!(exact, total);
        assert!(color_correct_gap().unwrap() <= COLOR_TOL);
        assert!(conv_adjoint_gap().unwrap() <= ADJOINT_TOL);
        assert!(translation_equivariance().unwrap() <= 1e-6);
        assert!(checkpoint_round_trip().unwrap());
    }

    #[test]
    fn op_gradients_pass() {
        for r in op_gradients().unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
