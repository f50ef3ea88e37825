//! Token-count sweeps for the runtime scaling study.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, CrossAttnParams};
use crate::error::{Error, Result};
use crate::model::{UpliftConfig, UpliftModel};
use crate::neighborhood::{Neighborhood, Pattern};
use crate::tensor::{memory, FeatureMap};
use crate::training::synthetic_image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Uplift,
    CrossAttn,
    Nearest,
    Bilinear,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Uplift, Method::CrossAttn, Method::Nearest, Method::Bilinear];

    pub fn name(self) -> &'static str {
        match self {
            Method::Uplift => "uplift",
            Method::CrossAttn => "cross_attn",
            Method::Nearest => "nearest",
            Method::Bilinear => "bilinear",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// One timed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: Method,
    pub tokens: usize,
    pub repeat: usize,
    pub ms: f64,
    /// High-water mark of tracked feature-map and scratch bytes.
    pub bytes: usize,
}

pub fn write_records(writer: impl Write, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record(["method", "tokens", "repeat", "ms", "bytes"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(reader: impl Read) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<&str> = r.headers()?.iter().collect();
    if header != ["method", "tokens", "repeat", "ms", "bytes"] {
        return Err(Error::Format(format!("unexpected bench header {header:?}")));
    }
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

pub fn save_records(path: impl AsRef<Path>, records: &[BenchRecord]) -> Result<()> {
    write_records(std::fs::File::create(path)?, records)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<BenchRecord>> {
    read_records(std::fs::File::open(path)?)
}

/// Side of the square low-resolution token grid.
pub fn token_side(tokens: usize) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side == 0 || side * side != tokens {
        return Err(Error::InvalidArgument(format!(
            "token count {tokens} is not a positive perfect square"
        )));
    }
    Ok(side)
}

/// Visual tokens of a square image at a given patch size.
pub fn tokens_for_image(image_side: usize, patch: usize) -> usize {
    let s = image_side / patch;
    s * s
}

/// Fixed workload definition for a sweep.
#[derive(Clone, Debug)]
pub struct BenchSetup {
    pub patch: usize,
    pub seed: u64,
    pub model: UpliftModel,
    pub cross_attn: CrossAttnParams,
}

impl BenchSetup {
    /// Slim model and cross-attention widths: the sweep measures how cost
    /// grows with token count, not the cost of a particular width.
    pub fn slim(patch: usize, feat_channels: usize, seed: u64) -> Result<Self> {
        let config = UpliftConfig {
            backbone_patch: patch,
            image_channels: 3,
            feat_channels,
            encoder_channels: vec![8, 8, 8],
            decoder_channels: vec![8, 8],
            guide_channels: 8,
            neighborhood: Neighborhood::named(Pattern::N17),
            use_refiner: false,
            refiner_channels: 8,
            noise_channels: 0,
            noise_seed: seed,
            norm_kind: crate::model::NormKind::Batch,
        };
        let model = UpliftModel::new(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC105_5A77);
        let cross_attn = CrossAttnParams::init(3, feat_channels, 4, &mut rng);
        Ok(Self {
            patch,
            seed,
            model,
            cross_attn,
        })
    }

    /// Seeded image and low-resolution features for `tokens`.
    pub fn inputs(&self, tokens: usize) -> Result<(FeatureMap<f32>, FeatureMap<f32>)> {
        let side = token_side(tokens)?;
        let image = synthetic_image(self.seed, tokens as u64, side * self.patch, side * self.patch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ tokens as u64);
        let feats = FeatureMap::random_uniform(side, side, self.model.config().feat_channels, 1.0, &mut rng);
        Ok((image, feats))
    }

    /// Upsample `feats` to the image's pixel grid with `method`.
    pub fn run(
        &self,
        method: Method,
        image: &FeatureMap<f32>,
        feats: &FeatureMap<f32>,
    ) -> Result<FeatureMap<f32>> {
        match method {
            Method::Uplift => self.model.uplift_pixel_dense(image, feats),
            Method::CrossAttn => baselines::cross_attention_upsample(image, feats, &self.cross_attn),
            Method::Nearest => baselines::nearest_feat_upsample(feats, self.patch),
            Method::Bilinear => baselines::bilinear_feat_upsample(feats, self.patch),
        }
    }
}

/// FNV-1a over the bit patterns of a map, for checking that repeated runs
/// do identical work.
pub fn digest(map: &FeatureMap<f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for dim in [map.height(), map.width(), map.channels()] {
        for b in (dim as u64).to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
    }
    for v in map.data() {
        for b in v.to_bits().to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub records: Vec<BenchRecord>,
    /// `(method, tokens, digest)` of the output; identical for every repeat.
    pub digests: Vec<(Method, usize, u64)>,
}

/// Time every method at every token count: `warmup` untimed runs, then
/// `repeats` timed runs on a monotonic clock. With no warmup the first timed
/// run fixes the reference digest.
pub fn bench_sweep(
    setup: &BenchSetup,
    methods: &[Method],
    token_counts: &[usize],
    repeats: usize,
    warmup: usize,
    mut progress: impl FnMut(&BenchRecord),
) -> Result<SweepResult> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let mut records = Vec::new();
    let mut digests = Vec::new();
    for &tokens in token_counts {
        let (image, feats) = setup.inputs(tokens)?;
        for &method in methods {
            let mut reference = None;
            for _ in 0..warmup {
                let d = digest(&setup.run(method, &image, &feats)?);
                reference.get_or_insert(d);
            }
            for repeat in 0..repeats {
                memory::reset_peak();
                let start = Instant::now();
                let out = setup.run(method, &image, &feats)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                let bytes = memory::peak_bytes();
                let d = digest(&out);
                if *reference.get_or_insert(d) != d {
                    return Err(Error::InvalidArgument(format!(
                        "{method} at T={tokens} produced a different output on repeat {repeat}"
                    )));
                }
                drop(out);
                let rec = BenchRecord {
                    method,
                    tokens,
                    repeat,
                    ms: ms.max(f64::MIN_POSITIVE),
                    bytes,
                };
                progress(&rec);
                records.push(rec);
            }
            digests.push((method, tokens, reference.expect("repeats ≥ 1")));
        }
    }
    Ok(SweepResult { records, digests })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median time per token count for one method, ascending in tokens.
pub fn medians(records: &[BenchRecord], method: Method) -> Vec<(usize, f64)> {
    let mut tokens: Vec<usize> = records
        .iter()
        .filter(|r| r.method == method)
        .map(|r| r.tokens)
        .collect();
    tokens.sort_unstable();
    tokens.dedup();
    tokens
        .into_iter()
        .map(|t| {
            let mut ms: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method && r.tokens == t)
                .map(|r| r.ms)
                .collect();
            (t, median(&mut ms))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlopeFit {
    pub method: Method,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Least-squares fit of `ln(median ms)` against `ln(tokens)`.
pub fn fit_slope(records: &[BenchRecord], method: Method) -> Result<SlopeFit> {
    let pts = medians(records, method);
    if pts.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "{method}: need at least 4 distinct token counts, have {}",
            pts.len()
        )));
    }
    let xs: Vec<f64> = pts.iter().map(|&(t, _)| (t as f64).ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|&(_, ms)| ms.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(SlopeFit {
        method,
        slope,
        intercept: my - slope * mx,
        r2,
        points: pts.len(),
    })
}

/// Token counts at which a method's median time dropped below the previous
/// size's.
pub fn monotonicity_violations(records: &[BenchRecord], method: Method) -> Vec<usize> {
    medians(records, method)
        .windows(2)
        .filter(|w| w[1].1 < w[0].1)
        .map(|w| w[1].0)
        .collect()
}

/// Methods present in `records`, in canonical order.
pub fn methods_in(records: &[BenchRecord]) -> Vec<Method> {
    Method::ALL
        .into_iter()
        .filter(|m| records.iter().any(|r| r.method == *m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(method: Method, power: f64) -> Vec<BenchRecord> {
        [1024usize, 2025, 4096, 8100, 16384]
            .iter()
            .flat_map(|&t| {
                (0..3).map(move |repeat| BenchRecord {
                    method,
                    tokens: t,
                    repeat,
                    ms: 0.01 * (t as f64).powf(power) * (1.0 + 0.01 * repeat as f64),
                    bytes: 4 * t,
                })
            })
            .collect()
    }

    #[test]
    fn exact_slopes() {
        let lin = fit_slope(&synthetic(Method::Uplift, 1.0), Method::Uplift).unwrap();
        assert!((lin.slope - 1.0).abs() < 1e-9 && (lin.r2 - 1.0).abs() < 1e-9);
        let quad = fit_slope(&synthetic(Method::CrossAttn, 2.0), Method::CrossAttn).unwrap();
        assert!((quad.slope - 2.0).abs() < 1e-9);
        let few: Vec<_> = synthetic(Method::Uplift, 1.0)
            .into_iter()
            .filter(|r| r.tokens < 8000)
            .collect();
        assert!(fit_slope(&few, Method::Uplift).is_err());
        assert!(fit_slope(&few, Method::Nearest).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let recs = synthetic(Method::CrossAttn, 2.0);
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("method,tokens,repeat,ms,bytes\ncross_attn,1024,0,"));
        assert_eq!(read_records(&buf[..]).unwrap(), recs);
        let mut empty = Vec::new();
        write_records(&mut empty, &[]).unwrap();
        assert_eq!(empty, b"method,tokens,repeat,ms,bytes\n");
        assert!(read_records(&empty[..]).unwrap().is_empty());
    }

    #[test]
    fn standard_token_counts() {
        assert_eq!(tokens_for_image(448, 14), 1024);
        assert_eq!(tokens_for_image(624, 16), 1521);
        assert_eq!(tokens_for_image(816, 16), 2601);
        assert_eq!(token_side(2025).unwrap(), 45);
        assert!(token_side(1000).is_err());
    }

    #[test]
    fn methods_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bicubic".parse::<Method>().is_err());
    }

    #[test]
    fn small_sweep_is_reproducible() {
        let setup = BenchSetup::slim(4, 4, 0).unwrap();
        let a = bench_sweep(&setup, &Method::ALL, &[4, 9], 2, 1, |_| {}).unwrap();
        let b = bench_sweep(&setup, &Method::ALL, &[4, 9], 2, 1, |_| {}).unwrap();
        assert_eq!(a.digests, b.digests);
        assert_eq!(a.records.len(), 16);
        assert!(a.records.iter().all(|r| r.ms > 0.0 && r.bytes > 0));
        assert!(bench_sweep(&setup, &Method::ALL, &[5], 1, 1, |_| {}).is_err());
        assert!(bench_sweep(&setup, &Method::ALL, &[4], 0, 1, |_| {}).is_err());
        let cold = bench_sweep(&setup, &Method::ALL, &[4, 9], 1, 0, |_| {}).unwrap();
        assert_eq!(cold.digests, a.digests);
    }

    #[test]
    fn monotonicity() {
        let mut recs = synthetic(Method::Nearest, 1.0);
        assert!(monotonicity_violations(&recs, Method::Nearest).is_empty());
        for r in recs.iter_mut().filter(|r| r.tokens == 4096) {
            r.ms = 0.0001;
        }
        assert_eq!(monotonicity_violations(&recs, Method::Nearest), vec![4096]);
    }
}
