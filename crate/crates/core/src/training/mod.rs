//! Self-supervised multi-depth training against a frozen surrogate backbone.

pub mod backbone;
pub mod data;
pub mod loss;
pub mod optim;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_slice_lens, NormKind, UpliftConfig, UpliftModel};
use crate::neighborhood::{Neighborhood, Pattern};
use crate::ops;
use crate::tensor::{FeatureMap, Real};

pub use backbone::SurrogateBackbone;
pub use data::{synthetic_image, ImageSource, HELD_OUT_STREAM};
pub use loss::{depth_loss, depth_problem, total_loss, total_loss_grads, DepthLoss, DepthProblem};
pub use optim::{Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Training depths, ascending and unique.
    pub depths: Vec<u32>,
    /// Largest input side fed to the model; ground-truth images are twice
    /// this size, so depth 1 sees exactly `image_size`.
    pub image_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub neighborhood: Neighborhood,
    pub patch: usize,
    pub feat_channels: usize,
    pub backbone_seed: u64,
    pub backbone_mixing: bool,
    pub data: ImageSource,
    /// Size of a finite cycled training set; 0 draws a fresh image every time.
    pub train_images: u64,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub guide_channels: usize,
    pub use_refiner: bool,
    pub noise_channels: usize,
    pub norm_kind: NormKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = UpliftConfig::small(8, 16);
        Self {
            depths: vec![1, 2],
            image_size: 32,
            batch_size: 4,
            steps: 2000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            neighborhood: Neighborhood::named(Pattern::N17),
            patch: 8,
            feat_channels: 16,
            backbone_seed: 0,
            backbone_mixing: false,
            data: ImageSource::Synthetic { seed: 0 },
            train_images: 0,
            encoder_channels: arch.encoder_channels,
            decoder_channels: arch.decoder_channels,
            guide_channels: arch.guide_channels,
            use_refiner: false,
            noise_channels: 0,
            norm_kind: NormKind::Batch,
        }
    }
}

fn parse_list<V: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<V>> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: bad entry {p:?}")))
        })
        .collect()
}

fn parse_value<V: std::str::FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(V::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Ground-truth image side.
    pub fn gt_size(&self) -> usize {
        2 * self.image_size
    }

    pub fn max_depth(&self) -> u32 {
        self.depths.iter().copied().max().unwrap_or(0)
    }

    pub fn model_config(&self) -> UpliftConfig {
        UpliftConfig {
            backbone_patch: self.patch,
            image_channels: 3,
            feat_channels: self.feat_channels,
            encoder_channels: self.encoder_channels.clone(),
            decoder_channels: self.decoder_channels.clone(),
            guide_channels: self.guide_channels,
            neighborhood: self.neighborhood.clone(),
            use_refiner: self.use_refiner,
            refiner_channels: self.feat_channels.max(8),
            noise_channels: self.noise_channels,
            noise_seed: self.seed,
            norm_kind: self.norm_kind,
        }
    }

    pub fn backbone(&self) -> SurrogateBackbone {
        SurrogateBackbone::new(
            self.patch,
            3,
            self.feat_channels,
            self.backbone_seed,
            self.backbone_mixing,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad("depths must be a non-empty list of positive integers".into());
        }
        if self.depths.windows(2).any(|w| w[0] >= w[1]) {
            return bad("depths must be strictly ascending".into());
        }
        if self.batch_size == 0 || self.patch == 0 || self.image_size == 0 {
            return bad("batch_size, patch and image_size must be positive".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate {} is invalid", self.learning_rate));
        }
        let d = self.max_depth();
        if (1usize << d) > self.gt_size() {
            return bad(format!("2^{d} exceeds the ground-truth size {}", self.gt_size()));
        }
        let unit = self.patch << d;
        if !self.gt_size().is_multiple_of(unit) {
            return bad(format!(
                "ground-truth size {} is not divisible by patch·2^{d} = {unit}",
                self.gt_size()
            ));
        }
        if d > self.model_config().pixel_dense_steps() {
            return bad(format!("depth {d} exceeds pixel density at patch {}", self.patch));
        }
        self.model_config().validate()
    }

    /// Parse a flat `key=value` file; blank lines and `#` comments are
    /// ignored, unknown keys are errors, missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = BTreeMap::new();
        let mut data_follows_seed = true;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(Error::Config(format!("duplicate key {key:?}")));
            }
            match key {
                "depths" => c.depths = parse_list(key, value)?,
                "image_size" => c.image_size = parse_value(key, value)?,
                "batch_size" => c.batch_size = parse_value(key, value)?,
                "steps" => c.steps = parse_value(key, value)?,
                "learning_rate" => c.learning_rate = parse_value(key, value)?,
                "optimizer" => c.optimizer = value.parse()?,
                "seed" => c.seed = parse_value(key, value)?,
                "neighborhood" => c.neighborhood = value.parse()?,
                "patch" => c.patch = parse_value(key, value)?,
                "feat_channels" => c.feat_channels = parse_value(key, value)?,
                "backbone_seed" => c.backbone_seed = parse_value(key, value)?,
                "backbone_mixing" => c.backbone_mixing = parse_value(key, value)?,
                "data" => {
                    c.data = if value == "synthetic" {
                        data_follows_seed = true;
                        ImageSource::Synthetic { seed: 0 }
                    } else if let Some(seed) = value.strip_prefix("synthetic:") {
                        data_follows_seed = false;
                        ImageSource::Synthetic {
                            seed: parse_value(key, seed)?,
                        }
                    } else {
                        ImageSource::directory(value)?
                    }
                }
                "train_images" => c.train_images = parse_value(key, value)?,
                "encoder_channels" => c.encoder_channels = parse_list(key, value)?,
                "decoder_channels" => c.decoder_channels = parse_list(key, value)?,
                "guide_channels" => c.guide_channels = parse_value(key, value)?,
                "use_refiner" => c.use_refiner = parse_value(key, value)?,
                "noise_channels" => c.noise_channels = parse_value(key, value)?,
                "norm_kind" => c.norm_kind = value.parse()?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        // Plain `data=synthetic` draws images from the run seed.
        if let (ImageSource::Synthetic { seed }, true) = (&mut c.data, data_follows_seed) {
            *seed = c.seed;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let data = match &self.data {
            ImageSource::Synthetic { seed } if *seed == self.seed => "synthetic".to_string(),
            ImageSource::Synthetic { seed } => format!("synthetic:{seed}"),
            ImageSource::Files(files) => files
                .first()
                .and_then(|f| f.parent())
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("depths", join(&self.depths)),
            ("image_size", self.image_size.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("seed", self.seed.to_string()),
            ("neighborhood", self.neighborhood.to_text()),
            ("patch", self.patch.to_string()),
            ("feat_channels", self.feat_channels.to_string()),
            ("backbone_seed", self.backbone_seed.to_string()),
            ("backbone_mixing", self.backbone_mixing.to_string()),
            ("data", data),
            ("train_images", self.train_images.to_string()),
            ("encoder_channels", join(&self.encoder_channels)),
            ("decoder_channels", join(&self.decoder_channels)),
            ("guide_channels", self.guide_channels.to_string()),
            ("use_refiner", self.use_refiner.to_string()),
            ("noise_channels", self.noise_channels.to_string()),
            ("norm_kind", self.norm_kind.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn image_index(&self, step: usize, slot: usize) -> u64 {
        let i = (step * self.batch_size + slot) as u64;
        if self.train_images > 0 {
            i % self.train_images
        } else {
            i
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    /// One entry per depth, in the trace's depth order.
    pub per_depth: Vec<f64>,
}

/// Per-step loss record; CSV header `step,L_total,L_d1,L_d2,…`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTrace {
    pub depths: Vec<u32>,
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn new(depths: &[u32]) -> Self {
        Self {
            depths: depths.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string(), "L_total".to_string()];
        h.extend(self.depths.iter().map(|d| format!("L_d{d}")));
        h
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total).collect()
    }

    /// Steps count up from 0, every row has one value per depth, and every
    /// value is finite.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.step != i {
                return Err(Error::Format(format!("row {i} has step {}", r.step)));
            }
            if r.per_depth.len() != self.depths.len() {
                return Err(Error::Format(format!("row {i} has the wrong number of terms")));
            }
            if !r.total.is_finite() || r.per_depth.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("row {i} holds a non-finite loss")));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), r.total.to_string()];
            rec.extend(r.per_depth.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.len() < 3 || header[0] != "step" || header[1] != "L_total" {
            return Err(Error::Format(format!("unexpected trace header {header:?}")));
        }
        let depths = header[2..]
            .iter()
            .map(|h| {
                h.strip_prefix("L_d")
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad depth column {h:?}")))
            })
            .collect::<Result<Vec<u32>>>()?;
        let mut trace = LossTrace::new(&depths);
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad trace field {i} in {rec:?}")))
            };
            trace.rows.push(TraceRow {
                step: num(0)? as usize,
                total: num(1)?,
                per_depth: (2..header.len()).map(num).collect::<Result<_>>()?,
            });
        }
        trace.validate()?;
        Ok(trace)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Exponential moving average with `α = 2 / (window + 1)`, seeded with the
/// first value.
pub fn ema(values: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = match values.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in values {
        acc = alpha * v + (1.0 - alpha) * acc;
        out.push(acc);
    }
    out
}

pub struct TrainOutcome {
    pub model: UpliftModel,
    pub trace: LossTrace,
    pub backbone: SurrogateBackbone,
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(config, |_| {})
}

/// Train, calling `progress` after every optimizer step.
pub fn train_with_progress(
    config: &TrainConfig,
    mut progress: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let backbone = config.backbone();
    let mut model = UpliftModel::<f32>::new(config.model_config(), config.seed)?;
    let lens = param_slice_lens(&model);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &lens);
    let mut trace = LossTrace::new(&config.depths);
    let gt = config.gt_size();
    let scale = 1.0 / config.batch_size as f64;

    for step in 0..config.steps {
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|&n| vec![0.0; n]).collect();
        let mut per_depth = vec![0.0; config.depths.len()];
        for slot in 0..config.batch_size {
            let image = config.data.image(config.image_index(step, slot), gt, gt)?;
            let lg = total_loss_grads(&model, &backbone, &image, &config.depths)?;
            for (acc, g) in grads.iter_mut().zip(&lg.grads) {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v as f64;
                }
            }
            for (acc, d) in per_depth.iter_mut().zip(&lg.per_depth) {
                *acc += d.total();
            }
        }
        per_depth.iter_mut().for_each(|v| *v *= scale);
        let row = TraceRow {
            step,
            total: per_depth.iter().sum(),
            per_depth,
        };
        if !row.total.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "loss became non-finite at step {step}"
            )));
        }
        let mean: Vec<Vec<f32>> = grads
            .into_iter()
            .map(|g| g.into_iter().map(|v| (v * scale) as f32).collect())
            .collect();
        opt.apply(&mut model.param_slices_mut(), &mean)?;
        progress(&row);
        trace.rows.push(row);
    }
    Ok(TrainOutcome {
        model,
        trace,
        backbone,
    })
}

/// Held-out ground-truth images at `size × size`, disjoint from training.
pub fn held_out_images(source: &ImageSource, count: usize, size: usize) -> Result<Vec<FeatureMap<f32>>> {
    let source = match source {
        ImageSource::Synthetic { seed } => ImageSource::Synthetic {
            seed: seed ^ HELD_OUT_STREAM,
        },
        files => files.clone(),
    };
    (0..count as u64).map(|i| source.image(i, size, size)).collect()
}

/// Mean feature error of the model and of plain resizing baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub depth: u32,
    pub images: usize,
    pub model_error: f64,
    pub bilinear_error: f64,
    pub nearest_error: f64,
}

pub fn eval_upsampling<T: Real>(
    model: &UpliftModel<T>,
    backbone: &SurrogateBackbone,
    images: &[FeatureMap<T>],
    depth: u32,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no evaluation images".into()));
    }
    let mut sums = [0.0f64; 3];
    for img in images {
        let problem = depth_problem(backbone, img, depth)?;
        let target = problem.targets.last().expect("depth ≥ 1");
        let (th, tw) = (target.height(), target.width());
        let pred = model.uplift_inference(&problem.input, &problem.low_feats, depth)?;
        let bil = ops::bilinear_resize(&problem.low_feats, th, tw);
        let near = ops::nearest_resize(&problem.low_feats, th, tw);
        for (s, p) in sums.iter_mut().zip([&pred, &bil, &near]) {
            *s += ops::l2_loss(p, target)?.as_f64();
        }
    }
    let n = images.len() as f64;
    Ok(EvalReport {
        depth,
        images: images.len(),
        model_error: sums[0] / n,
        bilinear_error: sums[1] / n,
        nearest_error: sums[2] / n,
    })
}
