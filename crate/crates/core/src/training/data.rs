use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::fmap::load_fmap;
use crate::ops;
use crate::tensor::FeatureMap;

/// Seed stream reserved for held-out evaluation images.
pub const HELD_OUT_STREAM: u64 = 0x005E_ED0F_E7A1;

/// Procedural RGB image: a linear gradient, a few low-frequency cosine
/// fields, and axis-aligned rectangles with hard edges. Fully determined by
/// `(seed, index)`.
pub fn synthetic_image(seed: u64, index: u64, height: usize, width: usize) -> FeatureMap<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (hf, wf) = (height as f64, width as f64);

    let mut base = [[0.0f64; 3]; 3];
    for ch in base.iter_mut() {
        *ch = [
            rng.gen_range(0.2..0.8),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
        ];
    }
    let waves: Vec<([f64; 3], f64, f64, f64)> = (0..3)
        .map(|_| {
            let amp = [
                rng.gen_range(-0.15..0.15),
                rng.gen_range(-0.15..0.15),
                rng.gen_range(-0.15..0.15),
            ];
            (amp, rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0), rng.gen_range(0.0..TAU))
        })
        .collect();
    let rects: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..rng.gen_range(1..=4))
        .map(|_| {
            let (y0, x0) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
            let (rh, rw) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
            let colour = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            (y0, x0, y0 + rh, x0 + rw, colour)
        })
        .collect();

    FeatureMap::from_fn(height, width, 3, |i, j, c| {
        let (y, x) = ((i as f64 + 0.5) / hf, (j as f64 + 0.5) / wf);
        let mut v = base[c][0] + base[c][1] * (y - 0.5) + base[c][2] * (x - 0.5);
        for (amp, fy, fx, phase) in &waves {
            v += amp[c] * (TAU * (fy * y + fx * x) + phase).cos();
        }
        for (y0, x0, y1, x1, colour) in &rects {
            if y >= *y0 && y < *y1 && x >= *x0 && x < *x1 {
                v = colour[c];
            }
        }
        v as f32
    })
}

/// Where training and evaluation images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Synthetic { seed: u64 },
    /// Sorted list of 3-channel FMAP1 files, cycled by index and resized
    /// bilinearly to the requested size when needed.
    Files(Vec<PathBuf>),
}

impl ImageSource {
    pub fn directory(dir: impl AsRef<Path>) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "fmap"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no .fmap files in {}",
                dir.as_ref().display()
            )));
        }
        Ok(ImageSource::Files(files))
    }

    pub fn image(&self, index: u64, height: usize, width: usize) -> Result<FeatureMap<f32>> {
        match self {
            ImageSource::Synthetic { seed } => Ok(synthetic_image(*seed, index, height, width)),
            ImageSource::Files(files) => {
                let path = &files[(index % files.len() as u64) as usize];
                let img: FeatureMap<f32> = load_fmap(path)?;
                if img.channels() != 3 {
                    return Err(shape_err!(
                        "{} has {} channels, expected 3",
                        path.display(),
                        img.channels()
                    ));
                }
                if img.height() == height && img.width() == width {
                    Ok(img)
                } else {
                    Ok(ops::bilinear_resize(&img, height, width))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_distinct() {
        let a = synthetic_image(0, 3, 16, 16);
        assert_eq!(a, synthetic_image(0, 3, 16, 16));
        assert_ne!(a, synthetic_image(0, 4, 16, 16));
        assert_ne!(a, synthetic_image(1, 3, 16, 16));
        assert!(a.is_finite());
    }

    #[test]
    fn has_edges_and_smooth_regions() {
        let img = synthetic_image(7, 0, 64, 64);
        let steps: Vec<f32> = (0..63)
            .map(|j| (img.get(32, j + 1, 0) - img.get(32, j, 0)).abs())
            .collect();
        let small = steps.iter().filter(|&&d| d < 0.02).count();
        assert!(small > 30, "mostly smooth: {small}");
    }

    #[test]
    fn directory_source() {
        let dir = tempfile::tempdir().unwrap();
        let img = synthetic_image(0, 0, 8, 8);
        crate::fmap::save_fmap(dir.path().join("a.fmap"), &img).unwrap();
        let src = ImageSource::directory(dir.path()).unwrap();
        assert_eq!(src.image(5, 8, 8).unwrap(), img);
        assert_eq!(src.image(0, 4, 4).unwrap().shape(), (4, 4, 3));
        let empty = tempfile::tempdir().unwrap();
        assert!(ImageSource::directory(empty.path()).is_err());
    }
}
