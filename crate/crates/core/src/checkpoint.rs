//! `UPLF1` model checkpoints.
//!
//! Layout: magic `UPLF1`, a little-endian `u32` byte length, that many bytes
//! of UTF-8 `key=value` lines (format version first, then the architecture
//! config in a fixed order), then every parameter tensor as an `FMAP1` record
//! in declaration order. Kernels are framed as `(out·in) × kh × kw` maps
//! followed by their bias as a `1 × 1 × out` map; vectors as `1 × 1 × len`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fmap::{read_fmap, write_fmap};
use crate::model::{ParamMut, ParamRef, UpliftConfig, UpliftModel};
use crate::tensor::FeatureMap;

pub const MAGIC: &[u8; 5] = b"UPLF1";
pub const VERSION: u32 = 1;

fn config_block(config: &UpliftConfig) -> String {
    let mut s = format!("version={VERSION}\n");
    for (k, v) in config.to_pairs() {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    }
    s
}

fn parse_block(text: &str) -> Result<UpliftConfig> {
    let mut pairs = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line without '=': {line:?}")))?;
        if pairs.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("duplicate config key {k:?}")));
        }
    }
    let version = pairs
        .remove("version")
        .ok_or_else(|| Error::Format("checkpoint has no version".into()))?;
    if version.trim() != VERSION.to_string() {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    UpliftConfig::from_pairs(&pairs)
}

pub fn write_model(writer: &mut impl Write, model: &UpliftModel) -> Result<()> {
    let block = config_block(model.config());
    writer.write_all(MAGIC)?;
    writer.write_all(&(block.len() as u32).to_le_bytes())?;
    writer.write_all(block.as_bytes())?;
    for p in model.params() {
        match p {
            ParamRef::Kernel(k) => {
                let w = FeatureMap::from_vec(
                    k.out_channels() * k.in_channels(),
                    k.kernel_height(),
                    k.kernel_width(),
                    k.weights().to_vec(),
                )?;
                write_fmap(writer, &w)?;
                write_fmap(writer, &FeatureMap::from_vec(1, 1, k.out_channels(), k.bias().to_vec())?)?;
            }
            ParamRef::Vector(v) => {
                write_fmap(writer, &FeatureMap::from_vec(1, 1, v.len(), v.to_vec())?)?;
            }
        }
    }
    Ok(())
}

fn expect_record(reader: &mut &[u8], shape: (usize, usize, usize), what: &str) -> Result<Vec<f32>> {
    let map: FeatureMap<f32> = read_fmap(reader)?;
    if map.shape() != shape {
        return Err(Error::Format(format!(
            "{what}: stored shape {:?} does not match the config's {shape:?}",
            map.shape()
        )));
    }
    Ok(map.into_vec())
}

pub fn read_model(bytes: &[u8]) -> Result<UpliftModel> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not an UPLF1 checkpoint".into()));
    }
    let mut rest = &bytes[MAGIC.len()..];
    let len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
    rest = &rest[4..];
    if rest.len() < len {
        return Err(Error::Format("checkpoint is truncated inside the config block".into()));
    }
    let text = std::str::from_utf8(&rest[..len])
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let config = parse_block(text)?;
    rest = &rest[len..];
    let mut model = UpliftModel::new(config, 0)?;
    for (i, p) in model.params_mut().into_iter().enumerate() {
        let what = format!("parameter {i}");
        match p {
            ParamMut::Kernel(k) => {
                let shape = (
                    k.out_channels() * k.in_channels(),
                    k.kernel_height(),
                    k.kernel_width(),
                );
                let w = expect_record(&mut rest, shape, &what)?;
                let b = expect_record(&mut rest, (1, 1, k.out_channels()), &what)?;
                k.weights_mut().copy_from_slice(&w);
                k.bias_mut().copy_from_slice(&b);
            }
            ParamMut::Vector(v) => {
                let data = expect_record(&mut rest, (1, 1, v.len()), &what)?;
                v.copy_from_slice(&data);
            }
        }
    }
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last parameter",
            rest.len()
        )));
    }
    Ok(model)
}

pub fn save_model(model: &UpliftModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<UpliftModel> {
    read_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NormKind;
    use crate::neighborhood::{Neighborhood, Pattern};

    fn model() -> UpliftModel {
        let mut cfg = UpliftConfig::small(4, 3);
        cfg.encoder_channels = vec![4, 5];
        cfg.decoder_channels = vec![4, 4];
        cfg.guide_channels = 3;
        cfg.use_refiner = true;
        cfg.refiner_channels = 2;
        cfg.noise_channels = 1;
        cfg.norm_kind = NormKind::Layer;
        cfg.neighborhood = Neighborhood::named(Pattern::N13);
        UpliftModel::new(cfg, 17).unwrap()
    }

    fn bytes(m: &UpliftModel) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(&mut buf, m).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let b = bytes(&m);
        let back = read_model(&b).unwrap();
        assert_eq!(back, m);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn header_layout() {
        let b = bytes(&model());
        assert_eq!(&b[..5], b"UPLF1");
        let len = u32::from_le_bytes([b[5], b[6], b[7], b[8]]) as usize;
        let text = std::str::from_utf8(&b[9..9 + len]).unwrap();
        assert!(text.starts_with("version=1\nbackbone_patch=4\n"));
        assert!(text.contains("neighborhood=n=13;"));
        assert_eq!(&b[9 + len..9 + len + 6], b"FMAP1\0");
    }

    #[test]
    fn rejects_damage() {
        let b = bytes(&model());
        for cut in [3, 10, b.len() - 1] {
            assert!(matches!(read_model(&b[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(read_model(&extra), Err(Error::Format(_))));
        let mut wrong_version = b.clone();
        let pos = 9 + "version=".len();
        wrong_version[pos] = b'7';
        let err = read_model(&wrong_version).unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
        let mut bad_magic = b;
        bad_magic[0] = b'X';
        assert!(read_model(&bad_magic).is_err());
    }
}
