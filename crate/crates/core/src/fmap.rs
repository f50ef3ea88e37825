//! `FMAP1` tensor container.
//!
//! Layout: the six magic bytes `FMAP1\0`, then height, width, channels as
//! little-endian `u32`, then `height·width·channels` little-endian `f32`
//! values in row-major, channel-fastest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

pub const MAGIC: &[u8; 6] = b"FMAP1\0";

pub fn write_fmap<T: Real>(writer: &mut impl Write, map: &FeatureMap<T>) -> Result<()> {
    writer.write_all(MAGIC)?;
    for dim in [map.height(), map.width(), map.channels()] {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::InvalidArgument(format!("dimension {dim} exceeds u32")))?;
        writer.write_all(&dim.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(map.len() * 4);
    for &v in map.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    writer.write_all(&buf)?;
    Ok(())
}

fn read_exact_or(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_fmap<T: Real>(reader: &mut impl Read) -> Result<FeatureMap<T>> {
    let mut magic = [0u8; 6];
    read_exact_or(reader, &mut magic, "FMAP1 magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad FMAP1 magic {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        read_exact_or(reader, &mut b, "FMAP1 header")?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [h, w, c] = dims;
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| Error::Format("FMAP1 dimensions overflow".into()))?;
    let mut raw = vec![0u8; count * 4];
    read_exact_or(reader, &mut raw, "FMAP1 payload")?;
    let data = raw
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    FeatureMap::from_vec(h, w, c, data).map_err(|e| Error::Format(format!("FMAP1 payload: {e}")))
}

pub fn save_fmap<T: Real>(path: impl AsRef<Path>, map: &FeatureMap<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fmap(&mut w, map)?;
    w.flush()?;
    Ok(())
}

pub fn load_fmap<T: Real>(path: impl AsRef<Path>) -> Result<FeatureMap<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let map = read_fmap(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after FMAP1 payload".into()));
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_bytes() {
        let m = FeatureMap::<f32>::from_vec(1, 2, 1, vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_fmap(&mut buf, &m).unwrap();
        let mut expected = b"FMAP1\0".to_vec();
        for d in [1u32, 2, 1] {
            expected.extend_from_slice(&d.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_corruption() {
        let m = FeatureMap::<f32>::filled(2, 2, 2, 0.5);
        let mut buf = Vec::new();
        write_fmap(&mut buf, &m).unwrap();
        assert!(matches!(
            read_fmap::<f32>(&mut &buf[..buf.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_fmap::<f32>(&mut &bad[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = FeatureMap::<f32>::random_uniform(h, w, c, 10.0, &mut rng);
            let mut buf = Vec::new();
            write_fmap(&mut buf, &m).unwrap();
            let back: FeatureMap<f32> = read_fmap(&mut &buf[..]).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
