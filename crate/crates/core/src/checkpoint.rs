//! Binary checkpoint: `MQCK`, u32 version, length-prefixed JSON model spec,
//! length-prefixed JSON normalization statistics, then every parameter as
//! name, rank, dims and little-endian f64 values. Integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::NormalizationStats;
use crate::error::{MqError, Result};
use crate::model::{ModelSpec, MqModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MQCK";
const VERSION: u32 = 1;

pub fn write_checkpoint(model: &MqModel, stats: &NormalizationStats, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_blob(&mut w, &serde_json::to_vec(&model.spec).map_err(|e| MqError::Checkpoint(e.to_string()))?)?;
    write_blob(&mut w, &serde_json::to_vec(stats).map_err(|e| MqError::Checkpoint(e.to_string()))?)?;
    w.write_all(&(model.store.len() as u64).to_le_bytes())?;
    for p in model.store.iter() {
        write_blob(&mut w, p.name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(MqModel, NormalizationStats)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(MqError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(MqError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let spec: ModelSpec = serde_json::from_slice(&read_blob(&mut r)?).map_err(|e| MqError::Checkpoint(e.to_string()))?;
    let stats: NormalizationStats =
        serde_json::from_slice(&read_blob(&mut r)?).map_err(|e| MqError::Checkpoint(e.to_string()))?;
    let count = read_u64(&mut r)? as usize;
    let mut values = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = String::from_utf8(read_blob(&mut r)?).map_err(|e| MqError::Checkpoint(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(MqError::Checkpoint(format!("parameter {name}: bad rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push((name, Tensor::new(shape, data).map_err(|e| MqError::Checkpoint(e.to_string()))?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(MqError::Checkpoint("trailing bytes after the last parameter".into()));
    }
    Ok((MqModel::from_parts(spec, values)?, stats))
}

pub fn save(model: &MqModel, stats: &NormalizationStats, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, stats, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(MqModel, NormalizationStats)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn truncated(e: std::io::Error) -> MqError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        MqError::Checkpoint("truncated checkpoint".into())
    } else {
        e.into()
    }
}

fn write_blob(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_blob(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u64(r)? as usize;
    if n > 1 << 30 {
        return Err(MqError::Checkpoint(format!("implausible block length {n}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_benchmark, NormMode};
    use crate::model::ModelSpec;

    fn model() -> (MqModel, NormalizationStats) {
        let bench = synthesize_benchmark(1, 3, 20).unwrap();
        let spec = ModelSpec {
            horizon: 4,
            features: bench.dataset.layout.clone(),
            ..ModelSpec::default()
        };
        let stats = NormalizationStats::fit(&bench.dataset, Some(15), NormMode::Standardize, false);
        (MqModel::new(spec, 7).unwrap(), stats)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, stats) = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &stats, &mut buf).unwrap();
        let (back, stats_back) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.spec, m.spec);
        assert_eq!(stats_back, stats);
        for (a, b) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let (m, stats) = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &stats, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(cut), Err(MqError::Checkpoint(_))));
        let mut extra = buf;
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
    }
}
