//! Bit-exact persistence of model configuration and parameters.
//!
//! Weight files (`ULW1`) hold the model config, then one record per stored
//! tensor — trainable parameters plus batch-norm running statistics, in the
//! model's canonical traversal order — and end with a CRC32 (IEEE) of all
//! preceding bytes. Everything is little-endian; payloads are raw f32.
//!
//! The same record encoding, under the `ULT1` magic with exactly one
//! record, serves as a standalone raw-tensor format for float rasters.
//!
//! Layout of `ULW1` (all integers little-endian u32 unless noted):
//!
//! ```text
//! magic             4 bytes  "ULW1"
//! version           u32      1
//! base_width        u32
//! depth             u32
//! in_channels       u32
//! out_channels      u32
//! use_batchnorm     u8       0 or 1
//! bn_momentum       f32
//! bn_epsilon        f32
//! tensor_count      u32
//! repeated tensor_count times:
//!   name_len        u32
//!   name            name_len bytes, UTF-8
//!   rank            u32
//!   extents         rank x u32
//!   payload         prod(extents) x f32
//! crc32             u32      IEEE CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_unet, Model, ModelConfig};
use crate::tensor::Tensor;

const WEIGHT_MAGIC: &[u8; 4] = b"ULW1";
const TENSOR_MAGIC: &[u8; 4] = b"ULT1";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for e in shape {
        put_u32(out, *e as u32);
    }
    for v in values {
        put_f32(out, *v);
    }
}

/// Serialize the model to `path`. The byte stream is deterministic for a
/// given model; returns the number of bytes written.
pub fn save_model(model: &Model, path: &Path) -> Result<u64> {
    let bytes = encode_model(model);
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

/// The exact byte stream [`save_model`] writes.
pub fn encode_model(model: &Model) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, cfg.base_width as u32);
    put_u32(&mut out, cfg.depth as u32);
    put_u32(&mut out, cfg.in_channels as u32);
    put_u32(&mut out, cfg.out_channels as u32);
    out.push(cfg.use_batchnorm as u8);
    put_f32(&mut out, cfg.bn_momentum);
    put_f32(&mut out, cfg.bn_epsilon);

    let mut count = 0u32;
    model.for_each_stored(|_, _, _| count += 1);
    put_u32(&mut out, count);
    model.for_each_stored(|name, shape, values| put_record(&mut out, name, shape, values));

    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

/// Bounds-checked little-endian reader over a byte slice.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Format(format!(
                "truncated file: needed {len} bytes for {what}, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

struct RawRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

fn read_record(r: &mut Reader<'_>) -> Result<RawRecord> {
    let name_len = r.u32("record name length")? as usize;
    if name_len > 4096 {
        return Err(Error::Format(format!("implausible record name length {name_len}")));
    }
    let name = std::str::from_utf8(r.take(name_len, "record name")?)
        .map_err(|_| Error::Format("record name is not UTF-8".to_string()))?
        .to_string();
    let rank = r.u32("record rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("record {name}: implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count = 1usize;
    for _ in 0..rank {
        let e = r.u32("record extent")? as usize;
        if e == 0 {
            return Err(Error::Format(format!("record {name}: zero extent")));
        }
        count = count
            .checked_mul(e)
            .ok_or_else(|| Error::Format(format!("record {name}: extent overflow")))?;
        shape.push(e);
    }
    if count.checked_mul(4).map(|b| b > r.remaining()).unwrap_or(true) {
        return Err(Error::Format(format!(
            "record {name}: payload of {count} values exceeds remaining file size"
        )));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f32("record payload")?);
    }
    Ok(RawRecord { name, shape, values })
}

/// Reconstruct a model from a weight file. The file's tensor records must
/// match the rebuilt model's parameter store exactly — same count, names,
/// order and shapes — and the trailing CRC32 must validate.
pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    decode_model(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parse the byte stream produced by [`encode_model`].
pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[0..4] != WEIGHT_MAGIC {
        return Err(Error::Format("bad magic, expected ULW1".to_string()));
    }
    if bytes.len() < 8 {
        return Err(Error::Format("truncated file".to_string()));
    }
    let body_len = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let actual_crc = crc32fast::hash(&bytes[..body_len]);
    if stored_crc != actual_crc {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }

    let mut r = Reader::new(&bytes[..body_len]);
    r.take(4, "magic")?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let config = ModelConfig {
        base_width: r.u32("base_width")? as usize,
        depth: r.u32("depth")? as usize,
        in_channels: r.u32("in_channels")? as usize,
        out_channels: r.u32("out_channels")? as usize,
        use_batchnorm: match r.take(1, "use_batchnorm")?[0] {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Format(format!("bad use_batchnorm flag {other}")));
            }
        },
        bn_momentum: r.f32("bn_momentum")?,
        bn_epsilon: r.f32("bn_epsilon")?,
    };
    config.validate().map_err(|e| Error::Format(format!("stored config invalid: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        records.push(read_record(&mut r)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes before checksum",
            r.remaining()
        )));
    }

    // weights are overwritten record by record, so the init seed is irrelevant
    let mut model = build_unet(&config, 0)?;
    let mut idx = 0usize;
    let mut problem: Option<Error> = None;
    model.for_each_stored_mut(|name, shape, values| {
        if problem.is_some() {
            return;
        }
        let Some(rec) = records.get(idx) else {
            problem = Some(Error::Format(format!(
                "missing tensor record for {name} (file has only {idx})"
            )));
            return;
        };
        if rec.name != name {
            problem = Some(Error::Format(format!(
                "tensor record {idx} is named {:?}, expected {name:?}",
                rec.name
            )));
        } else if rec.shape != shape {
            problem = Some(Error::Format(format!(
                "tensor record {name}: shape {:?} does not match expected {:?}",
                rec.shape, shape
            )));
        } else {
            values.copy_from_slice(&rec.values);
        }
        idx += 1;
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if idx != records.len() {
        return Err(Error::Format(format!(
            "file has {} tensor records, model stores {idx}",
            records.len()
        )));
    }
    Ok(model)
}

/// Write a single named tensor as a standalone ULT1 file.
pub fn write_tensor_file(path: &Path, name: &str, tensor: &Tensor) -> Result<u64> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut out, VERSION);
    put_record(&mut out, name, &tensor.shape(), tensor.data());
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    fs::write(path, &out)?;
    Ok(out.len() as u64)
}

/// Read a standalone ULT1 tensor file. Rank-2 records are interpreted as
/// (h, w) planes; rank-4 as full NCHW tensors.
pub fn read_tensor_file(path: &Path) -> Result<(String, Tensor)> {
    let bytes = fs::read(path)?;
    let fail = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 4 || &bytes[0..4] != TENSOR_MAGIC {
        return Err(fail("bad magic, expected ULT1".to_string()));
    }
    if bytes.len() < 8 {
        return Err(fail("truncated file".to_string()));
    }
    let body_len = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    if stored_crc != crc32fast::hash(&bytes[..body_len]) {
        return Err(fail("checksum mismatch".to_string()));
    }
    let mut r = Reader::new(&bytes[..body_len]);
    r.take(4, "magic")?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let rec = read_record(&mut r).map_err(|e| fail(e.to_string()))?;
    if r.remaining() != 0 {
        return Err(fail("unexpected trailing bytes".to_string()));
    }
    let shape = match rec.shape.as_slice() {
        [h, w] => [1, 1, *h, *w],
        [n, c, h, w] => [*n, *c, *h, *w],
        other => return Err(fail(format!("unsupported tensor rank {}", other.len()))),
    };
    Ok((rec.name, Tensor::from_vec(shape, rec.values)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_parameters;
    use crate::ops::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn toy_model() -> Model {
        let cfg = ModelConfig { base_width: 2, depth: 1, ..ModelConfig::default() };
        build_unet(&cfg, 17).unwrap()
    }

    #[test]
    fn save_twice_produces_identical_bytes() {
        let model = toy_model();
        assert_eq!(encode_model(&model), encode_model(&model));
    }

    #[test]
    fn stored_value_count_matches_parameter_report() {
        let model = build_unet(&ModelConfig::default(), 5).unwrap();
        let report = count_parameters(&model);
        let mut stored = 0u64;
        model.for_each_stored(|_, _, values| stored += values.len() as u64);
        assert_eq!(stored, report.trainable_total + report.non_trainable_total);
        // base-8 BN-on ledger: 487,145 trainable + 1,472 running stats
        assert_eq!(stored, 488_617);
    }

    #[test]
    fn round_trip_preserves_eval_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ulw");
        let mut model = toy_model();
        // give the running stats non-default values
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform([2, 1, 8, 8], 0.0, 1.0, &mut rng);
        model.forward(&x, Mode::Train).unwrap();

        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let probe = Tensor::uniform([1, 1, 8, 8], 0.0, 1.0, &mut rng);
        assert_eq!(model.forward_eval(&probe).unwrap(), loaded.forward_eval(&probe).unwrap());
    }

    #[test]
    fn any_single_byte_flip_is_detected() {
        let model = toy_model();
        let good = encode_model(&model);
        // flipping any byte must make decoding fail (CRC32 catches all
        // single-byte corruption; header checks catch the rest)
        for pos in [0usize, 3, 4, 9, 30, good.len() / 2, good.len() - 5, good.len() - 1] {
            let mut bad = good.clone();
            bad[pos] ^= 0xFF;
            assert!(decode_model(&bad).is_err(), "corruption at {pos} went undetected");
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = toy_model();
        let good = encode_model(&model);
        for cut in [1usize, 7, 20, good.len() / 2, good.len() - 1] {
            assert!(decode_model(&good[..cut]).is_err(), "truncation at {cut} accepted");
        }
    }

    #[test]
    fn empty_path_is_io_error() {
        let model = toy_model();
        assert!(matches!(save_model(&model, Path::new("")), Err(Error::Io(_))));
        assert!(matches!(load_model(Path::new("")), Err(Error::Io(_))));
    }

    #[test]
    fn param_report_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ulw");
        let model = build_unet(&ModelConfig::default(), 3).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let a = count_parameters(&model);
        let b = count_parameters(&loaded);
        assert_eq!(a.trainable_total, b.trainable_total);
        assert_eq!(a.non_trainable_total, b.non_trainable_total);
        assert_eq!(a.layers, b.layers);
        assert_eq!(model.config(), loaded.config());
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ult");
        let t = Tensor::from_vec([1, 1, 2, 3], vec![0.5, -1.0, 2.5, 0.0, 1.0, 9.0]).unwrap();
        write_tensor_file(&path, "probe", &t).unwrap();
        let (name, back) = read_tensor_file(&path).unwrap();
        assert_eq!(name, "probe");
        assert_eq!(back, t);
    }
}
