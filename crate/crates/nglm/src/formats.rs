//! Binary containers for base weights (`NGLM`), adapters (`NGLA`) and
//! INT4 weights (`NGQ4`).
//!
//! All integers are little-endian. Every file starts with a four-byte magic
//! and a `u32` version (currently 1). Text blocks are a `u32` byte length
//! followed by UTF-8. A float tensor record is
//!
//! ```text
//! u16 name_len | name | u8 dtype (0 = f32, 1 = f64) | u8 rank | rank × u32 dims | payload
//! ```
//!
//! with the payload holding `product(dims)` little-endian elements in
//! row-major order.
//!
//! * `NGLM`: magic, version, config text, `u32` record count, float records.
//! * `NGLA`: magic, version, `u8` kind (1 = LoRA, 2 = prefix), header text
//!   with the hyperparameters, `u32` record count, float records.
//! * `NGQ4`: magic, version, config text, `u8` policy (1 = merge then
//!   quantize, 2 = float adapter), `u32` group size, `u32` float record
//!   count and float records (embeddings, norms, head, projection biases),
//!   `u32` quantized record count and quantized records, then `u8` adapter
//!   flag optionally followed by a `u32` length and a complete `NGLA` file.
//!
//! A quantized record is
//!
//! ```text
//! u16 name_len | name | u32 rows | u32 cols | u32 group_size
//! | u32 n_groups | n_groups × f16 group maxima | u32 n_bytes | packed codes
//! ```
//!
//! where a group's scale is its maximum divided by 7 and codes are packed two
//! per byte in row-major order, the even-indexed element in the low nibble,
//! as 4-bit two's complement.
//!
//! Files are read whole and parsed before anything is built, so a damaged
//! file never yields a partial value. Writes go to a sibling temporary file
//! that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;
use nglm_core::adapters::AdapterKind;
use nglm_core::quant::{QuantPolicy, QuantizedBundle, QuantizedMatrix};
use nglm_core::{Adapter, ModelBundle, ModelConfig, Precision, Scalar, Tensor};

pub const MODEL_MAGIC: [u8; 4] = *b"NGLM";
pub const ADAPTER_MAGIC: [u8; 4] = *b"NGLA";
pub const QUANT_MAGIC: [u8; 4] = *b"NGQ4";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] nglm_core::Error),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

fn corrupt(msg: impl Into<String>) -> FormatError {
    FormatError::Corrupt(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.len()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| corrupt("text block is not UTF-8"))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))
    }

    fn preamble(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.buf.get(..4).unwrap_or(self.buf);
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: magic,
                found: found.to_vec(),
            });
        }
        self.pos = 4;
        let version = self.u32()?;
        if version != VERSION {
            return Err(FormatError::Version {
                found: version,
                supported: VERSION,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.name()?;
        let precision = Precision::from_tag(self.u8()?).ok_or_else(|| corrupt(format!("{name}: unknown dtype")))?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("{name}: shape overflows")))?;
        let width = precision.byte_width();
        let raw = self.take(count.checked_mul(width).ok_or_else(|| corrupt("payload overflows"))?)?;
        let data: Vec<T> = match precision {
            Precision::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::from_le_slice(c) as f64)).collect(),
            Precision::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::from_le_slice(c))).collect(),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(format!("{name}: {e}")))?;
        Ok((name, tensor))
    }

    fn tensors<T: Scalar>(&mut self) -> Result<BTreeMap<String, Tensor<T>>> {
        let n = self.len()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let (name, t) = self.tensor()?;
            if out.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
        }
        Ok(out)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn preamble(magic: [u8; 4]) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&magic);
        w.u32(VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }

    fn text(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn name(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("tensor name fits in u16"));
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.name(name);
        self.u8(T::PRECISION.tag());
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.len(d);
        }
        for &v in t.data() {
            v.extend_le_bytes(&mut self.buf);
        }
    }

    fn tensors<'a, T: Scalar>(&mut self, named: impl ExactSizeIterator<Item = (String, &'a Tensor<T>)>) {
        self.len(named.len());
        for (name, t) in named {
            self.tensor(&name, t);
        }
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_model<T: Scalar>(bundle: &ModelBundle<T>) -> Vec<u8> {
    let mut w = Writer::preamble(MODEL_MAGIC);
    w.text(&bundle.config().to_text());
    w.tensors(bundle.named_tensors().into_iter());
    w.buf
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<ModelBundle<T>> {
    let mut r = Reader::new(bytes);
    r.preamble(MODEL_MAGIC)?;
    let config = ModelConfig::from_text(r.text()?)?;
    let named = r.tensors()?;
    r.finish()?;
    Ok(ModelBundle::from_named(config, named)?)
}

pub fn save_model<T: Scalar>(bundle: &ModelBundle<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(bundle))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<ModelBundle<T>> {
    decode_model(&fs::read(path)?)
}

pub fn encode_adapter<T: Scalar>(adapter: &Adapter<T>) -> Vec<u8> {
    let mut w = Writer::preamble(ADAPTER_MAGIC);
    w.u8(adapter.kind().tag());
    w.text(&adapter.header_text());
    w.tensors(adapter.named_tensors().into_iter());
    w.buf
}

pub fn decode_adapter<T: Scalar>(bytes: &[u8]) -> Result<Adapter<T>> {
    let mut r = Reader::new(bytes);
    r.preamble(ADAPTER_MAGIC)?;
    let tag = r.u8()?;
    let kind = AdapterKind::from_tag(tag).ok_or_else(|| corrupt(format!("unknown adapter kind {tag}")))?;
    let header = r.text()?;
    let named = r.tensors()?;
    r.finish()?;
    Ok(Adapter::from_parts(kind, header, named)?)
}

pub fn save_adapter<T: Scalar>(adapter: &Adapter<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_adapter(adapter))
}

pub fn load_adapter<T: Scalar>(path: &Path) -> Result<Adapter<T>> {
    decode_adapter(&fs::read(path)?)
}

pub fn encode_quantized(q: &QuantizedBundle) -> Vec<u8> {
    let mut w = Writer::preamble(QUANT_MAGIC);
    w.text(&q.model.config().to_text());
    w.u8(q.policy.tag());
    w.len(q.group_size);
    w.tensors(q.float_tensors().into_iter());
    let quantized = q.quantized_tensors();
    w.len(quantized.len());
    for (name, m) in quantized {
        w.name(&name);
        let [rows, cols] = m.shape();
        w.len(rows);
        w.len(cols);
        w.len(m.group_size());
        w.len(m.maxima().len());
        for s in m.maxima() {
            w.buf.extend_from_slice(&s.to_le_bytes());
        }
        w.len(m.packed().len());
        w.buf.extend_from_slice(m.packed());
    }
    match &q.adapter {
        Some(a) => {
            w.u8(1);
            let blob = encode_adapter(a);
            w.len(blob.len());
            w.buf.extend_from_slice(&blob);
        }
        None => w.u8(0),
    }
    w.buf
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedBundle> {
    let mut r = Reader::new(bytes);
    r.preamble(QUANT_MAGIC)?;
    let config = ModelConfig::from_text(r.text()?)?;
    let tag = r.u8()?;
    let policy = QuantPolicy::from_tag(tag).ok_or_else(|| corrupt(format!("unknown policy {tag}")))?;
    let group_size = r.len()?;
    let mut floats: BTreeMap<String, Tensor<f32>> = r.tensors()?;
    let n = r.len()?;
    let mut quantized = BTreeMap::new();
    for _ in 0..n {
        let name = r.name()?;
        let (rows, cols, group) = (r.len()?, r.len()?, r.len()?);
        let n_groups = r.len()?;
        let raw = r.take(n_groups.checked_mul(2).ok_or_else(|| corrupt("scale count overflows"))?)?;
        let maxima = raw.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]])).collect();
        let n_bytes = r.len()?;
        let packed = r.take(n_bytes)?.to_vec();
        let m = QuantizedMatrix::from_parts(rows, cols, group, maxima, packed).map_err(|e| corrupt(format!("{name}: {e}")))?;
        // The float skeleton needs a placeholder weight of the right shape.
        floats.insert(name.clone(), Tensor::zeros(&[rows, cols]));
        if quantized.insert(name.clone(), m).is_some() {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
    }
    let adapter = match r.u8()? {
        0 => None,
        1 => {
            let len = r.len()?;
            Some(decode_adapter(r.take(len)?)?)
        }
        other => return Err(corrupt(format!("bad adapter flag {other}"))),
    };
    r.finish()?;
    let skeleton = ModelBundle::from_named(config, floats)?;
    Ok(QuantizedBundle::from_parts(skeleton, quantized, policy, group_size, adapter)?)
}

pub fn save_quantized(q: &QuantizedBundle, path: &Path) -> Result<()> {
    write_atomic(path, &encode_quantized(q))
}

pub fn load_quantized(path: &Path) -> Result<QuantizedBundle> {
    decode_quantized(&fs::read(path)?)
}

/// Which container a file holds, from its magic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Model,
    Adapter,
    Quantized,
}

pub fn sniff(path: &Path) -> Result<FileKind> {
    use std::io::Read;
    let mut magic = [0u8; 4];
    fs::File::open(path)?.read_exact(&mut magic)?;
    match magic {
        MODEL_MAGIC => Ok(FileKind::Model),
        ADAPTER_MAGIC => Ok(FileKind::Adapter),
        QUANT_MAGIC => Ok(FileKind::Quantized),
        other => Err(FormatError::BadMagic {
            expected: MODEL_MAGIC,
            found: other.to_vec(),
        }),
    }
}
