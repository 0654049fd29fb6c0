//! The TAL tensor container.
//!
//! Layout: magic `TAL1`, a little-endian `u64` header length, a UTF-8 JSON
//! header, then the raw little-endian `f32` payloads. The header maps each
//! tensor name to `{"dtype": "f32", "shape": [...], "offset": o, "length": n}`
//! where `offset` and `length` are byte positions relative to the start of the
//! payload region. An optional `"__metadata__"` entry holds string pairs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TAL_MAGIC: &[u8; 4] = b"TAL1";
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite tensor value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Leading dimension and row width of a rank-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Dimension(format!("expected a rank-2 tensor, got shape {other:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let cols = self.shape.get(1).copied().unwrap_or(1);
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// Named tensors plus free-form string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::invalid(format!("`{METADATA_KEY}` is reserved")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format(format!("bundle has no tensor named `{name}`")))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    fn header_json(&self) -> String {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).expect("string map serializes"),
            );
        }
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let length = t.data.len() as u64 * 4;
            let entry = HeaderEntry {
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
                length,
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
            offset += length;
        }
        serde_json::to_string(&header).expect("header serializes")
    }
}

pub fn write_bundle_to<W: Write>(bundle: &TensorBundle, mut w: W) -> Result<()> {
    let header = bundle.header_json();
    w.write_all(TAL_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::new();
    for t in bundle.tensors.values() {
        for chunk in t.data.chunks(1 << 16) {
            buf.clear();
            buf.extend(chunk.iter().flat_map(|x| x.to_le_bytes()));
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(format!("truncated TAL file while reading {what}")),
        _ => Error::RawIo(e),
    })
}

pub fn read_bundle_from<R: Read>(mut r: R) -> Result<TensorBundle> {
    let mut magic = [0u8; 4];
    read_or_truncated(&mut r, &mut magic, "magic")?;
    if &magic != TAL_MAGIC {
        return Err(Error::format(format!("bad TAL magic {magic:?}")));
    }
    let mut b8 = [0u8; 8];
    read_or_truncated(&mut r, &mut b8, "header length")?;
    let header_len = u64::from_le_bytes(b8);
    if header_len > 1 << 30 {
        return Err(Error::format(format!("implausible TAL header length {header_len}")));
    }
    let mut header = vec![0u8; header_len as usize];
    read_or_truncated(&mut r, &mut header, "header")?;
    let header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&header)
        .map_err(|e| Error::format(format!("bad TAL JSON header: {e}")))?;

    let mut metadata = BTreeMap::new();
    let mut layout: Vec<(String, HeaderEntry)> = Vec::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| Error::format(format!("bad TAL metadata: {e}")))?;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::format(format!("bad TAL header entry `{name}`: {e}")))?;
        if entry.dtype != "f32" {
            return Err(Error::format(format!("tensor `{name}` has unsupported dtype {}", entry.dtype)));
        }
        let elems = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::format(format!("tensor `{name}` shape overflows")))?;
        if elems.checked_mul(4) != Some(entry.length) {
            return Err(Error::format(format!(
                "tensor `{name}` declares length {} bytes but shape {:?} needs {}",
                entry.length,
                entry.shape,
                elems * 4
            )));
        }
        layout.push((name, entry));
    }
    layout.sort_by_key(|(_, e)| e.offset);
    let mut cursor = 0u64;
    for (name, e) in &layout {
        if e.offset < cursor {
            return Err(Error::format(format!("tensor `{name}` overlaps the previous payload")));
        }
        cursor = e.offset + e.length;
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() as u64 != cursor {
        return Err(Error::format(format!(
            "TAL payload length mismatch: header declares {cursor} bytes, file holds {}",
            payload.len()
        )));
    }

    let mut tensors = BTreeMap::new();
    for (name, e) in layout {
        let bytes = &payload[e.offset as usize..(e.offset + e.length) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(e.shape, data).map_err(|err| Error::format(format!("tensor `{name}`: {err}")))?;
        tensors.insert(name, tensor);
    }
    Ok(TensorBundle { tensors, metadata })
}

pub fn write_bundle(bundle: &TensorBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_bundle_to(bundle, BufWriter::new(file))
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<TensorBundle> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_bundle_from(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bundle(seed: u64) -> TensorBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = TensorBundle::new();
        let emb: Vec<f32> = (0..7 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let head: Vec<f32> = (0..7 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        b.insert("embedding", Tensor::new(vec![7, 5], emb).unwrap()).unwrap();
        b.insert("lm_head", Tensor::new(vec![7, 5], head).unwrap()).unwrap();
        b.insert("scalar", Tensor::new(vec![], vec![3.5]).unwrap()).unwrap();
        b.set_metadata("strategy", "mean");
        b
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let b = random_bundle(3);
        let mut first = Vec::new();
        write_bundle_to(&b, &mut first).unwrap();
        let back = read_bundle_from(&first[..]).unwrap();
        assert_eq!(back, b);
        let mut second = Vec::new();
        write_bundle_to(&back, &mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn truncated_payload_reports_length() {
        let mut bytes = Vec::new();
        write_bundle_to(&random_bundle(4), &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_bundle_from(&bytes[..]).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn bad_magic_and_header() {
        let mut bytes = Vec::new();
        write_bundle_to(&random_bundle(5), &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[3] = b'2';
        assert!(read_bundle_from(&bad[..]).unwrap_err().to_string().contains("magic"));
        let mut garbled = bytes.clone();
        garbled[12] = b'#';
        assert!(read_bundle_from(&garbled[..]).unwrap_err().to_string().contains("header"));
    }

    #[test]
    fn shape_length_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
        let header = r#"{"x":{"dtype":"f32","shape":[2],"offset":0,"length":4}}"#;
        let mut bytes = TAL_MAGIC.to_vec();
        bytes.extend((header.len() as u64).to_le_bytes());
        bytes.extend(header.as_bytes());
        bytes.extend([0u8; 4]);
        assert!(read_bundle_from(&bytes[..]).is_err());
    }

    #[test]
    fn reserved_name_rejected() {
        let mut b = TensorBundle::new();
        assert!(b.insert("__metadata__", Tensor::new(vec![0], vec![]).unwrap()).is_err());
    }
}
