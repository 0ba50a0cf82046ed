//! The `A2TSR` tensor file format and manifest directories of named tensors.
//!
//! Layout of one file: magic `A2TSR\0`, version byte `0x01`, a little-endian
//! `u32` header length, a UTF-8 JSON header `{"dtype": "f32"|"f64",
//! "shape": [..]}`, then the row-major little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 6] = b"A2TSR\0";
pub const VERSION: u8 = 0x01;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXTENSION: &str = "a2tsr";

/// Upper bound on the header length accepted when reading.
const MAX_HEADER: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

/// A tensor read from disk in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, widening or narrowing as needed.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&TensorHeader {
        dtype: T::DTYPE,
        shape: t.shape().to_vec(),
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 5 + header.len() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in t.data() {
        v.put_le(&mut out);
    }
    Ok(out)
}

pub fn write_tensor<T: Scalar>(mut w: impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode_tensor(t)?)?;
    Ok(())
}

fn decode_payload<T: Scalar>(shape: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::get_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_tensor(mut r: impl Read) -> Result<StoredTensor> {
    let mut prefix = [0u8; 11];
    r.read_exact(&mut prefix)
        .map_err(|_| Error::Format("truncated preamble".into()))?;
    if &prefix[..6] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if prefix[6] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", prefix[6])));
    }
    let len = u32::from_le_bytes(prefix[7..11].try_into().expect("4 bytes")) as usize;
    if len > MAX_HEADER {
        return Err(Error::Format(format!("header length {len} exceeds limit")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let header: TensorHeader = serde_json::from_slice(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let bytes = count
        .checked_mul(header.dtype.size())
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let mut payload = Vec::new();
    r.take(bytes as u64 + 1).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {:?} needs {bytes}",
            payload.len(),
            header.shape
        )));
    }
    Ok(match header.dtype {
        DType::F32 => StoredTensor::F32(decode_payload(&header.shape, &payload)?),
        DType::F64 => StoredTensor::F64(decode_payload(&header.shape, &payload)?),
    })
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<StoredTensor> {
    read_tensor(std::io::BufReader::new(fs::File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.tensors.iter().find(|e| e.name == name)
    }
}

/// Writes each tensor as `<name>.a2tsr` plus a `manifest.json` listing them
/// in the given order.
pub fn save_named<'a, T: Scalar>(
    dir: &Path,
    tensors: impl IntoIterator<Item = (String, &'a Tensor<T>)>,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(Error::Format(format!("tensor name '{name}' is not a valid file stem")));
        }
        let file = format!("{name}.{EXTENSION}");
        save_tensor(&dir.join(&file), t)?;
        manifest.tensors.push(ManifestEntry {
            name,
            file,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
        });
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
}

/// All tensors of a manifest directory, in manifest order.
pub fn load_named(dir: &Path) -> Result<Vec<(String, StoredTensor)>> {
    read_manifest(dir)?
        .tensors
        .into_iter()
        .map(|e| {
            let t = load_tensor(&dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() || t.dtype() != e.dtype {
                return Err(Error::Format(format!("{} disagrees with its manifest entry", e.file)));
            }
            Ok((e.name, t))
        })
        .collect()
}

pub fn save_params<T: Scalar, P: ParamSet<T>>(dir: &Path, params: &P) -> Result<Manifest> {
    save_named(dir, params.named())
}

/// Overwrites every tensor of `params` from a manifest directory; names and
/// shapes must match exactly.
pub fn load_params<T: Scalar, P: ParamSet<T>>(dir: &Path, params: &mut P) -> Result<()> {
    let stored = load_named(dir)?;
    let expected: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let found: Vec<&str> = stored.iter().map(|(n, _)| n.as_str()).collect();
    if expected != found {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model expects {}; first difference at {:?}",
            found.len(),
            expected.len(),
            expected.iter().zip(&found).position(|(a, b)| a != b)
        )));
    }
    let flat: Vec<Tensor<T>> = stored.iter().map(|(_, t)| t.cast()).collect();
    params.load_flat(&flat)
}

/// Path of the tensor called `name` inside a manifest directory.
pub fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.{EXTENSION}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(&bytes[..6], b"A2TSR\0");
        assert_eq!(bytes[6], 1);
        let len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[11..11 + len]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["shape"], serde_json::json!([2]));
        assert_eq!(&bytes[11 + len..], &[0, 0, 128, 63, 0, 0, 0, 192]);
    }

    #[test]
    fn round_trip_both_dtypes() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 0.2, -0.3, 4.0, 5.5, -6.25]).unwrap();
        match read_tensor(encode_tensor(&a).unwrap().as_slice()).unwrap() {
            StoredTensor::F64(b) => assert_eq!(a, b),
            other => panic!("wrong dtype {:?}", other.dtype()),
        }
        let c: Tensor<f32> = a.cast();
        assert_eq!(
            read_tensor(encode_tensor(&c).unwrap().as_slice()).unwrap(),
            StoredTensor::F32(c)
        );
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::zeros(&[3]);
        let good = encode_tensor(&t).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_tensor(bad_magic.as_slice()), Err(Error::Format(_))));
        let mut bad_version = good.clone();
        bad_version[6] = 2;
        assert!(matches!(read_tensor(bad_version.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_tensor(&good[..good.len() - 1]), Err(Error::Format(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(read_tensor(long.as_slice()), Err(Error::Format(_))));
    }
}
