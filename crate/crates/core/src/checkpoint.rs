//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   5 bytes  "SEMA1"
//! count   u32      number of entries
//! entry   repeated:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims rank × u32
//!   payload  product(dims) × f32 (little-endian)
//! checksum u32     FNV-1a over all payload bytes, in order
//! ```
//!
//! Parameters and spectral-norm state round-trip bitwise for f32 models;
//! wider scalars are stored at f32 precision (the training scalar).

use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::tensor::Tensor;
use crate::{sc, Scalar};
use std::fs;
use std::io::Write as _;
use std::path::Path;

const MAGIC: &[u8; 5] = b"SEMA1";

fn fnv1a(bytes: &[u8], state: &mut u32) {
    for &b in bytes {
        *state ^= b as u32;
        *state = state.wrapping_mul(0x0100_0193);
    }
}

/// One named array in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

pub fn save_entries(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut checksum = 0x811c_9dc5u32;
    for e in entries {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        let expect: usize = e.dims.iter().map(|&d| d as usize).product();
        assert!(expect == e.data.len(), "entry {}: dims/payload mismatch", e.name);
        for &v in &e.data {
            let bytes = v.to_le_bytes();
            fnv1a(&bytes, &mut checksum);
            out.extend_from_slice(&bytes);
        }
    }
    out.extend_from_slice(&checksum.to_le_bytes());
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().ok();
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_entries(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(fail("bad checkpoint magic (expected SEMA1)"));
    }
    let mut pos = 5usize;
    let mut read_u32 = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > bytes.len() {
            return Err(fail("truncated"));
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let count = read_u32(&mut pos)? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut checksum = 0x811c_9dc5u32;
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        if pos + name_len > bytes.len() {
            return Err(fail("truncated name"));
        }
        let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
            .map_err(|_| fail("entry name is not UTF-8"))?;
        pos += name_len;
        let rank = read_u32(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut pos)?);
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        if pos + 4 * numel > bytes.len() {
            return Err(fail(&format!("truncated payload in entry {name}")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let chunk: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
            fnv1a(&chunk, &mut checksum);
            data.push(f32::from_le_bytes(chunk));
            pos += 4;
        }
        entries.push(Entry { name, dims, data });
    }
    let stored = read_u32(&mut pos)?;
    if stored != checksum {
        return Err(fail(&format!(
            "payload checksum mismatch (stored {stored:#010x}, computed {checksum:#010x})"
        )));
    }
    Ok(entries)
}

fn tensor_entry<S: Scalar>(name: &str, t: &Tensor<S>) -> Entry {
    Entry {
        name: name.to_string(),
        dims: t.shape().iter().map(|&d| d as u32).collect(),
        data: t.data().iter().map(|v| v.to_f32().unwrap()).collect(),
    }
}

/// Save every parameter and spectral-norm buffer of a bundle.
pub fn save_bundle<S: Scalar>(path: &Path, bundle: &ModelBundle<S>) -> Result<()> {
    let mut entries: Vec<Entry> = bundle
        .all_params()
        .iter()
        .map(|(name, t)| tensor_entry(name, t))
        .collect();
    for (name, values) in bundle.all_state() {
        entries.push(Entry {
            name,
            dims: vec![values.len() as u32],
            data: values.iter().map(|v| v.to_f32().unwrap()).collect(),
        });
    }
    save_entries(path, &entries)
}

/// Load a checkpoint into an existing bundle (shapes must match; the bundle
/// must have been built with the same architecture configuration).
pub fn load_bundle<S: Scalar>(path: &Path, bundle: &ModelBundle<S>) -> Result<()> {
    let entries = load_entries(path)?;
    let params = bundle.all_params();
    let mut loaded = 0usize;
    for e in &entries {
        if let Some((_, p)) = params.iter().find(|(n, _)| *n == e.name) {
            let shape: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
            if p.shape() != shape {
                return Err(Error::Format(format!(
                    "{}: entry {} has shape {shape:?}, model expects {:?}",
                    path.display(),
                    e.name,
                    p.shape()
                )));
            }
            let data: Vec<S> = e.data.iter().map(|&v| sc::<S>(v as f64)).collect();
            p.set_data(&data);
            loaded += 1;
        } else {
            let values: Vec<S> = e.data.iter().map(|&v| sc::<S>(v as f64)).collect();
            if bundle.load_state_entry(&e.name, &values) {
                loaded += 1;
            } else {
                return Err(Error::Format(format!(
                    "{}: unknown checkpoint entry {}",
                    path.display(),
                    e.name
                )));
            }
        }
    }
    let expected = params.len() + bundle.all_state().len();
    if loaded != expected {
        return Err(Error::Format(format!(
            "{}: checkpoint holds {loaded} known entries, model needs {expected}",
            path.display()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use crate::tensor::no_grad;

    #[test]
    fn bundle_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::new(4, 5, 16);
        let bundle = ModelBundle::<f32>::new(&cfg, 1);
        let path = dir.path().join("ck").join("model.sema");
        save_bundle(&path, &bundle).unwrap();

        let other = ModelBundle::<f32>::new(&cfg, 2);
        load_bundle(&path, &other).unwrap();
        for ((n1, p1), (_, p2)) in bundle.all_params().iter().zip(other.all_params().iter()) {
            let a = p1.to_vec();
            let b = p2.to_vec();
            assert!(
                a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter {n1} did not round-trip bitwise"
            );
        }
        for ((n1, s1), (_, s2)) in bundle.all_state().iter().zip(other.all_state().iter()) {
            assert!(
                s1.iter().zip(s2).all(|(x, y)| x.to_bits() == y.to_bits()),
                "state {n1} did not round-trip bitwise"
            );
        }

        // Identical forward behaviour in inference mode.
        let x = Tensor::<f32>::full(&[1, 3, 16, 16], 0.3);
        let (a, b) = no_grad(|| {
            (
                bundle.seg.forward(&x).to_vec(),
                other.seg.forward(&x).to_vec(),
            )
        });
        assert_eq!(a, b);
    }

    #[test]
    fn corrupted_checksum_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sema");
        let entries = vec![Entry {
            name: "w".into(),
            dims: vec![2, 2],
            data: vec![1.0, 2.0, 3.0, 4.0],
        }];
        save_entries(&path, &entries).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x40; // flip a payload bit
        std::fs::write(&path, bytes).unwrap();
        let err = load_entries(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sema");
        std::fs::write(&path, b"NOPE!xxxxxxxx").unwrap();
        let err = load_entries(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn random_entry_sets_roundtrip() {
        use rand::Rng;
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..10u64 {
            let mut r = crate::rng::stream(seed, "ckprop");
            let n_entries = r.random_range(1..6usize);
            let entries: Vec<Entry> = (0..n_entries)
                .map(|i| {
                    let rank = r.random_range(1..4usize);
                    let dims: Vec<u32> = (0..rank).map(|_| r.random_range(1..5u32)).collect();
                    let numel: usize = dims.iter().map(|&d| d as usize).product();
                    Entry {
                        name: format!("entry{i}"),
                        dims,
                        data: (0..numel).map(|_| r.random_range(-10.0..10.0f32)).collect(),
                    }
                })
                .collect();
            let path = dir.path().join(format!("{seed}.sema"));
            save_entries(&path, &entries).unwrap();
            let back = load_entries(&path).unwrap();
            assert_eq!(entries.len(), back.len());
            for (a, b) in entries.iter().zip(&back) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.dims, b.dims);
                assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
