//! CGT1 binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes ASCII "CGT1"
//! version u32 = 1
//! count   u32
//! per tensor:
//!   name_len u16, name UTF-8
//!   ndim     u8
//!   dims     ndim x u32
//!   payload  row-major f32
//! ```
//!
//! The container stores checkpoints as well as precomputed encoder features;
//! [`load_bundles`] assembles validated [`EmbeddingBundle`]s from a container
//! plus a JSON manifest naming each sample's tensors.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bundle::EmbeddingBundle;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CGT1";
const VERSION: u32 = 1;

/// Norm tolerance for pooled embeddings arriving through the import path;
/// looser than the in-memory invariant because payloads are stored as f32.
const IMPORT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(values: Vec<f32>, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::Validation(format!(
                "tensor data of {} values does not match dims {:?}",
                values.len(),
                dims
            )));
        }
        Ok(Tensor { dims, data: values })
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Tensor {
            dims: vec![a.len()],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        Tensor {
            dims: vec![a.nrows(), a.ncols()],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_scalar(v: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v as f32],
        }
    }

    pub fn to_array1(&self) -> Result<Array1<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::Validation(format!(
                "expected a vector, got dims {:?}",
                self.dims
            )));
        }
        Ok(Array1::from_iter(self.data.iter().map(|&v| v as f64)))
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::Validation(format!(
                "expected a matrix, got dims {:?}",
                self.dims
            )));
        }
        let data: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        Array2::from_shape_vec((self.dims[0], self.dims[1]), data)
            .map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn to_scalar(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Validation(format!(
                "expected a scalar, got dims {:?}",
                self.dims
            )));
        }
        Ok(self.data[0] as f64)
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Default, Clone)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate tensor name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32::try_from(self.entries.len()).map_err(|_| {
            Error::Validation("too many tensors for the container header".into())
        })?
        .to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Validation(format!("tensor name {name:?} too long")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let ndim = u8::try_from(tensor.dims.len())
                .map_err(|_| Error::Validation("too many dimensions".into()))?;
            w.write_all(&[ndim])?;
            for &d in &tensor.dims {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Validation("dimension too large".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for &v in &tensor.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exactly(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"CGT1\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut container = Container::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exactly(&mut r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
            let mut ndim = [0u8; 1];
            read_exactly(&mut r, &mut ndim)?;
            let mut dims = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                dims.push(read_u32(&mut r)? as usize);
            }
            let n: usize = dims.iter().product();
            let mut payload = vec![0u8; n * 4];
            read_exactly(&mut r, &mut payload)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            container.insert(name, Tensor { dims, data })?;
        }
        Ok(container)
    }
}

fn read_exactly(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("unexpected end of file".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exactly(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exactly(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

/// Tensor names making up one sample's bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub syn_layers: [String; 3],
    pub final_seq: String,
    pub text_embed: String,
    pub image_embed: String,
    pub eot_index: usize,
}

/// Manifest mapping sample ids to their tensors in a container.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub samples: BTreeMap<String, BundleEntry>,
}

/// Loads and validates every bundle named by `manifest` from the container
/// at `container_path`.
pub fn load_bundles(
    container_path: &Path,
    manifest: &BundleManifest,
) -> Result<BTreeMap<String, EmbeddingBundle>> {
    let container = Container::read(container_path)?;
    let mut out = BTreeMap::new();
    for (id, entry) in &manifest.samples {
        let syn_layers = [
            container.get(&entry.syn_layers[0])?.to_array2()?,
            container.get(&entry.syn_layers[1])?.to_array2()?,
            container.get(&entry.syn_layers[2])?.to_array2()?,
        ];
        let bundle = EmbeddingBundle {
            syn_layers,
            final_seq: container.get(&entry.final_seq)?.to_array2()?,
            text_embed: container.get(&entry.text_embed)?.to_array1()?,
            image_embed: container.get(&entry.image_embed)?.to_array1()?,
            eot_index: entry.eot_index,
        };
        bundle
            .validate(IMPORT_NORM_TOL)
            .map_err(|e| Error::Validation(format!("sample {id:?}: {e}")))?;
        out.insert(id.clone(), bundle);
    }
    Ok(out)
}

/// Writes bundles into a container, returning the matching manifest.
pub fn save_bundles(
    path: &Path,
    bundles: &BTreeMap<String, EmbeddingBundle>,
) -> Result<BundleManifest> {
    let mut container = Container::new();
    let mut manifest = BundleManifest::default();
    for (id, b) in bundles {
        let entry = BundleEntry {
            syn_layers: [
                format!("{id}.syn.0"),
                format!("{id}.syn.1"),
                format!("{id}.syn.2"),
            ],
            final_seq: format!("{id}.final_seq"),
            text_embed: format!("{id}.text_embed"),
            image_embed: format!("{id}.image_embed"),
            eot_index: b.eot_index,
        };
        for (name, layer) in entry.syn_layers.iter().zip(&b.syn_layers) {
            container.insert(name.clone(), Tensor::from_array2(layer))?;
        }
        container.insert(entry.final_seq.clone(), Tensor::from_array2(&b.final_seq))?;
        container.insert(entry.text_embed.clone(), Tensor::from_array1(&b.text_embed))?;
        container.insert(entry.image_embed.clone(), Tensor::from_array1(&b.image_embed))?;
        manifest.samples.insert(id.clone(), entry);
    }
    container.write(path)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{ToyWorld, ToyWorldConfig};
    use std::io::Write as _;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cgt1");
        let mut c = Container::new();
        c.insert(
            "a",
            Tensor::from_vec(vec![1.0, -2.5, 3.25e-8, f32::MIN_POSITIVE], vec![2, 2]).unwrap(),
        )
        .unwrap();
        c.insert("b", Tensor::from_vec(vec![0.1; 7], vec![7]).unwrap())
            .unwrap();
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert_eq!(back.len(), 2);
        for name in ["a", "b"] {
            let orig = c.get(name).unwrap();
            let got = back.get(name).unwrap();
            assert_eq!(orig.dims, got.dims);
            let orig_bits: Vec<u32> = orig.data.iter().map(|v| v.to_bits()).collect();
            let got_bits: Vec<u32> = got.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(orig_bits, got_bits);
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cgt1");
        let mut c = Container::new();
        c.insert("a", Tensor::from_vec(vec![1.0; 64], vec![8, 8]).unwrap())
            .unwrap();
        c.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.cgt1");
        std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(Container::read(&cut), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cgt1");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"NOPE").unwrap();
        f.write_all(&1u32.to_le_bytes()).unwrap();
        f.write_all(&0u32.to_le_bytes()).unwrap();
        drop(f);
        assert!(matches!(Container::read(&path), Err(Error::Format(_))));

        let path2 = dir.path().join("v9.cgt1");
        let mut f = File::create(&path2).unwrap();
        f.write_all(b"CGT1").unwrap();
        f.write_all(&9u32.to_le_bytes()).unwrap();
        f.write_all(&0u32.to_le_bytes()).unwrap();
        drop(f);
        assert!(matches!(Container::read(&path2), Err(Error::Format(_))));
    }

    fn toy_bundle(id_seed: u64) -> EmbeddingBundle {
        let world = ToyWorld::new(ToyWorldConfig {
            seed: id_seed,
            ..ToyWorldConfig::default()
        })
        .unwrap();
        let caption: Vec<String> = ["a", "photo", "of", "cat"].iter().map(|s| s.to_string()).collect();
        let image = world.encode_image(&["cat".to_string()], 3).unwrap();
        world.encode_text(&caption).unwrap().with_image(image)
    }

    #[test]
    fn bundle_round_trip_matches_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.cgt1");
        let mut bundles = BTreeMap::new();
        bundles.insert("s0".to_string(), toy_bundle(1));
        let manifest = save_bundles(&path, &bundles).unwrap();
        let loaded = load_bundles(&path, &manifest).unwrap();
        let orig = &bundles["s0"];
        let got = &loaded["s0"];
        assert_eq!(got.eot_index, orig.eot_index);
        for (a, b) in orig.final_seq.iter().zip(got.final_seq.iter()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, (*a as f32) as f64);
        }
        for (a, b) in orig.text_embed.iter().zip(got.text_embed.iter()) {
            assert_eq!(*b, (*a as f32) as f64);
        }
    }

    #[test]
    fn layer_shape_mismatch_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.cgt1");
        let mut bundles = BTreeMap::new();
        let mut bad = toy_bundle(2);
        bad.syn_layers[0] = ndarray::Array2::zeros((4, 32));
        bundles.insert("s0".to_string(), bad);
        let manifest = save_bundles(&path, &bundles).unwrap();
        let err = load_bundles(&path, &manifest).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err:?}");
    }

    #[test]
    fn missing_tensor_is_a_lookup_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.cgt1");
        let mut bundles = BTreeMap::new();
        bundles.insert("s0".to_string(), toy_bundle(3));
        let mut manifest = save_bundles(&path, &bundles).unwrap();
        manifest.samples.get_mut("s0").unwrap().final_seq = "nope".into();
        assert!(matches!(
            load_bundles(&path, &manifest),
            Err(Error::MissingTensor(_))
        ));
    }
}
