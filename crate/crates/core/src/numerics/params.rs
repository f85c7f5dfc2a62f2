//! Named parameter storage, freezing flags, and the checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.json` (names, shapes, groups,
//! frozen/exported flags) and one little-endian `f32` blob per parameter.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    /// Owning module, e.g. `generator`, `head`, `lm.adapter`.
    pub group: String,
    pub value: Tensor,
    pub frozen: bool,
    /// Cleared for training-only parts (discriminator, auxiliary heads) that
    /// are dropped at inference.
    pub exported: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: &str, value: Tensor) {
        assert!(self.index_of(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            value,
            frozen: false,
            exported: true,
        });
    }

    /// Gaussian init with standard deviation `std`.
    pub fn insert_normal(
        &mut self,
        name: &str,
        group: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(name, group, Tensor::from_rows(rows, cols, data));
    }

    pub fn insert_zeros(&mut self, name: &str, group: &str, rows: usize, cols: usize) {
        self.insert(name, group, Tensor::zeros(rows, cols));
    }

    pub fn insert_full(&mut self, name: &str, group: &str, rows: usize, cols: usize, v: f64) {
        self.insert(name, group, Tensor::full(rows, cols, v));
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Moves every parameter of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore) {
        for p in other.params {
            assert!(self.index_of(&p.name).is_none(), "duplicate parameter {}", p.name);
            self.params.push(p);
        }
    }

    pub fn set_frozen_all(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    /// Freezes everything, then unfreezes parameters whose group is listed.
    pub fn set_trainable_groups(&mut self, groups: &[&str]) {
        for p in &mut self.params {
            p.frozen = !groups.contains(&p.group.as_str());
        }
    }

    pub fn set_exported_group(&mut self, group: &str, exported: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.exported = exported;
        }
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn count_group(&self, group: &str) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// SHA-256 of a single parameter's name, shape and exact values.
    pub fn param_hash(&self, name: &str) -> Option<String> {
        self.get(name).map(hash_param)
    }

    /// SHA-256 over every parameter, in insertion order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(hash_param(p).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Hashes of every parameter, keyed by name.
    pub fn hashes(&self) -> Vec<(String, String)> {
        self.params.iter().map(|p| (p.name.clone(), hash_param(p))).collect()
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.round_to_f32();
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), NumericsError> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let file = format!("{i:04}.bin");
            let mut bytes = Vec::with_capacity(p.value.len() * 4);
            for &v in p.value.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            entries.push(ManifestEntry {
                name: p.name.clone(),
                group: p.group.clone(),
                shape: p.value.shape().to_vec(),
                frozen: p.frozen,
                exported: p.exported,
                file,
            });
        }
        let manifest = CheckpointManifest { params: entries };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NumericsError> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let mut store = ParamStore::new();
        for e in manifest.params {
            let bytes = fs::read(dir.join(&e.file))?;
            if bytes.len() % 4 != 0 {
                return Err(NumericsError::Checkpoint(format!("{}: truncated blob", e.name)));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let value = Tensor::new(e.shape.clone(), data)
                .map_err(|err| NumericsError::Checkpoint(format!("{}: {err}", e.name)))?;
            store.params.push(Param {
                name: e.name,
                group: e.group,
                value,
                frozen: e.frozen,
                exported: e.exported,
            });
        }
        Ok(store)
    }

    /// Copy restricted to exported parameters.
    pub fn exported_only(&self) -> ParamStore {
        ParamStore { params: self.params.iter().filter(|p| p.exported).cloned().collect() }
    }

    /// Copy restricted to one group prefix (`group == prefix` or starts with `prefix.`).
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|p| p.group == prefix || p.group.starts_with(&format!("{prefix}.")))
                .cloned()
                .collect(),
        }
    }
}

fn hash_param(p: &Param) -> String {
    let mut h = Sha256::new();
    h.update(p.name.as_bytes());
    for &d in p.value.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for &v in p.value.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    frozen: bool,
    exported: bool,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    params: Vec<ManifestEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_roundtrip_of_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert_normal("a.w", "a", 3, 4, 1.0, &mut rng);
        s.insert_zeros("b.b", "b", 1, 4);
        s.get_mut("b.b").unwrap().frozen = true;
        s.set_exported_group("b", false);
        s.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = ParamStore::load(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.fingerprint(), s.fingerprint());
    }

    #[test]
    fn trainable_groups() {
        let mut s = ParamStore::new();
        s.insert_zeros("x", "head", 2, 2);
        s.insert_zeros("y", "lm", 2, 3);
        s.set_trainable_groups(&["head"]);
        assert_eq!(s.trainable_count(), 4);
        assert_eq!(s.count(), 10);
    }
}
