//! Named parameters, gradient accumulation, checkpoint directory I/O.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::Real;

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint meta error: {0}")]
    Meta(String),
    #[error("parameter {0} blob size mismatch")]
    BlobSize(String),
}

#[derive(Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<F>,
    pub frozen: bool,
}

/// Owns all model parameters. Read-only while graphs evaluate; the
/// optimizer takes `&mut` between steps.
#[derive(Clone)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

pub enum Init {
    Zeros,
    Ones,
    /// Uniform(-limit, limit) with limit = sqrt(6/(fan_in+fan_out)).
    Xavier,
    /// Normal(0, std).
    Normal(f64),
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> usize {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let n = rows * cols;
        let values: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Xavier => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| F::from_f64(rng.gen_range(-limit..limit))).collect()
            }
            Init::Normal(std) => {
                (0..n).map(|_| F::from_f64(sample_normal(rng) * std)).collect()
            }
        };
        self.params.push(Parameter { name: name.to_string(), rows, cols, values, frozen: false });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        self.params.len() - 1
    }

    pub fn get(&self, pid: usize) -> &Parameter<F> {
        &self.params[pid]
    }

    pub fn get_mut(&mut self, pid: usize) -> &mut Parameter<F> {
        &mut self.params[pid]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Parameter<F>)> {
        self.params.iter().enumerate()
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    /// SHA-256 over the f32 little-endian encoding of every parameter in
    /// name order. Stable across loads.
    pub fn checksum(&self) -> String {
        let mut names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        let mut h = Sha256::new();
        for name in names {
            let p = &self.params[self.by_name[name]];
            h.update(name.as_bytes());
            for &v in &p.values {
                h.update((v.to_f64() as f32).to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// Checksum restricted to parameters with `frozen == true`.
    pub fn frozen_checksum(&self) -> String {
        let mut names: Vec<&str> =
            self.params.iter().filter(|p| p.frozen).map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        let mut h = Sha256::new();
        for name in names {
            let p = &self.params[self.by_name[name]];
            h.update(name.as_bytes());
            for &v in &p.values {
                h.update((v.to_f64() as f32).to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// Write a checkpoint directory: `meta.json` plus one little-endian
    /// f32 blob per parameter, named `<param-name>.f32`.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<(), ParamError> {
        std::fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            dtype: "f32".to_string(),
            config_hash: config_hash.to_string(),
            params: self
                .params
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    shape: vec![p.rows, p.cols],
                    frozen: p.frozen,
                })
                .collect(),
        };
        let f = std::fs::File::create(dir.join("meta.json"))?;
        serde_json::to_writer_pretty(f, &meta).map_err(|e| ParamError::Meta(e.to_string()))?;
        for p in &self.params {
            let mut buf = Vec::with_capacity(p.values.len() * 4);
            for &v in &p.values {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
            let mut f = std::fs::File::create(dir.join(format!("{}.f32", p.name)))?;
            f.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, String), ParamError> {
        let f = std::fs::File::open(dir.join("meta.json"))?;
        let meta: CheckpointMeta =
            serde_json::from_reader(f).map_err(|e| ParamError::Meta(e.to_string()))?;
        if meta.dtype != "f32" {
            return Err(ParamError::Meta(format!("unsupported dtype {}", meta.dtype)));
        }
        let mut store = ParamStore::new();
        for pm in &meta.params {
            let (rows, cols) = (pm.shape[0], pm.shape[1]);
            let mut buf = Vec::new();
            std::fs::File::open(dir.join(format!("{}.f32", pm.name)))?.read_to_end(&mut buf)?;
            if buf.len() != rows * cols * 4 {
                return Err(ParamError::BlobSize(pm.name.clone()));
            }
            let values: Vec<F> = buf
                .chunks_exact(4)
                .map(|b| F::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            store.params.push(Parameter {
                name: pm.name.clone(),
                rows,
                cols,
                values,
                frozen: pm.frozen,
            });
            store.by_name.insert(pm.name.clone(), store.params.len() - 1);
        }
        Ok((store, meta.config_hash))
    }
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    dtype: String,
    config_hash: String,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

/// Per-parameter gradient accumulator, indexed by parameter id.
pub struct GradMap<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> GradMap<F> {
    pub fn new(n_params: usize) -> Self {
        GradMap { grads: (0..n_params).map(|_| None).collect() }
    }

    pub fn accumulate(&mut self, pid: usize, g: &[F]) {
        let slot = self.grads[pid].get_or_insert_with(|| vec![F::zero(); g.len()]);
        for (x, y) in slot.iter_mut().zip(g) {
            *x += *y;
        }
    }

    pub fn get(&self, pid: usize) -> Option<&[F]> {
        self.grads[pid].as_deref()
    }

    pub fn merge(&mut self, other: GradMap<F>) {
        for (pid, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(pid, &g);
            }
        }
    }

    pub fn scale(&mut self, k: F) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= k;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for g in self.grads.iter().flatten() {
            for &x in g {
                let x = x.to_f64();
                s += x * x;
            }
        }
        s.sqrt()
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// Box-Muller; rand_distr would pull another dep for one function.
fn sample_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add("baseline.w", 3, 4, Init::Xavier, &mut rng);
        s.add("baseline.b", 1, 4, Init::Zeros, &mut rng);
        s.add("memory.q", 2, 2, Init::Normal(0.1), &mut rng);
        s
    }

    #[test]
    fn save_load_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        s.save(dir.path(), "cafebabe").unwrap();
        let (loaded, hash) = ParamStore::<f32>::load(dir.path()).unwrap();
        assert_eq!(hash, "cafebabe");
        assert_eq!(s.checksum(), loaded.checksum());
        for (pid, p) in s.iter() {
            let q = loaded.get(loaded.id(&p.name).unwrap());
            assert_eq!(p.values, q.values);
            assert_eq!((p.rows, p.cols), (q.rows, q.cols));
            let _ = pid;
        }
    }

    #[test]
    fn freeze_prefix_marks_and_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sample();
        s.freeze_prefix("baseline.");
        assert!(s.get(s.id("baseline.w").unwrap()).frozen);
        assert!(!s.get(s.id("memory.q").unwrap()).frozen);
        let frozen = s.frozen_checksum();
        // Mutating a non-frozen parameter leaves the frozen checksum alone.
        s.get_mut(s.id("memory.q").unwrap()).values[0] += 1.0;
        assert_eq!(s.frozen_checksum(), frozen);
        assert_ne!(s.checksum(), frozen);
        // Frozen flags survive a save/load cycle.
        s.save(dir.path(), "x").unwrap();
        let (loaded, _) = ParamStore::<f32>::load(dir.path()).unwrap();
        assert!(loaded.get(loaded.id("baseline.w").unwrap()).frozen);
    }

    #[test]
    fn grad_map_accumulates_and_norms() {
        let mut g = GradMap::<f32>::new(2);
        g.accumulate(0, &[3.0, 4.0]);
        g.accumulate(0, &[1.0, 0.0]);
        assert_eq!(g.get(0).unwrap(), &[4.0, 4.0]);
        assert!(g.get(1).is_none());
        g.scale(0.5);
        assert_eq!(g.get(0).unwrap(), &[2.0, 2.0]);
        assert!((g.l2_norm() - (8.0f64).sqrt()).abs() < 1e-9);
    }
}
