//! Named parameter storage and the checkpoint archive format.
//!
//! An archive is a plain sequence of records, each
//! `u32 name length | utf-8 name | TNSR blob`, with no outer header.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

/// Graph variables standing in for every parameter of a store, by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub(crate) fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.tensor(id))
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(Error::shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.tensors[id.0].shape(),
                t.shape()
            )));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Collects per-parameter gradients after `g.backward`; parameters the
    /// loss does not depend on get zeros.
    pub fn gradients(&self, g: &Graph<S>, binding: &Binding) -> Vec<Vec<S>> {
        binding
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| {
                g.grad(v)
                    .map(<[S]>::to_vec)
                    .unwrap_or_else(|| vec![S::zero(); t.numel()])
            })
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_archive_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.to_tnsr_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_archive_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every parameter from an archive. The archive must hold
    /// exactly this store's names with matching shapes.
    pub fn load_archive_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let records = read_archive::<S>(bytes)?;
        if records.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                self.len()
            )));
        }
        for (name, t) in records {
            self.set(&name, t)
                .map_err(|e| Error::Config(format!("checkpoint mismatch: {e}")))?;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_archive_bytes(&bytes)
    }
}

pub fn read_archive<S: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<S>)>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let len_bytes = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::Config("archive truncated in name length".into()))?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 4;
        let name = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Config("archive truncated in name".into()))?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| Error::Config("archive name is not utf-8".into()))?;
        pos += len;
        let (t, used) = Tensor::from_tnsr_bytes(&bytes[pos..])?;
        pos += used;
        out.push((name, t));
    }
    Ok(out)
}

/// Seeded parameter initializer.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub std: f64,
}

impl Init<'_> {
    /// Normal(0, std) samples, redrawn until within two standard deviations.
    pub fn trunc_normal<S: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(self.rng);
                if z.abs() <= 2.0 {
                    break z * self.std;
                }
            })
            .collect();
        Tensor::from_f64(shape, &data)
    }

    pub fn uniform<S: Scalar>(&mut self, shape: Vec<usize>, bound: f64) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::from_f64(shape, &data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_and_layout() {
        let mut store = ParamStore::<f32>::new();
        store
            .insert("mfm.cross_ia.q_proj.weight", Tensor::matrix(&[&[1.0, 2.0]]))
            .unwrap();
        store.insert("b", Tensor::vector(&[3.0])).unwrap();
        let bytes = store.to_archive_bytes();
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()), 26);
        assert_eq!(&bytes[4..30], b"mfm.cross_ia.q_proj.weight");
        assert_eq!(&bytes[30..34], b"TNSR");

        let mut other = store.clone();
        other.set("b", Tensor::vector(&[0.0])).unwrap();
        other.load_archive_bytes(&bytes).unwrap();
        assert_eq!(other.get("b").unwrap().data(), &[3.0]);
    }

    #[test]
    fn archive_rejects_mismatch() {
        let mut a = ParamStore::<f32>::new();
        a.insert("w", Tensor::vector(&[1.0, 2.0])).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.insert("w", Tensor::vector(&[1.0])).unwrap();
        assert!(b.load_archive_bytes(&a.to_archive_bytes()).is_err());
        let bytes = a.to_archive_bytes();
        assert!(a.load_archive_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::vector(&[1.0])).unwrap();
        assert!(s.insert("w", Tensor::vector(&[1.0])).is_err());
    }
}
