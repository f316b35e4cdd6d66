//! Named-tensor state dictionaries on top of the CKPT container.

use std::collections::HashMap;

use bridgekit_tensor::{CheckpointEntry, Scalar, Tensor};

use crate::error::{Error, Result};

/// Checkpoint contents indexed by name.
#[derive(Debug, Clone, Default)]
pub struct StateDict {
    entries: Vec<CheckpointEntry>,
    index: HashMap<String, usize>,
}

impl StateDict {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<CheckpointEntry>) -> Self {
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        Self { entries, index }
    }

    pub fn entries(&self) -> &[CheckpointEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<CheckpointEntry> {
        self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Inserts or replaces an entry.
    pub fn put<T: Scalar>(&mut self, name: impl Into<String>, dims: &[usize], values: &[T]) {
        let e = CheckpointEntry::new(name, dims, values);
        match self.index.get(&e.name) {
            Some(&i) => self.entries[i] = e,
            None => {
                self.index.insert(e.name.clone(), self.entries.len());
                self.entries.push(e);
            }
        }
    }

    pub fn put_params<T: Scalar>(&mut self, params: &[(String, Tensor<T>)]) {
        for (name, p) in params {
            self.put(name.clone(), p.shape(), &p.data());
        }
    }

    /// Integers stored as 16-bit limbs so they survive the f32 payload.
    pub fn put_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        let limbs: Vec<f32> = values
            .iter()
            .flat_map(|&v| (0..4).map(move |k| ((v >> (16 * k)) & 0xffff) as f32))
            .collect();
        self.put(name, &[values.len(), 4], &limbs);
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let e = self.require(name)?;
        if e.values.len() % 4 != 0 {
            return Err(Error::Format(format!("{name} is not a u64 limb array")));
        }
        Ok(e.values
            .chunks(4)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .fold(0u64, |acc, (k, &v)| acc | ((v as u64) << (16 * k)))
            })
            .collect())
    }

    pub fn values<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        Ok(self.require(name)?.values_as())
    }

    pub fn require(&self, name: &str) -> Result<&CheckpointEntry> {
        self.get(name)
            .ok_or_else(|| Error::MissingCheckpoint(format!("entry {name} not found")))
    }

    /// Copies stored values into `params`, checking shapes.
    pub fn load_params<T: Scalar>(&self, params: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, p) in params {
            let e = self.require(name)?;
            if e.dims != p.shape() {
                return Err(Error::DimMismatch(format!(
                    "{name}: stored {:?}, model {:?}",
                    e.dims,
                    p.shape()
                )));
            }
            *p.data_mut() = e.values_as();
        }
        Ok(())
    }
}
