use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named contiguous range inside a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Slice {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat array of learnable reals with named, disjoint, covering slices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterStore {
    values: Vec<f64>,
    slices: Vec<Slice>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a slice and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, values: &[f64]) -> Result<usize> {
        let name = name.into();
        if self.slices.iter().any(|s| s.name == name) {
            return Err(Error::usage(format!("duplicate parameter slice `{name}`")));
        }
        let offset = self.values.len();
        self.values.extend_from_slice(values);
        self.slices.push(Slice {
            name,
            offset,
            len: values.len(),
        });
        Ok(offset)
    }

    pub fn from_parts(values: Vec<f64>, slices: Vec<Slice>) -> Result<Self> {
        let store = Self { values, slices };
        store.validate()?;
        Ok(store)
    }

    /// Checks that slices are contiguous, disjoint and cover the array.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for s in &self.slices {
            if s.offset != expected {
                return Err(Error::usage(format!(
                    "slice `{}` starts at {} but {} was expected",
                    s.name, s.offset, expected
                )));
            }
            expected += s.len;
        }
        if expected != self.values.len() {
            return Err(Error::usage(format!(
                "slices cover {expected} of {} parameters",
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn slice(&self, name: &str) -> Option<&Slice> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.slice(name).map(|s| &self.values[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.slice(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|v| v.first().copied())
    }

    pub fn set_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        let v = self
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))?;
        v[0] = value;
        Ok(())
    }

    /// Index ranges of the named slices, in store order.
    pub fn ranges_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<Range<usize>>> {
        names
            .iter()
            .map(|n| {
                self.slice(n.as_ref())
                    .map(Slice::range)
                    .ok_or_else(|| Error::usage(format!("unknown parameter slice `{}`", n.as_ref())))
            })
            .collect()
    }
}
