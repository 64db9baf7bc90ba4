//! Named parameter storage.

use std::collections::BTreeMap;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Array<T>,
    pub trainable: bool,
}

/// Map from dotted parameter name (`base.block0.attn.qkv.w`) to its value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, Param { value, trainable: true });
        Ok(())
    }

    /// Insert or overwrite, keeping the trainable flag of an existing entry.
    pub fn set(&mut self, name: &str, value: Array<T>) {
        match self.params.get_mut(name) {
            Some(p) => p.value = value,
            None => {
                self.params.insert(name.to_string(), Param { value, trainable: true });
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    /// Set the trainable flag of every parameter under `prefix` (e.g. `"scene."`).
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copy of the subset of parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Insert or overwrite every entry of `other`.
    pub fn merge(&mut self, other: &ParamStore<T>) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), trainable: p.trainable }))
                .collect(),
        }
    }

    /// True when every parameter under `prefix` is bit-identical in `other`.
    pub fn bit_equal_prefix(&self, other: &ParamStore<T>, prefix: &str) -> bool {
        let mine: Vec<_> = self.params.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        let theirs: Vec<_> = other.params.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits_eq(*y))
            })
    }
}

trait BitEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // integer_decode covers both widths without a separate impl per type
        self.integer_decode() == other.integer_decode() && self.is_nan() == other.is_nan()
    }
}
