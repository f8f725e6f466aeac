//! Named parameter tables.
//!
//! Parameters live outside the tape as plain arrays keyed by name; iteration
//! order is the sorted name order, which keeps reductions over the whole set
//! (e.g. global-norm clipping) deterministic.

use std::collections::BTreeMap;

use super::{Array, Real};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<R> {
    map: BTreeMap<String, Array<R>>,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, a: Array<R>) {
        assert!(self.map.insert(name.to_string(), a).is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Array<R>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<R>> {
        self.map.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Array<R> {
        self.map.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<R>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array<R>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_elements(&self) -> usize {
        self.map.values().map(|a| a.data.len()).sum()
    }

    pub fn convert<S: Real>(&self) -> ParamSet<S> {
        ParamSet { map: self.map.iter().map(|(k, v)| (k.clone(), v.map_to::<S>())).collect() }
    }

    /// Merge another set in; names must be disjoint.
    pub fn absorb(&mut self, other: ParamSet<R>) {
        for (k, v) in other.map {
            assert!(self.map.insert(k.clone(), v).is_none(), "duplicate parameter {k}");
        }
    }
}

/// Builder mirroring the usual transformer init: truncated normal weights,
/// zero biases, unit norm gains.
pub struct Init<'a> {
    pub rng: &'a mut Rng,
    pub std: f64,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut Rng) -> Self {
        Init { rng, std: 0.02 }
    }

    pub fn weight<R: Real>(&mut self, set: &mut ParamSet<R>, name: &str, rows: usize, cols: usize) {
        let data = (0..rows * cols).map(|_| R::from_f64(self.rng.trunc_normal(self.std))).collect();
        set.insert(name, Array::from_vec(rows, cols, data));
    }

    pub fn zeros<R: Real>(&mut self, set: &mut ParamSet<R>, name: &str, rows: usize, cols: usize) {
        set.insert(name, Array::zeros(rows, cols));
    }

    pub fn ones<R: Real>(&mut self, set: &mut ParamSet<R>, name: &str, cols: usize) {
        set.insert(name, Array::from_vec(1, cols, vec![R::ONE; cols]));
    }
}
