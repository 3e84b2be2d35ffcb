//! Per-(query, document) value maps.
//!
//! Propensities, metric weights, regression predictions and per-document
//! rewards all share this shape: for each query, one `f64` per document,
//! indexed by the document's ordinal id. A `BTreeMap` keeps iteration order
//! deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DocId, QueryId};

/// One `f64` per document for a set of queries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocValues {
    map: BTreeMap<QueryId, Vec<f64>>,
}

impl DocValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: QueryId, values: Vec<f64>) {
        self.map.insert(query, values);
    }

    pub fn query(&self, query: QueryId) -> Option<&[f64]> {
        self.map.get(&query).map(Vec::as_slice)
    }

    pub fn get(&self, query: QueryId, doc: DocId) -> Option<f64> {
        self.map.get(&query).and_then(|v| v.get(doc.0 as usize)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (QueryId, &[f64])> {
        self.map.iter().map(|(q, v)| (*q, v.as_slice()))
    }

    pub fn queries(&self) -> impl Iterator<Item = QueryId> + '_ {
        self.map.keys().copied()
    }

    pub fn n_queries(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Apply `f` to every value, returning a new map.
    pub fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> DocValues {
        let map = self
            .map
            .iter()
            .map(|(q, v)| (*q, v.iter().map(|x| f(*x)).collect()))
            .collect();
        DocValues { map }
    }
}

impl FromIterator<(QueryId, Vec<f64>)> for DocValues {
    fn from_iter<T: IntoIterator<Item = (QueryId, Vec<f64>)>>(iter: T) -> Self {
        DocValues { map: iter.into_iter().collect() }
    }
}
