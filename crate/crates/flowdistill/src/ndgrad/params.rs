//! Flat named parameter vectors.
//!
//! Networks expose their weights as one contiguous f64 vector plus a shared
//! layout (name, shape, offset per entry). Flattening and unflattening are
//! exact copies, so round trips are bit-identical, and whole-model algebra
//! (distance, blends, optimizer steps) runs on plain slices.

use super::tensor::Tensor;
use crate::{Error, Result};
use std::sync::Arc;

/// One named tensor slot in a [`ParamLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Ordered names, shapes, and offsets describing how a parameter vector is
/// partitioned into tensors.
#[derive(Debug, PartialEq)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new(named_shapes: Vec<(String, Vec<usize>)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(named_shapes.len());
        let mut offset = 0;
        for (name, shape) in named_shapes {
            if entries.iter().any(|e: &LayoutEntry| e.name == name) {
                return Err(Error::contract(
                    "ParamLayout::new",
                    format!("duplicate entry name {name:?}"),
                ));
            }
            let len: usize = shape.iter().product();
            entries.push(LayoutEntry { name, shape, offset });
            offset += len;
        }
        Ok(ParamLayout { entries, total: offset })
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Flat range `[lo, hi)` of entry `i`.
    pub fn range(&self, i: usize) -> (usize, usize) {
        let e = &self.entries[i];
        let len: usize = e.shape.iter().product();
        (e.offset, e.offset + len)
    }
}

/// A full set of model parameters as one flat vector with a shared layout.
#[derive(Clone, Debug)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    flat: Vec<f64>,
}

impl ParamVector {
    pub fn from_flat(layout: Arc<ParamLayout>, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != layout.total_len() {
            return Err(Error::contract(
                "ParamVector::from_flat",
                format!("layout expects {} values, got {}", layout.total_len(), flat.len()),
            ));
        }
        Ok(ParamVector { layout, flat })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total_len();
        ParamVector { layout, flat: vec![0.0; n] }
    }

    /// Gather named tensors into a flat vector. The tensors must match the
    /// layout's names and shapes in order.
    pub fn from_tensors(layout: Arc<ParamLayout>, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != layout.entries().len() {
            return Err(Error::contract(
                "ParamVector::from_tensors",
                format!("layout has {} entries, got {} tensors", layout.entries().len(), tensors.len()),
            ));
        }
        let mut flat = vec![0.0; layout.total_len()];
        for (i, t) in tensors.iter().enumerate() {
            let e = &layout.entries()[i];
            if t.shape() != e.shape.as_slice() {
                return Err(Error::contract(
                    "ParamVector::from_tensors",
                    format!("entry {:?} expects shape {:?}, got {:?}", e.name, e.shape, t.shape()),
                ));
            }
            let (lo, hi) = layout.range(i);
            flat[lo..hi].copy_from_slice(t.data());
        }
        Ok(ParamVector { layout, flat })
    }

    /// Split back into named tensors, in layout order. Exact inverse of
    /// [`ParamVector::from_tensors`].
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.layout
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let (lo, hi) = self.layout.range(i);
                Tensor::new(e.shape.clone(), self.flat[lo..hi].to_vec()).expect("layout shape")
            })
            .collect()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> Arc<ParamLayout> {
        Arc::clone(&self.layout)
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    /// Flat slice of entry `i`.
    pub fn slice(&self, i: usize) -> &[f64] {
        let (lo, hi) = self.layout.range(i);
        &self.flat[lo..hi]
    }

    /// Tensor view (copy) of the entry named `name`.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let i = self
            .layout
            .index_of(name)
            .ok_or_else(|| Error::contract("ParamVector::tensor", format!("no entry {name:?}")))?;
        let e = &self.layout.entries()[i];
        let (lo, hi) = self.layout.range(i);
        Tensor::new(e.shape.clone(), self.flat[lo..hi].to_vec())
    }

    fn check_same_layout(&self, other: &ParamVector, op: &'static str) -> Result<()> {
        let same = Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout;
        if !same {
            return Err(Error::contract(op, "parameter layouts differ"));
        }
        Ok(())
    }
}

/// Euclidean distance between two parameter vectors of the same layout.
pub fn param_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.check_same_layout(b, "param_distance")?;
    let s: f64 = a
        .flat
        .iter()
        .zip(&b.flat)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    Ok(s.sqrt())
}

/// Convex blend `lambda * target + (1 - lambda) * source`.
///
/// `lambda = 1` returns `target` bit-for-bit and `lambda = 0` returns
/// `source` bit-for-bit (for finite inputs), so a blend with an inert
/// coefficient cannot perturb a model.
pub fn blend_params(target: &ParamVector, source: &ParamVector, lambda: f64) -> Result<ParamVector> {
    target.check_same_layout(source, "blend_params")?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(
            "blend_params",
            format!("lambda must be in [0, 1], got {lambda}"),
        ));
    }
    if lambda == 1.0 {
        return Ok(target.clone());
    }
    if lambda == 0.0 {
        return Ok(source.clone());
    }
    let one_minus = 1.0 - lambda;
    let flat: Vec<f64> = target
        .flat
        .iter()
        .zip(&source.flat)
        .map(|(t, s)| lambda * t + one_minus * s)
        .collect();
    Ok(ParamVector { layout: target.layout_arc(), flat })
}
