use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Index of one named array inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    offset: usize,
    len: usize,
}

impl ParamSpec {
    /// Inputs feeding one output unit: all but the leading dimension.
    pub fn fan_in(&self) -> usize {
        self.shape.iter().skip(1).product::<usize>().max(1)
    }

    /// Position of this array in the flat buffer.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Group the array belongs to (`theta_c1`, `theta_c2`, `theta_hstar`,
    /// `theta_h`, `theta_l`, `theta_y`).
    pub fn group(&self) -> &'static str {
        group_of(&self.name)
    }
}

pub fn group_of(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "c1" => "theta_c1",
        "c2" => "theta_c2",
        "hstar" => "theta_hstar",
        "h" => "theta_h",
        "l" => "theta_l",
        "y" => "theta_y",
        _ => "other",
    }
}

/// Collects named parameter arrays into one contiguous layout.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    offset: usize,
}

impl LayoutBuilder {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        let len = shape.iter().product();
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), kind, offset: self.offset, len });
        self.offset += len;
        ParamId(self.specs.len() - 1)
    }

    pub fn finish(self) -> Arc<Vec<ParamSpec>> {
        Arc::new(self.specs)
    }
}

/// All trainable arrays of the network in one flat buffer. Gradients use the
/// same type and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    specs: Arc<Vec<ParamSpec>>,
    values: Vec<f64>,
}

impl ParameterSet {
    pub fn zeros(specs: Arc<Vec<ParamSpec>>) -> Self {
        let n = specs.last().map_or(0, |s| s.offset + s.len);
        ParameterSet { specs, values: vec![0.0; n] }
    }

    /// Weights drawn from `N(0, std²)`, biases zero.
    pub fn gaussian(specs: Arc<Vec<ParamSpec>>, std: f64, seed: u64) -> Self {
        Self::gaussian_with(specs, seed, |_| std)
    }

    /// Weights drawn from `N(0, std(spec)²)` in layout order, biases zero.
    pub fn gaussian_with(specs: Arc<Vec<ParamSpec>>, seed: u64, std: impl Fn(&ParamSpec) -> f64) -> Self {
        let mut p = Self::zeros(specs);
        let mut rng = seeded(seed);
        for i in 0..p.specs.len() {
            if p.specs[i].kind == ParamKind::Weight {
                let normal = Normal::new(0.0, std(&p.specs[i])).expect("init std must be positive and finite");
                let (o, l) = (p.specs[i].offset, p.specs[i].len);
                for v in &mut p.values[o..o + l] {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        p
    }

    /// Rebuilds a set from raw values, rejecting NaN/Inf.
    pub fn from_values(specs: Arc<Vec<ParamSpec>>, values: Vec<f64>) -> Result<Self> {
        let n = specs.last().map_or(0, |s| s.offset + s.len);
        if values.len() != n {
            return Err(Error::shape(format!("expected {n} parameter values, got {}", values.len())));
        }
        let p = ParameterSet { specs, values };
        p.check_finite()?;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet { specs: Arc::clone(&self.specs), values: vec![0.0; self.values.len()] }
    }

    pub fn specs(&self) -> &Arc<Vec<ParamSpec>> {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        let s = &self.specs[id.0];
        &self.values[s.offset..s.offset + s.len]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = &self.specs[id.0];
        &mut self.values[s.offset..s.offset + s.len]
    }

    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.get(id))
    }

    pub fn vector_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(self.get_mut(id))
    }

    /// Views a parameter as a matrix whose rows are its first dimension.
    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let s = &self.specs[id.0];
        let rows = s.shape[0];
        ArrayView2::from_shape((rows, s.len / rows), self.get(id)).expect("contiguous parameter")
    }

    pub fn matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let s = &self.specs[id.0];
        let (rows, len) = (s.shape[0], s.len);
        ArrayViewMut2::from_shape((rows, len / rows), self.get_mut(id)).expect("contiguous parameter")
    }

    pub fn check_finite(&self) -> Result<()> {
        for s in self.specs.iter() {
            if self.values[s.offset..s.offset + s.len].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(s.name.clone()));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParameterSet) {
        debug_assert!(Arc::ptr_eq(&self.specs, &other.specs) || self.specs == other.specs);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Iterates `(spec, values)` pairs in layout order.
    pub fn named(&self) -> impl Iterator<Item = (&ParamSpec, &[f64])> + '_ {
        self.specs.iter().map(move |s| (s, &self.values[s.offset..s.offset + s.len]))
    }

    /// Positions in the flat buffer belonging to `group`.
    pub fn group_range(&self, group: &str) -> Vec<std::ops::Range<usize>> {
        self.specs
            .iter()
            .filter(|s| s.group() == group)
            .map(|s| s.offset..s.offset + s.len)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<Vec<ParamSpec>> {
        let mut b = LayoutBuilder::default();
        b.add("c1.w", &[100, 1000], ParamKind::Weight);
        b.add("c1.b", &[100], ParamKind::Bias);
        b.add("y.w", &[4, 8], ParamKind::Weight);
        b.finish()
    }

    #[test]
    fn gaussian_init_statistics() {
        let p = ParameterSet::gaussian(layout(), 0.01, 42);
        let id = p.find("c1.w").unwrap();
        let w = p.get(id);
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.0005, "std {}", var.sqrt());
        assert!(p.get(p.find("c1.b").unwrap()).iter().all(|&b| b == 0.0));
        assert_eq!(p, ParameterSet::gaussian(layout(), 0.01, 42));
        assert_ne!(p, ParameterSet::gaussian(layout(), 0.01, 43));
    }

    #[test]
    fn non_finite_rejected() {
        let p = ParameterSet::zeros(layout());
        let mut v = p.values().to_vec();
        v[7] = f64::NAN;
        assert!(matches!(ParameterSet::from_values(layout(), v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn groups_by_prefix() {
        let p = ParameterSet::zeros(layout());
        assert_eq!(p.spec(p.find("y.w").unwrap()).group(), "theta_y");
        assert_eq!(p.group_range("theta_c1"), vec![0..100_000, 100_000..100_100]);
    }
}
