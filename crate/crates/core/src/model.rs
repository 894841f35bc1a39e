//! Layered weight containers and the vector arithmetic shared by aggregators and attacks.
//!
//! A model is an ordered list of layers, each a flat `f64` vector tagged with its
//! logical tensor shape. Weight matrices and bias vectors are separate layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logical tensor shape of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    dims: Vec<usize>,
}

impl LayerShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::structural(format!(
                "layer dims must be nonempty and positive, got {dims:?}"
            )));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    shape: LayerShape,
    values: Vec<f64>,
}

impl Layer {
    pub fn new(shape: LayerShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.size() {
            return Err(Error::structural(format!(
                "layer of shape {:?} needs {} values, got {}",
                shape.dims(),
                shape.size(),
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    /// One-dimensional layer holding `values`.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let shape = LayerShape::new(vec![values.len()])?;
        Self::new(shape, values)
    }

    pub fn shape(&self) -> &LayerShape {
        &self.shape
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
}

/// Global or local model weights: the unit exchanged between clients and server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    layers: Vec<Layer>,
}

impl ModelWeights {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Builds a model of 1-D layers, mostly for tests and small examples.
    pub fn from_vectors(layers: Vec<Vec<f64>>) -> Result<Self> {
        layers
            .into_iter()
            .map(Layer::vector)
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, index: usize) -> &Layer {
        &self.layers[index]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.values.iter().all(|v| v.is_finite()))
    }

    /// All coordinates, layer after layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.values.iter().copied())
            .collect()
    }

    /// Same shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        self.map_values(|_| 0.0)
    }

    pub(crate) fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    shape: l.shape.clone(),
                    values: l.values.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
        }
    }

    /// Checks that `other` has the same layer count and per-layer lengths.
    pub fn check_aligned(&self, other: &ModelWeights) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::structural(format!(
                "layer count mismatch: {} vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.shape != b.shape {
                return Err(Error::structural(format!(
                    "layer {i} shape mismatch: {:?} vs {:?}",
                    a.shape.dims(),
                    b.shape.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer difference between a local model and a reference global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientUpdate {
    layers: Vec<Vec<f64>>,
}

impl GradientUpdate {
    pub fn new(layers: Vec<Vec<f64>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &[f64] {
        &self.layers[index]
    }

    pub fn into_layers(self) -> Vec<Vec<f64>> {
        self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_aligned(&self, model: &ModelWeights) -> Result<()> {
        if self.layers.len() != model.num_layers() {
            return Err(Error::structural(format!(
                "update has {} layers, model has {}",
                self.layers.len(),
                model.num_layers()
            )));
        }
        for (i, (u, l)) in self.layers.iter().zip(model.layers()).enumerate() {
            if u.len() != l.len() {
                return Err(Error::structural(format!(
                    "layer {i} length mismatch: update {} vs model {}",
                    u.len(),
                    l.len()
                )));
            }
        }
        Ok(())
    }
}

/// `local − global`, layer by layer.
pub fn diff(local: &ModelWeights, global: &ModelWeights) -> Result<GradientUpdate> {
    local.check_aligned(global)?;
    let layers = local
        .layers()
        .iter()
        .zip(global.layers())
        .map(|(l, g)| l.values.iter().zip(&g.values).map(|(a, b)| a - b).collect())
        .collect();
    Ok(GradientUpdate::new(layers))
}

/// `global + update`, carrying the global model's shapes.
pub fn add_update(global: &ModelWeights, update: &GradientUpdate) -> Result<ModelWeights> {
    update.check_aligned(global)?;
    let layers = global
        .layers()
        .iter()
        .zip(update.layers())
        .map(|(g, u)| Layer {
            shape: g.shape.clone(),
            values: g.values.iter().zip(u).map(|(a, b)| a + b).collect(),
        })
        .collect();
    Ok(ModelWeights::new(layers))
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine distance `1 − cos(u, v)`, clamped to `[0, 2]`.
///
/// A zero vector has no direction: the distance is 1.0 when exactly one side is
/// zero and 0.0 when both are.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::structural(format!(
            "cosine distance on vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    let d = match (nu == 0.0, nv == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        (false, false) => 1.0 - dot(u, v) / (nu * nv),
    };
    Ok(d.clamp(0.0, 2.0))
}

/// Squared L2 distance over the concatenation of all layers.
pub fn squared_euclidean_distance(a: &ModelWeights, b: &ModelWeights) -> Result<f64> {
    a.check_aligned(b)?;
    Ok(a.layers()
        .iter()
        .zip(b.layers())
        .flat_map(|(x, y)| x.values.iter().zip(&y.values))
        .map(|(p, q)| (p - q) * (p - q))
        .sum())
}

pub fn euclidean_distance(a: &ModelWeights, b: &ModelWeights) -> Result<f64> {
    squared_euclidean_distance(a, b).map(f64::sqrt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(layers: Vec<Vec<f64>>) -> ModelWeights {
        ModelWeights::from_vectors(layers).unwrap()
    }

    #[test]
    fn diff_examples() {
        let d = diff(&m(vec![vec![1.0, 2.0]]), &m(vec![vec![1.0, 2.0]])).unwrap();
        assert_eq!(d.layers(), &[vec![0.0, 0.0]]);
        let d = diff(&m(vec![vec![3.0, 5.0]]), &m(vec![vec![1.0, 2.0]])).unwrap();
        assert_eq!(d.layers(), &[vec![2.0, 3.0]]);
    }

    #[test]
    fn diff_names_mismatching_layer() {
        let a = m(vec![vec![1.0], vec![1.0, 2.0]]);
        let b = m(vec![vec![1.0], vec![1.0]]);
        let err = diff(&a, &b).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
        assert!(diff(&a, &m(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn add_update_examples() {
        let g = m(vec![vec![1.0, 2.0]]);
        let out = add_update(&g, &GradientUpdate::new(vec![vec![0.0, 0.0]])).unwrap();
        assert_eq!(out, g);
        let out = add_update(&g, &GradientUpdate::new(vec![vec![2.0, 3.0]])).unwrap();
        assert_eq!(out.layer(0).values(), &[3.0, 5.0]);
        assert!(add_update(&g, &GradientUpdate::new(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(cosine_distance(&[1.0, 1.0], &[2.0, 2.0]).unwrap().abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(cosine_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_zero_vectors() {
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[3.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn euclidean_examples() {
        let a = m(vec![vec![0.0, 0.0]]);
        let b = m(vec![vec![3.0, 4.0]]);
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn layer_shape_rejects_bad_sizes() {
        assert!(LayerShape::new(vec![]).is_err());
        assert!(LayerShape::new(vec![3, 0]).is_err());
        assert_eq!(LayerShape::new(vec![3, 4]).unwrap().size(), 12);
        assert!(Layer::new(LayerShape::new(vec![2, 2]).unwrap(), vec![0.0; 3]).is_err());
    }

    fn model_pair() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        prop::collection::vec(1usize..6, 1..4).prop_flat_map(|lens| {
            let mk = |lens: &[usize]| {
                lens.iter()
                    .map(|&n| prop::collection::vec(-100.0f64..100.0, n))
                    .collect::<Vec<_>>()
            };
            (mk(&lens), mk(&lens))
        })
    }

    proptest! {
        #[test]
        fn diff_add_round_trip((w, g) in model_pair()) {
            let (w, g) = (m(w), m(g));
            // add_update(g, diff(w, g)) recovers w up to the rounding of (w - g) + g
            let back = add_update(&g, &diff(&w, &g).unwrap()).unwrap();
            for (x, y) in back.flatten().iter().zip(w.flatten()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
            // diff(add_update(g, d), g) recovers d
            let d = diff(&w, &g).unwrap();
            let again = diff(&add_update(&g, &d).unwrap(), &g).unwrap();
            for (x, y) in again.layers().concat().iter().zip(d.layers().concat()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn cosine_properties(u in prop::collection::vec(-10.0f64..10.0, 1..8), c in 0.01f64..100.0) {
            prop_assume!(norm(&u) > 1e-6);
            let v: Vec<f64> = u.iter().map(|x| x * c).collect();
            prop_assert!(cosine_distance(&u, &u).unwrap() < 1e-12);
            prop_assert!(cosine_distance(&u, &v).unwrap() < 1e-12);
        }

        #[test]
        fn cosine_symmetric_and_bounded(
            (u, v) in (1usize..8).prop_flat_map(|n| (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            ))
        ) {
            let a = cosine_distance(&u, &v).unwrap();
            let b = cosine_distance(&v, &u).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=2.0).contains(&a));
        }

        #[test]
        fn euclidean_metric((a, b) in model_pair(), seed in any::<u64>()) {
            let (a, b) = (m(a), m(b));
            let c = a.map_values(|x| x * 0.5 + (seed % 7) as f64);
            let ab = euclidean_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, euclidean_distance(&b, &a).unwrap());
            let ac = euclidean_distance(&a, &c).unwrap();
            let cb = euclidean_distance(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }
    }
}
