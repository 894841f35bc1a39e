//! Server-side aggregation rules: the layered clustering-and-median defense and
//! the FedAvg / coordinate-median / Krum / Median-Krum baselines.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    agglomerative_two_clusters, label_clusters, pairwise_cosine_matrix, ClusterVerdict, Linkage,
};
use crate::error::{Error, Result};
use crate::model::{diff, squared_euclidean_distance, Layer, ModelWeights};

/// Which aggregation rule the server applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregatorKind {
    Celtibero { linkage: Linkage },
    FedAvg,
    CoordMedian,
    /// `f` is the tolerated byzantine count; `None` picks the largest `f` with `n ≥ 2f + 3`.
    Krum { f: Option<usize> },
    MedianKrum { f: Option<usize> },
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregatorKind::Celtibero { linkage } => write!(f, "celtibero({linkage})"),
            AggregatorKind::FedAvg => f.write_str("fedavg"),
            AggregatorKind::CoordMedian => f.write_str("coord_median"),
            AggregatorKind::Krum { .. } => f.write_str("krum"),
            AggregatorKind::MedianKrum { .. } => f.write_str("median_krum"),
        }
    }
}

/// New global model plus, for the layered defense, one verdict per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub model: ModelWeights,
    pub verdicts: Vec<ClusterVerdict>,
}

impl AggregatorKind {
    pub fn aggregate(&self, global: &ModelWeights, locals: &[ModelWeights]) -> Result<Aggregation> {
        let plain = |model| Aggregation {
            model,
            verdicts: Vec::new(),
        };
        for local in locals {
            global.check_aligned(local)?;
        }
        match *self {
            AggregatorKind::Celtibero { linkage } => celtibero_aggregate(global, locals, linkage),
            AggregatorKind::FedAvg => fedavg(locals).map(plain),
            AggregatorKind::CoordMedian => coordinate_median(locals).map(plain),
            AggregatorKind::Krum { f } => krum(locals, resolve_f(f, locals.len())?).map(plain),
            AggregatorKind::MedianKrum { f } => {
                median_krum(locals, resolve_f(f, locals.len())?).map(plain)
            }
        }
    }
}

fn resolve_f(f: Option<usize>, n: usize) -> Result<usize> {
    match f {
        Some(f) => Ok(f),
        None if n >= 3 => Ok((n - 3) / 2),
        None => Err(Error::usage(format!(
            "krum needs at least 3 models, got {n}"
        ))),
    }
}

fn check_same_shapes(locals: &[ModelWeights]) -> Result<()> {
    let Some(first) = locals.first() else {
        return Err(Error::usage("aggregation over an empty list of models"));
    };
    locals[1..].iter().try_for_each(|m| first.check_aligned(m))
}

/// Median of a slice, reordering it. Even lengths give the midpoint of the two central values.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Coordinate-wise median of equally long vectors.
fn median_of_vectors<V: AsRef<[f64]>>(vectors: &[V]) -> Vec<f64> {
    let len = vectors[0].as_ref().len();
    let mut column = vec![0.0; vectors.len()];
    (0..len)
        .map(|c| {
            for (slot, v) in column.iter_mut().zip(vectors) {
                *slot = v.as_ref()[c];
            }
            median_in_place(&mut column)
        })
        .collect()
}

/// Per-layer: cluster the clients' deltas into two groups by cosine distance,
/// drop the group with the lower size-times-density score, and move the global
/// layer by the coordinate-wise median of the remaining deltas.
pub fn celtibero_aggregate(
    global: &ModelWeights,
    locals: &[ModelWeights],
    linkage: Linkage,
) -> Result<Aggregation> {
    if locals.len() < 2 {
        return Err(Error::usage(format!(
            "layered aggregation needs at least 2 local models, got {}",
            locals.len()
        )));
    }
    let deltas = locals
        .iter()
        .map(|l| diff(l, global))
        .collect::<Result<Vec<_>>>()?;

    let per_layer: Vec<(Layer, ClusterVerdict)> = (0..global.num_layers())
        .into_par_iter()
        .map(|l| {
            let layer_deltas: Vec<&[f64]> = deltas.iter().map(|d| d.layer(l)).collect();
            let dist = pairwise_cosine_matrix(&layer_deltas)?;
            let clusters = agglomerative_two_clusters(&dist, linkage)?;
            let verdict = label_clusters(&dist, &clusters)?;
            let benign: Vec<&[f64]> = verdict.benign.iter().map(|&i| layer_deltas[i]).collect();
            let step = median_of_vectors(&benign);
            let g = global.layer(l);
            let values = g.values().iter().zip(&step).map(|(w, s)| w + s).collect();
            Ok((Layer::new(g.shape().clone(), values)?, verdict))
        })
        .collect::<Result<_>>()?;

    let (layers, verdicts) = per_layer.into_iter().unzip();
    Ok(Aggregation {
        model: ModelWeights::new(layers),
        verdicts,
    })
}

/// Coordinate-wise arithmetic mean.
pub fn fedavg(locals: &[ModelWeights]) -> Result<ModelWeights> {
    check_same_shapes(locals)?;
    let n = locals.len() as f64;
    let mut out = locals[0].zeros_like();
    for local in locals {
        for (o, l) in out.layers_mut().iter_mut().zip(local.layers()) {
            for (acc, v) in o.values_mut().iter_mut().zip(l.values()) {
                *acc += v;
            }
        }
    }
    for layer in out.layers_mut() {
        for v in layer.values_mut() {
            *v /= n;
        }
    }
    Ok(out)
}

/// Coordinate-wise median; even counts take the midpoint of the central pair.
pub fn coordinate_median(locals: &[ModelWeights]) -> Result<ModelWeights> {
    check_same_shapes(locals)?;
    let layers = (0..locals[0].num_layers())
        .map(|l| {
            let column: Vec<&[f64]> = locals.iter().map(|m| m.layer(l).values()).collect();
            Layer::new(locals[0].layer(l).shape().clone(), median_of_vectors(&column))
        })
        .collect::<Result<_>>()?;
    Ok(ModelWeights::new(layers))
}

/// Krum score of every model: sum of squared distances to its `n − f − 2` nearest others.
pub fn krum_scores(locals: &[ModelWeights], f: usize) -> Result<Vec<f64>> {
    check_same_shapes(locals)?;
    let n = locals.len();
    if n < 2 * f + 3 {
        return Err(Error::usage(format!(
            "krum with f = {f} needs at least {} models, got {n}",
            2 * f + 3
        )));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_euclidean_distance(&locals[i], &locals[j])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let neighbours = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            row.sort_unstable_by(f64::total_cmp);
            row[..neighbours].iter().sum()
        })
        .collect())
}

/// Indices sorted by ascending score, ties by index.
fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// The single local model with the lowest Krum score.
pub fn krum(locals: &[ModelWeights], f: usize) -> Result<ModelWeights> {
    let scores = krum_scores(locals, f)?;
    Ok(locals[rank_by_score(&scores)[0]].clone())
}

/// Coordinate-wise median over the `n − f` models with the lowest Krum scores.
pub fn median_krum(locals: &[ModelWeights], f: usize) -> Result<ModelWeights> {
    let scores = krum_scores(locals, f)?;
    let keep = locals.len() - f;
    let chosen: Vec<ModelWeights> = rank_by_score(&scores)[..keep]
        .iter()
        .map(|&i| locals[i].clone())
        .collect();
    coordinate_median(&chosen)
}
