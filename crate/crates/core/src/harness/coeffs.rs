//! Distribution of BN scaling coefficients `gamma / sqrt(running_var + eps)`
//! read from a CBNT stats file.
//!
//! A layer `P` contributes `P.gamma` and `P.running_var`, plus an optional
//! scalar `P.eps` (default 1e-5).

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use super::ExperimentReport;
use crate::error::{Error, Result};
use crate::io::{self, TensorMap};
use crate::ops::DEFAULT_EPS;

pub const QUANTILES: [f64; 7] = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCoefficients {
    pub layer: String,
    pub eps: f64,
    pub values: Vec<f64>,
}

/// Coefficients of every layer in `map`, in name order.
pub fn coefficients_from_map(map: &TensorMap) -> Result<Vec<LayerCoefficients>> {
    let layers: BTreeSet<&str> = map
        .keys()
        .filter_map(|k| k.strip_suffix(".gamma").or_else(|| k.strip_suffix(".running_var")))
        .collect();
    if layers.is_empty() {
        return Err(Error::Ingestion { missing: vec!["<layer>.gamma".into(), "<layer>.running_var".into()] });
    }
    let mut missing = Vec::new();
    for l in &layers {
        for suffix in ["gamma", "running_var"] {
            let name = format!("{l}.{suffix}");
            if !map.contains_key(&name) {
                missing.push(name);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Ingestion { missing });
    }
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let gamma = &map[&format!("{l}.gamma")];
        let var = &map[&format!("{l}.running_var")];
        let eps = match map.get(&format!("{l}.eps")) {
            Some(t) if t.numel() == 1 => t.data()[0],
            Some(t) => return Err(Error::Shape(format!("{l}.eps must hold one value, got {}", t.shape()))),
            None => DEFAULT_EPS,
        };
        if gamma.shape() != var.shape() {
            return Err(Error::ShapeMismatch { op: "coefficients", left: gamma.shape().clone(), right: var.shape().clone() });
        }
        let mut values = Vec::with_capacity(gamma.numel());
        for (g, v) in gamma.data().iter().zip(var.data()) {
            if !(v + eps > 0.0) {
                return Err(Error::Domain(format!("{l}: running_var + eps = {} is not positive", v + eps)));
            }
            values.push(g / (v + eps).sqrt());
        }
        out.push(LayerCoefficients { layer: l.to_string(), eps, values });
    }
    Ok(out)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    /// Pairs of `(q, value)` for [`QUANTILES`].
    pub quantiles: Vec<(f64, f64)>,
    pub counts: Vec<usize>,
}

/// Equal-width edges over `[lo, hi]`, widened by half a unit when the range
/// is empty.
pub fn bin_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

/// Histogram counts; the last bin is closed on the right.
pub fn histogram(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    let (lo, hi) = (edges[0], edges[bins]);
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

fn summarise(name: &str, values: &[f64], edges: &[f64]) -> Summary {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Summary {
        name: name.to_string(),
        count: sorted.len(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        quantiles: QUANTILES.iter().map(|&q| (q, quantile(&sorted, q))).collect(),
        counts: histogram(values, edges),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoeffsOptions {
    pub bins: usize,
    /// Histogram range; the pooled min/max when absent.
    pub range: Option<(f64, f64)>,
}

impl Default for CoeffsOptions {
    fn default() -> CoeffsOptions {
        CoeffsOptions { bins: 30, range: None }
    }
}

pub fn report_for(map: &TensorMap, opts: &CoeffsOptions) -> Result<ExperimentReport> {
    if opts.bins == 0 {
        return Err(Error::Input("at least one bin is required".into()));
    }
    let layers = coefficients_from_map(map)?;
    let pooled: Vec<f64> = layers.iter().flat_map(|l| l.values.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(Error::Input("no coefficients in stats file".into()));
    }
    let (lo, hi) = opts.range.unwrap_or_else(|| {
        pooled.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let edges = bin_edges(lo, hi, opts.bins);
    let mut report = ExperimentReport::new("coeffs", serde_json::to_value(opts).expect("plain data"));
    report.metric("edges", &edges);
    report.metric("pooled", summarise("pooled", &pooled, &edges));
    let per: Vec<Summary> = layers.iter().filter(|l| !l.values.is_empty()).map(|l| summarise(&l.layer, &l.values, &edges)).collect();
    report.metric("layers", &per);
    report.metric("coefficients", &layers);
    Ok(report)
}

pub fn run(stats: impl AsRef<Path>, opts: &CoeffsOptions) -> Result<ExperimentReport> {
    report_for(&io::read(stats)?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Tensor};

    #[test]
    fn scalar_example() {
        let mut m = TensorMap::new();
        m.insert("l.gamma".into(), Tensor::from_f64([2], vec![1.0, 2.0]).unwrap());
        m.insert("l.running_var".into(), Tensor::from_f64([2], vec![0.2, 0.2]).unwrap());
        m.insert("l.eps".into(), Tensor::scalar(DType::F64, 0.05));
        let c = coefficients_from_map(&m).unwrap();
        assert_eq!(c[0].values, vec![2.0, 4.0]);
    }

    #[test]
    fn identity_stats_are_degenerate_at_one() {
        let mut m = TensorMap::new();
        for l in ["a", "b"] {
            m.insert(format!("{l}.gamma"), Tensor::ones(DType::F64, [4]));
            m.insert(format!("{l}.running_var"), Tensor::full(DType::F64, [4], 1.0 - DEFAULT_EPS));
        }
        let r = report_for(&m, &CoeffsOptions { bins: 5, range: None }).unwrap();
        let pooled = &r.metrics["pooled"];
        assert_eq!(pooled["min"], 1.0);
        assert_eq!(pooled["max"], 1.0);
        assert_eq!(pooled["counts"], serde_json::json!([0, 0, 8, 0, 0]));
    }

    #[test]
    fn missing_partner_is_named() {
        let mut m = TensorMap::new();
        m.insert("x.gamma".into(), Tensor::ones(DType::F32, [2]));
        match coefficients_from_map(&m) {
            Err(Error::Ingestion { missing }) => assert_eq!(missing, vec!["x.running_var".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(coefficients_from_map(&TensorMap::new()), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[0.0, 1.0, 2.0, 3.0], 0.5), 1.5);
        assert_eq!(histogram(&[0.0, 0.5, 1.0], &bin_edges(0.0, 1.0, 2)), vec![1, 2]);
    }
}
