//! Diagnostics over importance maps and parameter trajectories.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{LayerId, ParamMap};

/// Where a histogram's values came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSource {
    pub method: String,
    pub task: String,
    pub layer: String,
}

/// Density-normalized histogram: `Σ densities · width = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub densities: Vec<f64>,
    pub source: HistogramSource,
}

impl Histogram {
    pub fn bin_centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.bin_edges
            .windows(2)
            .zip(&self.densities)
            .map(|(e, d)| (e[1] - e[0]) * d)
            .sum()
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Default histogram range: `[0, 99.5th percentile]` over the union of
/// all value sets. Degenerate ranges are widened to one unit around the
/// point.
pub fn auto_range(sets: &[&[f64]]) -> Result<(f64, f64)> {
    let union: Vec<f64> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    if union.is_empty() {
        return Err(Error::config("cannot choose a histogram range for no values"));
    }
    let lo = union.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = percentile(&union, 99.5);
    if hi > lo {
        Ok((lo, hi))
    } else {
        Ok((hi - 0.5, hi + 0.5))
    }
}

/// Histogram over `range` with `bins` equal-width bins; values outside
/// the range are counted in the end bins.
pub fn importance_histogram(
    values: &[f64],
    bins: usize,
    range: (f64, f64),
    source: HistogramSource,
) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::config("cannot histogram an empty map"));
    }
    if bins < 2 {
        return Err(Error::config(format!("need at least 2 bins, got {bins}")));
    }
    let (lo, hi) = range;
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(bins - 1)
        };
        counts[b] += 1;
    }
    let bin_edges = (0..=bins).map(|i| lo + width * i as f64).collect::<Vec<_>>();
    let n = values.len() as f64;
    let densities = bin_edges
        .windows(2)
        .zip(&counts)
        .map(|(e, &c)| c as f64 / (n * (e[1] - e[0])))
        .collect();
    Ok(Histogram {
        bin_edges,
        densities,
        source,
    })
}

/// Discrete Fréchet distance between two polylines under the Euclidean
/// metric (Eiter–Mannila recurrence).
pub fn discrete_frechet(p: &[(f64, f64)], q: &[(f64, f64)]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::config("Fréchet distance needs nonempty polylines"));
    }
    let dist = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1);
    let m = q.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            let d = dist(pi, qj);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Fréchet distance between the density polylines of two histograms that
/// share bin edges.
pub fn frechet_distance(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    if h1.bin_edges != h2.bin_edges {
        return Err(Error::config(
            "Fréchet distance needs histograms with identical bin edges",
        ));
    }
    let line = |h: &Histogram| -> Vec<(f64, f64)> {
        h.bin_centers()
            .into_iter()
            .zip(h.densities.iter().copied())
            .collect()
    };
    discrete_frechet(&line(h1), &line(h2))
}

/// Per-layer parameter change between two models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChange {
    pub layer: String,
    /// `|w_after − w_before|`, shaped like the layer's weight matrix.
    pub abs_change: Array2<f64>,
    /// Importance of the same weights, for side-by-side rendering.
    pub importance: Array2<f64>,
    /// `Σ_k Ω_k (Δw_k)²` over the layer's weights and biases.
    pub weighted_change: f64,
}

impl LayerChange {
    /// Spearman correlation between weight importance and `|Δw|`.
    pub fn rank_correlation(&self) -> Result<f64> {
        let imp: Vec<f64> = self.importance.iter().copied().collect();
        let change: Vec<f64> = self.abs_change.iter().copied().collect();
        spearman(&imp, &change)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeMap {
    pub layers: Vec<LayerChange>,
}

pub fn change_map(before: &ParamMap, after: &ParamMap, importance: &ParamMap) -> Result<ChangeMap> {
    before.check_congruent(after, "second parameter set")?;
    before.check_congruent(importance, "importance map")?;
    let layers = before
        .layers()
        .zip(after.layers())
        .zip(importance.layers())
        .map(|(((id, b), (_, a)), (_, o))| {
            let mut abs_change = Array2::zeros(b.weight.dim());
            let mut weighted = 0.0;
            Zip::from(&mut abs_change)
                .and(&b.weight)
                .and(&a.weight)
                .and(&o.weight)
                .for_each(|c, &b, &a, &o| {
                    let d = a - b;
                    *c = d.abs();
                    weighted += o * d * d;
                });
            Zip::from(&b.bias)
                .and(&a.bias)
                .and(&o.bias)
                .for_each(|&b, &a, &o| weighted += o * (a - b) * (a - b));
            LayerChange {
                layer: id.to_string(),
                abs_change,
                importance: o.weight.clone(),
                weighted_change: weighted,
            }
        })
        .collect();
    Ok(ChangeMap { layers })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// Spearman rank correlation with tie-averaged ranks. Returns 0 when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::config(
            "Spearman correlation needs two equal-length series of at least 2 values",
        ));
    }
    Ok(pearson(&ranks(a), &ranks(b)))
}

/// Values of one layer's weights and biases, in canonical order.
pub fn layer_values(map: &ParamMap, layer: LayerId) -> Vec<f64> {
    let d = map.layer(layer);
    d.weight.iter().chain(d.bias.iter()).copied().collect()
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    method: &'a str,
    task: &'a str,
    layer: &'a str,
    bin_left: f64,
    bin_right: f64,
    density: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

/// `method,task,layer,bin_left,bin_right,density`
pub fn write_histograms_csv(path: &Path, histograms: &[Histogram]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for h in histograms {
        for (e, &d) in h.bin_edges.windows(2).zip(&h.densities) {
            w.serialize(HistogramRow {
                method: &h.source.method,
                task: &h.source.task,
                layer: &h.source.layer,
                bin_left: e[0],
                bin_right: e[1],
                density: d,
            })
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetRow {
    pub method: String,
    pub layer: String,
    pub task_pair: String,
    pub distance: f64,
}

/// `method,layer,task_pair,distance`
pub fn write_frechet_csv(path: &Path, rows: &[FrechetRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `layer,row,col,abs_change,importance`, plus a per-layer summary file
/// `layer,weighted_change,spearman` next to it.
pub fn write_change_map_csv(path: &Path, summary_path: &Path, map: &ChangeMap) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "layer,row,col,abs_change,importance").map_err(io)?;
    for l in &map.layers {
        for ((r, c), &v) in l.abs_change.indexed_iter() {
            writeln!(out, "{},{r},{c},{v},{}", l.layer, l.importance[[r, c]]).map_err(io)?;
        }
    }
    out.flush().map_err(io)?;

    let mut w = csv_writer(summary_path)?;
    w.write_record(["layer", "weighted_change", "spearman"])
        .map_err(csv_err(summary_path))?;
    for l in &map.layers {
        let rho = l.rank_correlation().map_or(String::new(), |r| r.to_string());
        w.write_record([l.layer.as_str(), &l.weighted_change.to_string(), &rho])
            .map_err(csv_err(summary_path))?;
    }
    w.flush().map_err(|e| Error::io(summary_path, e))
}
