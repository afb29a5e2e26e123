//! Invariance Score of convolution kernels under a group of dihedral
//! transformations, its projection oracle, and per-layer reports.
//!
//! For a group `T` the invariant kernels form a linear subspace and the
//! closest invariant kernel to `w` is its orbit mean, so
//! `IS(w, T) = ||w − mean_t t(w)||`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::dihedral::TransformationSet;
use crate::error::{input_err, shape_err, Error, Result};
use crate::model::ModelParams;
use crate::svg;
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Distance to the orbit mean.
    #[default]
    Norm,
    /// Correlation between `w` and its orbit mean.
    Pearson,
    /// Cosine of the angle between `w` and its orbit mean.
    Cosine,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Norm => "norm",
            Metric::Pearson => "pearson",
            Metric::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "norm" => Ok(Metric::Norm),
            "pearson" => Ok(Metric::Pearson),
            "cosine" => Ok(Metric::Cosine),
            other => Err(input_err!("unknown metric {:?}", other)),
        }
    }
}

fn check_kernel(w: &Tensor) -> Result<()> {
    let s = w.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(shape_err!("kernel must be C×k×k, got {:?}", s));
    }
    Ok(())
}

pub fn invariance_score(w: &Tensor, group: &TransformationSet) -> Result<f64> {
    check_kernel(w)?;
    Ok(w.sub(&group.orbit_mean(w)?).norm())
}

/// Projection of `w` onto the invariant subspace computed from an explicit
/// orthonormal basis: one normalized orbit-sum of coordinate indicators per
/// orbit of kernel positions.
pub fn brute_force_projection(w: &Tensor, group: &TransformationSet) -> Result<Tensor> {
    check_kernel(w)?;
    if !group.is_group() {
        return Err(input_err!("projection needs a group, got {}", group));
    }
    let basis = invariant_basis(w.shape(), group)?;
    let mut p = Tensor::zeros(w.shape());
    for b in &basis {
        p.axpy(w.dot(b), b);
    }
    Ok(p)
}

/// Orthonormal basis of the kernels fixed by every element of `group`.
pub fn invariant_basis(shape: &[usize], group: &TransformationSet) -> Result<Vec<Tensor>> {
    let len: usize = shape.iter().product();
    let mut assigned = vec![false; len];
    let mut basis = Vec::new();
    for start in 0..len {
        if assigned[start] {
            continue;
        }
        let mut e = Tensor::zeros(shape);
        e.data_mut()[start] = 1.0;
        let mut orbit_sum = Tensor::zeros(shape);
        for &t in group.elements() {
            orbit_sum.axpy(1.0, &t.apply_spatial(&e)?);
        }
        // Gram–Schmidt against earlier vectors; orbits are disjoint so this
        // only guards against a non-group slipping through.
        for b in &basis {
            let c = orbit_sum.dot(b);
            orbit_sum.axpy(-c, b);
        }
        for (a, &v) in assigned.iter_mut().zip(orbit_sum.data()) {
            if v != 0.0 {
                *a = true;
            }
        }
        let n = orbit_sum.norm();
        if n > 0.0 {
            basis.push(orbit_sum.scale(1.0 / n));
        }
    }
    Ok(basis)
}

/// `None` when the metric is undefined for `w` (constant tensors for
/// Pearson, zero tensors for cosine, zero `w` for the normalized norm).
pub fn similarity_score(w: &Tensor, group: &TransformationSet, metric: Metric, normalized: bool) -> Result<Option<f64>> {
    check_kernel(w)?;
    let mean = group.orbit_mean(w)?;
    Ok(match metric {
        Metric::Norm => {
            let d = w.sub(&mean).norm();
            if normalized {
                let n = w.norm();
                (n > 0.0).then(|| d / n)
            } else {
                Some(d)
            }
        }
        Metric::Cosine => cosine(w.data(), mean.data()),
        Metric::Pearson => pearson(w.data(), mean.data()),
    })
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    (aa > 0.0 && bb > 0.0).then(|| (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let ca: Vec<f64> = a.iter().map(|x| x - ma).collect();
    let cb: Vec<f64> = b.iter().map(|x| x - mb).collect();
    let degenerate = |c: &[f64], m: f64| c.iter().all(|x| x.abs() <= 1e-14 * m.abs().max(1.0));
    if degenerate(&ca, ma) || degenerate(&cb, mb) {
        return None;
    }
    cosine(&ca, &cb)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub undefined: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(scores: &[Option<f64>]) -> Self {
        let v: Vec<f64> = scores.iter().flatten().copied().collect();
        let undefined = scores.len() - v.len();
        if v.is_empty() {
            return Self {
                count: 0,
                undefined,
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            count: v.len(),
            undefined,
            mean,
            std: var.sqrt(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerScores {
    pub layer: usize,
    /// One entry per output-channel kernel.
    pub scores: Vec<Option<f64>>,
    pub summary: Summary,
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub group: String,
    pub metric: Metric,
    pub normalized: bool,
    /// `HISTOGRAM_BINS + 1` uniform edges over `[0, max score]`.
    pub bin_edges: Vec<f64>,
    pub layers: Vec<LayerScores>,
}

/// Histogram edges shared by every layer of one report. Scores below zero
/// (Pearson and cosine can be negative) land in the first bin.
pub fn bin_edges(max: f64) -> Vec<f64> {
    let top = if max.is_finite() && max > 0.0 { max } else { 1.0 };
    (0..=HISTOGRAM_BINS)
        .map(|i| top * i as f64 / HISTOGRAM_BINS as f64)
        .collect()
}

pub fn histogram(scores: &[Option<f64>], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let mut counts = vec![0; bins];
    for &s in scores.iter().flatten() {
        let f = if hi > lo { (s - lo) / (hi - lo) } else { 0.0 };
        let b = ((f * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

pub fn layer_report(
    params: &ModelParams,
    group: &TransformationSet,
    metric: Metric,
    normalized: bool,
) -> Result<InvarianceReport> {
    if !group.is_group() {
        return Err(input_err!("invariance report needs a group, got {}", group));
    }
    let per_layer = params
        .conv_layers()
        .iter()
        .map(|l| {
            (0..l.out_channels())
                .map(|o| similarity_score(&l.kernel(o), group, metric, normalized))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let max = per_layer
        .iter()
        .flat_map(|s| s.iter().flatten().copied())
        .fold(0.0f64, f64::max);
    let edges = bin_edges(max);
    let layers = per_layer
        .into_iter()
        .enumerate()
        .map(|(layer, scores)| LayerScores {
            layer,
            summary: Summary::of(&scores),
            histogram: histogram(&scores, &edges),
            scores,
        })
        .collect();
    Ok(InvarianceReport {
        group: group.group_name(),
        metric,
        normalized,
        bin_edges: edges,
        layers,
    })
}

impl InvarianceReport {
    pub fn last_layer(&self) -> &LayerScores {
        self.layers.last().expect("reports have at least one layer")
    }

    fn metric_label(&self) -> String {
        if self.normalized {
            format!("{}-normalized", self.metric)
        } else {
            self.metric.to_string()
        }
    }

    /// `layer,kernel_index,score,metric,group`; undefined scores are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kernel_index,score,metric,group\n");
        let metric = self.metric_label();
        for l in &self.layers {
            for (k, s) in l.scores.iter().enumerate() {
                let score = s.map(|v| format!("{:.12e}", v)).unwrap_or_default();
                out.push_str(&format!("{},{},{},{},{}\n", l.layer, k, score, metric, self.group));
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("layer,count,undefined,mean,std,min,max,metric,group\n");
        let metric = self.metric_label();
        for l in &self.layers {
            let s = &l.summary;
            out.push_str(&format!(
                "{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{},{}\n",
                l.layer, s.count, s.undefined, s.mean, s.std, s.min, s.max, metric, self.group
            ));
        }
        out
    }

    pub fn layer_svg(&self, layer: usize, label: &str) -> Result<String> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| input_err!("no layer {}", layer))?;
        Ok(svg::histogram(
            &format!("layer {} kernel scores ({}, {})", layer, self.metric_label(), self.group),
            "score",
            &self.bin_edges,
            &[(label, &l.histogram)],
        ))
    }

    /// Writes `invariance.csv`, `invariance_summary.csv`, `invariance.json`
    /// and one `invariance_layer{i}.svg` per layer into `dir`.
    pub fn write(&self, dir: &Path, label: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("invariance.csv"), self.to_csv())?;
        std::fs::write(dir.join("invariance_summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("invariance.json"), serde_json::to_string_pretty(self)?)?;
        for l in &self.layers {
            std::fs::write(dir.join(format!("invariance_layer{}.svg", l.layer)), self.layer_svg(l.layer, label)?)?;
        }
        Ok(())
    }
}

/// Overlays the same layer of several reports with their bins re-cut to a
/// common range.
pub fn comparison_svg(layer: usize, reports: &[(&str, &InvarianceReport)]) -> Result<String> {
    let max = reports
        .iter()
        .filter_map(|(_, r)| r.layers.get(layer))
        .flat_map(|l| l.scores.iter().flatten().copied())
        .fold(0.0f64, f64::max);
    let edges = bin_edges(max);
    let mut counts = Vec::new();
    for (name, r) in reports {
        let l = r
            .layers
            .get(layer)
            .ok_or_else(|| input_err!("report {} has no layer {}", name, layer))?;
        counts.push((*name, histogram(&l.scores, &edges)));
    }
    let groups: Vec<(&str, &[usize])> = counts.iter().map(|(n, c)| (*n, c.as_slice())).collect();
    let metric = reports.first().map(|r| r.1.metric_label()).unwrap_or_default();
    Ok(svg::histogram(&format!("layer {} kernel scores ({})", layer, metric), "score", &edges, &groups))
}

/// Every kernel replaced by its orbit mean.
pub fn symmetrize(params: &ModelParams, group: &TransformationSet) -> Result<ModelParams> {
    let mut out = params.clone();
    for l in out.conv_layers_mut() {
        let k = l.kernel_size();
        let c = l.in_channels();
        let flat = l.kernels.data().to_vec();
        let per = c * k * k;
        for (o, dst) in l.kernels.data_mut().chunks_mut(per).enumerate() {
            let w = Tensor::new(vec![c, k, k], flat[o * per..(o + 1) * per].to_vec())?;
            dst.copy_from_slice(group.orbit_mean(&w)?.data());
        }
    }
    Ok(out)
}
