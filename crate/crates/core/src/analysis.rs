//! Classification evaluation and embedding-geometry measurements.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::data::Split;
use crate::encoders::FrozenEncoderPair;
use crate::error::{Error, Result};
use crate::prompts::PromptSet;

/// Which prompts are injected into the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PromptUse {
    pub text: bool,
    pub visual: bool,
}

impl PromptUse {
    pub const BOTH: PromptUse = PromptUse {
        text: true,
        visual: true,
    };
    pub const NONE: PromptUse = PromptUse {
        text: false,
        visual: false,
    };
}

/// Image embeddings (one per sample) and class text embeddings of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEmbeddings {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub texts: Tensor,
}

pub fn embed_split(
    encoders: &FrozenEncoderPair,
    prompts: Option<&PromptSet>,
    use_: PromptUse,
    split: &Split,
) -> Result<SplitEmbeddings> {
    let text_p = prompts.filter(|_| use_.text).map(|p| &p.text);
    let vis_p = prompts.filter(|_| use_.visual).map(|p| &p.visual);
    let texts = encoders.encode_classes(&split.classes, text_p)?;
    let images = split
        .samples
        .iter()
        .map(|s| encoders.encode_image(&s.tokens, vis_p))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitEmbeddings {
        images,
        labels: split.local_labels(),
        texts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// Predicted index into the split's class list, per sample.
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

/// Index of the largest probability of `softmax(z·Wᵀ/τ)`; first index wins
/// ties.
pub fn predict(image: &[f64], texts: &Tensor, tau: f64) -> usize {
    let logits: Vec<f64> = texts
        .rows()
        .map(|w| w.iter().zip(image).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut best = 0;
    for (i, e) in exps.iter().enumerate() {
        if e / total > exps[best] / total {
            best = i;
        }
    }
    best
}

pub fn evaluate_embeddings(emb: &SplitEmbeddings, classes: &[usize], tau: f64) -> Result<Evaluation> {
    if emb.images.is_empty() {
        return Err(Error::Contract("evaluation on an empty split".into()));
    }
    let predictions: Vec<usize> = emb.images.iter().map(|z| predict(z, &emb.texts, tau)).collect();
    let mut correct = vec![0usize; classes.len()];
    let mut total = vec![0usize; classes.len()];
    for (&p, &y) in predictions.iter().zip(&emb.labels) {
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let hits: usize = correct.iter().sum();
    let per_class = classes
        .iter()
        .enumerate()
        .map(|(i, &class)| ClassAccuracy {
            class,
            correct: correct[i],
            total: total[i],
            accuracy: if total[i] == 0 { 0.0 } else { correct[i] as f64 / total[i] as f64 },
        })
        .collect();
    Ok(Evaluation {
        accuracy: hits as f64 / predictions.len() as f64,
        per_class,
        predictions,
    })
}

/// Accuracy of cosine-similarity classification on `split` with the
/// default temperature. The temperature never changes the argmax.
pub fn evaluate(
    encoders: &FrozenEncoderPair,
    prompts: Option<&PromptSet>,
    use_: PromptUse,
    split: &Split,
) -> Result<Evaluation> {
    evaluate_with_tau(encoders, prompts, use_, split, 0.07)
}

pub fn evaluate_with_tau(
    encoders: &FrozenEncoderPair,
    prompts: Option<&PromptSet>,
    use_: PromptUse,
    split: &Split,
    tau: f64,
) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Contract("evaluation on an empty split".into()));
    }
    let emb = embed_split(encoders, prompts, use_, split)?;
    evaluate_embeddings(&emb, &split.classes, tau)
}

/// `2bn/(b+n)`, defined as 0 when both are 0.
pub fn harmonic_mean(base_acc: f64, new_acc: f64) -> f64 {
    if base_acc + new_acc == 0.0 {
        0.0
    } else {
        2.0 * base_acc * new_acc / (base_acc + new_acc)
    }
}

/// Mean and population standard deviation. Identical inputs give exactly
/// `(x, 0)`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    match values {
        [] => (f64::NAN, f64::NAN),
        [first, rest @ ..] if rest.iter().all(|v| v == first) => (*first, 0.0),
        _ => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance over all unordered pairs, `None` below 2 points.
pub fn mean_pairwise_distance(points: &[&[f64]]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            total += euclid(points[i], points[j]);
            count += 1;
        }
    }
    Some(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPdist {
    pub class: usize,
    pub pdist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdistStats {
    pub per_class: Vec<ClassPdist>,
    /// Classes with fewer than two samples.
    pub skipped: Vec<usize>,
    /// Unweighted mean of `per_class`.
    pub mean: f64,
}

/// Within-class mean pairwise distance for every label in `0..num_classes`.
pub fn pairwise_distance_stats(embeddings: &[Vec<f64>], labels: &[usize], num_classes: usize) -> PdistStats {
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for c in 0..num_classes {
        let pts: Vec<&[f64]> = embeddings
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == c)
            .map(|(e, _)| e.as_slice())
            .collect();
        match mean_pairwise_distance(&pts) {
            Some(pdist) => per_class.push(ClassPdist { class: c, pdist }),
            None => skipped.push(c),
        }
    }
    let mean = if per_class.is_empty() {
        f64::NAN
    } else {
        per_class.iter().map(|p| p.pdist).sum::<f64>() / per_class.len() as f64
    };
    PdistStats {
        per_class,
        skipped,
        mean,
    }
}

/// Mean distance over all unordered pairs of class text embeddings.
pub fn text_pdist(texts: &Tensor) -> Option<f64> {
    let rows: Vec<&[f64]> = texts.rows().collect();
    mean_pairwise_distance(&rows)
}

/// `(1 − method/baseline)·100`; positive means contraction.
pub fn delta_pdist(method: f64, baseline: f64) -> Result<f64> {
    if baseline == 0.0 || !baseline.is_finite() {
        return Err(Error::Numerical(format!("baseline pdist {baseline} is not usable")));
    }
    Ok((1.0 - method / baseline) * 100.0)
}

/// Projects rows onto the top two principal components of the whole set.
/// Each component's sign is fixed so its first nonzero entry is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n == 0 || d < 2 {
        return Err(Error::Contract("PCA needs points of dimension >= 2".into()));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            if v.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0) {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let proj = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect())
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise hull vertices by Andrew's monotone chain. Collinear
/// boundary points are dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in [pts.clone(), pts.iter().rev().copied().collect()] {
        let start = hull.len();
        for p in pass {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HullArea {
    pub class: usize,
    pub area: f64,
    pub degenerate: bool,
}

/// Area of a 2-D point set's hull; degenerate when fewer than three
/// non-collinear points remain.
pub fn hull_area(points: &[[f64; 2]]) -> (f64, bool) {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        (0.0, true)
    } else {
        (polygon_area(&hull), false)
    }
}

/// Per-class hull area in the joint 2-D PCA plane of all embeddings.
pub fn convex_hull_areas(embeddings: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Vec<HullArea>> {
    let plane = pca_2d(embeddings)?;
    Ok((0..num_classes)
        .map(|c| {
            let pts: Vec<[f64; 2]> = plane
                .iter()
                .zip(labels)
                .filter(|(_, &y)| y == c)
                .map(|(p, _)| *p)
                .collect();
            let (area, degenerate) = hull_area(&pts);
            HullArea {
                class: c,
                area,
                degenerate,
            }
        })
        .collect())
}

/// CSV with header `label,e0,…,e{d−1}`; values use the shortest decimal
/// form that parses back to the same `f64`.
pub fn embeddings_csv(labels: &[usize], rows: &[Vec<f64>]) -> String {
    let d = rows.first().map_or(0, Vec::len);
    let mut out = String::from("label");
    for j in 0..d {
        write!(out, ",e{j}").unwrap();
    }
    out.push('\n');
    for (y, row) in labels.iter().zip(rows) {
        write!(out, "{y}").unwrap();
        for v in row {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes the image embeddings of `split` with their global labels.
pub fn export_embeddings(
    encoders: &FrozenEncoderPair,
    prompts: Option<&PromptSet>,
    use_: PromptUse,
    split: &Split,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let emb = embed_split(encoders, prompts, use_, split)?;
    let labels: Vec<usize> = split.samples.iter().map(|s| s.label).collect();
    fs::write(path, embeddings_csv(&labels, &emb.images)).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_csv(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i > 0 {
            let mut fields = line.split(',');
            let bad = |what: &str| Error::Parse {
                offset,
                message: format!("bad {what} on line {}", i + 1),
            };
            let y = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("label"))?;
            let row = fields
                .map(|f| f.parse::<f64>().map_err(|_| bad("value")))
                .collect::<Result<Vec<_>>>()?;
            labels.push(y);
            rows.push(row);
        }
        offset += line.len() + 1;
    }
    Ok((labels, rows))
}

/// Serialized summary of one experiment. Field order is the JSON order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub command: String,
    pub mode: String,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_std: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_seed_accuracy: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<ClassAccuracy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harmonic_mean: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub delta_pdist_pct: Vec<ClassPdist>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_pdist_mean_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_pdist: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_pdist_zero_shot: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hull_areas: Option<Vec<HullArea>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hull_areas_zero_shot: Option<Vec<HullArea>>,
}

impl ExperimentReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
