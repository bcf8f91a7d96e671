//! The distribution-aware objective:
//!
//! ```text
//! L = L_clip + β_t · L_inter + β_v · L_intra
//! L_clip  = −(1/B) Σᵢ log softmax(zᵢ·Wᵀ / τ)[yᵢ]
//! L_inter = Σ_{m≠n} exp(−t ‖w_m − w_n‖²)        (ordered pairs)
//! L_intra = Σᵢ ‖zᵢ − s_{yᵢ}‖²                    (summed over the batch)
//! ```
//!
//! `s_c` is the mean of the unprompted image embeddings of class `c`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoders::FrozenEncoderPair;
use crate::error::{Error, Result};

/// Allowed deviation of an embedding norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta_t: f64,
    pub beta_v: f64,
    pub kernel_scale: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_t: 1.0,
            beta_v: 1.0,
            kernel_scale: 2.0,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite();
        if !(ok(self.kernel_scale) && self.kernel_scale > 0.0) {
            return Err(Error::Config(format!("kernel_scale must be > 0, got {}", self.kernel_scale)));
        }
        if !(ok(self.tau) && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(ok(self.beta_t) && self.beta_t >= 0.0) {
            return Err(Error::Config(format!("beta_t must be >= 0, got {}", self.beta_t)));
        }
        if !(ok(self.beta_v) && self.beta_v >= 0.0) {
            return Err(Error::Config(format!("beta_v must be >= 0, got {}", self.beta_v)));
        }
        Ok(())
    }
}

fn check_unit_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    let c = *g.shape(v).last().unwrap_or(&1);
    for (i, row) in g.value(v).chunks(c).enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

fn rows_of(g: &Graph, v: Var) -> usize {
    match g.shape(v) {
        [r, _] => *r,
        _ => 1,
    }
}

/// Image-to-text cross-entropy over temperature-scaled cosine similarities.
pub fn clip_loss(g: &mut Graph, image_emb: Var, text_emb: Var, labels: &[usize], tau: f64) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Contract("clip_loss on an empty batch".into()));
    }
    if labels.len() != rows_of(g, image_emb) {
        return Err(Error::Dimension {
            op: "clip_loss",
            lhs: g.shape(image_emb).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    check_unit_rows(g, image_emb, "image embedding")?;
    check_unit_rows(g, text_emb, "text embedding")?;
    let classes = rows_of(g, text_emb);
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index {
            what: "label",
            index: bad,
            len: classes,
        });
    }
    let wt = g.transpose(text_emb)?;
    let cos = g.matmul(image_emb, wt)?;
    let logits = g.scale(cos, 1.0 / tau);
    let probs = g.softmax_rows(logits)?;
    let logp = g.log(probs);
    let picked = g.pick(logp, labels)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / labels.len() as f64))
}

/// `exp(−t ‖a − b‖²)` for two unit vectors.
pub fn gaussian_potential(g: &mut Graph, a: Var, b: Var, kernel_scale: f64) -> Result<Var> {
    check_unit_rows(g, a, "kernel input")?;
    check_unit_rows(g, b, "kernel input")?;
    let d = g.sq_dist(a, b)?;
    let scaled = g.scale(d, -kernel_scale);
    Ok(g.exp(scaled))
}

/// Sum of Gaussian potentials over all ordered pairs of distinct rows.
pub fn inter_dispersion_loss(g: &mut Graph, text_emb: Var, kernel_scale: f64) -> Result<Var> {
    let c = rows_of(g, text_emb);
    if c < 2 {
        return Err(Error::Contract(format!("inter-dispersion needs >= 2 classes, got {c}")));
    }
    check_unit_rows(g, text_emb, "text embedding")?;
    let rows: Vec<Var> = (0..c).map(|i| g.row(text_emb, i)).collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(c * (c - 1));
    for m in 0..c {
        for n in 0..c {
            if m != n {
                let d = g.sq_dist(rows[m], rows[n])?;
                let s = g.scale(d, -kernel_scale);
                terms.push(g.exp(s));
            }
        }
    }
    let stacked = g.concat_rows(&terms)?;
    Ok(g.sum(stacked))
}

/// Per-class prototypes `s_c`, detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub rows: Tensor,
    pub counts: Vec<usize>,
}

impl Prototypes {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Mean of `embeddings` per label. Every label in `0..num_classes` must
    /// occur at least once.
    pub fn from_embeddings(embeddings: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        let dim = embeddings.first().map_or(0, Vec::len);
        if dim == 0 || embeddings.len() != labels.len() {
            return Err(Error::Contract("prototype inputs are empty or misaligned".into()));
        }
        let mut sums = vec![0.0; num_classes * dim];
        let mut counts = vec![0usize; num_classes];
        for (e, &y) in embeddings.iter().zip(labels) {
            if y >= num_classes {
                return Err(Error::Index {
                    what: "label",
                    index: y,
                    len: num_classes,
                });
            }
            counts[y] += 1;
            sums[y * dim..(y + 1) * dim]
                .iter_mut()
                .zip(e)
                .for_each(|(s, x)| *s += x);
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Dataset(format!("class {c} has no training samples")));
        }
        for (row, &n) in sums.chunks_mut(dim).zip(&counts) {
            row.iter_mut().for_each(|s| *s /= n as f64);
        }
        Ok(Self {
            rows: Tensor::new(vec![num_classes, dim], sums)?,
            counts,
        })
    }

    /// Prototypes from the unprompted image embeddings of `samples`
    /// (`(tokens, label)` pairs). `visual_prompt` is only used by the
    /// prompted-refresh variant.
    pub fn compute(
        pair: &FrozenEncoderPair,
        samples: &[(&Tensor, usize)],
        num_classes: usize,
        visual_prompt: Option<&Tensor>,
    ) -> Result<Self> {
        let embeddings = samples
            .iter()
            .map(|(t, _)| pair.encode_image(t, visual_prompt))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = samples.iter().map(|(_, y)| *y).collect();
        Self::from_embeddings(&embeddings, &labels, num_classes)
    }

    /// Rescales every prototype to unit norm.
    pub fn renormalized(mut self) -> Self {
        let (_, c) = self.rows.dims2();
        for row in self.rows.values_mut().chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        self
    }
}

/// `Σᵢ ‖zᵢ − s_{yᵢ}‖²` over the batch.
pub fn intra_dispersion_loss(g: &mut Graph, image_emb: Var, labels: &[usize], prototypes: &Prototypes) -> Result<Var> {
    if labels.len() != rows_of(g, image_emb) {
        return Err(Error::Dimension {
            op: "intra_dispersion_loss",
            lhs: g.shape(image_emb).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (_, dim) = prototypes.rows.dims2();
    let mut targets = Vec::with_capacity(labels.len() * dim);
    for &y in labels {
        if y >= prototypes.num_classes() {
            return Err(Error::Index {
                what: "prototype",
                index: y,
                len: prototypes.num_classes(),
            });
        }
        targets.extend_from_slice(prototypes.rows.row(y));
    }
    let s = g.constant_raw(g.shape(image_emb).to_vec(), targets)?;
    g.sq_dist(image_emb, s)
}

/// `clip + β_t · inter + β_v · intra`; every component must be finite.
pub fn total_loss(g: &mut Graph, clip: Var, inter: Var, intra: Var, weights: &LossWeights) -> Result<Var> {
    for (name, v) in [("l_clip", clip), ("l_inter", inter), ("l_intra", intra)] {
        if !g.scalar(v).is_finite() {
            return Err(Error::Numerical(format!("{name} is {}", g.scalar(v))));
        }
    }
    let a = g.scale(inter, weights.beta_t);
    let b = g.scale(intra, weights.beta_v);
    let ab = g.add(a, b)?;
    g.add(clip, ab)
}
