//! Shared fixtures: the op catalog for gradient checks, brute-force loop
//! oracles, and small encoder/data setups.

#![allow(dead_code)]

use dapt::autodiff::{grad_check_many, Axis, Graph, Tensor, Var};
use dapt::data::{generate_dataset, sample_k_shot, Split};
use dapt::losses::{self, LossWeights, Prototypes};
use dapt::rng::SplitMix64;
use dapt::{EncoderConfig, FrozenEncoderPair, PromptSet, Result};

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-12;

pub fn tensor(shape: &[usize], rng: &mut SplitMix64, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

pub fn unit_rows(rows: usize, dim: usize, rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Contracts `y` against fixed pseudo-random weights so every output
/// coordinate carries a distinct upstream gradient.
pub fn reduce(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = SplitMix64::new(n as u64 * 31 + shape.len() as u64);
    let w: Vec<f64> = (0..n).map(|_| rng.symmetric_uniform(1.0)).collect();
    let w = g.constant_raw(shape, w)?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    /// Inputs are drawn uniformly from this interval.
    pub range: (f64, f64),
    pub f: OpFn,
}

/// Every differentiable op, each wrapped into a scalar function.
pub fn op_catalog() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], range: (-1.0, 1.0), f: |g, v| { let y = g.matmul(v[0], v[1])?; reduce(g, y) } },
        OpCase { name: "transpose", shapes: &[&[3, 4]], range: (-1.0, 1.0), f: |g, v| { let y = g.transpose(v[0])?; reduce(g, y) } },
        OpCase { name: "add", shapes: &[&[2, 3], &[2, 3]], range: (-1.0, 1.0), f: |g, v| { let y = g.add(v[0], v[1])?; let y = g.tanh(y); reduce(g, y) } },
        OpCase { name: "sub", shapes: &[&[2, 3], &[2, 3]], range: (-1.0, 1.0), f: |g, v| { let y = g.sub(v[0], v[1])?; let y = g.tanh(y); reduce(g, y) } },
        OpCase { name: "mul", shapes: &[&[2, 3], &[2, 3]], range: (-1.0, 1.0), f: |g, v| { let y = g.mul(v[0], v[1])?; reduce(g, y) } },
        OpCase { name: "mul_self", shapes: &[&[5]], range: (-1.0, 1.0), f: |g, v| { let y = g.mul(v[0], v[0])?; reduce(g, y) } },
        OpCase { name: "add_row_bias", shapes: &[&[3, 4], &[4]], range: (-1.0, 1.0), f: |g, v| { let y = g.add_row_bias(v[0], v[1])?; let y = g.tanh(y); reduce(g, y) } },
        OpCase { name: "scale", shapes: &[&[2, 3]], range: (-1.0, 1.0), f: |g, v| { let y = g.scale(v[0], -2.5); let y = g.tanh(y); reduce(g, y) } },
        OpCase { name: "neg", shapes: &[&[4]], range: (-1.0, 1.0), f: |g, v| { let y = g.neg(v[0]); let y = g.exp(y); reduce(g, y) } },
        OpCase { name: "tanh", shapes: &[&[8]], range: (-1.0, 1.0), f: |g, v| { let y = g.tanh(v[0]); reduce(g, y) } },
        OpCase { name: "exp", shapes: &[&[2, 4]], range: (-1.0, 1.0), f: |g, v| { let y = g.exp(v[0]); reduce(g, y) } },
        OpCase { name: "log", shapes: &[&[2, 4]], range: (0.5, 2.0), f: |g, v| { let y = g.log(v[0]); reduce(g, y) } },
        OpCase { name: "softmax_rows", shapes: &[&[3, 5]], range: (-2.0, 2.0), f: |g, v| { let y = g.softmax_rows(v[0])?; reduce(g, y) } },
        OpCase { name: "l2_normalize_rows", shapes: &[&[3, 4]], range: (-1.0, 1.0), f: |g, v| { let y = g.l2_normalize_rows(v[0])?; reduce(g, y) } },
        OpCase { name: "rms_normalize_rows", shapes: &[&[3, 6]], range: (-1.0, 1.0), f: |g, v| { let y = g.rms_normalize_rows(v[0])?; reduce(g, y) } },
        OpCase { name: "concat_rows", shapes: &[&[2, 3], &[1, 3], &[3]], range: (-1.0, 1.0), f: |g, v| { let y = g.concat_rows(v)?; let y = g.tanh(y); reduce(g, y) } },
        OpCase { name: "select_rows", shapes: &[&[4, 3]], range: (-1.0, 1.0), f: |g, v| { let y = g.select_rows(v[0], &[2, 0, 2])?; reduce(g, y) } },
        OpCase { name: "row", shapes: &[&[3, 4]], range: (-1.0, 1.0), f: |g, v| { let y = g.row(v[0], 1)?; let y = g.tanh(y); reduce(g, y) } },
        OpCase { name: "pick", shapes: &[&[3, 4]], range: (-1.0, 1.0), f: |g, v| { let y = g.pick(v[0], &[3, 0, 3])?; let y = g.exp(y); reduce(g, y) } },
        OpCase { name: "mean_rows", shapes: &[&[3, 4]], range: (-1.0, 1.0), f: |g, v| { let y = g.mean(v[0], Axis::Rows)?; let y = g.tanh(y); reduce(g, y) } },
        OpCase { name: "mean_cols", shapes: &[&[3, 4]], range: (-1.0, 1.0), f: |g, v| { let y = g.mean(v[0], Axis::Cols)?; let y = g.exp(y); reduce(g, y) } },
        OpCase { name: "sum", shapes: &[&[2, 3]], range: (-1.0, 1.0), f: |g, v| { let y = g.tanh(v[0]); Ok(g.sum(y)) } },
        OpCase { name: "sq_dist", shapes: &[&[2, 3], &[2, 3]], range: (-1.0, 1.0), f: |g, v| g.sq_dist(v[0], v[1]) },
    ]
}

pub fn check_op(case: &OpCase, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let points: Vec<Tensor> = case
        .shapes
        .iter()
        .map(|s| tensor(s, &mut rng, case.range.0, case.range.1))
        .collect();
    grad_check_many(case.f, &points, H)
}

/// Scalar losses with respect to raw (unnormalized) embeddings; each input
/// passes through L2 normalization first, as in the encoders.
pub struct LossCase {
    pub name: &'static str,
    pub check: fn(u64) -> Result<f64>,
}

fn normalized(g: &mut Graph, v: Var) -> Result<Var> {
    g.l2_normalize_rows(v)
}

fn labels_for(b: usize, c: usize, rng: &mut SplitMix64) -> Vec<usize> {
    // Every class present so prototypes exist.
    let mut y: Vec<usize> = (0..b).map(|i| if i < c { i } else { (rng.next() % c as u64) as usize }).collect();
    y.rotate_left((rng.next() % b as u64) as usize);
    y
}

pub fn loss_catalog() -> Vec<LossCase> {
    vec![
        LossCase {
            name: "clip",
            check: |seed| {
                let mut rng = SplitMix64::new(seed);
                let (b, c, d) = (5, 3, 4);
                let labels = labels_for(b, c, &mut rng);
                let z = tensor(&[b, d], &mut rng, -1.0, 1.0);
                let w = tensor(&[c, d], &mut rng, -1.0, 1.0);
                grad_check_many(
                    |g, v| {
                        let z = normalized(g, v[0])?;
                        let w = normalized(g, v[1])?;
                        losses::clip_loss(g, z, w, &labels, 0.5)
                    },
                    &[z, w],
                    H,
                )
            },
        },
        LossCase {
            name: "gaussian_potential",
            check: |seed| {
                let mut rng = SplitMix64::new(seed);
                let a = tensor(&[4], &mut rng, -1.0, 1.0);
                let b = tensor(&[4], &mut rng, -1.0, 1.0);
                grad_check_many(
                    |g, v| {
                        let a = normalized(g, v[0])?;
                        let b = normalized(g, v[1])?;
                        losses::gaussian_potential(g, a, b, 2.0)
                    },
                    &[a, b],
                    H,
                )
            },
        },
        LossCase {
            name: "inter_dispersion",
            check: |seed| {
                let mut rng = SplitMix64::new(seed);
                let w = tensor(&[4, 5], &mut rng, -1.0, 1.0);
                grad_check_many(
                    |g, v| {
                        let w = normalized(g, v[0])?;
                        losses::inter_dispersion_loss(g, w, 2.0)
                    },
                    &[w],
                    H,
                )
            },
        },
        LossCase {
            name: "intra_dispersion",
            check: |seed| {
                let mut rng = SplitMix64::new(seed);
                let (b, c, d) = (6, 3, 4);
                let labels = labels_for(b, c, &mut rng);
                let protos = Prototypes::from_embeddings(&unit_rows(b, d, &mut rng), &labels, c)?;
                let z = tensor(&[b, d], &mut rng, -1.0, 1.0);
                grad_check_many(
                    |g, v| {
                        let z = normalized(g, v[0])?;
                        losses::intra_dispersion_loss(g, z, &labels, &protos)
                    },
                    &[z],
                    H,
                )
            },
        },
        LossCase {
            name: "total",
            check: |seed| {
                let mut rng = SplitMix64::new(seed);
                let (b, c, d) = (5, 3, 4);
                let labels = labels_for(b, c, &mut rng);
                let protos = Prototypes::from_embeddings(&unit_rows(b, d, &mut rng), &labels, c)?;
                let z = tensor(&[b, d], &mut rng, -1.0, 1.0);
                let w = tensor(&[c, d], &mut rng, -1.0, 1.0);
                let weights = LossWeights {
                    beta_t: 0.7,
                    beta_v: 1.3,
                    kernel_scale: 2.0,
                    tau: 0.3,
                };
                grad_check_many(
                    |g, v| {
                        let z = normalized(g, v[0])?;
                        let w = normalized(g, v[1])?;
                        let clip = losses::clip_loss(g, z, w, &labels, weights.tau)?;
                        let inter = losses::inter_dispersion_loss(g, w, weights.kernel_scale)?;
                        let intra = losses::intra_dispersion_loss(g, z, &labels, &protos)?;
                        losses::total_loss(g, clip, inter, intra, &weights)
                    },
                    &[z, w],
                    H,
                )
            },
        },
    ]
}

pub fn tiny_encoder_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        d_embed: 4,
        n_blocks: 2,
        n_patches: 3,
        prompt_len: 2,
        seed,
    }
}

pub struct TinyTask {
    pub pair: FrozenEncoderPair,
    pub train: Split,
    pub test: Split,
    pub config: EncoderConfig,
}

pub fn tiny_task(seed: u64, classes: usize, shots: usize) -> TinyTask {
    let config = tiny_encoder_config(seed);
    let data = generate_dataset(classes, config.n_patches, config.d_model, shots + 2, 0.5, seed + 100).unwrap();
    let (train, test) = sample_k_shot(&data, shots, seed + 200).unwrap();
    let pair = FrozenEncoderPair::build(config, classes).unwrap();
    TinyTask {
        pair,
        train,
        test,
        config,
    }
}

/// Full objective against both prompts, through both encoders.
pub fn check_end_to_end(seed: u64) -> Result<f64> {
    let task = tiny_task(seed, 3, 2);
    let items = task.train.items();
    let protos = Prototypes::compute(&task.pair, &items, task.train.classes.len(), None)?;
    let labels = task.train.local_labels();
    let tokens = task.train.tokens();
    let prompts = PromptSet::init_with_std(&task.config, seed + 300, 0.3);
    let weights = LossWeights {
        tau: 0.2,
        ..LossWeights::default()
    };
    let classes = task.train.classes.clone();
    grad_check_many(
        |g, p| {
            let enc = task.pair.bind(g);
            let w = enc.encode_classes(g, &classes, Some(p[0]))?;
            let z = enc.encode_images(g, &tokens, Some(p[1]))?;
            let clip = losses::clip_loss(g, z, w, &labels, weights.tau)?;
            let inter = losses::inter_dispersion_loss(g, w, weights.kernel_scale)?;
            let intra = losses::intra_dispersion_loss(g, z, &labels, &protos)?;
            losses::total_loss(g, clip, inter, intra, &weights)
        },
        &[prompts.text, prompts.visual],
        H,
    )
}

pub mod oracle {
    //! Straight loops over plain vectors, sharing no code with the library.

    pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..a.len() {
            s += (a[k] - b[k]) * (a[k] - b[k]);
        }
        s
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..a.len() {
            s += a[k] * b[k];
        }
        s
    }

    pub fn inter(texts: &[Vec<f64>], t: f64) -> f64 {
        let mut s = 0.0;
        for m in 0..texts.len() {
            for n in 0..texts.len() {
                if m != n {
                    s += (-t * sqdist(&texts[m], &texts[n])).exp();
                }
            }
        }
        s
    }

    pub fn prototypes(emb: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
        let d = emb[0].len();
        let mut out = vec![vec![0.0; d]; classes];
        let mut counts = vec![0.0; classes];
        for i in 0..emb.len() {
            counts[labels[i]] += 1.0;
            for k in 0..d {
                out[labels[i]][k] += emb[i][k];
            }
        }
        for (row, n) in out.iter_mut().zip(&counts) {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        out
    }

    pub fn intra(emb: &[Vec<f64>], labels: &[usize], protos: &[Vec<f64>]) -> f64 {
        let mut s = 0.0;
        for i in 0..emb.len() {
            s += sqdist(&emb[i], &protos[labels[i]]);
        }
        s
    }

    pub fn clip(images: &[Vec<f64>], texts: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..images.len() {
            let logits: Vec<f64> = texts.iter().map(|w| dot(&images[i], w) / tau).collect();
            let mut max = f64::NEG_INFINITY;
            for &l in &logits {
                if l > max {
                    max = l;
                }
            }
            let mut z = 0.0;
            for &l in &logits {
                z += (l - max).exp();
            }
            total += -(logits[labels[i]] - max - z.ln());
        }
        total / images.len() as f64
    }

    /// Per-class mean pairwise distance, `None` for classes with < 2 points.
    pub fn pdist(emb: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Option<f64>> {
        (0..classes)
            .map(|c| {
                let mut sum = 0.0;
                let mut n = 0;
                for i in 0..emb.len() {
                    for j in 0..emb.len() {
                        if i < j && labels[i] == c && labels[j] == c {
                            sum += sqdist(&emb[i], &emb[j]).sqrt();
                            n += 1;
                        }
                    }
                }
                (n > 0).then(|| sum / n as f64)
            })
            .collect()
    }

    /// Index of the most similar text row; earliest wins ties.
    pub fn argmax_cos(image: &[f64], texts: &[Vec<f64>]) -> usize {
        let mut best = 0;
        for j in 1..texts.len() {
            if dot(image, &texts[j]) > dot(image, &texts[best]) {
                best = j;
            }
        }
        best
    }

    /// Hull area from supporting edges: a pair (i, j) is a hull edge when
    /// every other point lies on its left or on the segment. The hull
    /// vertices are then ordered by angle around their centroid.
    pub fn hull_area(points: &[[f64; 2]]) -> f64 {
        let mut verts: Vec<[f64; 2]> = Vec::new();
        for i in 0..points.len() {
            for j in 0..points.len() {
                if points[i] == points[j] {
                    continue;
                }
                let (a, b) = (points[i], points[j]);
                let supporting = points.iter().all(|p| {
                    let cr = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                    cr > 0.0 || (cr == 0.0 && between(a, b, *p))
                });
                if supporting {
                    for v in [a, b] {
                        if !verts.contains(&v) {
                            verts.push(v);
                        }
                    }
                }
            }
        }
        if verts.len() < 3 {
            return 0.0;
        }
        let cx = verts.iter().map(|v| v[0]).sum::<f64>() / verts.len() as f64;
        let cy = verts.iter().map(|v| v[1]).sum::<f64>() / verts.len() as f64;
        verts.sort_by(|p, q| {
            let ap = (p[1] - cy).atan2(p[0] - cx);
            let aq = (q[1] - cy).atan2(q[0] - cx);
            ap.partial_cmp(&aq).unwrap()
        });
        let mut twice = 0.0;
        for k in 0..verts.len() {
            let (p, q) = (verts[k], verts[(k + 1) % verts.len()]);
            twice += p[0] * q[1] - q[0] * p[1];
        }
        twice.abs() / 2.0
    }

    fn between(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
        p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
    }
}

/// Random small classification instance: `C ≤ 6`, `B ≤ 8`, unit rows.
pub struct Instance {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = SplitMix64::new(seed);
    let classes = 2 + (rng.next() % 5) as usize;
    let batch = 1 + (rng.next() % 8) as usize;
    let dim = 2 + (rng.next() % 5) as usize;
    let labels = (0..batch).map(|_| (rng.next() % classes as u64) as usize).collect();
    Instance {
        images: unit_rows(batch, dim, &mut rng),
        texts: unit_rows(classes, dim, &mut rng),
        labels,
        classes,
    }
}
