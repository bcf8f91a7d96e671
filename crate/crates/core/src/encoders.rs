//! Frozen mini dual encoders with prompt-injection slots.
//!
//! Both towers share one architecture: `n_blocks` pre-norm blocks of
//! single-head self-attention followed by a tanh MLP, then a linear
//! projection to the joint space and L2 normalization.
//!
//! Image sequences are `[CLS, u₁..u_L, E₁..E_P]` and read out at position 0.
//! Text sequences are `[v₁..v_L, e_c]` and read out at the last position, the
//! class token. Without a prompt the sequences are `[CLS, E]` and `[e_c]`.
//! No positional embeddings are added.
//!
//! # Weight generation order
//!
//! Every weight is an independent Gaussian draw with standard deviation
//! `1/√d_model` from [`SplitMix64::new(seed)`](crate::rng::SplitMix64),
//! filled row-major in this order:
//!
//! 1. image blocks, each as `wq, wk, wv, wo` (`d×d`), `w1` (`d×2d`),
//!    `w2` (`2d×d`)
//! 2. image projection (`d×d_embed`)
//! 3. `cls_token` (`d`)
//! 4. text blocks, same layout as the image blocks
//! 5. text projection (`d×d_embed`)
//! 6. `class_table` (`C×d`)
//!
//! Biases `b1` (`2d`) and `b2` (`d`) are zero and draw nothing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub d_embed: usize,
    pub n_blocks: usize,
    pub n_patches: usize,
    pub prompt_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_embed: 16,
            n_blocks: 2,
            n_patches: 8,
            prompt_len: 16,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_embed", self.d_embed),
            ("n_blocks", self.n_blocks),
            ("n_patches", self.n_patches),
            ("prompt_len", self.prompt_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_embed > self.d_model {
            return Err(Error::Config(format!(
                "d_embed ({}) must not exceed d_model ({})",
                self.d_embed, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockWeights {
    fn generate(rng: &mut SplitMix64, d: usize, std: f64) -> Self {
        let mut mat = |r: usize, c: usize| gaussian_tensor(rng, vec![r, c], std);
        let wq = mat(d, d);
        let wk = mat(d, d);
        let wv = mat(d, d);
        let wo = mat(d, d);
        let w1 = mat(d, 2 * d);
        let w2 = mat(2 * d, d);
        Self {
            wq,
            wk,
            wv,
            wo,
            w1,
            b1: Tensor::zeros(vec![2 * d]),
            w2,
            b2: Tensor::zeros(vec![d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub blocks: Vec<BlockWeights>,
    pub projection: Tensor,
}

impl Tower {
    fn generate(rng: &mut SplitMix64, cfg: &EncoderConfig, std: f64) -> Self {
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights::generate(rng, cfg.d_model, std))
            .collect();
        let projection = gaussian_tensor(rng, vec![cfg.d_model, cfg.d_embed], std);
        Self { blocks, projection }
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.blocks
            .iter()
            .flat_map(|b| b.tensors())
            .chain(std::iter::once(&self.projection))
    }
}

fn gaussian_tensor(rng: &mut SplitMix64, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.gaussian_vec(n, std)).expect("shape matches draw count")
}

/// Immutable image encoder `f` and text encoder `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoderPair {
    config: EncoderConfig,
    num_classes: usize,
    pub image: Tower,
    pub text: Tower,
    pub cls_token: Tensor,
    pub class_table: Tensor,
}

impl FrozenEncoderPair {
    pub fn build(config: EncoderConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let d = config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = SplitMix64::new(config.seed);
        let image = Tower::generate(&mut rng, &config, std);
        let cls_token = gaussian_tensor(&mut rng, vec![d], std);
        let text = Tower::generate(&mut rng, &config, std);
        let class_table = gaussian_tensor(&mut rng, vec![num_classes, d], std);
        Ok(Self {
            config,
            num_classes,
            image,
            text,
            cls_token,
            class_table,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// All frozen tensors in generation order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.image.tensors().collect();
        out.push(&self.cls_token);
        out.extend(self.text.tensors());
        out.push(&self.class_table);
        out
    }

    /// FNV-1a over the little-endian bytes of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.values() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        h
    }

    /// Registers every frozen weight as a constant of `g`, once.
    pub fn bind<'p>(&'p self, g: &mut Graph) -> BoundEncoders<'p> {
        BoundEncoders {
            pair: self,
            image: BoundTower::new(g, &self.image),
            text: BoundTower::new(g, &self.text),
            cls: g.constant(&self.cls_token),
            class_table: g.constant(&self.class_table),
        }
    }

    /// Unit image embedding on a private graph, detached.
    pub fn encode_image(&self, tokens: &Tensor, visual_prompt: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let enc = self.bind(&mut g);
        let x = g.constant(tokens);
        let p = visual_prompt.map(|p| g.constant(p));
        let z = enc.encode_image(&mut g, x, p)?;
        Ok(g.value(z).to_vec())
    }

    /// Unit text embedding of one class on a private graph, detached.
    pub fn encode_text(&self, class_index: usize, text_prompt: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let enc = self.bind(&mut g);
        let p = text_prompt.map(|p| g.constant(p));
        let w = enc.encode_text(&mut g, class_index, p)?;
        Ok(g.value(w).to_vec())
    }

    /// Text embeddings for `classes`, one row each.
    pub fn encode_classes(&self, classes: &[usize], text_prompt: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = self.bind(&mut g);
        let p = text_prompt.map(|p| g.constant(p));
        let w = enc.encode_classes(&mut g, classes, p)?;
        Ok(g.tensor(w))
    }
}

struct BoundBlock {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct BoundTower {
    blocks: Vec<BoundBlock>,
    projection: Var,
}

impl BoundTower {
    fn new(g: &mut Graph, tower: &Tower) -> Self {
        let blocks = tower
            .blocks
            .iter()
            .map(|b| BoundBlock {
                wq: g.constant(&b.wq),
                wk: g.constant(&b.wk),
                wv: g.constant(&b.wv),
                wo: g.constant(&b.wo),
                w1: g.constant(&b.w1),
                b1: g.constant(&b.b1),
                w2: g.constant(&b.w2),
                b2: g.constant(&b.b2),
            })
            .collect();
        Self {
            blocks,
            projection: g.constant(&tower.projection),
        }
    }

    fn forward(&self, g: &mut Graph, mut x: Var, d_model: usize) -> Result<Var> {
        let inv_sqrt_d = 1.0 / (d_model as f64).sqrt();
        for b in &self.blocks {
            let h = g.rms_normalize_rows(x)?;
            let q = g.matmul(h, b.wq)?;
            let k = g.matmul(h, b.wk)?;
            let v = g.matmul(h, b.wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv_sqrt_d);
            let attn = g.softmax_rows(scores)?;
            let mixed = g.matmul(attn, v)?;
            let out = g.matmul(mixed, b.wo)?;
            x = g.add(x, out)?;

            let h = g.rms_normalize_rows(x)?;
            let m = g.matmul(h, b.w1)?;
            let m = g.add_row_bias(m, b.b1)?;
            let m = g.tanh(m);
            let m = g.matmul(m, b.w2)?;
            let m = g.add_row_bias(m, b.b2)?;
            x = g.add(x, m)?;
        }
        Ok(x)
    }

    fn readout(&self, g: &mut Graph, x: Var, position: usize) -> Result<Var> {
        let r = g.row(x, position)?;
        let e = g.matmul(r, self.projection)?;
        g.l2_normalize_rows(e)
    }
}

/// Frozen weights registered on one graph.
pub struct BoundEncoders<'p> {
    pair: &'p FrozenEncoderPair,
    image: BoundTower,
    text: BoundTower,
    cls: Var,
    class_table: Var,
}

impl BoundEncoders<'_> {
    fn check_prompt(&self, g: &Graph, prompt: Option<Var>, op: &'static str) -> Result<()> {
        let cfg = &self.pair.config;
        if let Some(p) = prompt {
            let want = [cfg.prompt_len, cfg.d_model];
            if g.shape(p) != want {
                return Err(Error::Dimension {
                    op,
                    lhs: want.to_vec(),
                    rhs: g.shape(p).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `1 × d_embed` unit image embedding of a `P × d_model` token block.
    pub fn encode_image(&self, g: &mut Graph, tokens: Var, visual_prompt: Option<Var>) -> Result<Var> {
        let cfg = &self.pair.config;
        let want = [cfg.n_patches, cfg.d_model];
        if g.shape(tokens) != want {
            return Err(Error::Dimension {
                op: "encode_image",
                lhs: want.to_vec(),
                rhs: g.shape(tokens).to_vec(),
            });
        }
        self.check_prompt(g, visual_prompt, "encode_image")?;
        let mut parts = vec![self.cls];
        parts.extend(visual_prompt);
        parts.push(tokens);
        let seq = g.concat_rows(&parts)?;
        let out = self.image.forward(g, seq, cfg.d_model)?;
        self.image.readout(g, out, 0)
    }

    /// `1 × d_embed` unit text embedding of class `class_index`.
    pub fn encode_text(&self, g: &mut Graph, class_index: usize, text_prompt: Option<Var>) -> Result<Var> {
        let cfg = &self.pair.config;
        if class_index >= self.pair.num_classes {
            return Err(Error::Index {
                what: "class",
                index: class_index,
                len: self.pair.num_classes,
            });
        }
        self.check_prompt(g, text_prompt, "encode_text")?;
        let class_token = g.row(self.class_table, class_index)?;
        let seq = match text_prompt {
            Some(p) => g.concat_rows(&[p, class_token])?,
            None => class_token,
        };
        let len = g.shape(seq)[0];
        let out = self.text.forward(g, seq, cfg.d_model)?;
        self.text.readout(g, out, len - 1)
    }

    /// `len(classes) × d_embed` stack of text embeddings.
    pub fn encode_classes(&self, g: &mut Graph, classes: &[usize], text_prompt: Option<Var>) -> Result<Var> {
        let rows = classes
            .iter()
            .map(|&c| self.encode_text(g, c, text_prompt))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }

    /// `len(tokens) × d_embed` stack of image embeddings.
    pub fn encode_images(&self, g: &mut Graph, tokens: &[&Tensor], visual_prompt: Option<Var>) -> Result<Var> {
        let rows = tokens
            .iter()
            .map(|t| {
                let x = g.constant(t);
                self.encode_image(g, x, visual_prompt)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> FrozenEncoderPair {
        FrozenEncoderPair::build(EncoderConfig::default(), 4).unwrap()
    }

    fn random_tokens(seed: u64, cfg: &EncoderConfig) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        gaussian_tensor(&mut rng, vec![cfg.n_patches, cfg.d_model], 1.0)
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(pair().checksum(), pair().checksum());
        assert_eq!(pair(), pair());
        let other = FrozenEncoderPair::build(
            EncoderConfig {
                seed: 8,
                ..EncoderConfig::default()
            },
            4,
        )
        .unwrap();
        assert_ne!(pair().checksum(), other.checksum());
    }

    #[test]
    fn rejects_single_class() {
        assert!(matches!(
            FrozenEncoderPair::build(EncoderConfig::default(), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = EncoderConfig {
            d_embed: 64,
            ..EncoderConfig::default()
        };
        assert!(FrozenEncoderPair::build(cfg, 4).is_err());
    }

    #[test]
    fn weight_mean_within_three_sigma() {
        let p = pair();
        let vals: Vec<f64> = p
            .tensors()
            .into_iter()
            .flat_map(|t| t.values().iter().copied())
            .filter(|v| *v != 0.0)
            .take(10_000)
            .collect();
        assert_eq!(vals.len(), 10_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let bound = 3.0 / (10_000f64).sqrt() * (1.0 / 32f64.sqrt());
        assert!(mean.abs() < bound, "mean {mean} bound {bound}");
    }

    #[test]
    fn image_output_is_unit_and_deterministic() {
        let p = pair();
        let x = random_tokens(1, p.config());
        let a = p.encode_image(&x, None).unwrap();
        let b = p.encode_image(&x, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!((norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn visual_prompt_changes_output() {
        let p = pair();
        let cfg = *p.config();
        let x = random_tokens(1, &cfg);
        let mut rng = SplitMix64::new(99);
        let prompt = gaussian_tensor(&mut rng, vec![cfg.prompt_len, cfg.d_model], 0.5);
        let plain = p.encode_image(&x, None).unwrap();
        let prompted = p.encode_image(&x, Some(&prompt)).unwrap();
        assert_ne!(plain, prompted);
        assert!((norm(&prompted) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_embeddings_unit_and_distinct() {
        let p = pair();
        let w0 = p.encode_text(0, None).unwrap();
        let w1 = p.encode_text(1, None).unwrap();
        assert!((norm(&w0) - 1.0).abs() < 1e-12);
        assert_ne!(w0, w1);
    }

    #[test]
    fn zero_prompt_differs_from_absent_prompt() {
        let p = pair();
        let cfg = p.config();
        let zero = Tensor::zeros(vec![cfg.prompt_len, cfg.d_model]);
        let absent = p.encode_text(2, None).unwrap();
        let zeroed = p.encode_text(2, Some(&zero)).unwrap();
        assert_ne!(absent, zeroed);
    }

    #[test]
    fn bad_shapes_and_indices() {
        let p = pair();
        let bad = Tensor::zeros(vec![3, 32]);
        assert!(matches!(p.encode_image(&bad, None), Err(Error::Dimension { .. })));
        assert!(matches!(p.encode_text(4, None), Err(Error::Index { .. })));
        let bad_prompt = Tensor::zeros(vec![2, 32]);
        assert!(matches!(
            p.encode_text(0, Some(&bad_prompt)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn frozen_weights_receive_no_gradient() {
        let p = pair();
        let cfg = *p.config();
        let mut g = Graph::new();
        let enc = p.bind(&mut g);
        let first_weight = Var::clone(&enc.image.blocks[0].wq);
        let mut rng = SplitMix64::new(5);
        let prompt = gaussian_tensor(&mut rng, vec![cfg.prompt_len, cfg.d_model], 0.1);
        let u = g.param(&prompt);
        let x = g.constant(&random_tokens(3, &cfg));
        let z = enc.encode_image(&mut g, x, Some(u)).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert!(g.grad(u).is_some());
        assert!(g.grad(first_weight).is_none());
        assert!(g.grad(enc.class_table).is_none());
    }
}
