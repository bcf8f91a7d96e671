//! Learnable text and visual prompts, the only trainable parameters.
//!
//! File layout: the ASCII header `DAPT1 <L> <d_model>\n` followed by
//! `2·L·d_model` little-endian `f64` values, text prompt rows first, then
//! visual prompt rows.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const MAGIC: &str = "DAPT1";
/// Standard deviation of the Gaussian text prompt initialization.
pub const TEXT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub text: Tensor,
    pub visual: Tensor,
}

/// Half-width of the Xavier uniform range for an `L × d_model` block.
pub fn xavier_bound(prompt_len: usize, d_model: usize) -> f64 {
    (6.0 / (prompt_len + d_model) as f64).sqrt()
}

impl PromptSet {
    /// Text prompt ~ N(0, 0.02²), visual prompt ~ U(−a, a) with
    /// `a = √(6/(L + d_model))`, drawn in that order from one stream.
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        Self::init_with_std(config, seed, TEXT_INIT_STD)
    }

    pub fn init_with_std(config: &EncoderConfig, seed: u64, text_std: f64) -> Self {
        let (l, d) = (config.prompt_len, config.d_model);
        let mut rng = SplitMix64::new(seed);
        let text = rng.gaussian_vec(l * d, text_std);
        let bound = xavier_bound(l, d);
        let visual = (0..l * d).map(|_| rng.symmetric_uniform(bound)).collect();
        Self {
            text: Tensor::new(vec![l, d], text).unwrap().with_requires_grad(true),
            visual: Tensor::new(vec![l, d], visual).unwrap().with_requires_grad(true),
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.text.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.text.shape()[1]
    }

    pub fn is_finite(&self) -> bool {
        self.text.is_finite() && self.visual.is_finite()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC} {} {}\n", self.prompt_len(), self.d_model()).into_bytes();
        for v in self.text.values().iter().chain(self.visual.values()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse {
                offset: bytes.len(),
                message: "missing header terminator".into(),
            })?;
        let header = std::str::from_utf8(&bytes[..newline]).map_err(|e| Error::Parse {
            offset: e.valid_up_to(),
            message: "header is not UTF-8".into(),
        })?;
        let mut fields = header.split(' ');
        if fields.next() != Some(MAGIC) {
            return Err(Error::Parse {
                offset: 0,
                message: format!("expected magic {MAGIC:?}"),
            });
        }
        let mut dim = |name: &str| -> Result<usize> {
            let field = fields.next().unwrap_or("");
            match field.parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(Error::Parse {
                    offset: 0,
                    message: format!("bad {name} field {field:?}"),
                }),
            }
        };
        let l = dim("L")?;
        let d = dim("d_model")?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                offset: newline,
                message: "trailing header fields".into(),
            });
        }

        let start = newline + 1;
        let payload = &bytes[start..];
        let row_bytes = d * 8;
        if !payload.len().is_multiple_of(row_bytes) {
            let whole = payload.len() / row_bytes * row_bytes;
            return Err(Error::Parse {
                offset: start + whole,
                message: format!("payload ends inside a row ({} stray bytes)", payload.len() - whole),
            });
        }
        let rows = payload.len() / row_bytes;
        if rows != 2 * l {
            return Err(Error::Format(format!(
                "header declares {l}x{d} per prompt ({} rows), body has {rows} rows",
                2 * l
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (text, visual) = values.split_at(l * d);
        Ok(Self {
            text: Tensor::new(vec![l, d], text.to_vec())?.with_requires_grad(true),
            visual: Tensor::new(vec![l, d], visual.to_vec())?.with_requires_grad(true),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks the prompts against an encoder configuration.
    pub fn check_config(&self, config: &EncoderConfig) -> Result<()> {
        let want = [config.prompt_len, config.d_model];
        for t in [&self.text, &self.visual] {
            if t.shape() != want {
                return Err(Error::Format(format!(
                    "prompt shape {:?} does not match encoder {:?}",
                    t.shape(),
                    want
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_dev(v: &[f64]) -> f64 {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn text_prompt_std_near_002() {
        let p = PromptSet::init(&EncoderConfig::default(), 11);
        let s = std_dev(p.text.values());
        assert!((s - 0.02).abs() < 0.3 * 0.02, "std {s}");
        assert_eq!(TEXT_INIT_STD, 0.02);
    }

    #[test]
    fn visual_prompt_within_xavier_bound() {
        let p = PromptSet::init(&EncoderConfig::default(), 11);
        let a = xavier_bound(16, 32);
        assert!((a - 0.353_553_390_593_273_8).abs() < 1e-15);
        assert!(p.visual.values().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn same_seed_same_prompts() {
        let cfg = EncoderConfig::default();
        assert_eq!(PromptSet::init(&cfg, 3), PromptSet::init(&cfg, 3));
        assert_ne!(PromptSet::init(&cfg, 3), PromptSet::init(&cfg, 4));
    }

    #[test]
    fn round_trip_bytes() {
        let p = PromptSet::init(&EncoderConfig::default(), 5);
        let q = PromptSet::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let bytes = PromptSet::init(&EncoderConfig::default(), 5).to_bytes();
        let err = PromptSet::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        let err = PromptSet::from_bytes(&bytes[..4]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn missing_row_is_format_error() {
        let bytes = PromptSet::init(&EncoderConfig::default(), 5).to_bytes();
        let err = PromptSet::from_bytes(&bytes[..bytes.len() - 32 * 8]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn bad_magic() {
        let err = PromptSet::from_bytes(b"NOPE 1 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
    }
}
