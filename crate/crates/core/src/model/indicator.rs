use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GAUSSIAN_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndicatorKind {
    /// Fixed random projection keyed by a stable hash of the site text.
    TextHash,
    Random,
    Gaussian,
    OneHot,
}

impl IndicatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IndicatorKind::TextHash => "text_hash",
            IndicatorKind::Random => "random",
            IndicatorKind::Gaussian => "gaussian",
            IndicatorKind::OneHot => "one_hot",
        }
    }
}

impl fmt::Display for IndicatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndicatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_hash" | "text" => Ok(IndicatorKind::TextHash),
            "random" => Ok(IndicatorKind::Random),
            "gaussian" => Ok(IndicatorKind::Gaussian),
            "one_hot" | "onehot" => Ok(IndicatorKind::OneHot),
            other => Err(Error::config(format!("unknown indicator kind {other:?}"))),
        }
    }
}

/// Frozen site-specific vector that steers channel selection. It is only
/// ever placed on a graph as a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Indicator {
    xi: Tensor,
    kind: IndicatorKind,
}

/// First eight bytes of SHA-256, little endian.
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

impl Indicator {
    pub fn build(kind: IndicatorKind, site_text: &str, site_id: usize, seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::dim("indicator dimension must be positive"));
        }
        let xi = match kind {
            IndicatorKind::TextHash => {
                let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(site_text));
                Tensor::randn(&[dim], 1.0 / (dim as f64).sqrt(), &mut rng)
            }
            IndicatorKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (site_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                Tensor::randn(&[dim], 1.0 / (dim as f64).sqrt(), &mut rng)
            }
            IndicatorKind::Gaussian => {
                let mu = site_id as f64;
                let data = (0..dim)
                    .map(|x| {
                        let d = x as f64 - mu;
                        (-(d * d) / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp()
                    })
                    .collect();
                Tensor::from_vec(data)
            }
            IndicatorKind::OneHot => {
                if site_id >= dim {
                    return Err(Error::dim(format!("one-hot index {site_id} >= dimension {dim}")));
                }
                let mut t = Tensor::zeros(&[dim]);
                t.data_mut()[site_id] = 1.0;
                t
            }
        };
        Ok(Self { xi, kind })
    }

    /// All-zero indicator, used when the prompt input is ablated.
    pub fn zeros(dim: usize) -> Self {
        Self {
            xi: Tensor::zeros(&[dim]),
            kind: IndicatorKind::Random,
        }
    }

    pub fn vector(&self) -> &Tensor {
        &self.xi
    }

    pub fn kind(&self) -> IndicatorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.xi.numel()
    }
}
