use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Branch capacity tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Capacity {
    H,
    L,
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capacity::H => "H",
            Capacity::L => "L",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width.
    pub d: usize,
    /// Keypoints per instance.
    pub k_kpt: usize,
    /// Branch count.
    pub g: usize,
    /// Capacity of each branch, indexed by zero-based group.
    pub alpha: Vec<Capacity>,
    /// Neighbours per keypoint in local aggregation.
    pub k_n: usize,
    /// Attention heads in low-capacity branches.
    pub heads: usize,
    pub encoder_hidden: usize,
    pub head_hidden: usize,
    /// Points emitted by the reconstruction decoder.
    pub recon_points: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for `n`-point inputs and the given capacities.
    pub fn desk(n: usize, alpha: Vec<Capacity>) -> Self {
        Self {
            d: 32,
            k_kpt: 16,
            g: alpha.len(),
            alpha,
            k_n: 8,
            heads: 2,
            encoder_hidden: 32,
            head_hidden: 64,
            recon_points: (n / 4).max(1),
        }
    }

    /// Smallest configuration used for gradient checks.
    pub fn tiny(alpha: Vec<Capacity>) -> Self {
        Self {
            d: 8,
            k_kpt: 4,
            g: alpha.len(),
            alpha,
            k_n: 4,
            heads: 2,
            encoder_hidden: 8,
            head_hidden: 8,
            recon_points: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d < 8 {
            return bad(format!("d must be >= 8, got {}", self.d));
        }
        if self.k_kpt < 4 {
            return bad(format!("k_kpt must be >= 4, got {}", self.k_kpt));
        }
        if self.g < 1 {
            return bad("g must be >= 1".into());
        }
        if self.alpha.len() != self.g {
            return bad(format!("alpha has {} entries for g={}", self.alpha.len(), self.g));
        }
        if self.k_n < 1 || self.heads < 1 || self.d % self.heads != 0 {
            return bad(format!("k_n={} heads={} d={} (d must divide by heads)", self.k_n, self.heads, self.d));
        }
        if self.encoder_hidden < 1 || self.head_hidden < 1 || self.recon_points < 1 {
            return bad("widths and recon_points must be positive".into());
        }
        Ok(())
    }
}
