//! Relative positional encodings (RoPE and Alibi) and their distance-limited
//! logit functions.
//!
//! The logit ops take an [`EffectiveDistance`] that has already been clamped by
//! the mask layer and apply the `1/sqrt(head_dim)` scaling, so attention code
//! stays encoding-agnostic.

use crate::error::{Error, Result};
use crate::mask::EffectiveDistance;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
    freqs: Vec<f64>,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "RoPE head_dim must be even and positive, got {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::invalid(format!("RoPE base must be > 1, got {base}")));
        }
        let freqs = (0..head_dim / 2)
            .map(|a| base.powf(-2.0 * a as f64 / head_dim as f64))
            .collect();
        Ok(Self {
            head_dim,
            base,
            freqs,
        })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, DEFAULT_ROPE_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Rotation speed of each coordinate pair, `base^(-2a/head_dim)`.
    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// `(cos, sin)` of every pair's angle at `position`.
    pub fn angles(&self, position: usize) -> Vec<(f64, f64)> {
        let p = position as f64;
        self.freqs
            .iter()
            .map(|w| {
                let (s, c) = (p * w).sin_cos();
                (c, s)
            })
            .collect()
    }
}

/// Rotates pairs `(x[2a], x[2a+1])` in place by the given `(cos, sin)` angles.
pub fn rotate_pairs(x: &mut [f64], angles: &[(f64, f64)]) {
    debug_assert_eq!(x.len(), 2 * angles.len());
    for (pair, &(c, s)) in x.chunks_exact_mut(2).zip(angles) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Applies the inverse (transposed) rotation in place.
pub fn unrotate_pairs(x: &mut [f64], angles: &[(f64, f64)]) {
    debug_assert_eq!(x.len(), 2 * angles.len());
    for (pair, &(c, s)) in x.chunks_exact_mut(2).zip(angles) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c + b * s;
        pair[1] = -a * s + b * c;
    }
}

/// Rotates `x` to `position`.
pub fn rope_rotate(x: &[f64], position: usize, params: &RopeParams) -> Result<Vec<f64>> {
    if x.len() != params.head_dim {
        return Err(Error::invalid(format!(
            "vector length {} does not match head_dim {}",
            x.len(),
            params.head_dim
        )));
    }
    let mut out = x.to_vec();
    rotate_pairs(&mut out, &params.angles(position));
    Ok(out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logit between an unrotated query and key at the given distance:
/// `<rotate(q, dist), k> / sqrt(head_dim)`.
pub fn rope_logit(
    q: &[f64],
    k: &[f64],
    dist: EffectiveDistance,
    params: &RopeParams,
) -> Result<f64> {
    if k.len() != q.len() {
        return Err(Error::invalid(format!(
            "query length {} differs from key length {}",
            q.len(),
            k.len()
        )));
    }
    let rotated = rope_rotate(q, dist.value(), params)?;
    Ok(dot(&rotated, k) / (q.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlibiParams {
    slopes: Vec<f64>,
}

impl AlibiParams {
    pub fn new(slopes: Vec<f64>) -> Result<Self> {
        if slopes.is_empty() {
            return Err(Error::invalid("Alibi needs one slope per head"));
        }
        if let Some(bad) = slopes.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(Error::invalid(format!(
                "Alibi slope must be positive, got {bad}"
            )));
        }
        Ok(Self { slopes })
    }

    /// Geometric slopes `m_h = 2^(-8h/H)` for `h = 1..=H`.
    pub fn geometric(n_heads: usize) -> Result<Self> {
        let h_total = n_heads as f64;
        Self::new(
            (1..=n_heads)
                .map(|h| 2f64.powf(-8.0 * h as f64 / h_total))
                .collect(),
        )
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }
}

/// Linear distance penalty `-m * dist`.
pub fn alibi_bias(dist: EffectiveDistance, slope: f64) -> f64 {
    -slope * dist.value() as f64
}

/// `<q, k> / sqrt(head_dim) - m * dist`.
pub fn alibi_logit(q: &[f64], k: &[f64], dist: EffectiveDistance, slope: f64) -> Result<f64> {
    if !(slope.is_finite() && slope >= 0.0) {
        return Err(Error::invalid(format!(
            "Alibi slope must be non-negative, got {slope}"
        )));
    }
    if k.len() != q.len() {
        return Err(Error::invalid(format!(
            "query length {} differs from key length {}",
            q.len(),
            k.len()
        )));
    }
    Ok(dot(q, k) / (q.len() as f64).sqrt() + alibi_bias(dist, slope))
}

/// Which relative encoding the attention logits use.
#[derive(Debug, Clone, PartialEq)]
pub enum PositionEncoding {
    Rope(RopeParams),
    Alibi(AlibiParams),
}

impl PositionEncoding {
    pub fn name(&self) -> &'static str {
        match self {
            PositionEncoding::Rope(_) => "rope",
            PositionEncoding::Alibi(_) => "alibi",
        }
    }
}
